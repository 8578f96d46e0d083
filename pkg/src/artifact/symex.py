"""Symbolic execution of stack programs into pointer-free process models.

Runs a stack program over expressions instead of bytes: memory is an
association from pointer bases to the expression the block currently
holds, the fact set grows along the single execution path, and channel
and environment instructions emit labels that fold into the extracted
process. Every memory access carries proof premises; one that cannot be
discharged from the current facts aborts extraction with a replayable
obligation record.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from . import cvm as C
from . import runtime as R
from . import terms as T
from .solver import EntailsResult, Prover, simplify
from .terms import SymExpr, render


class ExtractionError(Exception):
    def __init__(self, obligation: "Obligation"):
        self.obligation = obligation
        super().__init__(obligation.describe())


@dataclass
class SymState:
    """One point of the symbolic run: path facts, the allocation-table
    expression, per-block memory contents and the operand stack."""

    facts: list[SymExpr]
    alloc: SymExpr
    mem: dict[SymExpr, SymExpr]
    stack: list[SymExpr]

    def copy(self) -> "SymState":
        return SymState(list(self.facts), self.alloc, dict(self.mem),
                        list(self.stack))

    def describe(self, names=None) -> dict:
        return {
            "facts": [render(f, names) for f in self.facts],
            "alloc": render(self.alloc, names),
            "mem": {render(b, names): render(e, names)
                    for b, e in self.mem.items()},
            "stack": [render(e, names) for e in self.stack],
        }


@dataclass
class Obligation:
    """A proof premise the extractor could not discharge, with enough
    context to replay the check against the recorded state."""

    fact: SymExpr
    index: int        # instruction position in the program
    rule: str         # instruction mnemonic whose premise failed
    premise: str      # which premise, in words
    state: SymState
    result: Optional[EntailsResult] = None

    def describe(self, names=None) -> str:
        return (f"instruction {self.index} ({self.rule}): cannot establish "
                f"that {self.premise}: {render(self.fact, names)}")


@dataclass(frozen=True)
class Extraction:
    """Everything a run of the extractor produces besides the model."""

    prog: C.Program
    process: R.Process
    annotations: tuple[tuple[SymExpr, str], ...]
    # per output: the channel and the argument expressions with the
    # output variables' definitions substituted one level (diagnostics;
    # the model itself keeps the let-bound names)
    resolved_outs: tuple[tuple[str, tuple[SymExpr, ...]], ...]
    bases: tuple[SymExpr, ...]  # heap blocks in allocation order
    state: SymState
    aliases: dict[str, str]
    bindings: dict[str, SymExpr]


def store_merge(held: SymExpr, offset: SymExpr, value: SymExpr,
                facts: Union[Prover, Sequence[SymExpr]],
                funcs: Optional[T.FuncTable] = None,
                bound: int = 10000) -> Optional[SymExpr]:
    """New contents of a block holding `held` after writing `value` at
    byte `offset`: either the write lands strictly inside the current
    contents (splice) or it starts at or before their end (truncate and
    append). None when neither case is provable, which would leave a
    gap of unwritten bytes."""
    pv = facts if isinstance(facts, Prover) else Prover(list(facts), funcs,
                                                        bound)
    end = T.IntOp("+", offset, T.Len(value))
    if pv.holds(T.IntCmp("<", end, T.Len(held))):
        tail = T.Substr(held, end, T.IntOp("-", T.Len(held), end))
        merged = T.concat(T.Substr(held, T.IntLit(0), offset), value, tail)
    elif pv.holds(T.conj(T.IntCmp(">=", end, T.Len(held)),
                         T.IntCmp("<=", offset, T.Len(held)))):
        merged = T.concat(T.Substr(held, T.IntLit(0), offset), value)
    else:
        return None
    return simplify((), merged, funcs=funcs, bound=bound, prover=pv)


def _free_env_names(prog: C.Program) -> set[str]:
    """Environment variables read or sent before the program binds them,
    plus channel index parameters; these names belong to the context."""
    bound: set[str] = set()
    free: set[str] = set()
    for ins in prog.instrs:
        if isinstance(ins, C.ReadEnv):
            if ins.var not in bound:
                free.add(ins.var)
        elif isinstance(ins, C.Out):
            free.update(a for a in ins.args if a not in bound)
            free.update(ins.params)
        elif isinstance(ins, C.In):
            free.update(ins.params)
            if ins.pattern:
                bound.update(ins.pattern)
        elif isinstance(ins, (C.New, C.WriteEnv)):
            bound.add(ins.var)
    return free


def _truth_operands(fact: SymExpr) -> list[SymExpr]:
    """Machine expressions whose truthiness the fact tests."""
    if isinstance(fact, T.Truth):
        return [fact.arg]
    if isinstance(fact, T.Not):
        return _truth_operands(fact.arg)
    if isinstance(fact, (T.And, T.Or)):
        out: list[SymExpr] = []
        for p in fact.parts:
            out.extend(_truth_operands(p))
        return out
    return []


class SymExec:
    """Single-pass symbolic run of one program. `step` executes one
    instruction and records its model label, if any; `run` drives the
    whole program and assembles the extracted process."""

    def __init__(self, prog: C.Program, funcs: Optional[T.FuncTable] = None,
                 free_vars: Sequence[str] = (), bound: int = 20000,
                 backend: Optional[str] = None, record_states: bool = False):
        self.prog = prog
        self.funcs = funcs
        self.bound = bound
        mem: dict[SymExpr, SymExpr] = {}
        facts: list[SymExpr] = []
        for v, size in prog.vars:
            b = T.AddrBase(v, size)
            mem[b] = T.EPSILON
            facts.append(T.IntCmp("!=", b, T.IntLit(0)))
        self.state = SymState(facts, T.AllocInit(prog.vars), mem, [])
        self.prover = Prover(facts, funcs, bound, backend)
        self.pc = 0
        self.labels: list[tuple] = []
        self.annotations: list[tuple[SymExpr, str]] = []
        self.resolved_outs: list[tuple[str, tuple[SymExpr, ...]]] = []
        self.bases: list[SymExpr] = []
        self.alias: dict[str, str] = {}        # program name -> model name
        self.binding: dict[str, SymExpr] = {}  # model name -> let expression
        self.used: set[str] = set(free_vars) | _free_env_names(prog)
        self.snapshots: Optional[list[tuple[int, SymState]]] = \
            [] if record_states else None
        self.leaf_params: tuple[str, ...] = next(
            (i.params for i in prog.instrs if isinstance(i, (C.In, C.Out))),
            ())

    # -- bookkeeping

    def _fail(self, fact: SymExpr, premise: str,
              result: Optional[EntailsResult] = None):
        ins = self.prog.instrs[self.pc]
        ob = Obligation(fact, self.pc, type(ins).__name__, premise,
                        self.state.copy(), result)
        raise ExtractionError(ob)

    def _check(self, fact: SymExpr, premise: str) -> None:
        if not self.prover.holds(fact):
            self._fail(fact, premise, self.prover.entails(fact))

    def _add_fact(self, f: SymExpr) -> None:
        self.state.facts.append(f)
        self.prover.add_fact(f)

    def _simplify(self, e: SymExpr) -> SymExpr:
        return simplify((), e, funcs=self.funcs, bound=self.bound,
                        prover=self.prover)

    def _pop(self) -> SymExpr:
        if not self.state.stack:
            self._fail(T.FALSE, "the operand stack has the required depth")
        return self.state.stack.pop()

    def _push(self, e: SymExpr) -> None:
        self.state.stack.append(e)

    def _fresh(self, name: str) -> str:
        if name not in self.used:
            self.used.add(name)
            return name
        k = 1
        while f"{name}{k}" in self.used:
            k += 1
        self.used.add(f"{name}{k}")
        return f"{name}{k}"

    def _as_fact(self, e: SymExpr) -> SymExpr:
        return e if T.sort_of(e) is T.Sort.BOOL else T.Truth(e)

    def _block_size(self, base: SymExpr) -> SymExpr:
        if isinstance(base, T.AddrBase):
            return T.IntLit(base.size)
        assert isinstance(base, T.MallocBase)
        return base.tlen

    def _popped_pointer(self, what: str) -> T.Ptr:
        p = self._simplify(self._pop())
        if not isinstance(p, T.Ptr):
            self._fail(T.Defined(p),
                       f"the {what} target reduces to block-and-offset form")
        if p.base not in self.state.mem:
            self._fail(T.Defined(p), f"the {what} target names a known block")
        self._check(T.Defined(p), f"the {what} offset stays within its block")
        self._check(T.IntCmp("!=", p.base, T.IntLit(0)),
                    f"the {what} block address is nonzero")
        return p

    # -- one instruction

    def step(self) -> bool:
        if self.pc >= len(self.prog.instrs):
            return False
        self._dispatch(self.prog.instrs[self.pc])
        if self.snapshots is not None:
            self.snapshots.append((self.pc, self.state.copy()))
        self.pc += 1
        return True

    def _dispatch(self, ins: C.Instr) -> None:
        st = self.state
        if isinstance(ins, C.Init):
            return
        if isinstance(ins, C.In):
            pat = ins.pattern
            if pat:
                fresh = tuple(self._fresh(v) for v in pat)
                for old, new in zip(pat, fresh):
                    self.alias[old] = new
                for new in fresh:
                    self._add_fact(T.Defined(T.Var(new)))
                pat = fresh
            self.labels.append(("in", ins.chan, ins.params, pat))
            return
        if isinstance(ins, C.Out):
            names = tuple(self.alias.get(a, a) for a in ins.args)
            self.used.update(names)
            self.labels.append(("out", ins.chan, ins.params,
                                tuple(T.Var(n) for n in names)))
            self.resolved_outs.append(
                (ins.chan,
                 tuple(self.binding.get(n, T.Var(n)) for n in names)))
            return
        if isinstance(ins, C.Const):
            self._push(T.IntLit(ins.value) if isinstance(ins.value, int)
                       else T.Lit(ins.value))
            return
        if isinstance(ins, C.Ref):
            try:
                size = self.prog.var_size(ins.var)
            except KeyError:
                self._fail(T.FALSE, f"variable {ins.var} is declared")
            self._push(T.Ptr(T.AddrBase(ins.var, size), T.IntLit(0)))
            return
        if isinstance(ins, C.Malloc):
            e_l = self._pop()
            self._check(T.Defined(T.Val(T.U8, e_l)),
                        "the size operand is a well-formed size value")
            # the simplified form is a fixpoint, so the base expression
            # (which is the block's identity) survives later simplification
            size = self._simplify(T.Val(T.U8, e_l))
            base = T.MallocBase(st.alloc, size)
            st.alloc = T.AllocExt(st.alloc, size)
            st.mem[base] = T.EPSILON
            self.bases.append(base)
            self._push(T.Ptr(base, T.IntLit(0)))
            return
        if isinstance(ins, C.Load):
            e_l = self._pop()
            p = self._popped_pointer("load")
            got = T.Substr(st.mem[p.base], p.off, T.Val(T.U8, e_l))
            self._check(T.Defined(got),
                        "the loaded range is initialized and in bounds")
            self._push(self._simplify(got))
            return
        if isinstance(ins, C.Store):
            p = self._popped_pointer("store")
            value = self._pop()
            held = st.mem[p.base]
            merged = store_merge(held, p.off, value, self.prover,
                                 funcs=self.funcs, bound=self.bound)
            if merged is None:
                end = T.IntOp("+", p.off, T.Len(value))
                cases = T.disj(
                    T.IntCmp("<", end, T.Len(held)),
                    T.conj(T.IntCmp(">=", end, T.Len(held)),
                           T.IntCmp("<=", p.off, T.Len(held))))
                self._fail(cases, "the store lands inside or directly after "
                           "the block's current contents",
                           self.prover.entails(cases))
            bound_fact = T.IntCmp("<=", T.Len(merged),
                                  self._block_size(p.base))
            self._check(bound_fact,
                        "the stored contents fit the allocated block")
            st.mem[p.base] = merged
            return
        if isinstance(ins, C.New):
            e_l = self._pop()
            n = None
            if (isinstance(e_l, T.Enc) and e_l.ity == T.U8
                    and isinstance(e_l.arg, T.IntLit)):
                n = e_l.arg.n
            elif isinstance(e_l, T.Lit) and len(e_l.data) == 8:
                n = int.from_bytes(e_l.data, "big")
            if n is None or n < 0:
                self._fail(T.FALSE,
                           "the fresh-bytes length is a literal size")
            name = self._fresh(ins.var)
            self.alias[ins.var] = name
            self.labels.append(("new", name, n))
            self._add_fact(T.IntCmp("=", T.Len(T.Var(name)), T.IntLit(n)))
            self._push(T.Var(name))
            return
        if isinstance(ins, C.Apply):
            args = tuple(self._pop() for _ in range(ins.arity))
            self._push(C.apply_symbolic(ins.sym, args))
            return
        if isinstance(ins, C.Dup):
            if not st.stack:
                self._fail(T.FALSE,
                           "the operand stack has the required depth")
            self._push(st.stack[-1])
            return
        if isinstance(ins, C.Test):
            fact = self._as_fact(self._pop())
            for m in _truth_operands(fact):
                self._check(T.Defined(m), "the tested expression is defined")
            cond = self._simplify(fact)
            self.labels.append(("if", cond))
            self._add_fact(cond)
            return
        if isinstance(ins, C.Assume):
            fact = self._simplify(self._as_fact(self._pop()))
            self.labels.append(("assume", fact))
            self._add_fact(fact)
            return
        if isinstance(ins, C.ReadEnv):
            name = self.alias.get(ins.var, ins.var)
            self.used.add(name)
            self._push(T.Var(name))
            return
        if isinstance(ins, C.WriteEnv):
            e = self._pop()
            name = self._fresh(ins.var)
            self.alias[ins.var] = name
            self.binding[name] = e
            self.labels.append(("let", name, e))
            self._add_fact(T.BsEq(T.Var(name), e))
            return
        if isinstance(ins, C.Event):
            args = tuple(self._pop() for _ in range(ins.arity))
            for a in args:
                self._check(T.Defined(a), "the event argument is defined")
            self.labels.append(("event", ins.label, args))
            return
        if isinstance(ins, C.TypeHint):
            if not st.stack:
                self._fail(T.FALSE,
                           "the operand stack has the required depth")
            self.annotations.append((st.stack[-1], ins.tname))
            return
        raise AssertionError(type(ins).__name__)

    # -- model assembly

    def assemble(self) -> R.Process:
        body: R.Process = R.NIL
        for lab in reversed(self.labels):
            kind = lab[0]
            if kind == "in":
                _, chan, params, pat = lab
                body = R.PIn(chan, tuple(T.Var(p) for p in params), pat, body)
            elif kind == "out":
                _, chan, params, args = lab
                body = R.POut(chan, tuple(T.Var(p) for p in params), args,
                              body)
            elif kind == "new":
                body = R.PNew(lab[1], f"fixed_{lab[2]}", body)
            elif kind == "let":
                body = R.PLet(lab[1], lab[2], body)
            elif kind == "if":
                body = R.PIf(lab[1], body, R.yield_proc(self.leaf_params))
            elif kind == "assume":
                body = R.PAssume(lab[1], body)
            else:
                body = R.PEvent(lab[1], lab[2], body)
        R.check_well_formed(body)
        return body

    def run(self) -> Extraction:
        while self.step():
            pass
        return Extraction(self.prog, self.assemble(),
                          tuple(self.annotations),
                          tuple(self.resolved_outs), tuple(self.bases),
                          self.state, dict(self.alias), dict(self.binding))


def extract_model(prog: C.Program, funcs: Optional[T.FuncTable] = None,
                  free_vars: Sequence[str] = ()) -> R.Process:
    """The process whose labels a full symbolic run of `prog` emits."""
    C.validate(prog)
    return SymExec(prog, funcs, free_vars).run().process


def base_addresses(prog: C.Program,
                   bases: Sequence[SymExpr]) -> dict[SymExpr, int]:
    """A concrete nonzero address for every pointer base: declared
    variables in the interpreter's layout, heap blocks well apart. Feeds
    the interpreter's pointer map so extracted models that mention base
    addresses (null checks) can run."""
    out: dict[SymExpr, int] = {}
    addr = R.VAR_BASE
    for v, size in prog.vars:
        out[T.AddrBase(v, size)] = addr
        addr += size
    for i, b in enumerate(bases):
        out[b] = R.ARENA_BASE + (i << 16)
    return out
