"""Concrete execution of protocol processes.

A process is a calculus term: parallel composition, bounded replication,
channel input/output, randomness, lets, conditionals, events and
assumptions, with stack-machine programs as leaves. Execution is fully
deterministic given a seed: there is no scheduler nondeterminism, a
single output process is active at any time, and an output must find
exactly one waiting input on the matching channel.

Messages on channels are tuples of bitstrings; the empty message is the
empty tuple.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

from . import cvm as C
from . import terms as T
from .terms import SymExpr, Value


class ProcessError(Exception):
    """Malformed process (parse or well-formedness)."""


class TypedStuck(Exception):
    """A function application left its declared type in typed mode."""


# ---------------------------------------------------------------------------
# process syntax


@dataclass(frozen=True)
class PNil:
    pass


@dataclass(frozen=True)
class PPar:
    parts: tuple["Process", ...]


@dataclass(frozen=True)
class PRepl:
    index: str   # bound index variable
    bound: str   # symbolic bound name, resolved via replication bounds
    body: "Process"


@dataclass(frozen=True)
class PIn:
    chan: str
    params: tuple[SymExpr, ...]
    # None = wildcard, () = unit message, otherwise bound variables
    pattern: Optional[tuple[str, ...]]
    body: "Process"


@dataclass(frozen=True)
class POut:
    chan: str
    params: tuple[SymExpr, ...]
    args: tuple[SymExpr, ...]  # () sends the empty message
    body: "Process"


@dataclass(frozen=True)
class PNew:
    var: str
    tname: str  # fixed_n
    body: "Process"

    @property
    def size(self) -> int:
        if not self.tname.startswith("fixed_"):
            raise ProcessError(f"new {self.var}: type {self.tname} is not fixed-length")
        return int(self.tname.split("_")[1])


@dataclass(frozen=True)
class PLet:
    var: str
    expr: SymExpr
    body: "Process"
    strong: bool = False            # strong lets branch on undefinedness
    els: Optional["Process"] = None


@dataclass(frozen=True)
class PLetPat:
    """Pattern let: destructures expr by the named encoder."""

    fname: str
    vars: tuple[str, ...]
    expr: SymExpr
    body: "Process"
    els: Optional["Process"] = None


@dataclass(frozen=True)
class PIf:
    cond: SymExpr
    then: "Process"
    els: "Process"
    strong: bool = False  # strong equality: undefined sides compare unequal


@dataclass(frozen=True)
class PEvent:
    label: str
    args: tuple[SymExpr, ...]
    body: "Process"


@dataclass(frozen=True)
class PAssume:
    fact: SymExpr
    body: "Process"


@dataclass(frozen=True)
class PCVM:
    prog: C.Program


Process = Union[PNil, PPar, PRepl, PIn, POut, PNew, PLet, PLetPat, PIf,
                PEvent, PAssume, PCVM]

NIL = PNil()


def yield_proc(index_vars: tuple[str, ...]) -> Process:
    """The implicit else branch: output the empty message on yield."""
    return POut("yield", tuple(T.Var(v) for v in index_vars), (), NIL)


def index_bytes(k: int) -> bytes:
    """Replication indices as minimal big-endian bitstrings, from 1."""
    if k < 1:
        raise ValueError("replication indices start at 1")
    return k.to_bytes((k.bit_length() + 7) // 8, "big")


# ---------------------------------------------------------------------------
# well-formedness: every variable bound once, and before use


def check_well_formed(p: Process) -> None:
    bound_anywhere: set[str] = set()

    def bind(v: str, scope: frozenset[str]) -> frozenset[str]:
        if v in bound_anywhere:
            raise ProcessError(f"variable {v} bound more than once")
        bound_anywhere.add(v)
        return scope | {v}

    def use(e: SymExpr, scope: frozenset[str], what: str) -> None:
        missing = T.free_vars(e) - scope
        if missing:
            raise ProcessError(f"{what} uses unbound variable(s) {sorted(missing)}")

    def walk(q: Process, scope: frozenset[str]) -> None:
        if isinstance(q, PNil):
            return
        if isinstance(q, PPar):
            for part in q.parts:
                walk(part, scope)
            return
        if isinstance(q, PRepl):
            walk(q.body, bind(q.index, scope))
            return
        if isinstance(q, PIn):
            for e in q.params:
                use(e, scope, f"in({q.chan})")
            s = scope
            for v in q.pattern or ():
                s = bind(v, s)
            walk(q.body, s)
            return
        if isinstance(q, POut):
            for e in q.params + q.args:
                use(e, scope, f"out({q.chan})")
            walk(q.body, scope)
            return
        if isinstance(q, PNew):
            q.size  # validates the type name
            walk(q.body, bind(q.var, scope))
            return
        if isinstance(q, PLet):
            use(q.expr, scope, f"let {q.var}")
            if q.els is not None:
                walk(q.els, scope)
            walk(q.body, bind(q.var, scope))
            return
        if isinstance(q, PLetPat):
            use(q.expr, scope, f"let {q.fname}(..)")
            if q.els is not None:
                walk(q.els, scope)
            s = scope
            for v in q.vars:
                s = bind(v, s)
            walk(q.body, s)
            return
        if isinstance(q, PIf):
            use(q.cond, scope, "if")
            walk(q.then, scope)
            walk(q.els, scope)
            return
        if isinstance(q, PEvent):
            for e in q.args:
                use(e, scope, f"event {q.label}")
            walk(q.body, scope)
            return
        if isinstance(q, PAssume):
            use(q.fact, scope, "assume")
            walk(q.body, scope)
            return
        if isinstance(q, PCVM):
            return  # leaf environments are checked by their own machine
        raise ProcessError(f"unknown node {type(q).__name__}")

    walk(p, frozenset())


# ---------------------------------------------------------------------------
# trace records


@dataclass
class Trace:
    events: list[tuple[str, tuple[bytes, ...]]] = field(default_factory=list)
    outs: list[tuple[str, tuple[bytes, ...], tuple[bytes, ...]]] = field(default_factory=list)
    status: str = "running"
    detail: str = ""
    rand_bytes: int = 0
    steps: int = 0

    @property
    def prob_exponent(self) -> int:
        return self.rand_bytes

    @property
    def pr(self) -> float:
        return 2.0 ** (-8 * self.rand_bytes)

    def records(self) -> list[str]:
        out = []
        for label, args in self.events:
            out.append(" ".join(["EVENT", label] + [a.hex() or "-" for a in args]))
        for chan, params, vals in self.outs:
            name = chan + ("[" + ",".join(p.hex() for p in params) + "]" if params else "")
            out.append(" ".join(["OUT", name] + [v.hex() or "-" for v in vals]))
        out.append(f"PROB {self.prob_exponent}")
        out.append(f"STATUS {self.status}")
        return out

    def to_json(self) -> str:
        return json.dumps({
            "events": [[l, [a.hex() for a in args]] for l, args in self.events],
            "outs": [[c, [p.hex() for p in ps], [v.hex() for v in vs]]
                     for c, ps, vs in self.outs],
            "status": self.status,
            "detail": self.detail,
            "prob_exponent": self.prob_exponent,
            "steps": self.steps,
        }, indent=2)


@dataclass(frozen=True)
class Correspondence:
    """Every `target` event must have an earlier `source` event agreeing
    on the given (target_arg, source_arg) index pairs, unless an
    `exempt` event occurred earlier."""

    target: str
    source: str
    shared: tuple[tuple[int, int], ...] = ()
    exempt: Optional[str] = None


def check_property(events: list[tuple[str, tuple[bytes, ...]]],
                   prop: Correspondence) -> Optional[int]:
    """Index of the first violating event, or None."""
    for i, (label, args) in enumerate(events):
        if label != prop.target:
            continue
        ok = False
        for j in range(i):
            lbl2, args2 = events[j]
            if prop.exempt is not None and lbl2 == prop.exempt:
                ok = True
                break
            if lbl2 == prop.source and all(
                    t < len(args) and s < len(args2) and args[t] == args2[s]
                    for t, s in prop.shared):
                ok = True
                break
        if not ok:
            return i
    return None


# ---------------------------------------------------------------------------
# randomness sources


class ReplayExhausted(Exception):
    pass


class ReplayRNG:
    """Feeds a fixed byte sequence; raises when more is requested."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def randbytes(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ReplayExhausted()
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


# ---------------------------------------------------------------------------
# the machine


@dataclass
class CVMState:
    prog: C.Program
    env: dict[str, Value]
    pc: int = 0
    mem: dict[int, int] = field(default_factory=dict)
    allocated: set[int] = field(default_factory=set)
    var_addrs: dict[str, int] = field(default_factory=dict)
    bump: int = 0
    stack: list[Value] = field(default_factory=list)


class Stuck(Exception):
    def __init__(self, status: str, detail: str):
        self.status = status
        self.detail = detail
        super().__init__(detail)


VAR_BASE = 4096
ARENA_BASE = 1 << 16
ARENA_END = 1 << 20


@dataclass
class _Waiting:
    key: tuple  # (channel, param values)
    kind: str   # "iml" | "cvm"
    env: Optional[dict]
    node: Optional[PIn]
    state: Optional[CVMState]


class Runner:
    """Executes one seeded trace of a process system."""

    def __init__(self, system: Process, funcs: T.FuncTable,
                 rng, repl_bounds: Optional[Mapping[str, int]] = None,
                 patterns: Optional[Mapping[str, Callable]] = None,
                 maxlen: Optional[Mapping[str, int]] = None,
                 default_repl: int = 2,
                 ptrmap: Optional[T.PtrMap] = None):
        self.funcs = funcs
        self.rng = rng
        self.repl_bounds = dict(repl_bounds or {})
        self.default_repl = default_repl
        self.patterns = dict(patterns or {})
        self.maxlen = dict(maxlen or {})
        self.ptrmap = dict(ptrmap) if ptrmap else None
        self.trace = Trace()
        self.waiting: list[_Waiting] = []
        # the initial configuration: the system reduced to its waiting
        # inputs, and an active process announcing start to the context
        self.active: Optional[tuple] = ("iml", {}, POut("start", (), (), NIL))
        try:
            self._reduce({}, system)
        except Stuck as s:
            self.trace.status, self.trace.detail = s.status, s.detail
            self.active = None
        except TypedStuck as t:
            self.trace.status, self.trace.detail = "stuck-typed", str(t)
            self.active = None

    # -- helpers

    def _eval(self, e: SymExpr, env: dict) -> Value:
        return T.eval_expr(e, env, self.funcs, self.ptrmap)

    def _draw(self, n: int) -> bytes:
        b = self.rng.randbytes(n)
        self.trace.rand_bytes += n
        return b

    def _tick(self, max_steps: int) -> None:
        self.trace.steps += 1
        if self.trace.steps > max_steps:
            raise Stuck("max-steps", f"exceeded {max_steps} steps")

    # -- reduction of input processes into the waiting multiset

    def _reduce(self, env: dict, q: Process) -> None:
        if isinstance(q, PNil):
            return
        if isinstance(q, PPar):
            for part in q.parts:
                self._reduce(env, part)
            return
        if isinstance(q, PRepl):
            try:
                bound = int(q.bound)
            except ValueError:
                bound = self.repl_bounds.get(q.bound, self.default_repl)
            for k in range(1, bound + 1):
                env2 = dict(env)
                env2[q.index] = index_bytes(k)
                self._reduce(env2, q.body)
            return
        if isinstance(q, PIn):
            key = self._chan_key(q.chan, q.params, env, f"in({q.chan})")
            self.waiting.append(_Waiting(key, "iml", dict(env), q, None))
            return
        if isinstance(q, PCVM):
            st = self._leaf_init(q.prog, env)
            self._leaf_to_input(st)
            return
        raise Stuck("stuck", f"{type(q).__name__} is not an input process")

    def _chan_key(self, chan: str, params: tuple[SymExpr, ...], env: dict,
                  what: str) -> tuple:
        vals = []
        for e in params:
            v = self._eval(e, env)
            if not isinstance(v, bytes):
                raise Stuck("stuck", f"{what}: channel parameter undefined")
            vals.append(v)
        return (chan, tuple(vals))

    # -- machine leaves

    def _leaf_init(self, prog: C.Program, env: dict) -> CVMState:
        st = CVMState(prog, dict(env))
        addr = VAR_BASE
        for v, size in prog.vars:
            st.var_addrs[v] = addr
            st.allocated.update(range(addr, addr + size))
            addr += size
        st.bump = ARENA_BASE
        if not isinstance(prog.instrs[0], C.Init):
            raise Stuck("stuck", f"{prog.name}: missing Init")
        st.pc = 1
        return st

    def _leaf_to_input(self, st: CVMState) -> None:
        """Runs compute instructions until the next In, then registers
        the leaf as waiting; a leaf past its last output is dropped."""
        while st.pc < len(st.prog.instrs):
            ins = st.prog.instrs[st.pc]
            if isinstance(ins, C.In):
                key = self._chan_key(ins.chan, tuple(T.Var(p) for p in ins.params),
                                     st.env, f"{st.prog.name} In")
                self.waiting.append(_Waiting(key, "cvm", None, None, st))
                return
            if isinstance(ins, (C.Out, C.Test)):
                raise Stuck("stuck",
                            f"{st.prog.name}@{st.pc}: {type(ins).__name__} before "
                            "the next input")
            self._leaf_compute(st, ins)
            st.pc += 1

    def _leaf_compute(self, st: CVMState, ins: C.Instr) -> None:
        """One non-channel instruction. Raises Stuck when no rule applies."""
        p = st.prog.name

        def bad(msg: str) -> Stuck:
            return Stuck("stuck", f"{p}@{st.pc}: {msg}")

        def pop() -> Value:
            if not st.stack:
                raise bad("empty stack")
            return st.stack.pop()

        def pop_size(what: str) -> int:
            v = pop()
            n = T.decode_int(T.U8, v if isinstance(v, bytes) else None)
            if n is None or n < 0:
                raise bad(f"{what}: not a size value")
            return n

        def pop_ptr(what: str) -> int:
            v = pop()
            n = T.decode_int(T.U8, v if isinstance(v, bytes) else None)
            if n is None:
                raise bad(f"{what}: not a pointer value")
            return n

        if isinstance(ins, C.Const):
            st.stack.append(ins.value)
        elif isinstance(ins, C.Ref):
            st.stack.append(T.encode_int(T.U8, st.var_addrs[ins.var]))
        elif isinstance(ins, C.Malloc):
            l = pop_size("Malloc")
            if st.bump + l > ARENA_END:
                ptr = 0
            else:
                ptr = st.bump
                st.bump += l
                st.allocated.update(range(ptr, ptr + l))
            st.stack.append(T.encode_int(T.U8, ptr))
        elif isinstance(ins, C.Load):
            l = pop_size("Load")
            ptr = pop_ptr("Load")
            cells = range(ptr, ptr + l)
            if not all(a in st.mem for a in cells):
                raise bad("Load of uninitialized memory")
            st.stack.append(bytes(st.mem[a] for a in cells))
        elif isinstance(ins, C.Store):
            ptr = pop_ptr("Store")
            v = pop()
            if not isinstance(v, bytes):
                raise bad("Store of an undefined value")
            cells = range(ptr, ptr + len(v))
            if not all(a in st.allocated for a in cells):
                raise bad("Store outside allocated memory")
            for a, byte in zip(cells, v):
                st.mem[a] = byte
        elif isinstance(ins, C.New):
            l = pop_size("New")
            b = self._draw(l)
            st.env[ins.var] = b
            st.stack.append(b)
        elif isinstance(ins, C.Apply):
            args = tuple(pop() for _ in range(ins.arity))
            st.stack.append(C.apply_concrete(ins.sym, args, self.funcs))
        elif isinstance(ins, C.Dup):
            if not st.stack:
                raise bad("Dup on empty stack")
            st.stack.append(st.stack[-1])
        elif isinstance(ins, C.Assume):
            v = pop()
            if v == T.TRUE_BYTES:
                pass
            elif v == T.FALSE_BYTES:
                raise Stuck("assumption-violated", f"{p}@{st.pc}: assumption is false")
            else:
                raise bad("Assume on a non-boolean")
        elif isinstance(ins, C.ReadEnv):
            st.stack.append(st.env.get(ins.var))
        elif isinstance(ins, C.WriteEnv):
            st.env[ins.var] = pop()
        elif isinstance(ins, C.Event):
            args = tuple(pop() for _ in range(ins.arity))
            if any(not isinstance(a, bytes) for a in args):
                raise bad(f"event {ins.label} with an undefined argument")
            self.trace.events.append((ins.label, args))  # type: ignore[arg-type]
        elif isinstance(ins, C.TypeHint):
            pass
        else:
            raise bad(f"unexpected {type(ins).__name__}")

    # -- active stepping until an output action or termination

    def run(self, max_steps: int = 100_000) -> Trace:
        try:
            while self.active is not None:
                self._tick(max_steps)
                self._step()
        except Stuck as s:
            self.trace.status, self.trace.detail = s.status, s.detail
        except TypedStuck as t:
            self.trace.status, self.trace.detail = "stuck-typed", str(t)
        return self.trace

    def _step(self) -> None:
        kind = self.active[0]
        if kind == "iml":
            _, env, proc = self.active
            self._step_iml(env, proc)
        else:
            _, st = self.active
            self._step_cvm(st)

    def _finish(self, status: str, detail: str = "") -> None:
        self.trace.status = status
        self.trace.detail = detail
        self.active = None

    def _deliver(self, chan: str, param_vals: tuple, vals: tuple) -> None:
        """Records the output, then hands control to the unique waiting
        recipient. The sender continuation was already reduced."""
        self.trace.outs.append((chan, param_vals, vals))
        key = (chan, param_vals)
        matches = [w for w in self.waiting if w.key == key]
        if len(matches) > 1:
            raise Stuck("stuck", f"out({chan}): more than one matching input")
        if not matches:
            if chan == "yield":
                self._finish("yielded")
            else:
                self._finish("finished", f"out({chan}) had no recipient")
            return
        w = matches[0]
        self.waiting.remove(w)
        if w.kind == "iml":
            node = w.node
            env = dict(w.env)
            if node.pattern is not None:
                if len(node.pattern) != len(vals):
                    raise Stuck("stuck",
                                f"in({chan}): message arity {len(vals)} does not "
                                f"match pattern arity {len(node.pattern)}")
                for v, b in zip(node.pattern, vals):
                    env[v] = b
            self.active = ("iml", env, node.body)
        else:
            st = w.state
            ins = st.prog.instrs[st.pc]
            assert isinstance(ins, C.In)
            if ins.pattern is not None:
                if len(ins.pattern) != len(vals):
                    raise Stuck("stuck",
                                f"{st.prog.name}: message arity mismatch at In")
                for v, b in zip(ins.pattern, vals):
                    st.env[v] = b
            st.pc += 1
            self.active = ("cvm", st)

    def _send(self, chan: str, key_params: tuple, vals: tuple) -> None:
        if chan in self.maxlen:
            cap = self.maxlen[chan]
            vals = tuple(v[:cap] for v in vals)
        self._deliver(chan, key_params, vals)

    def _step_iml(self, env: dict, proc: Process) -> None:
        if isinstance(proc, PNil):
            self._finish("finished")
            return
        if isinstance(proc, POut):
            key = self._chan_key(proc.chan, proc.params, env, f"out({proc.chan})")
            vals = []
            for e in proc.args:
                v = self._eval(e, env)
                if not isinstance(v, bytes):
                    raise Stuck("stuck", f"out({proc.chan}): undefined message part")
                vals.append(v)
            self._reduce(env, proc.body)
            self._send(proc.chan, key[1], tuple(vals))
            return
        if isinstance(proc, PNew):
            env2 = dict(env)
            env2[proc.var] = self._draw(proc.size)
            self.active = ("iml", env2, proc.body)
            return
        if isinstance(proc, PLet):
            v = self._eval(proc.expr, env)
            if proc.strong and v is None:
                self.active = ("iml", env, proc.els if proc.els is not None
                               else yield_proc(()))
                return
            env2 = dict(env)
            env2[proc.var] = v
            self.active = ("iml", env2, proc.body)
            return
        if isinstance(proc, PLetPat):
            v = self._eval(proc.expr, env)
            matcher = self.patterns.get(proc.fname)
            if matcher is None:
                raise Stuck("stuck", f"no pattern matcher for {proc.fname}")
            fields = matcher(v) if v is not None else None
            if fields is None:
                self.active = ("iml", env, proc.els if proc.els is not None
                               else yield_proc(()))
                return
            if len(fields) != len(proc.vars):
                raise Stuck("stuck", f"pattern {proc.fname} arity mismatch")
            env2 = dict(env)
            for var, val in zip(proc.vars, fields):
                env2[var] = val
            self.active = ("iml", env2, proc.body)
            return
        if isinstance(proc, PIf):
            if proc.strong:
                if not isinstance(proc.cond, T.BsEq):
                    raise Stuck("stuck", "strong conditional is not an equality")
                a = self._eval(proc.cond.left, env)
                b = self._eval(proc.cond.right, env)
                take = a is not None and b is not None and a == b
            else:
                r = T.eval_fact(proc.cond, env, self.funcs, self.ptrmap)
                if r is None:
                    raise Stuck("stuck",
                                f"if {T.render(proc.cond)}: condition undefined")
                take = r
            self.active = ("iml", env, proc.then if take else proc.els)
            return
        if isinstance(proc, PEvent):
            vals = []
            for e in proc.args:
                v = self._eval(e, env)
                if not isinstance(v, bytes):
                    raise Stuck("stuck", f"event {proc.label}: undefined argument")
                vals.append(v)
            self.trace.events.append((proc.label, tuple(vals)))
            self.active = ("iml", env, proc.body)
            return
        if isinstance(proc, PAssume):
            r = T.eval_fact(proc.fact, env, self.funcs, self.ptrmap)
            if r is True:
                self.active = ("iml", env, proc.body)
                return
            if r is False:
                raise Stuck("assumption-violated", f"assume {T.render(proc.fact)}")
            raise Stuck("stuck", f"assume {T.render(proc.fact)}: undefined")
        if isinstance(proc, PIn):
            # an input directly in active position: park it and return
            # control to the environment
            key = self._chan_key(proc.chan, proc.params, env, f"in({proc.chan})")
            self.waiting.append(_Waiting(key, "iml", dict(env), proc, None))
            self._finish("finished", "active process turned into an input")
            return
        if isinstance(proc, (PPar, PRepl, PCVM)):
            raise Stuck("stuck", f"{type(proc).__name__} in output position")
        raise Stuck("stuck", f"unknown node {type(proc).__name__}")

    def _step_cvm(self, st: CVMState) -> None:
        if st.pc >= len(st.prog.instrs):
            self._finish("finished")
            return
        ins = st.prog.instrs[st.pc]
        if isinstance(ins, C.Out):
            vals = []
            for v in ins.args:
                b = st.env.get(v)
                if not isinstance(b, bytes):
                    raise Stuck("stuck",
                                f"{st.prog.name}@{st.pc}: output of undefined {v}")
                vals.append(b)
            key = self._chan_key(ins.chan, tuple(T.Var(p) for p in ins.params),
                                 st.env, f"{st.prog.name} Out")
            st.pc += 1
            self._leaf_to_input(st)
            self._send(ins.chan, key[1], tuple(vals))
            return
        if isinstance(ins, C.Test):
            v = st.stack.pop() if st.stack else None
            if v == T.TRUE_BYTES:
                st.pc += 1
                return
            if v == T.FALSE_BYTES:
                params = tuple(T.Var(p) for p in _leaf_indices(st))
                self.active = ("iml", dict(st.env),
                               POut("yield", params, (), NIL))
                return
            raise Stuck("stuck", f"{st.prog.name}@{st.pc}: Test on a non-boolean")
        if isinstance(ins, C.In):
            raise Stuck("stuck", f"{st.prog.name}@{st.pc}: input in output position")
        self._leaf_compute(st, ins)
        st.pc += 1


def _leaf_indices(st: CVMState) -> tuple[str, ...]:
    # yield channels carry the same parameters as the leaf's channels
    for ins in st.prog.instrs:
        if isinstance(ins, (C.In, C.Out)):
            return ins.params
    return ()


# ---------------------------------------------------------------------------
# entry points


def run_trace(system: Process, funcs: T.FuncTable, seed: int,
              max_steps: int = 100_000,
              repl_bounds: Optional[Mapping[str, int]] = None,
              patterns: Optional[Mapping[str, Callable]] = None,
              maxlen: Optional[Mapping[str, int]] = None,
              default_repl: int = 2,
              ptrmap: Optional[T.PtrMap] = None) -> Trace:
    rng = random.Random(seed)
    r = Runner(system, funcs, rng, repl_bounds, patterns, maxlen,
               default_repl, ptrmap)
    return r.run(max_steps)


def _run_replay(system: Process, funcs: T.FuncTable, data: bytes,
                **kw) -> Optional[Trace]:
    """Runs with a fixed randomness tape; None if the tape is too short."""
    rng = ReplayRNG(data)
    r = Runner(system, funcs, rng, kw.get("repl_bounds"), kw.get("patterns"),
               kw.get("maxlen"), kw.get("default_repl", 2), kw.get("ptrmap"))
    try:
        return r.run(kw.get("max_steps", 100_000))
    except ReplayExhausted:
        return None


def prefix_channels(prog: C.Program, idx: tuple[str, ...]) -> C.Program:
    """Embedding under replications: the indices become leading channel
    parameters of every In and Out of the leaf."""
    if not idx:
        return prog
    instrs: list[C.Instr] = []
    for ins in prog.instrs:
        if isinstance(ins, C.In):
            instrs.append(C.In(ins.chan, idx + ins.params, ins.pattern))
        elif isinstance(ins, C.Out):
            instrs.append(C.Out(ins.chan, idx + ins.params, ins.args))
        else:
            instrs.append(ins)
    return C.Program(prog.name, prog.vars, tuple(instrs))


def violates(trace: Trace, prop: Correspondence) -> bool:
    return check_property(trace.events, prop) is not None


def estimate_insec(system: Process, funcs: T.FuncTable, prop: Correspondence,
                   seeds: range, **kw) -> float:
    """Fraction of seeded runs whose trace violates the property."""
    if len(seeds) == 0:
        raise ValueError("estimate_insec needs at least one seed")
    bad = 0
    for seed in seeds:
        if violates(run_trace(system, funcs, seed, **kw), prop):
            bad += 1
    return bad / len(seeds)


def exact_insec(system: Process, funcs: T.FuncTable, prop: Correspondence,
                max_bytes: int = 2, **kw) -> float:
    """Exact violation probability by enumerating all randomness tapes,
    feasible when a run draws at most max_bytes random bytes."""
    total = 0.0
    tapes = [b""]
    while tapes:
        tape = tapes.pop()
        tr = _run_replay(system, funcs, tape, **kw)
        if tr is None:
            if len(tape) >= max_bytes:
                raise ValueError(f"runs draw more than {max_bytes} random bytes")
            tapes.extend(tape + bytes([b]) for b in range(256))
            continue
        if tr.rand_bytes != len(tape):
            # tape longer than needed: this run was already counted
            continue
        if violates(tr, prop):
            total += tr.pr
    return total


# ---------------------------------------------------------------------------
# process text format
#
# parallel   ::= branch ('|' branch)*
# branch     ::= '0' | 'yield' | '(' parallel ')' | '{' parallel '}'
#              | '!' i '<=' N branch
#              | 'in' '(' chan ',' pattern ')' ';' branch
#              | 'out' '(' chan ',' message ')' [';' branch]
#              | 'new' x ':' type ';' branch
#              | 'let' ['!'] x '=' expr 'in' branch ['else' branch]
#              | 'let' f '(' x,.. ')' '=' expr 'in' branch ['else' branch]
#              | 'if' ['!'] fact 'then' branch ['else' branch]
#              | 'event' l '(' args ')' ';' branch
#              | 'assume' fact ';' branch
#              | 'cvm' name
#
# A missing else yields; '|' binds looser than ';', so grouping is
# needed to put a parallel under a prefix. Channel parameters that are
# integer literals denote replication index values.

_P_TOKEN = re.compile(r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<hex>0x[0-9a-fA-F]*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_']*)
  | (?P<int>\d+)
  | (?P<str>'[^']*')
  | (?P<punct>&&|\|\||<=|>=|!=|[()\[\]{}|,;:=<>+\-*!_])
""", re.X)


def _ptokenize(text: str) -> list[tuple[str, str]]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _P_TOKEN.match(text, pos)
        if not m:
            raise ProcessError(f"bad character {text[pos]!r} at offset {pos}")
        pos = m.end()
        if m.lastgroup != "ws":
            toks.append((m.lastgroup, m.group()))
    return toks


_BRANCH_STOPS = {"|", ")", "}", "else"}
_OPENS = {"(": ")", "[": "]", "{": "}"}


class _PParser:
    def __init__(self, toks: list[tuple[str, str]],
                 progs: Mapping[str, C.Program]):
        self.toks = toks
        self.pos = 0
        self.progs = progs

    def peek(self) -> Optional[str]:
        return self.toks[self.pos][1] if self.pos < len(self.toks) else None

    def peek_kind(self) -> Optional[str]:
        return self.toks[self.pos][0] if self.pos < len(self.toks) else None

    def take(self) -> str:
        if self.pos >= len(self.toks):
            raise ProcessError("unexpected end of process text")
        self.pos += 1
        return self.toks[self.pos - 1][1]

    def expect(self, text: str) -> None:
        got = self.take()
        if got != text:
            raise ProcessError(f"expected {text!r}, got {got!r}")

    def ident(self, what: str) -> str:
        if self.peek_kind() != "ident":
            raise ProcessError(f"expected {what}, got {self.peek()!r}")
        return self.take()

    def collect(self, stop_puncts: frozenset, stop_words: frozenset) -> str:
        """Raw token text up to an unnested terminator (not consumed)."""
        out = []
        depth = 0
        while True:
            kind, text = (self.toks[self.pos] if self.pos < len(self.toks)
                          else (None, None))
            if kind is None:
                raise ProcessError(
                    f"ran out of input looking for {sorted(stop_puncts | stop_words)}")
            if depth == 0 and (text in stop_puncts or
                               (kind == "ident" and text in stop_words)):
                if not out:
                    raise ProcessError(f"empty expression before {text!r}")
                return " ".join(out)
            if text in _OPENS:
                depth += 1
            elif text in (")", "]", "}"):
                depth -= 1
                if depth < 0:
                    raise ProcessError("unbalanced brackets in expression")
            out.append(text)
            self.pos += 1

    def expr(self, stop_puncts=frozenset(), stop_words=frozenset()) -> SymExpr:
        text = self.collect(frozenset(stop_puncts), frozenset(stop_words))
        try:
            return T.parse_expr(text)
        except T.ParseError as e:
            raise ProcessError(f"bad expression {text!r}: {e}") from None

    def fact(self, stop_puncts=frozenset(), stop_words=frozenset()) -> SymExpr:
        text = self.collect(frozenset(stop_puncts), frozenset(stop_words))
        try:
            return T.parse_fact(text)
        except T.ParseError as err:
            # a bare bitstring expression is a valid condition; it only
            # steps when it evaluates to an exact boolean value
            try:
                e = T.parse_expr(text)
            except T.ParseError:
                raise ProcessError(f"bad condition {text!r}: {err}") from None
            if T.sort_of(e) is not T.Sort.BITS:
                raise ProcessError(f"bad condition {text!r}: {err}") from None
            return e

    # -- channels and messages

    def chan(self) -> tuple[str, tuple[SymExpr, ...]]:
        name = self.ident("a channel name")
        if self.peek() != "[":
            return name, ()
        self.take()
        params: list[SymExpr] = []
        if self.peek() == "]":
            self.take()
            return name, ()
        while True:
            params.append(self._chan_param())
            if self.peek() == ",":
                self.take()
                continue
            self.expect("]")
            return name, tuple(params)

    def _chan_param(self) -> SymExpr:
        if self.peek_kind() == "int" and self.toks[self.pos + 1][1] in (",", "]"):
            return T.Lit(index_bytes(int(self.take())))
        return self.expr(stop_puncts={",", "]"})

    def pattern(self) -> Optional[tuple[str, ...]]:
        if self.peek() == "_":
            self.take()
            return None
        if self.peek() == "(":
            self.take()
            if self.peek() == ")":
                self.take()
                return ()
            vs = [self.ident("a pattern variable")]
            while self.peek() == ",":
                self.take()
                vs.append(self.ident("a pattern variable"))
            self.expect(")")
            return tuple(vs)
        return (self.ident("a pattern"),)

    def message(self) -> tuple[SymExpr, ...]:
        """One message position: () | expr | (e1, .., en)."""
        if self.peek() == "(" and self.toks[self.pos + 1][1] == ")":
            self.pos += 2
            return ()
        if self.peek() == "(" and self._tuple_ahead():
            self.take()
            args = [self.expr(stop_puncts={",", ")"})]
            while self.peek() == ",":
                self.take()
                args.append(self.expr(stop_puncts={",", ")"}))
            self.expect(")")
            return tuple(args)
        return (self.expr(stop_puncts={")"}),)

    def _tuple_ahead(self) -> bool:
        """After '(': is there a comma before its matching close?"""
        depth = 0
        for kind, text in self.toks[self.pos + 1:]:
            if depth == 0 and text == ",":
                return True
            if text in _OPENS:
                depth += 1
            elif text in (")", "]", "}"):
                if depth == 0:
                    return False
                depth -= 1
        return False

    # -- processes

    def parallel(self, repl: tuple[str, ...]) -> Process:
        parts = [self.branch(repl)]
        while self.peek() == "|":
            self.take()
            parts.append(self.branch(repl))
        return parts[0] if len(parts) == 1 else PPar(tuple(parts))

    def _opt_continuation(self, repl: tuple[str, ...]) -> Process:
        if self.peek() == ";":
            self.take()
            return self.branch(repl)
        return NIL

    def _else(self, repl: tuple[str, ...]) -> Process:
        if self.peek() == "else":
            self.take()
            return self.branch(repl)
        return yield_proc(repl)

    def branch(self, repl: tuple[str, ...]) -> Process:
        t = self.peek()
        if t is None or t in _BRANCH_STOPS:
            raise ProcessError(f"expected a process, got {t!r}")
        if t == "0":
            self.take()
            return NIL
        if t == "yield":
            self.take()
            return yield_proc(repl)
        if t in ("(", "{"):
            close = _OPENS[self.take()]
            p = self.parallel(repl)
            self.expect(close)
            return p
        if t == "!":
            self.take()
            idx = self.ident("a replication index")
            self.expect("<=")
            if self.peek_kind() not in ("ident", "int"):
                raise ProcessError(f"bad replication bound {self.peek()!r}")
            bound = self.take()
            return PRepl(idx, bound, self.branch(repl + (idx,)))
        if t == "in":
            self.take()
            self.expect("(")
            name, params = self.chan()
            self.expect(",")
            pat = self.pattern()
            self.expect(")")
            self.expect(";")
            return PIn(name, params, pat, self.branch(repl))
        if t == "out":
            self.take()
            self.expect("(")
            name, params = self.chan()
            self.expect(",")
            args = self.message()
            self.expect(")")
            return POut(name, params, args, self._opt_continuation(repl))
        if t == "new":
            self.take()
            var = self.ident("a variable")
            self.expect(":")
            tname = self.ident("a type name")
            self.expect(";")
            return PNew(var, tname, self.branch(repl))
        if t == "let":
            self.take()
            strong = self.peek() == "!"
            if strong:
                self.take()
            name = self.ident("a variable")
            if not strong and self.peek() == "(":
                self.take()
                vs = [self.ident("a pattern variable")]
                while self.peek() == ",":
                    self.take()
                    vs.append(self.ident("a pattern variable"))
                self.expect(")")
                self.expect("=")
                e = self.expr(stop_words={"in"})
                self.expect("in")
                body = self.branch(repl)
                return PLetPat(name, tuple(vs), e, body, self._else(repl))
            self.expect("=")
            e = self.expr(stop_words={"in"})
            self.expect("in")
            body = self.branch(repl)
            if strong:
                return PLet(name, e, body, strong=True, els=self._else(repl))
            if self.peek() == "else":
                raise ProcessError("plain let takes no else; use let!")
            return PLet(name, e, body)
        if t == "if":
            self.take()
            strong = self.peek() == "!"
            if strong:
                self.take()
            cond = self.fact(stop_words={"then"})
            if strong and not isinstance(cond, T.BsEq):
                raise ProcessError("if! takes a bitstring equality")
            self.expect("then")
            then = self.branch(repl)
            return PIf(cond, then, self._else(repl), strong=strong)
        if t == "event":
            self.take()
            label = self.ident("an event label")
            self.expect("(")
            args: list[SymExpr] = []
            if self.peek() != ")":
                args.append(self.expr(stop_puncts={",", ")"}))
                while self.peek() == ",":
                    self.take()
                    args.append(self.expr(stop_puncts={",", ")"}))
            self.expect(")")
            self.expect(";")
            return PEvent(label, tuple(args), self.branch(repl))
        if t == "assume":
            self.take()
            f = self.fact(stop_puncts={";"})
            self.expect(";")
            return PAssume(f, self.branch(repl))
        if t == "cvm":
            self.take()
            if self.peek_kind() == "str":
                name = self.take()[1:-1]
            else:
                name = self.ident("a program name")
            if name not in self.progs:
                raise ProcessError(f"unknown program {name!r}")
            return PCVM(prefix_channels(self.progs[name], repl))
        raise ProcessError(f"expected a process, got {t!r}")


def parse_process(text: str,
                  progs: Optional[Mapping[str, C.Program]] = None) -> Process:
    p = _PParser(_ptokenize(text), progs or {})
    out = p.parallel(())
    if p.pos != len(p.toks):
        raise ProcessError(f"trailing input at {p.peek()!r}")
    return out


# ---------------------------------------------------------------------------
# pretty-printing


def _chan_str(chan: str, params: tuple[SymExpr, ...]) -> str:
    if not params:
        return chan
    return chan + "[" + ", ".join(_param_str(e) for e in params) + "]"


def _param_str(e: SymExpr) -> str:
    if isinstance(e, T.Lit):  # index literals print as the index value
        return str(int.from_bytes(e.data, "big"))
    return T.render(e)


def _msg_str(args: tuple[SymExpr, ...]) -> str:
    if not args:
        return "()"
    if len(args) == 1:
        return T.render(args[0])
    return "(" + ", ".join(T.render(a) for a in args) + ")"


def _is_yield(p: Process) -> bool:
    return (isinstance(p, POut) and p.chan == "yield" and not p.args
            and isinstance(p.body, PNil))


def render_process(p: Process, ind: str = "") -> str:
    nxt = ind + "  "
    if isinstance(p, PNil):
        return ind + "0"
    if isinstance(p, PPar):
        inner = ("\n" + ind + "|\n").join(render_process(q, nxt) for q in p.parts)
        return ind + "(\n" + inner + "\n" + ind + ")"
    if isinstance(p, PRepl):
        return (ind + f"!{p.index}<={p.bound} {{\n"
                + render_process(p.body, nxt) + "\n" + ind + "}")
    if isinstance(p, PIn):
        pat = "_" if p.pattern is None else (
            p.pattern[0] if len(p.pattern) == 1
            else "(" + ", ".join(p.pattern) + ")")
        return (ind + f"in({_chan_str(p.chan, p.params)}, {pat});\n"
                + render_process(p.body, ind))
    if isinstance(p, POut):
        if _is_yield(p):
            return ind + "yield"
        head = ind + f"out({_chan_str(p.chan, p.params)}, {_msg_str(p.args)})"
        if isinstance(p.body, PNil):
            return head + "; 0"
        return head + ";\n" + render_process(p.body, ind)
    if isinstance(p, PNew):
        return ind + f"new {p.var}: {p.tname};\n" + render_process(p.body, ind)
    if isinstance(p, PLet):
        bang = "!" if p.strong else ""
        head = ind + f"let{bang} {p.var} = {T.render(p.expr)} in\n"
        out = head + render_process(p.body, ind)
        if p.strong and p.els is not None and not _is_yield(p.els):
            out += "\n" + ind + "else\n" + render_process(p.els, nxt)
        return out
    if isinstance(p, PLetPat):
        vs = ", ".join(p.vars)
        out = (ind + f"let {p.fname}({vs}) = {T.render(p.expr)} in\n"
               + render_process(p.body, ind))
        if p.els is not None and not _is_yield(p.els):
            out += "\n" + ind + "else\n" + render_process(p.els, nxt)
        return out
    if isinstance(p, PIf):
        bang = "!" if p.strong else ""
        out = (ind + f"if{bang} {T.render(p.cond)} then\n"
               + render_process(p.then, nxt))
        if not _is_yield(p.els):
            out += "\n" + ind + "else\n" + render_process(p.els, nxt)
        return out
    if isinstance(p, PEvent):
        args = ", ".join(T.render(a) for a in p.args)
        return (ind + f"event {p.label}({args});\n" + render_process(p.body, ind))
    if isinstance(p, PAssume):
        return (ind + f"assume {T.render(p.fact)};\n" + render_process(p.body, ind))
    if isinstance(p, PCVM):
        return ind + f"cvm {p.prog.name}"
    raise ProcessError(f"unknown node {type(p).__name__}")
