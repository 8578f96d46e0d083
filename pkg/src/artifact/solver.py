"""Fact rewriting, entailment and simplification.

Facts coming out of symbolic execution talk about partial machine-level
operations: integer decodings that fail on wrong lengths, substrings that
fall off the end, pointer offsets that leave their object. The decision
core only understands total linear integer arithmetic, so facts are first
rewritten into that fragment. Every rewrite that is only valid under a
side condition spawns that condition as a numbered fact of its own; the
conditions are rewritten recursively and either absorbed (when their
rewritten form is already part of the main fact) or collected into a
guard.

Two directions of rewriting exist and they are not symmetric:

* ``rewrite_assert`` prepares a fact that is being assumed. Integer
  comparisons are strengthened in place with the definedness of their
  operands, so the resulting conjunction carries its own preconditions.
* ``rewrite_to_compatible`` prepares a fact that is to be proven. Nothing
  is strengthened; the unabsorbed side conditions are returned and must
  be proven alongside.

``entails`` runs both directions and decides validity of the resulting
implication with Fourier-Motzkin elimination over integer atoms
(total length/value surrogates, base addresses) plus opaque boolean
atoms for everything that has no arithmetic meaning. The verdict "yes"
is sound; "unknown" is returned whenever the core cannot conclude.

``simplify`` reuses the same rewrite rules, firing a rule only when its
premise is entailed by an ambient fact set, plus substring rules that
undo concatenations and nested extractions.
"""

from __future__ import annotations

import subprocess
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .terms import (
    AddrBase, And, Apply, BinArith, BinCmp, BoolLit, BsEq, Cast, Concat,
    Defined, Enc, FuncTable, IntCmp, IntLit, IntOp, IntType, Len, LenY,
    Lit, MallocBase, Not, Or, Ptr, PtrArith, PtrDiff, Sort, Substr,
    SymExpr, Truth, TRUE, FALSE, EPSILON, NULL_PTR, S4, S8, U8, Val,
    ValY, Var, children, conj, disj, in_dom, in_range, neg, rebuild,
    render, sort_of, truthy,
)


class SolverLimit(Exception):
    """Step budget exhausted; carries the partial rewrite log."""

    def __init__(self, message: str, log: Optional["RewriteLog"] = None):
        super().__init__(message)
        self.log = log


def conjuncts(f: SymExpr) -> list[SymExpr]:
    if isinstance(f, And):
        return list(f.parts)
    if f == TRUE:
        return []
    return [f]


def _uniq(parts: Iterable[SymExpr]) -> list[SymExpr]:
    out: list[SymExpr] = []
    for p in parts:
        if p not in out:
            out.append(p)
    return out


def _conj_d(*parts: SymExpr) -> SymExpr:
    flat: list[SymExpr] = []
    for p in parts:
        flat.extend(conjuncts(p))
    return conj(*_uniq(flat))


def _range_conds(ity: IntType, t: SymExpr) -> list[SymExpr]:
    return [IntCmp(">=", t, IntLit(ity.lo)), IntCmp("<=", t, IntLit(ity.hi))]


def _len_sum(parts: Sequence[SymExpr]) -> SymExpr:
    if not parts:
        return IntLit(0)
    t: SymExpr = Len(parts[0])
    for p in parts[1:]:
        t = IntOp("+", t, Len(p))
    return t


# ---------------------------------------------------------------------------
# rewrite rules
#
# Each entry yields (result, side conditions, rule name). The engine spawns
# the conditions as separate facts; simplify() instead demands that the
# ambient fact set entails them.

_CMP_TO_INT = {"==": "=", "!=": "!=", "<": "<", ">": ">", "<=": "<=", ">=": ">="}


def _match_rules(e: SymExpr):
    if isinstance(e, Len):
        a = e.arg
        if isinstance(a, Lit):
            yield IntLit(len(a.data)), [], "len-lit"
        elif isinstance(a, Enc):
            yield IntLit(a.ity.width), [Defined(a)], "len-enc"
        elif isinstance(a, BinArith):
            yield IntLit(a.ity.width), [Defined(a)], "len-arith"
        elif isinstance(a, Cast):
            yield IntLit(a.dst.width), [Defined(a)], "len-cast"
        elif isinstance(a, Concat):
            yield _len_sum(a.parts), [], "len-concat"
        elif isinstance(a, Substr):
            yield a.length, [Defined(a)], "len-substr"
        elif isinstance(a, Ptr):
            yield IntLit(8), [Defined(a)], "len-ptr"
    elif isinstance(e, Val):
        a = e.arg
        if isinstance(a, Enc) and a.ity == e.ity:
            yield a.arg, [Defined(a)], "val-enc"
            if isinstance(a.arg, Len):
                # a length fits the 8-byte size type whenever it is defined
                # at all, and both sides are undefined together, so only
                # narrower encodings need a bound
                cs = ([] if a.ity.hi >= U8.hi
                      else [IntCmp("<=", a.arg, IntLit(a.ity.hi))])
                yield a.arg, cs, "val-enc-len"
        elif isinstance(a, BinArith) and a.ity == e.ity:
            t = IntOp(a.op, Val(e.ity, a.left), Val(e.ity, a.right))
            yield t, [Defined(a)] + _range_conds(e.ity, t), "val-arith"
        elif isinstance(a, Cast) and a.dst == e.ity:
            inner = Val(a.src, a.arg)
            yield inner, [Defined(a)] + _range_conds(a.dst, inner), "val-cast"
        elif isinstance(a, Ptr) and e.ity == U8:
            addr = a.base if a.off == IntLit(0) else IntOp("+", a.base, a.off)
            yield addr, [Defined(a)], "val-ptr"
    elif isinstance(e, Enc):
        a = e.arg
        if isinstance(a, Val) and a.ity == e.ity:
            yield a.arg, [Defined(e)], "enc-val"
    elif isinstance(e, Defined):
        r = _defined_rule(e)
        if r is not None:
            yield r
    elif isinstance(e, Truth):
        r = _truth_rule(e)
        if r is not None:
            yield r
    elif isinstance(e, Cast):
        a = e.arg
        if isinstance(a, Enc) and a.ity == e.src:
            cs = _uniq(_range_conds(e.src, a.arg) + _range_conds(e.dst, a.arg))
            yield Enc(e.dst, a.arg), cs, "cast-enc"
        elif isinstance(a, Cast) and a.dst == e.src:
            v = Val(a.src, a.arg)
            cs = _uniq(_range_conds(e.src, v) + _range_conds(e.dst, v))
            yield Cast(a.src, e.dst, a.arg), cs, "cast-cast"
        if e.src == e.dst:
            yield a, [in_dom(e.src, a)], "cast-id"
    elif isinstance(e, BinArith):
        l, r = e.left, e.right
        if (isinstance(l, Enc) and isinstance(r, Enc)
                and l.ity == e.ity and r.ity == e.ity
                and isinstance(l.arg, IntLit) and isinstance(r.arg, IntLit)
                and e.ity.lo <= l.arg.n <= e.ity.hi
                and e.ity.lo <= r.arg.n <= e.ity.hi):
            # both operands are in-range literal encodings, so both sides
            # are total: machine arithmetic wraps by definition
            if e.op == "+":
                n = l.arg.n + r.arg.n
            elif e.op == "-":
                n = l.arg.n - r.arg.n
            else:
                n = l.arg.n * r.arg.n
            yield Enc(e.ity, IntLit(e.ity.wrap(n))), [], "arith-fold"
    elif isinstance(e, PtrArith):
        if isinstance(e.ptr, Ptr):
            off = IntOp("+" if e.op == "+" else "-", e.ptr.off, Val(e.ity, e.arg))
            res = Ptr(e.ptr.base, off)
            yield res, [Defined(e.ptr), Defined(res)], "ptr-arith"
    elif isinstance(e, PtrDiff):
        l, r = e.left, e.right
        if isinstance(l, Ptr) and isinstance(r, Ptr) and l.base == r.base:
            res = Enc(S8, IntOp("-", l.off, r.off))
            yield res, [Defined(l), Defined(r), Defined(res)], "ptr-diff"
    elif isinstance(e, Concat):
        flat: list[SymExpr] = []
        for p in e.parts:
            flat.extend(p.parts if isinstance(p, Concat) else (p,))
        parts: list[SymExpr] = []
        for p in flat:
            if isinstance(p, Lit) and not p.data:
                continue
            if parts and isinstance(p, Lit) and isinstance(parts[-1], Lit):
                parts[-1] = Lit(parts[-1].data + p.data)
            else:
                parts.append(p)
        if not parts:
            norm: SymExpr = EPSILON
        elif len(parts) == 1:
            norm = parts[0]
        else:
            norm = Concat(tuple(parts))
        if norm != e:
            yield norm, [], "concat-norm"
    elif isinstance(e, IntCmp):
        r = _memcmp_rule(e)
        if r is not None:
            yield r


def _defined_rule(e: Defined):
    a = e.arg
    if isinstance(a, (BoolLit, IntCmp, BsEq, Defined, Truth)):
        return TRUE, [], "def-fact"
    if isinstance(a, (IntLit, Lit)):
        return TRUE, [], "def-lit"
    if isinstance(a, (LenY, ValY)):
        return TRUE, [], "def-total"
    if isinstance(a, (AddrBase, MallocBase)):
        # a base address is a plain integer; the address map is total
        return TRUE, [], "def-base"
    if isinstance(a, IntOp):
        return _conj_d(Defined(a.left), Defined(a.right)), [], "def-int-op"
    if isinstance(a, Len):
        return Defined(a.arg), [], "def-len"
    if isinstance(a, Substr):
        f = _conj_d(
            IntCmp(">=", Len(a.base), IntOp("+", a.pos, a.length)),
            IntCmp(">=", a.pos, IntLit(0)),
            IntCmp(">=", a.length, IntLit(0)),
        )
        return f, [], "def-substr"
    if isinstance(a, Concat):
        return _conj_d(*[Defined(p) for p in a.parts]), [], "def-concat"
    if isinstance(a, Enc):
        if a == NULL_PTR:
            return TRUE, [], "def-null"
        return in_range(a.ity, a.arg), [], "def-enc"
    if isinstance(a, Val):
        return in_dom(a.ity, a.arg), [], "def-val"
    if isinstance(a, (BinArith, BinCmp)):
        return _conj_d(in_dom(a.ity, a.left), in_dom(a.ity, a.right)), [], "def-machine-op"
    if isinstance(a, Cast):
        return in_dom(a.src, a.arg), [], "def-cast"
    if isinstance(a, Ptr):
        if a.off == IntLit(0):
            return TRUE, [], "def-ptr-zero"
        if isinstance(a.base, AddrBase):
            f = _conj_d(IntCmp(">=", a.off, IntLit(0)),
                        IntCmp("<=", a.off, IntLit(a.base.size)))
            return f, [], "def-ptr-addr"
        assert isinstance(a.base, MallocBase)
        inside = _conj_d(IntCmp("!=", a.base, IntLit(0)),
                         IntCmp(">=", a.off, IntLit(0)),
                         IntCmp("<=", a.off, a.base.tlen))
        return disj(IntCmp("=", a.off, IntLit(0)), inside), [], "def-ptr-malloc"
    return None


def _truth_rule(e: Truth):
    a = e.arg
    if isinstance(a, BinCmp):
        f = IntCmp(_CMP_TO_INT[a.op], Val(a.ity, a.left), Val(a.ity, a.right))
        return f, [], "truth-cmp"
    if isinstance(a, Apply):
        if a.sym == "and" and len(a.args) == 2:
            return conj(Truth(a.args[0]), Truth(a.args[1])), [], "truth-and"
        if a.sym == "or" and len(a.args) == 2:
            return disj(Truth(a.args[0]), Truth(a.args[1])), [], "truth-or"
        if a.sym == "not" and len(a.args) == 1:
            return neg(Truth(a.args[0])), [], "truth-not"
        if a.sym == "true" and not a.args:
            return TRUE, [], "truth-lit"
        if a.sym == "false" and not a.args:
            return FALSE, [], "truth-lit"
    if isinstance(a, Lit):
        return (TRUE if truthy(a.data) else FALSE), [], "truth-lit"
    return None


def _memcmp_rule(e: IntCmp):
    if e.op != "=":
        return None
    for probe, zero in ((e.left, e.right), (e.right, e.left)):
        if (zero == IntLit(0) and isinstance(probe, Val) and probe.ity == S4
                and isinstance(probe.arg, Apply) and probe.arg.sym == "cmp"
                and len(probe.arg.args) == 2):
            a, b = probe.arg.args
            return BsEq(a, b), [Defined(a), Defined(b)], "memcmp-eq"
    return None


def _main_rule(e: SymExpr):
    for r in _match_rules(e):
        return r
    return None


# ---------------------------------------------------------------------------
# the rewrite engine


@dataclass
class Step:
    rule: str
    conds: tuple[int, ...]
    before: SymExpr
    after: SymExpr


@dataclass
class Deriv:
    index: int
    source: SymExpr
    role: str  # hypothesis | goal | condition
    mode: str  # assert | prove | condition
    steps: list[Step] = field(default_factory=list)
    refs: list[int] = field(default_factory=list)
    result: Optional[SymExpr] = None


@dataclass
class RewriteLog:
    derivs: list[Deriv]
    roots: list[int]
    guards: dict[int, SymExpr] = field(default_factory=dict)
    absorbed: dict[int, frozenset[int]] = field(default_factory=dict)

    def fact(self, i: int) -> Deriv:
        return self.derivs[i - 1]

    def replay_ok(self) -> bool:
        """Replaying each derivation from its source yields its result."""
        for d in self.derivs:
            if d.result is None:
                return False
            cur = d.source
            for st in d.steps:
                cur, hit = _subst_once(cur, st.before, st.after)
                if not hit:
                    return False
            want = {c for c in conjuncts(d.result)}
            got = {c for c in _flatten_all(cur)}
            if want != got:
                return False
        return True

    def format(self) -> str:
        lines: list[str] = []
        for d in self.derivs:
            tag = d.role
            lines.append(f"{d.index:3}. [{tag}] {render(d.source)}")
            cur = d.source
            for st in d.steps:
                cur, _ = _subst_once(cur, st.before, st.after)
                ann = st.rule
                if st.conds:
                    ann += "; " + ", ".join(str(c) for c in st.conds)
                lines.append(f"       ({ann}) ~> {render(cur)}")
            if d.result is not None:
                lines.append(f"     = {render(d.result)}")
        for i in self.roots:
            d = self.derivs[i - 1]
            if d.role != "goal":
                g = self.guards.get(i, TRUE)
                lines.append(f"guard({i}) = {render(g)}")
        return "\n".join(lines)


def _subst_once(e: SymExpr, a: SymExpr, b: SymExpr) -> tuple[SymExpr, bool]:
    kids = children(e)
    for i, k in enumerate(kids):
        nk, hit = _subst_once(k, a, b)
        if hit:
            return rebuild(e, kids[:i] + (nk,) + kids[i + 1:]), True
    if e == a:
        return b, True
    return e, False


def _flatten_all(f: SymExpr) -> list[SymExpr]:
    # flattens nested conjunctions and drops literal truth, keeping order
    out: list[SymExpr] = []
    stack = [f]
    while stack:
        cur = stack.pop()
        if isinstance(cur, And):
            stack.extend(reversed(cur.parts))
        elif cur == TRUE:
            continue
        else:
            out.append(cur)
    return out


class Rewriter:
    """Shared fact store for one entailment query.

    Roots are added first (hypotheses in assert mode, the goal in prove
    mode), then run() processes them and drains the spawned condition
    facts. Conditions are deduplicated globally by their original form,
    so a re-spawned condition reuses its number.
    """

    def __init__(self, funcs: Optional[FuncTable] = None, bound: int = 10000):
        self.funcs = funcs
        self.bound = bound
        self.steps_used = 0
        self.derivs: list[Deriv] = []
        self.roots: list[int] = []
        self.memo: dict[SymExpr, int] = {}
        self.pending: deque[int] = deque()

    # -- bookkeeping

    def add_root(self, fact: SymExpr, mode: str, role: Optional[str] = None) -> Deriv:
        if role is None:
            role = "goal" if mode == "prove" else "hypothesis"
        d = Deriv(len(self.derivs) + 1, fact, role, mode)
        self.derivs.append(d)
        self.roots.append(d.index)
        return d

    def log(self) -> RewriteLog:
        lg = RewriteLog(self.derivs, list(self.roots))
        for i in self.roots:
            d = self.derivs[i - 1]
            if d.result is None:
                continue
            lg.guards[i] = self.guard_of(d)
            lg.absorbed[i] = frozenset(
                idx for idx in self._closure(d) if self._absorbed(idx, d))
        return lg

    def _step(self, d: Deriv, rule: str, conds: tuple[int, ...],
              before: SymExpr, after: SymExpr) -> None:
        self.steps_used += 1
        if self.steps_used > self.bound:
            raise SolverLimit(f"rewrite budget of {self.bound} steps exhausted",
                              RewriteLog(self.derivs, list(self.roots)))
        d.steps.append(Step(rule, conds, before, after))

    def _spawn(self, cond: SymExpr, d: Deriv) -> int:
        idx = self.memo.get(cond)
        if idx is None:
            nd = Deriv(len(self.derivs) + 1, cond, "condition", "condition")
            self.derivs.append(nd)
            self.memo[cond] = nd.index
            self.pending.append(nd.index)
            idx = nd.index
        d.refs.append(idx)
        return idx

    # -- the rewrite passes

    def run(self) -> None:
        for i in list(self.roots):
            self._process(self.derivs[i - 1])
        while self.pending:
            idx = self.pending.popleft()
            self._process(self.derivs[idx - 1])

    def _process(self, d: Deriv) -> None:
        use_split = d.mode == "assert"
        queue: deque[SymExpr] = deque([d.source])
        acc: list[SymExpr] = []
        have: set[SymExpr] = set()
        split_done: set[SymExpr] = set()
        while queue:
            f = queue.popleft()
            if isinstance(f, BoolLit):
                if not f.value and f not in have:
                    have.add(f)
                    acc.append(f)
                continue
            if isinstance(f, And):
                queue.extendleft(reversed(f.parts))
                continue
            if isinstance(f, Truth):
                r = _truth_rule(f)
                if r is not None:
                    res, _, name = r
                    self._step(d, name, (), f, res)
                    queue.appendleft(res)
                    continue
            if isinstance(f, Defined):
                r = _defined_rule(f)
                if r is not None:
                    res, _, name = r
                    self._step(d, name, (), f, res)
                    queue.appendleft(res)
                    continue
            if use_split and isinstance(f, IntCmp) and f not in split_done:
                # an assumed integer comparison carries the definedness of
                # both operands; spell it out so the guard can absorb the
                # side conditions spawned later
                split_done.add(f)
                parts = [Defined(f.left), Defined(f.right), f]
                self._step(d, "cmp-args-defined", (), f, conj(*parts))
                queue.extendleft(reversed(parts))
                continue
            g = self._normalize(f, d)
            if isinstance(g, And):
                queue.extendleft(reversed(g.parts))
                continue
            if g == TRUE or g in have:
                continue
            have.add(g)
            acc.append(g)
        out: list[SymExpr] = []
        have2: set[SymExpr] = set()
        for f in acc:
            g = self._convert(f, d)
            if g == TRUE or g in have2:
                continue
            have2.add(g)
            out.append(g)
        d.result = conj(*out)

    def _normalize(self, e: SymExpr, d: Deriv) -> SymExpr:
        kids = children(e)
        if kids:
            new = tuple(self._normalize(k, d) for k in kids)
            if new != kids:
                e = rebuild(e, new)
        while True:
            r = _main_rule(e)
            if r is None:
                return e
            res, conds, name = r
            idxs = tuple(self._spawn(c, d) for c in conds)
            self._step(d, name, idxs, e, res)
            kids = children(res)
            if kids:
                res = rebuild(res, tuple(self._normalize(k, d) for k in kids))
            e = res

    def _convert(self, e: SymExpr, d: Deriv) -> SymExpr:
        kids = children(e)
        if kids:
            new = tuple(self._convert(k, d) for k in kids)
            if new != kids:
                e = rebuild(e, new)
        if isinstance(e, Len):
            idx = self._spawn(Defined(e.arg), d)
            res = LenY(e.arg)
            self._step(d, "len-total", (idx,), e, res)
            return res
        if isinstance(e, Val):
            idx = self._spawn(Defined(e.arg), d)
            res = ValY(e.ity, e.arg)
            self._step(d, "val-total", (idx,), e, res)
            return res
        return e

    # -- guards and absorption

    def _absorbed(self, idx: int, root: Deriv) -> bool:
        cd = self.derivs[idx - 1]
        if cd.result is None or root.result is None:
            return False
        want = set(conjuncts(cd.result))
        got = set(conjuncts(root.result))
        return want <= got

    def _closure(self, root: Deriv) -> list[int]:
        # chronological reference stream with repeats, children inline
        out: list[int] = []

        def expand(refs: list[int], depth: int) -> None:
            if depth > 200 or len(out) > 100000:
                raise SolverLimit("condition closure too deep",
                                  RewriteLog(self.derivs, list(self.roots)))
            for i in refs:
                out.append(i)
                expand(self.derivs[i - 1].refs, depth + 1)

        expand(root.refs, 0)
        return out

    def guard_of(self, root: Deriv) -> SymExpr:
        flat: list[SymExpr] = []
        for idx in self._closure(root):
            if self._absorbed(idx, root):
                continue
            cd = self.derivs[idx - 1]
            if cd.result is not None:
                flat.extend(conjuncts(cd.result))
        # keep the last occurrence of each conjunct
        last: dict[SymExpr, int] = {}
        for i, c in enumerate(flat):
            last[c] = i
        ordered = sorted(last, key=last.get)
        return conj(*ordered)

    def conditions_of(self, root: Deriv) -> list[SymExpr]:
        # unabsorbed side conditions as whole facts, first-spawn order
        seen: set[int] = set()
        out: list[SymExpr] = []
        for idx in self._closure(root):
            if idx in seen or self._absorbed(idx, root):
                continue
            seen.add(idx)
            cd = self.derivs[idx - 1]
            if cd.result is not None and cd.result != TRUE:
                out.append(cd.result)
        return out


# ---------------------------------------------------------------------------
# public rewriting entry points


def rewrite_assert(fact: SymExpr, funcs: Optional[FuncTable] = None,
                   bound: int = 10000) -> tuple[SymExpr, SymExpr, RewriteLog]:
    """Rewrites an assumed fact; returns (guard, strengthened fact, log)."""
    rw = Rewriter(funcs, bound)
    d = rw.add_root(fact, "assert")
    rw.run()
    return rw.guard_of(d), d.result, rw.log()


def rewrite_to_compatible(fact: SymExpr, funcs: Optional[FuncTable] = None,
                          bound: int = 10000
                          ) -> tuple[SymExpr, list[SymExpr], RewriteLog]:
    """Rewrites a fact to be proven; returns (fact, side conditions, log)."""
    rw = Rewriter(funcs, bound)
    d = rw.add_root(fact, "prove")
    rw.run()
    return d.result, rw.conditions_of(d), rw.log()


# ---------------------------------------------------------------------------
# linear integer arithmetic core


class _Blowup(Exception):
    pass


class _Atoms:
    """Canonical naming of the opaque atoms a query ranges over."""

    def __init__(self) -> None:
        self.int_kind: dict[str, str] = {}  # key -> len | valu | vals | base | opaque
        self.val_bounds: dict[str, tuple[int, int]] = {}  # val_y atoms: type range

    # integer side: map an INT-sorted expression to a linear form over atoms

    def linform(self, e: SymExpr) -> tuple[dict[str, int], int]:
        if isinstance(e, IntLit):
            return {}, e.n
        if isinstance(e, IntOp):
            lv, lc = self.linform(e.left)
            rv, rc = self.linform(e.right)
            if e.op == "+":
                return _lin_add(lv, rv, 1), lc + rc
            if e.op == "-":
                return _lin_add(lv, rv, -1), lc - rc
            # products stay linear only with a constant side
            if not lv:
                return {k: lc * v for k, v in rv.items() if lc * v}, lc * rc
            if not rv:
                return {k: rc * v for k, v in lv.items() if rc * v}, rc * lc
            key = self._int_atom(IntOp("*", self.canon(e.left), self.canon(e.right)),
                                 "opaque")
            return {key: 1}, 0
        if isinstance(e, LenY):
            return {self._int_atom(LenY(self.canon(e.arg)), "len"): 1}, 0
        if isinstance(e, ValY):
            kind = "vals" if e.ity.signed else "valu"
            key = self._int_atom(ValY(e.ity, self.canon(e.arg)), kind)
            # val_y lands in the type's range, and is 0 when undefined, so
            # the range bound is unconditional
            self.val_bounds.setdefault(key, (e.ity.lo, e.ity.hi))
            return {key: 1}, 0
        if isinstance(e, (AddrBase, MallocBase)):
            return {self._int_atom(self._canon_atom(e), "base"): 1}, 0
        # leftover partial forms stay opaque but keep their identity
        return {self._int_atom(self._canon_atom(e), "opaque"): 1}, 0

    def _canon_atom(self, e: SymExpr) -> SymExpr:
        # canonicalize inside an expression that is itself an atom; going
        # through canon would bounce back into linform on the same node
        kids = children(e)
        if not kids:
            return e
        return rebuild(e, tuple(self.canon(k) for k in kids))

    def _int_atom(self, e: SymExpr, kind: str) -> str:
        key = render(e)
        self.int_kind.setdefault(key, kind)
        return key

    def canon(self, e: SymExpr) -> SymExpr:
        """Normalizes integer subterms to a canonical linear form so that
        syntactically different spellings of the same sum coincide."""
        if sort_of(e) is Sort.INT:
            return self._lin_rebuild(*self.linform(e))
        if isinstance(e, BsEq):
            l, r = self.canon(e.left), self.canon(e.right)
            if render(r) < render(l):
                l, r = r, l
            return BsEq(l, r)
        kids = children(e)
        if not kids:
            return e
        return rebuild(e, tuple(self.canon(k) for k in kids))

    def _lin_rebuild(self, coeffs: dict[str, int], const: int) -> SymExpr:
        terms: list[SymExpr] = []
        from .terms import parse_expr
        for key in sorted(coeffs):
            c = coeffs[key]
            atom = parse_expr(key)
            if c == 1:
                terms.append(atom)
            elif c == -1:
                terms.append(IntOp("-", IntLit(0), atom))
            else:
                terms.append(IntOp("*", IntLit(c), atom))
        if const or not terms:
            terms.append(IntLit(const))
        t = terms[0]
        for x in terms[1:]:
            t = IntOp("+", t, x)
        return t

    def bool_key(self, e: SymExpr) -> str:
        return render(self.canon(e))


def _lin_add(a: dict[str, int], b: dict[str, int], sign: int) -> dict[str, int]:
    out = dict(a)
    for k, v in b.items():
        nv = out.get(k, 0) + sign * v
        if nv:
            out[k] = nv
        else:
            out.pop(k, None)
    return out


# literals in normal form: ("lin", coeffs, k) meaning sum <= k,
# ("b", key, polarity), ("false",)

_NEG_CMP = {"=": "!=", "!=": "=", "<": ">=", ">": "<=", "<=": ">", ">=": "<"}


def _nnf(e: SymExpr, pos: bool, atoms: _Atoms):
    if isinstance(e, BoolLit):
        v = e.value if pos else not e.value
        return ("and", []) if v else ("lit", ("false",))
    if isinstance(e, Not):
        return _nnf(e.arg, not pos, atoms)
    if isinstance(e, And):
        kind = "and" if pos else "or"
        return (kind, [_nnf(p, pos, atoms) for p in e.parts])
    if isinstance(e, Or):
        kind = "or" if pos else "and"
        return (kind, [_nnf(p, pos, atoms) for p in e.parts])
    if isinstance(e, IntCmp):
        op = e.op if pos else _NEG_CMP[e.op]
        lv, lc = atoms.linform(e.left)
        rv, rc = atoms.linform(e.right)
        d = _lin_add(lv, rv, -1)
        c = lc - rc  # constraint: d + c (op) 0
        if op == "=":
            return ("and", [("lit", ("lin", d, -c)),
                            ("lit", ("lin", {k: -v for k, v in d.items()}, c))])
        if op == "!=":
            return ("or", [("lit", ("lin", d, -c - 1)),
                           ("lit", ("lin", {k: -v for k, v in d.items()}, c - 1))])
        if op == "<=":
            return ("lit", ("lin", d, -c))
        if op == "<":
            return ("lit", ("lin", d, -c - 1))
        if op == ">=":
            return ("lit", ("lin", {k: -v for k, v in d.items()}, c))
        return ("lit", ("lin", {k: -v for k, v in d.items()}, c - 1))
    # opaque boolean atom
    return ("lit", ("b", atoms.bool_key(e), pos))


def _dnf(tree, cap: int = 50000) -> list[list[tuple]]:
    kind = tree[0]
    if kind == "lit":
        return [[tree[1]]]
    if kind == "and":
        branches: list[list[tuple]] = [[]]
        for part in tree[1]:
            sub = _dnf(part, cap)
            branches = [b + s for b in branches for s in sub]
            if len(branches) > cap:
                raise _Blowup()
        return branches
    assert kind == "or"
    out: list[list[tuple]] = []
    for part in tree[1]:
        out.extend(_dnf(part, cap))
        if len(out) > cap:
            raise _Blowup()
    return out


def _fm_unsat(cons: list[tuple[dict[str, int], int]], pair_cap: int = 20000) -> bool:
    while True:
        for d, k in cons:
            if not d and k < 0:
                return True
        vs: dict[str, int] = {}
        for d, _ in cons:
            for v in d:
                vs[v] = vs.get(v, 0) + 1
        if not vs:
            return False
        # eliminate the variable with the cheapest pairing first
        def cost(v: str) -> int:
            p = sum(1 for d, _ in cons if d.get(v, 0) > 0)
            n = sum(1 for d, _ in cons if d.get(v, 0) < 0)
            return p * n
        var = min(vs, key=lambda v: (cost(v), v))
        pos = [(d, k) for d, k in cons if d.get(var, 0) > 0]
        negs = [(d, k) for d, k in cons if d.get(var, 0) < 0]
        rest = [(d, k) for d, k in cons if not d.get(var, 0)]
        if not pos or not negs:
            cons = rest
            continue
        if len(pos) * len(negs) > pair_cap:
            raise _Blowup()
        new: list[tuple[dict[str, int], int]] = []
        for da, ka in pos:
            ca = da[var]
            for db, kb in negs:
                cb = -db[var]
                comb = _lin_add({k: cb * v for k, v in da.items()},
                                {k: ca * v for k, v in db.items()}, 1)
                comb.pop(var, None)
                new.append((comb, cb * ka + ca * kb))
        cons = rest + new


def _branch_unsat(lits: list[tuple], atoms: _Atoms) -> bool:
    bools: dict[str, bool] = {}
    cons: list[tuple[dict[str, int], int]] = []
    for lit in lits:
        if lit[0] == "false":
            return True
        if lit[0] == "b":
            _, key, polarity = lit
            if bools.setdefault(key, polarity) != polarity:
                return True
        else:
            _, d, k = lit
            cons.append((dict(d), k))
    # typing axioms: lengths, unsigned values and addresses are naturals,
    # lengths fit the 8-byte size type (strings live in addressable
    # memory), and every val_y atom sits in its machine type's range
    for key, kind in atoms.int_kind.items():
        if kind in ("len", "valu", "base"):
            cons.append(({key: -1}, 0))
        if kind == "len":
            cons.append(({key: 1}, U8.hi))
    for key, (lo, hi) in atoms.val_bounds.items():
        cons.append(({key: 1}, hi))
        cons.append(({key: -1}, -lo))
    return _fm_unsat(cons)


@dataclass
class LiaQuery:
    hyps: list[tuple[SymExpr, SymExpr]]  # (guard, strengthened fact)
    goal: SymExpr


def decide_valid(query: LiaQuery, backend: Optional[str] = None) -> bool:
    """Sound validity check of (AND of guarded hypotheses) => goal."""
    if backend and backend.startswith("smtlib2:"):
        return _decide_external(query, backend.split(":", 1)[1])
    atoms = _Atoms()
    parts: list[SymExpr] = []
    for g, f in query.hyps:
        parts.append(f if g == TRUE else disj(neg(g), f))
    formula = conj(*parts) if parts else TRUE
    full = conj(formula, neg(query.goal))
    try:
        branches = _dnf(_nnf(full, True, atoms))
        return all(_branch_unsat(b, atoms) for b in branches)
    except _Blowup:
        return False


# ---------------------------------------------------------------------------
# SMT-LIB export and external solving


def export_smtlib2(query: LiaQuery) -> str:
    atoms = _Atoms()
    names: dict[tuple[str, str], str] = {}

    def name_of(kind: str, key: str) -> str:
        k = (kind, key)
        if k not in names:
            names[k] = f"{'i' if kind == 'int' else 'p'}{len(names)}"
        return names[k]

    def term(coeffs: dict[str, int], const: int) -> str:
        parts = [f"(* {c} {name_of('int', k)})" if c != 1 else name_of("int", k)
                 for k, c in sorted(coeffs.items())]
        if const or not parts:
            parts.append(str(const))
        if len(parts) == 1:
            return parts[0]
        return "(+ " + " ".join(parts) + ")"

    def fml(e: SymExpr) -> str:
        if isinstance(e, BoolLit):
            return "true" if e.value else "false"
        if isinstance(e, Not):
            return f"(not {fml(e.arg)})"
        if isinstance(e, And):
            return "(and " + " ".join(fml(p) for p in e.parts) + ")"
        if isinstance(e, Or):
            return "(or " + " ".join(fml(p) for p in e.parts) + ")"
        if isinstance(e, IntCmp):
            lv, lc = atoms.linform(e.left)
            rv, rc = atoms.linform(e.right)
            op = {"=": "=", "!=": "distinct", "<": "<", ">": ">",
                  "<=": "<=", ">=": ">="}[e.op]
            return f"({op} {term(lv, lc)} {term(rv, rc)})"
        return name_of("bool", atoms.bool_key(e))

    asserts: list[str] = []
    for g, f in query.hyps:
        asserts.append(fml(f) if g == TRUE else f"(=> {fml(g)} {fml(f)})")
    goal = fml(query.goal)
    lines = ["(set-logic QF_LIA)"]
    for (kind, key), nm in sorted(names.items(), key=lambda kv: kv[1]):
        sort = "Int" if kind == "int" else "Bool"
        lines.append(f"(declare-fun {nm} () {sort}) ; {key}")
    for key, kind in atoms.int_kind.items():
        if kind in ("len", "valu", "base") and ("int", key) in names:
            lines.append(f"(assert (>= {names[('int', key)]} 0))")
    for a in asserts:
        lines.append(f"(assert {a})")
    lines.append(f"(assert (not {goal}))")
    lines.append("(check-sat)")
    return "\n".join(lines) + "\n"


def _decide_external(query: LiaQuery, path: str) -> bool:
    text = export_smtlib2(query)
    try:
        proc = subprocess.run([path], input=text.encode(), capture_output=True,
                              timeout=60)
    except (OSError, subprocess.TimeoutExpired):
        return False
    return proc.stdout.decode(errors="replace").strip().splitlines()[-1:] == ["unsat"]


# ---------------------------------------------------------------------------
# entailment


@dataclass
class EntailsResult:
    verdict: str  # yes | unknown
    log: RewriteLog
    query: LiaQuery

    @property
    def ok(self) -> bool:
        return self.verdict == "yes"


def entails(facts: Iterable[SymExpr], goal: SymExpr,
            funcs: Optional[FuncTable] = None, bound: int = 10000,
            backend: Optional[str] = None) -> EntailsResult:
    """Sound entailment check: "yes" means every environment satisfying
    all facts satisfies the goal; "unknown" carries no information."""
    rw = Rewriter(funcs, bound)
    hyp_ds = [rw.add_root(f, "assert") for f in facts]
    goal_d = rw.add_root(goal, "prove")
    rw.run()
    pairs = [(rw.guard_of(d), d.result) for d in hyp_ds]
    obligation = conj(*(rw.conditions_of(goal_d) + [goal_d.result]))
    query = LiaQuery(pairs, obligation)
    verdict = "yes" if decide_valid(query, backend) else "unknown"
    return EntailsResult(verdict, rw.log(), query)


class Prover:
    """Entailment oracle over a fixed fact set; hypotheses are rewritten
    once and reused across goals."""

    def __init__(self, facts: Sequence[SymExpr],
                 funcs: Optional[FuncTable] = None, bound: int = 10000,
                 backend: Optional[str] = None):
        self.facts = list(facts)
        self.funcs = funcs
        self.bound = bound
        self.backend = backend
        rw = Rewriter(funcs, bound)
        ds = [rw.add_root(f, "assert") for f in self.facts]
        rw.run()
        self._pairs = [(rw.guard_of(d), d.result) for d in ds]
        self._cache: dict[str, bool] = {}

    def entails(self, goal: SymExpr) -> EntailsResult:
        rw = Rewriter(self.funcs, self.bound)
        d = rw.add_root(goal, "prove")
        rw.run()
        obligation = conj(*(rw.conditions_of(d) + [d.result]))
        query = LiaQuery(self._pairs, obligation)
        verdict = "yes" if decide_valid(query, self.backend) else "unknown"
        return EntailsResult(verdict, rw.log(), query)

    def holds(self, goal: SymExpr) -> bool:
        if goal == TRUE:
            return True
        key = render(goal)
        r = self._cache.get(key)
        if r is None:
            r = self.entails(goal).ok
            self._cache[key] = r
        return r

    def add_fact(self, f: SymExpr) -> None:
        """Extends the hypothesis set in place. Cached verdicts are dropped:
        they may flip from unknown to yes under the larger set."""
        self.facts.append(f)
        rw = Rewriter(self.funcs, self.bound)
        d = rw.add_root(f, "assert")
        rw.run()
        self._pairs.append((rw.guard_of(d), d.result))
        self._cache.clear()


# ---------------------------------------------------------------------------
# simplification


def _substr_candidates(e: Substr):
    # substring of a concatenation that selects a whole run of parts
    parts = e.base.parts if isinstance(e.base, Concat) else (e.base,)
    m = len(parts)
    yield EPSILON, [Defined(e), IntCmp("=", e.length, IntLit(0))], "substr-empty"
    if isinstance(e.base, Substr):
        b = e.base
        res = Substr(b.base, IntOp("+", b.pos, e.pos), e.length)
        cs = [Defined(b), IntCmp(">=", e.pos, IntLit(0)),
              IntCmp("<=", IntOp("+", e.pos, e.length), b.length)]
        yield res, cs, "substr-substr"
    for i in range(m):
        for j in range(i, m):
            run = parts[i:j + 1]
            cs = [Defined(e.base),
                  IntCmp("=", e.pos, _len_sum(parts[:i])),
                  IntCmp("=", e.length, _len_sum(run))]
            res = run[0] if len(run) == 1 else Concat(run)
            yield res, cs, "substr-concat"


def simplify(facts: Sequence[SymExpr], e: SymExpr,
             funcs: Optional[FuncTable] = None, bound: int = 10000,
             prover: Optional[Prover] = None) -> SymExpr:
    """Rewrites e into an equivalent, usually smaller form, applying a
    rule only when the ambient facts entail its premise. Total-surrogate
    conversion never fires here, so the result stays machine-level."""
    pv = prover if prover is not None else Prover(facts, funcs=funcs)
    budget = [bound]

    def proven(cs: list[SymExpr]) -> bool:
        return all(pv.holds(c) for c in cs)

    def attempt(x: SymExpr) -> Optional[SymExpr]:
        if (isinstance(x, IntOp) and isinstance(x.left, IntLit)
                and isinstance(x.right, IntLit)):
            a, b = x.left.n, x.right.n
            return IntLit(a + b if x.op == "+" else a - b if x.op == "-" else a * b)
        for res, cs, _name in _match_rules(x):
            if proven(cs):
                return res
        if isinstance(x, Substr):
            for res, cs, _name in _substr_candidates(x):
                if proven(cs):
                    return res
        return None

    def walk(x: SymExpr) -> SymExpr:
        kids = children(x)
        if kids:
            new = tuple(walk(k) for k in kids)
            if new != kids:
                x = rebuild(x, new)
        while True:
            res = attempt(x)
            if res is None:
                return x
            budget[0] -= 1
            if budget[0] < 0:
                raise SolverLimit(f"simplification budget of {bound} exhausted")
            kids = children(res)
            x = rebuild(res, tuple(walk(k) for k in kids)) if kids else res

    return walk(e)
