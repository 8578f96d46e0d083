"""Symbolic expression language shared by the interpreter, the solver
and the extraction passes.

Expressions come in three sorts: bitstrings, mathematical integers and
booleans.  Booleans are a subset of bitstrings at runtime (0x01 for
true, 0x00 for false), so `eval_expr` returns bytes for both, `int` for
integer terms, and None for the undefined value.

Machine integers inside bitstrings are read and written little-endian.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Union

Value = Union[bytes, int, None]
Env = Mapping[str, Value]

TRUE_BYTES = b"\x01"
FALSE_BYTES = b"\x00"


class Sort(enum.Enum):
    BITS = "bits"
    INT = "int"
    BOOL = "bool"
    ALLOC = "alloc"


class SortError(Exception):
    """An expression is built from subterms of the wrong sort."""


class ParseError(Exception):
    """Raised by parse_expr / parse_fact with position information."""


# ---------------------------------------------------------------------------
# machine integer types


@dataclass(frozen=True, order=True)
class IntType:
    """A machine integer type: signedness and width in bytes."""

    signed: bool
    width: int

    def __str__(self) -> str:
        return f"{'s' if self.signed else 'u'},{self.width}"

    @property
    def lo(self) -> int:
        return -(1 << (8 * self.width - 1)) if self.signed else 0

    @property
    def hi(self) -> int:
        if self.signed:
            return (1 << (8 * self.width - 1)) - 1
        return (1 << (8 * self.width)) - 1

    def in_range(self, n: int) -> bool:
        return self.lo <= n <= self.hi

    def wrap(self, n: int) -> int:
        m = n % (1 << (8 * self.width))
        if self.signed and m > self.hi:
            m -= 1 << (8 * self.width)
        return m


U8 = IntType(False, 8)      # pointer and size type
S8 = IntType(True, 8)       # pointer difference type
S4 = IntType(True, 4)       # comparison result type
U4 = IntType(False, 4)


def parse_int_type(s: str) -> IntType:
    sign, _, width = s.partition(",")
    if sign not in ("u", "s") or not width.isdigit() or int(width) < 1:
        raise ParseError(f"bad integer type {s!r}")
    return IntType(sign == "s", int(width))


def encode_int(ity: IntType, n: int) -> Optional[bytes]:
    """Little-endian encoding of n at the given type, None if out of range."""
    if not ity.in_range(n):
        return None
    return n.to_bytes(ity.width, "little", signed=ity.signed)


def decode_int(ity: IntType, b: Optional[bytes]) -> Optional[int]:
    """Inverse of encode_int; None unless len(b) equals the type width."""
    if b is None or len(b) != ity.width:
        return None
    return int.from_bytes(b, "little", signed=ity.signed)


# ---------------------------------------------------------------------------
# expression nodes

# Every node is a frozen dataclass so expressions hash and compare
# structurally; the solver and the symbolic memory rely on that.


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Lit:
    data: bytes


@dataclass(frozen=True)
class IntLit:
    n: int


@dataclass(frozen=True)
class IntOp:
    op: str  # + - *
    left: "SymExpr"
    right: "SymExpr"


@dataclass(frozen=True)
class Len:
    arg: "SymExpr"


@dataclass(frozen=True)
class Val:
    """Integer value of a bitstring: val(u,4)(e). Undefined unless
    len(e) equals the type width."""

    ity: IntType
    arg: "SymExpr"


@dataclass(frozen=True)
class LenY:
    """Total length surrogate: agrees with len on defined bitstrings,
    returns 0 on the undefined value. The arithmetic core only sees
    total functions."""

    arg: "SymExpr"


@dataclass(frozen=True)
class ValY:
    """Total integer-value surrogate of a bitstring: agrees with val
    whenever val is defined, returns 0 otherwise."""

    ity: IntType
    arg: "SymExpr"


@dataclass(frozen=True)
class Enc:
    """Bitstring encoding of an integer term: bs(u,4)(t). Undefined
    when t is out of the type's range."""

    ity: IntType
    arg: "SymExpr"


@dataclass(frozen=True)
class Substr:
    base: "SymExpr"
    pos: "SymExpr"
    length: "SymExpr"


@dataclass(frozen=True)
class Concat:
    parts: tuple["SymExpr", ...]


@dataclass(frozen=True)
class Apply:
    sym: str
    args: tuple["SymExpr", ...]


@dataclass(frozen=True)
class BinArith:
    """Machine arithmetic e op_ity e'. Defined iff both operands have
    the type's width; overflow wraps."""

    op: str  # + - *
    ity: IntType
    left: "SymExpr"
    right: "SymExpr"


@dataclass(frozen=True)
class BinCmp:
    """Machine comparison returning a 4-byte signed 1/0. Undefined
    unless both operands have the type's width."""

    op: str  # == != < > <= >=
    ity: IntType
    left: "SymExpr"
    right: "SymExpr"


@dataclass(frozen=True)
class Cast:
    src: IntType
    dst: IntType
    arg: "SymExpr"


@dataclass(frozen=True)
class AddrBase:
    """Pointer base of a declared program variable of known size."""

    var: str
    size: int


@dataclass(frozen=True)
class MallocBase:
    """Pointer base returned by malloc under allocation table `alloc`
    with requested length `tlen` (an integer term)."""

    alloc: "SymExpr"
    tlen: "SymExpr"


@dataclass(frozen=True)
class AllocInit:
    """Initial allocation table: the declared variables in order."""

    vars: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class AllocExt:
    """Allocation table extended by the block malloc(alloc, tlen)."""

    alloc: "SymExpr"
    tlen: "SymExpr"


@dataclass(frozen=True)
class Ptr:
    base: "SymExpr"  # AddrBase or MallocBase
    off: "SymExpr"   # integer term


@dataclass(frozen=True)
class PtrArith:
    """Pointer plus/minus machine integer of type ity, at byte scale."""

    op: str  # + -
    ity: IntType
    ptr: "SymExpr"
    arg: "SymExpr"


@dataclass(frozen=True)
class PtrDiff:
    left: "SymExpr"
    right: "SymExpr"


@dataclass(frozen=True)
class And:
    parts: tuple["SymExpr", ...]


@dataclass(frozen=True)
class Or:
    parts: tuple["SymExpr", ...]


@dataclass(frozen=True)
class Not:
    arg: "SymExpr"


@dataclass(frozen=True)
class IntCmp:
    op: str  # = != < > <= >=
    left: "SymExpr"
    right: "SymExpr"


@dataclass(frozen=True)
class BsEq:
    """Total bitstring equality; true when both sides are undefined."""

    left: "SymExpr"
    right: "SymExpr"


@dataclass(frozen=True)
class Defined:
    arg: "SymExpr"


@dataclass(frozen=True)
class Truth:
    """truth(e): false iff e is undefined or all-zero bytes."""

    arg: "SymExpr"


@dataclass(frozen=True)
class BoolLit:
    value: bool


SymExpr = Union[
    Var, Lit, IntLit, IntOp, Len, LenY, Val, ValY, Enc, Substr, Concat, Apply,
    BinArith, BinCmp, Cast, AddrBase, MallocBase, AllocInit, AllocExt,
    Ptr, PtrArith, PtrDiff,
    And, Or, Not, IntCmp, BsEq, Defined, Truth, BoolLit,
]

TRUE = BoolLit(True)
FALSE = BoolLit(False)
EPSILON = Lit(b"")
NULL_PTR = Enc(U8, IntLit(0))


def concat(*parts: SymExpr) -> SymExpr:
    """Flattening concatenation constructor; drops empty literals."""
    out: list[SymExpr] = []
    for p in parts:
        if isinstance(p, Concat):
            out.extend(p.parts)
        elif isinstance(p, Lit) and p.data == b"":
            continue
        else:
            out.append(p)
    if not out:
        return EPSILON
    if len(out) == 1:
        return out[0]
    return Concat(tuple(out))


def conj(*parts: SymExpr) -> SymExpr:
    out: list[SymExpr] = []
    for p in parts:
        if isinstance(p, And):
            out.extend(p.parts)
        elif p == TRUE:
            continue
        else:
            out.append(p)
    if not out:
        return TRUE
    if len(out) == 1:
        return out[0]
    return And(tuple(out))


def disj(*parts: SymExpr) -> SymExpr:
    out: list[SymExpr] = []
    for p in parts:
        if isinstance(p, Or):
            out.extend(p.parts)
        elif p == FALSE:
            continue
        else:
            out.append(p)
    if not out:
        return FALSE
    if len(out) == 1:
        return out[0]
    return Or(tuple(out))


def neg(p: SymExpr) -> SymExpr:
    if isinstance(p, BoolLit):
        return BoolLit(not p.value)
    if isinstance(p, Not):
        return p.arg
    return Not(p)


def in_dom(ity: IntType, e: SymExpr) -> SymExpr:
    """Membership of a bitstring in the domain of an integer type."""
    return IntCmp("=", IntLit(ity.width), Len(e))


def in_range(ity: IntType, t: SymExpr) -> SymExpr:
    """Membership of an integer term in the range of an integer type."""
    return conj(IntCmp(">=", t, IntLit(ity.lo)), IntCmp("<=", t, IntLit(ity.hi)))


# ---------------------------------------------------------------------------
# sorts


_FACTS = (And, Or, Not, IntCmp, BsEq, Defined, Truth, BoolLit)


def sort_of(e: SymExpr) -> Sort:
    if isinstance(e, (IntLit, IntOp, Len, LenY, Val, ValY)):
        return Sort.INT
    if isinstance(e, _FACTS):
        return Sort.BOOL
    if isinstance(e, (AllocInit, AllocExt)):
        return Sort.ALLOC
    if isinstance(e, (AddrBase, MallocBase)):
        # pointer bases double as free-standing integer terms (base
        # addresses); the alloc argument of malloc stays ALLOC-sorted
        return Sort.INT
    return Sort.BITS


def _want(e: SymExpr, s: Sort, where: str) -> None:
    if sort_of(e) is not s:
        raise SortError(f"{where}: expected {s.value}, got {sort_of(e).value} in {render(e)}")


def sort_check(e: SymExpr) -> Sort:
    """Recursively validates sorts; returns the sort of e."""
    if isinstance(e, (Var, Lit, IntLit, BoolLit)):
        pass
    elif isinstance(e, IntOp):
        if e.op not in ("+", "-", "*"):
            raise SortError(f"bad integer operator {e.op!r}")
        for a in (e.left, e.right):
            sort_check(a)
            _want(a, Sort.INT, "integer operation")
    elif isinstance(e, (Len, LenY)):
        sort_check(e.arg)
        if sort_of(e.arg) not in (Sort.BITS, Sort.BOOL):
            raise SortError("len of a non-bitstring")
    elif isinstance(e, (Val, ValY)):
        sort_check(e.arg)
        _want(e.arg, Sort.BITS, "val")
    elif isinstance(e, Enc):
        sort_check(e.arg)
        _want(e.arg, Sort.INT, "bs")
    elif isinstance(e, Substr):
        sort_check(e.base)
        _want(e.base, Sort.BITS, "substring base")
        for a in (e.pos, e.length):
            sort_check(a)
            _want(a, Sort.INT, "substring index")
    elif isinstance(e, Concat):
        for a in e.parts:
            sort_check(a)
            _want(a, Sort.BITS, "concatenation")
    elif isinstance(e, Apply):
        for a in e.args:
            sort_check(a)
            if sort_of(a) not in (Sort.BITS, Sort.BOOL):
                raise SortError(f"function argument of sort {sort_of(a).value}")
    elif isinstance(e, BinArith):
        if e.op not in ("+", "-", "*"):
            raise SortError(f"bad machine operator {e.op!r}")
        for a in (e.left, e.right):
            sort_check(a)
            _want(a, Sort.BITS, "machine arithmetic")
    elif isinstance(e, BinCmp):
        if e.op not in ("==", "!=", "<", ">", "<=", ">="):
            raise SortError(f"bad machine comparison {e.op!r}")
        for a in (e.left, e.right):
            sort_check(a)
            _want(a, Sort.BITS, "machine comparison")
    elif isinstance(e, Cast):
        sort_check(e.arg)
        _want(e.arg, Sort.BITS, "cast")
    elif isinstance(e, AddrBase):
        if e.size < 0:
            raise SortError("negative variable size")
    elif isinstance(e, (MallocBase, AllocExt)):
        sort_check(e.alloc)
        _want(e.alloc, Sort.ALLOC, "allocation table")
        sort_check(e.tlen)
        _want(e.tlen, Sort.INT, "allocation length")
    elif isinstance(e, AllocInit):
        pass
    elif isinstance(e, Ptr):
        if not isinstance(e.base, (AddrBase, MallocBase)):
            raise SortError("pointer base must be addr(..) or malloc(..)")
        sort_check(e.base)
        sort_check(e.off)
        _want(e.off, Sort.INT, "pointer offset")
    elif isinstance(e, PtrArith):
        if e.op not in ("+", "-"):
            raise SortError(f"bad pointer operator {e.op!r}")
        sort_check(e.ptr)
        _want(e.ptr, Sort.BITS, "pointer arithmetic")
        sort_check(e.arg)
        _want(e.arg, Sort.BITS, "pointer arithmetic")
    elif isinstance(e, PtrDiff):
        for a in (e.left, e.right):
            sort_check(a)
            _want(a, Sort.BITS, "pointer difference")
    elif isinstance(e, (And, Or)):
        for a in e.parts:
            sort_check(a)
            _want(a, Sort.BOOL, "connective")
    elif isinstance(e, Not):
        sort_check(e.arg)
        _want(e.arg, Sort.BOOL, "negation")
    elif isinstance(e, IntCmp):
        if e.op not in ("=", "!=", "<", ">", "<=", ">="):
            raise SortError(f"bad comparison {e.op!r}")
        for a in (e.left, e.right):
            sort_check(a)
            _want(a, Sort.INT, "integer comparison")
    elif isinstance(e, BsEq):
        for a in (e.left, e.right):
            sort_check(a)
            if sort_of(a) not in (Sort.BITS, Sort.BOOL):
                raise SortError("bitstring equality over non-bitstrings")
    elif isinstance(e, Defined):
        sort_check(e.arg)
    elif isinstance(e, Truth):
        sort_check(e.arg)
        if sort_of(e.arg) not in (Sort.BITS, Sort.BOOL):
            raise SortError("truth of a non-bitstring")
    else:
        raise SortError(f"unknown node {type(e).__name__}")
    return sort_of(e)


def children(e: SymExpr) -> tuple[SymExpr, ...]:
    """Direct subexpressions, in a fixed order."""
    if isinstance(e, (Var, Lit, IntLit, BoolLit, AddrBase, AllocInit)):
        return ()
    if isinstance(e, (IntOp, BinArith, BinCmp)):
        return (e.left, e.right)
    if isinstance(e, (Len, LenY, Val, ValY, Enc, Not, Defined, Truth)):
        return (e.arg,)
    if isinstance(e, Substr):
        return (e.base, e.pos, e.length)
    if isinstance(e, (Concat, And, Or)):
        return e.parts
    if isinstance(e, Apply):
        return e.args
    if isinstance(e, Cast):
        return (e.arg,)
    if isinstance(e, (MallocBase, AllocExt)):
        return (e.alloc, e.tlen)
    if isinstance(e, Ptr):
        return (e.base, e.off)
    if isinstance(e, PtrArith):
        return (e.ptr, e.arg)
    if isinstance(e, (PtrDiff, IntCmp, BsEq)):
        return (e.left, e.right)
    raise SortError(f"unknown node {type(e).__name__}")


def rebuild(e: SymExpr, kids: tuple[SymExpr, ...]) -> SymExpr:
    """Reassembles e with new children (same shapes as children(e))."""
    if isinstance(e, (Var, Lit, IntLit, BoolLit, AddrBase, AllocInit)):
        return e
    if isinstance(e, IntOp):
        return IntOp(e.op, kids[0], kids[1])
    if isinstance(e, BinArith):
        return BinArith(e.op, e.ity, kids[0], kids[1])
    if isinstance(e, BinCmp):
        return BinCmp(e.op, e.ity, kids[0], kids[1])
    if isinstance(e, Len):
        return Len(kids[0])
    if isinstance(e, LenY):
        return LenY(kids[0])
    if isinstance(e, Val):
        return Val(e.ity, kids[0])
    if isinstance(e, ValY):
        return ValY(e.ity, kids[0])
    if isinstance(e, Enc):
        return Enc(e.ity, kids[0])
    if isinstance(e, Not):
        return Not(kids[0])
    if isinstance(e, Defined):
        return Defined(kids[0])
    if isinstance(e, Truth):
        return Truth(kids[0])
    if isinstance(e, Substr):
        return Substr(kids[0], kids[1], kids[2])
    if isinstance(e, Concat):
        return Concat(kids)
    if isinstance(e, And):
        return And(kids)
    if isinstance(e, Or):
        return Or(kids)
    if isinstance(e, Apply):
        return Apply(e.sym, kids)
    if isinstance(e, Cast):
        return Cast(e.src, e.dst, kids[0])
    if isinstance(e, MallocBase):
        return MallocBase(kids[0], kids[1])
    if isinstance(e, AllocExt):
        return AllocExt(kids[0], kids[1])
    if isinstance(e, Ptr):
        return Ptr(kids[0], kids[1])
    if isinstance(e, PtrArith):
        return PtrArith(e.op, e.ity, kids[0], kids[1])
    if isinstance(e, PtrDiff):
        return PtrDiff(kids[0], kids[1])
    if isinstance(e, IntCmp):
        return IntCmp(e.op, kids[0], kids[1])
    if isinstance(e, BsEq):
        return BsEq(kids[0], kids[1])
    raise SortError(f"unknown node {type(e).__name__}")


def free_vars(e: SymExpr) -> frozenset[str]:
    out: set[str] = set()
    stack = [e]
    while stack:
        cur = stack.pop()
        if isinstance(cur, Var):
            out.add(cur.name)
        else:
            stack.extend(children(cur))
    return frozenset(out)


def subst(e: SymExpr, mapping: Mapping[str, SymExpr]) -> SymExpr:
    """Simultaneous substitution of variables. The language has no
    binders, so no capture can occur."""
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    kids = children(e)
    if not kids:
        return e
    new = tuple(subst(k, mapping) for k in kids)
    if new == kids:
        return e
    return rebuild(e, new)


def subterms(e: SymExpr) -> Iterable[SymExpr]:
    """All subexpressions including e itself, preorder."""
    yield e
    for k in children(e):
        yield from subterms(k)


# ---------------------------------------------------------------------------
# interpreted function tables


@dataclass(frozen=True)
class FuncDef:
    name: str
    arity: int
    fn: Callable[..., Value]
    bot_propagating: bool = True
    length_regular: bool = False


class FuncTable:
    """Named function symbols with concrete implementations."""

    def __init__(self, defs: Iterable[FuncDef] = ()):
        self.defs: dict[str, FuncDef] = {}
        # optional observer (sym, args) -> None called before every
        # application; typed execution modes raise from here
        self.apply_hook: Optional[Callable[[str, tuple[Value, ...]], None]] = None
        for d in defs:
            self.define(d)

    def define(self, d: FuncDef) -> None:
        if d.name in self.defs:
            raise ValueError(f"function {d.name} already defined")
        self.defs[d.name] = d

    def __contains__(self, name: str) -> bool:
        return name in self.defs

    def __getitem__(self, name: str) -> FuncDef:
        return self.defs[name]

    def call(self, name: str, args: tuple[Value, ...]) -> Value:
        d = self.defs.get(name)
        if d is None:
            raise KeyError(f"unknown function symbol {name}")
        if d.arity != len(args):
            raise ValueError(f"{name} expects {d.arity} arguments, got {len(args)}")
        # function symbols act on bitstrings-with-bottom only
        args = tuple(a if isinstance(a, bytes) else None for a in args)
        if self.apply_hook is not None:
            self.apply_hook(name, args)
        if d.bot_propagating and any(a is None for a in args):
            return None
        return d.fn(*args)

    def copy(self) -> "FuncTable":
        t = FuncTable()
        t.defs = dict(self.defs)
        t.apply_hook = self.apply_hook
        return t

    def override(self, d: FuncDef) -> None:
        self.defs[d.name] = d


def truthy(b: Value) -> bool:
    """Truth of a bitstring: false iff undefined or all zero bytes."""
    if not isinstance(b, bytes):
        return False
    return any(b)


def _bool_bytes(v: bool) -> bytes:
    return TRUE_BYTES if v else FALSE_BYTES


def _fn_xor(a: bytes, b: bytes) -> Optional[bytes]:
    if len(a) != len(b):
        return None
    return bytes(x ^ y for x, y in zip(a, b))


def _fn_cmp(a: bytes, b: bytes) -> bytes:
    # memcmp-style equality probe: 4-byte signed 0 when equal, 1 otherwise
    return encode_int(S4, 0 if a == b else 1)  # type: ignore[return-value]


def base_functions() -> FuncTable:
    """Builtin symbols every program may use."""
    t = FuncTable()
    t.define(FuncDef("true", 0, lambda: TRUE_BYTES, length_regular=True))
    t.define(FuncDef("false", 0, lambda: FALSE_BYTES, length_regular=True))
    # truthiness connectives are total: an undefined operand counts as false
    t.define(FuncDef("truth", 1, lambda a: _bool_bytes(truthy(a)), bot_propagating=False))
    t.define(FuncDef("not", 1, lambda a: _bool_bytes(not truthy(a)), bot_propagating=False))
    t.define(FuncDef("and", 2, lambda a, b: _bool_bytes(truthy(a) and truthy(b)), bot_propagating=False))
    t.define(FuncDef("or", 2, lambda a, b: _bool_bytes(truthy(a) or truthy(b)), bot_propagating=False))
    t.define(FuncDef("cmp", 2, _fn_cmp))
    t.define(FuncDef("XOR", 2, _fn_xor, length_regular=True))
    return t


# ---------------------------------------------------------------------------
# evaluation

PtrMap = Mapping[SymExpr, int]


def _eval_ptr(e: Ptr, env: Env, funcs: FuncTable, ptrmap: Optional[PtrMap]) -> Value:
    off = eval_expr(e.off, env, funcs, ptrmap)
    if off is None:
        return None
    if ptrmap is None or e.base not in ptrmap:
        return None
    addr = ptrmap[e.base]
    if isinstance(e.base, AddrBase):
        if not (0 <= off <= e.base.size):
            return None
    else:
        assert isinstance(e.base, MallocBase)
        if addr == 0:
            # failed allocation: only the zero offset is meaningful and
            # yields the null pointer itself
            return encode_int(U8, 0) if off == 0 else None
        tl = eval_expr(e.base.tlen, env, funcs, ptrmap)
        if tl is None or not (0 <= off <= tl):
            return None
    return encode_int(U8, addr + off)


def eval_expr(e: SymExpr, env: Env, funcs: FuncTable,
              ptrmap: Optional[PtrMap] = None) -> Value:
    """Total evaluation. Returns bytes for bitstring- and boolean-sorted
    expressions (booleans as 0x01/0x00), int for integer terms, and None
    for the undefined value. Unbound variables evaluate to None."""
    if isinstance(e, Var):
        return env.get(e.name)
    if isinstance(e, Lit):
        return e.data
    if isinstance(e, IntLit):
        return e.n
    if isinstance(e, BoolLit):
        return _bool_bytes(e.value)
    if isinstance(e, IntOp):
        a = eval_expr(e.left, env, funcs, ptrmap)
        b = eval_expr(e.right, env, funcs, ptrmap)
        if a is None or b is None:
            return None
        assert isinstance(a, int) and isinstance(b, int)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        return a * b
    if isinstance(e, Len):
        a = eval_expr(e.arg, env, funcs, ptrmap)
        return len(a) if isinstance(a, bytes) else None
    if isinstance(e, LenY):
        a = eval_expr(e.arg, env, funcs, ptrmap)
        return len(a) if isinstance(a, bytes) else 0
    if isinstance(e, Val):
        a = eval_expr(e.arg, env, funcs, ptrmap)
        return decode_int(e.ity, a if isinstance(a, bytes) else None)
    if isinstance(e, ValY):
        a = eval_expr(e.arg, env, funcs, ptrmap)
        v = decode_int(e.ity, a if isinstance(a, bytes) else None)
        return v if v is not None else 0
    if isinstance(e, Enc):
        a = eval_expr(e.arg, env, funcs, ptrmap)
        if not isinstance(a, int):
            return None
        return encode_int(e.ity, a)
    if isinstance(e, Substr):
        b = eval_expr(e.base, env, funcs, ptrmap)
        p = eval_expr(e.pos, env, funcs, ptrmap)
        l = eval_expr(e.length, env, funcs, ptrmap)
        if b is None or p is None or l is None:
            return None
        assert isinstance(b, bytes) and isinstance(p, int) and isinstance(l, int)
        if p < 0 or l < 0 or p + l > len(b):
            return None
        return b[p:p + l]
    if isinstance(e, Concat):
        out = b""
        for part in e.parts:
            v = eval_expr(part, env, funcs, ptrmap)
            if v is None:
                return None
            assert isinstance(v, bytes)
            out += v
        return out
    if isinstance(e, Apply):
        vals = tuple(eval_expr(a, env, funcs, ptrmap) for a in e.args)
        return funcs.call(e.sym, vals)
    if isinstance(e, BinArith):
        a = decode_int(e.ity, _as_bytes(eval_expr(e.left, env, funcs, ptrmap)))
        b = decode_int(e.ity, _as_bytes(eval_expr(e.right, env, funcs, ptrmap)))
        if a is None or b is None:
            return None
        if e.op == "+":
            r = a + b
        elif e.op == "-":
            r = a - b
        else:
            r = a * b
        return encode_int(e.ity, e.ity.wrap(r))
    if isinstance(e, BinCmp):
        a = decode_int(e.ity, _as_bytes(eval_expr(e.left, env, funcs, ptrmap)))
        b = decode_int(e.ity, _as_bytes(eval_expr(e.right, env, funcs, ptrmap)))
        if a is None or b is None:
            return None
        r = {"==": a == b, "!=": a != b, "<": a < b,
             ">": a > b, "<=": a <= b, ">=": a >= b}[e.op]
        return encode_int(S4, 1 if r else 0)
    if isinstance(e, Cast):
        a = decode_int(e.src, _as_bytes(eval_expr(e.arg, env, funcs, ptrmap)))
        if a is None:
            return None
        return encode_int(e.dst, e.dst.wrap(a))
    if isinstance(e, Ptr):
        return _eval_ptr(e, env, funcs, ptrmap)
    if isinstance(e, PtrArith):
        p = decode_int(U8, _as_bytes(eval_expr(e.ptr, env, funcs, ptrmap)))
        a = decode_int(e.ity, _as_bytes(eval_expr(e.arg, env, funcs, ptrmap)))
        if p is None or a is None:
            return None
        r = p + a if e.op == "+" else p - a
        return encode_int(U8, U8.wrap(r))
    if isinstance(e, PtrDiff):
        p = decode_int(U8, _as_bytes(eval_expr(e.left, env, funcs, ptrmap)))
        q = decode_int(U8, _as_bytes(eval_expr(e.right, env, funcs, ptrmap)))
        if p is None or q is None:
            return None
        return encode_int(S8, S8.wrap(p - q))
    if isinstance(e, And):
        vals = [eval_expr(p, env, funcs, ptrmap) for p in e.parts]
        if any(v not in (TRUE_BYTES, FALSE_BYTES) for v in vals):
            return None
        return _bool_bytes(all(v == TRUE_BYTES for v in vals))
    if isinstance(e, Or):
        vals = [eval_expr(p, env, funcs, ptrmap) for p in e.parts]
        if any(v not in (TRUE_BYTES, FALSE_BYTES) for v in vals):
            return None
        return _bool_bytes(any(v == TRUE_BYTES for v in vals))
    if isinstance(e, Not):
        v = eval_expr(e.arg, env, funcs, ptrmap)
        if v not in (TRUE_BYTES, FALSE_BYTES):
            return None
        return _bool_bytes(v == FALSE_BYTES)
    if isinstance(e, IntCmp):
        a = eval_expr(e.left, env, funcs, ptrmap)
        b = eval_expr(e.right, env, funcs, ptrmap)
        if a is None or b is None:
            return FALSE_BYTES  # comparisons with an undefined side are false
        assert isinstance(a, int) and isinstance(b, int)
        r = {"=": a == b, "!=": a != b, "<": a < b,
             ">": a > b, "<=": a <= b, ">=": a >= b}[e.op]
        return _bool_bytes(r)
    if isinstance(e, BsEq):
        a = eval_expr(e.left, env, funcs, ptrmap)
        b = eval_expr(e.right, env, funcs, ptrmap)
        return _bool_bytes(a == b)  # total: both undefined compares equal
    if isinstance(e, Defined):
        return _bool_bytes(eval_expr(e.arg, env, funcs, ptrmap) is not None)
    if isinstance(e, Truth):
        return _bool_bytes(truthy(eval_expr(e.arg, env, funcs, ptrmap)))
    if isinstance(e, (AddrBase, MallocBase)):
        # base address as a free-standing integer; the address map fixes it
        if ptrmap is not None and e in ptrmap:
            return ptrmap[e]
        return None
    if isinstance(e, (AllocInit, AllocExt)):
        return None  # allocation tables have no runtime value
    raise SortError(f"unknown node {type(e).__name__}")


def _as_bytes(v: Value) -> Optional[bytes]:
    return v if isinstance(v, bytes) else None


def eval_fact(e: SymExpr, env: Env, funcs: FuncTable,
              ptrmap: Optional[PtrMap] = None) -> Optional[bool]:
    """Boolean view of a fact: True/False for 0x01/0x00, None otherwise."""
    v = eval_expr(e, env, funcs, ptrmap)
    if v == TRUE_BYTES:
        return True
    if v == FALSE_BYTES:
        return False
    return None


# ---------------------------------------------------------------------------
# rendering

_ATOMIC = (Var, Lit, IntLit, BoolLit, Len, LenY, Val, ValY, Enc, Apply,
           BinArith, BinCmp, Cast, Substr, Ptr, PtrArith, PtrDiff, Not,
           Defined, Truth)


def _hexlit(data: bytes) -> str:
    return "0x" + data.hex()


def render(e: SymExpr, names: Optional[Mapping[SymExpr, str]] = None) -> str:
    """Canonical text form. Injective on sort-correct expressions and
    inverted by parse_expr. `names` optionally abbreviates pointer bases
    and allocation tables (for logs; abbreviated output may not parse)."""
    n = names or {}

    def bits(x: SymExpr) -> str:
        # operand position that must not swallow a following '|' or '&&'
        s = go(x)
        return f"({s})" if isinstance(x, (Concat, And, Or)) else s

    def base(x: SymExpr) -> str:
        # substring bases and similar tight positions
        s = go(x)
        return s if isinstance(x, _ATOMIC) else f"({s})"

    def go(x: SymExpr) -> str:
        if x in n:
            return n[x]
        if isinstance(x, Var):
            return x.name
        if isinstance(x, Lit):
            return _hexlit(x.data)
        if isinstance(x, IntLit):
            return str(x.n)
        if isinstance(x, BoolLit):
            return "true" if x.value else "false"
        if isinstance(x, IntOp):
            return f"({go(x.left)} {x.op} {go(x.right)})"
        if isinstance(x, Len):
            return f"len({go(x.arg)})"
        if isinstance(x, LenY):
            return f"len_y({go(x.arg)})"
        if isinstance(x, Val):
            return f"val({x.ity})({go(x.arg)})"
        if isinstance(x, ValY):
            return f"val_y({x.ity})({go(x.arg)})"
        if isinstance(x, Enc):
            return f"bs({x.ity})({go(x.arg)})"
        if isinstance(x, Substr):
            return f"{base(x.base)}{{{go(x.pos)},{go(x.length)}}}"
        if isinstance(x, Concat):
            return "|".join(bits(p) for p in x.parts)
        if isinstance(x, Apply):
            return f"{x.sym}({', '.join(go(a) for a in x.args)})"
        if isinstance(x, BinArith):
            op = {"+": "add", "-": "sub", "*": "mul"}[x.op]
            return f"{op}({x.ity})({go(x.left)}, {go(x.right)})"
        if isinstance(x, BinCmp):
            op = {"==": "eq", "!=": "ne", "<": "lt",
                  ">": "gt", "<=": "le", ">=": "ge"}[x.op]
            return f"{op}({x.ity})({go(x.left)}, {go(x.right)})"
        if isinstance(x, Cast):
            return f"cast({x.src},{x.dst})({go(x.arg)})"
        if isinstance(x, AddrBase):
            return f"addr({x.var},{x.size})"
        if isinstance(x, MallocBase):
            return f"malloc({go(x.alloc)}, {go(x.tlen)})"
        if isinstance(x, AllocInit):
            inner = ",".join(f"{v}:{s}" for v, s in x.vars)
            return f"allocinit({inner})"
        if isinstance(x, AllocExt):
            return f"allocext({go(x.alloc)}, {go(x.tlen)})"
        if isinstance(x, Ptr):
            return f"ptr({go(x.base)}, {go(x.off)})"
        if isinstance(x, PtrArith):
            op = "ptr_add" if x.op == "+" else "ptr_sub"
            return f"{op}({x.ity})({go(x.ptr)}, {go(x.arg)})"
        if isinstance(x, PtrDiff):
            return f"ptr_diff({go(x.left)}, {go(x.right)})"
        if isinstance(x, And):
            return " && ".join(fact_part(p) for p in x.parts)
        if isinstance(x, Or):
            return " || ".join(fact_part(p) for p in x.parts)
        if isinstance(x, Not):
            return f"not({go(x.arg)})"
        if isinstance(x, IntCmp):
            return f"({go(x.left)} {x.op} {go(x.right)})"
        if isinstance(x, BsEq):
            return f"({bits(x.left)} = {bits(x.right)})"
        if isinstance(x, Defined):
            return f"defined({go(x.arg)})"
        if isinstance(x, Truth):
            return f"truth({go(x.arg)})"
        raise SortError(f"unknown node {type(x).__name__}")

    def fact_part(x: SymExpr) -> str:
        s = go(x)
        return s if isinstance(x, _ATOMIC + (IntCmp, BsEq)) else f"({s})"

    return go(e)


# ---------------------------------------------------------------------------
# parsing

_PUNCT = ("&&", "||", "<=", ">=", "!=", "==", "(", ")", "{", "}", ",",
          "|", "=", "<", ">", "+", "-", "*", ":")


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.toks: list[tuple[str, str, int]] = []  # (kind, value, pos)
        self._scan()
        self.i = 0

    def _scan(self) -> None:
        t, i, n = self.text, 0, len(self.text)
        while i < n:
            c = t[i]
            if c.isspace():
                i += 1
                continue
            if t.startswith("0x", i):
                j = i + 2
                while j < n and t[j] in "0123456789abcdefABCDEF":
                    j += 1
                if (j - i - 2) % 2:
                    raise ParseError(f"odd hex literal at {i}")
                self.toks.append(("hex", t[i + 2:j], i))
                i = j
                continue
            if c.isdigit():
                j = i
                while j < n and t[j].isdigit():
                    j += 1
                self.toks.append(("num", t[i:j], i))
                i = j
                continue
            if c.isalpha() or c == "_":
                j = i
                while j < n and (t[j].isalnum() or t[j] in "_'"):
                    j += 1
                self.toks.append(("ident", t[i:j], i))
                i = j
                continue
            if c in ("'", '"'):
                j = t.find(c, i + 1)
                if j < 0:
                    raise ParseError(f"unterminated string at {i}")
                self.toks.append(("str", t[i + 1:j], i))
                i = j + 1
                continue
            for p in _PUNCT:
                if t.startswith(p, i):
                    self.toks.append(("punct", p, i))
                    i += len(p)
                    break
            else:
                raise ParseError(f"unexpected character {c!r} at {i}")

    def peek(self, k: int = 0) -> tuple[str, str]:
        if self.i + k < len(self.toks):
            kind, val, _ = self.toks[self.i + k]
            return kind, val
        return ("eof", "")

    def next(self) -> tuple[str, str]:
        kind, val = self.peek()
        self.i += 1
        return kind, val

    def expect(self, val: str) -> None:
        kind, got = self.next()
        if got != val:
            raise ParseError(f"expected {val!r}, got {got!r} in {self.text!r}")

    def at(self, val: str) -> bool:
        return self.peek()[1] == val

    def accept(self, val: str) -> bool:
        if self.at(val):
            self.i += 1
            return True
        return False


_TYPED_HEADS = {"val": Val, "val_y": ValY, "bs": Enc}
_ARITH_HEADS = {"add": "+", "sub": "-", "mul": "*"}
_CMP_HEADS = {"eq": "==", "ne": "!=", "lt": "<", "gt": ">", "le": "<=", "ge": ">="}
_PTR_HEADS = {"ptr_add": "+", "ptr_sub": "-"}


def _parse_ity(tk: _Tokens) -> IntType:
    tk.expect("(")
    _, sign = tk.next()
    tk.expect(",")
    kind, w = tk.next()
    if sign not in ("u", "s") or kind != "num":
        raise ParseError("bad integer type")
    tk.expect(")")
    return IntType(sign == "s", int(w))


class _Parser:
    def __init__(self, text: str):
        self.tk = _Tokens(text)

    # fact level: || over && over comparisons
    def fact(self) -> SymExpr:
        parts = [self.fact_and()]
        while self.tk.accept("||"):
            parts.append(self.fact_and())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def fact_and(self) -> SymExpr:
        parts = [self.cmp()]
        while self.tk.accept("&&"):
            parts.append(self.cmp())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def cmp(self) -> SymExpr:
        left = self.expr()
        kind, val = self.tk.peek()
        if val in ("=", "!=", "<", ">", "<=", ">="):
            self.tk.next()
            right = self.expr()
            ls, rs = sort_of(left), sort_of(right)
            if ls is Sort.INT and rs is Sort.INT:
                return IntCmp(val, left, right)
            if ls is not Sort.INT and rs is not Sort.INT:
                if val == "=":
                    return BsEq(left, right)
                if val == "!=":
                    return Not(BsEq(left, right))
                raise ParseError(f"ordering {val!r} needs integer terms")
            raise ParseError("comparison mixes integer and bitstring sides")
        return left

    # expression level: int +- over * ; bits | ; shared atoms
    def expr(self) -> SymExpr:
        first = self.term()
        if sort_of(first) is Sort.INT:
            t = first
            while True:
                if self.tk.accept("+"):
                    t = IntOp("+", t, self.term())
                elif self.tk.accept("-"):
                    t = IntOp("-", t, self.term())
                else:
                    return t
        parts = [first]
        while self.tk.accept("|"):
            parts.append(self.term())
        return parts[0] if len(parts) == 1 else Concat(tuple(parts))

    def term(self) -> SymExpr:
        t = self.postfix()
        while sort_of(t) is Sort.INT and self.tk.accept("*"):
            t = IntOp("*", t, self.postfix())
        return t

    def postfix(self) -> SymExpr:
        e = self.atom()
        while self.tk.at("{"):
            self.tk.expect("{")
            p = self.expr()
            self.tk.expect(",")
            l = self.expr()
            self.tk.expect("}")
            e = Substr(e, p, l)
        return e

    def args(self) -> list[SymExpr]:
        self.tk.expect("(")
        if self.tk.accept(")"):
            return []
        out = [self.fact_arg()]
        while self.tk.accept(","):
            out.append(self.fact_arg())
        self.tk.expect(")")
        return out

    def fact_arg(self) -> SymExpr:
        # arguments may be facts (for not/..) or plain expressions
        return self.fact()

    def atom(self) -> SymExpr:
        kind, val = self.tk.next()
        if kind == "hex":
            return Lit(bytes.fromhex(val))
        if kind == "str":
            return Lit(val.encode("latin-1"))
        if kind == "num":
            return IntLit(int(val))
        if kind == "punct" and val == "-":
            k2, v2 = self.tk.next()
            if k2 != "num":
                raise ParseError("expected number after unary minus")
            return IntLit(-int(v2))
        if kind == "punct" and val == "(":
            e = self.fact()
            self.tk.expect(")")
            return e
        if kind != "ident":
            raise ParseError(f"unexpected token {val!r}")
        return self.ident(val)

    def ident(self, name: str) -> SymExpr:
        tk = self.tk
        if name == "true" and not tk.at("("):
            return TRUE
        if name == "false" and not tk.at("("):
            return FALSE
        if not tk.at("("):
            return Var(name)
        if name in _TYPED_HEADS:
            ity = _parse_ity(tk)
            a = self.args()
            if len(a) != 1:
                raise ParseError(f"{name} takes one argument")
            return _TYPED_HEADS[name](ity, a[0])
        if name in _ARITH_HEADS:
            ity = _parse_ity(tk)
            a = self.args()
            if len(a) != 2:
                raise ParseError(f"{name} takes two arguments")
            return BinArith(_ARITH_HEADS[name], ity, a[0], a[1])
        if name in _CMP_HEADS:
            ity = _parse_ity(tk)
            a = self.args()
            if len(a) != 2:
                raise ParseError(f"{name} takes two arguments")
            return BinCmp(_CMP_HEADS[name], ity, a[0], a[1])
        if name in _PTR_HEADS:
            ity = _parse_ity(tk)
            a = self.args()
            if len(a) != 2:
                raise ParseError(f"{name} takes two arguments")
            return PtrArith(_PTR_HEADS[name], ity, a[0], a[1])
        if name == "cast":
            tk.expect("(")
            _, s1 = tk.next()
            tk.expect(",")
            _, w1 = tk.next()
            tk.expect(",")
            _, s2 = tk.next()
            tk.expect(",")
            _, w2 = tk.next()
            tk.expect(")")
            a = self.args()
            if len(a) != 1:
                raise ParseError("cast takes one argument")
            return Cast(IntType(s1 == "s", int(w1)), IntType(s2 == "s", int(w2)), a[0])
        if name == "len":
            a = self.args()
            if len(a) != 1:
                raise ParseError("len takes one argument")
            return Len(a[0])
        if name == "len_y":
            a = self.args()
            if len(a) != 1:
                raise ParseError("len_y takes one argument")
            return LenY(a[0])
        if name == "ptr_diff":
            a = self.args()
            if len(a) != 2:
                raise ParseError("ptr_diff takes two arguments")
            return PtrDiff(a[0], a[1])
        if name == "ptr":
            a = self.args()
            if len(a) != 2:
                raise ParseError("ptr takes two arguments")
            return Ptr(a[0], a[1])
        if name == "addr":
            tk.expect("(")
            _, v = tk.next()
            tk.expect(",")
            _, s = tk.next()
            tk.expect(")")
            return AddrBase(v, int(s))
        if name == "malloc":
            a = self.args()
            if len(a) != 2:
                raise ParseError("malloc takes two arguments")
            return MallocBase(a[0], a[1])
        if name == "allocinit":
            tk.expect("(")
            vars_: list[tuple[str, int]] = []
            if not tk.accept(")"):
                while True:
                    _, v = tk.next()
                    tk.expect(":")
                    _, s = tk.next()
                    vars_.append((v, int(s)))
                    if tk.accept(")"):
                        break
                    tk.expect(",")
            return AllocInit(tuple(vars_))
        if name == "allocext":
            a = self.args()
            if len(a) != 2:
                raise ParseError("allocext takes two arguments")
            return AllocExt(a[0], a[1])
        if name == "not":
            a = self.args()
            if len(a) != 1:
                raise ParseError("not takes one argument")
            return Not(a[0])
        if name == "defined":
            a = self.args()
            if len(a) != 1:
                raise ParseError("defined takes one argument")
            return Defined(a[0])
        if name == "truth":
            a = self.args()
            if len(a) != 1:
                raise ParseError("truth takes one argument")
            return Truth(a[0])
        return Apply(name, tuple(self.args()))


def parse_expr(text: str) -> SymExpr:
    """Parses the canonical expression syntax produced by render()."""
    p = _Parser(text)
    e = p.cmp()
    if p.tk.peek()[0] != "eof":
        raise ParseError(f"trailing input at token {p.tk.peek()[1]!r} in {text!r}")
    sort_check(e)
    return e


def parse_fact(text: str) -> SymExpr:
    """Parses a fact (boolean-sorted expression)."""
    p = _Parser(text)
    e = p.fact()
    if p.tk.peek()[0] != "eof":
        raise ParseError(f"trailing input at token {p.tk.peek()[1]!r} in {text!r}")
    sort_check(e)
    if sort_of(e) is not Sort.BOOL:
        raise ParseError(f"not a fact: {text!r}")
    return e
