"""Stack-machine programs modeling one execution path of low-level
protocol code.

A program is a flat instruction list over a byte-addressed memory, an
operand stack and a variable environment. Programs begin with Init and
their In and Out instructions alternate starting with In; after the
final In the program may keep computing (checks, events) before it
falls off the end.

The text format is line-based: a header of `var name : size`
declarations (sizes in bytes, for address-taken program variables)
followed by one instruction per line. `#` starts a comment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional, Union

from . import terms as T
from .terms import IntType, SymExpr, Value


class CVMParseError(Exception):
    """Program text rejected; message carries the line number."""


# ---------------------------------------------------------------------------
# instructions


@dataclass(frozen=True)
class Init:
    pass


@dataclass(frozen=True)
class In:
    chan: str
    params: tuple[str, ...]
    # None = wildcard (accept and discard), () = unit message,
    # otherwise the env variables the message tuple binds
    pattern: Optional[tuple[str, ...]]


@dataclass(frozen=True)
class Out:
    chan: str
    params: tuple[str, ...]
    args: tuple[str, ...]  # env variables; () sends the unit message


@dataclass(frozen=True)
class Const:
    value: Union[bytes, int]


@dataclass(frozen=True)
class Ref:
    var: str


@dataclass(frozen=True)
class Malloc:
    pass


@dataclass(frozen=True)
class Load:
    pass


@dataclass(frozen=True)
class Store:
    pass


@dataclass(frozen=True)
class New:
    var: str


@dataclass(frozen=True)
class Apply:
    sym: str
    arity: int


@dataclass(frozen=True)
class Dup:
    pass


@dataclass(frozen=True)
class Test:
    pass


@dataclass(frozen=True)
class Assume:
    pass


@dataclass(frozen=True)
class ReadEnv:
    var: str


@dataclass(frozen=True)
class WriteEnv:
    var: str


@dataclass(frozen=True)
class LetPat:
    # pops a value; if it lies in the image of the one-argument pattern
    # function, binds the preimage to var, else yields to the context.
    # Models success checks on partial operations (decryption).
    fname: str
    var: str


@dataclass(frozen=True)
class Event:
    label: str
    arity: int


@dataclass(frozen=True)
class TypeHint:
    tname: str


Instr = Union[Init, In, Out, Const, Ref, Malloc, Load, Store, New, Apply,
              Dup, Test, Assume, ReadEnv, WriteEnv, LetPat, Event, TypeHint]


@dataclass(frozen=True)
class Program:
    name: str
    vars: tuple[tuple[str, int], ...]  # declaration order fixes addresses
    instrs: tuple[Instr, ...]

    def var_size(self, v: str) -> int:
        for name, size in self.vars:
            if name == v:
                return size
        raise KeyError(v)

    @property
    def fn_symbols(self) -> frozenset[str]:
        out = set()
        for ins in self.instrs:
            if isinstance(ins, Apply) and parse_op(ins.sym) is None:
                out.add(ins.sym)
        return frozenset(out)


# ---------------------------------------------------------------------------
# operator vocabulary

_OP_RE = re.compile(r"^(bs|val|add|sub|mul|eq|ne|lt|gt|le|ge|ptr_add|ptr_sub)"
                    r"\((u|s),(\d+)\)$")
_CAST_RE = re.compile(r"^cast\((u|s),(\d+),(u|s),(\d+)\)$")

_ARITH = {"add": "+", "sub": "-", "mul": "*"}
_CMPOP = {"eq": "==", "ne": "!=", "lt": "<", "gt": ">", "le": "<=", "ge": ">="}
_PLAIN_OPS = {"len": 1, "truth": 1, "not": 1, "and": 2, "or": 2,
              "ptr_diff": 2}


def parse_op(sym: str):
    """Structured view of a builtin operator name, or None for a user
    function symbol."""
    m = _OP_RE.match(sym)
    if m:
        head = m.group(1)
        ity = IntType(m.group(2) == "s", int(m.group(3)))
        return (head, ity)
    m = _CAST_RE.match(sym)
    if m:
        src = IntType(m.group(1) == "s", int(m.group(2)))
        dst = IntType(m.group(3) == "s", int(m.group(4)))
        return ("cast", (src, dst))
    if sym in _PLAIN_OPS:
        return (sym, None)
    return None


def op_arity(sym: str) -> Optional[int]:
    op = parse_op(sym)
    if op is None:
        return None
    head = op[0]
    if head in ("bs", "val", "cast", "len", "truth", "not"):
        return 1
    return 2


def _truth_wrap(e: SymExpr) -> SymExpr:
    return e if T.sort_of(e) is T.Sort.BOOL else T.Truth(e)


def apply_symbolic(sym: str, args: tuple[SymExpr, ...]) -> SymExpr:
    """The term a builtin or user symbol builds; args[0] is the first
    argument (topmost on the stack)."""
    op = parse_op(sym)
    if op is None:
        return T.Apply(sym, args)
    head, ity = op
    if head == "bs":
        return T.Enc(ity, args[0])
    if head == "val":
        return T.Val(ity, args[0])
    if head == "len":
        return T.Len(args[0])
    if head in _ARITH:
        return T.BinArith(_ARITH[head], ity, args[0], args[1])
    if head in _CMPOP:
        return T.BinCmp(_CMPOP[head], ity, args[0], args[1])
    if head == "cast":
        return T.Cast(ity[0], ity[1], args[0])
    if head == "ptr_add":
        return T.PtrArith("+", ity, args[0], args[1])
    if head == "ptr_sub":
        return T.PtrArith("-", ity, args[0], args[1])
    if head == "ptr_diff":
        return T.PtrDiff(args[0], args[1])
    if head == "truth":
        return _truth_wrap(args[0])
    if head == "not":
        return T.neg(_truth_wrap(args[0]))
    if head == "and":
        return T.conj(_truth_wrap(args[0]), _truth_wrap(args[1]))
    if head == "or":
        return T.disj(_truth_wrap(args[0]), _truth_wrap(args[1]))
    raise AssertionError(sym)


def _dec(ity: IntType, v: Value) -> Optional[int]:
    return T.decode_int(ity, v if isinstance(v, bytes) else None)


def apply_concrete(sym: str, vals: tuple[Value, ...], funcs: T.FuncTable) -> Value:
    """Concrete semantics of a symbol over stack values; mirrors the
    evaluation of the term apply_symbolic builds."""
    op = parse_op(sym)
    if op is None:
        return funcs.call(sym, vals)
    head, ity = op
    if head == "bs":
        return T.encode_int(ity, vals[0]) if isinstance(vals[0], int) else None
    if head == "val":
        return _dec(ity, vals[0])
    if head == "len":
        return len(vals[0]) if isinstance(vals[0], bytes) else None
    if head in _ARITH:
        a, b = _dec(ity, vals[0]), _dec(ity, vals[1])
        if a is None or b is None:
            return None
        r = {"add": a + b, "sub": a - b, "mul": a * b}[head]
        return T.encode_int(ity, ity.wrap(r))
    if head in _CMPOP:
        a, b = _dec(ity, vals[0]), _dec(ity, vals[1])
        if a is None or b is None:
            return None
        r = {"eq": a == b, "ne": a != b, "lt": a < b,
             "gt": a > b, "le": a <= b, "ge": a >= b}[head]
        return T.encode_int(T.S4, 1 if r else 0)
    if head == "cast":
        src, dst = ity
        a = _dec(src, vals[0])
        return None if a is None else T.encode_int(dst, dst.wrap(a))
    if head in ("ptr_add", "ptr_sub"):
        p, a = _dec(T.U8, vals[0]), _dec(ity, vals[1])
        if p is None or a is None:
            return None
        r = p + a if head == "ptr_add" else p - a
        return T.encode_int(T.U8, T.U8.wrap(r))
    if head == "ptr_diff":
        p, q = _dec(T.U8, vals[0]), _dec(T.U8, vals[1])
        if p is None or q is None:
            return None
        return T.encode_int(T.S8, T.S8.wrap(p - q))
    # truthiness connectives delegate to the builtin table
    return funcs.call(head, vals)


# ---------------------------------------------------------------------------
# text format

_IDENT = r"[A-Za-z_][A-Za-z0-9_']*"
_VAR_RE = re.compile(rf"^var\s+({_IDENT})\s*:\s*(\d+)$")
_CHAN_RE = re.compile(rf"^({_IDENT})(?:\[([^\]]*)\])?$")
_SUGAR_RE = re.compile(r"^tau\((u|s),(\d+)\)\((-?\d+)\)$")


def _parse_chan(tok: str, lineno: int) -> tuple[str, tuple[str, ...]]:
    m = _CHAN_RE.match(tok)
    if not m:
        raise CVMParseError(f"line {lineno}: bad channel {tok!r}")
    params = tuple(p.strip() for p in m.group(2).split(",")) if m.group(2) else ()
    return m.group(1), params


def _parse_msg_vars(rest: str, lineno: int) -> Optional[tuple[str, ...]]:
    rest = rest.strip()
    if rest == "_":
        return None
    if rest == "()":
        return ()
    if rest.startswith("(") and rest.endswith(")"):
        inner = rest[1:-1].strip()
        return tuple(v.strip() for v in inner.split(","))
    if re.fullmatch(_IDENT, rest):
        return (rest,)
    raise CVMParseError(f"line {lineno}: bad message variables {rest!r}")


def parse_cvm(text: str, name: str = "program") -> Program:
    """Parses and validates the line-based program format."""
    vars_: list[tuple[str, int]] = []
    instrs: list[Instr] = []
    seen_init = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip().rstrip(";").strip()
        if not line:
            continue
        m = _VAR_RE.match(line)
        if m:
            if seen_init:
                raise CVMParseError(f"line {lineno}: var declaration after Init")
            if any(v == m.group(1) for v, _ in vars_):
                raise CVMParseError(f"line {lineno}: duplicate var {m.group(1)}")
            vars_.append((m.group(1), int(m.group(2))))
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        if head == "Init":
            if seen_init:
                raise CVMParseError(f"line {lineno}: duplicate Init")
            seen_init = True
            instrs.append(Init())
            continue
        if not seen_init:
            raise CVMParseError(f"line {lineno}: program must start with Init")
        if head == "In":
            chan_tok, _, vs = rest.partition(" ")
            chan, params = _parse_chan(chan_tok, lineno)
            instrs.append(In(chan, params, _parse_msg_vars(vs or "_", lineno)))
        elif head == "Out":
            chan_tok, _, vs = rest.partition(" ")
            chan, params = _parse_chan(chan_tok, lineno)
            args = _parse_msg_vars(vs or "()", lineno)
            if args is None:
                raise CVMParseError(f"line {lineno}: Out needs argument variables")
            instrs.append(Out(chan, params, args))
        elif head == "Const":
            instrs.extend(_parse_const(rest, lineno))
        elif head == "Ref":
            if not any(v == rest for v, _ in vars_):
                raise CVMParseError(f"line {lineno}: Ref of undeclared var {rest!r}")
            instrs.append(Ref(rest))
        elif head == "Malloc":
            instrs.append(Malloc())
        elif head == "Load":
            instrs.append(Load())
        elif head == "Store":
            instrs.append(Store())
        elif head == "New":
            if not re.fullmatch(_IDENT, rest):
                raise CVMParseError(f"line {lineno}: bad New variable {rest!r}")
            instrs.append(New(rest))
        elif head == "Apply":
            sym, slash, ar = rest.rpartition("/")
            if not slash or not ar.isdigit():
                raise CVMParseError(f"line {lineno}: Apply needs symbol/arity")
            want = op_arity(sym)
            if want is not None and want != int(ar):
                raise CVMParseError(
                    f"line {lineno}: {sym} has arity {want}, not {ar}")
            instrs.append(Apply(sym, int(ar)))
        elif head == "Dup":
            instrs.append(Dup())
        elif head == "Test":
            instrs.append(Test())
        elif head == "Assume":
            instrs.append(Assume())
        elif head == "ReadEnv":
            instrs.append(ReadEnv(rest))
        elif head == "WriteEnv":
            instrs.append(WriteEnv(rest))
        elif head == "LetPat":
            fname, _, v = rest.partition(" ")
            v = v.strip()
            if not re.fullmatch(_IDENT, fname) or not re.fullmatch(_IDENT, v):
                raise CVMParseError(
                    f"line {lineno}: LetPat needs a pattern symbol and a variable")
            instrs.append(LetPat(fname, v))
        elif head == "Event":
            sym, slash, ar = rest.rpartition("/")
            if not slash or not ar.isdigit():
                raise CVMParseError(f"line {lineno}: Event needs label/arity")
            instrs.append(Event(sym, int(ar)))
        elif head == "TypeHint":
            if not rest:
                raise CVMParseError(f"line {lineno}: TypeHint needs a type name")
            instrs.append(TypeHint(rest))
        else:
            raise CVMParseError(f"line {lineno}: unknown instruction {head!r}")
    prog = Program(name, tuple(vars_), tuple(instrs))
    validate(prog)
    return prog


def _parse_const(rest: str, lineno: int) -> list[Instr]:
    m = _SUGAR_RE.match(rest)
    if m:
        # Const tau(u,w)(n) abbreviates pushing n and encoding it
        ity = f"{m.group(1)},{m.group(2)}"
        return [Const(int(m.group(3))), Apply(f"bs({ity})", 1)]
    if rest.startswith("0x"):
        hexpart = rest[2:]
        if len(hexpart) % 2 or not re.fullmatch(r"[0-9a-fA-F]*", hexpart):
            raise CVMParseError(f"line {lineno}: bad hex constant {rest!r}")
        return [Const(bytes.fromhex(hexpart))]
    if rest.startswith("'") and rest.endswith("'") and len(rest) >= 2:
        return [Const(rest[1:-1].encode("latin-1"))]
    if re.fullmatch(r"-?\d+", rest):
        return [Const(int(rest))]
    raise CVMParseError(f"line {lineno}: bad constant {rest!r}")


def validate(prog: Program) -> None:
    """Structural checks: Init first, In/Out alternation starting with
    In, at least one In. Between an Out and the next In (or the end of
    the program) only plain computation is allowed: an action recorded
    there would have no place in the extracted process, whose send
    continues directly into the next receive."""
    if not prog.instrs or not isinstance(prog.instrs[0], Init):
        raise CVMParseError("program must start with Init")
    expect_in = True
    after_out = False
    n_in = 0
    for ins in prog.instrs[1:]:
        if isinstance(ins, Init):
            raise CVMParseError("duplicate Init")
        if isinstance(ins, In):
            if not expect_in:
                raise CVMParseError("two inputs without an output between")
            expect_in = False
            after_out = False
            n_in += 1
        elif isinstance(ins, Out):
            if expect_in:
                raise CVMParseError("output before the next input")
            expect_in = True
            after_out = True
        elif after_out and isinstance(ins, (Test, LetPat, Assume, New,
                                            WriteEnv, Event)):
            raise CVMParseError(
                f"{type(ins).__name__} between an output and the next input")
    if n_in == 0:
        raise CVMParseError("program performs no input")


# ---------------------------------------------------------------------------
# rendering


def _chan_text(chan: str, params: tuple[str, ...]) -> str:
    return f"{chan}[{','.join(params)}]" if params else chan


def _vars_text(vs: Optional[tuple[str, ...]]) -> str:
    if vs is None:
        return "_"
    if len(vs) == 1:
        return vs[0]
    return f"({', '.join(vs)})"


def render_cvm(prog: Program) -> str:
    """Canonical text; parse_cvm inverts it (sugar is parse-only)."""
    lines = [f"var {v} : {s}" for v, s in prog.vars]
    for ins in prog.instrs:
        if isinstance(ins, Init):
            lines.append("Init")
        elif isinstance(ins, In):
            lines.append(f"In {_chan_text(ins.chan, ins.params)} {_vars_text(ins.pattern)}")
        elif isinstance(ins, Out):
            lines.append(f"Out {_chan_text(ins.chan, ins.params)} {_vars_text(ins.args)}")
        elif isinstance(ins, Const):
            if isinstance(ins.value, bytes):
                lines.append(f"Const 0x{ins.value.hex()}")
            else:
                lines.append(f"Const {ins.value}")
        elif isinstance(ins, Ref):
            lines.append(f"Ref {ins.var}")
        elif isinstance(ins, Malloc):
            lines.append("Malloc")
        elif isinstance(ins, Load):
            lines.append("Load")
        elif isinstance(ins, Store):
            lines.append("Store")
        elif isinstance(ins, New):
            lines.append(f"New {ins.var}")
        elif isinstance(ins, Apply):
            lines.append(f"Apply {ins.sym}/{ins.arity}")
        elif isinstance(ins, Dup):
            lines.append("Dup")
        elif isinstance(ins, Test):
            lines.append("Test")
        elif isinstance(ins, Assume):
            lines.append("Assume")
        elif isinstance(ins, ReadEnv):
            lines.append(f"ReadEnv {ins.var}")
        elif isinstance(ins, WriteEnv):
            lines.append(f"WriteEnv {ins.var}")
        elif isinstance(ins, Event):
            lines.append(f"Event {ins.label}/{ins.arity}")
        elif isinstance(ins, TypeHint):
            lines.append(f"TypeHint {ins.tname}")
        else:
            raise AssertionError(type(ins).__name__)
    return "\n".join(lines) + "\n"
