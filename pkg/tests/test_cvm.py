"""Program format and operator dispatch checks.

The load-bearing property here is agreement: applying a symbol to
values gives the same result as building the corresponding term and
evaluating it. The interpreter and the symbolic executor share these
two functions, so agreement here is what makes lockstep comparison
meaningful later.
"""

import random
from pathlib import Path

import pytest

from artifact import cvm as C
from artifact import terms as T

from genexpr import make_funcs

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def parse(text: str) -> C.Program:
    return C.parse_cvm(text, "t")


# ---------------------------------------------------------------------------
# parsing


def test_parse_otp_fixture():
    prog = C.parse_cvm((FIXTURES / "otp.cvm").read_text(), "otp")
    assert prog.vars == (("payload", 8), ("msg", 8), ("msg_len", 8), ("pad", 8))
    assert isinstance(prog.instrs[0], C.Init)
    assert prog.instrs[1] == C.In("c", (), ("pad",))
    assert prog.instrs[-1] == C.Out("d", (), ("cipher",))
    assert prog.fn_symbols == frozenset({"XOR"})
    # the canonical text round-trips
    again = C.parse_cvm(C.render_cvm(prog), "otp")
    assert again == prog


def test_const_sugar():
    prog = parse("Init\nIn c _\nConst tau(u,8)(20)\nWriteEnv x\nOut c ()")
    assert prog.instrs[2] == C.Const(20)
    assert prog.instrs[3] == C.Apply("bs(u,8)", 1)


def test_const_forms():
    prog = parse("Init\nIn c _\nConst 0x0102\nConst 'p'\nConst 7\n"
                 "WriteEnv x\nOut c ()")
    assert prog.instrs[2] == C.Const(b"\x01\x02")
    assert prog.instrs[3] == C.Const(b"p")
    assert prog.instrs[4] == C.Const(7)


def test_channel_params_and_patterns():
    prog = parse("Init\nIn c[i,j] (a,b)\nOut d[i] a")
    assert prog.instrs[1] == C.In("c", ("i", "j"), ("a", "b"))
    assert prog.instrs[2] == C.Out("d", ("i",), ("a",))
    prog2 = parse("Init\nIn c ()\nOut c ()")
    assert prog2.instrs[1].pattern == ()
    assert prog2.instrs[2].args == ()
    prog3 = parse("Init\nIn c\nOut c")
    assert prog3.instrs[1].pattern is None


@pytest.mark.parametrize("text,msg", [
    ("In c _\nOut c ()", "start with Init"),
    ("Init\nInit\nIn c _\nOut c ()", "duplicate Init"),
    ("Init\nOut c ()", "output before the next input"),
    ("Init\nIn c _\nIn c _\nOut c ()", "two inputs without an output"),
    ("Init\nIn c _", "end with an output"),
    ("Init\nIn c _\nOut c ()\nWriteEnv x", "end with an output"),
    ("Init\nIn c _\nRef nope\nOut c ()", "undeclared var"),
    ("Init\nIn c _\nApply len/2\nOut c ()", "arity"),
    ("Init\nIn c _\nApply noslash\nOut c ()", "symbol/arity"),
    ("Init\nIn c _\nConst zz\nOut c ()", "bad constant"),
    ("Init\nIn c _\nBogus\nOut c ()", "unknown instruction"),
    ("var x : 4\nInit\nvar y : 4\nIn c _\nOut c ()", "after Init"),
])
def test_rejects(text, msg):
    with pytest.raises(C.CVMParseError, match=msg):
        parse(text)


def test_render_roundtrip_all_instructions():
    text = """
var buf : 16
Init
In c[i] (m1, m2)
Const 0xdeadbeef
Ref buf
Store
Const tau(s,4)(-1)
Malloc
Load
New k
Apply XOR/2
Dup
Test
Assume
ReadEnv m1
WriteEnv r
TypeHint fixed_16
Event done/1
Out c[i] r
"""
    prog = parse(text)
    assert C.parse_cvm(C.render_cvm(prog), "t") == prog


# ---------------------------------------------------------------------------
# operator dispatch agreement

ALL_ITYS = [T.IntType(s, w) for s in (False, True) for w in (1, 2, 4, 8)]


def _sym_pool():
    syms = []
    for h in ("bs", "val", "add", "sub", "mul", "eq", "ne", "lt", "gt",
              "le", "ge", "ptr_add", "ptr_sub"):
        for ity in ALL_ITYS:
            syms.append((f"{h}({ity})", C.op_arity(f"{h}({ity})")))
    for src in ALL_ITYS:
        for dst in ALL_ITYS:
            syms.append((f"cast({src},{dst})", 1))
    for plain, ar in (("len", 1), ("truth", 1), ("not", 1), ("and", 2),
                      ("or", 2), ("ptr_diff", 2)):
        syms.append((plain, ar))
    syms += [("XOR", 2), ("f", 1), ("g", 2), ("h0", 0), ("cmp", 2)]
    return syms


def _rand_value(rng: random.Random):
    r = rng.random()
    if r < 0.15:
        return None
    if r < 0.25:
        return rng.randrange(-300, 300)  # the machine pushes ints too
    n = rng.choice([0, 1, 2, 4, 8, 8, 8, 8, 3])
    return bytes(rng.randrange(256) for _ in range(n))


def _rand_int_heavy(rng: random.Random):
    r = rng.random()
    if r < 0.15:
        return None
    if r < 0.3:
        return bytes(rng.randrange(256) for _ in range(rng.randrange(5)))
    return rng.randrange(-300, 300)


def test_apply_agreement_bulk():
    funcs = make_funcs()
    rng = random.Random(20260818)
    pool = _sym_pool()
    checked = 0
    for sym, arity in pool:
        draw = _rand_int_heavy if sym.startswith("bs(") else _rand_value
        for _ in range(60):
            vals = tuple(draw(rng) for _ in range(arity))
            names = tuple(f"v{i}" for i in range(arity))
            env = {n: v for n, v in zip(names, vals) if v is not None
                   and not isinstance(v, int)}
            exprs = tuple(
                T.IntLit(v) if isinstance(v, int) else T.Var(n)
                for n, v in zip(names, vals))
            concrete = C.apply_concrete(sym, vals, funcs)
            term = C.apply_symbolic(sym, exprs)
            symbolic = T.eval_expr(term, env, funcs)
            assert symbolic == concrete, (sym, vals, T.render(term))
            checked += 1
    assert checked == len(pool) * 60


def test_apply_agreement_bool_wrapping():
    # connectives accept already-boolean operands without double wrap
    x = T.Truth(T.Var("x"))
    assert C.apply_symbolic("truth", (x,)) == x
    e = C.apply_symbolic("and", (x, T.Var("y")))
    assert e == T.conj(x, T.Truth(T.Var("y")))


def test_apply_symbolic_shapes():
    assert C.apply_symbolic("bs(u,4)", (T.IntLit(5),)) == T.Enc(T.U4, T.IntLit(5))
    assert C.apply_symbolic("val(u,8)", (T.Var("x"),)) == T.Val(T.U8, T.Var("x"))
    e = C.apply_symbolic("add(u,8)", (T.Var("a"), T.Var("b")))
    assert e == T.BinArith("+", T.U8, T.Var("a"), T.Var("b"))
    e = C.apply_symbolic("eq(u,8)", (T.Var("a"), T.Var("b")))
    assert e == T.BinCmp("==", T.U8, T.Var("a"), T.Var("b"))
    e = C.apply_symbolic("cast(u,4,s,8)", (T.Var("a"),))
    assert e == T.Cast(T.IntType(False, 4), T.IntType(True, 8), T.Var("a"))
    e = C.apply_symbolic("XOR", (T.Var("a"), T.Var("b")))
    assert e == T.Apply("XOR", (T.Var("a"), T.Var("b")))


def test_op_arity_and_parse_op():
    assert C.op_arity("bs(u,4)") == 1
    assert C.op_arity("add(s,8)") == 2
    assert C.op_arity("cast(u,4,u,8)") == 1
    assert C.op_arity("ptr_diff") == 2
    assert C.op_arity("XOR") is None
    assert C.parse_op("eq(u,2)") == ("eq", T.IntType(False, 2))
    assert C.parse_op("nonsense(u,2)") is None
