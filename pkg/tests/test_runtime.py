"""End-to-end interpreter checks: scheduling, machine leaves, trace
properties and violation probabilities."""

import random
from pathlib import Path

import pytest

from artifact import cvm as C
from artifact import terms as T
from artifact import runtime as R

from genexpr import make_funcs

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

FUNCS = T.base_functions()


def run(text, seed=0, progs=None, **kw):
    return R.run_trace(R.parse_process(text, progs), FUNCS, seed, **kw)


# ---------------------------------------------------------------------------
# parsing


def test_parse_basic_shapes():
    p = R.parse_process("in(start, ()); out(c, 0x01); 0")
    assert p == R.PIn("start", (), (), R.POut("c", (), (T.Lit(b"\x01"),), R.NIL))


def test_parse_parallel_binds_looser_than_sequence():
    p = R.parse_process("in(a, x); out(b, x) | in(c, y); out(d, y)")
    assert isinstance(p, R.PPar) and len(p.parts) == 2
    assert isinstance(p.parts[0], R.PIn) and p.parts[0].chan == "a"
    assert isinstance(p.parts[1], R.PIn) and p.parts[1].chan == "c"


def test_parse_channel_index_litervalues():
    p = R.parse_process("in(c[1, i], m); out(d, m)")
    assert p.params == (T.Lit(b"\x01"), T.Var("i"))


def test_parse_replication_and_yield():
    p = R.parse_process("!i<=N { in(c[i], ()); yield }")
    assert p == R.PRepl("i", "N", R.PIn("c", (T.Var("i"),), (),
                                        R.yield_proc(("i",))))


def test_parse_if_default_else_yields_with_indices():
    p = R.parse_process("!i<=N { in(c[i], x); if truth(x) then out(d[i], x) }")
    body = p.body.body
    assert isinstance(body, R.PIf)
    assert body.els == R.yield_proc(("i",))


def test_parse_strong_forms():
    p = R.parse_process("in(a, x); let! y = f(x) in out(b, y) else out(e, ()); 0")
    let = p.body
    assert isinstance(let, R.PLet) and let.strong
    assert isinstance(let.els, R.POut) and let.els.chan == "e"
    q = R.parse_process("in(a, x); if! x = 0x01 then out(b, ()) else out(e, ())")
    assert isinstance(q.body, R.PIf) and q.body.strong

    with pytest.raises(R.ProcessError, match="plain let takes no else"):
        R.parse_process("in(a, x); let y = x in out(b, y) else out(e, ())")
    with pytest.raises(R.ProcessError, match="bitstring equality"):
        R.parse_process("in(a, x); if! truth(x) then out(b, ())")


def test_parse_pattern_let():
    p = R.parse_process("in(a, x); let tag(u, v) = x in out(b, u); 0 else yield")
    let = p.body
    assert let == R.PLetPat("tag", ("u", "v"), T.Var("x"),
                            R.POut("b", (), (T.Var("u"),), R.NIL),
                            R.yield_proc(()))


def test_parse_message_tuples():
    p = R.parse_process("in(a, (x, y)); out(b, (y, x))")
    assert p.pattern == ("x", "y")
    assert p.body.args == (T.Var("y"), T.Var("x"))
    # a parenthesized single expression is not a tuple
    q = R.parse_process("in(a, x); out(b, (x|x){0,1})")
    assert q.body.args == (T.Substr(T.Concat((T.Var("x"), T.Var("x"))),
                                    T.IntLit(0), T.IntLit(1)),)


def test_parse_event_and_assume():
    p = R.parse_process(
        "in(a, x); assume len(x) = 2; event seen(x, 0x00); out(b, x)")
    assert isinstance(p.body, R.PAssume)
    ev = p.body.body
    assert ev.label == "seen" and len(ev.args) == 2


def test_parse_cvm_leaf_prefixing():
    prog = C.parse_cvm("Init\nIn c _\nWriteEnv x\nOut c ()", "leaf")
    p = R.parse_process("!i<=N { cvm leaf }", progs={"leaf": prog})
    leaf = p.body
    assert isinstance(leaf, R.PCVM)
    assert leaf.prog.instrs[1] == C.In("c", ("i",), None)
    assert leaf.prog.instrs[-1] == C.Out("c", ("i",), ())


@pytest.mark.parametrize("text", [
    "out(c, )",
    "in(c x); 0",
    "let x = in out(c, x)",
    "if x = then out(c, ())",
    "in(a, x); out(b, x) | ",
    "cvm missing",
    "new x: fixed; out(c, x)",
    "0 extra",
])
def test_parse_rejects(text):
    with pytest.raises(R.ProcessError):
        p = R.parse_process(text)
        if isinstance(p, R.PNew):
            p.size  # type errors surface on use


def test_render_roundtrip():
    prog = C.parse_cvm("Init\nIn c _\nWriteEnv x\nOut c ()", "leaf")
    texts = [
        "in(start, ()); out(c, 0x01); 0",
        "in(a, x); new k: fixed_16; let y = XOR(x, k) in out(b, y); 0",
        "!i<=N { in(c[i], m); if m = 0x00 then out(d[i], m); 0 else yield }",
        "in(a, (x, y)); event seen(x); out(b, (y, x, 0x))",
        "in(a, x); let! y = f(x) in out(b, y); 0 else out(e, ()); 0",
        "in(a, x); let tag(u, v) = x in out(b, u); 0 else out(e, ()); 0",
        "in(a, x); assume truth(x); out(b, x) | in(c, ()); yield",
        "!i<=N { cvm leaf }",
    ]
    for text in texts:
        p = R.parse_process(text, progs={"leaf": prog})
        again = R.parse_process(R.render_process(p), progs={"leaf": prog})
        assert again == p, text


# ---------------------------------------------------------------------------
# well-formedness


def test_well_formed_accepts():
    R.check_well_formed(R.parse_process(
        "in(a, x); new k: fixed_4; let y = XOR(x, k) in out(b, y); 0"))


def test_well_formed_rejects_double_bind():
    with pytest.raises(R.ProcessError, match="more than once"):
        R.check_well_formed(R.parse_process(
            "in(a, x); out(b, x) | in(c, x); out(d, x)"))


def test_well_formed_rejects_use_before_bind():
    with pytest.raises(R.ProcessError, match="unbound"):
        R.check_well_formed(R.parse_process("in(a, x); out(b, y); 0"))
    with pytest.raises(R.ProcessError, match="unbound"):
        R.check_well_formed(R.parse_process("in(a[j], x); out(b, x); 0"))


def test_well_formed_replication_index_binds():
    R.check_well_formed(R.parse_process(
        "!i<=N { in(c[i], x); out(d[i], x); 0 }"))


# ---------------------------------------------------------------------------
# scheduling


def test_ping_pong():
    tr = run("""
        in(start, ());
        out(ping, 0x01);
        in(pong, r);
        event done(r);
        out(finish, ())
      |
        in(ping, m);
        out(pong, m); 0
    """)
    assert tr.status == "finished"
    assert tr.events == [("done", (b"\x01",))]
    assert [o[0] for o in tr.outs] == ["start", "ping", "pong", "finish"]


def test_replication_unrolls_with_distinct_indices():
    tr = run("""
        in(start, ());
        out(c[2], 0xaa);
        in(d[2], x);
        event got(x);
        out(finish, ())
      |
        !i<=N { in(c[i], m); out(d[i], m); 0 }
    """, repl_bounds={"N": 3})
    assert tr.status == "finished"
    assert tr.events == [("got", (b"\xaa",))]


def test_ambiguous_recipient_is_stuck():
    tr = run("""
        in(start, ()); out(a, ()); 0
      | in(a, ()); out(d, ()); 0
      | in(a, ()); out(d, ()); 0
    """)
    assert tr.status == "stuck"
    assert "more than one matching input" in tr.detail


def test_no_recipient_finishes():
    tr = run("in(start, ()); out(nowhere, 0x01); 0")
    assert tr.status == "finished"
    assert tr.outs[-1] == ("nowhere", (), (b"\x01",))


def test_yield_status():
    tr = run("in(start, ()); yield")
    assert tr.status == "yielded"


def test_assumption_violated():
    tr = run("in(start, ()); assume len(0x01) = 2; out(d, ())")
    assert tr.status == "assumption-violated"
    tr2 = run("in(start, ()); assume len(0x0102) = 2; out(d, ())")
    assert tr2.status == "finished"


def test_plain_let_binds_undefined():
    tr = run("in(start, ()); let y = XOR(0x01, 0x0203) in out(d, 0x00); 0")
    assert tr.status == "finished"
    tr2 = run("in(start, ()); let y = XOR(0x01, 0x0203) in out(d, y); 0")
    assert tr2.status == "stuck"


def test_strong_let_takes_else_on_undefined():
    tr = run("in(start, ()); let! y = XOR(0x01, 0x0203) in out(d, y); 0 "
             "else event fell(0x01); out(d, ()); 0")
    assert tr.status == "finished"
    assert tr.events == [("fell", (b"\x01",))]


def test_strong_if_false_on_undefined():
    tr = run("in(start, _); if! nope = 0x01 then out(bad, ()) "
             "else event ok(0x01); out(d, ())")
    assert tr.events == [("ok", (b"\x01",))]


def test_plain_if_stuck_on_undefined():
    tr = run("in(start, _); if truth(XOR(0x01, 0x0203)) then out(b, ())")
    # truth is total, so the undefined xor just counts as false
    assert tr.status == "yielded"
    tr2 = run("in(start, _); if XOR(0x01, 0x0203) = 0x00 then out(b, ())")
    assert tr2.status == "yielded"  # equality with one undefined side is false
    tr3 = run("in(start, _); if XOR(0x01, 0x0203) = XOR(0x04, 0x0506) then "
              "event both_bottom(0x01); out(b, ()); 0")
    assert tr3.events == [("both_bottom", (b"\x01",))]
    tr4 = run("in(start, _); if val(u,1)(XOR(0x01, 0x0203)) = 1 then out(b, ())")
    assert tr4.status == "yielded"  # integer comparison with a bottom side
    # a bare bitstring condition that is neither 0x01 nor 0x00 is stuck
    tr5 = run("in(start, _); if XOR(0x01, 0x0203) then out(b, ())")
    assert tr5.status == "stuck"
    tr6 = run("in(start, _); if 0xff then out(b, ())")
    assert tr6.status == "stuck"
    tr7 = run("in(start, _); if 0x01 then event t(0x01); out(b, ()); 0")
    assert tr7.events == [("t", (b"\x01",))]


def test_arity_mismatch_is_stuck():
    tr = run("in(start, ()); out(c, (0x01, 0x02)); 0 | in(c, m); out(d, m); 0")
    assert tr.status == "stuck"
    assert "arity" in tr.detail


def test_maxlen_truncates():
    tr = run("in(start, ()); out(c, 0x010203); 0 | in(c, m); event got(m); "
             "out(d, ()); 0", maxlen={"c": 2})
    assert tr.events == [("got", (b"\x01\x02",))]


def test_determinism_and_seed_sensitivity():
    text = ("in(start, ()); new k: fixed_8; out(c, k); 0 "
            "| in(c, m); event got(m); out(d, ()); 0")
    a = run(text, seed=7)
    b = run(text, seed=7)
    c = run(text, seed=8)
    assert a.to_json() == b.to_json()
    assert a.events != c.events
    assert a.rand_bytes == 8 and a.pr == 2.0 ** -64


def test_new_in_input_position_is_stuck():
    tr = run("new k: fixed_4; in(start, ()); out(c, k); 0")
    assert tr.status == "stuck"
    assert "not an input process" in tr.detail


# ---------------------------------------------------------------------------
# machine leaves


def otp_program() -> C.Program:
    return C.parse_cvm((FIXTURES / "otp.cvm").read_text(), "otp")


def otp_system() -> R.Process:
    driver = """
        in(start, ());
        new p: fixed_21;
        out(c, p);
        in(d, x);
        event got(x);
        out(finish, ())
    """
    return R.parse_process(driver + " | cvm otp", progs={"otp": otp_program()})


def test_otp_leaf_end_to_end():
    funcs = make_funcs()
    for seed in range(25):
        tr = R.run_trace(otp_system(), funcs, seed)
        assert tr.status == "finished", tr.detail
        rng = random.Random(seed)
        pad = rng.randbytes(21)
        nonce = rng.randbytes(20)
        expected = bytes(a ^ b for a, b in zip(b"\x01" + nonce, pad))
        assert tr.events == [("got", (expected,))]
        assert tr.rand_bytes == 41


def test_otp_rejects_short_pad():
    funcs = make_funcs()
    driver = """
        in(start, ());
        new p: fixed_5;
        out(c, p);
        in(d, x);
        event got(x);
        out(finish, ())
    """
    sys = R.parse_process(driver + " | cvm otp", progs={"otp": otp_program()})
    tr = R.run_trace(sys, funcs, 3)
    assert tr.status == "assumption-violated"


def test_leaf_test_false_yields():
    prog = C.parse_cvm("""
        Init
        In c m
        ReadEnv m
        Const 0x01
        Apply eq(u,1)/2
        Apply truth/1
        Test
        WriteEnv r
        Out d r
    """, "guard")
    sys_text = ("in(start, ()); out(c, 0x01); in(d, x); event got(x); "
                "out(f, ()) | cvm guard")
    tr = R.run_trace(R.parse_process(sys_text, progs={"guard": prog}),
                     FUNCS, 0)
    # the guard passes but r is unbound at the Out
    assert tr.status == "stuck"
    sys2 = ("in(start, ()); out(c, 0x02); in(d, x); event got(x); "
            "out(f, ()) | cvm guard")
    tr2 = R.run_trace(R.parse_process(sys2, progs={"guard": prog}), FUNCS, 0)
    assert tr2.status == "yielded"


def test_leaf_store_out_of_bounds_is_stuck():
    prog = C.parse_cvm("""
        var buf : 2
        Init
        In c m
        Const 0x010203
        Ref buf
        Store
        WriteEnv r
        Out d r
    """, "oob")
    tr = R.run_trace(R.parse_process("in(start, ()); out(c, 0x00); "
                                     "in(d, x); out(f, x) | cvm oob",
                                     progs={"oob": prog}), FUNCS, 0)
    assert tr.status == "stuck"
    assert "outside allocated memory" in tr.detail


def test_leaf_load_uninitialized_is_stuck():
    prog = C.parse_cvm("""
        var buf : 4
        Init
        In c m
        Ref buf
        Const tau(u,8)(4)
        Load
        WriteEnv r
        Out d r
    """, "uninit")
    tr = R.run_trace(R.parse_process("in(start, ()); out(c, 0x00); "
                                     "in(d, x); out(f, x) | cvm uninit",
                                     progs={"uninit": prog}), FUNCS, 0)
    assert tr.status == "stuck"
    assert "uninitialized" in tr.detail


def test_leaf_events_record():
    prog = C.parse_cvm("""
        Init
        In c m
        ReadEnv m
        Event noted/1
        WriteEnv z
        Out d m
    """, "ev")
    # the event pops its argument; z is bound from an empty stack: stuck
    tr = R.run_trace(R.parse_process("in(start, ()); out(c, 0xbeef); "
                                     "in(d, x); out(f, x) | cvm ev",
                                     progs={"ev": prog}), FUNCS, 0)
    assert tr.status == "stuck"


def test_failed_malloc_returns_null():
    prog = C.parse_cvm("""
        Init
        In c m
        Const tau(u,8)(2000000)
        Malloc
        Const tau(u,8)(0)
        Apply eq(u,8)/2
        Apply truth/1
        Test
        WriteEnv r
        Out d r
    """, "big")
    tr = R.run_trace(R.parse_process("in(start, ()); out(c, 0x00); "
                                     "in(d, x); out(f, x) | cvm big",
                                     progs={"big": prog}), FUNCS, 0)
    # allocation larger than the arena yields the null pointer, the
    # equality holds, and the Out of unbound r gets stuck
    assert tr.status == "stuck"


# ---------------------------------------------------------------------------
# properties and violation probability


def test_check_property_basics():
    ev = [("leak", (b"a",)), ("knows", (b"a",))]
    prop = R.Correspondence("knows", "leak", shared=((0, 0),))
    assert R.check_property(ev, prop) is None
    ev2 = [("leak", (b"a",)), ("knows", (b"b",))]
    assert R.check_property(ev2, prop) == 1
    ev3 = [("knows", (b"a",)), ("leak", (b"a",))]
    assert R.check_property(ev3, prop) == 0
    ev4 = [("compromise", ()), ("knows", (b"b",))]
    prop4 = R.Correspondence("knows", "leak", shared=((0, 0),),
                             exempt="compromise")
    assert R.check_property(ev4, prop4) is None


def test_exact_insec_guessing_game():
    game = """
        in(start, ());
        new s: fixed_1;
        if s = 0x2a then
          event win(s);
          out(d, ()); 0
    """
    prop = R.Correspondence("win", "never")
    sys = R.parse_process(game)
    assert R.exact_insec(sys, FUNCS, prop, max_bytes=1) == 1 / 256
    with pytest.raises(ValueError, match="more than"):
        R.exact_insec(R.parse_process(
            "in(start, ()); new s: fixed_3; out(d, s); 0"),
            FUNCS, prop, max_bytes=1)


def test_exact_insec_two_bytes():
    game = """
        in(start, ());
        new a: fixed_1;
        new b: fixed_1;
        if a = b then
          event win(a);
          out(d, ()); 0
    """
    prop = R.Correspondence("win", "never")
    assert R.exact_insec(R.parse_process(game), FUNCS, prop,
                         max_bytes=2) == 1 / 256


# ---------------------------------------------------------------------------
# the xor protocol and its replay attacker

XOR_CONTEXT = """
    in(c_1, ());
    new p: fixed_2;
    out(c_2, ());
    !i<=N {
      in(c_3[i], ());
      new n: fixed_2;
      out(c_4[i], ());
      (
        in(c_a[i], ());
        out(c_b[i], XOR(n, p)); 0
      |
        in(c_5[i], ());
        event leak(n);
        out(c_6[i], n); 0
      |
        in(c_7[i], x);
        if x = n then
          event knows(x);
          out(c_8, ()); 0
      )
    }
"""

# same protocol but with a fresh pad per session
XOR_PER_SESSION = XOR_CONTEXT.replace(
    "in(c_a[i], ());\n        out(c_b[i], XOR(n, p)); 0",
    "in(c_a[i], ());\n        new ps: fixed_2;\n"
    "        out(c_b[i], XOR(n, ps)); 0")

REPLAY_ATTACKER = """
    in(start, ());
    out(c_1, ());
    in(c_2, ());
    out(c_3[1], ());
    in(c_4[1], ());
    out(c_5[1], ());
    in(c_6[1], n_1);
    out(c_a[1], ());
    in(c_b[1], msg_1);
    let padv = XOR(msg_1, n_1) in
    out(c_3[2], ());
    in(c_4[2], ());
    out(c_a[2], ());
    in(c_b[2], msg_2);
    let n_2 = XOR(msg_2, padv) in
    out(c_7[2], n_2); 0
"""

KNOWS_AFTER_LEAK = R.Correspondence("knows", "leak", shared=((0, 0),))


def _xor_system(ctx: str) -> R.Process:
    sys = R.parse_process(ctx + " | " + REPLAY_ATTACKER)
    R.check_well_formed(sys)
    return sys


def test_replay_attack_trace_shape():
    tr = R.run_trace(_xor_system(XOR_CONTEXT), FUNCS, 0, repl_bounds={"N": 2})
    assert tr.status == "finished"
    labels = [l for l, _ in tr.events]
    assert labels == ["leak", "knows"]
    (leaked,), (known,) = tr.events[0][1], tr.events[1][1]
    # the attacker recovers the second session's nonce, not the leaked one
    rng = random.Random(0)
    p = rng.randbytes(2)
    n1 = rng.randbytes(2)
    n2 = rng.randbytes(2)
    assert leaked == n1 and known == n2
    assert R.violates(tr, KNOWS_AFTER_LEAK)


def test_replay_attack_insec_is_one():
    got = R.estimate_insec(_xor_system(XOR_CONTEXT), FUNCS, KNOWS_AFTER_LEAK,
                           range(200), repl_bounds={"N": 2})
    assert got == 1.0


def test_per_session_pads_resist_replay():
    sys = _xor_system(XOR_PER_SESSION)
    violations = sum(
        R.violates(R.run_trace(sys, FUNCS, seed, repl_bounds={"N": 2}),
                   KNOWS_AFTER_LEAK)
        for seed in range(1000))
    assert violations == 0
