"""Random expression generator shared by property tests."""

import random

from artifact import terms as T

VARS = ["x", "y", "z", "msg", "k_S", "pad'"]
ITYS = [
    T.IntType(False, 1), T.IntType(True, 1), T.IntType(False, 2),
    T.IntType(False, 4), T.IntType(True, 4), T.IntType(False, 8),
]
# symbol -> arity; implementations supplied by make_funcs()
SYMS = {"f": 1, "g": 2, "XOR": 2, "cmp": 2, "h0": 0}

BYTE_POOL = [b"", b"\x00", b"\x01", b"p", b"\x00\x00", b"\xff\x10", b"abc"]


def make_funcs() -> T.FuncTable:
    t = T.base_functions()
    t.define(T.FuncDef("f", 1, lambda a: bytes(reversed(a))))
    t.define(T.FuncDef("g", 2, lambda a, b: a + b if len(a) < 4 else None))
    t.define(T.FuncDef("h0", 0, lambda: b"\x42"))
    return t


def gen_bits(rng: random.Random, depth: int) -> T.SymExpr:
    if depth <= 0:
        return rng.choice([
            T.Var(rng.choice(VARS)),
            T.Lit(rng.choice(BYTE_POOL)),
        ])
    pick = rng.randrange(10)
    if pick == 0:
        return T.Var(rng.choice(VARS))
    if pick == 1:
        return T.Lit(rng.choice(BYTE_POOL))
    if pick == 2:
        return T.Enc(rng.choice(ITYS), gen_int(rng, depth - 1))
    if pick == 3:
        return T.Substr(gen_bits(rng, depth - 1), gen_int(rng, depth - 1),
                        gen_int(rng, depth - 1))
    if pick == 4:
        return T.concat(gen_bits(rng, depth - 1), gen_bits(rng, depth - 1))
    if pick == 5:
        name = rng.choice(list(SYMS))
        return T.Apply(name, tuple(gen_bits(rng, depth - 1)
                                   for _ in range(SYMS[name])))
    if pick == 6:
        return T.BinArith(rng.choice("+-*"), rng.choice(ITYS),
                          gen_bits(rng, depth - 1), gen_bits(rng, depth - 1))
    if pick == 7:
        return T.BinCmp(rng.choice(["==", "!=", "<", ">", "<=", ">="]),
                        rng.choice(ITYS),
                        gen_bits(rng, depth - 1), gen_bits(rng, depth - 1))
    if pick == 8:
        return T.Cast(rng.choice(ITYS), rng.choice(ITYS), gen_bits(rng, depth - 1))
    return gen_ptr(rng, depth - 1)


def gen_ptr(rng: random.Random, depth: int) -> T.SymExpr:
    base: T.SymExpr
    if rng.random() < 0.6:
        base = T.AddrBase(rng.choice(VARS[:3]), rng.randrange(0, 24))
    else:
        alloc: T.SymExpr = T.AllocInit((("x", 4), ("y", 8)))
        if rng.random() < 0.3:
            alloc = T.AllocExt(alloc, gen_int(rng, 0))
        base = T.MallocBase(alloc, gen_int(rng, min(depth, 1)))
    p: T.SymExpr = T.Ptr(base, gen_int(rng, min(depth, 1)))
    if depth > 0 and rng.random() < 0.3:
        return T.PtrArith(rng.choice("+-"), rng.choice(ITYS), p, gen_bits(rng, 0))
    if depth > 0 and rng.random() < 0.1:
        return T.PtrDiff(p, gen_ptr(rng, 0))
    return p


def gen_int(rng: random.Random, depth: int) -> T.SymExpr:
    if depth <= 0:
        return T.IntLit(rng.randrange(-4, 300))
    pick = rng.randrange(4)
    if pick == 0:
        return T.IntLit(rng.randrange(-4, 300))
    if pick == 1:
        return T.IntOp(rng.choice("+-*"), gen_int(rng, depth - 1),
                       gen_int(rng, depth - 1))
    if pick == 2:
        return T.Len(gen_bits(rng, depth - 1))
    return T.Val(rng.choice(ITYS), gen_bits(rng, depth - 1))


def gen_fact(rng: random.Random, depth: int) -> T.SymExpr:
    if depth <= 0:
        return rng.choice([T.TRUE, T.FALSE,
                           T.Defined(T.Var(rng.choice(VARS)))])
    pick = rng.randrange(9)
    if pick == 0:
        return T.conj(gen_fact(rng, depth - 1), gen_fact(rng, depth - 1))
    if pick == 1:
        return T.disj(gen_fact(rng, depth - 1), gen_fact(rng, depth - 1))
    if pick == 2:
        return T.neg(gen_fact(rng, depth - 1))
    if pick == 3:
        return T.IntCmp(rng.choice(["=", "!=", "<", ">", "<=", ">="]),
                        gen_int(rng, depth - 1), gen_int(rng, depth - 1))
    if pick == 4:
        return T.BsEq(gen_bits(rng, depth - 1), gen_bits(rng, depth - 1))
    if pick == 5:
        return T.Defined(gen_any(rng, depth - 1))
    if pick == 6:
        return T.Truth(gen_bits(rng, depth - 1))
    if pick == 7:
        return rng.choice([T.TRUE, T.FALSE])
    return T.BsEq(gen_fact(rng, depth - 1), gen_fact(rng, depth - 1))


def gen_any(rng: random.Random, depth: int) -> T.SymExpr:
    r = rng.random()
    if r < 0.5:
        return gen_bits(rng, depth)
    if r < 0.8:
        return gen_int(rng, depth)
    return gen_fact(rng, depth)


def gen_env(rng: random.Random) -> dict:
    env = {}
    for v in VARS:
        r = rng.random()
        if r < 0.2:
            continue  # unbound
        if r < 0.35:
            env[v] = None
        else:
            env[v] = bytes(rng.randrange(256) for _ in range(rng.randrange(5)))
    return env


def gen_ptrmap(rng: random.Random, e: T.SymExpr) -> dict:
    pm = {}
    for sub in T.subterms(e):
        if isinstance(sub, (T.AddrBase, T.MallocBase)) and sub not in pm:
            pm[sub] = rng.choice([0, 0x1000, 0x2000, 0x10])
    return pm
