"""Random small-program generation for the property harnesses.

Programs are built directly on the AST (branch targets may point one past
the end, which the semantics treats as termination).  Control flow is biased
forward so that a useful fraction of samples terminates within small fuel.
"""

from __future__ import annotations

import random
import zlib

from .lang import (
    Assign, Beqz, BinOp, Call, Cmov, Jmp, Lit, Load, Policy, Program, Reg,
    Ret, Skip, Spbarr, Store, UnOp,
)

REGS = ("r0", "r1", "r2", "r3")
OPS = ("+", "-", "*", "&", "|", "^", "<", "=")


def seeded_draws(seed: int, bits: int = 2):
    """Deterministic per-location secret values (stable across processes)."""
    mask = (1 << bits) - 1

    def on_uninit(loc):
        return zlib.crc32(f"{seed}:{loc}".encode()) & mask

    return on_uninit


def _expr(rng: random.Random, depth: int = 0):
    roll = rng.random()
    if depth >= 2 or roll < 0.45:
        if rng.random() < 0.5:
            return Lit(rng.randint(0, 7))
        return Reg(rng.choice(REGS))
    if roll < 0.6:
        return UnOp(rng.choice(("-", "!")), _expr(rng, depth + 1))
    return BinOp(rng.choice(OPS), _expr(rng, depth + 1), _expr(rng, depth + 1))


def _addr_expr(rng: random.Random):
    # Keep data addresses in a small window so runs collide interestingly.
    base = Lit(rng.randint(0, 11))
    if rng.random() < 0.4:
        return BinOp("+", base, Reg(rng.choice(REGS)))
    return base


def random_program(rng: random.Random, max_len: int = 15,
                   allow_calls: bool = True) -> Program:
    n = rng.randint(3, max_len)
    func_addr = rng.randint(0, n - 1) if allow_calls and rng.random() < 0.5 else None
    code = {}
    for a in range(n):
        roll = rng.random()
        if roll < 0.18:
            code[a] = Assign(rng.choice(REGS), _expr(rng))
        elif roll < 0.36:
            code[a] = Load(rng.choice(REGS), _addr_expr(rng))
        elif roll < 0.54:
            code[a] = Store(rng.choice(REGS), _addr_expr(rng))
        elif roll < 0.72:
            if rng.random() < 0.8:
                target = rng.randint(min(a + 1, n), n)  # forward bias
            else:
                target = rng.randint(0, n)
            code[a] = Beqz(rng.choice(REGS), target)
        elif roll < 0.78:
            code[a] = Cmov(rng.choice(REGS), _expr(rng), _expr(rng))
        elif roll < 0.84:
            code[a] = Skip()
        elif roll < 0.88:
            code[a] = Spbarr()
        elif roll < 0.94 and func_addr is not None:
            code[a] = Call("F")
        elif roll < 0.97:
            code[a] = Ret()
        else:
            code[a] = Jmp(Lit(rng.randint(0, n)))
    functions = {"Main": 0}
    if func_addr is not None:
        functions["F"] = func_addr
    return Program(code=code, functions=functions)


def random_policy(rng: random.Random) -> Policy:
    """Pins most registers so symbolic runs stay within the solver budget."""
    init_regs = {r: rng.randint(0, 3) for r in REGS if rng.random() < 0.75}
    public = [r for r in init_regs if rng.random() < 0.5]
    init_mem = {a: rng.randint(0, 3) for a in range(12) if rng.random() < 0.5}
    return Policy(
        public_registers=frozenset(public),
        public_memory=(((1 << 20) - 64, (1 << 20) + 64),),  # stack region
        init_registers=init_regs,
        init_memory=init_mem,
    )


def sample_programs(seed: int, count: int, max_len: int = 15,
                    allow_calls: bool = True):
    """Deterministic stream of (index, Program, Policy) samples."""
    rng = random.Random(seed)
    for i in range(count):
        yield i, random_program(rng, max_len, allow_calls), random_policy(rng)
