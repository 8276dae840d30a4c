"""Trace model, concrete non-speculative semantics and the projection.

Observations are the events a microarchitectural attacker sees: accessed
memory addresses, control-flow targets, and speculation markers.  A trace is
a sequence of observations; the non-speculative projection deletes every
balanced start..rollback segment, recovering what a non-speculating machine
would have leaked.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Union

from .lang import (
    Assign, Beqz, Call, Cmov, Configuration, Jmp, Load, Program, Ret, Skip,
    Spbarr, Store, PC, SP, UninitRead, _wrap, eval_in,
)

SOURCE_TAGS = ("B", "S", "R")


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------
# Payload fields hold ints in concrete mode and expression trees in symbolic
# mode; `start`/`rollback`/`skip` payloads are always concrete.

@dataclass(frozen=True)
class OLoad:
    addr: object


@dataclass(frozen=True)
class OStore:
    addr: object


@dataclass(frozen=True)
class OPc:
    target: object


@dataclass(frozen=True)
class OCall:
    func: str


@dataclass(frozen=True)
class ORet:
    addr: object


@dataclass(frozen=True)
class OStart:
    src: str
    id: int


@dataclass(frozen=True)
class ORollback:
    src: str
    id: int


@dataclass(frozen=True)
class OSkip:
    pc: int


@dataclass(frozen=True)
class OPathCond:
    constraint: object  # symbolic boolean expression


Observation = Union[OLoad, OStore, OPc, OCall, ORet, OStart, ORollback, OSkip, OPathCond]
Trace = list  # list[Observation]

MARKER_KINDS = (OStart, ORollback, OSkip)


class MalformedTrace(Exception):
    pass


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _payload_json(v: object) -> object:
    if isinstance(v, int):
        return v
    from .symbolic import format_sym  # local import to avoid a cycle
    return format_sym(v)


def observation_to_json(obs: Observation) -> dict:
    if isinstance(obs, OLoad):
        return {"t": "load", "addr": _payload_json(obs.addr)}
    if isinstance(obs, OStore):
        return {"t": "store", "addr": _payload_json(obs.addr)}
    if isinstance(obs, OPc):
        return {"t": "pc", "target": _payload_json(obs.target)}
    if isinstance(obs, OCall):
        return {"t": "call", "f": obs.func}
    if isinstance(obs, ORet):
        return {"t": "ret", "addr": _payload_json(obs.addr)}
    if isinstance(obs, OStart):
        return {"t": "start", "src": obs.src, "id": obs.id}
    if isinstance(obs, ORollback):
        return {"t": "rollback", "src": obs.src, "id": obs.id}
    if isinstance(obs, OSkip):
        return {"t": "skip", "pc": obs.pc}
    if isinstance(obs, OPathCond):
        return {"t": "pathcond", "expr": _payload_json(obs.constraint)}
    raise TypeError(f"not an observation: {obs!r}")


def trace_to_json(trace: Trace) -> list[dict]:
    return [observation_to_json(o) for o in trace]


def trace_to_str(trace: Trace) -> str:
    return json.dumps(trace_to_json(trace), separators=(",", ":"))


# ---------------------------------------------------------------------------
# Concrete non-speculative small-step semantics
# ---------------------------------------------------------------------------

OK = "ok"
TERMINATED = "terminated"
STUCK = "stuck"
FUEL_EXHAUSTED = "fuel-exhausted"


@dataclass
class Step:
    status: str
    config: Configuration | None = None
    obs: Observation | None = None
    cause: str | None = None


def _advance(cfg: Configuration, target: int | None = None) -> Configuration:
    out = cfg.copy()
    out.registers[PC] = _wrap(cfg.pc + 1, cfg.width) if target is None else target
    return out


def ns_step(p: Program, cfg: Configuration) -> Step:
    """One step of the non-speculative semantics.

    Returns a terminated step when pc maps to no instruction, and a stuck
    step (with a cause) when a rule precondition fails.  UninitRead escapes
    to the caller, which materializes the value and retries.
    """
    instr = p.instruction(cfg.pc)
    if instr is None:
        return Step(TERMINATED)
    width = cfg.width

    if isinstance(instr, Skip) or isinstance(instr, Spbarr):
        return Step(OK, _advance(cfg))
    if isinstance(instr, Assign):
        v = eval_in(cfg, instr.expr)
        out = _advance(cfg)
        out.registers[instr.reg] = v
        return Step(OK, out)
    if isinstance(instr, Cmov):
        out = _advance(cfg)
        if eval_in(cfg, instr.cond) != 0:
            out.registers[instr.reg] = eval_in(cfg, instr.expr)
        return Step(OK, out)
    if isinstance(instr, Load):
        addr = eval_in(cfg, instr.addr)
        v = cfg.read_mem(addr)
        out = _advance(cfg)
        out.registers[instr.reg] = v
        return Step(OK, out, OLoad(addr))
    if isinstance(instr, Store):
        addr = eval_in(cfg, instr.addr)
        v = cfg.read_reg(instr.reg)
        out = _advance(cfg)
        out.memory[addr] = v
        return Step(OK, out, OStore(addr))
    if isinstance(instr, Jmp):
        target = eval_in(cfg, instr.target)
        return Step(OK, _advance(cfg, target), OPc(target))
    if isinstance(instr, Beqz):
        v = cfg.read_reg(instr.reg)
        target = instr.target if v == 0 else _wrap(cfg.pc + 1, width)
        return Step(OK, _advance(cfg, target), OPc(target))
    if isinstance(instr, Call):
        entry = p.functions.get(instr.func)
        if entry is None:
            return Step(STUCK, cause=f"call to unknown function {instr.func!r}")
        sp = _wrap(cfg.read_reg(SP) - 8, width)
        out = cfg.copy()
        out.registers[SP] = sp
        out.memory[sp] = _wrap(cfg.pc + 1, width)
        out.registers[PC] = entry
        return Step(OK, out, OCall(instr.func))
    if isinstance(instr, Ret):
        sp = cfg.read_reg(SP)
        target = cfg.read_mem(sp)
        out = cfg.copy()
        out.registers[PC] = target
        out.registers[SP] = _wrap(sp + 8, width)
        return Step(OK, out, ORet(target))
    return Step(STUCK, cause=f"no rule for {instr!r}")


def materialize(cfg: Configuration, exc: UninitRead, value: int) -> None:
    """Record a drawn initial value in the run-shared init store."""
    cfg.init.put(exc.location, value)


OnUninit = "Callable[[Location], int]"


def run_step(p: Program, cfg: Configuration, on_uninit) -> Step:
    """ns_step plus lazy materialization of secret initial values."""
    while True:
        try:
            return ns_step(p, cfg)
        except UninitRead as exc:
            materialize(cfg, exc, on_uninit(exc.location))


def zero_uninit(_loc) -> int:
    return 0


def ns_behavior(
    p: Program,
    cfg0: Configuration,
    fuel: int,
    on_uninit=zero_uninit,
) -> tuple[Trace, str]:
    """Reflexive-transitive closure of ns_step from cfg0, bounded by fuel."""
    trace: Trace = []
    cfg = cfg0
    while True:
        if fuel <= 0:
            return trace, FUEL_EXHAUSTED
        step = run_step(p, cfg, on_uninit)
        if step.status == TERMINATED:
            return trace, TERMINATED
        if step.status == STUCK:
            return trace, STUCK
        fuel -= 1
        if step.obs is not None:
            trace.append(step.obs)
        cfg = step.config


# ---------------------------------------------------------------------------
# Non-speculative projection
# ---------------------------------------------------------------------------

def ns_project(trace: Trace) -> Trace:
    """Delete every balanced start(x,i)..rollback(x,i) segment, innermost out.

    A rollback with no matching open start is malformed.  Unmatched start
    markers (transactions the oracle semantics committed) are dropped while
    their contents are kept; the result carries no speculation markers and no
    path-condition entries.
    """
    result: list = []
    open_stack: list[tuple[str, int, int]] = []  # (src, id, position in result)
    for obs in trace:
        if isinstance(obs, OStart):
            open_stack.append((obs.src, obs.id, len(result)))
            result.append(obs)
        elif isinstance(obs, ORollback):
            while open_stack:
                src, tid, pos = open_stack.pop()
                if (src, tid) == (obs.src, obs.id):
                    del result[pos:]
                    break
            else:
                raise MalformedTrace(f"rollback without start: {obs}")
        elif isinstance(obs, (OSkip, OPathCond)):
            continue
        else:
            result.append(obs)
    # Committed transactions: strip the dangling marker, keep the contents.
    return [o for o in result if not isinstance(o, OStart)]
