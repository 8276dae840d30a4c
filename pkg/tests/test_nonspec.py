"""Concrete non-speculative semantics, behaviors and the projection."""

import pytest
from hypothesis import given, settings, strategies as st

from muspec.lang import Configuration, Policy, parse_program
from muspec.nonspec import (
    FUEL_EXHAUSTED, MalformedTrace, OCall, OLoad, OPc, ORet, ORollback,
    OSkip, OStart, OStore, STUCK, TERMINATED, ns_behavior, ns_project,
    ns_step, trace_to_json,
)


def _cfg(regs=None, mem=None, pc=0):
    c = Configuration(dict(regs or {}), dict(mem or {}))
    c.registers["pc"] = pc
    return c


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def test_store_emits_address_and_writes():
    p = parse_program("  store x, 3\n")
    step = ns_step(p, _cfg({"x": 5}))
    assert step.obs == OStore(3)
    assert step.config.memory[3] == 5
    assert step.config.pc == 1


def test_beqz_taken_emits_target():
    p = parse_program("  beqz x, 7\n")
    step = ns_step(p, _cfg({"x": 0}))
    assert step.obs == OPc(7)
    assert step.config.pc == 7


def test_beqz_fallthrough_emits_next():
    p = parse_program("  beqz x, 7\n")
    step = ns_step(p, _cfg({"x": 1}))
    assert step.obs == OPc(1)
    assert step.config.pc == 1


def test_ret_pops_stack():
    p = parse_program("  ret\n")
    step = ns_step(p, _cfg({"sp": 96}, {96: 13}))
    assert step.obs == ORet(13)
    assert step.config.pc == 13
    assert step.config.registers["sp"] == 104


def test_call_pushes_return_address():
    p = parse_program("F:\n  skip\nMain:\n  call F\n  skip\n")
    cfg = _cfg({"sp": 200}, pc=1)
    step = ns_step(p, cfg)
    assert step.obs == OCall("F")
    assert step.config.pc == 0
    assert step.config.registers["sp"] == 192
    assert step.config.memory[192] == 2


def test_cmov_assigns_when_condition_nonzero():
    p = parse_program("  cmov x, 9, y\n")
    taken = ns_step(p, _cfg({"x": 0, "y": 1}))
    kept = ns_step(p, _cfg({"x": 0, "y": 0}))
    assert taken.obs is None and kept.obs is None
    assert taken.config.registers["x"] == 9
    assert kept.config.registers["x"] == 0


def test_terminates_off_the_end():
    p = parse_program("  skip\n")
    assert ns_step(p, _cfg(pc=1)).status == TERMINATED


def test_step_is_deterministic():
    p = parse_program("  jmp x + 1\n")
    a = ns_step(p, _cfg({"x": 4}))
    b = ns_step(p, _cfg({"x": 4}))
    assert a.obs == b.obs and a.config == b.config


# ---------------------------------------------------------------------------
# Behaviors
# ---------------------------------------------------------------------------

def test_behavior_single_skip():
    p = parse_program("  skip\n")
    trace, status = ns_behavior(p, _cfg(), fuel=10)
    assert trace == [] and status == TERMINATED


def test_behavior_zero_fuel():
    p = parse_program("  skip\n")
    trace, status = ns_behavior(p, _cfg(), fuel=0)
    assert trace == [] and status == FUEL_EXHAUSTED


def test_behavior_draws_secrets_for_uninit_reads():
    p = parse_program("  load x, 5\n  store x, 6\n")
    draws = {}
    trace, status = ns_behavior(p, _cfg(), fuel=10,
                                on_uninit=lambda loc: draws.setdefault(loc, 3))
    assert status == TERMINATED
    assert trace == [OLoad(5), OStore(6)]
    assert draws == {("mem", 5): 3}


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def test_project_empty():
    assert ns_project([]) == []


def test_project_removes_enclosed_segment():
    t = [OStore(3), OStart("B", 0), OLoad(5), ORollback("B", 0), OPc(9)]
    assert ns_project(t) == [OStore(3), OPc(9)]


def test_project_fully_speculative():
    t = [OStart("S", 1), OStart("B", 2), OPc(5), ORollback("B", 2), ORollback("S", 1)]
    assert ns_project(t) == []


def test_project_nested_and_sequential():
    t = [
        OStart("S", 0), OSkip(1),
        OStart("B", 1), OLoad(4), ORollback("B", 1), OPc(7),
        ORollback("S", 0), OStore(2),
        OStart("R", 2), ORet(3), ORollback("R", 2), ORet(9),
    ]
    assert ns_project(t) == [OStore(2), ORet(9)]


def test_project_idempotent():
    t = [OStore(1), OStart("B", 0), OLoad(2), ORollback("B", 0), OPc(3)]
    assert ns_project(ns_project(t)) == ns_project(t)


def test_project_malformed_rollback():
    with pytest.raises(MalformedTrace):
        ns_project([ORollback("B", 0)])


def test_project_drops_dangling_start_keeps_contents():
    # Committed oracle transactions leave an unmatched start marker behind.
    t = [OStart("B", 0), OPc(4), OLoad(2)]
    assert ns_project(t) == [OPc(4), OLoad(2)]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def test_trace_json_shapes():
    t = [OLoad(5), OStart("B", 0), OSkip(1), ORet(9)]
    assert trace_to_json(t) == [
        {"t": "load", "addr": 5},
        {"t": "start", "src": "B", "id": 0},
        {"t": "skip", "pc": 1},
        {"t": "ret", "addr": 9},
    ]
