"""Composition framework: delegation, projections, well-formedness."""

import pytest

from muspec.corpus import load_corpus
from muspec.lang import Configuration, Policy, parse_program
from muspec.nonspec import (
    OCall, OLoad, OPc, ORet, ORollback, OSkip, OStart, OStore, TERMINATED,
    ns_behavior, ns_project,
)
from muspec.compose import (
    CANONICAL_ORDER, CombinedDescriptor, canonical_z, check_confluence,
    check_projection_preservation, combined_run, parse_selector,
    project_instance, project_trace, renumber_transactions, run_selector,
    Zparam, embed_instance,
)
from muspec.specsem import (
    Frame, SPEC_RELEVANT, SpecParams, SpecState, select_delegate,
)

from trace_utils import assert_skeleton

CASES = {c.name: c for c in load_corpus()}


def scripted(extra=None):
    table = {("reg", "secret"): 3, ("mem", 16): 2}
    table.update(extra or {})
    return lambda loc: table.get(loc, 0)


def run_case(name, sem, draws=None, window=16, fuel=6000):
    case = CASES[name]
    cfg = Configuration.initial(case.program, case.policy)
    return run_selector(sem, case.program, cfg, window=window, fuel=fuel,
                        on_uninit=scripted(draws)), case


# ---------------------------------------------------------------------------
# Z tables and delegation
# ---------------------------------------------------------------------------

def test_canonical_z_pairs():
    z = canonical_z(("B", "S"))
    assert z == {"B": frozenset({"store"}), "S": frozenset({"beqz"})}
    z = canonical_z(("S", "R"))
    assert z == {"S": frozenset({"call", "ret"}), "R": frozenset({"store"})}


def test_canonical_z_triple():
    z = canonical_z(("B", "S", "R"))
    assert z == {
        "B": frozenset({"call", "ret", "store"}),
        "S": frozenset({"call", "ret", "beqz"}),
        "R": frozenset({"beqz", "store"}),
    }


def test_selector_grammar():
    assert parse_selector("b+s+r").order == ("B", "S", "R")
    assert parse_selector("s+r").order == ("S", "R")
    assert parse_selector("b").order == ("B",)
    with pytest.raises(ValueError):
        parse_selector("b+b")
    with pytest.raises(ValueError):
        parse_selector("x")


def test_delegation_totality_every_class_has_one_owner():
    # Under canonical Z tables every instruction class has exactly one
    # eligible owning delegate, and neutral classes fall to the first source.
    classes = ["skip", "assign", "load", "store", "jmp", "beqz", "cmov",
               "spbarr", "call", "ret"]
    for sel in ("b+s", "s+r", "b+r", "b+s+r"):
        desc = parse_selector(sel)
        z = desc.z.as_map()
        for cls in classes:
            owners = [s for s in desc.order
                      if cls in SPEC_RELEVANT[s] and cls not in z[s]]
            assert len(owners) <= 1
            chosen = select_delegate(desc.order, z, cls)
            assert chosen is not None
            if owners:
                assert chosen == owners[0]


def test_ret_under_sr_delegates_to_r():
    desc = parse_selector("s+r")
    assert select_delegate(desc.order, desc.z.as_map(), "ret") == "R"
    assert select_delegate(desc.order, desc.z.as_map(), "store") == "S"


# ---------------------------------------------------------------------------
# Instance projection
# ---------------------------------------------------------------------------

def test_project_instance_drops_rsb():
    cfg = Configuration()
    f = Frame(3, cfg, 5, (9, 4), "R")
    proj = project_instance(f, "S")
    assert proj.rsb is None
    assert (proj.ctr, proj.window) == (3, 5)


def test_project_instance_same_shape_is_identity():
    cfg = Configuration()
    f = Frame(3, cfg, 5, (9, 4), "R")
    assert project_instance(f, "R") == f


def test_project_then_embed_round_trips():
    cfg = Configuration()
    f = Frame(3, cfg, 5, (9, 4), "R")
    assert embed_instance(project_instance(f, "S"), f.rsb) == f


# ---------------------------------------------------------------------------
# Trace projection
# ---------------------------------------------------------------------------

def test_project_trace_removes_other_sources():
    t = [OStart("S", 1), OSkip(1), ORollback("S", 1), OPc(9)]
    assert project_trace(t, "B") == [OPc(9)]


def test_project_trace_keeps_kept_source():
    t = [OStart("B", 0), OPc(4), ORollback("B", 0)]
    assert project_trace(t, "B") == t


def test_project_combined_bs_to_b_equals_solo_b():
    (combined, _), case = run_case("comb_bs", "b+s")
    cfg = Configuration.initial(case.program, case.policy)
    solo, _ = run_selector("b", case.program, cfg, on_uninit=scripted())
    assert renumber_transactions(project_trace(combined, "B")) == \
        renumber_transactions(solo)


def test_project_combined_sr_to_s_equals_solo_s():
    (combined, _), case = run_case("comb_sr", "s+r")
    cfg = Configuration.initial(case.program, case.policy)
    solo, _ = run_selector("s", case.program, cfg, on_uninit=scripted())
    assert renumber_transactions(project_trace(combined, "S")) == \
        renumber_transactions(solo)


# ---------------------------------------------------------------------------
# Combined runs: the four displayed leak traces
# ---------------------------------------------------------------------------

def test_combined_bs_displayed_trace():
    # ... start_S . skip . ... start_B . pc . load p . load A+secret
    #     . rollback_B . rollback_S ...
    (trace, status), _ = run_case("comb_bs", "b+s")
    assert status == TERMINATED
    assert_skeleton(trace, [
        ("start", "S", "i"), ("skip", None),
        ("start", "B", "j"), ("pc", 4), ("load", 16), ("load", 66),
        ("rollback", "B", "j"), ("rollback", "S", "i"),
    ])
    # The stale-secret load differs per initial memory, the public one is 65.
    assert OLoad(66) in trace and OLoad(67) in trace and OLoad(65) in trace


def test_combined_sr_displayed_trace():
    # call Speculate ... start_R ... start_S ... rollback_S ... start_S .
    # skip . load p . load secret ...
    (trace, status), _ = run_case("comb_sr", "s+r")
    assert status == TERMINATED
    assert_skeleton(trace, [
        ("call", "Speculate"), ("start", "R", "r"),
        ("start", "S", "i"), ("rollback", "S", "i"),
        ("start", "S", "j"), ("skip", 4), ("load", 16), ("load", 3),
        ("rollback", "S", "j"),
    ])


def test_combined_br_displayed_trace():
    # call Speculate ... start_R ... start_B . pc . load secret .
    # rollback_B ... rollback_R
    (trace, status), _ = run_case("comb_br", "b+r")
    assert status == TERMINATED
    assert_skeleton(trace, [
        ("call", "Speculate"), ("start", "R", "r"),
        ("start", "B", "b"), ("pc", 5), ("load", 3),
        ("rollback", "B", "b"), ("rollback", "R", "r"),
    ])


def test_combined_bsr_displayed_trace():
    # ... start_S . skip . call Speculate ... start_R . ret . start_B . pc .
    # load p . load secret . rollback_B . rollback_R . rollback_S ...
    (trace, status), _ = run_case("comb_bsr", "b+s+r")
    assert status == TERMINATED
    assert_skeleton(trace, [
        ("start", "S", "s"), ("skip", 9), ("call", "Speculate"),
        ("start", "R", "r"), ("ret", 3), ("start", "B", "b"), ("pc", 5),
        ("load", 16), ("load", 3),
        ("rollback", "B", "b"), ("rollback", "R", "r"), ("rollback", "S", "s"),
    ])


def test_combined_ns_consistency_on_cases():
    for name in ("comb_bs", "comb_br", "comb_sr", "comb_bsr"):
        case = CASES[name]
        for sel in ("b", "s", "r", "b+s", "s+r", "b+r", "b+s+r"):
            cfg = Configuration.initial(case.program, case.policy)
            trace, status = run_selector(sel, case.program, cfg,
                                         on_uninit=scripted())
            assert status == TERMINATED, (name, sel)
            ns_trace, _ = ns_behavior(
                case.program, Configuration.initial(case.program, case.policy),
                5000, on_uninit=scripted())
            assert ns_project(trace) == ns_trace, (name, sel)


# ---------------------------------------------------------------------------
# Well-formedness harnesses
# ---------------------------------------------------------------------------

def test_confluence_on_comb_programs():
    for name in ("comb_bs", "comb_br", "comb_sr", "comb_bsr"):
        case = CASES[name]
        for sel in ("b+s", "s+r", "b+r", "b+s+r"):
            desc = parse_selector(sel)
            cfg = Configuration.initial(case.program, case.policy)
            report = check_confluence(desc, case.program, cfg,
                                      on_uninit=scripted())
            assert report.ok, (name, sel, report.divergences)
            assert report.multi_delegate_states > 0


def test_broken_z_reports_divergence():
    # Empty exclusion sets let the S source execute beqz as a plain step,
    # racing the B source's speculation rule.
    desc = CombinedDescriptor.of("B", "S", z={"B": frozenset(), "S": frozenset()})
    case = CASES["comb_bs"]
    cfg = Configuration.initial(case.program, case.policy)
    report = check_confluence(desc, case.program, cfg, on_uninit=scripted())
    assert not report.ok
    assert report.divergences[0].pc == 1  # already at the first store
    assert any(d.pc == 3 for d in report.divergences)  # and at the branch


def test_straight_line_program_trivially_confluent():
    p = parse_program("Main:\n  x <- 1\n  y <- x + 2\n")
    desc = parse_selector("b+s")
    report = check_confluence(desc, p, Configuration.initial(p))
    assert report.ok and report.divergences == []


def test_projection_preservation_on_comb_programs():
    corpus = []
    for name in ("comb_bs", "comb_br", "comb_sr", "comb_bsr"):
        case = CASES[name]
        corpus.append((name, case.program,
                       lambda c=case: Configuration.initial(c.program, c.policy)))
    for sel in ("b+s", "s+r", "b+r", "b+s+r"):
        desc = parse_selector(sel)
        report = check_projection_preservation(
            desc, corpus,
            on_uninit_factory=lambda name, loc, draws: scripted()(loc))
        assert report.ok, (sel, report.failures)
        assert report.checked > 0


def test_program_without_sources_projects_to_ns():
    p = parse_program("Main:\n  store x, 5\n  load y, 5\n")
    cfg = Configuration.initial(p, Policy(init_registers={"x": 1, "y": 0}))
    trace, _ = run_selector("b", p, cfg)
    ns_trace, _ = ns_behavior(
        p, Configuration.initial(p, Policy(init_registers={"x": 1, "y": 0})), 100)
    for keep in ("B", "S", "R"):
        assert project_trace(trace, keep) == ns_trace


# ---------------------------------------------------------------------------
# Triple composition vs nested pairing (test-only reference)
# ---------------------------------------------------------------------------

def _nested_pair_run(case, window=16, fuel=6000):
    """(B+S)+R built by treating B+S as one side of an outer pair.

    Delegation-wise this is the same table as the direct triple; it is kept
    as an independent construction to cross-check trace equality.
    """
    from muspec.specsem import ConcreteExec, _spec_run, SpecParams

    outer_order = ("B", "S", "R")
    z = {
        "B": frozenset({"store"}) | SPEC_RELEVANT["R"],
        "S": frozenset({"beqz"}) | SPEC_RELEVANT["R"],
        "R": SPEC_RELEVANT["B"] | SPEC_RELEVANT["S"],
    }
    cfg = Configuration.initial(case.program, case.policy)
    mode = ConcreteExec(scripted())
    [(trace, status)] = _spec_run(case.program, cfg, outer_order, z,
                                  SpecParams(window=window), fuel, mode)
    return trace, status


def test_triple_equals_nested_pairing():
    for name in ("comb_bs", "comb_sr", "comb_bsr"):
        case = CASES[name]
        cfg = Configuration.initial(case.program, case.policy)
        direct, s1 = run_selector("b+s+r", case.program, cfg,
                                  on_uninit=scripted())
        nested, s2 = _nested_pair_run(case)
        assert (direct, s1) == (nested, s2)
