"""Speculative non-interference checking.

A program satisfies SNI for a speculative semantics iff every pair of
low-equivalent initial configurations that produces equal non-speculative
projections also produces equal full traces.  Two checkers implement the
definition:

  concrete  exhaustive enumeration of initial secrets over a small domain,
            with secret locations discovered lazily (a read of a location
            holding no value yet forks the enumeration over the domain)
  symbolic  self-composition of two symbolic runs with shared public
            symbols, discharged by a pluggable solver (the default solver
            enumerates the same finite domain exhaustively and never answers
            unknown)

Both return a Verdict; insecure verdicts carry a witness that can be
independently re-checked by replay.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .lang import Configuration, Location, Policy, Program, low_equivalent
from .nonspec import (
    FUEL_EXHAUSTED, MalformedTrace, OCall, OLoad, OPathCond, OPc, ORet,
    ORollback, OSkip, OStart, OStore, Trace, ns_project, trace_to_json,
)
from .specsem import FixedOracle, NeverMispredict, Oracle, SpecParams, oracle_run
from .compose import CombinedDescriptor, parse_selector, run_selector, run_selector_symbolic
from . import symbolic as sym
from .symbolic import SymConfiguration, eq_constraint, neq_constraint

SECURE = "secure"
INSECURE = "insecure"
INCONCLUSIVE = "inconclusive"

DEFAULT_LOC_CAP = 10
DEFAULT_RUN_CAP = 40_000
DEFAULT_PAIR_CAP = 4_000_000


@dataclass
class Stats:
    runs: int = 0
    pairs: int = 0
    queries: int = 0
    fuel: int = 0


@dataclass
class Witness:
    """A violating pair: initial draws, both traces, first differing index."""
    draws1: dict[Location, int]
    draws2: dict[Location, int]
    trace1: Trace
    trace2: Trace
    diff_index: int

    def to_json(self) -> dict:
        def d(draws):
            return [[kind, key, value] for (kind, key), value in draws.items()]
        return {
            "draws1": d(self.draws1),
            "draws2": d(self.draws2),
            "trace1": trace_to_json(self.trace1),
            "trace2": trace_to_json(self.trace2),
            "diff_index": self.diff_index,
        }

    @staticmethod
    def from_json(data: dict) -> "Witness":
        from .nonspec import observation_to_json  # round-trip helper below

        def undraw(entries):
            return {(kind, key): value for kind, key, value in entries}

        return Witness(
            undraw(data["draws1"]), undraw(data["draws2"]),
            trace_from_json(data["trace1"]), trace_from_json(data["trace2"]),
            data["diff_index"],
        )


def trace_from_json(entries: list[dict]) -> Trace:
    out: Trace = []
    for e in entries:
        t = e["t"]
        if t == "load":
            out.append(OLoad(e["addr"]))
        elif t == "store":
            out.append(OStore(e["addr"]))
        elif t == "pc":
            out.append(OPc(e["target"]))
        elif t == "call":
            out.append(OCall(e["f"]))
        elif t == "ret":
            out.append(ORet(e["addr"]))
        elif t == "start":
            out.append(OStart(e["src"], e["id"]))
        elif t == "rollback":
            out.append(ORollback(e["src"], e["id"]))
        elif t == "skip":
            out.append(OSkip(e["pc"]))
        else:
            raise ValueError(f"unknown observation kind {t!r}")
    return out


@dataclass
class Verdict:
    status: str
    witness: Witness | None = None
    stats: Stats = field(default_factory=Stats)
    diagnosis: str | None = None

    def to_json(self) -> dict:
        out = {
            "verdict": self.status,
            "stats": {"runs": self.stats.runs, "pairs": self.stats.pairs,
                      "queries": self.stats.queries},
        }
        if self.witness is not None:
            out["witness"] = self.witness.to_json()
        if self.diagnosis is not None:
            out["diagnosis"] = self.diagnosis
        return out


# ---------------------------------------------------------------------------
# Lazy-footprint run enumeration (concrete mode)
# ---------------------------------------------------------------------------

class FootprintOverflow(Exception):
    def __init__(self, cap):
        super().__init__(f"secret footprint exceeds the cap of {cap} locations")


class _NeedDraw(Exception):
    def __init__(self, loc: Location):
        self.loc = loc


@dataclass
class RunRecord:
    draws: tuple[tuple[Location, int], ...]
    trace: tuple
    status: str

    def draw_map(self) -> dict[Location, int]:
        return dict(self.draws)


def enumerate_runs(
    run_once: Callable,
    domain: range,
    loc_cap: int = DEFAULT_LOC_CAP,
    run_cap: int = DEFAULT_RUN_CAP,
) -> list[RunRecord]:
    """All runs of `run_once` over every assignment of lazily-read secrets.

    `run_once(on_uninit)` executes from a fresh initial configuration; each
    uninitialized read is a fork point enumerated over `domain`.  Runs come
    out in lexicographic order of their draw sequences.
    """
    runs: list[RunRecord] = []
    stack: list[tuple[tuple[Location, int], ...]] = [()]
    while stack:
        prefix = stack.pop()
        script = dict(prefix)

        def on_uninit(loc):
            if loc in script:
                return script[loc]
            raise _NeedDraw(loc)

        try:
            trace, status = run_once(on_uninit)
        except _NeedDraw as nd:
            if len(prefix) >= loc_cap:
                raise FootprintOverflow(loc_cap)
            for v in reversed(domain):
                stack.append(prefix + ((nd.loc, v),))
            continue
        runs.append(RunRecord(prefix, tuple(trace), status))
        if len(runs) > run_cap:
            raise FootprintOverflow(run_cap)
    return runs


def _compatible(policy: Policy, r1: RunRecord, r2: RunRecord) -> bool:
    """Two runs can come from one low-equivalent pair of initial states.

    Public locations must carry equal draws wherever both runs read them;
    secret locations may differ freely, and a location only one run read is
    unconstrained on the other side.
    """
    d2 = r2.draw_map()
    for loc, v in r1.draws:
        if policy.is_public(loc) and loc in d2 and d2[loc] != v:
            return False
    return True


def make_run_once(
    sem: str | CombinedDescriptor,
    program: Program,
    policy: Policy,
    width: int,
    window: int,
    rsb_size: int,
    fuel: int,
):
    desc = parse_selector(sem) if isinstance(sem, str) else sem

    def run_once(on_uninit):
        cfg = Configuration.initial(program, policy, width)
        return run_selector(desc, program, cfg, window, fuel, rsb_size, on_uninit)

    return run_once


def check_sni_concrete(
    program: Program,
    policy: Policy,
    sem: str | CombinedDescriptor = "b",
    domain_bits: int = 2,
    fuel: int = 10_000,
    width: int = 64,
    window: int = 16,
    rsb_size: int = 16,
    loc_cap: int = DEFAULT_LOC_CAP,
    run_cap: int = DEFAULT_RUN_CAP,
    run_once: Callable | None = None,
) -> Verdict:
    """Exhaustive SNI check by enumerating pairs of initial configurations.

    Pairs whose non-speculative projections differ are skipped, exactly per
    the SNI precondition.  The first violating pair (lexicographic over
    secret assignments) becomes the witness.
    """
    domain = range(1 << domain_bits)
    if run_once is None:
        run_once = make_run_once(sem, program, policy, width, window, rsb_size, fuel)
    stats = Stats()
    try:
        runs = enumerate_runs(run_once, domain, loc_cap, run_cap)
    except FootprintOverflow as exc:
        return Verdict(INCONCLUSIVE, stats=stats, diagnosis=str(exc))
    except sym.SplitTooWide as exc:
        return Verdict(INCONCLUSIVE, stats=stats, diagnosis=str(exc))
    stats.runs = len(runs)
    if any(r.status == FUEL_EXHAUSTED for r in runs):
        return Verdict(INCONCLUSIVE, stats=stats,
                       diagnosis="fuel exhausted before termination")

    groups: dict[tuple, list[int]] = {}
    projections = []
    for idx, r in enumerate(runs):
        proj = tuple(ns_project(list(r.trace)))
        projections.append(proj)
        groups.setdefault(proj, []).append(idx)

    for proj in groups.values():
        for b_pos, j in enumerate(proj):
            for i in proj[:b_pos]:
                stats.pairs += 1
                if stats.pairs > DEFAULT_PAIR_CAP:
                    return Verdict(INCONCLUSIVE, stats=stats,
                                   diagnosis="pair budget exceeded")
                r1, r2 = runs[i], runs[j]
                if not _compatible(policy, r1, r2):
                    continue
                if r1.trace != r2.trace:
                    diff = next(
                        k for k, (a, b) in enumerate(
                            itertools.zip_longest(r1.trace, r2.trace))
                        if a != b)
                    witness = Witness(r1.draw_map(), r2.draw_map(),
                                      list(r1.trace), list(r2.trace), diff)
                    return Verdict(INSECURE, witness=witness, stats=stats)
    return Verdict(SECURE, stats=stats)


# ---------------------------------------------------------------------------
# Solver interface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverQuery:
    """Find an assignment satisfying every constraint and at least one goal.

    `goals` of True means the traces differ structurally, so any assignment
    satisfying the constraints is a violation.
    """
    constraints: tuple
    goals: tuple | bool


@dataclass
class SolverResult:
    status: str  # "sat" | "unsat" | "unknown"
    model: dict[str, int] | None = None


class ExhaustiveSolver:
    """Enumerates a finite domain; total (never answers unknown)."""

    def __init__(self, domain_bits: int = 2, width: int = 64,
                 max_vars: int = sym.MAX_SPLIT_VARS):
        self.domain = range(1 << domain_bits)
        self.width = width
        self.max_vars = max_vars

    def solve(self, query: SolverQuery) -> SolverResult:
        names: set[str] = set()
        for c in query.constraints:
            names |= sym.sym_vars(c)
        if query.goals is not True:
            for g in query.goals:
                names |= sym.sym_vars(g)
        if len(names) > self.max_vars:
            return SolverResult(
                "unknown",
                model={"_diagnosis": f"{len(names)} symbols exceed solver limit"})
        for alpha in sym.assignments(names, self.domain):
            if not all(sym.constraint_holds(c, alpha, self.width)
                       for c in query.constraints):
                continue
            if query.goals is True or any(
                    sym.constraint_holds(g, alpha, self.width) for g in query.goals):
                return SolverResult("sat", model=alpha)
        return SolverResult("unsat")


# ---------------------------------------------------------------------------
# Symbolic checker (self-composition)
# ---------------------------------------------------------------------------

def _split_pathconds(trace: Trace) -> tuple[list, tuple]:
    obs = [o for o in trace if not isinstance(o, OPathCond)]
    conds = tuple(o.constraint for o in trace if isinstance(o, OPathCond))
    return obs, conds


def _payload_pairs(a, b):
    """Payload expressions of two same-kind observations, or None."""
    if isinstance(a, (OLoad, OStore)) and type(a) is type(b):
        return a.addr, b.addr
    if isinstance(a, OPc) and isinstance(b, OPc):
        return a.target, b.target
    if isinstance(a, ORet) and isinstance(b, ORet):
        return a.addr, b.addr
    return None


def _structurally_same(a, b) -> bool:
    return type(a) is type(b)


def check_sni_symbolic(
    program: Program,
    policy: Policy,
    sem: str | CombinedDescriptor = "b",
    solver: ExhaustiveSolver | None = None,
    domain_bits: int = 2,
    fuel: int = 10_000,
    width: int = 64,
    window: int = 16,
    rsb_size: int = 16,
) -> Verdict:
    """SNI via symbolic execution and self-composition.

    Two symbolic runs share public symbols and carry per-run secret symbols.
    For every pair of paths whose non-speculative projections can unify, the
    solver searches for an assignment equating the projections while the
    full traces differ; a model concretizes into a replayable witness.
    """
    desc = parse_selector(sem) if isinstance(sem, str) else sem
    solver = solver or ExhaustiveSolver(domain_bits, width)
    stats = Stats()

    def paths(run_tag: int):
        cfg = SymConfiguration.initial(program, policy, width, run_tag)
        res = run_selector_symbolic(desc, program, cfg, window, fuel,
                                    rsb_size, domain_bits)
        return res, cfg.init

    try:
        paths1, init1 = paths(1)
        paths2, init2 = paths(2)
    except sym.SplitTooWide as exc:
        return Verdict(INCONCLUSIVE, stats=stats, diagnosis=str(exc))
    stats.runs = len(paths1) + len(paths2)
    if any(s == FUEL_EXHAUSTED for _, s in paths1 + paths2):
        return Verdict(INCONCLUSIVE, stats=stats,
                       diagnosis="fuel exhausted before termination")

    for (t1, _s1), (t2, _s2) in itertools.product(paths1, paths2):
        stats.pairs += 1
        obs1, conds1 = _split_pathconds(t1)
        obs2, conds2 = _split_pathconds(t2)
        proj1 = ns_project(obs1)
        proj2 = ns_project(obs2)
        if len(proj1) != len(proj2):
            continue
        constraints = list(conds1) + list(conds2)
        unifiable = True
        for a, b in zip(proj1, proj2):
            if not _structurally_same(a, b):
                unifiable = False
                break
            pair = _payload_pairs(a, b)
            if pair is None:
                if a != b:  # call observations and markers compare directly
                    unifiable = False
                    break
                continue
            pa, pb = pair
            if isinstance(pa, int) and isinstance(pb, int):
                if pa != pb:
                    unifiable = False
                    break
            else:
                constraints.append(eq_constraint(pa, pb))
        if not unifiable:
            continue

        goals: list = []
        structurally_different = len(obs1) != len(obs2)
        if not structurally_different:
            for a, b in zip(obs1, obs2):
                if not _structurally_same(a, b):
                    structurally_different = True
                    break
                pair = _payload_pairs(a, b)
                if pair is None:
                    if a != b:
                        structurally_different = True
                        break
                    continue
                pa, pb = pair
                if isinstance(pa, int) and isinstance(pb, int):
                    if pa != pb:
                        structurally_different = True
                        break
                else:
                    goals.append(neq_constraint(pa, pb))
        if not structurally_different and not goals:
            continue  # identical traces under every assignment: no query needed

        stats.queries += 1
        result = solver.solve(SolverQuery(tuple(constraints),
                                          True if structurally_different else tuple(goals)))
        if result.status == "unknown":
            diag = (result.model or {}).get("_diagnosis", "solver answered unknown")
            return Verdict(INCONCLUSIVE, stats=stats, diagnosis=diag)
        if result.status == "sat":
            witness = _concretize_witness(
                program, policy, desc, result.model, init1, init2,
                width, window, rsb_size, fuel)
            return Verdict(INSECURE, witness=witness, stats=stats)
    return Verdict(SECURE, stats=stats)


def _concretize_witness(program, policy, desc, model, init1, init2,
                        width, window, rsb_size, fuel) -> Witness:
    """Turn a solver model into concrete draws and replay both runs."""
    def draws_of(init_store):
        out: dict[Location, int] = {}
        for loc in init_store.order:
            symval = init_store.values[loc]
            out[loc] = model.get(symval.name, 0)
        return out

    draws1 = draws_of(init1)
    draws2 = draws_of(init2)
    trace1, _ = _replay_run(program, policy, desc, draws1, width, window, rsb_size, fuel)
    trace2, _ = _replay_run(program, policy, desc, draws2, width, window, rsb_size, fuel)
    diff = next((k for k, (a, b) in enumerate(itertools.zip_longest(trace1, trace2))
                 if a != b), 0)
    return Witness(draws1, draws2, trace1, trace2, diff)


def _replay_run(program, policy, desc, draws, width, window, rsb_size, fuel):
    extra: dict[Location, int] = {}

    def on_uninit(loc):
        if loc in draws:
            return draws[loc]
        return extra.setdefault(loc, 0)

    cfg = Configuration.initial(program, policy, width)
    return run_selector(desc, program, cfg, window, fuel, rsb_size, on_uninit)


def _config_from_draws(program: Program, policy: Policy, draws: dict[Location, int],
                       width: int) -> Configuration:
    cfg = Configuration.initial(program, policy, width)
    for loc, value in draws.items():
        cfg.init.put(loc, value)
    return cfg


def replay_witness(
    witness: Witness,
    program: Program,
    policy: Policy,
    sem: str | CombinedDescriptor,
    width: int = 64,
    window: int = 16,
    rsb_size: int = 16,
    fuel: int = 10_000,
) -> bool:
    """Re-execute both runs and re-check the three witness conditions.

    True iff the initial configurations are low-equivalent, their recomputed
    non-speculative projections agree, and the recomputed full traces differ.
    """
    desc = parse_selector(sem) if isinstance(sem, str) else sem
    cfg1 = _config_from_draws(program, policy, witness.draws1, width)
    cfg2 = _config_from_draws(program, policy, witness.draws2, width)
    if not low_equivalent(cfg1, cfg2, policy):
        return False
    trace1, _ = _replay_run(program, policy, desc, witness.draws1,
                            width, window, rsb_size, fuel)
    trace2, _ = _replay_run(program, policy, desc, witness.draws2,
                            width, window, rsb_size, fuel)
    try:
        if ns_project(trace1) != ns_project(trace2):
            return False
    except MalformedTrace:
        return False
    return trace1 != trace2


# ---------------------------------------------------------------------------
# Oracle overapproximation (forward direction)
# ---------------------------------------------------------------------------

def oracle_family(src: str, omega: int = 8) -> list[Oracle]:
    """A small enumerated predictor family for one speculation source."""
    windows = sorted({0, 1, omega // 2, omega})
    family: list[Oracle] = [NeverMispredict()]
    if src == "B":
        family += [FixedOracle(branch_taken=b, window=w)
                   for b in (True, False) for w in windows]
    elif src == "S":
        family += [FixedOracle(bypass=True, window=w) for w in windows]
        family.append(FixedOracle(bypass=False, window=0))
    elif src == "R":
        family += [FixedOracle(window=w) for w in windows]
    else:
        raise ValueError(f"unknown source {src!r}")
    return family


@dataclass
class OverapproxReport:
    am_status: str
    oracles_checked: int = 0
    counterexamples: list[int] = field(default_factory=list)
    vacuous: bool = False

    @property
    def ok(self) -> bool:
        return not self.counterexamples


def check_oracle_overapprox(
    program: Program,
    policy: Policy,
    src: str,
    family: Iterable[Oracle] | None = None,
    domain_bits: int = 2,
    fuel: int = 10_000,
    width: int = 64,
    window: int = 16,
    rsb_size: int = 16,
) -> OverapproxReport:
    """AM-secure must imply oracle-secure for every oracle in the family.

    Vacuously passes when the AM semantics already reports a violation.
    """
    params = SpecParams(window=window, rsb_size=rsb_size)
    am = check_sni_concrete(program, policy, src.lower(), domain_bits, fuel,
                            width, window, rsb_size)
    report = OverapproxReport(am_status=am.status)
    if am.status != SECURE:
        report.vacuous = True
        return report
    for idx, oracle in enumerate(family or oracle_family(src, window)):
        def run_once(on_uninit, _oracle=oracle):
            cfg = Configuration.initial(program, policy, width)
            return oracle_run(src, _oracle, program, cfg, fuel, params, on_uninit)

        verdict = check_sni_concrete(
            program, policy, src.lower(), domain_bits, fuel, width,
            window, rsb_size, run_once=run_once)
        report.oracles_checked += 1
        if verdict.status == INSECURE:
            report.counterexamples.append(idx)
    return report
