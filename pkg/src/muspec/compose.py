"""Composing speculation sources into one semantics via Z-guarded delegation.

A composition of sources executes each instruction by delegating to exactly
one participant: the metaparameter Z gives every source the set of
instruction classes it must not execute, namely the classes the other
participants speculate on.  State, observations and instances are the unions
of the participants' (a single universal frame record with an optional RSB
serves all seven semantics); projections are field and trace filters.

The executable well-formedness checks live here too: confluence (delegation
order never matters) and projection preservation (the combined trace,
restricted to one source's transactions, is that source's own trace).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .lang import Configuration, Program, iclass
from .nonspec import (
    FUEL_EXHAUSTED, ORollback, OStart, Step, Trace, zero_uninit,
)
from .specsem import (
    ConcreteExec, Frame, SPEC_RELEVANT, SourceDescriptor, SpecParams,
    SpecState, SymbolicExec, _rollback, _spec_run, _step_frames,
    eligible_delegates, select_delegate,
)
from .symbolic import SymConfiguration

CANONICAL_ORDER = ("B", "S", "R")
SELECTORS = ("b", "s", "r", "b+s", "s+r", "b+r", "b+s+r")


def canonical_z(order: tuple[str, ...]) -> dict[str, frozenset[str]]:
    """Each source is forbidden the other participants' speculation classes."""
    z: dict[str, frozenset[str]] = {}
    for x in order:
        excl: set[str] = set()
        for y in order:
            if y != x:
                excl |= SPEC_RELEVANT[y]
        z[x] = frozenset(excl)
    return z


@dataclass(frozen=True)
class Zparam:
    """Per-source exclusion sets driving delegation."""
    exclusions: tuple[tuple[str, frozenset[str]], ...]

    def as_map(self) -> dict[str, frozenset[str]]:
        return dict(self.exclusions)


@dataclass(frozen=True)
class CombinedDescriptor:
    """An ordered combination of speculation sources with its Zparam."""
    order: tuple[str, ...]
    z: Zparam

    @property
    def with_rsb(self) -> bool:
        return "R" in self.order

    @property
    def sources(self) -> tuple[SourceDescriptor, ...]:
        from .specsem import SOURCES
        return tuple(SOURCES[t] for t in self.order)

    @staticmethod
    def of(*tags: str, z: dict[str, frozenset[str]] | None = None) -> "CombinedDescriptor":
        order = tuple(t for t in CANONICAL_ORDER if t in {t.upper() for t in tags})
        if len(order) != len(tags):
            raise ValueError(f"bad or repeated source tags: {tags}")
        z_map = z if z is not None else canonical_z(order)
        return CombinedDescriptor(order, Zparam(tuple(sorted(z_map.items()))))


def parse_selector(sel: str) -> CombinedDescriptor:
    """Parse the semantics selector grammar: b, s, r, b+s, s+r, b+r, b+s+r."""
    sel = sel.strip().lower()
    if sel not in SELECTORS:
        raise ValueError(f"unknown semantics selector {sel!r} (expected one of {SELECTORS})")
    return CombinedDescriptor.of(*sel.split("+"))


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def project_instance(frame: Frame, target: str) -> Frame:
    """Keep the fields of the target source's instance shape."""
    if target not in SPEC_RELEVANT:
        raise ValueError(f"unknown source {target!r}")
    rsb = frame.rsb if target == "R" else None
    return Frame(frame.ctr, frame.cfg, frame.window, rsb, frame.src, frame.pending)


def embed_instance(frame: Frame, rsb: tuple[int, ...] | None) -> Frame:
    """Re-attach the RSB a projection dropped."""
    return Frame(frame.ctr, frame.cfg, frame.window, rsb, frame.src, frame.pending)


def project_state(state: SpecState, target: str) -> SpecState:
    return SpecState(state.program, [project_instance(f, target) for f in state.frames])


def project_trace(trace: Trace, keep: str) -> Trace:
    """Remove every balanced transaction of the other sources, recursively."""
    result: list = []
    open_stack: list[tuple[str, int, int]] = []
    for obs in trace:
        if isinstance(obs, OStart) and obs.src != keep:
            open_stack.append((obs.src, obs.id, len(result)))
            result.append(obs)
        elif isinstance(obs, ORollback) and obs.src != keep:
            while open_stack:
                src, tid, pos = open_stack.pop()
                if (src, tid) == (obs.src, obs.id):
                    del result[pos:]
                    break
            else:
                from .nonspec import MalformedTrace
                raise MalformedTrace(f"rollback without start: {obs}")
        else:
            result.append(obs)
    return result


def renumber_transactions(trace: Trace) -> Trace:
    """Canonicalize transaction ids by order of first appearance.

    A combined run consumes counter values for every participant, so the ids
    surviving a projection differ from a solo run's; comparisons are made
    modulo this renumbering.
    """
    mapping: dict[tuple[str, int], int] = {}
    out: list = []
    for obs in trace:
        if isinstance(obs, (OStart, ORollback)):
            key = (obs.src, obs.id)
            if key not in mapping:
                if not isinstance(obs, OStart):
                    from .nonspec import MalformedTrace
                    raise MalformedTrace(f"rollback before start: {obs}")
                mapping[key] = len(mapping)
            out.append(type(obs)(obs.src, mapping[key]))
        else:
            out.append(obs)
    return out


# ---------------------------------------------------------------------------
# Combined runs
# ---------------------------------------------------------------------------

def combined_step(desc: CombinedDescriptor, state: SpecState,
                  params: SpecParams = SpecParams(), on_uninit=None
                  ) -> tuple[SpecState, list]:
    """One concrete step of the combined semantics (rollback included)."""
    frames = [f.copy() for f in state.frames]
    top = frames[-1]
    if top.window == 0 and len(frames) > 1:
        return SpecState(state.program, frames), _rollback(frames)
    instr = state.program.instruction(top.cfg.pc)
    if instr is None:
        if len(frames) > 1:
            return SpecState(state.program, frames), _rollback(frames)
        return SpecState(state.program, frames), []
    delegate = select_delegate(desc.order, desc.z.as_map(), iclass(instr))
    mode = ConcreteExec(on_uninit or zero_uninit)
    outcome = _step_frames(state.program, frames, delegate, params, mode, ())
    if isinstance(outcome, Step):
        if len(frames) > 1:
            return SpecState(state.program, frames), _rollback(frames)
        return SpecState(state.program, frames), []
    [(nf, obs, _)] = outcome
    return SpecState(state.program, nf), obs


def combined_run(
    desc: CombinedDescriptor,
    p: Program,
    cfg0: Configuration,
    window: int = 16,
    fuel: int = 10_000,
    rsb_size: int = 16,
    on_uninit=None,
) -> tuple[Trace, str]:
    params = SpecParams(window=window, rsb_size=rsb_size)
    mode = ConcreteExec(on_uninit or zero_uninit)
    [(trace, status)] = _spec_run(
        p, cfg0, desc.order, desc.z.as_map(), params, fuel, mode)
    return trace, status


def combined_sym_run(
    desc: CombinedDescriptor,
    p: Program,
    cfg0: SymConfiguration,
    window: int = 16,
    fuel: int = 10_000,
    rsb_size: int = 16,
    domain_bits: int = 2,
) -> list[tuple[Trace, str]]:
    params = SpecParams(window=window, rsb_size=rsb_size)
    mode = SymbolicExec(range(1 << domain_bits))
    return _spec_run(p, cfg0, desc.order, desc.z.as_map(), params, fuel, mode)


def run_selector(
    sel: str | CombinedDescriptor,
    p: Program,
    cfg0: Configuration,
    window: int = 16,
    fuel: int = 10_000,
    rsb_size: int = 16,
    on_uninit=None,
) -> tuple[Trace, str]:
    """Run any of the seven semantics by selector."""
    desc = parse_selector(sel) if isinstance(sel, str) else sel
    return combined_run(desc, p, cfg0, window, fuel, rsb_size, on_uninit)


def run_selector_symbolic(
    sel: str | CombinedDescriptor,
    p: Program,
    cfg0: SymConfiguration,
    window: int = 16,
    fuel: int = 10_000,
    rsb_size: int = 16,
    domain_bits: int = 2,
) -> list[tuple[Trace, str]]:
    desc = parse_selector(sel) if isinstance(sel, str) else sel
    return combined_sym_run(desc, p, cfg0, window, fuel, rsb_size, domain_bits)


# ---------------------------------------------------------------------------
# Well-formedness harnesses
# ---------------------------------------------------------------------------

@dataclass
class Divergence:
    step: int
    pc: int
    delegates: tuple[str, str]
    detail: str


@dataclass
class ConfluenceReport:
    steps: int = 0
    multi_delegate_states: int = 0
    divergences: list[Divergence] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.divergences


def check_confluence(
    desc: CombinedDescriptor,
    p: Program,
    cfg0: Configuration,
    fuel: int = 10_000,
    window: int = 16,
    rsb_size: int = 16,
    on_uninit=None,
) -> ConfluenceReport:
    """Replay a run, executing every eligible delegate where several apply.

    Reports any state where two delegates disagree on the successor state or
    the emitted observations.
    """
    params = SpecParams(window=window, rsb_size=rsb_size)
    mode = ConcreteExec(on_uninit or zero_uninit)
    z_map = desc.z.as_map()
    frames = SpecState.initial(p, cfg0, desc.with_rsb).frames
    trace_len = 0
    report = ConfluenceReport()
    while fuel > 0:
        top = frames[-1]
        if top.window == 0 and len(frames) > 1:
            _rollback(frames)
            continue
        instr = p.instruction(top.cfg.pc)
        if instr is None:
            if len(frames) > 1:
                _rollback(frames)
                continue
            return report
        cls = iclass(instr)
        delegates = eligible_delegates(desc.order, z_map, cls)
        outcomes = []
        for d in delegates:
            res = _step_frames(p, [f.copy() for f in frames], d, params, mode, ())
            outcomes.append((d, res))
        if len(outcomes) > 1:
            report.multi_delegate_states += 1
            base_d, base = outcomes[0]
            for d, res in outcomes[1:]:
                if isinstance(base, Step) or isinstance(res, Step):
                    same = isinstance(base, Step) and isinstance(res, Step) \
                        and base.status == res.status
                else:
                    same = [(f_, o) for f_, o, _ in base] == [(f_, o) for f_, o, _ in res]
                if not same:
                    report.divergences.append(Divergence(
                        report.steps, top.cfg.pc, (base_d, d),
                        f"delegates {base_d} and {d} disagree at pc={top.cfg.pc}"))
        if not outcomes:
            return report
        _d, chosen = outcomes[0]
        canonical = select_delegate(desc.order, z_map, cls)
        for d, res in outcomes:
            if d == canonical:
                chosen = res
        if isinstance(chosen, Step):
            if len(frames) > 1:
                _rollback(frames)
                continue
            return report
        [(nf, obs, _)] = chosen
        frames = nf
        trace_len += len(obs)
        report.steps += 1
        fuel -= 1
    return report


@dataclass
class PreservationFailure:
    program: str
    source: str
    detail: str


@dataclass
class PreservationReport:
    checked: int = 0
    skipped: int = 0
    failures: list[PreservationFailure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_projection_preservation(
    desc: CombinedDescriptor,
    corpus,  # iterable of (name, Program, cfg-factory)
    fuel: int = 10_000,
    window: int = 16,
    rsb_size: int = 16,
    on_uninit_factory=None,
) -> PreservationReport:
    """For every participant x: project(combined trace, x) == solo-x trace.

    Traces are compared after transaction-id renumbering; runs that exhaust
    their fuel on either side are skipped and counted.
    """
    report = PreservationReport()
    for name, program, cfg_factory in corpus:
        draws: dict = {}

        def uninit(loc):
            if on_uninit_factory is not None:
                return on_uninit_factory(name, loc, draws)
            return draws.setdefault(loc, 0)

        combined_trace, status = combined_run(
            desc, program, cfg_factory(), window, fuel, rsb_size, uninit)
        if status == FUEL_EXHAUSTED:
            report.skipped += 1
            continue
        for tag in desc.order:
            solo = CombinedDescriptor.of(tag)
            solo_trace, solo_status = combined_run(
                solo, program, cfg_factory(), window, fuel, rsb_size, uninit)
            if solo_status == FUEL_EXHAUSTED:
                report.skipped += 1
                continue
            left = renumber_transactions(project_trace(combined_trace, tag))
            right = renumber_transactions(solo_trace)
            report.checked += 1
            if left != right:
                i = next((k for k, (a, b) in enumerate(zip(left, right)) if a != b),
                         min(len(left), len(right)))
                report.failures.append(PreservationFailure(
                    name, tag,
                    f"first difference at index {i}: "
                    f"{left[i] if i < len(left) else '<end>'} vs "
                    f"{right[i] if i < len(right) else '<end>'}"))
    return report
