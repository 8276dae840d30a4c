"""Speculative semantics for the three speculation sources B, S and R.

Each source speculates over one instruction family:

  B  branch misprediction  (beqz)
  S  store bypass          (store)
  R  return misprediction  (ret, with call feeding the return stack buffer)

The always-mispredict (AM) flavour explores every misprediction for a fixed
window; the oracle flavour speculates only where an explicit predictor
mispredicts; the symbolic flavour runs AM over symbolic configurations.

Speculation state is a stack of frames; reductions happen only on top.
Starting a transaction replaces the top frame with the committed successor
(the correct step is taken immediately, its observation is held back) and
pushes the mispredicted frame above it.  The trace shows `start` followed by
the mispredicted target, and on rollback shows `rollback` followed by the
held-back correct observation, which is where a non-speculating machine
would have produced it.

Every step function takes an exclusion set Z of instruction classes the
source must not execute; compositions use Z to force delegation to the
owning source.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Union

from .lang import (
    Beqz, Call, Cmov, Configuration, Jmp, Load, Program, Ret, Store,
    PC, SP, UninitRead, _wrap, iclass,
)
from .nonspec import (
    FUEL_EXHAUSTED, OK, STUCK, TERMINATED, Observation, OCall, OLoad,
    OPathCond, OPc, ORet, ORollback, OSkip, OStart, OStore, Step, Trace,
    ns_step,
)
from . import symbolic as sym
from .symbolic import SymConfiguration, eq_constraint, neq_constraint

ROOT = "root"

SPEC_RELEVANT: dict[str, frozenset[str]] = {
    "B": frozenset({"beqz"}),
    "S": frozenset({"store"}),
    "R": frozenset({"call", "ret"}),
}


@dataclass(frozen=True)
class SourceDescriptor:
    """A speculation source: its tag and the instruction classes it owns."""
    tag: str
    relevant: frozenset[str]


SOURCES = {tag: SourceDescriptor(tag, rel) for tag, rel in SPEC_RELEVANT.items()}


@dataclass(frozen=True)
class SpecParams:
    """Global speculation knobs: window, RSB capacity, predictor history."""
    window: int = 16
    rsb_size: int = 16
    history_len: int = 16


@dataclass
class Frame:
    """One speculation instance.

    window None means unbounded (only the root frame); rsb is None unless
    the R source participates; pending holds the correct-step observation
    announced when this frame's transaction rolls back; src tags the
    transaction that created the frame.
    """
    ctr: int
    cfg: Union[Configuration, SymConfiguration]
    window: int | None
    rsb: tuple[int, ...] | None
    src: str
    pending: Observation | None = None

    def copy(self) -> "Frame":
        return Frame(self.ctr, self.cfg, self.window, self.rsb, self.src, self.pending)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.ctr == other.ctr and self.window == other.window
            and self.rsb == other.rsb and self.src == other.src
            and self.pending == other.pending and self.cfg == other.cfg
        )


@dataclass
class SpecState:
    """A speculative machine state: the program and the frame stack."""
    program: Program
    frames: list[Frame]

    @staticmethod
    def initial(program: Program, cfg: Union[Configuration, SymConfiguration],
                with_rsb: bool) -> "SpecState":
        rsb: tuple[int, ...] | None = () if with_rsb else None
        return SpecState(program, [Frame(0, cfg, None, rsb, ROOT)])


def _dec(window: int | None) -> int | None:
    return None if window is None else window - 1


def _cap(omega: int, window: int | None) -> int:
    return omega if window is None else min(omega, window)


# ---------------------------------------------------------------------------
# Execution modes: concrete vs symbolic
# ---------------------------------------------------------------------------
# A mode turns one instruction into a list of successor branches
#   (config', [observations], (new path constraints))
# Concrete mode always yields exactly one branch; symbolic mode forks on
# symbolic branch guards and case-splits symbolic addresses.

@dataclass
class Branch:
    cfg: object
    obs: list
    constraints: tuple = ()


class ConcreteExec:
    symbolic = False

    def __init__(self, on_uninit: Callable):
        self.on_uninit = on_uninit

    def _retry(self, cfg, fn):
        while True:
            try:
                return fn()
            except UninitRead as exc:
                cfg.init.put(exc.location, self.on_uninit(exc.location))

    def plain_step(self, p: Program, cfg: Configuration, constraints) -> list[Branch] | Step:
        step = self._retry(cfg, lambda: ns_step(p, cfg))
        if step.status != OK:
            return step
        return [Branch(step.config, [step.obs] if step.obs else [])]

    def branch_paths(self, p, cfg, instr: Beqz, constraints):
        """(correct_cfg, correct_obs, mispredicted_target, constraints) list."""
        v = self._retry(cfg, lambda: cfg.read_reg(instr.reg))
        correct = instr.target if v == 0 else _wrap(cfg.pc + 1, cfg.width)
        mis = _wrap(cfg.pc + 1, cfg.width) if correct == instr.target else instr.target
        out = cfg.copy()
        out.registers[PC] = correct
        return [(out, OPc(correct), mis, ())]

    def store_paths(self, p, cfg, instr: Store, constraints):
        """(performed_cfg, store_obs, constraints) list."""
        addr = self._retry(cfg, lambda: sym_eval_concrete(cfg, instr.addr))
        value = self._retry(cfg, lambda: cfg.read_reg(instr.reg))
        out = cfg.copy()
        out.registers[PC] = _wrap(cfg.pc + 1, cfg.width)
        out.memory[addr] = value
        return [(out, OStore(addr), ())]

    def ret_paths(self, p, cfg, constraints):
        """(actual_target, returned_cfg, ret_obs, constraints) list."""
        sp = self._retry(cfg, lambda: cfg.read_reg(SP))
        actual = self._retry(cfg, lambda: cfg.read_mem(sp))
        out = cfg.copy()
        out.registers[PC] = actual
        out.registers[SP] = _wrap(sp + 8, cfg.width)
        return [(actual, out, ORet(actual), ())]


def sym_eval_concrete(cfg: Configuration, expr) -> int:
    from .lang import eval_in
    return eval_in(cfg, expr)


class SymbolicExec:
    symbolic = True

    def __init__(self, domain: range, max_split: int = 64):
        self.domain = domain
        self.max_split = max_split

    def _split(self, val, constraints) -> list[tuple[int, tuple]]:
        """Case-split a value over its feasible concrete interpretations."""
        if isinstance(val, int):
            return [(val, ())]
        values = sym.feasible_values(val, constraints, self.domain, width=64)
        if len(values) > self.max_split:
            raise sym.SplitTooWide(
                f"symbolic address takes {len(values)} values; use concrete mode"
            )
        if len(values) == 1:
            return [(values[0], ())]
        return [(v, (eq_constraint(val, v),)) for v in values]

    def plain_step(self, p: Program, cfg: SymConfiguration, constraints):
        instr = p.instruction(cfg.pc)
        if instr is None:
            return Step(TERMINATED)
        width = cfg.width

        def advance(c, target=None):
            out = c.copy()
            out.registers[PC] = _wrap(cfg.pc + 1, width) if target is None else target
            return out

        from .lang import Assign, Skip, Spbarr

        if isinstance(instr, (Skip, Spbarr)):
            return [Branch(advance(cfg), [])]
        if isinstance(instr, Assign):
            v = cfg.eval(instr.expr)
            out = advance(cfg)
            out.registers[instr.reg] = v
            return [Branch(out, [])]
        if isinstance(instr, Cmov):
            cond = cfg.eval(instr.cond)
            out = advance(cfg)
            if isinstance(cond, int):
                if cond != 0:
                    out.registers[instr.reg] = cfg.eval(instr.expr)
            else:
                # Arithmetic if-then-else keeps cmov observation-free on
                # symbolic guards: (cond != 0)*e + (cond == 0)*old.
                e = cfg.eval(instr.expr)
                old = cfg.read_reg(instr.reg)
                is_zero = eq_constraint(cond, 0)
                nonzero = sym.sym_unop("!", is_zero, width)
                out.registers[instr.reg] = sym.sym_binop(
                    "+",
                    sym.sym_binop("*", nonzero, e, width),
                    sym.sym_binop("*", is_zero, old, width),
                    width,
                )
            return [Branch(out, [])]
        if isinstance(instr, Load):
            addr = cfg.eval(instr.addr)
            branches = []
            for a, extra in self._split(addr, constraints):
                out = advance(cfg)
                out.registers[instr.reg] = cfg.read_mem(a)
                obs = [OPathCond(c) for c in extra] + [OLoad(addr)]
                branches.append(Branch(out, obs, extra))
            return branches
        if isinstance(instr, Store):
            return [
                Branch(out, [OPathCond(c) for c in extra] + [obs], extra)
                for out, obs, extra in self.store_paths(p, cfg, instr, constraints)
            ]
        if isinstance(instr, Jmp):
            target = cfg.eval(instr.target)
            branches = []
            for t, extra in self._split(target, constraints):
                branches.append(Branch(
                    advance(cfg, t), [OPathCond(c) for c in extra] + [OPc(t)], extra
                ))
            return branches
        if isinstance(instr, Beqz):
            branches = []
            for out, obs, _mis, extra in self.branch_paths(p, cfg, instr, constraints):
                branches.append(Branch(out, [OPathCond(c) for c in extra] + [obs], extra))
            return branches
        if isinstance(instr, Call):
            entry = p.functions.get(instr.func)
            if entry is None:
                return Step(STUCK, cause=f"call to unknown function {instr.func!r}")
            sp_new = sym.sym_binop("-", cfg.read_reg(SP), 8, width)
            branches = []
            for spv, extra in self._split(sp_new, constraints):
                out = cfg.copy()
                out.registers[SP] = spv
                out.memory[spv] = _wrap(cfg.pc + 1, width)
                out.registers[PC] = entry
                branches.append(Branch(
                    out, [OPathCond(c) for c in extra] + [OCall(instr.func)], extra
                ))
            return branches
        if isinstance(instr, Ret):
            return [
                Branch(out, [OPathCond(c) for c in extra] + [obs], extra)
                for _t, out, obs, extra in self.ret_paths(p, cfg, constraints)
            ]
        return Step(STUCK, cause=f"no rule for {instr!r}")

    def branch_paths(self, p, cfg: SymConfiguration, instr: Beqz, constraints):
        width = cfg.width
        guard = cfg.read_reg(instr.reg)
        fall = _wrap(cfg.pc + 1, width)
        if isinstance(guard, int):
            correct = instr.target if guard == 0 else fall
            mis = fall if correct == instr.target else instr.target
            out = cfg.copy()
            out.registers[PC] = correct
            return [(out, OPc(correct), mis, ())]
        paths = []
        for cond, correct, mis in (
            (eq_constraint(guard, 0), instr.target, fall),
            (neq_constraint(guard, 0), fall, instr.target),
        ):
            if not sym.satisfiable(constraints + (cond,), self.domain, width):
                continue
            out = cfg.copy()
            out.registers[PC] = correct
            paths.append((out, OPc(correct), mis, (cond,)))
        return paths

    def store_paths(self, p, cfg: SymConfiguration, instr: Store, constraints):
        addr = cfg.eval(instr.addr)
        value = cfg.read_reg(instr.reg)
        paths = []
        for a, extra in self._split(addr, constraints):
            out = cfg.copy()
            out.registers[PC] = _wrap(cfg.pc + 1, cfg.width)
            out.memory[a] = value
            paths.append((out, OStore(addr), extra))
        return paths

    def ret_paths(self, p, cfg: SymConfiguration, constraints):
        width = cfg.width
        paths = []
        for spv, sp_extra in self._split(cfg.read_reg(SP), constraints):
            target = cfg.read_mem(spv)
            for t, t_extra in self._split(target, constraints + sp_extra):
                out = cfg.copy()
                out.registers[SP] = _wrap(spv + 8, width)
                out.registers[PC] = t
                paths.append((t, out, ORet(t), sp_extra + t_extra))
        return paths


# ---------------------------------------------------------------------------
# The unified speculative driver
# ---------------------------------------------------------------------------

@dataclass
class _RunState:
    frames: list[Frame]
    trace: list
    constraints: tuple
    fuel: int


def _rollback(frames: list[Frame]) -> list[Observation]:
    """Pop the top frame; the frame below resumes with the popped counter."""
    top = frames.pop()
    below = frames[-1]
    obs: list[Observation] = [ORollback(top.src, below.ctr)]
    if below.pending is not None:
        obs.append(below.pending)
    frames[-1] = Frame(top.ctr, below.cfg, below.window, below.rsb, below.src)
    return obs


def select_delegate(order: tuple[str, ...], z_map: dict[str, frozenset[str]],
                    cls: str) -> str | None:
    """The source a composition hands this instruction class to.

    The owning source wins when eligible; otherwise the first source (in
    composition order) whose exclusion set allows the class.  Under the
    canonical Z tables the choice is unique up to confluence.
    """
    eligible = [s for s in order if cls not in z_map[s]]
    for s in eligible:
        if cls in SPEC_RELEVANT[s]:
            return s
    return eligible[0] if eligible else None


def eligible_delegates(order, z_map, cls) -> list[str]:
    return [s for s in order if cls not in z_map[s]]


def _step_frames(
    p: Program,
    frames: list[Frame],
    delegate: str,
    params: SpecParams,
    mode,
    constraints: tuple,
) -> Union[Step, list[tuple[list[Frame], list, tuple]]]:
    """One delegated step on the top frame.

    Returns a Step for stuck outcomes, otherwise a list of successor
    branches (new_frames, observations, new_constraints).
    """
    top = frames[-1]
    assert top.pending is None, "executing frame cannot hold a pending observation"
    instr = p.instruction(top.cfg.pc)
    cls = iclass(instr)
    n_after = _dec(top.window)
    in_spec = len(frames) > 1
    omega = params.window

    def spawn(below_cfg, pending, pushed_cfg, rsb_below, rsb_pushed, src, obs, extra):
        below = Frame(top.ctr, below_cfg, n_after, rsb_below, top.src, pending)
        pushed = Frame(top.ctr + 1, pushed_cfg, _cap(omega, n_after), rsb_pushed, src)
        return frames[:-1] + [below, pushed], obs, extra

    if delegate == "B" and cls == "beqz":
        paths = mode.branch_paths(p, top.cfg, instr, constraints)
        out = []
        for correct_cfg, correct_obs, mis, extra in paths:
            mis_cfg = top.cfg.copy()
            mis_cfg.registers[PC] = mis
            obs = [OPathCond(c) for c in extra] + [OStart("B", top.ctr), OPc(mis)]
            out.append(spawn(correct_cfg, correct_obs, mis_cfg,
                             top.rsb, top.rsb, "B", obs, extra))
        return out if out else Step(STUCK, cause="no feasible branch outcome")

    if delegate == "S" and cls == "store":
        paths = mode.store_paths(p, top.cfg, instr, constraints)
        out = []
        for done_cfg, store_obs, extra in paths:
            skip_cfg = top.cfg.copy()
            skip_cfg.registers[PC] = _wrap(top.cfg.pc + 1, top.cfg.width)
            obs = [OPathCond(c) for c in extra] + [OStart("S", top.ctr), OSkip(top.cfg.pc)]
            out.append(spawn(done_cfg, store_obs, skip_cfg,
                             top.rsb, top.rsb, "S", obs, extra))
        return out

    if delegate == "R" and cls == "call":
        branches = mode.plain_step(p, top.cfg, constraints)
        if isinstance(branches, Step):
            return branches
        ra = _wrap(top.cfg.pc + 1, top.cfg.width)
        rsb = top.rsb
        if rsb is not None and len(rsb) < params.rsb_size:
            rsb = rsb + (ra,)  # acyclic RSB: a full buffer drops the push
        out = []
        for br in branches:
            nf = frames[:-1] + [Frame(top.ctr, br.cfg, n_after, rsb, top.src)]
            out.append((nf, br.obs, br.constraints))
        return out

    if delegate == "R" and cls == "ret":
        rsb = top.rsb if top.rsb is not None else ()
        paths = mode.ret_paths(p, top.cfg, constraints)
        out = []
        for actual, ret_cfg, ret_obs, extra in paths:
            pre = [OPathCond(c) for c in extra]
            if not rsb:
                # Empty RSB: no speculation, plain stack-based return.
                nf = frames[:-1] + [Frame(top.ctr, ret_cfg, n_after, top.rsb, top.src)]
                out.append((nf, pre + [ret_obs], extra))
                continue
            predicted, rsb_rest = rsb[-1], rsb[:-1]
            if predicted == actual:
                nf = frames[:-1] + [Frame(top.ctr, ret_cfg, n_after, rsb_rest, top.src)]
                out.append((nf, pre + [ret_obs], extra))
                continue
            spec_cfg = top.cfg.copy()
            spec_cfg.registers[PC] = predicted
            spec_cfg.registers[SP] = ret_cfg.registers[SP]
            obs = pre + [OStart("R", top.ctr), ORet(predicted)]
            out.append(spawn(ret_cfg, ret_obs, spec_cfg,
                             rsb_rest, rsb_rest, "R", obs, extra))
        return out

    # Everything else is delegation to the (symbolic) non-speculative step.
    branches = mode.plain_step(p, top.cfg, constraints)
    if isinstance(branches, Step):
        return branches
    barrier = cls == "spbarr" and in_spec
    out = []
    for br in branches:
        window = 0 if barrier else n_after
        nf = frames[:-1] + [Frame(top.ctr, br.cfg, window, top.rsb, top.src)]
        out.append((nf, br.obs, br.constraints))
    return out


def _spec_run(
    p: Program,
    cfg0,
    order: tuple[str, ...],
    z_map: dict[str, frozenset[str]],
    params: SpecParams,
    fuel: int,
    mode,
) -> list[tuple[Trace, str]]:
    """Reflexive-transitive closure of the delegated speculative step.

    Returns every execution path (symbolic mode may fork); concrete mode
    always yields a single path.  The root frame never rolls back: program
    exit or a stuck instruction at the root ends the run.
    """
    with_rsb = "R" in order
    start = _RunState(
        SpecState.initial(p, cfg0, with_rsb).frames, [], (), fuel)
    worklist = [start]
    results: list[tuple[Trace, str]] = []
    while worklist:
        st = worklist.pop()
        status = None
        while status is None:
            frames = st.frames
            top = frames[-1]
            if top.window == 0 and len(frames) > 1:
                st.trace.extend(_rollback(frames))
                continue
            instr = p.instruction(top.cfg.pc)
            if instr is None:
                if len(frames) > 1:
                    st.trace.extend(_rollback(frames))
                    continue
                status = TERMINATED
                break
            if st.fuel <= 0:
                status = FUEL_EXHAUSTED
                break
            delegate = select_delegate(order, z_map, iclass(instr))
            if delegate is None:
                outcome: Union[Step, list] = Step(
                    STUCK, cause=f"no delegate may execute {iclass(instr)}")
            else:
                outcome = _step_frames(p, frames, delegate, params, mode, st.constraints)
            if isinstance(outcome, Step):
                if len(frames) > 1:
                    st.trace.extend(_rollback(frames))
                    continue
                status = STUCK
                break
            st.fuel -= 1
            if len(outcome) == 1:
                nf, obs, extra = outcome[0]
                st.frames = nf
                st.trace.extend(obs)
                st.constraints += extra
            else:
                succs = []
                for nf, obs, extra in outcome:
                    succs.append(_RunState(
                        nf, st.trace + obs, st.constraints + extra, st.fuel))
                worklist.extend(reversed(succs))
                break
        if status is not None:
            results.append((st.trace, status))
    return results


# ---------------------------------------------------------------------------
# Public entry points for single sources
# ---------------------------------------------------------------------------

def _solo(order_tag: str) -> tuple[tuple[str, ...], dict[str, frozenset[str]]]:
    return (order_tag,), {order_tag: frozenset()}


def am_run(
    src: str | SourceDescriptor,
    p: Program,
    cfg0: Configuration,
    window: int = 16,
    fuel: int = 10_000,
    rsb_size: int = 16,
    on_uninit=None,
) -> tuple[Trace, str]:
    """Always-mispredict behaviour of a single speculation source."""
    tag = src.tag if isinstance(src, SourceDescriptor) else src
    order, z_map = _solo(tag)
    params = SpecParams(window=window, rsb_size=rsb_size)
    from .nonspec import zero_uninit
    mode = ConcreteExec(on_uninit or zero_uninit)
    [(trace, status)] = _spec_run(p, cfg0, order, z_map, params, fuel, mode)
    return trace, status


def sym_am_run(
    src: str | SourceDescriptor,
    p: Program,
    cfg0: SymConfiguration,
    window: int = 16,
    fuel: int = 10_000,
    rsb_size: int = 16,
    domain_bits: int = 2,
) -> list[tuple[Trace, str]]:
    """Symbolic always-mispredict behaviour: one trace per execution path."""
    tag = src.tag if isinstance(src, SourceDescriptor) else src
    order, z_map = _solo(tag)
    params = SpecParams(window=window, rsb_size=rsb_size)
    mode = SymbolicExec(range(1 << domain_bits))
    return _spec_run(p, cfg0, order, z_map, params, fuel, mode)


def _am_step(state: SpecState, tag: str, z: frozenset[str],
             params: SpecParams, on_uninit=None) -> tuple[SpecState, list]:
    """One AM step of a single source on a SpecState (concrete)."""
    from .nonspec import zero_uninit
    frames = [f.copy() for f in state.frames]
    top = frames[-1]
    if top.window == 0 and len(frames) > 1:
        obs = _rollback(frames)
        return SpecState(state.program, frames), obs
    instr = state.program.instruction(top.cfg.pc)
    if instr is None or iclass(instr) in z:
        if len(frames) > 1:
            obs = _rollback(frames)
            return SpecState(state.program, frames), obs
        return SpecState(state.program, frames), []
    mode = ConcreteExec(on_uninit or zero_uninit)
    outcome = _step_frames(state.program, frames, tag, params, mode, ())
    if isinstance(outcome, Step):
        if len(frames) > 1:
            obs = _rollback(frames)
            return SpecState(state.program, frames), obs
        return SpecState(state.program, frames), []
    [(nf, obs, _)] = outcome
    return SpecState(state.program, nf), obs


def am_step_B(state: SpecState, z: frozenset[str] = frozenset(),
              params: SpecParams = SpecParams(), on_uninit=None):
    return _am_step(state, "B", z, params, on_uninit)


def am_step_S(state: SpecState, z: frozenset[str] = frozenset(),
              params: SpecParams = SpecParams(), on_uninit=None):
    return _am_step(state, "S", z, params, on_uninit)


def am_step_R(state: SpecState, z: frozenset[str] = frozenset(),
              params: SpecParams = SpecParams(), on_uninit=None):
    return _am_step(state, "R", z, params, on_uninit)


# ---------------------------------------------------------------------------
# Oracle semantics
# ---------------------------------------------------------------------------

class Oracle:
    """An explicit predictor.

    For branches it predicts the outcome and picks the speculation window;
    for stores it decides whether to bypass; for returns it only picks the
    window (the RSB dictates the target).  History is a bounded FIFO of
    (instruction class, pc, outcome) triples.
    """

    def predict_branch(self, pc: int, history: tuple) -> tuple[bool, int]:
        raise NotImplementedError

    def predict_store(self, pc: int, history: tuple) -> tuple[bool, int]:
        raise NotImplementedError

    def predict_ret_window(self, history: tuple) -> int:
        raise NotImplementedError


class NeverMispredict(Oracle):
    """Predicts branches perfectly and never bypasses stores."""

    def __init__(self):
        self.actual_outcome: bool | None = None  # set by the driver per branch

    def predict_branch(self, pc, history):
        return self.actual_outcome, 0

    def predict_store(self, pc, history):
        return False, 0

    def predict_ret_window(self, history):
        return 0


@dataclass
class FixedOracle(Oracle):
    """Constant predictions: branch taken?, store bypassed?, window."""
    branch_taken: bool = True
    bypass: bool = True
    window: int = 4

    def predict_branch(self, pc, history):
        return self.branch_taken, self.window

    def predict_store(self, pc, history):
        return self.bypass, self.window

    def predict_ret_window(self, history):
        return self.window


def oracle_run(
    src: str | SourceDescriptor,
    oracle: Oracle,
    p: Program,
    cfg0: Configuration,
    fuel: int = 10_000,
    params: SpecParams = SpecParams(),
    on_uninit=None,
) -> tuple[Trace, str]:
    """Behaviour under the oracle semantics of one speculation source.

    A correctly predicted outcome executes non-speculatively (no markers);
    a misprediction opens a transaction whose window the oracle chose, which
    always rolls back.  Pushed windows are capped by the enclosing frame's
    remaining budget so nested transactions resolve innermost-first.
    """
    from .nonspec import zero_uninit
    tag = src.tag if isinstance(src, SourceDescriptor) else src
    mode = ConcreteExec(on_uninit or zero_uninit)
    with_rsb = tag == "R"
    frames = SpecState.initial(p, cfg0, with_rsb).frames
    trace: list = []
    history: tuple = ()

    def remember(entry):
        nonlocal history
        history = (history + (entry,))[-params.history_len:]

    while True:
        top = frames[-1]
        if top.window == 0 and len(frames) > 1:
            trace.extend(_rollback(frames))
            continue
        instr = p.instruction(top.cfg.pc)
        if instr is None:
            if len(frames) > 1:
                trace.extend(_rollback(frames))
                continue
            return trace, TERMINATED
        if fuel <= 0:
            return trace, FUEL_EXHAUSTED
        cls = iclass(instr)
        n_after = _dec(top.window)

        def push(below_cfg, pending, pushed_cfg, rsb_below, rsb_pushed, window, src_tag, obs):
            below = Frame(top.ctr, below_cfg, n_after, rsb_below, top.src, pending)
            pushed = Frame(top.ctr + 1, pushed_cfg, min(window, _cap(params.window, n_after)),
                           rsb_pushed, src_tag)
            frames[-1:] = [below, pushed]
            trace.extend(obs)

        stepped = False
        if tag == "B" and cls == "beqz":
            [(correct_cfg, correct_obs, mis, _)] = mode.branch_paths(p, top.cfg, instr, ())
            actually_taken = correct_cfg.registers[PC] == instr.target
            if isinstance(oracle, NeverMispredict):
                oracle.actual_outcome = actually_taken
            predicted, window = oracle.predict_branch(top.cfg.pc, history)
            remember(("beqz", top.cfg.pc, actually_taken))
            if predicted == actually_taken:
                frames[-1] = Frame(top.ctr, correct_cfg, n_after, top.rsb, top.src)
                trace.append(correct_obs)
            else:
                mis_cfg = top.cfg.copy()
                mis_cfg.registers[PC] = mis
                push(correct_cfg, correct_obs, mis_cfg, top.rsb, top.rsb,
                     window, "B", [OStart("B", top.ctr), OPc(mis)])
            stepped = True
        elif tag == "S" and cls == "store":
            bypass, window = oracle.predict_store(top.cfg.pc, history)
            remember(("store", top.cfg.pc, bypass))
            [(done_cfg, store_obs, _)] = mode.store_paths(p, top.cfg, instr, ())
            if not bypass:
                frames[-1] = Frame(top.ctr, done_cfg, n_after, top.rsb, top.src)
                trace.append(store_obs)
            else:
                skip_cfg = top.cfg.copy()
                skip_cfg.registers[PC] = _wrap(top.cfg.pc + 1, top.cfg.width)
                push(done_cfg, store_obs, skip_cfg, top.rsb, top.rsb,
                     window, "S", [OStart("S", top.ctr), OSkip(top.cfg.pc)])
            stepped = True
        elif tag == "R" and cls in ("call", "ret"):
            outcome = _step_frames(p, frames, "R", params, mode, ())
            if isinstance(outcome, Step):
                if len(frames) > 1:
                    trace.extend(_rollback(frames))
                    continue
                return trace, STUCK
            [(nf, obs, _)] = outcome
            if len(nf) > len(frames):
                # The RSB disagreed with the stack: the window is the only
                # thing the oracle decides for returns.
                window = oracle.predict_ret_window(history)
                remember(("ret", top.cfg.pc, True))
                pushed = nf[-1]
                nf[-1] = Frame(pushed.ctr, pushed.cfg,
                               min(window, _cap(params.window, n_after)),
                               pushed.rsb, pushed.src)
            frames[:] = nf
            trace.extend(obs)
            stepped = True

        if not stepped:
            outcome = mode.plain_step(p, top.cfg, ())
            if isinstance(outcome, Step):
                if len(frames) > 1:
                    trace.extend(_rollback(frames))
                    continue
                return trace, STUCK
            [br] = outcome
            window = 0 if cls == "spbarr" and len(frames) > 1 else n_after
            frames[-1] = Frame(top.ctr, br.cfg, window, top.rsb, top.src)
            trace.extend(br.obs)
        fuel -= 1
