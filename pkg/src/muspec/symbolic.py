"""Symbolic values, configurations and the symbolic non-speculative step.

Symbolic values are expression trees over literals and fresh symbols;
registers and memory map to such values while the program counter stays
concrete.  Branches on symbolic guards fork the execution and record path
conditions; loads, stores and returns whose address is symbolic are resolved
by case-splitting over the values the address can take in the declared
enumeration domain (the default solver is an exhaustive one, so the split
set stays finite by construction).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Union

from .lang import (
    BinOp, Configuration, Expr, Lit, Location, Policy, Program, Reg, UnOp,
    DEFAULT_SP, DEFAULT_WIDTH, PC, SP, apply_binop, apply_unop, _wrap,
)


@dataclass(frozen=True)
class Sym:
    """A fresh symbolic value; the name encodes run tag and origin."""
    name: str


SymVal = Union[int, Lit, Sym, UnOp, BinOp]


class SymbolicError(Exception):
    pass


class SplitTooWide(SymbolicError):
    """A symbolic address can take too many values; use concrete mode."""


# ---------------------------------------------------------------------------
# Evaluation over symbolic values
# ---------------------------------------------------------------------------

def is_concrete(v: SymVal) -> bool:
    return isinstance(v, int)


def _as_expr(v: SymVal) -> Expr:
    return Lit(v) if isinstance(v, int) else v


def sym_unop(op: str, v: SymVal, width: int) -> SymVal:
    if isinstance(v, int):
        return apply_unop(op, v, width)
    return UnOp(op, _as_expr(v))


def sym_binop(op: str, a: SymVal, b: SymVal, width: int) -> SymVal:
    if isinstance(a, int) and isinstance(b, int):
        return apply_binop(op, a, b, width)
    return BinOp(op, _as_expr(a), _as_expr(b))


def sym_eval(e: Expr, read_reg, width: int) -> SymVal:
    """Evaluate with constant folding; residual trees keep Sym leaves."""
    if isinstance(e, Lit):
        return _wrap(e.value, width)
    if isinstance(e, Sym):
        return e
    if isinstance(e, Reg):
        return read_reg(e.name)
    if isinstance(e, UnOp):
        return sym_unop(e.op, sym_eval(e.arg, read_reg, width), width)
    if isinstance(e, BinOp):
        return sym_binop(
            e.op, sym_eval(e.lhs, read_reg, width), sym_eval(e.rhs, read_reg, width), width
        )
    raise SymbolicError(f"not an expression: {e!r}")


def sym_vars(v: SymVal) -> set[str]:
    if isinstance(v, int) or isinstance(v, Lit):
        return set()
    if isinstance(v, Sym):
        return {v.name}
    if isinstance(v, UnOp):
        return sym_vars(v.arg)
    if isinstance(v, BinOp):
        return sym_vars(v.lhs) | sym_vars(v.rhs)
    raise SymbolicError(f"not a symbolic value: {v!r}")


def sym_concretize(v: SymVal, assignment: dict[str, int], width: int) -> int:
    """Fully evaluate under an assignment of every symbol it mentions."""
    if isinstance(v, int):
        return v
    if isinstance(v, Lit):
        return _wrap(v.value, width)
    if isinstance(v, Sym):
        return assignment[v.name]
    if isinstance(v, UnOp):
        return apply_unop(v.op, sym_concretize(v.arg, assignment, width), width)
    if isinstance(v, BinOp):
        return apply_binop(
            v.op,
            sym_concretize(v.lhs, assignment, width),
            sym_concretize(v.rhs, assignment, width),
            width,
        )
    raise SymbolicError(f"not a symbolic value: {v!r}")


def format_sym(v: SymVal) -> str:
    if isinstance(v, int):
        return str(v)
    if isinstance(v, Lit):
        return str(v.value)
    if isinstance(v, Sym):
        return v.name
    if isinstance(v, UnOp):
        return f"{v.op}{format_sym(v.arg)}"
    if isinstance(v, BinOp):
        return f"({format_sym(v.lhs)} {v.op} {format_sym(v.rhs)})"
    raise SymbolicError(f"not a symbolic value: {v!r}")


# Constraints are symbolic values read as booleans: nonzero means true.
Constraint = SymVal


def eq_constraint(a: SymVal, b: SymVal) -> Constraint:
    return BinOp("=", _as_expr(a), _as_expr(b))


def neq_constraint(a: SymVal, b: SymVal) -> Constraint:
    return UnOp("!", BinOp("=", _as_expr(a), _as_expr(b)))


def constraint_holds(c: Constraint, assignment: dict[str, int], width: int) -> bool:
    return sym_concretize(c, assignment, width) != 0


# ---------------------------------------------------------------------------
# Assignment enumeration (the exhaustive small-domain "solver" core)
# ---------------------------------------------------------------------------

MAX_SPLIT_VARS = 12


def assignments(names: Iterable[str], domain: range):
    """All assignments of domain values to the given symbol names."""
    names = sorted(names)
    if len(names) > MAX_SPLIT_VARS:
        raise SplitTooWide(
            f"{len(names)} symbols exceed the exhaustive-enumeration limit; "
            "use concrete mode"
        )
    for values in itertools.product(domain, repeat=len(names)):
        yield dict(zip(names, values))


def _relevant_constraints(
    target_vars: set[str], constraints: tuple[Constraint, ...]
) -> tuple[set[str], list[Constraint]]:
    """Transitively close target_vars over constraints sharing symbols."""
    vars_ = set(target_vars)
    pending = [(c, sym_vars(c)) for c in constraints]
    changed = True
    picked: list[Constraint] = []
    while changed:
        changed = False
        rest = []
        for c, cv in pending:
            if cv & vars_:
                picked.append(c)
                if not cv <= vars_:
                    vars_ |= cv
                    changed = True
            else:
                rest.append((c, cv))
        pending = rest
    return vars_, picked


def feasible_values(
    v: SymVal, constraints: tuple[Constraint, ...], domain: range, width: int
) -> list[int]:
    """Values `v` can take under `constraints`, with symbols over `domain`."""
    if isinstance(v, int):
        return [v]
    vars_, picked = _relevant_constraints(sym_vars(v), constraints)
    out: set[int] = set()
    for alpha in assignments(vars_, domain):
        if all(constraint_holds(c, alpha, width) for c in picked):
            out.add(sym_concretize(v, alpha, width))
    return sorted(out)


def satisfiable(constraints: tuple[Constraint, ...], domain: range, width: int) -> bool:
    vars_: set[str] = set()
    for c in constraints:
        vars_ |= sym_vars(c)
    for alpha in assignments(vars_, domain):
        if all(constraint_holds(c, alpha, width) for c in constraints):
            return True
    return False


# ---------------------------------------------------------------------------
# Symbolic configurations
# ---------------------------------------------------------------------------

class SymInitStore:
    """Lazily materialized symbolic initial values, shared run-wide.

    Policy-public locations get a symbol shared between self-composed runs
    (same name either side); everything else gets a per-run fresh secret.
    Declared initial values are concrete and live in the configuration
    overlay instead.
    """

    def __init__(self, policy: Policy, run_tag: int = 1):
        self.policy = policy
        self.run_tag = run_tag
        self.values: dict[Location, SymVal] = {}
        self.order: list[Location] = []

    def get(self, loc: Location) -> SymVal:
        if loc not in self.values:
            kind, key = loc
            if self.policy.is_public(loc):
                name = f"p_{kind}_{key}"
            else:
                name = f"s{self.run_tag}_{kind}_{key}"
            self.values[loc] = Sym(name)
            self.order.append(loc)
        return self.values[loc]


class SymConfiguration:
    """Registers and memory over symbolic values; pc is always concrete."""

    __slots__ = ("registers", "memory", "width", "init")

    def __init__(
        self,
        registers: dict[str, SymVal] | None = None,
        memory: dict[int, SymVal] | None = None,
        width: int = DEFAULT_WIDTH,
        init: SymInitStore | None = None,
    ):
        self.registers = dict(registers or {})
        self.memory = dict(memory or {})
        self.width = width
        self.init = init if init is not None else SymInitStore(Policy())
        self.registers.setdefault(PC, 0)
        self.registers.setdefault(SP, _wrap(DEFAULT_SP, width))

    @staticmethod
    def initial(
        program: Program,
        policy: Policy | None = None,
        width: int = DEFAULT_WIDTH,
        run_tag: int = 1,
    ) -> "SymConfiguration":
        policy = policy or Policy()
        regs: dict[str, SymVal] = dict(policy.init_registers)
        regs.setdefault(PC, program.entry)
        return SymConfiguration(
            regs, dict(policy.init_memory), width, SymInitStore(policy, run_tag)
        )

    @property
    def pc(self) -> int:
        v = self.registers[PC]
        if not isinstance(v, int):
            raise SymbolicError("pc must stay concrete")
        return v

    def copy(self) -> "SymConfiguration":
        c = SymConfiguration.__new__(SymConfiguration)
        c.registers = dict(self.registers)
        c.memory = dict(self.memory)
        c.width = self.width
        c.init = self.init
        return c

    def read_reg(self, name: str) -> SymVal:
        if name in self.registers:
            return self.registers[name]
        return self.init.get(("reg", name))

    def read_mem(self, addr: int) -> SymVal:
        if addr in self.memory:
            return self.memory[addr]
        return self.init.get(("mem", addr))

    def eval(self, e: Expr) -> SymVal:
        return sym_eval(e, self.read_reg, self.width)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SymConfiguration):
            return NotImplemented
        return (
            self.registers == other.registers
            and self.memory == other.memory
            and self.width == other.width
        )

    def __hash__(self):
        raise TypeError("SymConfiguration is not hashable")


# ---------------------------------------------------------------------------
# Concretization of symbolic traces
# ---------------------------------------------------------------------------

def trace_vars(trace) -> set[str]:
    from .nonspec import OCall, OPathCond, ORollback, OSkip, OStart

    out: set[str] = set()
    for obs in trace:
        if isinstance(obs, (OStart, ORollback, OSkip, OCall)):
            continue
        if isinstance(obs, OPathCond):
            out |= sym_vars(obs.constraint)
        else:
            out |= sym_vars(_payload(obs))
    return out


def _payload(obs) -> SymVal:
    from .nonspec import OLoad, OPc, ORet, OStore

    if isinstance(obs, (OLoad, OStore)):
        return obs.addr
    if isinstance(obs, OPc):
        return obs.target
    if isinstance(obs, ORet):
        return obs.addr
    raise SymbolicError(f"observation has no value payload: {obs!r}")


def instantiate_trace(trace, assignment: dict[str, int], width: int):
    """Concrete counterpart of a symbolic trace under an assignment.

    Path-condition entries must hold under the assignment (returns None
    otherwise); they are dropped from the result.
    """
    from .nonspec import OLoad, OPathCond, OPc, ORet, OStore

    out = []
    for obs in trace:
        if isinstance(obs, OPathCond):
            if not constraint_holds(obs.constraint, assignment, width):
                return None
            continue
        if isinstance(obs, OLoad):
            out.append(OLoad(sym_concretize(obs.addr, assignment, width)))
        elif isinstance(obs, OStore):
            out.append(OStore(sym_concretize(obs.addr, assignment, width)))
        elif isinstance(obs, OPc):
            out.append(OPc(sym_concretize(obs.target, assignment, width)))
        elif isinstance(obs, ORet):
            out.append(ORet(sym_concretize(obs.addr, assignment, width)))
        else:
            out.append(obs)
    return out


def concretize(trace, domain: range, width: int = DEFAULT_WIDTH) -> set[tuple]:
    """All concrete traces consistent with the trace's path condition."""
    out: set[tuple] = set()
    for alpha in assignments(trace_vars(trace), domain):
        inst = instantiate_trace(trace, alpha, width)
        if inst is not None:
            out.add(tuple(inst))
    return out


def concretize_behavior(traces, domain: range, width: int = DEFAULT_WIDTH) -> set[tuple]:
    """Union of concretizations over a set of symbolic traces."""
    out: set[tuple] = set()
    for t in traces:
        out |= concretize(t, domain, width)
    return out


def sym_ns_step(p: Program, cfg: SymConfiguration, constraints: tuple = (),
                domain_bits: int = 2, max_split: int = 64):
    """One symbolic non-speculative step.

    Returns a list of (successor configuration, observations) branches; a
    symbolic branch guard yields two of them carrying path conditions, and
    symbolic addresses are case-split over the enumeration domain.  Terminal
    outcomes (program exit, stuck) come back as a nonspec.Step.
    """
    from .specsem import SymbolicExec

    mode = SymbolicExec(range(1 << domain_bits), max_split)
    out = mode.plain_step(p, cfg, constraints)
    if isinstance(out, list):
        return [(br.cfg, br.obs) for br in out]
    return out
