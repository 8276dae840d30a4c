"""muASM core: abstract syntax, textual format, machine values and policies.

muASM is a minimal assembly language with ten instruction forms:

    skip                no-op
    x <- e              register assignment
    load x, e           x := mem[e]
    store x, e          mem[e] := x
    jmp e               computed jump
    beqz x, L           branch to L when x == 0, fall through otherwise
    cmov x, e, e'       x := e when e' != 0, no-op otherwise
    spbarr              speculation barrier
    call F              push return address, jump to function F
    ret                 pop return address via the stack pointer

Programs are finite maps from instruction addresses (naturals, assigned
sequentially from 0 in textual order) to instructions, plus a table mapping
label/function names to entry addresses.  `Name:` on its own line binds the
name to the address of the next instruction.  `#` starts a line comment.

Values are W-bit integers (W configurable, default 64); all arithmetic wraps
modulo 2^W.  The designated registers `pc` and `sp` are reserved: they may be
read in expressions and `sp` may be assigned, but `pc` is never a destination.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Union

PC = "pc"
SP = "sp"

DEFAULT_WIDTH = 64


class LangError(Exception):
    """Base class for language-level errors."""


class UndefinedRegister(LangError):
    def __init__(self, name: str):
        super().__init__(f"undefined register {name!r}")
        self.name = name


class ParseError(LangError):
    """Aggregates every parse/resolution error with its 1-based line number."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = list(errors)
        msg = "; ".join(f"line {ln}: {m}" for ln, m in self.errors)
        super().__init__(msg)


class PrintError(LangError):
    pass


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lit:
    value: int


@dataclass(frozen=True)
class Reg:
    name: str


@dataclass(frozen=True)
class UnOp:
    op: str
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    lhs: "Expr"
    rhs: "Expr"


Expr = Union[Lit, Reg, UnOp, BinOp]

UNARY_OPS = ("-", "!")
# Binary operators; comparisons yield 0/1, everything wraps modulo 2^W.
BINARY_OPS = ("+", "-", "*", "&", "|", "^", "<<", ">>", "<", "=")


def _wrap(v: int, width: int) -> int:
    return v & ((1 << width) - 1)


def apply_unop(op: str, v: int, width: int) -> int:
    if op == "-":
        return _wrap(-v, width)
    if op == "!":
        return 1 if v == 0 else 0
    raise LangError(f"unknown unary operator {op!r}")


def apply_binop(op: str, a: int, b: int, width: int) -> int:
    if op == "+":
        return _wrap(a + b, width)
    if op == "-":
        return _wrap(a - b, width)
    if op == "*":
        return _wrap(a * b, width)
    if op == "&":
        return a & b
    if op == "|":
        return a | b
    if op == "^":
        return a ^ b
    if op == "<<":
        return _wrap(a << b, width) if b < width else 0
    if op == ">>":
        return a >> b if b < width else 0
    if op == "<":
        return 1 if a < b else 0
    if op == "=":
        return 1 if a == b else 0
    raise LangError(f"unknown binary operator {op!r}")


def eval_expr(e: Expr, regs: Mapping[str, int], width: int = DEFAULT_WIDTH) -> int:
    """Strictly evaluate `e` under register file `regs`, wrapping modulo 2^W.

    Raises UndefinedRegister when `e` mentions a register absent from `regs`.
    Mapping-like register files may raise their own lookup exceptions instead
    (the interpreter uses that hook to materialize secret initial values).
    """
    if isinstance(e, Lit):
        return _wrap(e.value, width)
    if isinstance(e, Reg):
        try:
            return _wrap(regs[e.name], width)
        except KeyError:
            raise UndefinedRegister(e.name) from None
    if isinstance(e, UnOp):
        return apply_unop(e.op, eval_expr(e.arg, regs, width), width)
    if isinstance(e, BinOp):
        return apply_binop(
            e.op, eval_expr(e.lhs, regs, width), eval_expr(e.rhs, regs, width), width
        )
    raise LangError(f"not an expression: {e!r}")


def expr_registers(e: Expr) -> set[str]:
    """All register names mentioned in `e`."""
    if isinstance(e, Reg):
        return {e.name}
    if isinstance(e, UnOp):
        return expr_registers(e.arg)
    if isinstance(e, BinOp):
        return expr_registers(e.lhs) | expr_registers(e.rhs)
    return set()


# ---------------------------------------------------------------------------
# Instructions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Skip:
    pass


@dataclass(frozen=True)
class Assign:
    reg: str
    expr: Expr


@dataclass(frozen=True)
class Load:
    reg: str
    addr: Expr


@dataclass(frozen=True)
class Store:
    reg: str
    addr: Expr


@dataclass(frozen=True)
class Jmp:
    target: Expr


@dataclass(frozen=True)
class Beqz:
    reg: str
    target: int  # resolved label address


@dataclass(frozen=True)
class Cmov:
    reg: str
    expr: Expr
    cond: Expr


@dataclass(frozen=True)
class Spbarr:
    pass


@dataclass(frozen=True)
class Call:
    func: str


@dataclass(frozen=True)
class Ret:
    pass


Instruction = Union[Skip, Assign, Load, Store, Jmp, Beqz, Cmov, Spbarr, Call, Ret]

_ICLASS = {
    Skip: "skip", Assign: "assign", Load: "load", Store: "store", Jmp: "jmp",
    Beqz: "beqz", Cmov: "cmov", Spbarr: "spbarr", Call: "call", Ret: "ret",
}


def iclass(instr: Instruction) -> str:
    """Instruction class name; used for speculation-source ownership."""
    return _ICLASS[type(instr)]


# ---------------------------------------------------------------------------
# Programs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Program:
    """Finite map address -> instruction plus a name -> entry-address table.

    Looking up an unmapped address yields None; the semantics treats that as
    termination.  Treated as immutable after construction.
    """

    code: dict[int, Instruction]
    functions: dict[str, int] = field(default_factory=dict)

    def instruction(self, addr: int) -> Instruction | None:
        return self.code.get(addr)

    def __len__(self) -> int:
        return len(self.code)

    @property
    def entry(self) -> int:
        """Initial pc: function `Main` when defined, address 0 otherwise."""
        return self.functions.get("Main", 0)

    def instruction_classes(self) -> set[str]:
        return {iclass(i) for i in self.code.values()}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_LABEL_RE = re.compile(rf"^({_IDENT})\s*:\s*$")
_TOKEN_RE = re.compile(
    r"\s*(?:(0x[0-9a-fA-F]+|\d+)|({ident})|(<<|>>|<-|[-+*&|^<=!()]))".format(ident=_IDENT)
)

# Precedence table for binary operators, lowest binds weakest.
_BIN_PREC = {"|": 1, "^": 2, "&": 3, "=": 4, "<": 4, "<<": 5, ">>": 5,
             "+": 6, "-": 6, "*": 7}


class _ExprParser:
    def __init__(self, text: str):
        self.tokens = self._tokenize(text)
        self.pos = 0

    @staticmethod
    def _tokenize(text: str) -> list[str]:
        tokens = []
        i = 0
        while i < len(text):
            m = _TOKEN_RE.match(text, i)
            if not m:
                if text[i:].strip():
                    raise LangError(f"bad token near {text[i:].strip()!r}")
                break
            tokens.append(m.group(1) or m.group(2) or m.group(3))
            i = m.end()
        return tokens

    def _peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _next(self) -> str:
        tok = self._peek()
        if tok is None:
            raise LangError("unexpected end of expression")
        self.pos += 1
        return tok

    def parse(self) -> Expr:
        e = self._parse_binary(1)
        if self._peek() is not None:
            raise LangError(f"trailing tokens after expression: {self._peek()!r}")
        return e

    def _parse_binary(self, min_prec: int) -> Expr:
        lhs = self._parse_unary()
        while True:
            op = self._peek()
            if op not in _BIN_PREC or _BIN_PREC[op] < min_prec:
                return lhs
            self._next()
            rhs = self._parse_binary(_BIN_PREC[op] + 1)
            lhs = BinOp(op, lhs, rhs)

    def _parse_unary(self) -> Expr:
        tok = self._peek()
        if tok in ("-", "!"):
            self._next()
            return UnOp(tok, self._parse_unary())
        return self._parse_atom()

    def _parse_atom(self) -> Expr:
        tok = self._next()
        if tok == "(":
            e = self._parse_binary(1)
            if self._next() != ")":
                raise LangError("expected ')'")
            return e
        if tok.startswith("0x"):
            return Lit(int(tok, 16))
        if tok.isdigit():
            return Lit(int(tok))
        if re.fullmatch(_IDENT, tok):
            return Reg(tok)
        raise LangError(f"unexpected token {tok!r}")


def parse_expr(text: str) -> Expr:
    return _ExprParser(text).parse()


def _split_args(text: str, n: int, what: str) -> list[str]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != n or any(not p for p in parts):
        raise LangError(f"{what} expects {n} comma-separated operand(s)")
    return parts


def _parse_reg(text: str, *, dest: bool = False) -> str:
    if not re.fullmatch(_IDENT, text):
        raise LangError(f"expected a register name, got {text!r}")
    if dest and text == PC:
        raise LangError("pc is not a valid destination register")
    return text


def parse_program(text: str) -> Program:
    """Parse muASM source into a Program.

    Addresses are assigned sequentially from 0 in textual order; `Name:`
    binds to the next instruction's address.  All syntax, duplicate-label and
    unresolved-target errors are reported together with line numbers.
    """
    errors: list[tuple[int, str]] = []
    code: dict[int, Instruction] = {}
    names: dict[str, int] = {}
    # (addr, line, reg, target-name) for beqz targets resolved after the scan
    pending_branches: list[tuple[int, int, str, str]] = []
    pending_calls: list[tuple[int, str]] = []
    pending_labels: list[tuple[str, int]] = []
    addr = 0

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LABEL_RE.match(line)
        if m:
            name = m.group(1)
            if name in names or any(n == name for n, _ in pending_labels):
                errors.append((lineno, f"duplicate label {name!r}"))
            else:
                pending_labels.append((name, lineno))
            continue
        try:
            instr = _parse_instruction(line, addr, lineno, pending_branches, pending_calls)
        except LangError as exc:
            errors.append((lineno, str(exc)))
            continue
        for name, _ in pending_labels:
            names[name] = addr
        pending_labels.clear()
        code[addr] = instr
        addr += 1

    for name, lineno in pending_labels:
        errors.append((lineno, f"label {name!r} does not precede an instruction"))

    for baddr, lineno, reg, target in pending_branches:
        if target not in names:
            errors.append((lineno, f"unresolved label {target!r}"))
        else:
            code[baddr] = Beqz(reg, names[target])
    for lineno, func in pending_calls:
        if func not in names:
            errors.append((lineno, f"unresolved function {func!r}"))

    if errors:
        raise ParseError(errors)
    return Program(code=code, functions=names)


def _parse_instruction(
    line: str,
    addr: int,
    lineno: int,
    pending_branches: list[tuple[int, int, str, str]],
    pending_calls: list[tuple[int, str]],
) -> Instruction:
    if line == "skip":
        return Skip()
    if line == "spbarr":
        return Spbarr()
    if line == "ret":
        return Ret()
    if "<-" in line:
        dest, expr = line.split("<-", 1)
        return Assign(_parse_reg(dest.strip(), dest=True), parse_expr(expr))
    head, _, rest = line.partition(" ")
    rest = rest.strip()
    if head == "load":
        reg, e = _split_args(rest, 2, "load")
        return Load(_parse_reg(reg, dest=True), parse_expr(e))
    if head == "store":
        reg, e = _split_args(rest, 2, "store")
        return Store(_parse_reg(reg), parse_expr(e))
    if head == "jmp":
        if not rest:
            raise LangError("jmp expects an expression")
        return Jmp(parse_expr(rest))
    if head == "beqz":
        reg, target = _split_args(rest, 2, "beqz")
        reg = _parse_reg(reg)
        if re.fullmatch(r"\d+|0x[0-9a-fA-F]+", target):
            return Beqz(reg, int(target, 0))
        if not re.fullmatch(_IDENT, target):
            raise LangError(f"bad branch target {target!r}")
        pending_branches.append((addr, lineno, reg, target))
        return Beqz(reg, -1)  # patched after label resolution
    if head == "cmov":
        reg, e, cond = _split_args(rest, 3, "cmov")
        return Cmov(_parse_reg(reg, dest=True), parse_expr(e), parse_expr(cond))
    if head == "call":
        if not re.fullmatch(_IDENT, rest):
            raise LangError(f"call expects a function name, got {rest!r}")
        pending_calls.append((lineno, rest))
        return Call(rest)
    raise LangError(f"unknown instruction {line!r}")


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

def format_expr(e: Expr, _parent_prec: int = 0) -> str:
    if isinstance(e, Lit):
        return str(e.value)
    if isinstance(e, Reg):
        return e.name
    if isinstance(e, UnOp):
        return f"{e.op}{format_expr(e.arg, 99)}"
    if isinstance(e, BinOp):
        prec = _BIN_PREC[e.op]
        inner = f"{format_expr(e.lhs, prec)} {e.op} {format_expr(e.rhs, prec + 1)}"
        return f"({inner})" if prec < _parent_prec else inner
    raise LangError(f"not an expression: {e!r}")


def format_instruction(instr: Instruction, labels: Mapping[int, str] | None = None) -> str:
    if isinstance(instr, Skip):
        return "skip"
    if isinstance(instr, Spbarr):
        return "spbarr"
    if isinstance(instr, Ret):
        return "ret"
    if isinstance(instr, Assign):
        return f"{instr.reg} <- {format_expr(instr.expr)}"
    if isinstance(instr, Load):
        return f"load {instr.reg}, {format_expr(instr.addr)}"
    if isinstance(instr, Store):
        return f"store {instr.reg}, {format_expr(instr.addr)}"
    if isinstance(instr, Jmp):
        return f"jmp {format_expr(instr.target)}"
    if isinstance(instr, Beqz):
        target = labels.get(instr.target) if labels else None
        return f"beqz {instr.reg}, {target if target else instr.target}"
    if isinstance(instr, Cmov):
        return f"cmov {instr.reg}, {format_expr(instr.expr)}, {format_expr(instr.cond)}"
    if isinstance(instr, Call):
        return f"call {instr.func}"
    raise LangError(f"not an instruction: {instr!r}")


def print_program(p: Program) -> str:
    """Render a Program back to muASM source.

    Requires contiguous addresses 0..n-1 (the parser only produces those).
    Branch targets are printed through a bound label when one exists, and
    numerically otherwise.
    """
    if set(p.code) != set(range(len(p.code))):
        raise PrintError("program addresses must be contiguous from 0")
    by_addr: dict[int, list[str]] = {}
    first_label: dict[int, str] = {}
    for name in sorted(p.functions):
        entry = p.functions[name]
        by_addr.setdefault(entry, []).append(name)
        first_label.setdefault(entry, name)
    lines: list[str] = []
    for addr in range(len(p.code)):
        for name in by_addr.get(addr, ()):
            lines.append(f"{name}:")
        lines.append(f"  {format_instruction(p.code[addr], first_label)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Policies and configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Policy:
    """Which locations an attacker-visible observer may depend on.

    Everything not listed is secret; in particular, memory without a declared
    initial value holds a fresh secret.  `public_memory` ranges are half-open
    [lo, hi).
    """

    public_registers: frozenset[str] = frozenset()
    public_memory: tuple[tuple[int, int], ...] = ()
    init_registers: dict[str, int] = field(default_factory=dict)
    init_memory: dict[int, int] = field(default_factory=dict)

    def is_public_register(self, name: str) -> bool:
        return name in self.public_registers

    def is_public_address(self, addr: int) -> bool:
        return any(lo <= addr < hi for lo, hi in self.public_memory)

    def is_public(self, loc: "Location") -> bool:
        kind, key = loc
        if kind == "reg":
            return self.is_public_register(key)
        return self.is_public_address(key)

    @staticmethod
    def from_json(data: dict) -> "Policy":
        return Policy(
            public_registers=frozenset(data.get("public_registers", ())),
            public_memory=tuple(
                (int(r["lo"]), int(r["hi"])) for r in data.get("public_memory", ())
            ),
            init_registers={k: int(v) for k, v in data.get("init_registers", {}).items()},
            init_memory={int(e["addr"]): int(e["value"]) for e in data.get("init_memory", ())},
        )

    def to_json(self) -> dict:
        return {
            "public_registers": sorted(self.public_registers),
            "public_memory": [{"lo": lo, "hi": hi} for lo, hi in self.public_memory],
            "init_memory": [
                {"addr": a, "value": v} for a, v in sorted(self.init_memory.items())
            ],
            "init_registers": dict(sorted(self.init_registers.items())),
        }

    @staticmethod
    def load(path) -> "Policy":
        with open(path, "r", encoding="utf-8") as fh:
            return Policy.from_json(json.load(fh))


# A location is ("reg", name) or ("mem", addr).
Location = tuple[str, object]


class UninitRead(Exception):
    """Raised when execution reads a location with no value yet.

    The run driver materializes a policy-determined value (a fresh secret
    drawn from the enumeration domain, or a fresh symbol in symbolic mode)
    and retries; materialized values are shared run-wide via InitStore so a
    location is drawn at most once per run.
    """

    def __init__(self, location: Location):
        super().__init__(f"uninitialized read of {location}")
        self.location = location


class InitStore:
    """Initial values materialized lazily during one run (append-only)."""

    __slots__ = ("values", "order")

    def __init__(self):
        self.values: dict[Location, int] = {}
        self.order: list[Location] = []

    def put(self, loc: Location, value: int) -> None:
        if loc not in self.values:
            self.order.append(loc)
        self.values[loc] = value


DEFAULT_SP = 1 << 20


class Configuration:
    """Register file plus memory; pc and sp are always defined.

    Registers and memory are overlays on top of a run-shared InitStore:
    a read missing from both raises UninitRead.  Step functions never mutate
    a configuration they received; they work on copies.
    """

    __slots__ = ("registers", "memory", "width", "init")

    def __init__(
        self,
        registers: dict[str, int] | None = None,
        memory: dict[int, int] | None = None,
        width: int = DEFAULT_WIDTH,
        init: InitStore | None = None,
    ):
        self.registers = dict(registers or {})
        self.memory = dict(memory or {})
        self.width = width
        self.init = init if init is not None else InitStore()
        self.registers.setdefault(PC, 0)
        self.registers.setdefault(SP, _wrap(DEFAULT_SP, width))

    @staticmethod
    def initial(program: Program, policy: Policy | None = None,
                width: int = DEFAULT_WIDTH) -> "Configuration":
        policy = policy or Policy()
        regs = dict(policy.init_registers)
        regs.setdefault(PC, program.entry)
        cfg = Configuration(regs, dict(policy.init_memory), width)
        return cfg

    @property
    def pc(self) -> int:
        return self.registers[PC]

    def copy(self) -> "Configuration":
        c = Configuration.__new__(Configuration)
        c.registers = dict(self.registers)
        c.memory = dict(self.memory)
        c.width = self.width
        c.init = self.init
        return c

    def read_reg(self, name: str) -> int:
        if name in self.registers:
            return self.registers[name]
        loc = ("reg", name)
        if loc in self.init.values:
            return self.init.values[loc]
        raise UninitRead(loc)

    def read_mem(self, addr: int) -> int:
        if addr in self.memory:
            return self.memory[addr]
        loc = ("mem", addr)
        if loc in self.init.values:
            return self.init.values[loc]
        raise UninitRead(loc)

    def regs_view(self) -> "_RegView":
        return _RegView(self)

    def value_at(self, loc: Location) -> int | None:
        kind, key = loc
        store = self.registers if kind == "reg" else self.memory
        if key in store:
            return store[key]
        return self.init.values.get(loc)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        return (
            self.registers == other.registers
            and self.memory == other.memory
            and self.width == other.width
        )

    def __hash__(self):
        raise TypeError("Configuration is not hashable")


class _RegView:
    """Mapping facade over Configuration registers for eval_expr."""

    __slots__ = ("cfg",)

    def __init__(self, cfg: Configuration):
        self.cfg = cfg

    def __getitem__(self, name: str) -> int:
        return self.cfg.read_reg(name)


def eval_in(cfg: Configuration, e: Expr) -> int:
    return eval_expr(e, cfg.regs_view(), cfg.width)


def low_equivalent(c1: Configuration, c2: Configuration, policy: Policy) -> bool:
    """True iff the configurations agree on every policy-listed location.

    Memory ranges are compared over the union of addresses either side
    defines (a location neither side has touched is trivially equal).
    """
    for reg in policy.public_registers:
        if c1.value_at(("reg", reg)) != c2.value_at(("reg", reg)):
            return False
    addrs: set[int] = set()
    for cfg in (c1, c2):
        addrs.update(a for a in cfg.memory if policy.is_public_address(a))
        addrs.update(
            key for kind, key in cfg.init.values
            if kind == "mem" and policy.is_public_address(key)
        )
    for addr in addrs:
        if c1.value_at(("mem", addr)) != c2.value_at(("mem", addr)):
            return False
    return True
