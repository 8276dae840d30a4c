"""Bundled benchmark corpus: loader, expectation manifest, patch transforms.

Each corpus entry is a muASM program with its own policy file; expected
verdicts live in the manifest so new cases need no code change.  The fence
transform used by the countermeasure property inserts a speculation barrier
after every speculation-source instruction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .lang import (
    Beqz, Call, Instruction, Policy, Program, Ret, Spbarr, Store, iclass,
)

SUITES = ("comb", "stl", "rsb")


@dataclass(frozen=True)
class CorpusCase:
    name: str
    suite: str
    program: Program
    policy: Policy
    expect: dict[str, str]
    source: str


def _corpus_root() -> Path:
    return Path(resources.files("muspec") / "corpus")


def load_manifest() -> dict:
    with open(_corpus_root() / "manifest.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def load_corpus(suite: str = "all") -> list[CorpusCase]:
    from .lang import parse_program

    manifest = load_manifest()
    suites = SUITES if suite == "all" else (suite,)
    root = _corpus_root()
    cases: list[CorpusCase] = []
    for s in suites:
        for entry in manifest["suites"][s]:
            text = (root / entry["program"]).read_text(encoding="utf-8")
            policy = Policy.load(root / entry["policy"])
            cases.append(CorpusCase(
                name=entry["name"], suite=s, program=parse_program(text),
                policy=policy, expect=dict(entry["expect"]), source=text))
    return cases


def corpus_config() -> dict:
    return dict(load_manifest()["config"])


# ---------------------------------------------------------------------------
# Fence insertion
# ---------------------------------------------------------------------------

SPECULATION_SOURCES = ("beqz", "store", "call", "ret")


def insert_fences(p: Program, after: tuple[str, ...] = SPECULATION_SOURCES) -> Program:
    """A copy of `p` with a spbarr after every speculation-source instruction.

    Addresses shift, so branch targets and function entries are remapped.
    """
    remap: dict[int, int] = {}
    new_addr = 0
    order = sorted(p.code)
    for addr in order:
        remap[addr] = new_addr
        new_addr += 2 if iclass(p.code[addr]) in after else 1
    end = max(order) + 1 if order else 0
    remap[end] = new_addr

    def map_addr(a: int) -> int:
        return remap.get(a, a)

    code: dict[int, Instruction] = {}
    for addr in order:
        instr = p.code[addr]
        if isinstance(instr, Beqz):
            instr = Beqz(instr.reg, map_addr(instr.target))
        code[remap[addr]] = instr
        if iclass(instr) in after:
            code[remap[addr] + 1] = Spbarr()
    functions = {name: map_addr(entry) for name, entry in p.functions.items()}
    return Program(code=code, functions=functions)
