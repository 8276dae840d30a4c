"""Batch command-line front-end.

Three subcommands:

  run     execute one program under a chosen semantics, print the trace and
          its non-speculative projection
  check   decide speculative non-interference; exit 0 secure, 1 insecure
          (witness serialized), 3 inconclusive
  corpus  run a bundled benchmark suite against its expectation manifest

Parse and policy errors exit with status 2.  Reports are deterministic:
identical inputs produce byte-identical JSON.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .lang import Configuration, ParseError, Policy, parse_program
from .nonspec import TERMINATED, FUEL_EXHAUSTED, ns_project, trace_to_json
from .compose import SELECTORS, parse_selector, run_selector, run_selector_symbolic
from .corpus import SUITES, corpus_config, load_corpus
from .sni import (
    INCONCLUSIVE, INSECURE, SECURE, check_sni_concrete, check_sni_symbolic,
)
from .symbolic import SymConfiguration


@dataclass
class RunConfig:
    """Knobs shared by all subcommands."""
    sem: str = "b"
    window: int = 16
    rsb_size: int = 16
    width: int = 64
    domain_bits: int = 2
    fuel: int = 20_000
    mode: str = "concrete"
    policy_path: str | None = None
    as_json: bool = False

    def validate(self) -> None:
        if self.window < 0 or self.rsb_size < 0:
            raise ValueError("window and rsb-size must be nonnegative")
        if not 0 <= self.domain_bits <= self.width:
            raise ValueError("domain bits must lie within the value width")

    def echo(self) -> dict:
        return {
            "sem": self.sem, "window": self.window, "rsb_size": self.rsb_size,
            "width": self.width, "domain_bits": self.domain_bits,
            "fuel": self.fuel, "mode": self.mode,
        }


def _add_common(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--sem", default="b", choices=SELECTORS,
                    help="semantics selector")
    ap.add_argument("--window", type=int, default=16, metavar="N",
                    help="speculation window")
    ap.add_argument("--rsb-size", type=int, default=16, metavar="N",
                    help="return stack buffer capacity")
    ap.add_argument("--bits", type=int, default=64, metavar="W",
                    help="value bit-width")
    ap.add_argument("--domain-bits", type=int, default=2, metavar="K",
                    help="enumeration domain bit-width")
    ap.add_argument("--fuel", type=int, default=20_000, metavar="N",
                    help="step budget")
    ap.add_argument("--mode", default="concrete",
                    choices=("concrete", "symbolic"))
    ap.add_argument("--policy", default=None, metavar="FILE",
                    help="policy JSON file")
    ap.add_argument("--json", action="store_true", help="machine-readable output")


def _config_from(args) -> RunConfig:
    cfg = RunConfig(
        sem=args.sem, window=args.window, rsb_size=args.rsb_size,
        width=args.bits, domain_bits=args.domain_bits, fuel=args.fuel,
        mode=args.mode, policy_path=args.policy, as_json=args.json)
    cfg.validate()
    return cfg


def _load_inputs(path: str, cfg: RunConfig):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            program = parse_program(fh.read())
    except FileNotFoundError:
        raise _CliError(f"cannot read {path}")
    except ParseError as exc:
        lines = "\n".join(f"{path}:{ln}: {msg}" for ln, msg in exc.errors)
        raise _CliError(lines)
    policy = Policy()
    if cfg.policy_path:
        try:
            policy = Policy.load(cfg.policy_path)
        except (FileNotFoundError, KeyError, ValueError) as exc:
            raise _CliError(f"bad policy file {cfg.policy_path}: {exc}")
    return program, policy


class _CliError(Exception):
    pass


def _emit(payload: dict, as_json: bool, human: str) -> None:
    if as_json:
        print(json.dumps(payload, separators=(",", ":")))
    else:
        print(human)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _config_from(args)
    program, policy = _load_inputs(args.program, cfg)
    if cfg.mode == "concrete":
        config = Configuration.initial(program, policy, cfg.width)
        trace, status = run_selector(
            cfg.sem, program, config, cfg.window, cfg.fuel, cfg.rsb_size,
            on_uninit=lambda loc: 0)
        payload = {
            "status": status,
            "trace": trace_to_json(trace),
            "projection": trace_to_json(ns_project(trace)),
            "config": cfg.echo(),
        }
        human = "\n".join(
            [f"status: {status}", "trace:"]
            + [f"  {json.dumps(o)}" for o in payload["trace"]]
            + ["projection:"]
            + [f"  {json.dumps(o)}" for o in payload["projection"]])
    else:
        sconfig = SymConfiguration.initial(program, policy, cfg.width)
        paths = run_selector_symbolic(
            cfg.sem, program, sconfig, cfg.window, cfg.fuel, cfg.rsb_size,
            cfg.domain_bits)
        payload = {
            "paths": [
                {"status": status, "trace": trace_to_json(trace),
                 "projection": trace_to_json(ns_project(trace))}
                for trace, status in paths
            ],
            "config": cfg.echo(),
        }
        human = "\n".join(
            line
            for i, entry in enumerate(payload["paths"])
            for line in ([f"path {i}: {entry['status']}"]
                         + [f"  {json.dumps(o)}" for o in entry["trace"]]))
    _emit(payload, cfg.as_json, human)
    if cfg.mode == "concrete" and status == FUEL_EXHAUSTED:
        return 3
    return 0


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

_EXIT_BY_VERDICT = {SECURE: 0, INSECURE: 1, INCONCLUSIVE: 3}


def _check_one(program, policy, cfg: RunConfig):
    kwargs = dict(domain_bits=cfg.domain_bits, fuel=cfg.fuel, width=cfg.width,
                  window=cfg.window, rsb_size=cfg.rsb_size)
    if cfg.mode == "concrete":
        return check_sni_concrete(program, policy, cfg.sem, **kwargs)
    return check_sni_symbolic(program, policy, cfg.sem, **kwargs)


def cmd_check(args) -> int:
    cfg = _config_from(args)
    program, policy = _load_inputs(args.program, cfg)
    verdict = _check_one(program, policy, cfg)
    payload = verdict.to_json()
    payload["config"] = cfg.echo()
    human = f"{args.program}: {verdict.status} under {cfg.sem}"
    if verdict.witness is not None:
        human += (f"\n  first differing observation at index "
                  f"{verdict.witness.diff_index}")
    if verdict.diagnosis:
        human += f"\n  {verdict.diagnosis}"
    _emit(payload, cfg.as_json, human)
    return _EXIT_BY_VERDICT[verdict.status]


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

def _corpus_cell(item):
    name, source, policy_json, sem, expected, cfg_kw = item
    program = parse_program(source)
    policy = Policy.from_json(policy_json)
    verdict = check_sni_concrete(program, policy, sem, **cfg_kw)
    return {"name": name, "sem": sem, "verdict": verdict.status,
            "expected": expected, "match": verdict.status == expected}


def cmd_corpus(args) -> int:
    defaults = corpus_config()
    cfg_kw = dict(
        domain_bits=args.domain_bits if args.domain_bits is not None
        else defaults["domain_bits"],
        fuel=args.fuel if args.fuel is not None else defaults["fuel"],
        width=defaults["width"],
        window=args.window if args.window is not None else defaults["window"],
        rsb_size=args.rsb_size if args.rsb_size is not None
        else defaults["rsb_size"])
    try:
        cases = load_corpus(args.suite)
    except FileNotFoundError as exc:
        print(f"error: missing corpus file: {exc}", file=sys.stderr)
        return 2
    items = []
    for case in cases:
        for sem in sorted(case.expect):
            if args.sem and sem != args.sem:
                continue
            items.append((case.name, case.source, case.policy.to_json(),
                          sem, case.expect[sem], cfg_kw))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            cells = list(pool.map(_corpus_cell, items))
    else:
        cells = [_corpus_cell(item) for item in items]

    ok = all(c["match"] for c in cells)
    if args.json:
        print(json.dumps({"suite": args.suite, "ok": ok, "cells": cells},
                         separators=(",", ":")))
    else:
        width = max(len(c["name"]) for c in cells) if cells else 4
        by_name: dict[str, list] = {}
        for c in cells:
            by_name.setdefault(c["name"], []).append(c)
        for name in sorted(by_name):
            row = by_name[name]
            marks = "  ".join(
                f"{c['sem']}:{'✓' if c['verdict'] == 'secure' else '✗'}"
                + ("" if c["match"] else "!")
                for c in sorted(row, key=lambda c: c["sem"]))
            print(f"{name:<{width}}  {marks}")
        print(f"{'all cells match' if ok else 'MISMATCHES found'} "
              f"({len(cells)} cells)")
    return 0 if ok else 1


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="muspec",
        description="Speculative-execution semantics and SNI checking for muASM")
    sub = ap.add_subparsers(dest="command", required=True)

    ap_run = sub.add_parser("run", help="execute a program and print its trace")
    ap_run.add_argument("program")
    _add_common(ap_run)
    ap_run.set_defaults(func=cmd_run)

    ap_check = sub.add_parser("check", help="check speculative non-interference")
    ap_check.add_argument("program")
    _add_common(ap_check)
    ap_check.set_defaults(func=cmd_check)

    ap_corpus = sub.add_parser("corpus", help="run a bundled benchmark suite")
    ap_corpus.add_argument("suite", choices=SUITES + ("all",))
    ap_corpus.add_argument("--sem", default=None, choices=SELECTORS,
                           help="restrict to one semantics")
    ap_corpus.add_argument("--window", type=int, default=None)
    ap_corpus.add_argument("--rsb-size", type=int, default=None)
    ap_corpus.add_argument("--domain-bits", type=int, default=None)
    ap_corpus.add_argument("--fuel", type=int, default=None)
    ap_corpus.add_argument("--jobs", type=int, default=1)
    ap_corpus.add_argument("--json", action="store_true")
    ap_corpus.set_defaults(func=cmd_corpus)

    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
