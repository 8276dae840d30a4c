"""muspec: speculative-execution semantics and leak checking for muASM.

The package is organized around six layers:

  lang      syntax, programs, values, policies
  nonspec   trace model, concrete non-speculative semantics, projection
  symbolic  symbolic values/configurations and concretization
  specsem   the B/S/R speculative semantics (AM, oracle, symbolic)
  compose   composition framework with the Z metaparameter
  sni       speculative non-interference checking with witnesses
  cli       batch front-end and the benchmark corpus
"""

from .lang import (
    Configuration, Policy, Program, eval_expr, low_equivalent, parse_program,
    print_program,
)
from .nonspec import ns_behavior, ns_project, ns_step, trace_to_json
from .specsem import SpecParams, am_run, oracle_run, sym_am_run
from .compose import (
    CombinedDescriptor, combined_run, combined_sym_run, parse_selector,
    project_trace, run_selector,
)
from .sni import (
    Verdict, check_sni_concrete, check_sni_symbolic, replay_witness,
)

__all__ = [
    "Configuration", "Policy", "Program", "eval_expr", "low_equivalent",
    "parse_program", "print_program", "ns_behavior", "ns_project", "ns_step",
    "trace_to_json", "SpecParams", "am_run", "oracle_run", "sym_am_run",
    "CombinedDescriptor", "combined_run", "combined_sym_run", "parse_selector",
    "project_trace", "run_selector", "Verdict", "check_sni_concrete",
    "check_sni_symbolic", "replay_witness",
]

__version__ = "0.1.0"
