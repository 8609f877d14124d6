"""Speculative constant-time checking for a small out-of-order machine."""
from .checker import (
    CheckReport, DivergentTraces, IllFormed, LeakReport, Secure, Violation,
    check_program, check_sct_pair, low_equiv_counterpart, low_equivalent, scan_leaks,
)
from .corpus import CorpusCase, CorpusIntegrityError, get_case, load_corpus
from .isa import Label, LabeledValue, Program, parse_program, pub, sec, serialize_program
from .machine import (
    FETCH, RETIRE, Configuration, Execute, ExecuteAddr, ExecuteForwardGuess, ExecuteValue,
    FetchGuess, FetchTarget, IllFormedSchedule, MachineParams, NoRuleApplies, RunResult,
    enabled_directives, equivalent, initial_config, run, run_sequential, sequential_schedule,
    step,
)
from .schedules import (
    GenOptions, format_schedule, gen_tool_runs, gen_tool_schedules, parse_schedule,
    path_of, strip_misspeculation,
)

__version__ = "0.1.0"
