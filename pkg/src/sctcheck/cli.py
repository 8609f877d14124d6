"""Command-line front end: run, check, gen-schedules, corpus."""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .checker import MODES, STRATEGIES, CheckReport, check_program
from .corpus import CorpusIntegrityError, corpus_root, load_corpus
from .isa import ProgramError, parse_program
from .machine import (
    RSB_MODES, IllFormedSchedule, MachineParams, SequentialError, initial_config, run,
    sequential_schedule,
)
from .schedules import GenOptions, ScheduleSyntaxError, format_schedule, gen_tool_runs, parse_schedule
from .trace import format_trace

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ILL_FORMED = 2
EXIT_VIOLATION = 3
EXIT_INCOMPLETE = 4

# speculation bound when checking store forwarding, and when not
BOUND_WITH_HAZARDS = 20
BOUND_WITHOUT_HAZARDS = 250


class CliError(Exception):
    pass


def _color_enabled() -> bool:
    return os.environ.get("SCT_COLOR", "").lower() in ("1", "true", "yes", "always")


def _paint(text: str, code: str) -> str:
    return f"\033[{code}m{text}\033[0m" if _color_enabled() else text


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _positive(text: str) -> int:
    try:
        n = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {n}")
    return n


def _add_machine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("program", help="program file (.asm)")
    p.add_argument("--rsb-mode", choices=RSB_MODES, default="directive",
                   help="return prediction on an empty return stack buffer (default: directive)")
    p.add_argument("--strict-memory", action="store_true",
                   help="treat reads of unmapped addresses as stuck instead of reading 0")


def _add_gen_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bound", type=_positive, default=None,
                   help=f"speculation bound (default: {BOUND_WITH_HAZARDS} with "
                        f"--forwarding-hazards, else {BOUND_WITHOUT_HAZARDS})")
    p.add_argument("--forwarding-hazards", action="store_true",
                   help="also schedule stores with late-resolved addresses")
    p.add_argument("--alias-prediction", action="store_true",
                   help="also schedule guessed store-to-load forwarding")
    p.add_argument("--timing-variants", action="store_true",
                   help="also schedule delayed loads and eagerly resolved mispredictions")
    p.add_argument("--no-fence-stall", dest="fence_stall", action="store_false",
                   help="keep fetching while a fence is in flight")
    p.add_argument("--max-steps", type=_positive, default=500,
                   help="cut each schedule off after this many directives (default: 500)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sctcheck",
                                     description="Speculative constant-time checker for a toy ISA.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="replay a schedule and print its trace as JSON lines")
    _add_machine_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--schedule", metavar="FILE", help="schedule file in text form")
    src.add_argument("--inline", metavar="TEXT", help="schedule given directly, e.g. 'F F X1 R'")
    src.add_argument("--sequential", action="store_true", help="run the sequential schedule")
    p.add_argument("--budget", type=_positive, default=10_000,
                   help="fetch budget for --sequential (default: 10000)")

    p = sub.add_parser("check", help="check a program for speculative constant-time violations")
    _add_machine_flags(p)
    _add_gen_flags(p)
    p.add_argument("--mode", choices=MODES, default="taint", help="checking mode (default: taint)")
    p.add_argument("--strategy", choices=STRATEGIES, default="complement",
                   help="how two-run mode varies secrets (default: complement)")
    p.add_argument("--seed", type=int, default=0, help="seed for --strategy random (default: 0)")
    p.add_argument("--format", choices=("json", "table"), default="table", help="report format")
    p.add_argument("--budget", type=_positive, default=None, help="stop after this many schedules")
    p.add_argument("--max-violations", type=_positive, default=10,
                   help="stop after this many distinct violations (default: 10)")
    p.add_argument("--jobs", type=_positive, default=1, help="worker processes for two-run mode")

    p = sub.add_parser("gen-schedules", help="list the tool schedules of a program")
    _add_machine_flags(p)
    _add_gen_flags(p)
    p.add_argument("--count", action="store_true", help="print only the number of schedules")
    p.add_argument("--limit", type=_positive, default=None, help="print at most this many")

    p = sub.add_parser("corpus", help="replay the bundled corpus against its golden traces")
    p.add_argument("--root", default=None, help="corpus directory (default: the bundled one)")
    p.add_argument("--check", action="store_true", help="also re-check each stored verdict")
    return parser


def _params(args) -> MachineParams:
    return MachineParams(rsb_mode=args.rsb_mode, strict_memory=args.strict_memory)


def _options(args) -> GenOptions:
    bound = args.bound
    if bound is None:
        bound = BOUND_WITH_HAZARDS if args.forwarding_hazards else BOUND_WITHOUT_HAZARDS
    return GenOptions(bound=bound, forwarding_hazards=args.forwarding_hazards,
                      alias_prediction=args.alias_prediction,
                      timing_variants=args.timing_variants, fence_stall=args.fence_stall,
                      max_steps=args.max_steps)


def _program(args):
    return parse_program(_read(args.program))


def cmd_run(args, out) -> int:
    program = _program(args)
    config = initial_config(program, _params(args))
    if args.sequential:
        _, result = sequential_schedule(config, budget=args.budget)
        out.write(format_trace(result.records))
        return EXIT_OK
    text = _read(args.schedule) if args.schedule else args.inline
    schedule = parse_schedule(text)
    try:
        result = run(config, schedule)
    except IllFormedSchedule as exc:
        print(f"ill-formed schedule at position {exc.position}: {exc}", file=sys.stderr)
        return EXIT_ILL_FORMED
    out.write(format_trace(result.records))
    return EXIT_OK


def _table(report: CheckReport) -> str:
    color = {"secure": "32", "violation": "31", "incomplete": "33"}[report.verdict]
    lines = [f"verdict: {_paint(report.verdict, color)}"]
    for key, value in report.stats.items():
        lines.append(f"  {key}: {value}")
    for k, v in enumerate(report.violations, 1):
        d = v.to_json()
        if d["kind"] == "leak":
            o = d["observation"]
            what = f"{o['kind']} {o.get('addr', o.get('target')):#x}_{o['label']}"
            lines.append(f"[{k}] leak at point {d['point']} ({d['rule']}): {what}")
        else:
            lines.append(f"[{k}] divergence ({d['reason']}) at observation {d['index']}, "
                         f"point {d['point']}, buffer index {d['buffer_index']}")
        lines.append(f"    schedule: {d['schedule']}")
    return "\n".join(lines) + "\n"


def cmd_check(args, out) -> int:
    program = _program(args)
    report = check_program(program, _options(args), mode=args.mode, strategy=args.strategy,
                           seed=args.seed, max_violations=args.max_violations,
                           budget=args.budget, jobs=args.jobs, params=_params(args))
    if args.format == "json":
        out.write(json.dumps(report.to_json(), indent=2) + "\n")
    else:
        out.write(_table(report))
    print(f"checked in {report.runtime:.3f}s", file=sys.stderr)
    return {"secure": EXIT_OK, "violation": EXIT_VIOLATION, "incomplete": EXIT_INCOMPLETE}[report.verdict]


def cmd_gen_schedules(args, out) -> int:
    opts = _options(args)
    runs = gen_tool_runs(_program(args), opts, _params(args))
    n = 0
    for r in runs:
        if args.limit is not None and n >= args.limit:
            break
        n += 1
        if not args.count:
            out.write(format_schedule(r.schedule) + "\n")
    if args.count:
        out.write(f"{n}\n")
    return EXIT_OK


def cmd_corpus(args, out) -> int:
    cases = load_corpus(args.root or corpus_root())
    failed = 0
    for case in cases:
        problems = case.verify()
        if args.check and not problems:
            report = check_program(case.program, case.options, params=case.params)
            if report.verdict != case.expected_verdict:
                problems.append(f"{case.name}: verdict {report.verdict}, "
                                f"expected {case.expected_verdict}")
        if problems:
            failed += 1
            for msg in problems:
                out.write(f"{_paint('FAIL', '31')} {msg}\n")
        else:
            out.write(f"{_paint('ok', '32')}   {case.name}\n")
    out.write(f"{len(cases) - failed}/{len(cases)} cases ok\n")
    return EXIT_OK if failed == 0 else EXIT_ERROR


COMMANDS = {
    "run": cmd_run,
    "check": cmd_check,
    "gen-schedules": cmd_gen_schedules,
    "corpus": cmd_corpus,
}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, out)
    except (CliError, ProgramError, ScheduleSyntaxError, SequentialError,
            CorpusIntegrityError, ValueError) as exc:
        print(f"sctcheck: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
