"""Speculative constant-time checking.

Two modes: ``taint`` scans each tool schedule's trace for secret-labeled
observations; ``two-run`` replays each schedule on a low-equivalent
counterpart configuration and compares traces and final states.
"""
from __future__ import annotations

import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .isa import WORD_MASK, Label, LabeledValue, Program
from .machine import (
    Configuration,
    Directive,
    IllFormedSchedule,
    MachineParams,
    Observation,
    StepRecord,
    initial_config,
    run,
)
from .schedules import GenOptions, format_schedule, gen_tool_runs
from .trace import observation_json

STRATEGIES = ("complement", "random")
MODES = ("taint", "two-run")


# ---------------------------------------------------------------------------
# Verdicts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeakReport:
    schedule: Tuple[Directive, ...]
    step: int
    observation: Observation
    point: Optional[int]
    rule: Optional[str]

    @property
    def label(self) -> Label:
        return self.observation.label

    def site(self) -> tuple:
        return (self.point, self.rule, self.observation.kind)

    def to_json(self) -> dict:
        return {
            "kind": "leak",
            "schedule": format_schedule(self.schedule),
            "step": self.step,
            "point": self.point,
            "rule": self.rule,
            "observation": observation_json(self.observation),
            "label": self.label.short,
        }


@dataclass(frozen=True)
class Secure:
    pass


@dataclass(frozen=True)
class Violation:
    leaks: Tuple[LeakReport, ...]


@dataclass(frozen=True)
class DivergentTraces:
    """The two runs disagree. ``index`` is the first differing observation
    (or the schedule position, when only one run is well-formed)."""

    schedule: Tuple[Directive, ...]
    reason: str
    index: int
    left: Optional[Observation] = None
    right: Optional[Observation] = None
    buffer_index: Optional[int] = None
    point: Optional[int] = None

    def site(self) -> tuple:
        return (self.point, self.reason, self.buffer_index)

    def to_json(self) -> dict:
        return {
            "kind": "divergence",
            "schedule": format_schedule(self.schedule),
            "reason": self.reason,
            "index": self.index,
            "left": None if self.left is None else observation_json(self.left),
            "right": None if self.right is None else observation_json(self.right),
            "buffer_index": self.buffer_index,
            "point": self.point,
        }


@dataclass(frozen=True)
class IllFormed:
    position: int


PairVerdict = Union[Secure, DivergentTraces, IllFormed]


# ---------------------------------------------------------------------------
# Leak scanning
# ---------------------------------------------------------------------------

def scan_leaks(items: Sequence[Union[Observation, StepRecord]],
               schedule: Sequence[Directive] = ()) -> List[LeakReport]:
    """Every observation whose label is above public.

    ``items`` may be bare observations (``step`` is then the observation's
    position) or step records (``step`` is the directive's position and the
    report carries its rule and program point).
    """
    out = []
    for k, item in enumerate(items):
        if isinstance(item, StepRecord):
            prefix = tuple(schedule[:k + 1])
            for o in item.observations:
                if not o.label.flows_to(Label.PUBLIC):
                    out.append(LeakReport(prefix, k, o, item.point, item.rule))
        elif not item.label.flows_to(Label.PUBLIC):
            out.append(LeakReport(tuple(schedule), k, item, None, None))
    return out


# ---------------------------------------------------------------------------
# Low equivalence
# ---------------------------------------------------------------------------

def _flip(v: LabeledValue, rng: Optional[random.Random]) -> LabeledValue:
    if v.label is Label.PUBLIC:
        return v
    if rng is None:
        return LabeledValue(~v.value & WORD_MASK, v.label)
    new = rng.getrandbits(64)
    if new == v.value:
        new ^= 1
    return LabeledValue(new, v.label)


def low_equiv_counterpart(config: Configuration, strategy: str = "complement",
                          seed: int = 0) -> Configuration:
    """A configuration agreeing with ``config`` on every public value, with
    each secret register and memory value replaced: bitwise complement, or
    seeded random bits."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown counterpart strategy {strategy!r}")
    rng = random.Random(seed) if strategy == "random" else None
    reg = {r: _flip(config.reg[r], rng) for r in sorted(config.reg)}
    mem = {a: _flip(config.mem[a], rng) for a in sorted(config.mem)}
    return config.evolve(reg=reg, mem=mem)


def low_equivalent(c1: Configuration, c2: Configuration) -> bool:
    """Same locations, same labels, and equal values wherever the label is public."""
    for m1, m2 in ((c1.reg, c2.reg), (c1.mem, c2.mem)):
        if m1.keys() != m2.keys():
            return False
        for k, v in m1.items():
            w = m2[k]
            if v.label != w.label or (v.label is Label.PUBLIC and v.value != w.value):
                return False
    return True


# ---------------------------------------------------------------------------
# Two-run comparison
# ---------------------------------------------------------------------------

def _emitter(records: Sequence[StepRecord], obs_index: int) -> Optional[StepRecord]:
    seen = 0
    for rec in records:
        seen += len(rec.observations)
        if obs_index < seen:
            return rec
    return None


def compare_runs(config: Configuration, other: Configuration,
                 schedule: Sequence[Directive]) -> PairVerdict:
    sched = tuple(schedule)
    try:
        left = run(config, sched)
    except IllFormedSchedule as e:
        left = e
    try:
        right = run(other, sched)
    except IllFormedSchedule as e:
        right = e
    if isinstance(left, IllFormedSchedule) and isinstance(right, IllFormedSchedule):
        return IllFormed(min(left.position, right.position))
    if isinstance(left, IllFormedSchedule) or isinstance(right, IllFormedSchedule):
        bad = left if isinstance(left, IllFormedSchedule) else right
        return DivergentTraces(sched, "ill-formed", bad.position)
    lo, ro = left.observations, right.observations
    for k in range(max(len(lo), len(ro))):
        a = lo[k] if k < len(lo) else None
        b = ro[k] if k < len(ro) else None
        if a != b:
            rec = _emitter(left.records, k) or _emitter(right.records, k)
            return DivergentTraces(sched, "trace", k, a, b,
                                   rec.index if rec else None, rec.point if rec else None)
    if not low_equivalent(left.config, right.config):
        return DivergentTraces(sched, "final-state", len(lo))
    return Secure()


def check_sct_pair(config: Configuration, schedule: Sequence[Directive],
                   strategy: str = "complement", seed: int = 0) -> PairVerdict:
    """Run ``config`` and its low-equivalent counterpart under the same schedule."""
    return compare_runs(config, low_equiv_counterpart(config, strategy, seed), schedule)


# ---------------------------------------------------------------------------
# Whole-program checking
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    verdict: str
    violations: List[Union[LeakReport, DivergentTraces]]
    stats: Dict[str, object]
    runtime: float = 0.0

    @property
    def secure(self) -> bool:
        return self.verdict == "secure"

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "violations": [v.to_json() for v in self.violations],
            "stats": dict(self.stats),
        }


def _pair_job(args):
    config, other, schedules = args
    return [compare_runs(config, other, s) for s in schedules]


def check_program(program: Program, opts: GenOptions = GenOptions(), mode: str = "taint",
                  strategy: str = "complement", seed: int = 0, max_violations: int = 10,
                  budget: Optional[int] = None, jobs: int = 1,
                  params: Optional[MachineParams] = None) -> CheckReport:
    """Check every tool schedule of ``program``.

    Violations are deduplicated by leak site (program point, rule and
    observation kind); each is reported with the first schedule exhibiting
    it. The verdict is ``violation`` if any was found, ``incomplete`` if the
    schedule budget ran out or a schedule hit ``opts.max_steps``, else
    ``secure``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    start = time.perf_counter()
    config = initial_config(program, params)
    other = low_equiv_counterpart(config, strategy, seed) if mode == "two-run" else None
    violations: List[Union[LeakReport, DivergentTraces]] = []
    sites = set()
    explored = violating = truncated = occupancy = 0
    exhausted = True

    def record(found) -> bool:
        """Add findings; True once the violation list is full."""
        for v in found:
            if v.site() not in sites:
                sites.add(v.site())
                violations.append(v)
        return len(violations) >= max_violations

    runs = gen_tool_runs(program, opts, params, config)
    batch: List[Tuple[Directive, ...]] = []
    pool = ProcessPoolExecutor(jobs) if mode == "two-run" and jobs > 1 else None

    def flush_batch() -> bool:
        nonlocal violating
        if not batch:
            return False
        if pool is None:
            results = [compare_runs(config, other, s) for s in batch]
        else:
            size = max(1, len(batch) // jobs)
            chunks = [batch[k:k + size] for k in range(0, len(batch), size)]
            results = [v for part in pool.map(_pair_job, [(config, other, c) for c in chunks])
                       for v in part]
        batch.clear()
        bad = [v for v in results if isinstance(v, DivergentTraces)]
        violating += len(bad)
        return record(bad)

    try:
        for r in runs:
            if budget is not None and explored >= budget:
                exhausted = False
                break
            explored += 1
            truncated += r.truncated
            occupancy = max(occupancy, r.max_occupancy)
            if mode == "taint":
                leaks = scan_leaks(r.records, r.schedule)
                if leaks:
                    violating += 1
                    if record(leaks):
                        break
            else:
                batch.append(r.schedule)
                if len(batch) >= 64 * max(1, jobs) and flush_batch():
                    break
        flush_batch()
    finally:
        if pool is not None:
            pool.shutdown()

    violations = violations[:max_violations]
    if violations:
        verdict = "violation"
    elif not exhausted or truncated:
        verdict = "incomplete"
    else:
        verdict = "secure"
    stats = {
        "mode": mode,
        "bound": opts.bound,
        "forwarding_hazards": opts.forwarding_hazards,
        "alias_prediction": opts.alias_prediction,
        "schedules": explored,
        "violating_schedules": violating,
        "truncated_schedules": truncated,
        "max_buffer_occupancy": occupancy,
    }
    return CheckReport(verdict, violations, stats, time.perf_counter() - start)
