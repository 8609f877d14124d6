"""Schedules: text form, the worst-case tool-schedule generator, exhaustive
enumeration, path fingerprints and removal of misspeculated steps."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

from .isa import Call, Cond, Jmpi, Load, Lfence, Op, Program, Reg, Ret, Store, address_of, eval_opcode
from .machine import (
    FETCH,
    RETIRE,
    CallMarker,
    Configuration,
    Directive,
    Execute,
    ExecuteAddr,
    ExecuteForwardGuess,
    ExecuteValue,
    Fence,
    Fetch,
    FetchGuess,
    FetchTarget,
    IllFormedSchedule,
    MachineParams,
    NoRuleApplies,
    Observation,
    PartiallyResolvedLoad,
    ResolvedValue,
    RetMarker,
    Retire,
    StepRecord,
    TransientStore,
    UnresolvedCond,
    UnresolvedJmpi,
    enabled_directives,
    group_size,
    initial_config,
    resolve_all,
    rsb_top,
    run,
    sequential_schedule,
    step,
    try_step,
)

Schedule = List[Directive]


# ---------------------------------------------------------------------------
# Text form
# ---------------------------------------------------------------------------

class ScheduleSyntaxError(ValueError):
    def __init__(self, token: str, position: int):
        self.token = token
        self.position = position
        super().__init__(f"bad directive {token!r} at position {position}")


_TOKEN = re.compile(r"^(?:(F)(?::([tf]))?|G:(\d+)|X(v|a)?(\d+)|XF(\d+)<(\d+)|(R))$")


def parse_directive(token: str, position: int = 0) -> Directive:
    m = _TOKEN.match(token)
    if not m:
        raise ScheduleSyntaxError(token, position)
    f, guess, target, part, idx, xf_i, xf_j, r = m.groups()
    if f:
        return FETCH if guess is None else FetchGuess(guess == "t")
    if target is not None:
        return FetchTarget(int(target))
    if idx is not None:
        return {None: Execute, "v": ExecuteValue, "a": ExecuteAddr}[part](int(idx))
    if xf_i is not None:
        return ExecuteForwardGuess(int(xf_i), int(xf_j))
    return RETIRE


def parse_schedule(text: str) -> Schedule:
    """Parse whitespace-separated directive tokens; ``#`` starts a comment."""
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    return [parse_directive(t, k) for k, t in enumerate(tokens)]


def format_schedule(schedule: Sequence[Directive]) -> str:
    return " ".join(str(d) for d in schedule)


# ---------------------------------------------------------------------------
# Tool schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenOptions:
    """Generator settings.

    ``bound`` caps reorder-buffer occupancy. ``forwarding_hazards`` also tries
    every store with its address left unresolved until it is the oldest entry.
    ``alias_prediction`` adds guessed-forwarding variants for each load.
    ``timing_variants`` adds loads held back until an older in-flight store
    has retired, and mispredictions resolved eagerly; this widens path
    coverage at a cost in schedule count. ``fence_stall`` holds fetch while a
    fence is in flight: instructions behind it cannot execute before
    everything older has resolved, so fetching them early only multiplies
    schedules that differ in fetch-time guesses the rollback discards.
    """

    bound: int = 20
    forwarding_hazards: bool = False
    alias_prediction: bool = False
    timing_variants: bool = False
    fence_stall: bool = True
    max_schedules: Optional[int] = None
    max_steps: int = 500

    def __post_init__(self):
        if self.bound < 1:
            raise ValueError("speculation bound must be at least 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")


# when a planned directive is issued
EAGER = "eager"          # as soon as it is enabled
IF_CORRECT = "correct"   # as soon as it resolves without a rollback, else when oldest
OLDEST = "oldest"        # only once its group is the oldest in the buffer
# an integer j means: as soon as enabled once buffer index j has retired

Plan = Tuple[Tuple[int, Directive, Union[str, int]], ...]


@dataclass(frozen=True)
class ToolRun:
    """A generated schedule together with the trace of replaying it."""

    schedule: Tuple[Directive, ...]
    config: Configuration
    observations: Tuple[Observation, ...]
    records: Tuple[StepRecord, ...]
    max_occupancy: int
    truncated: bool = False


@dataclass
class _Node:
    config: Configuration
    schedule: Tuple[Directive, ...] = ()
    observations: Tuple[Observation, ...] = ()
    records: Tuple[StepRecord, ...] = ()
    plan: Plan = ()
    occupancy: int = 0
    parent: Optional["_Node"] = field(default=None, repr=False)

    def state(self) -> tuple:
        return (self.config.key(), self.plan)

    def revisits_ancestor(self) -> bool:
        """True when a rollback since the parent restored an ancestor's exact
        state; the ancestor already explores every continuation."""
        parent = self.parent
        if parent is None or not any(r.rollback is not None
                                     for r in self.records[len(parent.schedule):]):
            return False
        cfg, state = self.config, None
        node = parent
        while node is not None:
            if node.config.pc == cfg.pc and node.config.next_index == cfg.next_index:
                state = state or self.state()
                if node.state() == state:
                    return True
            node = node.parent
        return False

    def apply(self, d: Directive, plan: Optional[Plan] = None) -> Optional["_Node"]:
        res = try_step(self.config, d)
        if res is None:
            return None
        cfg, obs, rec = res
        plan = self.plan if plan is None else plan
        if rec.rollback is not None:
            plan = tuple(p for p in plan if p[0] < rec.rollback)
        return _Node(cfg, self.schedule + (d,), self.observations + tuple(obs),
                     self.records + (rec,), plan, max(self.occupancy, len(cfg.buf)),
                     self.parent)


def _group_of(config: Configuration, i: int) -> range:
    """Indices of the fetch group whose first index is i."""
    e = config.buf.get(i)
    if isinstance(e, CallMarker):
        return range(i, i + 3)
    if isinstance(e, RetMarker):
        return range(i, i + 4)
    return range(i, i + 1)


def _would_rollback(config: Configuration, d: Directive) -> bool:
    res = try_step(config, d)
    return res is not None and res.record.rollback is not None


def _flush(node: _Node) -> _Node:
    """Issue planned eager directives until none is enabled."""
    while True:
        for k, (i, d, when) in enumerate(node.plan):
            if when == OLDEST:
                continue
            if when == IF_CORRECT and _would_rollback(node.config, d):
                continue
            if isinstance(when, int) and when in node.config.buf:
                continue
            rest = node.plan[:k] + node.plan[k + 1:]
            nxt = node.apply(d, rest)
            if nxt is not None:
                node = nxt
                break
        else:
            return node


def _branch_outcome(config: Configuration, i: int, instr) -> Optional[int]:
    vals = resolve_all(config, i, instr.args)
    if vals is None:
        return None
    if isinstance(instr, Cond):
        return instr.if_true if eval_opcode(instr.condop, vals).value else instr.if_false
    return address_of(vals).value


def _store_plans(i: int, src_resolved: bool, opts: GenOptions) -> List[Plan]:
    value = () if src_resolved else ((i, ExecuteValue(i), EAGER),)
    eager_addr = value + ((i, ExecuteAddr(i), EAGER),)
    if not opts.forwarding_hazards:
        return [eager_addr]
    return [value + ((i, ExecuteAddr(i), OLDEST),), eager_addr]


def _fetch_variants(config: Configuration, opts: GenOptions) -> List[Tuple[Directive, Plan]]:
    """(fetch directive, plan additions) pairs for the instruction at pc, in DFS order."""
    program = config.program
    instr = program.instrs[config.pc]
    i = config.next_index
    out: List[Tuple[Directive, Plan]] = []

    if isinstance(instr, Op):
        out.append((FETCH, ((i, Execute(i), EAGER),)))
    elif isinstance(instr, Load):
        out.append((FETCH, ((i, Execute(i), EAGER),)))
        if opts.timing_variants:
            for j in sorted(config.buf):
                if isinstance(config.buf[j], TransientStore):
                    out.append((FETCH, ((i, Execute(i), j),)))
        if opts.alias_prediction:
            for j in sorted(config.buf):
                if isinstance(config.buf[j], TransientStore):
                    guess = (i, ExecuteForwardGuess(i, j), EAGER)
                    out.append((FETCH, (guess, (i, Execute(i), OLDEST))))
                    out.append((FETCH, (guess, (i, Execute(i), EAGER))))
    elif isinstance(instr, Store):
        for plan in _store_plans(i, not isinstance(instr.src, Reg), opts):
            out.append((FETCH, plan))
    elif isinstance(instr, Lfence):
        out.append((FETCH, ()))
    elif isinstance(instr, Cond):
        correct = _branch_outcome(config, i, instr)
        if correct is None:
            for taken in (True, False):
                out.append((FetchGuess(taken), ((i, Execute(i), IF_CORRECT),)))
        else:
            taken = correct == instr.if_true
            out.append((FetchGuess(taken), ((i, Execute(i), EAGER),)))
            out.append((FetchGuess(not taken), ((i, Execute(i), OLDEST),)))
            if opts.timing_variants:
                out.append((FetchGuess(not taken), ((i, Execute(i), EAGER),)))
    elif isinstance(instr, Jmpi):
        correct = _branch_outcome(config, i, instr)
        points = sorted(program.instrs)
        if correct is not None:
            out.append((FetchTarget(correct), ((i, Execute(i), EAGER),)))
            for n in points:
                if n != correct:
                    out.append((FetchTarget(n), ((i, Execute(i), OLDEST),)))
                    if opts.timing_variants:
                        out.append((FetchTarget(n), ((i, Execute(i), EAGER),)))
        else:
            out.extend((FetchTarget(n), ((i, Execute(i), IF_CORRECT),)) for n in points)
    elif isinstance(instr, Call):
        for plan in _store_plans(i + 2, True, opts):
            out.append((FETCH, ((i + 1, Execute(i + 1), EAGER),) + plan))
    elif isinstance(instr, Ret):
        params = config.params
        parts = ((i + 1, Execute(i + 1), EAGER), (i + 2, Execute(i + 2), EAGER),
                 (i + 3, Execute(i + 3), IF_CORRECT))
        if rsb_top(config.rsb, params.rsb_mode, params.rsb_size) is not None:
            out.append((FETCH, parts))
        elif params.rsb_mode == "directive":
            out.extend((FetchTarget(n), parts) for n in sorted(program.instrs))
    return out


def _drain_step(node: _Node) -> Optional[_Node]:
    """Advance the oldest fetch group: retire it, or issue its missing part."""
    cfg = node.config
    if not cfg.buf:
        return None
    nxt = node.apply(RETIRE)
    if nxt is not None:
        return nxt
    group = _group_of(cfg, min(cfg.buf))
    for k, (i, d, _) in enumerate(node.plan):
        if i in group:
            nxt = node.apply(d, node.plan[:k] + node.plan[k + 1:])
            if nxt is not None:
                return nxt
    for i in group:
        e = cfg.buf.get(i)
        if isinstance(e, TransientStore):
            cands = ([ExecuteValue(i)] if not e.value_resolved else []) + \
                    ([ExecuteAddr(i)] if not e.addr_resolved else [])
        else:
            cands = [Execute(i)]
        for d in cands:
            nxt = node.apply(d)
            if nxt is not None:
                return nxt
    return None


def _expand(node: _Node, opts: GenOptions) -> Tuple[List[_Node], bool]:
    """Children of a node in DFS order, and whether the node is truncated."""
    cfg = node.config
    if len(node.schedule) >= opts.max_steps:
        return [], True
    program = cfg.program
    instr = program.instrs.get(cfg.pc)
    can_fetch = (instr is not None and len(cfg.buf) + group_size(instr) <= opts.bound
                 and not (opts.fence_stall and any(isinstance(e, Fence) for e in cfg.buf.values())))
    if can_fetch:
        kids = []
        for d, plan in _fetch_variants(cfg, opts):
            child = node.apply(d, node.plan + plan)
            if child is not None:
                kids.append(child)
        if kids:
            return kids, False
    nxt = _drain_step(node)
    return ([nxt] if nxt is not None else []), False


def gen_tool_runs(program: Program, opts: GenOptions = GenOptions(),
                  params: Optional[MachineParams] = None,
                  config: Optional[Configuration] = None) -> Iterator[ToolRun]:
    """Depth-first stream of tool schedules with their replay results.

    While the buffer has room the next instruction is fetched with every
    variant the options call for; otherwise the oldest fetch group is retired
    or has its outstanding part executed (late mispredictions and delayed
    store addresses resolve here, possibly rolling back). A schedule ends
    when nothing more can be fetched or executed, or at ``max_steps``.
    """
    if config is None:
        config = initial_config(program, params)
    stack = [_flush(_Node(config))]
    produced = 0
    while stack:
        node = stack.pop()
        if node.revisits_ancestor():
            kids, truncated = [], False
        else:
            kids, truncated = _expand(node, opts)
        if not kids:
            yield ToolRun(node.schedule, node.config, node.observations, node.records,
                          node.occupancy, truncated)
            produced += 1
            if opts.max_schedules is not None and produced >= opts.max_schedules:
                return
            continue
        for kid in reversed(kids):
            kid.parent = node
            stack.append(_flush(kid))


def gen_tool_schedules(program: Program, opts: GenOptions = GenOptions(),
                       params: Optional[MachineParams] = None) -> Iterator[Schedule]:
    for r in gen_tool_runs(program, opts, params):
        yield list(r.schedule)


# ---------------------------------------------------------------------------
# Exhaustive enumeration
# ---------------------------------------------------------------------------

def bounded_directives(config: Configuration, bound: Optional[int] = None,
                       alias_prediction: bool = True) -> List[Directive]:
    """Enabled directives, keeping buffer occupancy within ``bound``."""
    ds = enabled_directives(config)
    if bound is not None:
        instr = config.program.instrs.get(config.pc)
        if instr is not None and len(config.buf) + group_size(instr) > bound:
            ds = [d for d in ds if not isinstance(d, (Fetch, FetchGuess, FetchTarget))]
    if not alias_prediction:
        ds = [d for d in ds if not isinstance(d, ExecuteForwardGuess)]
    return ds


def enumerate_all_schedules(config: Configuration, max_steps: int, bound: Optional[int] = None,
                            alias_prediction: bool = True) -> Iterator[Schedule]:
    """Every well-formed schedule of length at most ``max_steps``, prefixes included."""
    stack: List[Tuple[Configuration, Tuple[Directive, ...]]] = [(config, ())]
    while stack:
        cfg, sched = stack.pop()
        yield list(sched)
        if len(sched) >= max_steps:
            continue
        for d in reversed(bounded_directives(cfg, bound, alias_prediction)):
            stack.append((step(cfg, d).config, sched + (d,)))


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BranchChoice:
    taken: bool

    def __str__(self) -> str:
        return "t" if self.taken else "f"


@dataclass(frozen=True)
class TargetChoice:
    target: int

    def __str__(self) -> str:
        return f"->{self.target}"


@dataclass(frozen=True)
class ForwardFrom:
    store: int

    def __str__(self) -> str:
        return f"<{self.store}"


@dataclass(frozen=True)
class FromMemory:
    def __str__(self) -> str:
        return "mem"


PathChoice = Union[BranchChoice, TargetChoice, ForwardFrom, FromMemory]
Path = List[Tuple[int, PathChoice]]

_VALUE_RULES = {"load-execute-nodep", "load-execute-forward",
                "load-execute-addr-ok", "load-execute-addr-mem-match"}


def path_entry(before: Configuration, after: Configuration,
               rec: StepRecord) -> Optional[Tuple[int, PathChoice]]:
    d = rec.directive
    if isinstance(d, FetchGuess):
        return rec.index, BranchChoice(d.taken)
    if isinstance(d, FetchTarget):
        return rec.index, TargetChoice(d.target)
    if isinstance(d, ExecuteForwardGuess):
        return d.index, ForwardFrom(d.store)
    if rec.rule in _VALUE_RULES:
        origin = after.buf[rec.index].origin
        return rec.index, (FromMemory() if origin.source is None else ForwardFrom(origin.source))
    return None


def raw_path(config: Configuration, schedule: Sequence[Directive]) -> Path:
    """Path entries of every step, misspeculated ones included."""
    out: Path = []
    for pos, d in enumerate(schedule):
        try:
            nxt, _, rec = step(config, d)
        except NoRuleApplies as exc:
            raise IllFormedSchedule(pos, exc) from exc
        e = path_entry(config, nxt, rec)
        if e is not None:
            out.append(e)
        config = nxt
    return out


class PathTracker:
    """Incremental path map: the latest choice per buffer index, with entries
    for rolled-back indices discarded as the rollback happens."""

    def __init__(self):
        self.entries: Dict[int, PathChoice] = {}

    def update(self, before: Configuration, after: Configuration, rec: StepRecord) -> None:
        if rec.rollback is not None:
            self.entries = {i: c for i, c in self.entries.items() if i < rec.rollback}
        e = path_entry(before, after, rec)
        if e is not None and e[0] in after.buf:
            self.entries[e[0]] = e[1]

    def frozen(self) -> frozenset:
        return frozenset(self.entries.items())


def path_map(path: Path) -> Dict[int, PathChoice]:
    return dict(path)


def path_of(config: Configuration, schedule: Sequence[Directive]) -> Path:
    return raw_path(config, strip_misspeculation(config, schedule))


def _removal_candidates(records: Sequence[StepRecord]) -> List[List[int]]:
    """Position sets worth trying to drop: for each rollback, the steps that
    touched the discarded indices since those indices were last allocated,
    latest rollback first; then every single position, latest first."""
    bundles: List[List[int]] = []
    for p, rec in enumerate(records):
        s = rec.rollback
        if s is None:
            continue
        lo = 0
        for q in range(p - 1, -1, -1):
            r = records[q].rollback
            if r is not None and r <= s:
                lo = q + 1
                break
        bundle = [q for q in range(lo, p + 1)
                  if records[q].index is not None and records[q].index >= s]
        if bundle:
            bundles.append(bundle)
    bundles.reverse()
    singles = [[p] for p in range(len(records) - 1, -1, -1)]
    return bundles + singles


def strip_misspeculation(config: Configuration, schedule: Sequence[Directive]) -> Schedule:
    """Greedily drop steps whose removal leaves the final configuration unchanged."""
    sched = list(schedule)
    final = run(config, sched)
    target = final.config
    records = final.records
    changed = True
    while changed:
        changed = False
        for cand in _removal_candidates(records):
            drop = set(cand)
            trial = [d for k, d in enumerate(sched) if k not in drop]
            try:
                res = run(config, trial)
            except IllFormedSchedule:
                continue
            if res.config == target:
                sched, records = trial, res.records
                changed = True
                break
    return sched


__all__ = [
    "Schedule", "ScheduleSyntaxError", "parse_directive", "parse_schedule", "format_schedule",
    "GenOptions", "ToolRun", "gen_tool_runs", "gen_tool_schedules",
    "bounded_directives", "enumerate_all_schedules",
    "BranchChoice", "TargetChoice", "ForwardFrom", "FromMemory", "Path", "PathChoice",
    "path_entry", "raw_path", "PathTracker", "path_map", "path_of", "strip_misspeculation",
    "sequential_schedule",
]
