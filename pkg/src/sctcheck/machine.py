"""The speculative out-of-order machine.

A :class:`Configuration` holds committed registers and memory, the current
fetch point, the reorder buffer of in-flight transient instructions and the
return stack buffer. :func:`step` applies one attacker directive, firing
exactly one inference rule and producing zero or more observations.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

from .isa import (
    RETURN_REGISTER,
    STACK_POINTER,
    Call,
    Cond,
    Jmpi,
    Label,
    LabeledValue,
    Lfence,
    Load,
    Op,
    Operand,
    PhysInstr,
    Program,
    Reg,
    Ret,
    Store,
    address_of,
    eval_opcode,
    join_labels,
)

ZERO = LabeledValue(0, Label.PUBLIC)


# ---------------------------------------------------------------------------
# Transient instructions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadOrigin:
    """Where a resolved load got its value: a store's buffer index, or memory (None)."""

    source: Optional[int]
    addr: LabeledValue


@dataclass(frozen=True)
class UnresolvedOp:
    opcode: str
    dst: str
    args: Tuple[Operand, ...]


@dataclass(frozen=True)
class ResolvedValue:
    dst: str
    value: LabeledValue
    origin: Optional[LoadOrigin] = None
    load_point: Optional[int] = None


@dataclass(frozen=True)
class UnresolvedCond:
    condop: str
    args: Tuple[Operand, ...]
    guess: int
    if_true: int
    if_false: int


@dataclass(frozen=True)
class ResolvedJump:
    target: int


@dataclass(frozen=True)
class UnresolvedLoad:
    dst: str
    args: Tuple[Operand, ...]
    load_point: int


@dataclass(frozen=True)
class PartiallyResolvedLoad:
    dst: str
    args: Tuple[Operand, ...]
    value: LabeledValue
    source: int
    load_point: int


@dataclass(frozen=True)
class TransientStore:
    """A store in flight. ``src`` is resolved once it is a LabeledValue and
    ``target`` once it is a single LabeledValue address."""

    src: Operand
    target: Union[Tuple[Operand, ...], LabeledValue]

    @property
    def value_resolved(self) -> bool:
        return isinstance(self.src, LabeledValue)

    @property
    def addr_resolved(self) -> bool:
        return isinstance(self.target, LabeledValue)

    @property
    def resolved(self) -> bool:
        return self.value_resolved and self.addr_resolved


@dataclass(frozen=True)
class UnresolvedJmpi:
    args: Tuple[Operand, ...]
    guess: int


@dataclass(frozen=True)
class CallMarker:
    pass


@dataclass(frozen=True)
class RetMarker:
    pass


@dataclass(frozen=True)
class Fence:
    pass


TransientInstr = Union[
    UnresolvedOp, ResolvedValue, UnresolvedCond, ResolvedJump, UnresolvedLoad,
    PartiallyResolvedLoad, TransientStore, UnresolvedJmpi, CallMarker, RetMarker, Fence,
]

CALL_GROUP = 3
RET_GROUP = 4


def group_size(instr: PhysInstr) -> int:
    """Number of buffer slots a fetch of ``instr`` occupies."""
    if isinstance(instr, Call):
        return CALL_GROUP
    if isinstance(instr, Ret):
        return RET_GROUP
    return 1


# ---------------------------------------------------------------------------
# Return stack buffer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Push:
    point: int


@dataclass(frozen=True)
class Pop:
    pass


RsbEntry = Union[Push, Pop]

RSB_MODES = ("directive", "refuse", "circular")


def rsb_stack(rsb: Mapping[int, RsbEntry]) -> List[int]:
    """Replay push/pop commands in index order; a pop on an empty stack is a no-op."""
    st: List[int] = []
    for k in sorted(rsb):
        entry = rsb[k]
        if isinstance(entry, Push):
            st.append(entry.point)
        elif st:
            st.pop()
    return st


def rsb_top(rsb: Mapping[int, RsbEntry], mode: str = "directive",
            size: int = 16, stale: int = 0) -> Optional[int]:
    """Predicted return address, or None when the stack is empty.

    In ``circular`` mode the RSB is a ring of ``size`` slots that wraps on
    underflow and never yields None; never-written slots read as ``stale``.
    """
    if mode != "circular":
        st = rsb_stack(rsb)
        return st[-1] if st else None
    slots: List[Optional[int]] = [None] * size
    top = 0
    for k in sorted(rsb):
        entry = rsb[k]
        if isinstance(entry, Push):
            slots[top % size] = entry.point
            top += 1
        else:
            top -= 1
    slot = slots[(top - 1) % size]
    return stale if slot is None else slot


# ---------------------------------------------------------------------------
# Directives and observations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fetch:
    def __str__(self) -> str:
        return "F"


@dataclass(frozen=True)
class FetchGuess:
    """Fetch a conditional branch, predicting it taken (True) or not (False)."""

    taken: bool

    def __str__(self) -> str:
        return "F:t" if self.taken else "F:f"


@dataclass(frozen=True)
class FetchTarget:
    """Fetch an indirect jump, or a return with an empty RSB, predicting ``target``."""

    target: int

    def __str__(self) -> str:
        return f"G:{self.target}"


@dataclass(frozen=True)
class Execute:
    index: int

    def __str__(self) -> str:
        return f"X{self.index}"


@dataclass(frozen=True)
class ExecuteValue:
    index: int

    def __str__(self) -> str:
        return f"Xv{self.index}"


@dataclass(frozen=True)
class ExecuteAddr:
    index: int

    def __str__(self) -> str:
        return f"Xa{self.index}"


@dataclass(frozen=True)
class ExecuteForwardGuess:
    index: int
    store: int

    def __str__(self) -> str:
        return f"XF{self.index}<{self.store}"


@dataclass(frozen=True)
class Retire:
    def __str__(self) -> str:
        return "R"


Directive = Union[Fetch, FetchGuess, FetchTarget, Execute, ExecuteValue,
                  ExecuteAddr, ExecuteForwardGuess, Retire]
FETCH = Fetch()
RETIRE = Retire()


@dataclass(frozen=True)
class Read:
    addr: LabeledValue
    kind = "read"

    @property
    def label(self) -> Label:
        return self.addr.label

    def __str__(self) -> str:
        return f"read {self.addr!r}"


@dataclass(frozen=True)
class Fwd:
    addr: LabeledValue
    kind = "fwd"

    @property
    def label(self) -> Label:
        return self.addr.label

    def __str__(self) -> str:
        return f"fwd {self.addr!r}"


@dataclass(frozen=True)
class Write:
    addr: LabeledValue
    kind = "write"

    @property
    def label(self) -> Label:
        return self.addr.label

    def __str__(self) -> str:
        return f"write {self.addr!r}"


@dataclass(frozen=True)
class Jump:
    target: LabeledValue
    kind = "jump"

    @property
    def label(self) -> Label:
        return self.target.label

    def __str__(self) -> str:
        return f"jump {self.target!r}"


@dataclass(frozen=True)
class MissSpec:
    kind = "miss"

    @property
    def label(self) -> Label:
        return Label.PUBLIC

    def __str__(self) -> str:
        return "miss"


Observation = Union[Read, Fwd, Write, Jump, MissSpec]
MISS = MissSpec()


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MachineParams:
    rsb_mode: str = "directive"
    rsb_size: int = 16
    strict_memory: bool = False

    def __post_init__(self):
        if self.rsb_mode not in RSB_MODES:
            raise ValueError(f"rsb_mode must be one of {RSB_MODES}, got {self.rsb_mode!r}")


@dataclass(frozen=True)
class Configuration:
    reg: Mapping[str, LabeledValue]
    mem: Mapping[int, LabeledValue]
    pc: int
    buf: Mapping[int, TransientInstr] = field(default_factory=dict)
    rsb: Mapping[int, RsbEntry] = field(default_factory=dict)
    # index the next fetch allocates; always MAX(buf)+1 while buf is non-empty
    next_index: int = 1
    program: Program = field(default=None, compare=False, repr=False)
    params: MachineParams = field(default_factory=MachineParams, compare=False)
    # program point each buffer entry was fetched from (trace metadata)
    points: Mapping[int, int] = field(default_factory=dict, compare=False, repr=False)

    @property
    def is_terminal(self) -> bool:
        return not self.buf

    @property
    def min_index(self) -> int:
        return min(self.buf) if self.buf else 0

    @property
    def max_index(self) -> int:
        return max(self.buf) if self.buf else 0

    def evolve(self, **changes) -> "Configuration":
        return replace(self, **changes)

    def key(self) -> tuple:
        """Hashable identity of the machine state (same fields as ``==``)."""
        return (
            tuple(sorted(self.reg.items())), tuple(sorted(self.mem.items())), self.pc,
            tuple(sorted(self.buf.items())), tuple(sorted(self.rsb.items())), self.next_index,
        )


def initial_config(program: Program, params: Optional[MachineParams] = None,
                   **param_kwargs) -> Configuration:
    if params is None:
        params = MachineParams(**param_kwargs)
    return Configuration(
        reg=dict(program.regs), mem=dict(program.mem), pc=program.entry,
        program=program, params=params,
    )


def equivalent(c1: Configuration, c2: Configuration) -> bool:
    """Same committed registers and memory, speculative state ignored."""
    return dict(c1.reg) == dict(c2.reg) and dict(c1.mem) == dict(c2.mem)


# ---------------------------------------------------------------------------
# Errors and step results
# ---------------------------------------------------------------------------

class NoRuleApplies(Exception):
    def __init__(self, config: Configuration, directive: Directive, reason: str = ""):
        self.config = config
        self.directive = directive
        self.reason = reason
        msg = f"no rule applies for {directive}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class IllFormedSchedule(Exception):
    def __init__(self, position: int, cause: NoRuleApplies):
        self.position = position
        self.cause = cause
        super().__init__(f"directive {position} ({cause.directive}) not enabled: {cause.reason}")


class SequentialError(Exception):
    pass


@dataclass(frozen=True)
class StepRecord:
    directive: Directive
    rule: str
    observations: Tuple[Observation, ...]
    pc_before: int
    pc_after: int
    index: Optional[int] = None
    point: Optional[int] = None
    # first buffer index discarded when the rule rolled back, else None
    rollback: Optional[int] = None


class StepResult(NamedTuple):
    config: Configuration
    observations: List[Observation]
    record: StepRecord


RULES = (
    "simple-fetch", "cond-fetch", "jmpi-fetch", "call-direct-fetch",
    "ret-fetch-rsb", "ret-fetch-rsb-empty",
    "op-execute", "cond-execute-correct", "cond-execute-incorrect",
    "jmpi-execute-correct", "jmpi-execute-incorrect",
    "load-execute-nodep", "load-execute-forward", "load-execute-forwarded-guessed",
    "load-execute-addr-ok", "load-execute-addr-hazard",
    "load-execute-addr-mem-match", "load-execute-addr-mem-hazard",
    "store-execute-value", "store-execute-addr-ok", "store-execute-addr-hazard",
    "value-retire", "store-retire", "jump-retire", "fence-retire",
    "call-retire", "ret-retire",
)
ROLLBACK_RULES = frozenset({
    "cond-execute-incorrect", "jmpi-execute-incorrect", "load-execute-addr-hazard",
    "load-execute-addr-mem-hazard", "store-execute-addr-hazard",
})


# ---------------------------------------------------------------------------
# Register resolve
# ---------------------------------------------------------------------------

def _assigned_register(entry: TransientInstr) -> Optional[str]:
    if isinstance(entry, (UnresolvedOp, ResolvedValue, UnresolvedLoad, PartiallyResolvedLoad)):
        return entry.dst
    return None


def register_resolve(config: Configuration, i: int, x: Operand) -> Optional[LabeledValue]:
    """Value of operand ``x`` as seen by the buffer entry at index ``i``.

    Returns the latest resolved assignment before ``i``, the committed
    register if nothing in the buffer assigns it, and None if the latest
    assignment is still unresolved.
    """
    if isinstance(x, LabeledValue):
        return x
    name = x.name
    buf = config.buf
    if buf:
        lo = min(buf)
        for j in range(min(i, max(buf) + 1) - 1, lo - 1, -1):
            entry = buf[j]
            if _assigned_register(entry) == name:
                if isinstance(entry, (ResolvedValue, PartiallyResolvedLoad)):
                    return entry.value
                return None
    return config.reg.get(name)


def resolve_all(config: Configuration, i: int,
                args: Iterable[Operand]) -> Optional[List[LabeledValue]]:
    out = []
    for a in args:
        v = register_resolve(config, i, a)
        if v is None:
            return None
        out.append(v)
    return out


# ---------------------------------------------------------------------------
# Helpers shared by the rules
# ---------------------------------------------------------------------------

def _fence_before(buf: Mapping[int, TransientInstr], i: int) -> bool:
    return any(isinstance(e, Fence) for j, e in buf.items() if j < i)


def _resolved_store_at(buf: Mapping[int, TransientInstr], j: int, a: int) -> bool:
    e = buf.get(j)
    return isinstance(e, TransientStore) and e.addr_resolved and e.target.value == a


def _read_memory(config: Configuration, d: Directive, a: int) -> LabeledValue:
    try:
        return config.mem[a]
    except KeyError:
        if config.params.strict_memory:
            raise NoRuleApplies(config, d, f"address {a:#x} is not mapped") from None
        return ZERO


def _rollback_start(buf: Mapping[int, TransientInstr], k: int) -> int:
    """A load inside a ret group rolls back the whole group."""
    if isinstance(buf.get(k - 1), RetMarker):
        return k - 1
    return k


class _Next:
    """Mutable scratch copy of a configuration while a rule builds its successor."""

    def __init__(self, c: Configuration):
        self.c = c
        self.reg = c.reg
        self.mem = c.mem
        self.pc = c.pc
        self.buf = dict(c.buf)
        self.rsb = c.rsb
        self.points = dict(c.points)
        self.next_index = c.next_index

    def truncate(self, start: int) -> None:
        """Drop buffer and RSB entries at indices >= start."""
        self.buf = {k: v for k, v in self.buf.items() if k < start}
        self.points = {k: v for k, v in self.points.items() if k < start}
        if any(k >= start for k in self.rsb):
            self.rsb = {k: v for k, v in self.rsb.items() if k < start}
        self.next_index = start

    def remove_through(self, last: int) -> None:
        for k in [k for k in self.buf if k <= last]:
            del self.buf[k]
            self.points.pop(k, None)

    def build(self) -> Configuration:
        return Configuration(
            reg=self.reg, mem=self.mem, pc=self.pc, buf=self.buf, rsb=self.rsb,
            next_index=self.next_index, program=self.c.program, params=self.c.params,
            points=self.points,
        )


def _transient(point: int, instr: PhysInstr) -> TransientInstr:
    if isinstance(instr, Op):
        return UnresolvedOp(instr.opcode, instr.dst, instr.args)
    if isinstance(instr, Load):
        return UnresolvedLoad(instr.dst, instr.args, point)
    if isinstance(instr, Store):
        return TransientStore(instr.src, instr.args)
    if isinstance(instr, Lfence):
        return Fence()
    raise TypeError(instr)


# ---------------------------------------------------------------------------
# Fetch rules
# ---------------------------------------------------------------------------

def _fetch(c: Configuration, d: Directive) -> Tuple[Configuration, List[Observation], str, int]:
    instr = c.program.instrs.get(c.pc) if c.program is not None else None
    if instr is None:
        raise NoRuleApplies(c, d, f"no instruction at program point {c.pc}")
    i = c.next_index
    nx = _Next(c)
    nx.next_index = i + group_size(instr)

    if isinstance(instr, (Op, Load, Store, Lfence)):
        if not isinstance(d, Fetch):
            raise NoRuleApplies(c, d, "simple instructions are fetched with a plain fetch")
        nx.buf[i] = _transient(c.pc, instr)
        nx.points[i] = c.pc
        nx.pc = instr.next
        return nx.build(), [], "simple-fetch", i

    if isinstance(instr, Cond):
        if not isinstance(d, FetchGuess):
            raise NoRuleApplies(c, d, "a conditional branch needs a guessed fetch")
        guess = instr.if_true if d.taken else instr.if_false
        nx.buf[i] = UnresolvedCond(instr.condop, instr.args, guess, instr.if_true, instr.if_false)
        nx.points[i] = c.pc
        nx.pc = guess
        return nx.build(), [], "cond-fetch", i

    if isinstance(instr, Jmpi):
        if not isinstance(d, FetchTarget):
            raise NoRuleApplies(c, d, "an indirect jump needs a target guess")
        nx.buf[i] = UnresolvedJmpi(instr.args, d.target)
        nx.points[i] = c.pc
        nx.pc = d.target
        return nx.build(), [], "jmpi-fetch", i

    sp = Reg(STACK_POINTER)
    if isinstance(instr, Call):
        if not isinstance(d, Fetch):
            raise NoRuleApplies(c, d, "a direct call is fetched with a plain fetch")
        nx.buf[i] = CallMarker()
        nx.buf[i + 1] = UnresolvedOp("succ", STACK_POINTER, (sp,))
        nx.buf[i + 2] = TransientStore(LabeledValue(instr.ret), (sp,))
        for k in range(i, i + CALL_GROUP):
            nx.points[k] = c.pc
        nx.rsb = {**c.rsb, i: Push(instr.ret)}
        nx.pc = instr.callee
        return nx.build(), [], "call-direct-fetch", i

    if isinstance(instr, Ret):
        mode = c.params.rsb_mode
        top = rsb_top(c.rsb, mode, c.params.rsb_size)
        if top is not None:
            if not isinstance(d, Fetch):
                raise NoRuleApplies(c, d, "the RSB predicts this return; use a plain fetch")
            target, rule = top, "ret-fetch-rsb"
        elif mode == "directive":
            if not isinstance(d, FetchTarget):
                raise NoRuleApplies(c, d, "the RSB is empty; a return target guess is required")
            target, rule = d.target, "ret-fetch-rsb-empty"
        else:
            raise NoRuleApplies(c, d, "the RSB is empty and speculation is refused")
        nx.buf[i] = RetMarker()
        nx.buf[i + 1] = UnresolvedLoad(RETURN_REGISTER, (sp,), c.pc)
        nx.buf[i + 2] = UnresolvedOp("pred", STACK_POINTER, (sp,))
        nx.buf[i + 3] = UnresolvedJmpi((Reg(RETURN_REGISTER),), target)
        for k in range(i, i + RET_GROUP):
            nx.points[k] = c.pc
        nx.rsb = {**c.rsb, i: Pop()}
        nx.pc = target
        return nx.build(), [], rule, i

    raise NoRuleApplies(c, d, f"cannot fetch {instr!r}")


# ---------------------------------------------------------------------------
# Execute rules
# ---------------------------------------------------------------------------

def _entry(c: Configuration, d: Directive, i: int) -> TransientInstr:
    try:
        entry = c.buf[i]
    except KeyError:
        raise NoRuleApplies(c, d, f"index {i} is not in the reorder buffer") from None
    if _fence_before(c.buf, i):
        raise NoRuleApplies(c, d, f"an lfence precedes index {i}")
    return entry


def _operands(c: Configuration, d: Directive, i: int, args) -> List[LabeledValue]:
    vals = resolve_all(c, i, args)
    if vals is None:
        raise NoRuleApplies(c, d, f"operands of index {i} are not resolved")
    return vals


def _execute(c: Configuration, d: Execute):
    i = d.index
    e = _entry(c, d, i)
    nx = _Next(c)

    if isinstance(e, UnresolvedOp):
        value = eval_opcode(e.opcode, _operands(c, d, i, e.args))
        nx.buf[i] = ResolvedValue(e.dst, value)
        return nx.build(), [], "op-execute"

    if isinstance(e, UnresolvedCond):
        vals = _operands(c, d, i, e.args)
        outcome = eval_opcode(e.condop, vals)
        target = e.if_true if outcome.value else e.if_false
        obs = Jump(LabeledValue(target, outcome.label))
        if target == e.guess:
            nx.buf[i] = ResolvedJump(target)
            return nx.build(), [obs], "cond-execute-correct"
        nx.truncate(i + 1)
        nx.buf[i] = ResolvedJump(target)
        nx.pc = target
        return nx.build(), [MISS, obs], "cond-execute-incorrect"

    if isinstance(e, UnresolvedJmpi):
        vals = _operands(c, d, i, e.args)
        target = address_of(vals)
        obs = Jump(target)
        if target.value == e.guess:
            nx.buf[i] = ResolvedJump(target.value)
            return nx.build(), [obs], "jmpi-execute-correct"
        nx.truncate(i + 1)
        nx.buf[i] = ResolvedJump(target.value)
        nx.pc = target.value
        return nx.build(), [MISS, obs], "jmpi-execute-incorrect"

    if isinstance(e, UnresolvedLoad):
        addr = address_of(_operands(c, d, i, e.args))
        a = addr.value
        older = [j for j in c.buf if j < i and _resolved_store_at(c.buf, j, a)]
        if not older:
            value = _read_memory(c, d, a)
            nx.buf[i] = ResolvedValue(e.dst, value, LoadOrigin(None, addr), e.load_point)
            return nx.build(), [Read(addr)], "load-execute-nodep"
        j = max(older)
        store = c.buf[j]
        if not store.value_resolved:
            raise NoRuleApplies(c, d, f"matching store {j} has no resolved value yet")
        nx.buf[i] = ResolvedValue(e.dst, store.src, LoadOrigin(j, addr), e.load_point)
        return nx.build(), [Fwd(addr)], "load-execute-forward"

    if isinstance(e, PartiallyResolvedLoad):
        addr = address_of(_operands(c, d, i, e.args))
        a = addr.value
        j = e.source
        if j in c.buf:
            store = c.buf[j]
            intervening = any(_resolved_store_at(c.buf, k, a) for k in c.buf if j < k < i)
            mismatch = store.addr_resolved and store.target.value != a
            if not mismatch and not intervening:
                nx.buf[i] = ResolvedValue(e.dst, e.value, LoadOrigin(j, addr), e.load_point)
                return nx.build(), [Fwd(addr)], "load-execute-addr-ok"
            nx.truncate(_rollback_start(c.buf, i))
            nx.pc = e.load_point
            return nx.build(), [MISS, Fwd(addr)], "load-execute-addr-hazard"
        if any(_resolved_store_at(c.buf, k, a) for k in c.buf if k < i):
            raise NoRuleApplies(c, d, "forwarding store retired and an older store matches")
        current = _read_memory(c, d, a)
        if current == e.value:
            nx.buf[i] = ResolvedValue(e.dst, e.value, LoadOrigin(None, addr), e.load_point)
            return nx.build(), [Read(addr)], "load-execute-addr-mem-match"
        nx.truncate(_rollback_start(c.buf, i))
        nx.pc = e.load_point
        return nx.build(), [MISS, Read(addr)], "load-execute-addr-mem-hazard"

    raise NoRuleApplies(c, d, f"index {i} holds {type(e).__name__}, which has no execute rule")


def _execute_value(c: Configuration, d: ExecuteValue):
    i = d.index
    e = _entry(c, d, i)
    if not isinstance(e, TransientStore) or e.value_resolved:
        raise NoRuleApplies(c, d, f"index {i} is not a store with an unresolved value")
    v = register_resolve(c, i, e.src)
    if v is None:
        raise NoRuleApplies(c, d, f"store data at index {i} is not resolved")
    nx = _Next(c)
    nx.buf[i] = TransientStore(v, e.target)
    return nx.build(), [], "store-execute-value"


def _execute_addr(c: Configuration, d: ExecuteAddr):
    i = d.index
    e = _entry(c, d, i)
    if not isinstance(e, TransientStore) or e.addr_resolved:
        raise NoRuleApplies(c, d, f"index {i} is not a store with an unresolved address")
    addr = address_of(_operands(c, d, i, e.target))
    a = addr.value
    nx = _Next(c)
    hazard = None
    for k in sorted(c.buf):
        if k <= i:
            continue
        later = c.buf[k]
        if not isinstance(later, ResolvedValue) or later.origin is None:
            continue
        src, ak = later.origin.source, later.origin.addr.value
        stale = ak == a and (src is None or src < i)
        misforwarded = src == i and ak != a
        if stale or misforwarded:
            hazard = k
            break
    if hazard is None:
        nx.buf[i] = TransientStore(e.src, addr)
        return nx.build(), [Fwd(addr)], "store-execute-addr-ok"
    restart = c.buf[hazard].load_point
    nx.truncate(_rollback_start(c.buf, hazard))
    nx.buf[i] = TransientStore(e.src, addr)
    nx.pc = restart
    return nx.build(), [MISS, Fwd(addr)], "store-execute-addr-hazard"


def _execute_forward_guess(c: Configuration, d: ExecuteForwardGuess):
    i, j = d.index, d.store
    e = _entry(c, d, i)
    if not isinstance(e, UnresolvedLoad):
        raise NoRuleApplies(c, d, f"index {i} is not an unresolved load")
    store = c.buf.get(j)
    if not (j < i and isinstance(store, TransientStore) and store.value_resolved):
        raise NoRuleApplies(c, d, f"index {j} is not an older store with a resolved value")
    nx = _Next(c)
    nx.buf[i] = PartiallyResolvedLoad(e.dst, e.args, store.src, j, e.load_point)
    return nx.build(), [], "load-execute-forwarded-guessed"


# ---------------------------------------------------------------------------
# Retire rules
# ---------------------------------------------------------------------------

def _retire(c: Configuration, d: Retire):
    if not c.buf:
        raise NoRuleApplies(c, d, "the reorder buffer is empty")
    i = min(c.buf)
    e = c.buf[i]
    nx = _Next(c)

    if isinstance(e, ResolvedValue):
        nx.reg = {**c.reg, e.dst: e.value}
        nx.remove_through(i)
        return nx.build(), [], "value-retire", i
    if isinstance(e, ResolvedJump):
        nx.remove_through(i)
        return nx.build(), [], "jump-retire", i
    if isinstance(e, TransientStore) and e.resolved:
        nx.mem = {**c.mem, e.target.value: e.src}
        nx.remove_through(i)
        return nx.build(), [Write(e.target)], "store-retire", i
    if isinstance(e, Fence):
        nx.remove_through(i)
        return nx.build(), [], "fence-retire", i
    if isinstance(e, CallMarker):
        sp, st = c.buf.get(i + 1), c.buf.get(i + 2)
        if (isinstance(sp, ResolvedValue) and sp.dst == STACK_POINTER
                and isinstance(st, TransientStore) and st.resolved):
            nx.reg = {**c.reg, STACK_POINTER: sp.value}
            nx.mem = {**c.mem, st.target.value: st.src}
            nx.remove_through(i + 2)
            return nx.build(), [Write(st.target)], "call-retire", i
    elif isinstance(e, RetMarker):
        ra, sp, jmp = c.buf.get(i + 1), c.buf.get(i + 2), c.buf.get(i + 3)
        if (isinstance(ra, ResolvedValue) and ra.dst == RETURN_REGISTER
                and isinstance(sp, ResolvedValue) and sp.dst == STACK_POINTER
                and isinstance(jmp, ResolvedJump)):
            nx.reg = {**c.reg, STACK_POINTER: sp.value}
            nx.remove_through(i + 3)
            return nx.build(), [], "ret-retire", i
    raise NoRuleApplies(c, d, f"oldest entry {i} ({type(e).__name__}) is not fully resolved")


# ---------------------------------------------------------------------------
# Public stepping API
# ---------------------------------------------------------------------------

def step(config: Configuration, directive: Directive) -> StepResult:
    """Apply one directive. Raises :class:`NoRuleApplies` if it is not enabled."""
    if isinstance(directive, (Fetch, FetchGuess, FetchTarget)):
        nxt, obs, rule, index = _fetch(config, directive)
    elif isinstance(directive, Retire):
        nxt, obs, rule, index = _retire(config, directive)
    else:
        if isinstance(directive, Execute):
            nxt, obs, rule = _execute(config, directive)
        elif isinstance(directive, ExecuteValue):
            nxt, obs, rule = _execute_value(config, directive)
        elif isinstance(directive, ExecuteAddr):
            nxt, obs, rule = _execute_addr(config, directive)
        elif isinstance(directive, ExecuteForwardGuess):
            nxt, obs, rule = _execute_forward_guess(config, directive)
        else:
            raise TypeError(f"not a directive: {directive!r}")
        index = directive.index
    point = config.pc if index is None else config.points.get(index, nxt.points.get(index))
    rollback = nxt.next_index if rule in ROLLBACK_RULES else None
    record = StepRecord(directive, rule, tuple(obs), config.pc, nxt.pc, index, point, rollback)
    return StepResult(nxt, obs, record)


def try_step(config: Configuration, directive: Directive) -> Optional[StepResult]:
    try:
        return step(config, directive)
    except NoRuleApplies:
        return None


def fetch_candidates(config: Configuration) -> List[Directive]:
    """Fetch-family directives worth trying at the current program point."""
    program = config.program
    instr = program.instrs.get(config.pc) if program is not None else None
    if instr is None:
        return []
    if isinstance(instr, Cond):
        return [FetchGuess(True), FetchGuess(False)]
    if isinstance(instr, Jmpi):
        return [FetchTarget(n) for n in sorted(program.instrs)]
    if isinstance(instr, Ret):
        return [FETCH] + [FetchTarget(n) for n in sorted(program.instrs)]
    return [FETCH]


def execute_candidates(config: Configuration) -> List[Directive]:
    out: List[Directive] = []
    buf = config.buf
    for i in sorted(buf):
        e = buf[i]
        if isinstance(e, TransientStore):
            if not e.value_resolved:
                out.append(ExecuteValue(i))
            if not e.addr_resolved:
                out.append(ExecuteAddr(i))
        elif isinstance(e, UnresolvedLoad):
            out.append(Execute(i))
            for j in sorted(buf):
                if j >= i:
                    break
                s = buf[j]
                if isinstance(s, TransientStore) and s.value_resolved:
                    out.append(ExecuteForwardGuess(i, j))
        elif isinstance(e, (UnresolvedOp, UnresolvedCond, UnresolvedJmpi, PartiallyResolvedLoad)):
            out.append(Execute(i))
    return out


def enabled_directives(config: Configuration) -> List[Directive]:
    """Every directive for which :func:`step` succeeds.

    Target guesses are enumerated over the program's instruction points.
    """
    cands = fetch_candidates(config) + execute_candidates(config) + [RETIRE]
    return [d for d in cands if try_step(config, d) is not None]


# ---------------------------------------------------------------------------
# Big-step execution
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: Configuration
    observations: List[Observation]
    retired: int
    records: List[StepRecord]


def run(config: Configuration, schedule: Sequence[Directive]) -> RunResult:
    """Fold :func:`step` over ``schedule``; raises :class:`IllFormedSchedule`."""
    obs: List[Observation] = []
    records: List[StepRecord] = []
    retired = 0
    for pos, d in enumerate(schedule):
        try:
            config, o, rec = step(config, d)
        except NoRuleApplies as exc:
            raise IllFormedSchedule(pos, exc) from exc
        obs.extend(o)
        records.append(rec)
        retired += isinstance(d, Retire)
    return RunResult(config, obs, retired, records)


def _sequential_fetch(c: Configuration) -> Optional[Directive]:
    instr = c.program.instrs[c.pc]
    if isinstance(instr, Cond):
        vals = resolve_all(c, c.next_index, instr.args)
        if vals is None:
            raise SequentialError(f"branch at {c.pc} reads an undefined register")
        return FetchGuess(bool(eval_opcode(instr.condop, vals).value))
    if isinstance(instr, Jmpi):
        vals = resolve_all(c, c.next_index, instr.args)
        if vals is None:
            raise SequentialError(f"indirect jump at {c.pc} reads an undefined register")
        return FetchTarget(address_of(vals).value)
    if isinstance(instr, Ret):
        if rsb_top(c.rsb, c.params.rsb_mode, c.params.rsb_size) is not None:
            return FETCH
        if c.params.rsb_mode == "refuse":
            return None
        sp = c.reg.get(STACK_POINTER)
        if sp is None:
            raise SequentialError("return with undefined rsp")
        return FetchTarget(c.mem.get(sp.value, ZERO).value)
    return FETCH


def sequential_schedule(config: Configuration, budget: int = 10_000,
                        max_retires: Optional[int] = None) -> Tuple[List[Directive], RunResult]:
    """Build and run the canonical sequential schedule from an initial configuration.

    Each instruction is fetched (guessing the branch its condition dictates),
    all of its parts are executed in index order and it is retired before the
    next fetch. Stops when the program point has no instruction, after
    ``max_retires`` retire directives, or raises SequentialError once
    ``budget`` fetches have been issued.
    """
    if config.buf:
        raise SequentialError("sequential execution starts from an empty reorder buffer")
    schedule: List[Directive] = []
    obs: List[Observation] = []
    records: List[StepRecord] = []
    retired = 0
    fetches = 0

    def do(d: Directive) -> None:
        nonlocal config
        try:
            config, o, rec = step(config, d)
        except NoRuleApplies as exc:
            raise SequentialError(f"sequential step {d} failed: {exc.reason}") from exc
        schedule.append(d)
        obs.extend(o)
        records.append(rec)

    while max_retires is None or retired < max_retires:
        if config.program is None or config.pc not in config.program.instrs:
            break
        d = _sequential_fetch(config)
        if d is None:
            break
        if fetches >= budget:
            raise SequentialError(f"sequential budget of {budget} fetches exhausted")
        fetches += 1
        do(d)
        progress = True
        while progress:
            progress = False
            for i in sorted(config.buf):
                e = config.buf[i]
                if isinstance(e, TransientStore):
                    todo = ([ExecuteValue(i)] if not e.value_resolved else []) + \
                           ([ExecuteAddr(i)] if not e.addr_resolved else [])
                elif isinstance(e, (UnresolvedOp, UnresolvedCond, UnresolvedLoad, UnresolvedJmpi)):
                    todo = [Execute(i)]
                else:
                    todo = []
                if todo:
                    for t in todo:
                        do(t)
                    progress = True
                    break
        while config.buf:
            do(RETIRE)
            retired += 1
    return schedule, RunResult(config, obs, retired, records)


def run_sequential(config: Configuration, budget: int = 10_000,
                   max_retires: Optional[int] = None) -> RunResult:
    return sequential_schedule(config, budget, max_retires)[1]
