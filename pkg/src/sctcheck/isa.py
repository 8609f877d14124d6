"""Labeled values, the physical instruction set, and the assembly format.

Programs are written in a small line-oriented assembly::

    reg  ra = 9 : pub
    mem  0x48..0x4B = sec-fresh : sec
    entry 1
    ins 1: br gt [4, ra], 2, 4
    ins 2: load rb, [0x40, ra], 3

See :func:`parse_program` for the full grammar.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

WORD_BITS = 64
WORD_MASK = (1 << WORD_BITS) - 1

STACK_POINTER = "rsp"
RETURN_REGISTER = "rret"
RESERVED_REGISTERS = (STACK_POINTER, RETURN_REGISTER)

# Base added to an address to produce a `sec-fresh` cell value.
FRESH_BASE = 0x100


class Label(enum.IntEnum):
    """Two-point security lattice, public below secret."""

    PUBLIC = 0
    SECRET = 1

    def join(self, other: "Label") -> "Label":
        return Label(max(self, other))

    def flows_to(self, other: "Label") -> bool:
        return self <= other

    @property
    def short(self) -> str:
        return "pub" if self is Label.PUBLIC else "sec"

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return _LABEL_NAMES[text.lower()]
        except KeyError:
            raise ValueError(f"unknown label {text!r}") from None


_LABEL_NAMES = {
    "pub": Label.PUBLIC,
    "public": Label.PUBLIC,
    "sec": Label.SECRET,
    "secret": Label.SECRET,
}

PUBLIC = Label.PUBLIC
SECRET = Label.SECRET


def join_labels(labels) -> Label:
    out = Label.PUBLIC
    for label in labels:
        out = out.join(label)
    return out


@dataclass(frozen=True, slots=True)
class LabeledValue:
    value: int
    label: Label = Label.PUBLIC

    def __post_init__(self):
        if not 0 <= self.value <= WORD_MASK:
            object.__setattr__(self, "value", self.value & WORD_MASK)

    def __repr__(self) -> str:
        return f"{self.value:#x}_{self.label.short}"


def pub(value: int) -> LabeledValue:
    return LabeledValue(value, Label.PUBLIC)


def sec(value: int) -> LabeledValue:
    return LabeledValue(value, Label.SECRET)


@dataclass(frozen=True, slots=True)
class Reg:
    name: str

    def __repr__(self) -> str:
        return self.name


# An operand is a register name or an immediate labeled value.
Operand = Union[Reg, LabeledValue]


# ---------------------------------------------------------------------------
# Opcodes
# ---------------------------------------------------------------------------

class OpcodeError(ValueError):
    pass


@dataclass(frozen=True)
class Opcode:
    name: str
    fn: Callable[..., int]
    min_arity: int
    max_arity: Optional[int]  # None means variadic

    def check_arity(self, n: int) -> None:
        if n < self.min_arity or (self.max_arity is not None and n > self.max_arity):
            if self.max_arity == self.min_arity:
                want = str(self.min_arity)
            elif self.max_arity is None:
                want = f"at least {self.min_arity}"
            else:
                want = f"{self.min_arity}..{self.max_arity}"
            raise OpcodeError(f"{self.name} expects {want} operands, got {n}")


def _fold(fn):
    def apply(*xs):
        acc = xs[0]
        for x in xs[1:]:
            acc = fn(acc, x)
        return acc
    return apply


OPCODES: Dict[str, Opcode] = {}
CONDOPS = frozenset({"gt", "lt", "ge", "le", "eq", "neq"})


def register_opcode(name: str, fn: Callable[..., int], min_arity: int,
                    max_arity: Optional[int] = -1) -> None:
    """Add an opcode to the global table. ``max_arity=-1`` means fixed arity."""
    if max_arity == -1:
        max_arity = min_arity
    OPCODES[name] = Opcode(name, fn, min_arity, max_arity)


register_opcode("add", _fold(lambda a, b: a + b), 1, None)
register_opcode("mul", _fold(lambda a, b: a * b), 1, None)
register_opcode("and", _fold(lambda a, b: a & b), 1, None)
register_opcode("or", _fold(lambda a, b: a | b), 1, None)
register_opcode("xor", _fold(lambda a, b: a ^ b), 1, None)
register_opcode("sub", lambda a, b: a - b, 2)
register_opcode("addr", _fold(lambda a, b: a + b), 1, None)
register_opcode("addrx", lambda base, idx, scale: base + idx * scale, 3)
# stack grows downward in unit cells
register_opcode("succ", lambda a: a - 1, 1)
register_opcode("pred", lambda a: a + 1, 1)
register_opcode("gt", lambda a, b: int(a > b), 2)
register_opcode("lt", lambda a, b: int(a < b), 2)
register_opcode("ge", lambda a, b: int(a >= b), 2)
register_opcode("le", lambda a, b: int(a <= b), 2)
register_opcode("eq", lambda a, b: int(a == b), 2)
register_opcode("neq", lambda a, b: int(a != b), 2)


def eval_opcode(opcode: str, args: Sequence[LabeledValue]) -> LabeledValue:
    """Apply ``opcode`` to labeled arguments; the result carries the join of their labels."""
    try:
        op = OPCODES[opcode]
    except KeyError:
        raise OpcodeError(f"unknown opcode {opcode!r}") from None
    op.check_arity(len(args))
    result = op.fn(*(a.value for a in args))
    return LabeledValue(result & WORD_MASK, join_labels(a.label for a in args))


def address_of(args: Sequence[LabeledValue], mode: str = "addr") -> LabeledValue:
    """Address calculation used by loads, stores and indirect jumps."""
    return eval_opcode(mode, args)


# ---------------------------------------------------------------------------
# Physical instructions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Op:
    opcode: str
    dst: str
    args: Tuple[Operand, ...]
    next: int


@dataclass(frozen=True)
class Cond:
    condop: str
    args: Tuple[Operand, ...]
    if_true: int
    if_false: int


@dataclass(frozen=True)
class Load:
    dst: str
    args: Tuple[Operand, ...]
    next: int


@dataclass(frozen=True)
class Store:
    src: Operand
    args: Tuple[Operand, ...]
    next: int


@dataclass(frozen=True)
class Jmpi:
    args: Tuple[Operand, ...]


@dataclass(frozen=True)
class Call:
    callee: int
    ret: int


@dataclass(frozen=True)
class Ret:
    pass


@dataclass(frozen=True)
class Lfence:
    next: int


PhysInstr = Union[Op, Cond, Load, Store, Jmpi, Call, Ret, Lfence]


def operand_registers(instr: PhysInstr) -> List[str]:
    ops: List[Operand] = []
    if isinstance(instr, (Op, Cond, Load, Jmpi)):
        ops.extend(instr.args)
    elif isinstance(instr, Store):
        ops.append(instr.src)
        ops.extend(instr.args)
    names = [o.name for o in ops if isinstance(o, Reg)]
    if isinstance(instr, (Op, Load)):
        names.append(instr.dst)
    if isinstance(instr, (Call, Ret)):
        names.append(STACK_POINTER)
    return names


@dataclass(frozen=True)
class Program:
    instrs: Mapping[int, PhysInstr]
    mem: Mapping[int, LabeledValue] = field(default_factory=dict)
    regs: Mapping[str, LabeledValue] = field(default_factory=dict)
    entry: int = 0
    registers: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instrs", dict(self.instrs))
        object.__setattr__(self, "mem", dict(self.mem))
        object.__setattr__(self, "regs", dict(self.regs))
        if not self.registers:
            object.__setattr__(self, "registers", tuple(self.regs))
        else:
            object.__setattr__(self, "registers", tuple(self.registers))
        self.validate()

    def validate(self) -> None:
        if self.instrs and self.entry not in self.instrs:
            raise ProgramError(f"entry point {self.entry} has no instruction")
        known = set(self.registers) | set(RESERVED_REGISTERS)
        uses_stack = False
        for point, instr in self.instrs.items():
            for name in operand_registers(instr):
                if name not in known:
                    raise ProgramError(f"instruction {point}: unknown register {name!r}")
            uses_stack |= isinstance(instr, (Call, Ret))
        if uses_stack and STACK_POINTER not in self.regs:
            raise ProgramError("call/ret present but rsp is not initialized")

    @property
    def has_secrets(self) -> bool:
        return any(v.label is not Label.PUBLIC
                   for v in [*self.mem.values(), *self.regs.values()])


class ProgramError(ValueError):
    pass


class AsmSyntaxError(ProgramError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


# ---------------------------------------------------------------------------
# Assembly parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<sym>[\[\],:=])|(?P<range>\.\.)|(?P<word>[A-Za-z0-9_\-]+))")
_INT = re.compile(r"^(0x[0-9a-fA-F]+|[0-9]+)$")
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class _Line:
    """Token cursor over one source line."""

    def __init__(self, text: str, lineno: int):
        self.lineno = lineno
        self.toks: List[Tuple[str, int]] = []
        pos = 0
        text = text.rstrip()
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                col = pos + 1 + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise AsmSyntaxError(f"unexpected character {text[col - 1]!r}", lineno, col)
            tok = m.group("sym") or m.group("range") or m.group("word")
            self.toks.append((tok, m.start(m.lastgroup) + 1))
            pos = m.end()
        self.pos = 0

    def error(self, message: str) -> AsmSyntaxError:
        col = self.toks[self.pos][1] if self.pos < len(self.toks) else (
            self.toks[-1][1] + len(self.toks[-1][0]) if self.toks else 1)
        return AsmSyntaxError(message, self.lineno, col)

    def peek(self) -> Optional[str]:
        return self.toks[self.pos][0] if self.pos < len(self.toks) else None

    def next(self, what: str = "token") -> str:
        if self.pos >= len(self.toks):
            raise self.error(f"expected {what}, found end of line")
        tok = self.toks[self.pos][0]
        self.pos += 1
        return tok

    def expect(self, sym: str) -> None:
        if self.peek() != sym:
            raise self.error(f"expected {sym!r}, found {self.peek()!r}")
        self.pos += 1

    def accept(self, sym: str) -> bool:
        if self.peek() == sym:
            self.pos += 1
            return True
        return False

    def int(self, what: str = "integer") -> int:
        if self.peek() is None or not _INT.match(self.peek()):
            raise self.error(f"expected {what}, found {self.peek()!r}")
        return int(self.next(), 0)

    def ident(self, what: str = "name") -> str:
        if self.peek() is None or not _IDENT.match(self.peek()):
            raise self.error(f"expected {what}, found {self.peek()!r}")
        return self.next()

    def label(self) -> Label:
        word = self.next("label")
        try:
            return Label.parse(word)
        except ValueError:
            self.pos -= 1
            raise self.error(f"unknown label {word!r}") from None

    def done(self) -> None:
        if self.pos != len(self.toks):
            raise self.error(f"unexpected {self.peek()!r}")


def _parse_operand(ln: _Line) -> Operand:
    tok = ln.peek()
    if tok is not None and _INT.match(tok):
        value = ln.int()
        label = Label.PUBLIC
        if ln.accept(":"):
            label = ln.label()
        return LabeledValue(value, label)
    return Reg(ln.ident("operand"))


def _parse_operand_list(ln: _Line) -> Tuple[Operand, ...]:
    ln.expect("[")
    out: List[Operand] = []
    if ln.accept("]"):
        return ()
    while True:
        out.append(_parse_operand(ln))
        if ln.accept("]"):
            return tuple(out)
        ln.expect(",")


def _parse_instr(ln: _Line) -> PhysInstr:
    kind = ln.ident("instruction")
    if kind == "op":
        opcode = ln.ident("opcode")
        dst = ln.ident("destination register")
        ln.expect(",")
        args = _parse_operand_list(ln)
        ln.expect(",")
        return Op(opcode, dst, args, ln.int("next point"))
    if kind == "br":
        condop = ln.ident("condition operator")
        args = _parse_operand_list(ln)
        ln.expect(",")
        t = ln.int("true target")
        ln.expect(",")
        return Cond(condop, args, t, ln.int("false target"))
    if kind == "load":
        dst = ln.ident("destination register")
        ln.expect(",")
        args = _parse_operand_list(ln)
        ln.expect(",")
        return Load(dst, args, ln.int("next point"))
    if kind == "store":
        src = _parse_operand(ln)
        ln.expect(",")
        args = _parse_operand_list(ln)
        ln.expect(",")
        return Store(src, args, ln.int("next point"))
    if kind == "jmpi":
        return Jmpi(_parse_operand_list(ln))
    if kind == "call":
        callee = ln.int("callee")
        ln.expect(",")
        return Call(callee, ln.int("return point"))
    if kind == "ret":
        return Ret()
    if kind == "lfence":
        return Lfence(ln.int("next point"))
    ln.pos -= 1
    raise ln.error(f"unknown instruction {kind!r}")


def _check_opcode(ln: _Line, instr: PhysInstr) -> None:
    try:
        if isinstance(instr, Op):
            if instr.opcode not in OPCODES:
                raise OpcodeError(f"unknown opcode {instr.opcode!r}")
            OPCODES[instr.opcode].check_arity(len(instr.args))
        elif isinstance(instr, Cond):
            if instr.condop not in OPCODES:
                raise OpcodeError(f"unknown condition operator {instr.condop!r}")
            OPCODES[instr.condop].check_arity(len(instr.args))
    except OpcodeError as exc:
        raise AsmSyntaxError(str(exc), ln.lineno) from None


def parse_program(text: str) -> Program:
    """Parse assembly source into a :class:`Program`.

    Raises :class:`AsmSyntaxError` (with line and column) for malformed lines,
    unknown registers, unknown opcodes, duplicate program points and
    duplicate memory addresses.
    """
    regs: Dict[str, LabeledValue] = {}
    mem: Dict[int, LabeledValue] = {}
    instrs: Dict[int, PhysInstr] = {}
    entry: Optional[int] = None
    lines: Dict[int, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        ln = _Line(body, lineno)
        head = ln.ident("keyword")
        if head == "reg":
            name = ln.ident("register name")
            ln.expect("=")
            value = ln.int("register value")
            ln.expect(":")
            label = ln.label()
            ln.done()
            if name in regs:
                raise AsmSyntaxError(f"register {name!r} declared twice", lineno)
            regs[name] = LabeledValue(value, label)
        elif head == "mem":
            lo = ln.int("address")
            hi = lo
            if ln.accept(".."):
                hi = ln.int("end address")
            if hi < lo:
                raise ln.error("empty address range")
            ln.expect("=")
            fresh = ln.peek() == "sec-fresh"
            value = 0
            if fresh:
                ln.next()
            else:
                value = ln.int("memory value")
            ln.expect(":")
            label = ln.label()
            ln.done()
            for a in range(lo, hi + 1):
                if a in mem:
                    raise AsmSyntaxError(f"address {a:#x} already defined", lineno)
                mem[a] = LabeledValue(FRESH_BASE + a if fresh else value, label)
        elif head == "entry":
            entry = ln.int("entry point")
            ln.done()
        elif head == "ins":
            point = ln.int("program point")
            ln.expect(":")
            instr = _parse_instr(ln)
            ln.done()
            _check_opcode(ln, instr)
            if point in instrs:
                raise AsmSyntaxError(
                    f"program point {point} already defined on line {lines[point]}", lineno)
            instrs[point] = instr
            lines[point] = lineno
        else:
            ln.pos -= 1
            raise ln.error(f"unknown keyword {head!r}")

    if entry is None:
        entry = min(instrs) if instrs else 0
    try:
        return Program(instrs, mem, regs, entry, tuple(regs))
    except AsmSyntaxError:
        raise
    except ProgramError as exc:
        raise AsmSyntaxError(str(exc), lines.get(entry, 1)) from None


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _fmt_operand(op: Operand) -> str:
    if isinstance(op, Reg):
        return op.name
    text = f"{op.value:#x}"
    return text if op.label is Label.PUBLIC else f"{text}:{op.label.short}"


def _fmt_args(args: Sequence[Operand]) -> str:
    return "[" + ", ".join(_fmt_operand(a) for a in args) + "]"


def format_instr(instr: PhysInstr) -> str:
    if isinstance(instr, Op):
        return f"op {instr.opcode} {instr.dst}, {_fmt_args(instr.args)}, {instr.next}"
    if isinstance(instr, Cond):
        return f"br {instr.condop} {_fmt_args(instr.args)}, {instr.if_true}, {instr.if_false}"
    if isinstance(instr, Load):
        return f"load {instr.dst}, {_fmt_args(instr.args)}, {instr.next}"
    if isinstance(instr, Store):
        return f"store {_fmt_operand(instr.src)}, {_fmt_args(instr.args)}, {instr.next}"
    if isinstance(instr, Jmpi):
        return f"jmpi {_fmt_args(instr.args)}"
    if isinstance(instr, Call):
        return f"call {instr.callee}, {instr.ret}"
    if isinstance(instr, Ret):
        return "ret"
    if isinstance(instr, Lfence):
        return f"lfence {instr.next}"
    raise TypeError(f"not an instruction: {instr!r}")


def serialize_program(program: Program) -> str:
    lines = []
    for name in program.registers:
        v = program.regs[name]
        lines.append(f"reg {name} = {v.value} : {v.label.short}")
    for addr in sorted(program.mem):
        v = program.mem[addr]
        lines.append(f"mem {addr:#x} = {v.value} : {v.label.short}")
    lines.append(f"entry {program.entry}")
    for point in sorted(program.instrs):
        lines.append(f"ins {point}: {format_instr(program.instrs[point])}")
    return "\n".join(lines) + "\n"
