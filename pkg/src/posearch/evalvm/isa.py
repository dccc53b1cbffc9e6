"""Instruction set, program container, binary format and assembler.

Every opcode retires in exactly one step.  Arithmetic is on unsigned
64-bit words with wrap-around; DIV and MOD crash on a zero divisor.

Memory is 65536 words, zeroed at the start of every evaluator run.  The
candidate occupies one word per byte starting at ``INPUT_BASE``; the
32-byte context is loaded as four big-endian words at ``CTX_BASE``.
A searcher writes the candidate it wants evaluated into the same input
region and executes ``EVAL`` with the candidate length on the stack.
"""

from __future__ import annotations

import re
from array import array
from dataclasses import dataclass, field
from functools import cached_property

MASK64 = (1 << 64) - 1
WORST = MASK64

MEM_WORDS = 1 << 16
INPUT_BASE = 0xE000
MAX_CANDIDATE = 4096
CTX_BASE = 0xF000
STACK_MAX = 1024
MAX_PROGRAM = 1 << 16

HALT = 0
PUSH = 1
POP = 2
DUP = 3
SWAP = 4
LOAD = 5
STORE = 6
ADD = 7
SUB = 8
MUL = 9
DIV = 10
MOD = 11
AND = 12
OR = 13
XOR = 14
SHL = 15
SHR = 16
LT = 17
EQ = 18
NOT = 19
JMP = 20
JZ = 21
INPUTLEN = 22
RAND = 23
EVAL = 24

OPCODES = {
    "HALT": HALT,
    "PUSH": PUSH,
    "POP": POP,
    "DUP": DUP,
    "SWAP": SWAP,
    "LOAD": LOAD,
    "STORE": STORE,
    "ADD": ADD,
    "SUB": SUB,
    "MUL": MUL,
    "DIV": DIV,
    "MOD": MOD,
    "AND": AND,
    "OR": OR,
    "XOR": XOR,
    "SHL": SHL,
    "SHR": SHR,
    "LT": LT,
    "EQ": EQ,
    "NOT": NOT,
    "JMP": JMP,
    "JZ": JZ,
    "INPUTLEN": INPUTLEN,
    "RAND": RAND,
    "EVAL": EVAL,
}
MNEMONICS = {v: k for k, v in OPCODES.items()}
JUMPS = frozenset({JMP, JZ})
WITH_IMMEDIATE = frozenset({PUSH, JMP, JZ})
SEARCHER_ONLY = frozenset({RAND, EVAL})

# ExecResult status / crash reason codes shared by both kernels.
ST_HALTED = 0
ST_CRASHED = 1
ST_OUT_OF_STEPS = 2
ST_EVAL = 3

CR_STACK_UNDERFLOW = 1
CR_STACK_OVERFLOW = 2
CR_MEMORY = 3
CR_DIV_ZERO = 4
CR_PC = 5
CR_FORBIDDEN = 6
CR_NO_RESULT = 7
CR_CANDIDATE_TOO_LONG = 8
CR_BAD_OPCODE = 9

CRASH_REASONS = {
    CR_STACK_UNDERFLOW: "stack-underflow",
    CR_STACK_OVERFLOW: "stack-overflow",
    CR_MEMORY: "memory-out-of-bounds",
    CR_DIV_ZERO: "div-by-zero",
    CR_PC: "pc-out-of-range",
    CR_FORBIDDEN: "forbidden-opcode",
    CR_NO_RESULT: "no-result",
    CR_CANDIDATE_TOO_LONG: "candidate-too-long",
    CR_BAD_OPCODE: "bad-opcode",
}


class ProgramError(ValueError):
    """Raised for malformed programs; ``index`` is the offending instruction."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"instruction {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Program:
    instructions: tuple[tuple[int, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "instructions", tuple((int(o), int(i)) for o, i in self.instructions))

    def __len__(self) -> int:
        return len(self.instructions)

    @cached_property
    def ops(self) -> bytes:
        return bytes(op & 0xFF for op, _ in self.instructions)

    @cached_property
    def imms(self) -> array:
        return array("Q", (imm & MASK64 for _, imm in self.instructions))

    @cached_property
    def uses_searcher_ops(self) -> bool:
        return any(op in SEARCHER_ONLY for op, _ in self.instructions)

    def to_bytes(self) -> bytes:
        if len(self.instructions) > MAX_PROGRAM:
            raise ProgramError(f"program longer than {MAX_PROGRAM} instructions")
        out = bytearray(len(self.instructions).to_bytes(4, "big"))
        for op, imm in self.instructions:
            if not 0 <= op <= 0xFF:
                raise ProgramError(f"opcode {op} does not fit a byte")
            out.append(op)
            out += (imm & MASK64).to_bytes(8, "big")
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Program":
        if len(data) < 4:
            raise ProgramError("truncated program header")
        count = int.from_bytes(data[:4], "big")
        if count > MAX_PROGRAM:
            raise ProgramError(f"program longer than {MAX_PROGRAM} instructions")
        if len(data) != 4 + 9 * count:
            raise ProgramError("program length does not match instruction count")
        mv = memoryview(data)
        instrs = tuple(
            (mv[4 + 9 * k], int.from_bytes(mv[5 + 9 * k : 13 + 9 * k], "big")) for k in range(count)
        )
        return cls(instrs)


def validate_program(program: Program) -> None:
    """Raise ProgramError at the first unknown opcode or out-of-range jump."""
    n = len(program.instructions)
    if n > MAX_PROGRAM:
        raise ProgramError(f"program longer than {MAX_PROGRAM} instructions")
    for k, (op, imm) in enumerate(program.instructions):
        if op not in MNEMONICS:
            raise ProgramError(f"unknown opcode {op}", k)
        if op in JUMPS and not 0 <= imm < n:
            raise ProgramError(f"jump target {imm} out of range", k)


def validate_evaluator(program: Program) -> None:
    validate_program(program)
    for k, (op, _) in enumerate(program.instructions):
        if op in SEARCHER_ONLY:
            raise ProgramError(f"{MNEMONICS[op]} is not allowed in an evaluator", k)


# -- assembler ---------------------------------------------------------------

_LABEL = re.compile(r"^([A-Za-z_.][\w.]*):$")


def _number(tok: str) -> int:
    return int(tok, 0) & MASK64


def assemble(source: str | list) -> Program:
    """Assemble text (or a list of ``(mnemonic, operand)`` / ``"label:"`` items).

    Text syntax: one instruction per line, ``;`` starts a comment,
    ``name:`` defines a label, operands are integers (``0x`` allowed) or
    label names.
    """
    items: list = []
    if isinstance(source, str):
        for lineno, raw in enumerate(source.splitlines(), 1):
            line = raw.split(";", 1)[0].strip()
            if not line:
                continue
            m = _LABEL.match(line)
            if m:
                items.append(m.group(1) + ":")
                continue
            toks = line.split()
            if len(toks) > 2:
                raise ProgramError(f"line {lineno}: too many operands")
            items.append((toks[0], toks[1] if len(toks) == 2 else None, lineno))
    else:
        items = [it if isinstance(it, str) else (it[0], it[1] if len(it) > 1 else None, None) for it in source]

    labels: dict[str, int] = {}
    pc = 0
    for it in items:
        if isinstance(it, str):
            name = it[:-1]
            if name in labels:
                raise ProgramError(f"duplicate label {name!r}")
            labels[name] = pc
        else:
            pc += 1

    out = []
    for it in items:
        if isinstance(it, str):
            continue
        mnem, operand, lineno = it
        op = OPCODES.get(str(mnem).upper())
        where = f"line {lineno}: " if lineno else ""
        if op is None:
            raise ProgramError(f"{where}unknown mnemonic {mnem!r}")
        if op in WITH_IMMEDIATE:
            if operand is None:
                raise ProgramError(f"{where}{mnem} needs an operand")
            if isinstance(operand, int):
                imm = operand & MASK64
            elif operand in labels:
                imm = labels[operand]
            else:
                try:
                    imm = _number(operand)
                except ValueError:
                    raise ProgramError(f"{where}unknown label {operand!r}") from None
        else:
            if operand is not None:
                raise ProgramError(f"{where}{mnem} takes no operand")
            imm = 0
        out.append((op, imm))
    return Program(tuple(out))


def disassemble(program: Program) -> str:
    targets = {imm for op, imm in program.instructions if op in JUMPS}
    lines = []
    for k, (op, imm) in enumerate(program.instructions):
        if k in targets:
            lines.append(f"L{k}:")
        name = MNEMONICS.get(op, f"?{op}")
        if op in JUMPS:
            lines.append(f"    {name} L{imm}")
        elif op in WITH_IMMEDIATE:
            lines.append(f"    {name} {imm}")
        else:
            lines.append(f"    {name}")
    return "\n".join(lines) + "\n"
