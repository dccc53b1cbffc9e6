"""Pure-Python VM kernel.

Mirrors ``_machine_c.pyx`` exactly; the two are checked against each
other in the test suite.  Memory is a dict so that a fresh run costs
nothing to zero.
"""

from .isa import (
    ADD, AND, CR_BAD_OPCODE, CR_CANDIDATE_TOO_LONG, CR_DIV_ZERO, CR_FORBIDDEN,
    CR_MEMORY, CR_NO_RESULT, CR_PC, CR_STACK_OVERFLOW, CR_STACK_UNDERFLOW,
    CTX_BASE, DIV, DUP, EQ, EVAL, HALT, INPUT_BASE, INPUTLEN, JMP, JZ, LOAD, LT,
    MASK64, MAX_CANDIDATE, MEM_WORDS, MOD, MUL, NOT, OR, POP, PUSH, RAND, SHL,
    SHR, ST_CRASHED, ST_EVAL, ST_HALTED, ST_OUT_OF_STEPS, STACK_MAX, STORE, SUB,
    SWAP, XOR,
)

BACKEND = "python"

_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    state = (state + _GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _ctx_words(ctx: bytes) -> tuple[int, int, int, int]:
    return tuple(int.from_bytes(ctx[8 * k : 8 * k + 8], "big") for k in range(4))


class Machine:
    __slots__ = ("ops", "imms", "searcher", "mem", "stack", "pc", "steps", "inlen", "rng")

    def __init__(self, ops: bytes, imms, searcher: bool = False):
        self.ops = bytes(ops)
        self.imms = list(imms)
        self.searcher = searcher
        self.load(b"", bytes(32), 0)

    def load(self, candidate: bytes, ctx: bytes, seed: int = 0) -> None:
        if len(candidate) > MAX_CANDIDATE:
            raise ValueError("candidate longer than 4096 bytes")
        if len(ctx) != 32:
            raise ValueError("context must be 32 bytes")
        mem = {}
        for k, b in enumerate(candidate):
            if b:
                mem[INPUT_BASE + k] = b
        for k, w in enumerate(_ctx_words(ctx)):
            if w:
                mem[CTX_BASE + k] = w
        self.mem = mem
        self.stack = []
        self.pc = 0
        self.steps = 0
        self.inlen = len(candidate)
        self.rng = seed & MASK64

    def candidate(self, length: int) -> bytes:
        get = self.mem.get
        return bytes(get(INPUT_BASE + k, 0) & 0xFF for k in range(length))

    def resume(self, value: int) -> None:
        self.stack.append(value & MASK64)

    def run(self, max_steps: int) -> tuple[int, int]:
        """Execute until HALT, crash, EVAL request or ``max_steps`` total steps."""
        ops = self.ops
        imms = self.imms
        n = len(ops)
        mem = self.mem
        st = self.stack
        push = st.append
        pop = st.pop
        pc = self.pc
        steps = self.steps
        searcher = self.searcher
        M = MASK64
        status = ST_OUT_OF_STEPS
        value = 0
        try:
            while True:
                if steps >= max_steps:
                    status = ST_OUT_OF_STEPS
                    break
                if pc >= n:
                    status, value = ST_CRASHED, CR_PC
                    break
                op = ops[pc]
                steps += 1
                if op == PUSH:
                    if len(st) >= STACK_MAX:
                        status, value = ST_CRASHED, CR_STACK_OVERFLOW
                        break
                    push(imms[pc])
                    pc += 1
                elif op == LOAD:
                    a = pop()
                    if a >= MEM_WORDS:
                        status, value = ST_CRASHED, CR_MEMORY
                        break
                    push(mem.get(a, 0))
                    pc += 1
                elif op == STORE:
                    a = pop()
                    v = pop()
                    if a >= MEM_WORDS:
                        status, value = ST_CRASHED, CR_MEMORY
                        break
                    mem[a] = v
                    pc += 1
                elif op == ADD:
                    b = pop()
                    st[-1] = (st[-1] + b) & M
                    pc += 1
                elif op == SUB:
                    b = pop()
                    st[-1] = (st[-1] - b) & M
                    pc += 1
                elif op == MUL:
                    b = pop()
                    st[-1] = (st[-1] * b) & M
                    pc += 1
                elif op == LT:
                    b = pop()
                    st[-1] = 1 if st[-1] < b else 0
                    pc += 1
                elif op == EQ:
                    b = pop()
                    st[-1] = 1 if st[-1] == b else 0
                    pc += 1
                elif op == JZ:
                    if not pop():
                        pc = imms[pc]
                    else:
                        pc += 1
                elif op == JMP:
                    pc = imms[pc]
                elif op == DUP:
                    if len(st) >= STACK_MAX:
                        status, value = ST_CRASHED, CR_STACK_OVERFLOW
                        break
                    push(st[-1])
                    pc += 1
                elif op == SWAP:
                    st[-1], st[-2] = st[-2], st[-1]
                    pc += 1
                elif op == POP:
                    pop()
                    pc += 1
                elif op == AND:
                    b = pop()
                    st[-1] &= b
                    pc += 1
                elif op == OR:
                    b = pop()
                    st[-1] |= b
                    pc += 1
                elif op == XOR:
                    b = pop()
                    st[-1] ^= b
                    pc += 1
                elif op == SHL:
                    b = pop()
                    st[-1] = (st[-1] << b) & M if b < 64 else 0
                    pc += 1
                elif op == SHR:
                    b = pop()
                    st[-1] = st[-1] >> b if b < 64 else 0
                    pc += 1
                elif op == NOT:
                    st[-1] ^= M
                    pc += 1
                elif op == DIV:
                    b = pop()
                    if b == 0:
                        status, value = ST_CRASHED, CR_DIV_ZERO
                        break
                    st[-1] //= b
                    pc += 1
                elif op == MOD:
                    b = pop()
                    if b == 0:
                        status, value = ST_CRASHED, CR_DIV_ZERO
                        break
                    st[-1] %= b
                    pc += 1
                elif op == INPUTLEN:
                    if len(st) >= STACK_MAX:
                        status, value = ST_CRASHED, CR_STACK_OVERFLOW
                        break
                    push(self.inlen)
                    pc += 1
                elif op == HALT:
                    if st:
                        value = st[-1]
                    elif not searcher:
                        status, value = ST_CRASHED, CR_NO_RESULT
                        break
                    status = ST_HALTED
                    pc += 1
                    break
                elif op == RAND:
                    if not searcher:
                        status, value = ST_CRASHED, CR_FORBIDDEN
                        break
                    if len(st) >= STACK_MAX:
                        status, value = ST_CRASHED, CR_STACK_OVERFLOW
                        break
                    self.rng, r = splitmix64(self.rng)
                    push(r)
                    pc += 1
                elif op == EVAL:
                    if not searcher:
                        status, value = ST_CRASHED, CR_FORBIDDEN
                        break
                    length = pop()
                    if length > MAX_CANDIDATE:
                        status, value = ST_CRASHED, CR_CANDIDATE_TOO_LONG
                        break
                    pc += 1
                    status, value = ST_EVAL, length
                    break
                else:
                    status, value = ST_CRASHED, CR_BAD_OPCODE
                    break
        except IndexError:
            status, value = ST_CRASHED, CR_STACK_UNDERFLOW
        self.pc = pc
        self.steps = steps
        return status, value


def execute(ops: bytes, imms, candidate: bytes, ctx: bytes, budget: int) -> tuple[int, int, int]:
    """One-shot evaluator run: returns ``(status, value_or_reason, steps)``."""
    m = Machine(ops, imms, False)
    m.load(candidate, ctx, 0)
    status, value = m.run(min(int(budget), MASK64))
    return status, value, m.steps
