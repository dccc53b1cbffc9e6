# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled VM kernel; semantics identical to ``_machine.py``."""

from libc.stdint cimport uint8_t, uint64_t, uint32_t
from libc.stdlib cimport malloc, calloc, free
from libc.string cimport memset

BACKEND = "cython"

DEF MEM_WORDS = 65536
DEF INPUT_BASE = 0xE000
DEF MAX_CANDIDATE = 4096
DEF CTX_BASE = 0xF000
DEF STACK_MAX = 1024
DEF DIRTY_MAX = 4096

DEF HALT = 0
DEF PUSH = 1
DEF POP = 2
DEF DUP = 3
DEF SWAP = 4
DEF LOAD = 5
DEF STORE = 6
DEF ADD = 7
DEF SUB = 8
DEF MUL = 9
DEF DIV = 10
DEF MOD = 11
DEF AND = 12
DEF OR = 13
DEF XOR = 14
DEF SHL = 15
DEF SHR = 16
DEF LT = 17
DEF EQ = 18
DEF NOT = 19
DEF JMP = 20
DEF JZ = 21
DEF INPUTLEN = 22
DEF RAND = 23
DEF EVAL = 24

DEF ST_HALTED = 0
DEF ST_CRASHED = 1
DEF ST_OUT_OF_STEPS = 2
DEF ST_EVAL = 3

DEF CR_STACK_UNDERFLOW = 1
DEF CR_STACK_OVERFLOW = 2
DEF CR_MEMORY = 3
DEF CR_DIV_ZERO = 4
DEF CR_PC = 5
DEF CR_FORBIDDEN = 6
DEF CR_NO_RESULT = 7
DEF CR_CANDIDATE_TOO_LONG = 8
DEF CR_BAD_OPCODE = 9


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64(state):
    cdef uint64_t s = <uint64_t>(state & 0xFFFFFFFFFFFFFFFF)
    s += <uint64_t>0x9E3779B97F4A7C15ULL
    return s, _mix(s)


cdef class Machine:
    cdef uint8_t* ops
    cdef uint64_t* imms
    cdef Py_ssize_t n
    cdef uint64_t* mem
    cdef uint64_t* stack
    cdef uint32_t* dirty
    cdef Py_ssize_t ndirty
    cdef bint dirty_overflow
    cdef Py_ssize_t sp
    cdef public bint searcher
    cdef Py_ssize_t pc
    cdef uint64_t _steps
    cdef uint64_t inlen
    cdef uint64_t rng

    def __cinit__(self, ops, imms, bint searcher=False):
        cdef Py_ssize_t k
        cdef bytes bops = bytes(ops)
        self.n = len(bops)
        self.ops = <uint8_t*>malloc(self.n + 1)
        self.imms = <uint64_t*>malloc((self.n + 1) * sizeof(uint64_t))
        self.mem = <uint64_t*>calloc(MEM_WORDS, sizeof(uint64_t))
        self.stack = <uint64_t*>malloc(STACK_MAX * sizeof(uint64_t))
        self.dirty = <uint32_t*>malloc(DIRTY_MAX * sizeof(uint32_t))
        if not self.ops or not self.imms or not self.mem or not self.stack or not self.dirty:
            raise MemoryError()
        for k in range(self.n):
            self.ops[k] = bops[k]
            self.imms[k] = <uint64_t>(imms[k] & 0xFFFFFFFFFFFFFFFF)
        self.searcher = searcher
        self.ndirty = 0
        self.dirty_overflow = False
        self.inlen = 0
        self.sp = 0
        self.pc = 0
        self._steps = 0
        self.rng = 0

    def __dealloc__(self):
        free(self.ops)
        free(self.imms)
        free(self.mem)
        free(self.stack)
        free(self.dirty)

    cdef void _clear(self):
        cdef Py_ssize_t k
        if self.dirty_overflow:
            memset(self.mem, 0, MEM_WORDS * sizeof(uint64_t))
        else:
            for k in range(self.ndirty):
                self.mem[self.dirty[k]] = 0
        self.ndirty = 0
        self.dirty_overflow = False

    cdef inline void _touch(self, uint32_t a):
        if self.ndirty < DIRTY_MAX:
            self.dirty[self.ndirty] = a
            self.ndirty += 1
        else:
            self.dirty_overflow = True

    cpdef load(self, const uint8_t[:] candidate, bytes ctx, seed=0):
        cdef Py_ssize_t k, j
        cdef uint64_t w
        cdef Py_ssize_t L = candidate.shape[0]
        if L > MAX_CANDIDATE:
            raise ValueError("candidate longer than 4096 bytes")
        if len(ctx) != 32:
            raise ValueError("context must be 32 bytes")
        self._clear()
        for k in range(L):
            if candidate[k]:
                self.mem[INPUT_BASE + k] = candidate[k]
                self._touch(INPUT_BASE + k)
        for k in range(4):
            w = 0
            for j in range(8):
                w = (w << 8) | <uint8_t>ctx[8 * k + j]
            if w:
                self.mem[CTX_BASE + k] = w
                self._touch(CTX_BASE + k)
        self.inlen = L
        self.sp = 0
        self.pc = 0
        self._steps = 0
        self.rng = <uint64_t>(seed & 0xFFFFFFFFFFFFFFFF)

    @property
    def steps(self):
        return self._steps

    def candidate(self, Py_ssize_t length):
        cdef Py_ssize_t k
        cdef bytearray out = bytearray(length)
        for k in range(length):
            out[k] = <uint8_t>(self.mem[INPUT_BASE + k] & 0xFF)
        return bytes(out)

    def resume(self, value):
        self.stack[self.sp] = <uint64_t>(value & 0xFFFFFFFFFFFFFFFF)
        self.sp += 1

    def run(self, max_steps):
        cdef uint64_t limit = <uint64_t>min(int(max_steps), 0xFFFFFFFFFFFFFFFF)
        cdef int status
        cdef uint64_t value
        status, value = self._run(limit)
        return status, value

    cdef (int, uint64_t) _run(self, uint64_t limit) noexcept nogil:
        cdef uint8_t* ops = self.ops
        cdef uint64_t* imms = self.imms
        cdef uint64_t* mem = self.mem
        cdef uint64_t* st = self.stack
        cdef Py_ssize_t n = self.n
        cdef Py_ssize_t sp = self.sp
        cdef Py_ssize_t pc = self.pc
        cdef uint64_t steps = self._steps
        cdef bint searcher = self.searcher
        cdef int status = ST_OUT_OF_STEPS
        cdef uint64_t value = 0
        cdef uint64_t a, b
        cdef uint8_t op
        while True:
            if steps >= limit:
                status = ST_OUT_OF_STEPS
                break
            if pc >= n:
                status = ST_CRASHED
                value = CR_PC
                break
            op = ops[pc]
            steps += 1
            if op == PUSH:
                if sp >= STACK_MAX:
                    status = ST_CRASHED; value = CR_STACK_OVERFLOW; break
                st[sp] = imms[pc]; sp += 1; pc += 1
            elif op == LOAD:
                if sp < 1:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                a = st[sp - 1]
                if a >= MEM_WORDS:
                    status = ST_CRASHED; value = CR_MEMORY; break
                st[sp - 1] = mem[a]; pc += 1
            elif op == STORE:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                a = st[sp - 1]
                if a >= MEM_WORDS:
                    status = ST_CRASHED; value = CR_MEMORY; break
                mem[a] = st[sp - 2]
                if self.ndirty < DIRTY_MAX:
                    self.dirty[self.ndirty] = <uint32_t>a
                    self.ndirty += 1
                else:
                    self.dirty_overflow = True
                sp -= 2; pc += 1
            elif op == ADD:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = st[sp - 1] + st[sp]; pc += 1
            elif op == SUB:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = st[sp - 1] - st[sp]; pc += 1
            elif op == MUL:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = st[sp - 1] * st[sp]; pc += 1
            elif op == LT:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = 1 if st[sp - 1] < st[sp] else 0; pc += 1
            elif op == EQ:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = 1 if st[sp - 1] == st[sp] else 0; pc += 1
            elif op == JZ:
                if sp < 1:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1
                if st[sp] == 0:
                    pc = <Py_ssize_t>imms[pc]
                else:
                    pc += 1
            elif op == JMP:
                pc = <Py_ssize_t>imms[pc]
            elif op == DUP:
                if sp < 1:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                if sp >= STACK_MAX:
                    status = ST_CRASHED; value = CR_STACK_OVERFLOW; break
                st[sp] = st[sp - 1]; sp += 1; pc += 1
            elif op == SWAP:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                a = st[sp - 1]; st[sp - 1] = st[sp - 2]; st[sp - 2] = a; pc += 1
            elif op == POP:
                if sp < 1:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; pc += 1
            elif op == AND:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = st[sp - 1] & st[sp]; pc += 1
            elif op == OR:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = st[sp - 1] | st[sp]; pc += 1
            elif op == XOR:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = st[sp - 1] ^ st[sp]; pc += 1
            elif op == SHL:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1
                b = st[sp]
                st[sp - 1] = (st[sp - 1] << b) if b < 64 else 0
                pc += 1
            elif op == SHR:
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1
                b = st[sp]
                st[sp - 1] = (st[sp - 1] >> b) if b < 64 else 0
                pc += 1
            elif op == NOT:
                if sp < 1:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                st[sp - 1] = ~st[sp - 1]; pc += 1
            elif op == DIV:
                if sp < 1:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                b = st[sp - 1]
                if b == 0:
                    status = ST_CRASHED; value = CR_DIV_ZERO; break
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = st[sp - 1] // b; pc += 1
            elif op == MOD:
                if sp < 1:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                b = st[sp - 1]
                if b == 0:
                    status = ST_CRASHED; value = CR_DIV_ZERO; break
                if sp < 2:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1; st[sp - 1] = st[sp - 1] % b; pc += 1
            elif op == INPUTLEN:
                if sp >= STACK_MAX:
                    status = ST_CRASHED; value = CR_STACK_OVERFLOW; break
                st[sp] = self.inlen; sp += 1; pc += 1
            elif op == HALT:
                if sp > 0:
                    value = st[sp - 1]
                elif not searcher:
                    status = ST_CRASHED; value = CR_NO_RESULT; break
                status = ST_HALTED
                pc += 1
                break
            elif op == RAND:
                if not searcher:
                    status = ST_CRASHED; value = CR_FORBIDDEN; break
                if sp >= STACK_MAX:
                    status = ST_CRASHED; value = CR_STACK_OVERFLOW; break
                self.rng += <uint64_t>0x9E3779B97F4A7C15ULL
                st[sp] = _mix(self.rng); sp += 1; pc += 1
            elif op == EVAL:
                if not searcher:
                    status = ST_CRASHED; value = CR_FORBIDDEN; break
                if sp < 1:
                    status = ST_CRASHED; value = CR_STACK_UNDERFLOW; break
                sp -= 1
                a = st[sp]
                if a > MAX_CANDIDATE:
                    status = ST_CRASHED; value = CR_CANDIDATE_TOO_LONG; break
                pc += 1
                status = ST_EVAL
                value = a
                break
            else:
                status = ST_CRASHED; value = CR_BAD_OPCODE; break
        self.sp = sp
        self.pc = pc
        self._steps = steps
        return status, value


def execute(ops, imms, candidate, bytes ctx, budget):
    """One-shot evaluator run: returns ``(status, value_or_reason, steps)``."""
    cdef Machine m = Machine(ops, imms, False)
    m.load(candidate, ctx, 0)
    status, value = m.run(budget)
    return status, value, m._steps
