import os
import random

import pytest
from hypothesis import given, settings, strategies as st

from posearch import evalvm
from posearch.evalvm import (
    WORST, EvalContext, Program, ProgramError, assemble, disassemble, estimate_reuse_resistance,
    execute_evaluator, load_kernel, run_searcher, validate_evaluator,
)
from posearch.evalvm.isa import OPCODES, WITH_IMMEDIATE
from posearch.evalvm.programs import (
    constant_evaluator, random_cities, random_search_program, tsp_evaluator, tsp_searcher,
)
from posearch.oracle import tour_length

CTX = bytes(range(32))

try:
    load_kernel("cython")
    HAVE_CYTHON = True
except ImportError:
    HAVE_CYTHON = False


def run(src, candidate=b"", budget=10_000, ctx=CTX):
    return execute_evaluator(assemble(src), candidate, ctx, budget)


@pytest.mark.parametrize("src,expected", [
    ("PUSH 2\nPUSH 3\nADD\nHALT", 5),
    ("PUSH 2\nPUSH 3\nSUB\nHALT", (2 - 3) % 2**64),
    ("PUSH 0xFFFFFFFFFFFFFFFF\nPUSH 2\nMUL\nHALT", (2**64 - 1) * 2 % 2**64),
    ("PUSH 17\nPUSH 5\nDIV\nHALT", 3),
    ("PUSH 17\nPUSH 5\nMOD\nHALT", 2),
    ("PUSH 12\nPUSH 10\nAND\nHALT", 8),
    ("PUSH 12\nPUSH 10\nOR\nHALT", 14),
    ("PUSH 12\nPUSH 10\nXOR\nHALT", 6),
    ("PUSH 1\nPUSH 63\nSHL\nHALT", 1 << 63),
    ("PUSH 1\nPUSH 64\nSHL\nHALT", 0),
    ("PUSH 256\nPUSH 4\nSHR\nHALT", 16),
    ("PUSH 3\nPUSH 4\nLT\nHALT", 1),
    ("PUSH 4\nPUSH 4\nEQ\nHALT", 1),
    ("PUSH 0\nNOT\nHALT", 2**64 - 1),
    ("PUSH 1\nPUSH 2\nSWAP\nPOP\nHALT", 2),
    ("PUSH 7\nDUP\nADD\nHALT", 14),
    ("PUSH 9\nPUSH 100\nSTORE\nPUSH 100\nLOAD\nHALT", 9),
    ("PUSH 0\nJZ yes\nPUSH 1\nHALT\nyes:\nPUSH 2\nHALT", 2),
    ("INPUTLEN\nHALT", 3),
    ("PUSH 0xE001\nLOAD\nHALT", 0xBB),
    ("PUSH 0xF000\nLOAD\nHALT", int.from_bytes(CTX[:8], "big")),
])
def test_instruction_semantics(src, expected):
    res = run(src, b"\xaa\xbb\xcc")
    assert res.ok and res.value == expected


@pytest.mark.parametrize("src,reason", [
    ("ADD\nHALT", "stack-underflow"),
    ("PUSH 1\nPUSH 0\nDIV\nHALT", "div-by-zero"),
    ("PUSH 1\nPUSH 0\nMOD\nHALT", "div-by-zero"),
    ("PUSH 65536\nLOAD\nHALT", "memory-out-of-bounds"),
    ("HALT", "no-result"),
    ("PUSH 1", "pc-out-of-range"),
    ("RAND\nHALT", "forbidden-opcode"),
    ("loop:\nPUSH 1\nJMP loop", "stack-overflow"),
])
def test_crashes_score_worst(src, reason):
    res = run(src)
    assert res.status == "crashed" and res.reason == reason
    assert res.evaluation == WORST


def test_straight_line_program_uses_one_step_per_instruction():
    for k in (1, 2, 10, 500):
        src = "\n".join(["PUSH 1"] * (k - 1) + ["HALT"]) if k > 1 else "PUSH 1\nHALT"
        prog = assemble(src)
        assert execute_evaluator(prog, b"", CTX, 10_000).steps == len(prog)


def test_budget_is_exact_for_infinite_loop():
    prog = assemble("top:\nJMP top")
    for b in (1, 7, 1000, 123_457):
        res = execute_evaluator(prog, b"", CTX, b)
        assert res.status == "out-of-steps" and res.steps == b and res.evaluation == WORST


def test_memory_is_reset_between_runs():
    prog = assemble("PUSH 50\nLOAD\nPUSH 1\nADD\nDUP\nPUSH 50\nSTORE\nHALT")
    assert [execute_evaluator(prog, b"", CTX, 100).value for _ in range(3)] == [1, 1, 1]


def test_candidate_too_long():
    res = execute_evaluator(constant_evaluator(0), bytes(4097), CTX, 100)
    assert res.reason == "candidate-too-long"


def test_assembler_errors():
    with pytest.raises(ProgramError):
        assemble("FROB")
    with pytest.raises(ProgramError):
        assemble("PUSH")
    with pytest.raises(ProgramError):
        assemble("JMP nowhere")
    with pytest.raises(ProgramError):
        assemble("a:\na:\nHALT")
    with pytest.raises(ProgramError):
        validate_evaluator(assemble("RAND\nHALT"))


def test_binary_and_text_round_trip():
    prog = tsp_evaluator(random_cities(5, random.Random(1)))
    assert Program.from_bytes(prog.to_bytes()) == prog
    assert assemble(disassemble(prog)) == prog


def test_context_must_be_32_bytes():
    with pytest.raises(ValueError):
        EvalContext(b"short")


def test_tsp_evaluator_matches_oracle():
    rng = random.Random(3)
    for _ in range(40):
        n = rng.randint(3, 9)
        cities = random_cities(n, rng)
        ev = tsp_evaluator(cities)
        ctx = rng.randbytes(32)
        tour = list(range(n))
        rng.shuffle(tour)
        assert execute_evaluator(ev, bytes(tour), ctx, 1 << 24).evaluation == tour_length(cities, ctx, tour)
        assert execute_evaluator(ev, bytes([0] * n), ctx, 1 << 24).evaluation == WORST


def test_searcher_yields_evaluations_and_tracks_best():
    seen = []
    out = run_searcher(random_search_program(4), constant_evaluator(5), CTX, 100, 1 << 20, seed=9,
                       on_eval=lambda c, v: seen.append((c, v)) or len(seen) < 50)
    assert out.stopped and out.eval_count == 50 and out.best_value == 5
    assert all(len(c) == 4 and v == 5 for c, v in seen)


def test_searcher_seed_determines_candidates():
    def first(seed):
        got = []
        run_searcher(random_search_program(8), constant_evaluator(0), CTX, 100, 1 << 20, seed,
                     on_eval=lambda c, v: got.append(c) or len(got) < 10)
        return got
    assert first(1) == first(1) != first(2)


def test_reuse_resistance_tsp_passes_constant_fails():
    cities = random_cities(10, random.Random(0))
    tsp = estimate_reuse_resistance(tsp_evaluator(cities), bytes(range(10)), trials=2000, seed=1)
    const = estimate_reuse_resistance(constant_evaluator(7), bytes(range(10)), trials=2000, seed=1)
    assert tsp.passes and not const.passes


def test_pure_python_env_var_selects_python_kernel():
    import subprocess
    import sys
    env = dict(os.environ, POSEARCH_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from posearch import evalvm; print(evalvm.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


# -- kernel parity -----------------------------------------------------------

_ops = st.sampled_from(sorted(set(OPCODES.values()) - {OPCODES["RAND"], OPCODES["EVAL"]}))


@st.composite
def programs(draw):
    n = draw(st.integers(1, 40))
    instrs = []
    for _ in range(n):
        op = draw(_ops)
        if op in (OPCODES["JMP"], OPCODES["JZ"]):
            imm = draw(st.integers(0, n - 1))
        elif op in WITH_IMMEDIATE:
            imm = draw(st.one_of(st.integers(0, 70), st.integers(0xE000, 0xE010), st.integers(0, 2**64 - 1)))
        else:
            imm = 0
        instrs.append((op, imm))
    return Program(tuple(instrs))


@pytest.mark.skipif(not HAVE_CYTHON, reason="compiled kernel not built")
@settings(max_examples=400, deadline=None)
@given(prog=programs(), cand=st.binary(max_size=12), ctx=st.binary(min_size=32, max_size=32),
       budget=st.integers(1, 3000))
def test_kernels_agree(prog, cand, ctx, budget):
    results = []
    for name in ("python", "cython"):
        k = load_kernel(name)
        m = k.Machine(prog.ops, prog.imms, False)
        m.load(cand, ctx, 0)
        results.append((m.run(budget), m.steps))
    assert results[0] == results[1]


@pytest.mark.skipif(not HAVE_CYTHON, reason="compiled kernel not built")
def test_kernels_agree_on_searches():
    cities = random_cities(7, random.Random(2))
    outs = []
    original = evalvm.BACKEND
    for name in ("python", "cython"):
        evalvm.set_backend(name)
        try:
            o = run_searcher(tsp_searcher(7), tsp_evaluator(cities), CTX, 1 << 22, 30_000, seed=4)
            outs.append((o.best_candidate, o.best_value, o.eval_count, o.searcher_steps, o.eval_steps))
        finally:
            evalvm.set_backend(original)
    assert outs[0] == outs[1]
