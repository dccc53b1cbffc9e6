"""Deterministic, step-metered stack VM for evaluator and searcher programs.

The interpreter kernel is compiled with Cython when available.  Setting
``POSEARCH_PURE_PYTHON=1`` forces the pure-Python kernel, which has the
same semantics and is kept in lock-step by the parity tests.
"""

from __future__ import annotations

import importlib
import math
import os
import random
from collections import Counter
from dataclasses import dataclass
from typing import Callable

from .isa import (
    CRASH_REASONS, CR_CANDIDATE_TOO_LONG, MASK64, MAX_CANDIDATE, ST_CRASHED, ST_EVAL,
    ST_HALTED, ST_OUT_OF_STEPS, WORST, Program, ProgramError, assemble, disassemble,
    validate_evaluator, validate_program,
)

HASH_STEP_COST = 64  # step-equivalent cost of one hash_object call
FALLBACK_FACTOR = 8
DEFAULT_SEARCH_BUDGET = 1 << 24


def load_kernel(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return importlib.import_module("._machine", __name__)
    if name == "cython":
        return importlib.import_module("._machine_c", __name__)
    raise ValueError(f"unknown kernel {name!r}")


def _select_kernel():
    if os.environ.get("POSEARCH_PURE_PYTHON") == "1":
        return load_kernel("python")
    try:
        return load_kernel("cython")
    except ImportError:
        return load_kernel("python")


_kernel = _select_kernel()
BACKEND: str = _kernel.BACKEND


def set_backend(name: str) -> None:
    """Switch kernels at runtime (benchmarks and parity tests)."""
    global _kernel, BACKEND
    _kernel = load_kernel(name)
    BACKEND = _kernel.BACKEND


@dataclass(frozen=True)
class ExecResult:
    status: str  # "value" | "crashed" | "out-of-steps"
    steps: int
    value: int | None = None
    reason: str | None = None

    @property
    def evaluation(self) -> int:
        """Value as seen by consensus: crashes and timeouts score WORST."""
        return self.value if self.status == "value" else WORST

    @property
    def ok(self) -> bool:
        return self.status == "value"


@dataclass(frozen=True)
class EvalContext:
    ctx: bytes

    def __post_init__(self):
        if len(self.ctx) != 32:
            raise ValueError("evaluation context must be 32 bytes")


EvalContext.ZERO = EvalContext(bytes(32))


def _ctx_bytes(ctx) -> bytes:
    if isinstance(ctx, EvalContext):
        return ctx.ctx
    ctx = bytes(ctx)
    if len(ctx) != 32:
        raise ValueError("evaluation context must be 32 bytes")
    return ctx


def _result(status: int, value: int, steps: int) -> ExecResult:
    if status == ST_HALTED:
        return ExecResult("value", steps, value=value)
    if status == ST_OUT_OF_STEPS:
        return ExecResult("out-of-steps", steps)
    return ExecResult("crashed", steps, reason=CRASH_REASONS[value])


def _machine_for(program: Program, searcher: bool):
    """Machines are cached on the program object and reset by ``load``."""
    key = ("_vm_s" if searcher else "_vm_e", BACKEND)
    cache = program.__dict__.setdefault("_machines", {})
    m = cache.get(key)
    if m is None:
        m = _kernel.Machine(program.ops, program.imms, searcher)
        cache[key] = m
    return m


def execute_evaluator(evaluator: Program, candidate: bytes, ctx, budget: int) -> ExecResult:
    if budget <= 0:
        raise ValueError("budget must be positive")
    if len(candidate) > MAX_CANDIDATE:
        return ExecResult("crashed", 0, reason=CRASH_REASONS[CR_CANDIDATE_TOO_LONG])
    m = _machine_for(evaluator, False)
    m.load(bytes(candidate), _ctx_bytes(ctx), 0)
    status, value = m.run(min(budget, MASK64))
    return _result(status, value, m.steps)


@dataclass
class SearchOutcome:
    best_candidate: bytes | None
    best_value: int
    eval_count: int
    searcher_steps: int
    eval_steps: int = 0
    crashed: str | None = None
    halted: bool = False
    stopped: bool = False


class SearchSession:
    """A searcher run that can be advanced in pieces.

    ``next_eval(limit)`` runs the searcher until it requests an evaluation
    or its cumulative step count reaches ``limit``.  Each requested
    candidate is evaluated immediately and its value handed back to the
    searcher.  Returns ``(candidate, ExecResult)`` or ``None``.
    """

    def __init__(self, searcher: Program, evaluator: Program, ctx, eval_budget: int, seed: int):
        self.evaluator = evaluator
        self.ctx = _ctx_bytes(ctx)
        self.eval_budget = eval_budget
        # searchers get their own machine: two sessions on one program may interleave
        self.machine = _kernel.Machine(searcher.ops, searcher.imms, True)
        self.machine.load(b"", self.ctx, seed & MASK64)
        self.best_candidate: bytes | None = None
        self.best_value = WORST
        self.eval_count = 0
        self.eval_steps = 0
        self.crashed: str | None = None
        self.halted = False

    @property
    def searcher_steps(self) -> int:
        return self.machine.steps

    @property
    def finished(self) -> bool:
        return self.halted or self.crashed is not None

    def next_eval(self, limit: int):
        if self.finished:
            return None
        status, value = self.machine.run(limit)
        if status == ST_OUT_OF_STEPS:
            return None
        if status == ST_HALTED:
            self.halted = True
            return None
        if status == ST_CRASHED:
            self.crashed = CRASH_REASONS[value]
            return None
        assert status == ST_EVAL
        candidate = self.machine.candidate(value)
        res = execute_evaluator(self.evaluator, candidate, self.ctx, self.eval_budget)
        self.eval_count += 1
        self.eval_steps += res.steps
        ev = res.evaluation
        if self.best_candidate is None or ev < self.best_value:
            self.best_candidate, self.best_value = candidate, ev
        self.machine.resume(ev)
        return candidate, res

    def outcome(self, stopped: bool = False) -> SearchOutcome:
        return SearchOutcome(
            self.best_candidate, self.best_value, self.eval_count, self.searcher_steps,
            self.eval_steps, self.crashed, self.halted, stopped,
        )


def run_searcher(
    searcher: Program,
    evaluator: Program,
    ctx,
    eval_budget: int,
    search_step_budget: int,
    seed: int,
    on_eval: Callable[[bytes, int], bool] | None = None,
) -> SearchOutcome:
    """Run a searcher to completion.

    ``on_eval(candidate, value)`` returns True to keep going, False to stop.
    The step budget counts searcher instructions only; evaluator steps are
    reported separately in ``eval_steps``.
    """
    session = SearchSession(searcher, evaluator, ctx, eval_budget, seed)
    while True:
        got = session.next_eval(search_step_budget)
        if got is None:
            return session.outcome()
        candidate, res = got
        if on_eval is not None and not on_eval(candidate, res.evaluation):
            return session.outcome(stopped=True)


def _random_ctx(rng: random.Random) -> bytes:
    return rng.getrandbits(256).to_bytes(32, "big")


def measure_eval_steps(evaluator: Program, samples: int = 16, seed: int = 0,
                       budget: int = 1 << 32, max_length: int = 64) -> float:
    """Mean steps per evaluation over random candidates and contexts."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = random.Random(seed)
    total = 0
    for _ in range(samples):
        cand = rng.randbytes(rng.randint(0, max_length))
        total += execute_evaluator(evaluator, cand, _random_ctx(rng), budget).steps
    return total / samples


@dataclass(frozen=True)
class ReuseEstimate:
    collision_rate: float
    u_estimate: float
    threshold: float
    passes: bool
    mean_steps: float


def estimate_reuse_resistance(evaluator: Program, candidate: bytes, trials: int, seed: int = 0,
                              budget: int = 1 << 32, hash_steps: int = HASH_STEP_COST) -> ReuseEstimate:
    """How often does one fixed candidate score the same under fresh contexts?

    Reuse of a result across contexts only pays off when a repeat comes
    sooner than the cost ratio (evaluation + hash) / hash.
    """
    if trials < 2:
        raise ValueError("trials must be >= 2")
    rng = random.Random(seed)
    values = []
    steps = 0
    for _ in range(trials):
        res = execute_evaluator(evaluator, candidate, _random_ctx(rng), budget)
        values.append(res.evaluation)
        steps += res.steps
    pairs = trials * (trials - 1) // 2
    same = sum(c * (c - 1) // 2 for c in Counter(values).values())
    rate = same / pairs
    u = math.inf if same == 0 else 1.0 / rate
    mean_steps = steps / trials
    threshold = (mean_steps + hash_steps) / hash_steps
    return ReuseEstimate(rate, u, threshold, u > threshold, mean_steps)


__all__ = [
    "BACKEND", "DEFAULT_SEARCH_BUDGET", "EvalContext", "ExecResult", "FALLBACK_FACTOR",
    "HASH_STEP_COST", "Program", "ProgramError", "ReuseEstimate", "SearchOutcome",
    "SearchSession", "WORST", "assemble", "disassemble", "estimate_reuse_resistance",
    "execute_evaluator", "load_kernel", "measure_eval_steps", "run_searcher", "set_backend",
    "validate_evaluator", "validate_program",
]
