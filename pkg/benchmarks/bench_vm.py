"""Compare the compiled and pure-Python VM kernels on the same workloads.

    python3 benchmarks/bench_vm.py [--repeat 3] [--cities 10]
"""

from __future__ import annotations

import argparse
import random
import time

from posearch import evalvm
from posearch.evalvm.programs import random_cities, tsp_evaluator, tsp_searcher


def bench_evaluator(evaluator, candidates, ctx) -> tuple[int, float]:
    steps = 0
    t0 = time.perf_counter()
    for cand in candidates:
        steps += evalvm.execute_evaluator(evaluator, cand, ctx, 1 << 32).steps
    return steps, time.perf_counter() - t0


def bench_search(searcher, evaluator, ctx, step_budget: int) -> tuple[int, float]:
    t0 = time.perf_counter()
    out = evalvm.run_searcher(searcher, evaluator, ctx, 1 << 32, step_budget, seed=1)
    return out.searcher_steps + out.eval_steps, time.perf_counter() - t0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--cities", type=int, default=10)
    ap.add_argument("--evals", type=int, default=2000)
    ap.add_argument("--search-steps", type=int, default=200_000)
    args = ap.parse_args(argv)

    rng = random.Random(0)
    cities = random_cities(args.cities, rng)
    evaluator = tsp_evaluator(cities)
    searcher = tsp_searcher(args.cities)
    ctx = rng.randbytes(32)
    candidates = []
    for _ in range(args.evals):
        tour = list(range(args.cities))
        rng.shuffle(tour)
        candidates.append(bytes(tour))

    results = {}
    for backend in ("cython", "python"):
        try:
            evalvm.set_backend(backend)
        except ImportError:
            print(f"{backend}: not available")
            continue
        best_eval = best_search = float("inf")
        for _ in range(args.repeat):
            e_steps, e_time = bench_evaluator(evaluator, candidates, ctx)
            s_steps, s_time = bench_search(searcher, evaluator, ctx, args.search_steps)
            best_eval, best_search = min(best_eval, e_time), min(best_search, s_time)
        results[backend] = (e_steps / best_eval, s_steps / best_search)
        print(f"{backend:7s} evaluator {e_steps / best_eval / 1e6:8.2f} Msteps/s   "
              f"search {s_steps / best_search / 1e6:8.2f} Msteps/s")
    if len(results) == 2:
        ce, cs = results["cython"]
        pe, ps = results["python"]
        print(f"speedup evaluator x{ce / pe:.1f}  search x{cs / ps:.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
