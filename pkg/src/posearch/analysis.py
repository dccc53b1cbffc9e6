"""Closed-form fork and block-time formulas with Monte Carlo counterparts.

Times are in block intervals (T = 1).  The Monte Carlo estimators drive
the statistical mode of the network simulator, so they exercise the same
chain-selection code paths as any other scenario.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .consensus import REFERENCE_STEPS
from .core import derive_seed
from .netsim import ScenarioConfig, run_scenario

TICKS = 1_000_000  # ticks per block interval in generated scenarios
_Z = 16  # difficulty exponent used by generated scenarios


@dataclass(frozen=True)
class AnalysisParams:
    lam: float = 1.0  # miniblock creations per node per interval
    d: float = 0.0  # network delay in intervals
    N: int = 1  # miniblocks per block
    samples: int = 100_000

    def __post_init__(self):
        if not self.lam > 0 or self.d < 0 or self.N < 1 or self.samples < 0:
            raise ValueError("need lam > 0, d >= 0, N >= 1, samples >= 0")


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    stderr: float
    samples: int
    events: int


def _rate(p: AnalysisParams, rate_equals_n: bool) -> float:
    return float(p.N) if rate_equals_n else p.lam


def fork_prob_analytic(p: AnalysisParams, rate_equals_n: bool = False) -> float:
    """Probability that a fork of length N follows a block.

    One slot forks when the other node finishes a competing miniblock
    within the delay while the first node finishes none:
    ``e^{-ld} * (l d e^{-ld})``.  A block forks when all N slots do.
    ``rate_equals_n`` sets the per-node rate to N.
    """
    x = _rate(p, rate_equals_n) * p.d
    return (math.exp(-x) * x * math.exp(-x)) ** p.N


def blocktime_cdf(N: int, t: float) -> float:
    """P(N miniblocks arrive within time t) when they arrive at total rate N."""
    if N < 1 or t < 0:
        raise ValueError("need N >= 1 and t >= 0")
    if t == 0:
        return 0.0
    x = N * t
    log_x = math.log(x)
    terms = [math.exp(-x + i * log_x - math.lgamma(i + 1)) for i in range(N)]
    return max(0.0, 1.0 - math.fsum(terms))


def blocktime_moments(N: int) -> tuple[float, float]:
    if N < 1:
        raise ValueError("need N >= 1")
    return 1.0, 1.0 / N


def winning_probability(power_spent: Mapping, slot=None) -> dict:
    """Each node's share of the computation spent on a slot."""
    del slot  # shares depend only on the powers given for the slot
    total = sum(power_spent.values())
    if not total > 0:
        raise ValueError("total power must be positive")
    return {k: v / total for k, v in power_spent.items()}


def ks_distance(samples: Sequence[float], cdf: Callable[[float], float]) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of ``samples`` and ``cdf``."""
    xs = sorted(samples)
    n = len(xs)
    if n == 0:
        raise ValueError("no samples")
    worst = 0.0
    for i, x in enumerate(xs):
        f = cdf(x)
        worst = max(worst, (i + 1) / n - f, f - i / n)
    return worst


# ---------------------------------------------------------------------------
# Monte Carlo


def _statistical_scenario(rates: Sequence[float], N: int, d: float, blocks: int, seed: int) -> ScenarioConfig:
    return ScenarioConfig.from_dict({
        "name": "analysis", "mode": "statistical", "seed": seed, "duration": 1 << 62, "maxBlocks": blocks,
        "trace": False,
        "nodes": [{"id": f"node{i}", "computeRate": r * REFERENCE_STEPS * 2 ** _Z / TICKS} for i, r in enumerate(rates)],
        "delayModel": {"type": "constant", "d": round(d * TICKS)},
        "chainParams": {"N_target": N, "T": TICKS, "eFloor": float(N * 2 ** _Z), "zMin": 0, "zMax": 64},
    })


def fork_prob_montecarlo(p: AnalysisParams, seed: int = 0, rate_equals_n: bool = False) -> MonteCarloEstimate:
    """Two nodes at the same rate, constant delay d; fraction of heights at
    which every slot saw the window event behind ``fork_prob_analytic``."""
    if p.samples == 0:
        raise ValueError("need samples > 0")
    lam = _rate(p, rate_equals_n)
    cfg = _statistical_scenario([lam, lam], p.N, p.d, p.samples + 2, derive_seed(seed, "fork", p.N, repr(p.d)))
    rep = run_scenario(cfg)
    n = rep.fork_heights_evaluated
    est = rep.fork_events / n
    return MonteCarloEstimate(est, math.sqrt(est * (1 - est) / n), n, rep.fork_events)


def blocktime_samples(N: int, blocks: int, seed: int = 0) -> list[float]:
    """Block intervals (in T) from a single node finding miniblocks at total rate N."""
    cfg = _statistical_scenario([float(N)], N, 0.0, blocks, derive_seed(seed, "blocktime", N))
    rep = run_scenario(cfg)
    return [x / TICKS for x in rep.block_times]


@dataclass(frozen=True)
class BlocktimeSummary:
    mean: float
    variance: float
    ks: float
    samples: int


def blocktime_montecarlo(N: int, blocks: int, seed: int = 0) -> BlocktimeSummary:
    xs = blocktime_samples(N, blocks, seed)
    n = len(xs)
    mean = math.fsum(xs) / n
    var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1)
    return BlocktimeSummary(mean, var, ks_distance(xs, lambda t: blocktime_cdf(N, t)), n)


# ---------------------------------------------------------------------------
# series for replotting


SERIES_HEADER = ("series", "x", "analytic", "montecarlo", "stderr")


def fork_series(ds: Iterable[float], Ns: Iterable[int], samples: int = 0, seed: int = 0) -> list[tuple]:
    """Fork probability against delay, one series per N (per-node rate N)."""
    rows = []
    for N in Ns:
        for d in ds:
            p = AnalysisParams(lam=float(N), d=d, N=N, samples=samples)
            a = fork_prob_analytic(p, rate_equals_n=True)
            if samples:
                mc = fork_prob_montecarlo(p, seed, rate_equals_n=True)
                rows.append((f"N={N}", d, a, mc.estimate, mc.stderr))
            else:
                rows.append((f"N={N}", d, a, None, None))
    return rows


def blocktime_series(ts: Iterable[float], Ns: Iterable[int], samples: int = 0, seed: int = 0) -> list[tuple]:
    """Block-time CDF against t, one series per N."""
    ts = list(ts)
    rows = []
    for N in Ns:
        xs = sorted(blocktime_samples(N, samples, seed)) if samples else None
        for t in ts:
            a = blocktime_cdf(N, t)
            if xs:
                frac = bisect.bisect_right(xs, t) / len(xs)
                rows.append((f"N={N}", t, a, frac, math.sqrt(frac * (1 - frac) / len(xs))))
            else:
                rows.append((f"N={N}", t, a, None, None))
    return rows


def max_deviation(rows: Iterable[tuple]) -> float | None:
    devs = [abs(r[2] - r[3]) for r in rows if r[3] is not None]
    return max(devs) if devs else None


def write_series_csv(rows: Iterable[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_HEADER)
        for r in rows:
            w.writerow(["" if v is None else (f"{v:.9g}" if isinstance(v, float) else v) for v in r])
