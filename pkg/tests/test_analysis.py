import math

import pytest
from hypothesis import given, strategies as st

from posearch.analysis import (
    AnalysisParams, blocktime_cdf, blocktime_moments, blocktime_series, fork_prob_analytic,
    fork_prob_montecarlo, fork_series, ks_distance, max_deviation, winning_probability, write_series_csv,
)


def test_fork_probability_examples():
    assert fork_prob_analytic(AnalysisParams(lam=1, d=0.1, N=1)) == pytest.approx(0.0818731, abs=1e-7)
    for N in (1, 2, 5):
        assert fork_prob_analytic(AnalysisParams(lam=1, d=0.0, N=N)) == 0.0
    p = AnalysisParams(d=0.1, N=2)
    assert fork_prob_analytic(p, rate_equals_n=True) == pytest.approx((0.2 * math.exp(-0.4)) ** 2, rel=1e-12)
    assert fork_prob_analytic(p, rate_equals_n=True) == pytest.approx(0.0179732, abs=1e-7)


def test_fork_probability_decreases_with_n():
    for d in (0.01, 0.05, 0.1, 0.2):
        ps = [fork_prob_analytic(AnalysisParams(d=d, N=N), rate_equals_n=True) for N in (1, 2, 4, 8)]
        assert all(a > b for a, b in zip(ps, ps[1:]))


def test_blocktime_cdf_examples():
    assert blocktime_cdf(1, 1) == pytest.approx(1 - math.exp(-1), abs=1e-12)
    assert round(blocktime_cdf(1, 1), 6) == 0.632121
    assert blocktime_cdf(4, 1) == pytest.approx(1 - math.exp(-4) * (1 + 4 + 8 + 32 / 3), abs=1e-12)
    assert round(blocktime_cdf(4, 1), 6) == 0.566530
    for N in (1, 3, 16):
        assert blocktime_cdf(N, 0) == 0.0
        assert blocktime_cdf(N, 50) == pytest.approx(1.0, abs=1e-12)


def test_blocktime_cdf_matches_numerical_integral_of_density():
    # density of the N-th arrival at rate N: N (Nt)^(N-1) e^(-Nt) / (N-1)!
    for N in (1, 2, 7):
        def density(t):
            return N * (N * t) ** (N - 1) * math.exp(-N * t) / math.factorial(N - 1)
        steps = 20_000
        h = 2.0 / steps
        integral = sum(density((k + 0.5) * h) for k in range(steps)) * h
        assert blocktime_cdf(N, 2.0) == pytest.approx(integral, abs=1e-6)


@given(st.integers(1, 60), st.floats(0, 5))
def test_blocktime_cdf_is_a_probability(N, t):
    assert 0.0 <= blocktime_cdf(N, t) <= 1.0


def test_blocktime_cdf_rejects_bad_input():
    with pytest.raises(ValueError):
        blocktime_cdf(0, 1)
    with pytest.raises(ValueError):
        blocktime_cdf(1, -1)


def test_blocktime_moments():
    assert blocktime_moments(1) == (1.0, 1.0)
    assert blocktime_moments(16) == (1.0, 0.0625)


def test_winning_probability():
    w = winning_probability({"A": 1, "B": 2, "C": 4})
    assert w == pytest.approx({"A": 1 / 7, "B": 2 / 7, "C": 4 / 7})
    assert winning_probability({"solo": 9}) == {"solo": 1.0}
    assert winning_probability({i: 3 for i in range(5)}) == pytest.approx({i: 0.2 for i in range(5)})
    assert winning_probability({"A": 10, "B": 20, "C": 40}) == pytest.approx(w)
    with pytest.raises(ValueError):
        winning_probability({"A": 0})


def test_ks_distance_hand_cases():
    uniform = lambda x: min(max(x, 0.0), 1.0)  # noqa: E731
    assert ks_distance([0.5], uniform) == pytest.approx(0.5)
    assert ks_distance([0.25, 0.75], uniform) == pytest.approx(0.25)


def test_montecarlo_zero_delay_is_exactly_zero():
    est = fork_prob_montecarlo(AnalysisParams(lam=1, d=0.0, N=1, samples=2000), seed=1)
    assert est.estimate == 0.0 and est.events == 0


def test_montecarlo_agrees_with_analytic():
    p = AnalysisParams(d=0.05, N=4, samples=20_000)
    est = fork_prob_montecarlo(p, seed=3, rate_equals_n=True)
    a = fork_prob_analytic(p, rate_equals_n=True)
    assert abs(est.estimate - a) < 3 * math.sqrt(a * (1 - a) / est.samples)


def test_series_shapes(tmp_path):
    rows = fork_series([0.0, 0.1], [1, 2], samples=0)
    assert [r[0] for r in rows] == ["N=1", "N=1", "N=2", "N=2"]
    assert all(r[3] is None for r in rows) and max_deviation(rows) is None
    rows = blocktime_series([0.5, 1.0], [2], samples=2000, seed=1)
    assert max_deviation(rows) < 0.05
    path = tmp_path / "s.csv"
    write_series_csv(rows, path)
    assert path.read_text().splitlines()[0] == "series,x,analytic,montecarlo,stderr"


def test_params_validation():
    with pytest.raises(ValueError):
        AnalysisParams(lam=0)
    with pytest.raises(ValueError):
        AnalysisParams(N=0)
