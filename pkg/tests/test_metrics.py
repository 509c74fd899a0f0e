from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedau import rng as rngmod
from fedau.metrics import (
    MetricRecorder,
    Targets,
    cutoff_geometric_fourth_central,
    cutoff_geometric_moments,
    cutoff_geometric_pmf,
    optimality_gaps,
    q_diagnostic,
    read_csv,
    rows_to_csv,
    simulate_intervals,
    survival_power,
    weight_error_term,
)
from fedau.objective import QuadraticIsotropic
from fedau.weighting import WeightEstimator


def exact_pmf(p: Fraction, K: int) -> list[Fraction]:
    return [p * (1 - p) ** (k - 1) for k in range(1, K)] + [(1 - p) ** (K - 1)]


def test_pmf_degenerate_cases():
    assert [cutoff_geometric_pmf(1.0, 5, k) for k in range(1, 6)] == [1.0, 0.0, 0.0, 0.0, 0.0]
    assert cutoff_geometric_pmf(0.3, 1, 1) == 1.0


def test_pmf_three_point():
    assert [cutoff_geometric_pmf(0.5, 3, k) for k in (1, 2, 3)] == [0.5, 0.25, 0.25]


def test_moments_degenerate_cases():
    assert cutoff_geometric_moments(1.0, 7) == (1.0, 0.0)
    for p in (0.02, 0.1, 0.5, 0.9):
        assert cutoff_geometric_moments(p, 1) == (1.0, 0.0)


def test_moments_three_point():
    pmf = exact_pmf(Fraction(1, 2), 3)
    mean = sum(k * q for k, q in enumerate(pmf, start=1))
    var = sum((k - mean) ** 2 * q for k, q in enumerate(pmf, start=1))
    assert (mean, var) == (Fraction(7, 4), Fraction(11, 16))
    got = cutoff_geometric_moments(0.5, 3)
    assert got == pytest.approx((1.75, 0.6875), abs=1e-15)


@given(p=st.floats(0.001, 1.0), K=st.integers(1, 10_000))
@settings(max_examples=60, deadline=None)
def test_pmf_sums_to_one(p, K):
    total = math.fsum(cutoff_geometric_pmf(p, K, k) for k in range(1, K + 1))
    assert abs(total - 1.0) <= 1e-12


@given(num=st.integers(1, 99), K=st.integers(1, 60))
@settings(max_examples=60, deadline=None)
def test_moments_match_exact_enumeration(num, K):
    p = Fraction(num, 100)
    pmf = exact_pmf(p, K)
    mean = sum(k * q for k, q in enumerate(pmf, start=1))
    var = sum((k - mean) ** 2 * q for k, q in enumerate(pmf, start=1))
    fourth = sum((k - mean) ** 4 * q for k, q in enumerate(pmf, start=1))
    m, v = cutoff_geometric_moments(float(p), K)
    assert m == pytest.approx(float(mean), rel=1e-12)
    assert v == pytest.approx(float(var), rel=1e-9, abs=1e-12)
    assert cutoff_geometric_fourth_central(float(p), K) == pytest.approx(float(fourth), rel=1e-9, abs=1e-12)


def test_survival_power_underflow_flag():
    assert survival_power(0.5, 0) == (1.0, False)
    assert survival_power(1.0, 3) == (0.0, False)
    value, flushed = survival_power(0.5, 2000)
    assert value == 0.0 and flushed
    value, flushed = survival_power(0.02, 100)
    assert value == pytest.approx(0.98**100, rel=1e-13) and not flushed


def test_simulated_intervals_are_capped():
    gen = rngmod.stream(0, rngmod.MONTE_CARLO)
    s = simulate_intervals(0.05, 7, 10_000, gen)
    assert s.min() == 1 and s.max() == 7
    assert np.all(simulate_intervals(1.0, 7, 10, gen) == 1)


def test_weight_error_known_prob_is_zero():
    p = np.array([0.1, 0.25, 0.5])
    assert weight_error_term(np.tile(1 / p, (6, 1)), p) == 0.0


def test_weight_error_constant_one():
    assert weight_error_term(np.ones((4, 3)), np.full(3, 0.5)) == 0.25


def test_weight_error_hand_trace():
    est = WeightEstimator("fedau_finite_K", 1, K=2)
    weights = [est.weights]
    for b in (True, True, False):
        weights.append(est.advance([b]))
    # Intervals of length 1 twice, then an open interval: the weight never leaves 1.
    assert [w[0] for w in weights] == [1.0, 1.0, 1.0, 1.0]
    assert weight_error_term(np.array(weights), [0.5]) == 0.25
    assert q_diagnostic(np.array(weights), [0.5]) == 0.5


def test_q_diagnostic_cases():
    p = np.full(4, 0.2)
    assert q_diagnostic(np.tile(1 / p, (3, 1)), p) == pytest.approx(5.0, rel=1e-15)
    p = np.array([0.1, 0.3, 0.8])
    assert q_diagnostic(np.ones((5, 3)), p) == pytest.approx(p.mean(), rel=1e-15)


def test_weight_error_inputs_checked():
    with pytest.raises(ValueError):
        weight_error_term(np.ones((0, 2)), [0.5, 0.5])
    with pytest.raises(ValueError):
        weight_error_term(np.ones((3, 2)), [0.5])
    with pytest.raises(ValueError):
        weight_error_term(np.array([[1.0, np.nan]]), [0.5, 0.5])


def test_targets_bias_example():
    obj = QuadraticIsotropic(np.array([[0.0], [4.0]]))
    t = Targets(obj, [0.9, 0.1], 1.0)
    assert t.x_h[0] == pytest.approx(0.4, rel=1e-15)
    assert t.x_f[0] == 2.0
    gaps = optimality_gaps(t.x_f, t)
    assert gaps["dist_f"] == 0.0 and gaps["grad_norm_f"] == 0.0
    assert gaps["dist_h"] == pytest.approx(1.6)


def test_uniform_participation_is_unbiased():
    obj = QuadraticIsotropic(np.array([[0.0, 1.0], [4.0, -2.0], [1.0, 1.0]]))
    t = Targets(obj, [0.3, 0.3, 0.3], 1.0)
    assert np.allclose(t.x_h, t.x_f, rtol=0, atol=1e-15)
    t = Targets(obj, [0.9, 0.2, 0.5], 1 / np.array([0.9, 0.2, 0.5]))
    assert np.allclose(t.x_h, t.x_f, rtol=0, atol=1e-15)


@given(bits=st.lists(st.lists(st.booleans(), min_size=3, max_size=3), min_size=1, max_size=80))
@settings(max_examples=50, deadline=None)
def test_recorded_weight_error_matches_full_trace(bits):
    p = np.array([0.2, 0.5, 0.7])
    est = WeightEstimator("fedau_finite_K", 3, K=4)
    rec = MetricRecorder(p, None, cadence=1)
    weights = []
    for t, row in enumerate(bits):
        w = est.weights if t == 0 else est.advance(bits[t - 1])
        weights.append(w)
        rec.observe_weights(w)
        rec.row(t + 1, np.zeros(1), 0.0)
    for t in range(1, len(bits) + 1):
        assert rec.rows[t - 1]["weight_error_cum"] == pytest.approx(weight_error_term(np.array(weights[:t]), p), rel=1e-12)
        assert rec.rows[t - 1]["q_diag"] == pytest.approx(q_diagnostic(np.array(weights[:t]), p), rel=1e-12)


def test_csv_round_trip_is_exact():
    rows = [{"t": 0, "grad_norm_f": 0.1, "dist_f": 1 / 3, "dist_h": 2e-300, "weight_error_cum": 0.0,
             "q_diag": 7.0, "step_norm": 1e300, "loss_f": math.pi}]
    text = rows_to_csv(rows, ["config_sha256=abc", "seed=1"])
    assert text.startswith("# config_sha256=abc\n# seed=1\nt,")
    assert read_csv(text) == rows
