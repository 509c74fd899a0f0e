from __future__ import annotations

import numpy as np
import pytest
from conftest import BIAS_CENTERS, quad_config

from fedau import config as configmod
from fedau.engine import (
    ClientUpdate,
    aggregate_baseline,
    aggregate_weighted,
    load_checkpoint,
    local_update,
    run_experiment,
    simulate_weights,
)
from fedau.errors import ConfigError, DivergenceError
from fedau.objective import QuadraticIsotropic
from fedau.participation import manual_population
from fedau.weighting import WeightEstimator


def cfg_of(**changes):
    return configmod.from_dict(quad_config(**changes))


# local updates -----------------------------------------------------------

def test_zero_step_size_gives_zero_update():
    obj = QuadraticIsotropic(np.array([[1.0, 2.0]]), noise_sigma=0.3)
    assert np.array_equal(local_update(obj, 0, np.array([5.0, -1.0]), 0.0, 4, 0, 0).delta, [0.0, 0.0])


def test_single_exact_step():
    obj = QuadraticIsotropic(np.array([[1.0, 2.0]]))
    x = np.array([3.0, -2.0])
    assert np.allclose(local_update(obj, 0, x, 0.1, 1, 0, 0).delta, -0.1 * (x - [1.0, 2.0]), rtol=0, atol=1e-15)


@pytest.mark.parametrize("gamma", [0.1, 0.3, 0.9])
def test_two_exact_steps_contract(gamma):
    obj = QuadraticIsotropic(np.array([[1.0, 2.0]]))
    x = np.array([3.0, -2.0])
    want = -gamma * (2 - gamma) * (x - [1.0, 2.0])
    assert np.allclose(local_update(obj, 0, x, gamma, 2, 0, 0).delta, want, rtol=0, atol=1e-14)


def test_noisy_update_keyed_by_round_and_client():
    obj = QuadraticIsotropic(np.zeros((2, 3)), noise_sigma=1.0)
    x = np.ones(3)
    a = local_update(obj, 1, x, 0.1, 3, 5, 9).delta
    assert np.array_equal(a, local_update(obj, 1, x, 0.1, 3, 5, 9).delta)
    assert not np.array_equal(a, local_update(obj, 1, x, 0.1, 3, 5, 10).delta)
    assert not np.array_equal(a, local_update(obj, 0, x, 0.1, 3, 5, 9).delta)


# aggregation -------------------------------------------------------------

def test_zero_updates_keep_model():
    x = np.array([1.0, 2.0])
    ups = [ClientUpdate(n, np.zeros(2), True) for n in range(3)]
    assert np.array_equal(aggregate_weighted(x, ups, [1.0, 5.0, 2.0], 0.7, 3), x)


def test_weighted_formula():
    x = np.array([1.0, 1.0])
    d1, d2 = np.array([0.5, -1.0]), np.array([2.0, 4.0])
    out = aggregate_weighted(x, [ClientUpdate(1, d2, True), ClientUpdate(0, d1, True)], [1.0, 2.0], 1.0, 2)
    assert np.array_equal(out, x + 0.5 * (d1 + 2 * d2))


def test_full_participation_baselines_coincide():
    x = np.array([0.3, -0.2])
    gen = np.random.default_rng(0)
    ups = [ClientUpdate(n, gen.standard_normal(2), True) for n in range(4)]
    a = aggregate_baseline("average_participating", x, ups, 0.8, 4)
    b = aggregate_baseline("average_all", x, ups, 0.8, 4)
    assert np.array_equal(a, b)


def test_fedvarp_first_round_is_plain_average():
    x = np.zeros(2)
    ups = [ClientUpdate(0, np.array([1.0, 0.0]), True), ClientUpdate(2, np.array([0.0, 3.0]), True)]
    memory = np.zeros((3, 2))
    out = aggregate_baseline("fedvarp", x, ups, 1.0, 3, memory)
    assert np.array_equal(out, [0.5, 1.5])
    assert np.array_equal(memory, [[1.0, 0.0], [0.0, 0.0], [0.0, 3.0]])


def test_mifa_applies_stale_updates():
    x = np.zeros(1)
    memory = np.zeros((2, 1))
    # Round 0: both clients report; round 1: client 0 only; round 2: nobody.
    x = aggregate_baseline("mifa", x, [ClientUpdate(0, np.array([2.0]), True), ClientUpdate(1, np.array([4.0]), True)], 0.5, 2, memory)
    assert x[0] == 0.5 * 3.0
    x = aggregate_baseline("mifa", x, [ClientUpdate(0, np.array([-1.0]), True)], 0.5, 2, memory)
    assert x[0] == 1.5 + 0.5 * 1.5
    x = aggregate_baseline("mifa", x, [], 0.5, 2, memory)
    assert x[0] == 2.25 + 0.5 * 1.5


def test_memory_required():
    with pytest.raises(ConfigError):
        aggregate_baseline("mifa", np.zeros(2), [], 1.0, 3, None)
    with pytest.raises(ConfigError):
        aggregate_baseline("median", np.zeros(2), [], 1.0, 3, None)


# whole runs --------------------------------------------------------------

def test_zero_rounds_only_initial_row():
    trace = run_experiment(cfg_of(T=0))
    assert [r["t"] for r in trace.rows] == [0]
    assert trace.records == []


def test_row_count_contract():
    trace = run_experiment(cfg_of(T=60, cadence=10))
    assert [r["t"] for r in trace.rows] == list(range(0, 61, 10))
    trace = run_experiment(cfg_of(T=65, cadence=10))
    assert [r["t"] for r in trace.rows] == list(range(0, 61, 10)) + [65]


def test_full_participation_reaches_centroid():
    cfg = cfg_of(T=2000, I=1, gamma=0.05, eta=1.0, algorithm__strategy="constant_one",
                 population__p=[1.0] * 5, objective__noise_sigma=0.0)
    trace = run_experiment(cfg)
    assert np.linalg.norm(trace.x_final - np.mean(BIAS_CENTERS, axis=0)) <= 1e-6


def test_workers_do_not_change_output():
    one = run_experiment(cfg_of(T=40, workers=1)).csv()
    many = run_experiment(cfg_of(T=40, workers=8)).csv()
    assert one == many


def test_known_prob_matches_manual_replay():
    cfg = cfg_of(T=30, algorithm__strategy="known_prob", record_x=True)
    trace = run_experiment(cfg)
    pop = configmod.build_population(cfg)
    obj = configmod.build_objective(cfg, pop)
    w = np.array([1.0 / p for p in pop.p])
    x = np.zeros(2)
    for rec in trace.records:
        ups = [local_update(obj, n, x, cfg.gamma, cfg.I, cfg.seed, rec.t) for n in np.flatnonzero(rec.indicators)]
        x = aggregate_weighted(x, ups, w, cfg.eta, cfg.N)
        assert np.array_equal(x, trace.xs[rec.t + 1])


def test_weights_use_previous_round_only():
    cfg = cfg_of(T=50)
    trace = run_experiment(cfg)
    est = WeightEstimator("fedau_finite_K", 5, K=5)
    pop = configmod.build_population(cfg)
    weights, ind = simulate_weights(pop, est, 50)
    assert np.array_equal(trace.weights(), weights)
    assert np.array_equal(trace.indicators(), ind)


def test_analysis_mode_matches_skipping():
    skip = run_experiment(cfg_of(T=50, record_x=True))
    full = run_experiment(cfg_of(T=50, record_x=True, analysis_mode=True))
    assert all(np.array_equal(a, b) for a, b in zip(skip.xs, full.xs))
    assert skip.csv() == full.csv()


def test_scale_invariance_power_of_two():
    base = run_experiment(cfg_of(T=50, record_x=True))
    scaled = run_experiment(cfg_of(T=50, record_x=True, eta=0.5 / 4, algorithm__weight_scale=4.0))
    assert all(np.array_equal(a, b) for a, b in zip(base.xs, scaled.xs))


def test_constant_one_equals_average_all():
    a = run_experiment(cfg_of(T=50, algorithm__strategy="constant_one"))
    b = run_experiment(cfg_of(T=50, algorithm__strategy="average_all"))
    assert a.csv().split("\n", 3)[3] == b.csv().split("\n", 3)[3]
    assert np.array_equal(a.x_final, b.x_final)


def test_non_participant_data_is_irrelevant():
    doc = quad_config(T=40, record_x=True, population__p=[0.9, 0.8, 0.7, 0.6, 1e-9])
    trace = run_experiment(configmod.from_dict(doc))
    assert not trace.indicators()[:, 4].any()
    doc["objective"]["centers"][4] = [0.0, 0.0]
    other = run_experiment(configmod.from_dict(doc))
    assert all(np.array_equal(a, b) for a, b in zip(trace.xs, other.xs))


@pytest.mark.parametrize("strategy", ["fedau_finite_K", "fedvarp", "mifa", "fedau_ema"])
def test_checkpoint_resume_is_seamless(tmp_path, strategy):
    cfg = cfg_of(T=60, checkpoint_every=20, algorithm__strategy=strategy)
    full = run_experiment(cfg, checkpoint_dir=tmp_path)
    resumed = run_experiment(cfg, resume=load_checkpoint(tmp_path / "checkpoint_00000040.json"))
    assert resumed.csv() == full.csv()
    assert np.array_equal(resumed.x_final, full.x_final)


def test_resume_rejects_other_config(tmp_path):
    cfg = cfg_of(T=20, checkpoint_every=10)
    run_experiment(cfg, checkpoint_dir=tmp_path)
    with pytest.raises(ConfigError):
        run_experiment(cfg_of(T=20, gamma=0.01), resume=load_checkpoint(tmp_path / "checkpoint_00000010.json"))


def test_divergence_returns_partial_trace():
    cfg = cfg_of(T=200, gamma=3.0, eta=1.0, algorithm__strategy="constant_one", population__p=[1.0] * 5)
    with pytest.raises(DivergenceError) as info:
        run_experiment(cfg)
    trace = info.value.trace
    assert trace.status == "diverged"
    assert 0 < len(trace.rows) < 21
    assert trace.rows[0]["t"] == 0


def test_population_mismatch_rejected():
    cfg = cfg_of()
    with pytest.raises(ConfigError):
        run_experiment(cfg, population=manual_population([0.5, 0.5]))
