import json
import math

import numpy as np
import pytest

from manf.metrics import (ScoreReport, baseline_forecast, crps_energy, crps_ensemble, crps_samples, crps_sum, mse,
                          per_series_crps, score)
from manf.tensor import ContractError, Rng

GAUSS_CRPS = 2 * math.exp(0.0) / math.sqrt(2 * math.pi) - 1 / math.sqrt(math.pi)   # 0.23369...


def test_crps_examples():
    assert crps_samples([2.0], 0.0) == pytest.approx(2.0, abs=1e-15)
    assert crps_samples([0.0, 1.0], 0.5) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ContractError):
        crps_samples([], 0.0)


def test_gaussian_crps_constant():
    assert GAUSS_CRPS == pytest.approx(0.2337, abs=1e-4)
    draws = np.random.default_rng(0).normal(size=10**6)
    assert abs(crps_samples(draws, 0.0) - GAUSS_CRPS) <= 0.003


def test_energy_and_piecewise_forms_agree():
    g = np.random.default_rng(1)
    for _ in range(100):
        n = int(g.integers(1, 60))
        s, x = g.normal(size=(n, 3)) * g.uniform(0.1, 10), g.normal(size=3)
        assert np.max(np.abs(crps_energy(s, x) - crps_ensemble(s, x))) <= 1e-10


def _pairwise_energy(s, x):
    s = np.asarray(s)
    return np.mean(np.abs(s - x)) - 0.5 * np.mean(np.abs(s[:, None] - s[None, :]))


def test_piecewise_matches_pairwise_oracle():
    g = np.random.default_rng(2)
    for _ in range(20):
        s, x = g.normal(size=int(g.integers(1, 40))), float(g.normal())
        assert crps_samples(s, x) == pytest.approx(_pairwise_energy(s, x), abs=1e-12)


def test_crps_homogeneity_and_translation():
    g = np.random.default_rng(3)
    for _ in range(100):
        s, x = g.normal(size=30), float(g.normal())
        c, a = float(g.uniform(0.01, 100)), float(g.normal(scale=10))
        base = crps_samples(s, x)
        assert crps_samples(c * s, c * x) == pytest.approx(c * base, rel=1e-10, abs=1e-12)
        assert crps_samples(s + a, x + a) == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_crps_nonnegative_and_zero_iff_exact():
    g = np.random.default_rng(4)
    for _ in range(50):
        s, x = g.normal(size=10), float(g.normal())
        assert crps_samples(s, x) > 0
    assert crps_samples(np.full(7, 1.5), 1.5) == 0.0


def test_crps_sum_reductions_and_loop_oracle():
    g = np.random.default_rng(5)
    s, o = g.normal(size=(40, 6, 1)), g.normal(size=(6, 1))
    uni = np.mean([crps_samples(s[:, t, 0], o[t, 0]) for t in range(6)])
    assert crps_sum(s, o) == pytest.approx(uni, abs=1e-12)
    assert crps_sum(np.broadcast_to(o, (5, 6, 1)), o) == 0.0
    s, o = g.normal(size=(30, 8, 4)), g.normal(size=(8, 4))
    loop = np.mean([crps_samples(s[:, t, :].sum(axis=1), o[t].sum()) for t in range(8)])
    assert abs(crps_sum(s, o) - loop) <= 1e-12


def test_crps_sum_normalized():
    g = np.random.default_rng(6)
    s, o = g.normal(size=(30, 8, 4)), g.normal(size=(8, 4)) + 3
    assert crps_sum(s, o, normalized=True) == pytest.approx(crps_sum(s, o) / np.mean(np.abs(o.sum(-1))))


def test_mse_examples_and_loop_oracle():
    o = np.random.default_rng(7).normal(size=(5, 3))
    assert mse(np.stack([o - 1, o + 1]), o) == pytest.approx(0.0, abs=1e-25)
    assert mse(np.array([[[2.0]]]), np.array([[5.0]])) == 9.0
    g = np.random.default_rng(8)
    s, o = g.normal(size=(20, 5, 3)), g.normal(size=(5, 3))
    ref = 0.0
    for t in range(5):
        for d in range(3):
            ref += (np.mean(s[:, t, d]) - o[t, d]) ** 2
    assert mse(s, o) == pytest.approx(ref / 15, abs=1e-14)


def test_score_report_schema_and_validation():
    g = np.random.default_rng(9)
    rep = score(g.normal(size=(2, 10, 4, 3)), g.normal(size=(2, 4, 3)))
    d = json.loads(rep.to_json())
    assert list(d) == ["crps_sum", "mse", "per_series_crps", "n_samples", "windows"]
    assert d["n_samples"] == 10 and d["windows"] == 2 and len(d["per_series_crps"]) == 3
    with pytest.raises(ValueError):
        ScoreReport(crps_sum=float("nan"), mse=0.0)
    with pytest.raises(ValueError):
        ScoreReport(crps_sum=1.0, mse=-1.0)


def test_per_series_crps_matches_loop():
    g = np.random.default_rng(10)
    s, o = g.normal(size=(15, 4, 2)), g.normal(size=(4, 2))
    ref = [np.mean([crps_samples(s[:, t, d], o[t, d]) for t in range(4)]) for d in range(2)]
    np.testing.assert_allclose(per_series_crps(s, o), ref, atol=1e-12)


def test_persistence_on_constant_series():
    out = baseline_forecast("persistence", np.full((20, 2), 3.5), 6, 50, Rng(0))
    np.testing.assert_array_equal(out, np.full((50, 6, 2), 3.5))


def test_climatology_envelope():
    ctx = np.random.default_rng(11).normal(size=(50, 3))
    out = baseline_forecast("climatology", ctx, 10, 200, Rng(1))
    assert np.all(out >= ctx.min(axis=0)) and np.all(out <= ctx.max(axis=0))
    with pytest.raises(ValueError):
        baseline_forecast("oracle", ctx, 10, 5, Rng(0))


def test_climatology_crps_on_iid_gaussian():
    # climatology resamples N(0,1) context values; scored at the distribution centre
    # this is the Gaussian CRPS constant, and against fresh N(0,1) draws it is 1/sqrt(pi)
    g = np.random.default_rng(12)
    ctx = g.normal(size=(20000, 1))
    s = baseline_forecast("climatology", ctx, 20, 2000, Rng(3))
    at_centre = per_series_crps(s, np.zeros((20, 1)))[0]
    assert abs(at_centre - GAUSS_CRPS) <= 0.1 * GAUSS_CRPS
    fresh = per_series_crps(s, g.normal(size=(20, 1)))[0]
    assert 0.5 * (1 / math.sqrt(math.pi)) < fresh < 1.5 * (1 / math.sqrt(math.pi))
