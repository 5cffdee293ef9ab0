import json

import numpy as np
import pytest

from conftest import constant_bundle
from lineident.identify import (
    IdentifyBounds,
    ObservedMetrics,
    aggregate_residual_matrix,
    error_report,
    identify,
    identify_exponential,
    identify_with_averages,
    objective,
    project_to_averages,
    residuals,
)
from lineident.metrics import surrogate_metric_ids
from lineident.mpso import PsoConfig
from lineident.simulator import SimConfig
from lineident.surrogate import MlpModel, SurrogateBundle

N3 = (20, 20)
X_TRUE = np.r_[0.85, 0.8, 0.9, 8.0, 10.0, 6.0, 0.5, 0.6, 0.4, 0.5, 0.7, 0.3]
SMALL = PsoConfig(K_p=60, K_n0=6, J_max=300, D=4, D_n=2, eps_f=1e-12, stall_patience=30, adapt_every_iteration=True)


def anchored_bundle(x_true, N, value=0.5, seed=0):
    """Linear models through ``value`` at x_true.

    The weights on the 12 line parameters are orthonormal columns, so the
    objective is an isotropic bowl in standardised units with its zero at x_true.
    """
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(15, 12)))
    z = np.r_[x_true, N]
    lo = np.r_[np.full(3, 0.7), np.full(3, 2.0), np.full(6, 0.1), np.full(2, 5.0)]
    hi = np.r_[np.full(3, 0.95), np.full(3, 20.0), np.full(6, 1.0), np.full(2, 40.0)]
    mean, std = (lo + hi) / 2, (hi - lo) / 2
    models = {}
    for k, mid in enumerate(surrogate_metric_ids(3)):
        W = np.zeros((14, 1))
        # WIP residuals are divided by N, so scale those rows back up
        W[:12, 0] = Q[k] * (N[0] if mid.startswith("WIP") else 1.0)
        b = np.array([value - ((z - mean) / std) @ W[:, 0]])
        models[mid] = MlpModel(mid, (W,), (b,), mean, std)
    return SurrogateBundle(3, models)


def half_targets(N=N3):
    return ObservedMetrics(np.full(15, 0.5), N)


def test_metric_counts():
    assert len(surrogate_metric_ids(3)) == 15
    assert len(surrogate_metric_ids(5)) == 29


def test_observed_metrics_validation_and_round_trip():
    t = half_targets()
    assert ObservedMetrics.from_dict(json.loads(json.dumps(t.to_dict()))).values.tolist() == t.values.tolist()
    with pytest.raises(ValueError):
        ObservedMetrics(np.full(14, 0.5), N3)
    bad = np.full(15, 0.5)
    bad[2] = 1.5  # P0_1
    with pytest.raises(ValueError):
        ObservedMetrics(bad, N3)
    bad = np.full(15, 0.5)
    bad[1] = 21.0  # WIP_1 above capacity
    with pytest.raises(ValueError):
        ObservedMetrics(bad, N3)


def test_zero_residual_at_anchor():
    b = anchored_bundle(X_TRUE, N3)
    assert np.allclose(residuals(X_TRUE, N3, b, half_targets()), 0.0, atol=1e-12)


def test_wip_residual_is_relative_to_capacity():
    vals = np.full(15, 0.5)
    vals[1] = 10.0
    b = constant_bundle(3, vals)
    t = np.full(15, 0.5)
    t[1] = 4.0
    r = residuals(X_TRUE, N3, b, ObservedMetrics(t, N3))
    assert r[1] == pytest.approx(0.3)
    assert np.count_nonzero(r) == 1


def test_objective_is_mean_square():
    vals = np.full(15, 0.5)
    vals[0] = 0.51
    f = objective(X_TRUE, N3, constant_bundle(3, vals), half_targets())
    assert f == pytest.approx(1e-4 / 15, rel=1e-9)
    assert f == pytest.approx(6.667e-6, rel=1e-3)


def test_error_report():
    est = np.full(15, 0.5)
    truth = np.full(15, 0.5)
    est[1], truth[1] = 4.2, 4.0
    rep = error_report(est, truth, N3)
    assert rep["errors"]["WIP_1"] == pytest.approx(1.0)
    assert rep["errors"]["PR"] == 0.0
    truth[0] = 0.0
    est[0] = 0.02
    rep = error_report(est, truth, N3)
    assert rep["absolute_fallback"] == ["PR"]
    assert rep["errors"]["PR"] == pytest.approx(0.02)


def test_identify_recovers_zero_objective():
    b = anchored_bundle(X_TRUE, N3)
    res = identify(half_targets(), b, SMALL, seed=3)
    assert res.n_valid >= 1
    assert np.all(res.f_nn[res.valid] < 1e-4)
    assert np.allclose(res.best()[:3], X_TRUE[:3], atol=1e-3)
    space = IdentifyBounds().space(3)
    assert all(space.contains(x) for x in res.x)
    d = json.loads(res.to_json())
    assert d["mode"] == "gamma" and len(d["solutions"]) == SMALL.D


def test_identify_is_deterministic():
    b = anchored_bundle(X_TRUE, N3)
    a = identify(half_targets(), b, SMALL, seed=5)
    c = identify(half_targets(), b, SMALL, seed=5)
    assert np.array_equal(a.x, c.x) and np.array_equal(a.valid, c.valid)


def test_validity_threshold_is_monotone():
    b = anchored_bundle(X_TRUE, N3)
    loose = identify(half_targets(), b, SMALL, seed=1, threshold=1e-2)
    tight = identify(half_targets(), b, SMALL, seed=1, threshold=1e-8)
    assert np.all(loose.valid >= tight.valid)


def test_exponential_mode_fixes_cvs():
    b = anchored_bundle(X_TRUE, N3)
    res = identify_exponential(half_targets(), b, SMALL, seed=2)
    assert res.x.shape == (SMALL.D, 12)
    assert np.all(res.x[:, 6:] == 1.0)
    assert res.extra["free_dims"] == 6
    assert res.mode == "exponential"


def test_zero_penalty_equals_plain_identify():
    b = anchored_bundle(X_TRUE, N3)
    a = identify(half_targets(), b, SMALL, seed=4)
    c = identify_with_averages(half_targets(), b, SMALL, penalty=0.0, seed=4)
    assert np.array_equal(a.x, c.x) and np.array_equal(a.valid, c.valid)


def test_averages_mode_meets_aggregates():
    # X_TRUE has mean downtime 8 and mean CV 0.5, so the constraints are attainable
    b = anchored_bundle(X_TRUE, N3)
    res = identify_with_averages(half_targets(), b, SMALL, t_bar=8.0, cv_bar=0.5, seed=0)
    assert res.aggregate_residuals.shape == (4, 2)
    assert res.n_valid >= 1
    assert np.all(np.abs(res.aggregate_residuals[res.valid]) < 1e-3)
    assert np.allclose(aggregate_residual_matrix(X_TRUE[None], 8.0, 0.5), 0.0)
    with pytest.raises(ValueError):
        identify_with_averages(half_targets(), b, SMALL, t_bar=30.0)
    with pytest.raises(ValueError):
        identify_with_averages(half_targets(), b, SMALL, cv_bar=0.0)


def test_mismatched_m_rejected():
    with pytest.raises(ValueError):
        identify(ObservedMetrics(np.full(29, 0.5), (20,) * 4), anchored_bundle(X_TRUE, N3), SMALL)


def test_simulation_rescoring_only_for_valid():
    b = anchored_bundle(X_TRUE, N3)
    res = identify(half_targets(), b, SMALL, seed=3, sim_cfg=SimConfig(100, 2_000, 1, 0))
    assert np.all(np.isfinite(res.f_sim[res.valid]))
    assert np.all(np.isnan(res.f_sim[~res.valid]))


def test_projection_meets_averages_inside_box():
    rng = np.random.default_rng(0)
    space = IdentifyBounds().space(3)
    X = space.lower + rng.random((50, 12)) * space.width
    P = project_to_averages(X, space.lower, space.upper, 9.0, 0.5)
    assert np.allclose(P[:, 3:6].mean(axis=1), 9.0, atol=1e-9)
    assert np.allclose(P[:, 6:].mean(axis=1), 0.5, atol=1e-9)
    assert np.array_equal(P[:, :3], X[:, :3])
    assert np.all(P >= space.lower) and np.all(P <= space.upper)
    assert np.allclose(project_to_averages(P, space.lower, space.upper, 9.0, 0.5), P, atol=1e-9)


def test_projection_is_nearest_point():
    # oracle: constrained least squares by a general-purpose solver
    from scipy.optimize import minimize

    lo, hi = np.full(3, 2.0), np.full(3, 20.0)
    x = np.array([19.0, 3.0, 18.5])
    target = 16.0
    full = np.r_[0.8, 0.8, 0.8, x, np.full(6, 0.5)]
    lower = np.r_[np.full(3, 0.7), lo, np.full(6, 0.1)]
    upper = np.r_[np.full(3, 0.95), hi, np.full(6, 1.0)]
    got = project_to_averages(full[None], lower, upper, target, 0.5)[0, 3:6]
    ref = minimize(
        lambda y: np.sum((y - x) ** 2), x, method="SLSQP", bounds=list(zip(lo, hi)),
        constraints=[{"type": "eq", "fun": lambda y: y.mean() - target}], options={"ftol": 1e-12},
    ).x
    assert np.allclose(got, ref, atol=1e-5)
    assert got[0] == 20.0


def test_projection_off_is_penalty_only():
    b = anchored_bundle(X_TRUE, N3)
    res = identify_with_averages(half_targets(), b, SMALL, t_bar=8.0, cv_bar=0.5, seed=0, project=False)
    assert res.config["project"] is False
    assert res.aggregate_residuals.shape == (4, 2)
