import json

import numpy as np
import pytest

from conftest import random_bundle
from lineident import surrogate as sg
from lineident.dataset import DatasetRow, build_dataset, generate_lines
from lineident.metrics import MetricsVector, surrogate_metric_ids
from lineident.simulator import SimConfig


def _tiny_model(W1, b1, W2, b2, **kw):
    d = W1.shape[0]
    return sg.MlpModel("PR", (W1, W2), (b1, b2), np.zeros(d), np.ones(d), **kw)


def test_hand_computed_network():
    W1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b1 = np.array([0.0, 0.5])
    W2 = np.array([[1.0], [2.0]])
    b2 = np.array([0.25])
    m = _tiny_model(W1, b1, W2, b2)
    # h = relu([1+2, -1+0.5+0.5]) = [3, 0]; out = 3 + 0.25
    assert sg.predict(m, [1.0, 1.0]) == pytest.approx(3.25)
    # h = relu([-2, -0.5 + 0.5]) = [0, 0]; out = bias
    assert sg.predict(m, [0.0, -1.0]) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        sg.predict(m, [1.0, 1.0, 1.0])


def test_zero_weights_give_bias():
    m = _tiny_model(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 1)), np.array([0.7]))
    X = np.random.default_rng(0).normal(size=(10, 3))
    assert np.all(m.forward(X) == 0.7)


def test_model_validation():
    with pytest.raises(ValueError):
        _tiny_model(np.zeros((2, 3)), np.zeros(2), np.zeros((3, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        _tiny_model(np.zeros((2, 3)), np.zeros(3), np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        sg.MlpModel("PR", (np.zeros((2, 1)),), (np.zeros(1),), np.zeros(2), np.array([1.0, 0.0]))


@pytest.mark.parametrize("l2", [0.0, 1e-2])
def test_gradient_matches_finite_differences(l2):
    rng = np.random.default_rng(1)
    dims = [4, 5, 3, 1]
    # jitter off zero biases so no pre-activation sits on a ReLU kink
    theta = sg.init_params(dims, rng) + 0.05 * rng.normal(size=47)
    Z = rng.normal(size=(20, 4))
    y = rng.normal(size=20)
    _, g = sg.loss_and_grad(theta, dims, Z, y, l2)
    h = 1e-6
    for k in rng.choice(theta.size, 15, replace=False):
        e = np.zeros_like(theta)
        e[k] = h
        fd = (sg.loss_and_grad(theta + e, dims, Z, y, l2)[0] - sg.loss_and_grad(theta - e, dims, Z, y, l2)[0]) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_fits_linear_function():
    rng = np.random.default_rng(2)
    X = rng.uniform(1, 2, size=(800, 3))
    y = X @ np.array([0.5, -0.2, 0.1]) + 0.3
    cfg = sg.TrainConfig(max_iter=500, l2=0.0, input_transform="identity", scale_outputs=False)
    m, rep = sg.train_arrays(X, y, "PR", (16, 8), cfg)
    Xt = rng.uniform(1, 2, size=(200, 3))
    yt = Xt @ np.array([0.5, -0.2, 0.1]) + 0.3
    assert np.sqrt(np.mean((m.forward(Xt) - yt) ** 2)) < 0.01
    assert rep.iterations > 0


def test_zero_iterations_keeps_initial_network():
    rng = np.random.default_rng(3)
    X = rng.uniform(1, 2, size=(50, 3))
    y = rng.normal(size=50)
    cfg = sg.TrainConfig(max_iter=0, seed=4)
    m, rep = sg.train_arrays(X, y, "PR", (5,), cfg)
    Ws, bs = sg.unpack(sg.init_params([3, 5, 1], np.random.default_rng(4)), [3, 5, 1])
    assert rep.iterations == 0
    assert all(np.array_equal(a, b) for a, b in zip(m.weights, Ws))
    assert all(np.array_equal(a, b) for a, b in zip(m.biases, bs))


def test_output_scaling_columns():
    assert sg.output_scaling("PR", 14) == ("none", -1)
    assert sg.output_scaling("WIP_2", 14) == ("capacity", 13)
    assert sg.output_scaling("PL3_1", 14) == ("band3", 12)
    assert sg.output_scaling("B0_1", 14) == ("none", -1)


def test_band_levels():
    # N=20: bands 1..5, 6..10, 11..15, 16..19
    assert [sg.band_levels(20, k) for k in (1, 2, 3, 4)] == [5, 5, 5, 4]
    assert sg.band_levels(np.array([3]), 1)[0] == 0


def _rows(M=3, n=120):
    return build_dataset(generate_lines(M, n, seed=5), SimConfig(100, 1_000, 1, 5))


def test_bundle_training_and_evaluation():
    rows = _rows()
    bundle, reports = sg.train_bundle(rows, hidden_sizes=(6,), cfg=sg.TrainConfig(max_iter=20))
    assert bundle.metric_ids == surrogate_metric_ids(3)
    assert set(reports) == set(bundle.metric_ids)
    X = np.stack([r.predictors for r in rows])
    stacked = bundle.predict_matrix(X)
    direct = np.stack([bundle.models[mid].forward(X) for mid in bundle.metric_ids], axis=1)
    assert np.allclose(stacked, direct, rtol=1e-12, atol=1e-12)
    errs = sg.evaluate(bundle, rows)
    assert set(errs) == set(bundle.metric_ids) and all(v >= 0 for v in errs.values())


def test_evaluate_perfect_predictions_is_zero():
    rows = _rows(n=3)
    b = random_bundle(3)
    X = np.stack([r.predictors for r in rows])
    pred = b.predict_matrix(X)
    fake = []
    for r, p in zip(rows, pred):
        d = r.responses.to_dict()
        d.update(zip(surrogate_metric_ids(3), p.tolist()))
        fake.append(DatasetRow(r.predictors, MetricsVector.from_dict(d, 3)))
    assert all(v == 0 for v in sg.evaluate(b, fake).values())


def test_train_rejects_bad_inputs():
    rows = _rows(n=120)
    with pytest.raises(ValueError):
        sg.train(rows[:50], "PR")
    with pytest.raises(ValueError):
        sg.train(rows, "WIP_7")


def test_save_load_round_trip(tmp_path):
    b = random_bundle(3, seed=2)
    p = tmp_path / "b.json"
    sg.save(b, p)
    again = sg.load(p, M=3)
    X = np.random.default_rng(0).uniform(1, 5, size=(7, 14))
    assert np.array_equal(b.predict_matrix(X), again.predict_matrix(X))
    with pytest.raises(sg.BundleFormatError):
        sg.load(p, M=5)


def test_tampered_bundle_rejected(tmp_path):
    p = tmp_path / "b.json"
    sg.save(random_bundle(3), p)
    d = json.loads(p.read_text())
    d["models"]["PR"]["biases"][-1][0] += 1.0
    p.write_text(json.dumps(d))
    with pytest.raises(sg.BundleFormatError, match="checksum"):
        sg.load(p)
    p.write_text("{not json")
    with pytest.raises(sg.BundleFormatError):
        sg.load(p)
