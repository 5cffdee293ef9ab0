"""Feed-forward network surrogates, one per performance metric.

Each model optionally maps inputs to log space (logit of the efficiencies,
log of downtimes and capacities), standardises them with the training
mean/std, applies affine + ReLU hidden layers and a linear scalar output.
The output is de-standardised and then rescaled: WIP is fitted as the fill
fraction WIP/N, and each occupancy-band probability as the average
probability per integer level of its band.  Training
minimises the mean squared error plus a small weight penalty with
full-batch L-BFGS.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .metrics import metric_errors, surrogate_metric_ids

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1


class TrainingError(RuntimeError):
    pass


class BundleFormatError(ValueError):
    pass


INPUT_TRANSFORMS = ("identity", "log")


def default_hidden_sizes(M: int) -> tuple[int, ...]:
    return (64, 32, 32) if M >= 5 else (64, 32)


def transform_inputs(X: np.ndarray, kind: str) -> np.ndarray:
    """``log``: logit(e), log(T_down) and log(N); CVs pass through."""
    X = np.asarray(X, dtype=float)
    if kind == "identity":
        return X
    if kind != "log":
        raise ValueError(f"unknown input transform {kind!r}")
    M = (X.shape[1] + 1) // 5
    out = X.copy()
    e = X[:, :M]
    out[:, :M] = np.log(e / (1.0 - e))
    out[:, M : 2 * M] = np.log(X[:, M : 2 * M])
    out[:, 4 * M :] = np.log(X[:, 4 * M :])
    return out


OUTPUT_SCALES = ("none", "capacity", "band1", "band2", "band3")


def band_levels(N, k: int) -> np.ndarray:
    """Number of integer levels 0 < h < N in occupancy band k (1..4)."""
    N = np.asarray(N, dtype=float).astype(np.int64)
    edges = [np.zeros_like(N), N // 4, N // 2, (3 * N) // 4, N - 1]
    return (edges[k] - edges[k - 1]).astype(float)


def output_scaling(metric_id: str, n_inputs: int) -> tuple[str, int]:
    """How a metric's output is scaled and by which capacity column.

    WIP_j is fitted as WIP_j / N_j; PLk_j as the mean probability per integer
    level of band k, which removes the jumps caused by N_j mod 4.
    """
    M = (n_inputs + 1) // 5
    if metric_id.startswith("WIP_"):
        return "capacity", 4 * M + int(metric_id[4:]) - 1
    if metric_id[:2] == "PL" and metric_id[2] in "123":
        return f"band{metric_id[2]}", 4 * M + int(metric_id[4:]) - 1
    return "none", -1


def scale_factor(kind: str, X: np.ndarray, col: int) -> np.ndarray | None:
    if kind == "none":
        return None
    if kind == "capacity":
        return X[:, col]
    return band_levels(X[:, col], int(kind[4:]))


@dataclass(frozen=True, eq=False)
class MlpModel:
    """``weights[l]`` has shape (fan_in, fan_out); the last layer has fan_out 1."""

    metric_id: str
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    feat_mean: np.ndarray
    feat_std: np.ndarray
    input_transform: str = "identity"
    y_mean: float = 0.0
    y_std: float = 1.0
    output_scale: str = "none"
    scale_col: int = -1

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty and of equal length")
        dims = [self.weights[0].shape[0]]
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or W.shape[0] != dims[-1] or b.shape != (W.shape[1],):
                raise ValueError(f"layer dimensions do not chain: {[w.shape for w in self.weights]}")
            dims.append(W.shape[1])
        if dims[-1] != 1:
            raise ValueError("output layer must have a single unit")
        if self.feat_mean.shape != (dims[0],) or self.feat_std.shape != (dims[0],):
            raise ValueError("standardisation vectors must match the input dimension")
        if not np.all(self.feat_std > 0):
            raise ValueError("standardisation std entries must be positive")
        if self.input_transform not in INPUT_TRANSFORMS:
            raise ValueError(f"unknown input transform {self.input_transform!r}")
        if not self.y_std > 0:
            raise ValueError("output std must be positive")
        if self.output_scale not in OUTPUT_SCALES:
            raise ValueError(f"unknown output scale {self.output_scale!r}")
        if (self.output_scale == "none") != (self.scale_col == -1) or not -1 <= self.scale_col < dims[0]:
            raise ValueError(f"scale column {self.scale_col} invalid for output scale {self.output_scale!r}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(self.dims[1:-1])

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Batch prediction, X of shape (n, input_dim) -> (n,)."""
        X = np.asarray(X, dtype=float)
        A = (transform_inputs(X, self.input_transform) - self.feat_mean) / self.feat_std
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            A = A @ W + b
            if l < last:
                A = np.maximum(A, 0.0)
        out = A[:, 0] * self.y_std + self.y_mean
        f = scale_factor(self.output_scale, X, self.scale_col)
        if f is not None:
            out = out * f
        return out


def predict(model: MlpModel, params: Sequence[float]) -> float:
    x = np.asarray(params, dtype=float)
    if x.shape != (model.input_dim,):
        raise ValueError(f"expected {model.input_dim} predictors, got shape {x.shape}")
    return float(model.forward(x[None, :])[0])


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    max_iter: int = 1000
    history: int = 10
    gtol: float = 1e-6
    seed: int = 0
    # line-search failures tolerated before falling back to Adam
    max_restarts: int = 3
    fallback_steps: int = 200
    fallback_lr: float = 1e-3
    # penalty on the squared norm of all network parameters
    l2: float = 1e-4
    input_transform: str = "log"
    # fit WIP_j / N_j and PLk_j per band level instead of natural units
    scale_outputs: bool = True


def _layer_shapes(dims: Sequence[int]) -> list[tuple[int, int]]:
    return list(zip(dims[:-1], dims[1:]))


def init_params(dims: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Flat parameter vector: per layer W (row-major) then b."""
    chunks = []
    for fan_in, fan_out in _layer_shapes(dims):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-lim, lim, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unpack(theta: np.ndarray, dims: Sequence[int]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    Ws, bs = [], []
    k = 0
    for fan_in, fan_out in _layer_shapes(dims):
        Ws.append(theta[k : k + fan_in * fan_out].reshape(fan_in, fan_out))
        k += fan_in * fan_out
        bs.append(theta[k : k + fan_out])
        k += fan_out
    if k != theta.size:
        raise ValueError("parameter vector length does not match dims")
    return Ws, bs


def loss_and_grad(theta: np.ndarray, dims: Sequence[int], Z: np.ndarray, y: np.ndarray, l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean squared error (+ l2 * |theta|^2) and its gradient for standardised inputs Z."""
    Ws, bs = unpack(theta, dims)
    acts = [Z]
    A = Z
    last = len(Ws) - 1
    for l, (W, b) in enumerate(zip(Ws, bs)):
        A = A @ W + b
        if l < last:
            A = np.maximum(A, 0.0)
        acts.append(A)
    n = Z.shape[0]
    r = acts[-1][:, 0] - y
    loss = float(r @ r) / n
    delta = (2.0 / n) * r[:, None]
    gW, gb = [None] * len(Ws), [None] * len(Ws)
    for l in range(last, -1, -1):
        gW[l] = acts[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ Ws[l].T) * (acts[l] > 0)
    grad = np.concatenate([np.concatenate([gw.ravel(), g]) for gw, g in zip(gW, gb)])
    if l2:
        loss += l2 * float(theta @ theta)
        grad += 2.0 * l2 * theta
    return loss, grad


def _adam(fun, theta, steps, lr):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        _, g = fun(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


@dataclass
class TrainReport:
    metric_id: str
    train_mse: float
    iterations: int
    message: str
    fallbacks: int = 0
    history: list[float] = field(default_factory=list)


def train_arrays(
    X: np.ndarray,
    y: np.ndarray,
    metric_id: str,
    hidden_sizes: Sequence[int] = (64, 32),
    cfg: TrainConfig | None = None,
) -> tuple[MlpModel, TrainReport]:
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("X must be (n, d) and y (n,)")
    kind, scale_col = output_scaling(metric_id, X.shape[1]) if cfg.scale_outputs else ("none", -1)
    f = scale_factor(kind, X, scale_col)
    if f is None:
        target = y
    else:
        # an empty band has probability exactly zero and predicts zero
        target = np.where(f > 0, y / np.where(f > 0, f, 1.0), 0.0)
    y_mean = float(target.mean())
    y_std = float(target.std()) or 1.0
    t = (target - y_mean) / y_std
    F = transform_inputs(X, cfg.input_transform)
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (F - mean) / std
    dims = [X.shape[1], *hidden_sizes, 1]
    theta = init_params(dims, np.random.default_rng(cfg.seed))

    history: list[float] = []

    def fun(th):
        f, g = loss_and_grad(th, dims, Z, t, cfg.l2)
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            raise TrainingError(f"non-finite training loss for {metric_id} (loss={f})")
        return f, g

    iters, message, fallbacks = 0, "no iterations requested", 0
    remaining = cfg.max_iter
    while remaining > 0:
        res = minimize(
            fun,
            theta,
            jac=True,
            method="L-BFGS-B",
            callback=lambda intermediate_result: history.append(float(intermediate_result.fun)),
            options={"maxcor": cfg.history, "maxiter": remaining, "gtol": cfg.gtol, "ftol": 0.0},
        )
        theta = res.x
        iters += res.nit
        remaining -= max(res.nit, 1)
        message = str(res.message)
        if res.status == 2 and "ABNORMAL" in message.upper() and fallbacks < cfg.max_restarts and remaining > 0:
            fallbacks += 1
            log.warning("line search failed for %s after %d iterations; running %d Adam steps", metric_id, iters, cfg.fallback_steps)
            theta = _adam(fun, theta, cfg.fallback_steps, cfg.fallback_lr)
            continue
        break

    Ws, bs = unpack(theta, dims)
    model = MlpModel(
        metric_id, tuple(W.copy() for W in Ws), tuple(b.copy() for b in bs), mean, std,
        cfg.input_transform, y_mean, y_std, kind, scale_col,
    )
    mse = fun(theta)[0]
    return model, TrainReport(metric_id, mse, iters, message, fallbacks, history)


def train(rows, metric_id: str, hidden_sizes: Sequence[int] | None = None, cfg: TrainConfig | None = None):
    """Train the surrogate for one metric from dataset rows; returns (model, report)."""
    if len(rows) < 100:
        raise ValueError(f"need at least 100 training rows, got {len(rows)}")
    M = rows[0].M
    if metric_id not in surrogate_metric_ids(M):
        raise ValueError(f"{metric_id!r} is not a surrogate metric for M={M}")
    X = np.stack([r.predictors for r in rows])
    y = np.array([r.responses.get(metric_id) for r in rows])
    return train_arrays(X, y, metric_id, hidden_sizes or default_hidden_sizes(M), cfg)


# -- bundles -----------------------------------------------------------------

class SurrogateBundle:
    """One model per surrogate metric of an M-machine line."""

    def __init__(self, M: int, models: dict[str, MlpModel], version: int = BUNDLE_VERSION):
        ids = surrogate_metric_ids(M)
        if set(models) != set(ids):
            raise ValueError(f"bundle for M={M} needs exactly {len(ids)} models")
        for mid, m in models.items():
            if m.input_dim != 5 * M - 1:
                raise ValueError(f"model {mid} has input_dim {m.input_dim}, expected {5 * M - 1}")
        self.M = M
        self.version = version
        self.models = {k: models[k] for k in ids}
        self._stack = None

    @property
    def metric_ids(self) -> list[str]:
        return list(self.models)

    def _stacked(self):
        if self._stack is None:
            ms = list(self.models.values())
            if len({tuple(m.dims) for m in ms}) != 1 or len({m.input_transform for m in ms}) != 1:
                self._stack = False
            else:
                self._stack = (
                    ms[0].input_transform,
                    np.array([m.y_mean for m in ms]),
                    np.array([m.y_std for m in ms]),
                    [(m.output_scale, m.scale_col) for m in ms],
                    np.stack([m.feat_mean for m in ms]),
                    np.stack([m.feat_std for m in ms]),
                    [np.stack([m.weights[l] for m in ms]) for l in range(len(ms[0].weights))],
                    [np.stack([m.biases[l] for m in ms])[:, None, :] for l in range(len(ms[0].weights))],
                )
        return self._stack

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        """Predictions for a batch: (n, 5M-1) -> (n, K) in metric-id order."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != 5 * self.M - 1:
            raise ValueError(f"expected {5 * self.M - 1} predictors, got {X.shape[1]}")
        st = self._stacked()
        if st is False:
            return np.stack([m.forward(X) for m in self.models.values()], axis=1)
        kind, y_mean, y_std, cols, mean, std, Ws, bs = st
        F = transform_inputs(X, kind)
        A = (F[None, :, :] - mean[:, None, :]) / std[:, None, :]
        last = len(Ws) - 1
        for l in range(len(Ws)):
            A = np.matmul(A, Ws[l]) + bs[l]
            if l < last:
                np.maximum(A, 0.0, out=A)
        out = A[:, :, 0].T * y_std + y_mean
        for k, (kind, col) in enumerate(cols):
            f = scale_factor(kind, X, col)
            if f is not None:
                out[:, k] *= f
        return out

    def predict_vector(self, predictors: Sequence[float]) -> np.ndarray:
        return self.predict_matrix(np.asarray(predictors, dtype=float)[None, :])[0]


def train_bundle(rows, hidden_sizes=None, cfg: TrainConfig | None = None):
    """Train every surrogate for the rows' M; returns (bundle, reports)."""
    cfg = cfg or TrainConfig()
    M = rows[0].M
    X = np.stack([r.predictors for r in rows])
    models, reports = {}, {}
    for k, mid in enumerate(surrogate_metric_ids(M)):
        y = np.array([r.responses.get(mid) for r in rows])
        sub = replace(cfg, seed=cfg.seed + 7919 * k)
        models[mid], reports[mid] = train_arrays(X, y, mid, hidden_sizes or default_hidden_sizes(M), sub)
        log.info("trained %s: mse=%.3e iters=%d", mid, reports[mid].train_mse, reports[mid].iterations)
    return SurrogateBundle(M, models), reports


def evaluate(bundle: SurrogateBundle, rows) -> dict[str, float]:
    """Mean error per surrogate metric over ``rows`` (percent for PR, WIP, B0)."""
    if not rows:
        raise ValueError("empty test set")
    X = np.stack([r.predictors for r in rows])
    pred = bundle.predict_matrix(X)
    truth = np.stack([r.responses.surrogate_vector() for r in rows])
    N = X[:, 4 * bundle.M :]
    errs = metric_errors(pred, truth, N, bundle.metric_ids)
    return {mid: float(errs[:, k].mean()) for k, mid in enumerate(bundle.metric_ids)}


# -- persistence -------------------------------------------------------------

def _payload(bundle: SurrogateBundle) -> dict:
    return {
        "version": bundle.version,
        "M": bundle.M,
        "models": {
            mid: {
                "dims": m.dims,
                "weights": [W.tolist() for W in m.weights],
                "biases": [b.tolist() for b in m.biases],
                "feat_mean": m.feat_mean.tolist(),
                "feat_std": m.feat_std.tolist(),
                "input_transform": m.input_transform,
                "y_mean": m.y_mean,
                "y_std": m.y_std,
                "output_scale": m.output_scale,
                "scale_col": m.scale_col,
            }
            for mid, m in bundle.models.items()
        },
    }


def _checksum(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save(bundle: SurrogateBundle, path) -> None:
    payload = _payload(bundle)
    payload["checksum"] = _checksum(payload)
    Path(path).write_text(json.dumps(payload))


def load(path, M: int | None = None) -> SurrogateBundle:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"cannot read bundle {path}: {exc}") from exc
    if not isinstance(payload, dict) or "checksum" not in payload:
        raise BundleFormatError("bundle has no checksum")
    checksum = payload.pop("checksum")
    if checksum != _checksum(payload):
        raise BundleFormatError("bundle checksum mismatch")
    if payload.get("version") != BUNDLE_VERSION:
        raise BundleFormatError(f"unsupported bundle version {payload.get('version')!r}")
    if M is not None and payload["M"] != M:
        raise BundleFormatError(f"bundle is for M={payload['M']}, expected M={M}")
    models = {}
    for mid, d in payload["models"].items():
        Ws = tuple(np.array(W, dtype=float) for W in d["weights"])
        bs = tuple(np.array(b, dtype=float) for b in d["biases"])
        try:
            m = MlpModel(
                mid, Ws, bs, np.array(d["feat_mean"], dtype=float), np.array(d["feat_std"], dtype=float),
                d["input_transform"], float(d["y_mean"]), float(d["y_std"]),
                d["output_scale"], int(d["scale_col"]),
            )
        except (KeyError, ValueError) as exc:
            raise BundleFormatError(f"model {mid}: {exc}") from exc
        if m.dims != d["dims"]:
            raise BundleFormatError(f"model {mid}: stored dims {d['dims']} do not match weights")
        models[mid] = m
    try:
        return SurrogateBundle(payload["M"], models, payload["version"])
    except ValueError as exc:
        raise BundleFormatError(str(exc)) from exc
