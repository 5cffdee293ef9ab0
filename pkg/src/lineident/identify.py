"""Machine-parameter identification from observed performance metrics.

The objective is the mean squared residual between surrogate predictions
and observed metrics, with WIP residuals scaled by the buffer capacity.
It is minimised with multi-start PSO over a box of machine parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .metrics import MetricsVector, metric_errors, parse_metric_id, surrogate_metric_ids
from .model import LineConfig
from .mpso import PsoConfig, SearchSpace, SolutionSet, mpso
from .simulator import SimConfig, simulate_metrics
from .surrogate import SurrogateBundle

log = logging.getLogger(__name__)

VALID_THRESHOLD = 1e-4
AGGREGATE_TOLERANCE = 1e-3


@dataclass(frozen=True)
class IdentifyBounds:
    e: tuple[float, float] = (0.7, 0.95)
    T_down: tuple[float, float] = (2.0, 20.0)
    cv: tuple[float, float] = (0.1, 1.0)

    def space(self, M: int) -> SearchSpace:
        lo = np.repeat([self.e[0], self.T_down[0], self.cv[0], self.cv[0]], M)
        hi = np.repeat([self.e[1], self.T_down[1], self.cv[1], self.cv[1]], M)
        return SearchSpace(lo, hi)

    @classmethod
    def from_dict(cls, d: dict) -> "IdentifyBounds":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class ObservedMetrics:
    """Observed values of the surrogate metrics (residual order) and the known capacities."""

    values: np.ndarray
    N: tuple[int, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "N", tuple(int(n) for n in self.N))
        M = len(self.N) + 1
        ids = surrogate_metric_ids(M)
        if vals.shape != (len(ids),):
            raise ValueError(f"expected {len(ids)} observed metrics for M={M}, got {vals.shape}")
        for k, mid in enumerate(ids):
            name, j = parse_metric_id(mid)
            if name == "WIP":
                if not 0 <= vals[k] <= self.N[j]:
                    raise ValueError(f"{mid}={vals[k]} outside [0, {self.N[j]}]")
            elif not 0 <= vals[k] <= 1:
                raise ValueError(f"{mid}={vals[k]} outside [0, 1]")

    @property
    def M(self) -> int:
        return len(self.N) + 1

    @property
    def metric_ids(self) -> list[str]:
        return surrogate_metric_ids(self.M)

    @classmethod
    def from_metrics(cls, m: MetricsVector, N: Sequence[int]) -> "ObservedMetrics":
        return cls(m.surrogate_vector(), tuple(N))

    def to_dict(self) -> dict:
        return {"N": list(self.N), "metrics": dict(zip(self.metric_ids, self.values.tolist()))}

    @classmethod
    def from_dict(cls, d: dict) -> "ObservedMetrics":
        N = tuple(d["N"])
        ids = surrogate_metric_ids(len(N) + 1)
        return cls(np.array([d["metrics"][k] for k in ids]), N)


def _wip_scale(M: int, N) -> np.ndarray:
    scale = np.ones(1 + 7 * (M - 1))
    for k, mid in enumerate(surrogate_metric_ids(M)):
        name, j = parse_metric_id(mid)
        if name == "WIP":
            scale[k] = 1.0 / N[j]
    return scale


def residual_matrix(X, N, bundle: SurrogateBundle, targets: ObservedMetrics) -> np.ndarray:
    """Residuals for a batch of 4M-parameter vectors, shape (n, K_PM)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    M = bundle.M
    if X.shape[1] != 4 * M or len(N) != M - 1:
        raise ValueError(f"expected (n, {4 * M}) parameters and {M - 1} capacities")
    if targets.M != M:
        raise ValueError("targets and bundle disagree on M")
    Nrow = np.broadcast_to(np.asarray(N, dtype=float), (X.shape[0], M - 1))
    pred = bundle.predict_matrix(np.hstack([X, Nrow]))
    return (pred - targets.values) * _wip_scale(M, N)


def residuals(x, N, bundle: SurrogateBundle, targets: ObservedMetrics) -> np.ndarray:
    return residual_matrix(np.asarray(x, dtype=float)[None, :], N, bundle, targets)[0]


def objective(x, N, bundle: SurrogateBundle, targets: ObservedMetrics) -> float:
    """Mean squared residual ||F||^2 / K_PM."""
    r = residuals(x, N, bundle, targets)
    return float(r @ r) / r.size


def objective_batch(X, N, bundle, targets) -> np.ndarray:
    R = residual_matrix(X, N, bundle, targets)
    return np.einsum("ij,ij->i", R, R) / R.shape[1]


def error_report(estimated, targets, N, metric_ids: Sequence[str] | None = None) -> dict:
    """Per-metric errors; PR/B0 with a zero true value fall back to absolute error (flagged)."""
    estimated = np.asarray(estimated, dtype=float)
    targets = np.asarray(targets, dtype=float)
    M = len(N) + 1
    ids = list(metric_ids or surrogate_metric_ids(M))
    err, flags = metric_errors(estimated[None], targets[None], np.asarray(N)[None], ids, return_flags=True)
    return {
        "errors": dict(zip(ids, err[0].tolist())),
        "absolute_fallback": [mid for mid, f in zip(ids, flags[0]) if f],
    }


@dataclass
class IdentifyResult:
    solutions: SolutionSet
    f_nn: np.ndarray
    valid: np.ndarray
    errors: np.ndarray
    metric_ids: list[str]
    N: tuple[int, ...]
    mode: str
    seed: int
    config: dict
    f_sim: np.ndarray | None = None
    errors_sim: np.ndarray | None = None
    aggregate_residuals: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return self.solutions.x

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def valid_x(self) -> np.ndarray:
        return self.x[self.valid]

    def best(self) -> np.ndarray:
        return self.x[int(np.argmin(self.f_nn))]

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "seed": self.seed,
            "N": list(self.N),
            "metric_ids": self.metric_ids,
            "config": self.config,
            "solutions": self.x.tolist(),
            "f_nn": self.f_nn.tolist(),
            "valid": self.valid.tolist(),
            "errors_nn": self.errors.tolist(),
            "runs": [
                {"iterations": r.iterations, "evaluations": r.evaluations, "stop_reason": r.stop_reason, "f": r.f}
                for r in self.solutions.runs
            ],
            "tightened_bounds": None
            if self.solutions.tightened is None
            else [b.tolist() for b in self.solutions.tightened],
        }
        if self.f_sim is not None:
            d["f_sim"] = [None if not np.isfinite(v) else float(v) for v in self.f_sim]
            d["errors_sim"] = [None if not np.all(np.isfinite(r)) else r.tolist() for r in self.errors_sim]
        if self.aggregate_residuals is not None:
            d["aggregate_residuals"] = self.aggregate_residuals.tolist()
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _rescore_by_simulation(result: IdentifyResult, bundle, targets, sim_cfg: SimConfig):
    n = len(result.f_nn)
    f_sim = np.full(n, np.nan)
    errs = np.full((n, len(result.metric_ids)), np.nan)
    scale = _wip_scale(bundle.M, targets.N)
    for k in np.flatnonzero(result.valid):
        line = LineConfig.from_vector(result.x[k], targets.N)
        sim = simulate_metrics(line, sim_cfg).surrogate_vector()
        r = (sim - targets.values) * scale
        f_sim[k] = float(r @ r) / r.size
        errs[k] = metric_errors(sim[None], targets.values[None], np.asarray(targets.N)[None], result.metric_ids)[0]
    result.f_sim = f_sim
    result.errors_sim = errs


def _finish(x_full, sols, bundle, targets, space_check, free_idx, mode, seed, cfg, bounds, threshold, extra_valid=None):
    f_nn = objective_batch(x_full, targets.N, bundle, targets)
    inside = np.array([space_check.contains(x[free_idx]) for x in x_full])
    valid = inside & (f_nn < threshold)
    if extra_valid is not None:
        valid &= extra_valid
    M = bundle.M
    pred = bundle.predict_matrix(np.hstack([x_full, np.broadcast_to(np.asarray(targets.N, float), (len(x_full), M - 1))]))
    errs = metric_errors(pred, targets.values[None, :], np.asarray(targets.N)[None, :], targets.metric_ids)
    sols.x = x_full
    return IdentifyResult(
        solutions=sols,
        f_nn=f_nn,
        valid=valid,
        errors=errs,
        metric_ids=targets.metric_ids,
        N=targets.N,
        mode=mode,
        seed=int(seed),
        config={"pso": cfg.to_dict(), "bounds": asdict(bounds), "threshold": threshold},
    )


def identify(
    targets: ObservedMetrics,
    bundle: SurrogateBundle,
    cfg: PsoConfig | None = None,
    bounds: IdentifyBounds | None = None,
    seed: int = 0,
    *,
    sim_cfg: SimConfig | None = None,
    threshold: float = VALID_THRESHOLD,
) -> IdentifyResult:
    """Run M-PSO over all 4M parameters; optionally re-score valid solutions by simulation."""
    cfg = cfg or PsoConfig()
    bounds = bounds or IdentifyBounds()
    M = bundle.M
    if targets.M != M:
        raise ValueError(f"bundle is for M={M} but targets have M={targets.M}")
    space = bounds.space(M)
    sols = mpso(
        lambda X: objective_batch(X, targets.N, bundle, targets),
        space,
        cfg,
        seed,
        efficiency_idx=range(M),
        vectorized=True,
    )
    res = _finish(sols.x, sols, bundle, targets, space, np.arange(4 * M), "gamma", seed, cfg, bounds, threshold)
    if sim_cfg is not None:
        _rescore_by_simulation(res, bundle, targets, sim_cfg)
    return res


def identify_exponential(
    targets: ObservedMetrics,
    bundle: SurrogateBundle,
    cfg: PsoConfig | None = None,
    bounds: IdentifyBounds | None = None,
    seed: int = 0,
    *,
    sim_cfg: SimConfig | None = None,
    threshold: float = VALID_THRESHOLD,
) -> IdentifyResult:
    """Identify with every CV frozen at 1 (exponential up- and downtimes)."""
    cfg = cfg or PsoConfig()
    bounds = bounds or IdentifyBounds()
    M = bundle.M
    if targets.M != M:
        raise ValueError(f"bundle is for M={M} but targets have M={targets.M}")
    full = bounds.space(M)
    free = np.arange(2 * M)
    space = SearchSpace(full.lower[free], full.upper[free])

    def expand(Z):
        Z = np.atleast_2d(Z)
        return np.hstack([Z, np.ones((Z.shape[0], 2 * M))])

    sols = mpso(
        lambda Z: objective_batch(expand(Z), targets.N, bundle, targets),
        space,
        cfg,
        seed,
        efficiency_idx=range(M),
        vectorized=True,
    )
    res = _finish(expand(sols.x), sols, bundle, targets, space, free, "exponential", seed, cfg, bounds, threshold)
    res.extra["free_dims"] = int(free.size)
    if sim_cfg is not None:
        _rescore_by_simulation(res, bundle, targets, sim_cfg)
    return res


def aggregate_residual_matrix(X, t_bar: float, cv_bar: float) -> np.ndarray:
    """(mean T_down - t_bar, mean CV_avg - cv_bar) per row."""
    X = np.atleast_2d(X)
    M = X.shape[1] // 4
    t = X[:, M : 2 * M].mean(axis=1) - t_bar
    cv = X[:, 2 * M : 4 * M].mean(axis=1) - cv_bar
    return np.stack([t, cv], axis=1)


def _shift_to_mean(X, lo, hi, target, steps=60):
    """Per row, the common shift s with mean(clip(x + s, lo, hi)) == target (bisection)."""
    a = np.min(lo) - X.max(axis=1)
    b = np.max(hi) - X.min(axis=1)
    for _ in range(steps):
        s = 0.5 * (a + b)
        below = np.clip(X + s[:, None], lo, hi).mean(axis=1) < target
        a = np.where(below, s, a)
        b = np.where(below, b, s)
    return np.clip(X + (0.5 * (a + b))[:, None], lo, hi)


def project_to_averages(X, lower, upper, t_bar: float, cv_bar: float) -> np.ndarray:
    """Move each row onto mean T_down == t_bar and mean CV == cv_bar inside the box.

    Each group is shifted by a common amount and clipped, which is the
    Euclidean projection onto {mean == target} intersected with the box.
    """
    X = np.array(X, dtype=float)
    M = X.shape[1] // 4
    for cols, target in ((slice(M, 2 * M), t_bar), (slice(2 * M, 4 * M), cv_bar)):
        X[:, cols] = _shift_to_mean(X[:, cols], lower[cols], upper[cols], target)
    return X


def identify_with_averages(
    targets: ObservedMetrics,
    bundle: SurrogateBundle,
    cfg: PsoConfig | None = None,
    bounds: IdentifyBounds | None = None,
    t_bar: float = 9.0,
    cv_bar: float = 0.5,
    seed: int = 0,
    *,
    penalty: float = 1e3,
    sim_cfg: SimConfig | None = None,
    threshold: float = VALID_THRESHOLD,
    aggregate_tol: float = AGGREGATE_TOLERANCE,
    project: bool = True,
) -> IdentifyResult:
    """Identify subject to prescribed overall downtime ``t_bar`` and overall CV ``cv_bar``.

    The averages enter as a quadratic penalty; a solution is accepted when both
    aggregate residuals are below ``aggregate_tol`` and the plain objective is
    below ``threshold``.  With ``penalty == 0`` this is plain ``identify``.
    With ``project`` every particle is also moved onto the averages after each
    step; a penalty alone leaves the swarm stuck in the narrow valley.
    """
    if penalty == 0:
        return identify(targets, bundle, cfg, bounds, seed, sim_cfg=sim_cfg, threshold=threshold)
    cfg = cfg or PsoConfig()
    bounds = bounds or IdentifyBounds()
    M = bundle.M
    if not bounds.T_down[0] <= t_bar <= bounds.T_down[1]:
        raise ValueError(f"t_bar={t_bar} outside the downtime bounds {bounds.T_down}")
    if not bounds.cv[0] <= cv_bar <= bounds.cv[1]:
        raise ValueError(f"cv_bar={cv_bar} outside the CV bounds {bounds.cv}")
    space = bounds.space(M)

    def penalised(X):
        A = aggregate_residual_matrix(X, t_bar, cv_bar)
        return objective_batch(X, targets.N, bundle, targets) + penalty * np.einsum("ij,ij->i", A, A)

    repair = (lambda X, lo, hi: project_to_averages(X, lo, hi, t_bar, cv_bar)) if project else None
    sols = mpso(penalised, space, cfg, seed, efficiency_idx=range(M), vectorized=True, repair=repair)
    agg = aggregate_residual_matrix(sols.x, t_bar, cv_bar)
    ok = np.all(np.abs(agg) < aggregate_tol, axis=1)
    res = _finish(sols.x, sols, bundle, targets, space, np.arange(4 * M), "averages", seed, cfg, bounds, threshold, ok)
    res.aggregate_residuals = agg
    res.config.update({"t_bar": t_bar, "cv_bar": cv_bar, "penalty": penalty, "aggregate_tol": aggregate_tol, "project": project})
    if sim_cfg is not None:
        _rescore_by_simulation(res, bundle, targets, sim_cfg)
    return res
