"""Multi-start particle swarm optimisation over a box.

``pso_run`` is one swarm with adaptive inertia, a stall counter and random
neighbourhoods that grow while the best value stagnates.  ``mpso`` runs ``D``
independent swarms; after the first ``D_n`` finish, the bounds of the
efficiency coordinates are tightened around the mean of their solutions for
the remaining runs.

Particles are updated synchronously: within one iteration every particle
sees the personal bests from the end of the previous iteration, and the
whole swarm is evaluated as one batch.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class ObjectiveError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).copy()
        hi = np.asarray(self.upper, dtype=float).copy()
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ValueError("lower and upper must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("every lower bound must be below its upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def with_bounds(self, idx, lower, upper) -> "SearchSpace":
        lo, hi = self.lower.copy(), self.upper.copy()
        lo[idx] = lower
        hi[idx] = upper
        return SearchSpace(lo, hi)


@dataclass(frozen=True)
class PsoConfig:
    K_p: int = 200
    K_n0: int = 25
    W: float = 1.1
    U_w: float = 1.1
    L_w: float = 0.1
    y1: float = 1.5
    y2: float = 1.5
    eps_f: float = 1e-6
    J_max: int = 10_000
    T_max: float = 900.0
    D: int = 200
    D_n: int = 20
    eps_e: float = 1.0
    # consecutive below-eps_f iterations before stopping; 1 stops at the first
    stall_patience: int = 1
    # False: inertia adapts only after an improvement (as published), which can
    # leave W stuck at U_w once the swarm stalls; True: adapt every iteration
    adapt_every_iteration: bool = False

    def __post_init__(self):
        if not 0 < self.L_w <= self.W <= self.U_w:
            raise ValueError("inertia must satisfy 0 < L_w <= W <= U_w")
        if not 1 <= self.K_n0 <= self.K_p - 1:
            raise ValueError("need 1 <= K_n0 < K_p")
        if not 1 <= self.D_n <= self.D:
            raise ValueError("need 1 <= D_n <= D")
        if self.eps_f <= 0:
            raise ValueError("eps_f must be positive")
        if self.J_max < 0 or self.T_max <= 0:
            raise ValueError("J_max must be >= 0 and T_max > 0")
        if self.eps_e < 0:
            raise ValueError("eps_e must be >= 0")
        if self.stall_patience < 1:
            raise ValueError("stall_patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PsoConfig":
        return cls(**d)


@dataclass
class ParticleState:
    """The whole swarm: positions, velocities and personal bests (one row per particle)."""

    x: np.ndarray
    v: np.ndarray
    p: np.ndarray
    p_f: np.ndarray


@dataclass
class RunResult:
    x: np.ndarray
    f: float
    iterations: int
    evaluations: int
    stop_reason: str
    lower: np.ndarray
    upper: np.ndarray
    log: list[dict] = field(default_factory=list)


def clamp(x: np.ndarray, v: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Move out-of-box coordinates to the nearest bound.

    For those coordinates only, a velocity component outside the velocity box
    ``|v_k| <= U_k - L_k`` is reset to zero.
    """
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    out = (x < lower) | (x > upper)
    fast = out & (np.abs(v) > (upper - lower))
    x = np.clip(x, lower, upper)
    v[fast] = 0.0
    return x, v


def _batch(objective, vectorized):
    if vectorized:
        return lambda X: np.asarray(objective(X), dtype=float).reshape(-1)
    return lambda X: np.array([float(objective(row)) for row in X])


def _neighbourhood_best(rng, p_f, K_n):
    """For each particle, the index of the best personal best among K_n random others."""
    K = p_f.size
    keys = rng.random((K, K))
    np.fill_diagonal(keys, np.inf)
    S = np.argpartition(keys, K_n - 1, axis=1)[:, :K_n]
    best = np.argmin(p_f[S], axis=1)
    return S[np.arange(K), best]


def pso_run(
    objective: Callable,
    space: SearchSpace,
    cfg: PsoConfig,
    seed,
    *,
    vectorized: bool = False,
    record_log: bool = False,
    repair: Callable | None = None,
) -> RunResult:
    """One swarm; ``objective`` maps a position (or a batch if ``vectorized``) to reals.

    ``repair``, if given, maps a batch of in-box positions to in-box positions
    and is applied after every clamp (e.g. a projection onto a constraint set).
    """
    rng = np.random.default_rng(seed)
    evaluate = _batch(objective, vectorized)
    lo, hi = space.lower, space.upper
    width = space.width
    K = cfg.K_p
    t0 = time.monotonic()

    def checked(X):
        f = evaluate(X)
        if f.shape != (X.shape[0],) or not np.all(np.isfinite(f)):
            bad = X[~np.isfinite(f)][0] if f.shape == (X.shape[0],) else X[0]
            raise ObjectiveError(f"objective returned a non-finite value at {bad.tolist()}")
        return f

    x = lo + rng.random((K, space.dim)) * width
    v = (2.0 * rng.random((K, space.dim)) - 1.0) * width
    if repair is not None:
        x = repair(x)
    f = checked(x)
    st = ParticleState(x, v, x.copy(), f.copy())
    best = int(np.argmin(st.p_f))
    f_best = float(st.p_f[best])
    W, K_n, c = cfg.W, cfg.K_n0, 0
    evals = K
    j = 0
    stall = 0
    stop = "max_iterations"
    trace: list[dict] = []
    while j < cfg.J_max:
        g = st.p[_neighbourhood_best(rng, st.p_f, K_n)]
        u1 = rng.random((K, space.dim))
        u2 = rng.random((K, space.dim))
        st.v = W * st.v + cfg.y1 * u1 * (st.p - st.x) + cfg.y2 * u2 * (g - st.x)
        st.x, st.v = clamp(st.x + st.v, st.v, lo, hi)
        if repair is not None:
            st.x = repair(st.x)
        f = checked(st.x)
        evals += K
        better = f < st.p_f
        st.p[better] = st.x[better]
        st.p_f[better] = f[better]
        best = int(np.argmin(st.p_f))
        new_best = float(st.p_f[best])
        gain = f_best - new_best
        if gain > 0:
            c = max(0, c - 1)
        else:
            c += 1
            K_n = min(K_n + cfg.K_n0, K - 1)
        if gain > 0 or cfg.adapt_every_iteration:
            if c < 2:
                W = min(2.0 * W, cfg.U_w)
            if c > 5:
                W = max(W / 2.0, cfg.L_w)
        f_best = new_best
        if record_log:
            trace.append({"iter": j + 1, "f_best": f_best, "W": W, "K_n": K_n, "c": c})
        stall = stall + 1 if abs(gain) < cfg.eps_f else 0
        if stall >= cfg.stall_patience:
            stop = "tolerance"
            j += 1
            break
        if time.monotonic() - t0 >= cfg.T_max:
            stop = "time_limit"
            j += 1
            break
        j += 1
    return RunResult(st.p[best].copy(), f_best, j, evals, stop, lo.copy(), hi.copy(), trace)


@dataclass
class SolutionSet:
    """All multi-start solutions with the bounds each run used."""

    x: np.ndarray
    f: np.ndarray
    runs: list[RunResult]
    tightened: tuple[np.ndarray, np.ndarray] | None = None
    valid: np.ndarray | None = None

    def __len__(self):
        return self.f.size

    def valid_x(self) -> np.ndarray:
        if self.valid is None:
            raise ValueError("validity has not been assessed")
        return self.x[self.valid]


def tightened_bounds(e_mean, eps_e: float, lower, upper) -> tuple[np.ndarray, np.ndarray]:
    """Efficiency bounds e(1 -/+ eps_e%) intersected with the original box."""
    e_mean = np.asarray(e_mean, dtype=float)
    lo = np.maximum(lower, e_mean * (1.0 - eps_e / 100.0))
    hi = np.minimum(upper, e_mean * (1.0 + eps_e / 100.0))
    bad = lo >= hi
    if np.any(bad):
        log.warning("tightened efficiency bounds degenerate for %s; widening to +/-1e-4", np.flatnonzero(bad).tolist())
        lo = np.where(bad, e_mean - 1e-4, lo)
        hi = np.where(bad, e_mean + 1e-4, hi)
    return lo, hi


def start_seeds(seed, D: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(D)


def mpso(
    objective: Callable,
    space: SearchSpace,
    cfg: PsoConfig,
    seed,
    *,
    efficiency_idx: Sequence[int] | None = None,
    vectorized: bool = False,
    record_log: bool = False,
    repair: Callable | None = None,
) -> SolutionSet:
    """``D`` swarms; efficiency bounds are tightened after the first ``D_n``.

    Tightening is skipped when ``efficiency_idx`` is None or ``D_n == D``.
    ``repair`` may take the current bounds as ``repair(X, lower, upper)``; it
    is bound to each run's box before being passed to ``pso_run``.
    """
    seeds = start_seeds(seed, cfg.D)
    runs: list[RunResult] = []
    def fix(sp):
        if repair is None:
            return None
        return lambda X: repair(X, sp.lower, sp.upper)

    for n in range(cfg.D_n):
        runs.append(pso_run(objective, space, cfg, seeds[n], vectorized=vectorized, record_log=record_log, repair=fix(space)))
    tight = None
    if efficiency_idx is not None and cfg.D_n < cfg.D:
        idx = np.asarray(efficiency_idx, dtype=int)
        e_mean = np.mean([r.x[idx] for r in runs], axis=0)
        tight = tightened_bounds(e_mean, cfg.eps_e, space.lower[idx], space.upper[idx])
        space = space.with_bounds(idx, *tight)
    for n in range(cfg.D_n, cfg.D):
        runs.append(pso_run(objective, space, cfg, seeds[n], vectorized=vectorized, record_log=record_log, repair=fix(space)))
    return SolutionSet(
        x=np.stack([r.x for r in runs]),
        f=np.array([r.f for r in runs]),
        runs=runs,
        tightened=tight,
    )


def write_run_log(result: RunResult, path) -> None:
    with open(path, "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec) + "\n")
