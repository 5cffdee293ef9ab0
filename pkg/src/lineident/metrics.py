"""Steady-state performance metrics computed from parts-flow traces.

Occupancy levels of a buffer with capacity N (integer level h)::

    h == 0              -> P0
    0     < h <= N/4    -> PL1
    N/4   < h <= N/2    -> PL2
    N/2   < h <= 3N/4   -> PL3
    3N/4  < h <  N      -> PL4
    h == N              -> PN
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .model import LineConfig
    from .simulator import PartsFlowTrace

BUFFER_FIELDS = ("WIP", "P0", "PN", "PL1", "PL2", "PL3", "PL4", "B0")
# the six occupancy probabilities, in the order their sum is checked
PARTITION_FIELDS = ("P0", "PL1", "PL2", "PL3", "PL4", "PN")
# per-buffer metrics modelled by surrogates (PL4 is implied by the others)
SURROGATE_FIELDS = ("WIP", "P0", "PN", "PL1", "PL2", "PL3", "B0")


def metric_keys(M: int) -> list[str]:
    """Canonical flat key order: PR, then per buffer WIP..B0."""
    keys = ["PR"]
    for j in range(1, M):
        keys += [f"{f}_{j}" for f in BUFFER_FIELDS]
    return keys


def surrogate_metric_ids(M: int) -> list[str]:
    """The 1 + 7(M-1) metrics that get a surrogate, in residual order."""
    ids = ["PR"]
    for j in range(1, M):
        ids += [f"{f}_{j}" for f in SURROGATE_FIELDS]
    return ids


def parse_metric_id(metric_id: str) -> tuple[str, int | None]:
    """'WIP_2' -> ('WIP', 1) with a zero-based buffer index; 'PR' -> ('PR', None)."""
    if metric_id == "PR":
        return "PR", None
    name, _, j = metric_id.rpartition("_")
    if name not in BUFFER_FIELDS or not j.isdigit() or int(j) < 1:
        raise ValueError(f"unknown metric id {metric_id!r}")
    return name, int(j) - 1


@dataclass(frozen=True, eq=False)
class MetricsVector:
    PR: float
    WIP: np.ndarray
    P0: np.ndarray
    PN: np.ndarray
    PL1: np.ndarray
    PL2: np.ndarray
    PL3: np.ndarray
    PL4: np.ndarray
    B0: np.ndarray

    @property
    def M(self) -> int:
        return len(self.WIP) + 1

    def get(self, metric_id: str) -> float:
        name, j = parse_metric_id(metric_id)
        if j is None:
            return float(self.PR)
        return float(getattr(self, name)[j])

    def to_flat(self) -> np.ndarray:
        vals = [self.PR]
        for j in range(self.M - 1):
            vals += [getattr(self, f)[j] for f in BUFFER_FIELDS]
        return np.array(vals, dtype=float)

    def to_dict(self) -> dict[str, float]:
        return dict(zip(metric_keys(self.M), self.to_flat().tolist()))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def surrogate_vector(self) -> np.ndarray:
        return np.array([self.get(k) for k in surrogate_metric_ids(self.M)])

    @classmethod
    def from_flat(cls, values: Sequence[float], M: int) -> "MetricsVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (1 + 8 * (M - 1),):
            raise ValueError(f"expected {1 + 8 * (M - 1)} values for M={M}, got {values.shape}")
        per = values[1:].reshape(M - 1, 8)
        return cls(float(values[0]), *(per[:, k].copy() for k in range(8)))

    @classmethod
    def from_dict(cls, d: dict, M: int) -> "MetricsVector":
        return cls.from_flat([d[k] for k in metric_keys(M)], M)

    def __eq__(self, other):
        if not isinstance(other, MetricsVector):
            return NotImplemented
        return self.M == other.M and np.array_equal(self.to_flat(), other.to_flat())

    def __repr__(self):
        return f"MetricsVector({self.to_dict()})"


def _seqsum(values) -> float:
    s = 0.0
    for v in values:
        s += v
    return s


def _exact_partition(probs: np.ndarray) -> np.ndarray:
    """Adjust the last non-zero entry so the sequential sum is exactly 1.0.

    The adjustment is a few ulps at most; zero entries stay exactly zero.
    """
    probs = np.array(probs, dtype=float)
    k = int(np.flatnonzero(probs)[-1])
    probs[k] = 1.0 - _seqsum(probs[:k])
    for _ in range(8):
        s = _seqsum(probs)
        if s == 1.0:
            return probs
        probs[k] = np.nextafter(probs[k], np.inf if s < 1.0 else -np.inf)
    raise ArithmeticError(f"could not normalise partition {probs!r}")


def occupancy_counts(levels: np.ndarray, N: int) -> np.ndarray:
    """Cycle counts per (P0, PL1, PL2, PL3, PL4, PN) for integer levels."""
    levels = np.asarray(levels)
    hist = np.bincount(levels, minlength=N + 1)
    if hist.size > N + 1:
        raise ValueError(f"level above capacity {N}")
    h = np.arange(N + 1)
    # integer-exact comparisons: h <= k*N/4  <=>  4h <= k*N
    lvl = np.full(N + 1, 4)
    lvl[4 * h <= 3 * N] = 3
    lvl[4 * h <= 2 * N] = 2
    lvl[4 * h <= N] = 1
    lvl[0] = 0
    lvl[N] = 5
    return np.bincount(lvl, weights=hist, minlength=6).astype(np.int64)


def compute_metrics(trace: "PartsFlowTrace", line: "LineConfig") -> MetricsVector:
    levels = np.asarray(trace.levels)
    T = trace.horizon
    if T < 1 or levels.shape[0] == 0:
        raise ValueError("empty trace")
    if levels.shape != (T, line.M - 1):
        raise ValueError(f"trace shape {levels.shape} does not match horizon {T} and M={line.M}")
    B = line.M - 1
    out = {f: np.empty(B) for f in BUFFER_FIELDS}
    for j in range(B):
        h = levels[:, j]
        counts = occupancy_counts(h, line.N[j])
        parts = _exact_partition(counts / T)
        for name, p in zip(PARTITION_FIELDS, parts):
            out[name][j] = p
        out["WIP"][j] = h.sum(dtype=np.int64) / T
        # no comparison exists for a single-cycle trace; treat as unchanged
        out["B0"][j] = np.count_nonzero(h[1:] == h[:-1]) / (T - 1) if T > 1 else 1.0
    return MetricsVector(trace.output_count / T, **out)


def average_metrics(runs: Sequence[MetricsVector]) -> MetricsVector:
    if not runs:
        raise ValueError("cannot average an empty list of metrics")
    M = runs[0].M
    if any(r.M != M for r in runs):
        raise ValueError("metrics vectors have inconsistent buffer counts")
    if len(runs) == 1:
        return runs[0]
    avg = MetricsVector.from_flat(np.mean([r.to_flat() for r in runs], axis=0), M)
    stacked = np.stack([getattr(avg, f) for f in PARTITION_FIELDS], axis=1)
    for j in range(M - 1):
        stacked[j] = _exact_partition(stacked[j])
    fields = {f: stacked[:, k].copy() for k, f in enumerate(PARTITION_FIELDS)}
    return MetricsVector(avg.PR, avg.WIP, fields["P0"], fields["PN"], fields["PL1"], fields["PL2"], fields["PL3"], fields["PL4"], avg.B0)


def metric_errors(pred, truth, N, metric_ids: Sequence[str], return_flags: bool = False):
    """Per-sample estimation errors.

    PR and B0 errors are relative to the true value in percent, WIP errors are
    relative to the buffer capacity in percent, and probability errors are
    absolute.  Where a true PR or B0 is zero the absolute difference is
    reported instead and flagged.

    ``pred`` and ``truth`` are (n, K) in ``metric_ids`` order and ``N`` is the
    (n, M-1) capacity matrix (or a single capacity vector).
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    N = np.atleast_2d(np.asarray(N, dtype=float))
    diff = np.abs(pred - truth)
    err = np.empty_like(diff)
    flags = np.zeros(diff.shape, dtype=bool)
    for k, mid in enumerate(metric_ids):
        name, j = parse_metric_id(mid)
        if name in ("PR", "B0"):
            t = truth[:, k]
            zero = t == 0
            with np.errstate(divide="ignore", invalid="ignore"):
                err[:, k] = np.where(zero, diff[:, k], 100.0 * diff[:, k] / np.where(zero, 1.0, t))
            flags[:, k] = zero
        elif name == "WIP":
            err[:, k] = 100.0 * diff[:, k] / N[:, j]
        else:
            err[:, k] = diff[:, k]
    return (err, flags) if return_flags else err
