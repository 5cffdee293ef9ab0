"""Random line generation, simulated datasets, splits and CSV persistence."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import MetricsVector, metric_keys
from .model import LineConfig, MachineParams
from .simulator import SimConfig, default_threads, simulate_metrics

FORMAT_VERSION = 1


@dataclass(frozen=True)
class SamplingRanges:
    e_range: tuple[float, float] = (0.7, 0.95)
    T_down_range: tuple[float, float] = (3.0, 20.0)
    cv_range: tuple[float, float] = (0.2, 1.0)
    # multiplies max(T_down_j, T_down_j+1) to give the capacity range
    n_multiplier_range: tuple[float, float] = (1.0, 3.0)

    def __post_init__(self):
        for name in ("e_range", "T_down_range", "cv_range", "n_multiplier_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not lo < hi:
                raise ValueError(f"{name} must have lower < upper, got {(lo, hi)}")
        if not (0 < self.e_range[0] and self.e_range[1] < 1):
            raise ValueError("efficiency range must lie inside (0, 1)")
        if self.T_down_range[0] <= 0 or self.cv_range[0] <= 0:
            raise ValueError("downtime and CV ranges must be positive")
        if self.n_multiplier_range[0] <= 0:
            raise ValueError("capacity multipliers must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingRanges":
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class DatasetRow:
    predictors: np.ndarray
    responses: MetricsVector

    @property
    def M(self) -> int:
        return self.responses.M

    @property
    def line(self) -> LineConfig:
        M = self.M
        return LineConfig.from_vector(self.predictors[: 4 * M], self.predictors[4 * M :].astype(int))


def predictor_keys(M: int) -> list[str]:
    return (
        [f"e_{i}" for i in range(1, M + 1)]
        + [f"td_{i}" for i in range(1, M + 1)]
        + [f"cvu_{i}" for i in range(1, M + 1)]
        + [f"cvd_{i}" for i in range(1, M + 1)]
        + [f"n_{j}" for j in range(1, M)]
    )


def capacity_bounds(td_a: float, td_b: float, ranges: SamplingRanges) -> tuple[int, int]:
    """Integer capacity range for a buffer between machines with downtimes td_a, td_b."""
    base = max(td_a, td_b)
    lo = max(1, math.ceil(base * ranges.n_multiplier_range[0] - 1e-9))
    hi = math.floor(base * ranges.n_multiplier_range[1] + 1e-9)
    if hi < lo:
        hi = lo
    return lo, hi


def generate_lines(M: int, n_lines: int, ranges: SamplingRanges | None = None, seed: int = 0) -> list[LineConfig]:
    if M < 2:
        raise ValueError("M must be >= 2")
    if n_lines < 1:
        raise ValueError("n_lines must be >= 1")
    ranges = ranges or SamplingRanges()
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_lines):
        e = rng.uniform(*ranges.e_range, size=M)
        td = rng.uniform(*ranges.T_down_range, size=M)
        cvu = rng.uniform(*ranges.cv_range, size=M)
        cvd = rng.uniform(*ranges.cv_range, size=M)
        N = []
        for j in range(M - 1):
            lo, hi = capacity_bounds(td[j], td[j + 1], ranges)
            N.append(int(rng.integers(lo, hi + 1)))
        machines = tuple(MachineParams(float(e[i]), float(td[i]), float(cvu[i]), float(cvd[i])) for i in range(M))
        lines.append(LineConfig(machines, tuple(N)))
    return lines


def line_sim_config(cfg: SimConfig, index: int) -> SimConfig:
    """Simulation config for the ``index``-th line of a dataset."""
    ss = np.random.SeedSequence([int(cfg.base_seed), 0x11E, int(index)])
    seed = int(ss.generate_state(1, dtype=np.uint64)[0])
    return SimConfig(cfg.warmup, cfg.horizon, cfg.replications, seed)


def build_dataset(lines: Sequence[LineConfig], cfg: SimConfig, threads: int | None = None) -> list[DatasetRow]:
    def one(item):
        k, line = item
        m = simulate_metrics(line, line_sim_config(cfg, k), threads=1)
        return DatasetRow(line.predictors(), m)

    threads = threads or default_threads()
    items = list(enumerate(lines))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, items))
    return [one(it) for it in items]


def split(rows: Sequence, train_fraction: float = 0.75, seed: int = 0) -> tuple[list, list]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(rows)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    return [rows[i] for i in perm[:n_train]], [rows[i] for i in perm[n_train:]]


def rows_to_arrays(rows: Sequence[DatasetRow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack predictors and flat metric responses."""
    X = np.stack([r.predictors for r in rows])
    Y = np.stack([r.responses.to_flat() for r in rows])
    return X, Y


# -- persistence -------------------------------------------------------------

def _meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _write_meta(path, meta: dict) -> None:
    meta = {"format_version": FORMAT_VERSION, **meta}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(path) -> dict:
    meta = json.loads(_meta_path(path).read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {meta.get('format_version')!r}")
    return meta


def write_lines(lines: Sequence[LineConfig], path, *, meta: dict | None = None) -> None:
    if not lines:
        raise ValueError("no lines to write")
    M = lines[0].M
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(predictor_keys(M))
        for line in lines:
            if line.M != M:
                raise ValueError("all lines must have the same M")
            w.writerow([repr(float(v)) for v in line.to_vector()] + [str(n) for n in line.N])
    _write_meta(path, {"kind": "lines", "M": M, "count": len(lines), **(meta or {})})


def read_lines(path) -> list[LineConfig]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        M = (len(header) + 1) // 5
        if header != predictor_keys(M):
            raise ValueError(f"unexpected line file header in {path}")
        return [LineConfig.from_vector([float(v) for v in row[: 4 * M]], [int(v) for v in row[4 * M :]]) for row in r]


def write_dataset(rows: Sequence[DatasetRow], path, *, meta: dict | None = None) -> None:
    if not rows:
        raise ValueError("no rows to write")
    M = rows[0].M
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(predictor_keys(M) + metric_keys(M))
        for row in rows:
            p = row.predictors
            w.writerow(
                [repr(float(v)) for v in p[: 4 * M]]
                + [str(int(v)) for v in p[4 * M :]]
                + [repr(float(v)) for v in row.responses.to_flat()]
            )
    _write_meta(path, {"kind": "dataset", "M": M, "rows": len(rows), **(meta or {})})


def read_dataset(path) -> list[DatasetRow]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        # 5M - 1 predictors + 1 + 8(M-1) metrics = 13M - 8 columns
        M = (len(header) + 8) // 13
        if header != predictor_keys(M) + metric_keys(M):
            raise ValueError(f"unexpected dataset header in {path}")
        npred = 5 * M - 1
        rows = []
        for rec in r:
            vals = [float(v) for v in rec]
            rows.append(DatasetRow(np.array(vals[:npred]), MetricsVector.from_flat(vals[npred:], M)))
    return rows
