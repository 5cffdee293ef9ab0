"""Slot-clocked simulation of synchronous serial lines with gamma machines.

Each machine carries a continuous residual clock for its current up or down
period.  The clock is decremented by one per cycle and the machine switches
state only at cycle boundaries; the overshoot of a period carries into the
next one, so the long-run up fraction matches the machine efficiency.

Within one cycle:

1. machine states are refreshed from the residual clocks;
2. each up machine is checked for starvation and blocking against the buffer
   levels left by the previous cycle;
3. every machine that can work moves one part, all at once;
4. the new buffer levels are recorded.

A machine facing an empty upstream buffer can still work if its upstream
neighbour delivers a part in the same cycle, and symmetrically a full
downstream buffer does not block it if the downstream neighbour takes a part
out.  The set of working machines is the largest set consistent with these
rules, found by fixed-point iteration.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .metrics import MetricsVector, average_metrics, compute_metrics
from .model import GammaSpec, LineConfig, downtime_gamma, uptime_gamma


@dataclass(frozen=True)
class SimConfig:
    warmup: int = 10_000
    horizon: int = 300_000
    replications: int = 15
    base_seed: int = 0

    def __post_init__(self):
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.base_seed < 0:
            raise ValueError("base_seed must be non-negative")


@dataclass(frozen=True, eq=False)
class PartsFlowTrace:
    """Post-warmup buffer levels of one replication.

    ``levels`` has shape (horizon, M-1); ``initial_levels`` are the levels at
    the end of warmup.  ``up`` and ``works`` (shape (horizon, M)) are only
    filled when the simulation ran with ``record_states=True``.
    """

    levels: np.ndarray
    output_count: int
    horizon: int
    initial_levels: np.ndarray
    up: np.ndarray | None = None
    works: np.ndarray | None = None


def replication_seed(base_seed: int, replication_index: int) -> int:
    """32-bit seed for replication ``r``, a fixed hash of (base_seed, r)."""
    ss = np.random.SeedSequence([int(base_seed), int(replication_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@numba.njit(cache=True, nogil=True)
def _run(up_shape, up_scale, down_shape, down_scale, never_fail, N, warmup, horizon, seed, record_states):
    np.random.seed(seed)
    M = up_shape.shape[0]
    B = M - 1
    up = np.ones(M, dtype=np.bool_)
    resid = np.empty(M)
    for i in range(M):
        resid[i] = np.random.gamma(up_shape[i], up_scale[i])
    h = np.empty(B, dtype=np.int64)
    for j in range(B):
        h[j] = N[j] // 2
    levels = np.empty((horizon, B), dtype=np.int32)
    init = np.empty(B, dtype=np.int64)
    if warmup == 0:
        init[:] = h
    n_state = horizon if record_states else 0
    up_rec = np.zeros((n_state, M), dtype=np.bool_)
    works_rec = np.zeros((n_state, M), dtype=np.bool_)
    works = np.empty(M, dtype=np.bool_)
    out = 0
    total = warmup + horizon
    for t in range(total):
        # 1. state refresh; a zero-length period flips straight through
        for i in range(M):
            if never_fail[i]:
                continue
            while resid[i] <= 0.0:
                if up[i]:
                    up[i] = False
                    resid[i] += np.random.gamma(down_shape[i], down_scale[i])
                else:
                    up[i] = True
                    resid[i] += np.random.gamma(up_shape[i], up_scale[i])
        # 2. starvation / blocking against previous levels
        for i in range(M):
            works[i] = up[i]
        changed = True
        while changed:
            changed = False
            for i in range(M):
                if not works[i]:
                    continue
                fed = i == 0 or h[i - 1] > 0 or works[i - 1]
                free = i == M - 1 or h[i] < N[i] or works[i + 1]
                if not (fed and free):
                    works[i] = False
                    changed = True
        # 3. simultaneous moves
        for j in range(B):
            if works[j]:
                h[j] += 1
            if works[j + 1]:
                h[j] -= 1
        # 4. record
        if t >= warmup:
            k = t - warmup
            for j in range(B):
                levels[k, j] = h[j]
            if works[M - 1]:
                out += 1
            if record_states:
                for i in range(M):
                    up_rec[k, i] = up[i]
                    works_rec[k, i] = works[i]
        elif t == warmup - 1:
            init[:] = h
        for i in range(M):
            resid[i] -= 1.0
    return levels, out, init, up_rec, works_rec


@numba.njit(cache=True)
def _gamma_stream(shape, scale, n, seed):
    np.random.seed(seed)
    out = np.empty(n)
    for k in range(n):
        out[k] = np.random.gamma(shape, scale)
    return out


def sample_durations(g: GammaSpec, n: int, seed: int) -> np.ndarray:
    """``n`` durations drawn the way the kernel draws them."""
    return _gamma_stream(g.shape, g.scale, int(n), int(seed) & 0xFFFFFFFF)


def _kernel_args(line: LineConfig):
    ups = [uptime_gamma(m) for m in line.machines]
    downs = [downtime_gamma(m) for m in line.machines]
    return (
        np.array([g.shape for g in ups]),
        np.array([g.scale for g in ups]),
        np.array([g.shape for g in downs]),
        np.array([g.scale for g in downs]),
        np.asarray(line.N, dtype=np.int64),
    )


def simulate(
    line: LineConfig,
    cfg: SimConfig,
    replication_index: int = 0,
    *,
    record_states: bool = False,
    never_fail: Sequence[bool] | None = None,
) -> PartsFlowTrace:
    """Simulate one replication and return its post-warmup trace.

    ``never_fail`` marks machines that stay up forever (a test double for
    failure-free behaviour).
    """
    us, usc, ds, dsc, N = _kernel_args(line)
    nf = np.zeros(line.M, dtype=np.bool_) if never_fail is None else np.asarray(never_fail, dtype=np.bool_)
    if nf.shape != (line.M,):
        raise ValueError("never_fail must have one flag per machine")
    seed = replication_seed(cfg.base_seed, replication_index)
    levels, out, init, up_rec, works_rec = _run(
        us, usc, ds, dsc, nf, N, int(cfg.warmup), int(cfg.horizon), seed, bool(record_states)
    )
    return PartsFlowTrace(
        levels=levels,
        output_count=int(out),
        horizon=int(cfg.horizon),
        initial_levels=init.astype(np.int32),
        up=up_rec if record_states else None,
        works=works_rec if record_states else None,
    )


def default_threads() -> int:
    env = os.environ.get("LINEIDENT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def simulate_metrics(line: LineConfig, cfg: SimConfig, threads: int | None = None) -> MetricsVector:
    """Replication-averaged metrics over ``cfg.replications`` independent runs."""

    def one(r):
        return compute_metrics(simulate(line, cfg, r), line)

    threads = threads or default_threads()
    if threads > 1 and cfg.replications > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            runs = list(ex.map(one, range(cfg.replications)))
    else:
        runs = [one(r) for r in range(cfg.replications)]
    return average_metrics(runs)


def write_trace_csv(trace: PartsFlowTrace, path) -> None:
    """Dump a trace as ``t,h_1,...,h_{M-1},out_cum`` (one row per post-warmup cycle).

    ``out_cum`` needs the machine states, so the trace must come from a run
    with ``record_states=True``.
    """
    if trace.works is None:
        raise ValueError("trace has no machine states; simulate with record_states=True")
    B = trace.levels.shape[1]
    out_cum = np.cumsum(trace.works[:, -1].astype(np.int64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"h_{j + 1}" for j in range(B)] + ["out_cum"])
        for t in range(trace.horizon):
            w.writerow([t] + trace.levels[t].tolist() + [int(out_cum[t])])
