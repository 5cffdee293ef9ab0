"""Aggregate statistics, regression of estimate clouds, scenarios and experiment drivers.

Across the non-unique valid estimates of one line, the overall downtime
(mean T_down) and the overall CV (mean of (CV_up + CV_down)/2) follow a
negative linear relationship.  ``fit_overall_relationship`` fits it, and
``exp_feasibility`` asks where that line crosses CV = 1.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from .identify import IdentifyBounds, ObservedMetrics, _wip_scale, identify
from .metrics import metric_errors, surrogate_metric_ids
from .model import LineConfig, MachineParams, make_line
from .mpso import PsoConfig
from .simulator import SimConfig, simulate_metrics


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class AggregateStats:
    T_bar_down: float
    CV_bar_avg: float
    CV_avg: np.ndarray


def aggregate(x) -> AggregateStats:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size % 4 or x.size == 0:
        raise ValueError(f"parameter vector length {x.size} is not 4M")
    M = x.size // 4
    cv_avg = (x[2 * M : 3 * M] + x[3 * M :]) / 2.0
    return AggregateStats(float(x[M : 2 * M].mean()), float(cv_avg.mean()), cv_avg)


def aggregate_matrix(X) -> np.ndarray:
    """(T_bar_down, CV_bar_avg) per row of a (n, 4M) matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    M = X.shape[1] // 4
    return np.stack([X[:, M : 2 * M].mean(axis=1), X[:, 2 * M :].mean(axis=1)], axis=1)


@dataclass(frozen=True)
class RegressionFit:
    b0: float
    b1: float
    n: int
    resid_var: float
    se_b1: float
    p_value: float
    r2: float

    def predict(self, x):
        return self.b0 + self.b1 * np.asarray(x, dtype=float)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("b0", "b1", "n", "resid_var", "se_b1", "p_value", "r2")}


def t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df < 1:
        return float("nan")
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def ols_fit(xs, ys) -> RegressionFit:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n = xs.size
    if n < 2 or ys.shape != xs.shape:
        raise AnalysisError("need at least two (x, y) pairs of equal length")
    xm, ym = xs.mean(), ys.mean()
    sxx = float(((xs - xm) ** 2).sum())
    if sxx <= 1e-14 * max(1.0, float((xs**2).sum())):
        raise AnalysisError("all x values are equal; slope is undefined")
    sxy = float(((xs - xm) * (ys - ym)).sum())
    syy = float(((ys - ym) ** 2).sum())
    b1 = sxy / sxx
    b0 = ym - b1 * xm
    sse = float(((ys - b0 - b1 * xs) ** 2).sum())
    r2 = 1.0 - sse / syy if syy > 0 else 1.0
    if n < 3:
        return RegressionFit(b0, b1, n, float("nan"), float("nan"), float("nan"), r2)
    df = n - 2
    s2 = sse / df
    se = math.sqrt(s2 / sxx)
    if se == 0:
        p = 0.0 if b1 != 0 else 1.0
    else:
        p = t_two_sided_p(b1 / se, df)
    return RegressionFit(b0, b1, n, s2, se, min(max(p, 0.0), 1.0), r2)


@dataclass
class OverallRelationship:
    overall: RegressionFit
    per_machine: list[RegressionFit | None]
    points: np.ndarray

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "per_machine": [None if f is None else f.to_dict() for f in self.per_machine],
            "n_points": int(len(self.points)),
        }


def fit_overall_relationship(X) -> OverallRelationship:
    """F_A over (T_bar_down, CV_bar_avg) of the given valid solutions, plus per-machine fits."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 3:
        raise AnalysisError(f"need at least 3 valid solutions, got {X.shape[0]}")
    M = X.shape[1] // 4
    pts = aggregate_matrix(X)
    overall = ols_fit(pts[:, 0], pts[:, 1])
    per = []
    for i in range(M):
        cv_i = (X[:, 2 * M + i] + X[:, 3 * M + i]) / 2.0
        try:
            per.append(ols_fit(X[:, M + i], cv_i))
        except AnalysisError:
            per.append(None)
    return OverallRelationship(overall, per, pts)


@dataclass(frozen=True)
class ExpFeasibility:
    feasible: bool
    T_bar: float
    reason: str = ""


def exp_feasibility(fit: RegressionFit, t_bounds=(2.0, 20.0)) -> ExpFeasibility:
    """Solve 1 = b0 + b1 T for T; feasible when T lies within ``t_bounds``."""
    if fit.b1 == 0:
        return ExpFeasibility(False, float("nan"), "zero slope: CV = 1 is never reached")
    T = (1.0 - fit.b0) / fit.b1
    lo, hi = t_bounds
    if lo <= T <= hi:
        return ExpFeasibility(True, T)
    return ExpFeasibility(False, T, f"implied overall downtime {T:.4g} outside [{lo}, {hi}]")


# -- scenarios ---------------------------------------------------------------

SCENARIO_KINDS = ("double-all-N", "double-one-N", "half-all-Tdown", "half-one-Tdown")


@dataclass(frozen=True)
class Scenario:
    """``index`` is 1-based and only used by the single-target kinds."""

    kind: str
    index: int | None = None
    hold_efficiency: bool = True

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        single = self.kind.endswith("-one-N") or self.kind == "half-one-Tdown"
        if single and (self.index is None or self.index < 1):
            raise ValueError(f"{self.kind} needs a 1-based index")
        if not single and self.index is not None:
            raise ValueError(f"{self.kind} takes no index")

    @property
    def label(self) -> str:
        return self.kind if self.index is None else f"{self.kind}:{self.index}"

    @classmethod
    def parse(cls, text: str, hold_efficiency: bool = True) -> "Scenario":
        kind, _, idx = text.strip().partition(":")
        return cls(kind, int(idx) if idx else None, hold_efficiency)


def _half_downtime(p: MachineParams, hold_efficiency: bool) -> MachineParams:
    T = p.T_down / 2.0
    if hold_efficiency:
        return MachineParams(p.e, T, p.CV_up, p.CV_down)
    return MachineParams(p.T_up / (p.T_up + T), T, p.CV_up, p.CV_down)


def apply_scenario(line: LineConfig, s: Scenario) -> LineConfig:
    machines, N = list(line.machines), list(line.N)
    if s.kind == "double-all-N":
        N = [2 * n for n in N]
    elif s.kind == "double-one-N":
        if s.index > len(N):
            raise IndexError(f"buffer index {s.index} out of range 1..{len(N)}")
        N[s.index - 1] *= 2
    elif s.kind == "half-all-Tdown":
        machines = [_half_downtime(m, s.hold_efficiency) for m in machines]
    else:
        if s.index > len(machines):
            raise IndexError(f"machine index {s.index} out of range 1..{len(machines)}")
        machines[s.index - 1] = _half_downtime(machines[s.index - 1], s.hold_efficiency)
    return LineConfig(tuple(machines), tuple(N))


@dataclass
class SensitivityCell:
    estimate: int
    scenario: str
    f_obj: float
    errors: dict[str, float]


def scenario_objective(est, truth, N) -> float:
    M = len(N) + 1
    r = (np.asarray(est) - np.asarray(truth)) * _wip_scale(M, N)
    return float(r @ r) / r.size


def evaluate_sensitivity(
    true_line: LineConfig,
    estimates: Sequence,
    scenarios: Sequence[Scenario],
    sim_cfg: SimConfig,
    threads: int | None = None,
) -> list[SensitivityCell]:
    """Simulate true and estimated lines under each scenario and compare their metrics."""
    ids = surrogate_metric_ids(true_line.M)
    cells = []
    for s in scenarios:
        t_line = apply_scenario(true_line, s)
        truth = simulate_metrics(t_line, sim_cfg, threads).surrogate_vector()
        for k, x in enumerate(estimates):
            e_line = apply_scenario(LineConfig.from_vector(x, true_line.N), s)
            est = simulate_metrics(e_line, sim_cfg, threads).surrogate_vector()
            err = metric_errors(est[None], truth[None], np.asarray(t_line.N)[None], ids)[0]
            cells.append(SensitivityCell(k, s.label, scenario_objective(est, truth, t_line.N), dict(zip(ids, err.tolist()))))
    return cells


def write_sensitivity_csv(cells: Iterable[SensitivityCell], path) -> None:
    cells = list(cells)
    ids = list(cells[0].errors) if cells else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimate", "scenario", "f_obj", *[f"err_{k}" for k in ids]])
        for c in cells:
            w.writerow([c.estimate, c.scenario, repr(c.f_obj), *[repr(c.errors[k]) for k in ids]])


# -- experiment groups -------------------------------------------------------

_G2 = {
    3: {
        "td": [[(7, 6, 5), (5, 6, 7)], [(6, 8, 10), (11, 7, 6)], [(10, 9, 11), (8, 10, 12)], [(12, 10, 14), (11, 13, 12)]],
        "cv": [
            [(0.6, 0.7, 0.45, 0.35, 0.4, 0.5), (0.45, 0.3, 0.75, 0.5, 0.35, 0.65)],
            [(0.7, 0.85, 0.8, 0.95, 0.65, 0.55), (0.55, 0.7, 0.65, 0.75, 1, 0.85)],
        ],
    },
    5: {
        "td": [
            [(6, 5, 7, 7, 5), (6, 8, 7, 4, 5)],
            [(6, 8, 10, 7, 9), (6, 12, 9, 6, 7)],
            [(9, 12, 6, 10, 13), (9, 7, 12, 10, 12)],
            [(10, 12, 13, 11, 14), (13, 9, 12, 14, 12)],
        ],
        "cv": [
            [(0.5, 0.45, 0.4, 0.65, 0.55, 0.5, 0.4, 0.8, 0.4, 0.35), (0.6, 0.5, 0.45, 0.55, 0.4, 0.35, 0.7, 0.55, 0.6, 0.3)],
            [(1, 0.75, 0.5, 0.8, 0.85, 0.95, 0.7, 0.9, 0.4, 0.65), (0.5, 0.9, 1, 0.65, 0.45, 0.85, 0.6, 0.75, 0.8, 1)],
        ],
    },
}

_G3 = {
    3: {
        "td": [(6, 12, 6), (6, 9, 12), (12, 9, 6), (12, 6, 12)],
        "cv": {
            "low": [(0.41, 0.32, 0.33, 0.35, 0.47, 0.35), (0.32, 0.40, 0.50, 0.37, 0.42, 0.34), (0.45, 0.35, 0.40, 0.44, 0.48, 0.50)],
            "medium": [(0.82, 0.8, 0.3, 0.35, 0.7, 0.66), (0.8, 0.35, 0.7, 0.72, 0.83, 0.37), (0.73, 0.32, 0.84, 0.80, 0.91, 0.35)],
            "high": [(0.87, 0.77, 0.81, 0.87, 0.88, 0.82), (0.96, 0.84, 0.81, 0.90, 0.93, 0.82), (0.97, 0.90, 0.98, 0.79, 0.96, 0.84)],
        },
    },
    5: {
        "td": [(6, 8, 7, 10, 9), (8, 12, 10, 6, 9), (8, 6, 10, 9, 12), (9, 7, 12, 10, 12)],
        "cv": {
            "low": [
                (0.38, 0.30, 0.37, 0.41, 0.40, 0.30, 0.42, 0.45, 0.32, 0.35),
                (0.46, 0.34, 0.36, 0.30, 0.39, 0.47, 0.43, 0.42, 0.41, 0.47),
                (0.48, 0.50, 0.42, 0.48, 0.48, 0.47, 0.46, 0.45, 0.44, 0.30),
            ],
            "medium": [
                (0.46, 0.77, 0.37, 0.87, 0.38, 0.54, 0.39, 0.52, 0.70, 0.40),
                (0.52, 0.42, 0.51, 0.54, 0.79, 0.78, 0.55, 0.32, 0.79, 0.89),
                (0.52, 0.76, 0.59, 0.42, 0.72, 0.65, 0.91, 0.82, 0.60, 0.76),
            ],
            "high": [
                (0.80, 0.82, 0.87, 0.80, 0.96, 0.80, 0.80, 0.79, 0.80, 0.86),
                (0.75, 0.98, 0.98, 0.95, 0.77, 0.81, 0.83, 0.92, 0.78, 0.93),
                (0.99, 0.98, 0.76, 0.94, 0.81, 0.85, 0.89, 0.99, 0.85, 1.00),
            ],
        },
    },
}

_G4 = {
    3: {
        "N": (15, 20),
        "machines": {"a": (0.9, 10, 0.6, 0.4), "b": (0.85, 12, 0.9, 0.5), "c": (0.8, 8, 0.5, 0.8)},
        "patterns": {"increasing": "cba", "inverted-bowl": "cab", "bowl": "acb", "decreasing": "abc"},
    },
    5: {
        "N": (15, 20, 15, 20),
        "machines": {
            "a": (0.95, 11, 0.8, 0.6),
            "b": (0.9, 10, 0.6, 0.4),
            "c": (0.85, 12, 0.9, 0.5),
            "d": (0.8, 8, 0.5, 0.8),
            "e": (0.75, 9, 0.4, 0.7),
        },
        "patterns": {
            "increasing": "edcba",
            "inverted-bowl": "ebacd",
            "bowl": "acedb",
            "decreasing": "abcde",
            "oscillating": "acbed",
        },
    },
}

GROUP_IDS = ("1.1", "1.2", "2", "3", "4")


def _cv_split(cv, M):
    # the first M entries are CV_up, the last M are CV_down
    cv = tuple(cv)
    return cv[:M], cv[M:]


def group_specs(group_id: str, M: int) -> list[tuple[str, LineConfig]]:
    """Labelled lines of one experiment group for M = 3 or 5."""
    if M not in (3, 5):
        raise ValueError("experiment groups are defined for M = 3 and M = 5")
    e = 0.85
    out = []
    if group_id == "1.1":
        for td, cv in itertools.product((6, 9, 12), (0.3, 0.6, 0.9)):
            out.append((f"Td{td}-CV{cv}", make_line(e, td, cv, cv, [15] * (M - 1))))
    elif group_id == "1.2":
        for td, k, cv in itertools.product((6, 12), (2, 3), (0.3, 0.6, 0.9)):
            out.append((f"Td{td}-N{k}Td-CV{cv}", make_line(e, td, cv, cv, [k * td] * (M - 1))))
    elif group_id == "2":
        g = _G2[M]
        for (a, tds), (b, cvs) in itertools.product(enumerate(g["td"], 1), enumerate(g["cv"], 1)):
            for (ia, td), (ib, cv) in itertools.product(enumerate(tds, 1), enumerate(cvs, 1)):
                up, down = _cv_split(cv, M)
                out.append((f"Td{a}.{ia}-CV{b}.{ib}", make_line(e, td, up, down, [15] * (M - 1))))
    elif group_id == "3":
        g = _G3[M]
        for a, td in enumerate(g["td"], 1):
            for level, cvs in g["cv"].items():
                for b, cv in enumerate(cvs, 1):
                    up, down = _cv_split(cv, M)
                    out.append((f"Td{a}-{level}CV{b}", make_line(e, td, up, down, [15] * (M - 1))))
    elif group_id == "4":
        g = _G4[M]
        for name, order in g["patterns"].items():
            ms = tuple(MachineParams(*g["machines"][c]) for c in order)
            out.append((name, LineConfig(ms, g["N"])))
    else:
        raise ValueError(f"unknown group {group_id!r}; expected one of {GROUP_IDS}")
    return out


def exp_fit_cases(M: int, t_bar: float, cv_bar: float, n: int, spread: float = 0.3, seed: int = 0, e: float = 0.85, N: int = 15):
    """Lines whose downtimes and CVs are uniform perturbations around prescribed averages.

    Perturbations are centred so the averages match exactly.  Used for a
    scaled sweep of where exponential fits exist.
    """
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n):
        d = rng.uniform(-spread, spread, M)
        td = t_bar * (1 + d - d.mean())
        c = rng.uniform(-spread, spread, 2 * M)
        cv = cv_bar * (1 + c - c.mean())
        lines.append(make_line(e, td, cv[:M], cv[M:], [N] * (M - 1)))
    return lines


@dataclass
class GroupReport:
    group_id: str
    M: int
    labels: list[str]
    lines: list[LineConfig]
    results: list
    fits: list[OverallRelationship | None] = field(default_factory=list)

    def points_rows(self) -> list[list]:
        rows = []
        for label, res, fit in zip(self.labels, self.results, self.fits):
            agg = aggregate_matrix(res.x)
            for k, (t, cv) in enumerate(agg):
                rows.append([self.group_id, label, "point", k, int(res.valid[k]), repr(float(t)), repr(float(cv)), "", ""])
            if fit is not None:
                o = fit.overall
                rows.append([self.group_id, label, "fit", "", "", "", "", repr(o.b0), repr(o.b1)])
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["group", "case", "kind", "solution", "valid", "T_bar_down", "CV_bar_avg", "b0", "b1"])
            w.writerows(self.points_rows())


def group_experiments(
    group_id: str,
    M: int,
    bundle,
    cfg: PsoConfig,
    sim_cfg: SimConfig,
    seed: int = 0,
    bounds: IdentifyBounds | None = None,
    labels: Sequence[str] | None = None,
) -> GroupReport:
    """Simulate each configured line, identify it from its metrics, and fit F_A on the valid estimates."""
    specs = group_specs(group_id, M)
    if labels is not None:
        specs = [s for s in specs if s[0] in set(labels)]
    rep = GroupReport(group_id, M, [s[0] for s in specs], [s[1] for s in specs], [])
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    for (label, line), ss in zip(specs, seeds):
        targets = ObservedMetrics.from_metrics(simulate_metrics(line, sim_cfg), line.N)
        res = identify(targets, bundle, cfg, bounds, int(ss.generate_state(1)[0]))
        rep.results.append(res)
        try:
            rep.fits.append(fit_overall_relationship(res.valid_x()))
        except AnalysisError:
            rep.fits.append(None)
    return rep
