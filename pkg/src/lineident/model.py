"""Machine and line descriptions, gamma moment matching, duration sampling.

Flat parameter vectors use a block layout::

    (e_1..e_M, T_down_1..T_down_M, CV_up_1..CV_up_M, CV_down_1..CV_down_M)

so the efficiency coordinates are always ``x[:M]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class MachineParams:
    """Reliability model of one machine.

    ``e`` is the efficiency, ``T_down`` the mean downtime in cycles, and
    ``CV_up``/``CV_down`` the coefficients of variation of up- and downtime.
    """

    e: float
    T_down: float
    CV_up: float
    CV_down: float

    def __post_init__(self):
        for name in ("e", "T_down", "CV_up", "CV_down"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
        if not 0.0 < self.e < 1.0:
            raise ValueError(f"efficiency must lie in (0, 1), got {self.e}")
        if self.T_down <= 0:
            raise ValueError(f"T_down must be positive, got {self.T_down}")
        if self.CV_up <= 0 or self.CV_down <= 0:
            raise ValueError("coefficients of variation must be positive")
        if not math.isfinite(mean_uptime(self)):
            raise ValueError("derived mean uptime is not finite")

    @property
    def T_up(self) -> float:
        return mean_uptime(self)


@dataclass(frozen=True)
class LineConfig:
    """An M-machine serial line: machines in flow order and M-1 buffer capacities."""

    machines: tuple[MachineParams, ...]
    N: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "machines", tuple(self.machines))
        caps = []
        for n in self.N:
            if isinstance(n, (float, np.floating)) and not float(n).is_integer():
                raise ValueError(f"buffer capacity must be an integer, got {n}")
            caps.append(int(n))
        object.__setattr__(self, "N", tuple(caps))
        if len(self.machines) < 2:
            raise ValueError("a line needs at least two machines")
        if len(self.N) != len(self.machines) - 1:
            raise ValueError(
                f"{len(self.machines)} machines need {len(self.machines) - 1} buffers, got {len(self.N)}"
            )
        if any(n < 1 for n in self.N):
            raise ValueError(f"buffer capacities must be >= 1, got {self.N}")

    @property
    def M(self) -> int:
        return len(self.machines)

    def to_vector(self) -> np.ndarray:
        """Machine parameters in block layout (length 4M)."""
        return params_to_vector(self.machines)

    @classmethod
    def from_vector(cls, x: Sequence[float], N: Sequence[int]) -> "LineConfig":
        return cls(vector_to_params(x), tuple(N))

    def predictors(self) -> np.ndarray:
        """Machine vector followed by the capacities, the surrogate input layout."""
        return np.concatenate([self.to_vector(), np.asarray(self.N, dtype=float)])


@dataclass(frozen=True)
class GammaSpec:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError(f"gamma shape and scale must be positive, got {self}")

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def cv(self) -> float:
        return 1.0 / math.sqrt(self.shape)


def mean_uptime(p: MachineParams) -> float:
    """Mean uptime implied by efficiency and mean downtime: e*T_down/(1-e)."""
    return p.e * p.T_down / (1.0 - p.e)


def gamma_from_moments(mean: float, cv: float) -> GammaSpec:
    if not (mean > 0 and cv > 0):
        raise ValueError(f"mean and cv must be positive, got mean={mean}, cv={cv}")
    cv2 = cv * cv
    return GammaSpec(shape=1.0 / cv2, scale=mean * cv2)


def sample_duration(rng: np.random.Generator, g: GammaSpec) -> float:
    return float(rng.gamma(g.shape, g.scale))


def uptime_gamma(p: MachineParams) -> GammaSpec:
    return gamma_from_moments(mean_uptime(p), p.CV_up)


def downtime_gamma(p: MachineParams) -> GammaSpec:
    return gamma_from_moments(p.T_down, p.CV_down)


def params_to_vector(machines: Sequence[MachineParams]) -> np.ndarray:
    return np.array(
        [m.e for m in machines]
        + [m.T_down for m in machines]
        + [m.CV_up for m in machines]
        + [m.CV_down for m in machines],
        dtype=float,
    )


def vector_to_params(x: Sequence[float]) -> tuple[MachineParams, ...]:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size % 4 != 0:
        raise ValueError(f"parameter vector length must be a multiple of 4, got {x.shape}")
    M = x.size // 4
    return tuple(
        MachineParams(float(x[i]), float(x[M + i]), float(x[2 * M + i]), float(x[3 * M + i]))
        for i in range(M)
    )


def efficiency_slice(M: int) -> slice:
    return slice(0, M)


def downtime_slice(M: int) -> slice:
    return slice(M, 2 * M)


def cv_slice(M: int) -> slice:
    """Both CV blocks (up then down)."""
    return slice(2 * M, 4 * M)


def make_line(e, T_down, CV_up, CV_down, N) -> LineConfig:
    """Build a line from per-machine sequences (convenience for scripts and tests)."""
    e, T_down, CV_up, CV_down = (np.broadcast_to(np.asarray(a, float), (len(N) + 1,)) for a in (e, T_down, CV_up, CV_down))
    machines = tuple(
        MachineParams(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(e, T_down, CV_up, CV_down)
    )
    return LineConfig(machines, tuple(N))
