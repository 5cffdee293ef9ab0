import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lineident.model import (
    GammaSpec,
    LineConfig,
    MachineParams,
    cv_slice,
    downtime_slice,
    efficiency_slice,
    gamma_from_moments,
    make_line,
    mean_uptime,
    params_to_vector,
    sample_duration,
    vector_to_params,
)


@pytest.mark.parametrize("e,td,expected", [(0.5, 5, 5), (0.9, 8, 72), (0.85, 6, 34)])
def test_mean_uptime_examples(e, td, expected):
    assert mean_uptime(MachineParams(e, td, 1, 1)) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize(
    "mean,cv,shape,scale", [(5, 1, 1, 5), (8, 0.5, 4, 2), (10, 0.2, 25, 0.4)]
)
def test_gamma_from_moments_examples(mean, cv, shape, scale):
    g = gamma_from_moments(mean, cv)
    assert g.shape == pytest.approx(shape, rel=1e-12)
    assert g.scale == pytest.approx(scale, rel=1e-12)


@pytest.mark.parametrize("mean,cv", [(0, 1), (-1, 1), (5, 0), (5, -0.1)])
def test_gamma_from_moments_rejects_non_positive(mean, cv):
    with pytest.raises(ValueError):
        gamma_from_moments(mean, cv)


@given(st.floats(0.01, 0.99), st.floats(0.1, 100))
def test_efficiency_round_trip(e, td):
    p = MachineParams(e, td, 0.5, 0.5)
    assert p.T_up / (p.T_up + p.T_down) == pytest.approx(e, rel=1e-13)


@given(st.floats(0.01, 1000), st.floats(0.05, 5))
def test_gamma_moments_round_trip(mean, cv):
    g = gamma_from_moments(mean, cv)
    assert g.mean == pytest.approx(mean, rel=1e-12)
    assert g.cv == pytest.approx(cv, rel=1e-12)


def test_sample_duration_moments():
    rng = np.random.default_rng(0)
    g = GammaSpec(1.0, 5.0)
    x = np.array([sample_duration(rng, g) for _ in range(200_000)])
    assert x.mean() == pytest.approx(5.0, rel=0.02)
    g = GammaSpec(25.0, 0.4)
    x = np.array([sample_duration(rng, g) for _ in range(200_000)])
    assert x.std() / x.mean() == pytest.approx(0.2, rel=0.02)


def test_sample_duration_deterministic():
    g = GammaSpec(4.0, 2.0)
    a = [sample_duration(np.random.default_rng(3), g) for _ in range(1)]
    r1, r2 = np.random.default_rng(11), np.random.default_rng(11)
    assert [sample_duration(r1, g) for _ in range(50)] == [sample_duration(r2, g) for _ in range(50)]
    assert a[0] > 0


@pytest.mark.parametrize(
    "args",
    [(0.0, 5, 1, 1), (1.0, 5, 1, 1), (0.9, 0, 1, 1), (0.9, 5, 0, 1), (0.9, 5, 1, -1), (math.nan, 5, 1, 1)],
)
def test_machine_params_validation(args):
    with pytest.raises(ValueError):
        MachineParams(*args)


def test_line_config_validation():
    m = MachineParams(0.9, 5, 1, 1)
    with pytest.raises(ValueError):
        LineConfig((m,), ())
    with pytest.raises(ValueError):
        LineConfig((m, m), (5, 5))
    with pytest.raises(ValueError):
        LineConfig((m, m), (0,))
    with pytest.raises(ValueError):
        LineConfig((m, m), (2.5,))
    assert LineConfig((m, m), (4.0,)).N == (4,)


def test_vector_layout_is_blockwise(line3):
    x = line3.to_vector()
    M = line3.M
    assert x[efficiency_slice(M)].tolist() == [0.9, 0.85, 0.8]
    assert x[downtime_slice(M)].tolist() == [8, 10, 6]
    assert x[cv_slice(M)].tolist() == [0.6, 0.9, 0.5, 0.4, 0.5, 0.8]
    assert LineConfig.from_vector(x, line3.N) == line3
    assert line3.predictors().tolist() == x.tolist() + [15.0, 20.0]
    assert vector_to_params(params_to_vector(line3.machines)) == line3.machines


def test_make_line_broadcasts_scalars():
    line = make_line(0.85, [6, 9, 12], 0.5, 0.7, [15, 15])
    assert [m.e for m in line.machines] == [0.85] * 3
    assert [m.CV_down for m in line.machines] == [0.7] * 3
