import numpy as np
import pytest
from hypothesis import settings

from lineident.model import make_line
from lineident.surrogate import MlpModel, SurrogateBundle, init_params, unpack
from lineident.metrics import surrogate_metric_ids

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_bundle(M: int, seed: int = 0, hidden=(8, 4)) -> SurrogateBundle:
    """Untrained networks: smooth, cheap stand-ins for a real bundle."""
    rng = np.random.default_rng(seed)
    d = 5 * M - 1
    dims = [d, *hidden, 1]
    lo = np.r_[np.full(M, 0.7), np.full(M, 2.0), np.full(2 * M, 0.1), np.full(M - 1, 5.0)]
    hi = np.r_[np.full(M, 0.95), np.full(M, 20.0), np.full(2 * M, 1.0), np.full(M - 1, 40.0)]
    models = {}
    for mid in surrogate_metric_ids(M):
        Ws, bs = unpack(init_params(dims, rng), dims)
        models[mid] = MlpModel(mid, tuple(Ws), tuple(b + 0.1 for b in bs), (lo + hi) / 2, (hi - lo) / 2)
    return SurrogateBundle(M, models)


def constant_bundle(M: int, values) -> SurrogateBundle:
    """Every model outputs a fixed value (zero weights, bias = value)."""
    d = 5 * M - 1
    models = {}
    for mid, v in zip(surrogate_metric_ids(M), values):
        Ws = (np.zeros((d, 2)), np.zeros((2, 1)))
        bs = (np.zeros(2), np.array([float(v)]))
        models[mid] = MlpModel(mid, Ws, bs, np.zeros(d), np.ones(d))
    return SurrogateBundle(M, models)


@pytest.fixture
def line3():
    return make_line([0.9, 0.85, 0.8], [8, 10, 6], [0.6, 0.9, 0.5], [0.4, 0.5, 0.8], [15, 20])
