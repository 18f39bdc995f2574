import os
import sys
from typing import Callable

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.embed.network import EmbedSpec, embed_init  # noqa: E402
from app.episodes.synthetic import EpisodeSampler, make_class_pool  # noqa: E402
from app.initmod.init_module import WeightGenerator  # noqa: E402
from app.numerics.kernels import GradPair  # noqa: E402

FD_STEP = 1e-5


def pytest_collection_modifyitems(config, items):
    if os.getenv("BIOPT_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow acceptance run; set BIOPT_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Numerical gradient of scalar f at x; x is perturbed in place and restored."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        up = f(x)
        x[idx] = orig - step
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def assert_grad_matches(f: Callable[[np.ndarray], float], pair: GradPair, tol: float, step: float = FD_STEP) -> None:
    """pair.grad must match the central-difference gradient of f at pair.value."""
    numeric = central_difference(f, pair.value.copy(), step)
    err = rel_error(pair.grad, numeric)
    assert err < tol, f"relative error {err:.3e} >= {tol:.0e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    # 8x8 image -> 4x4 features, 4 channels
    return EmbedSpec(widths=(3, 3, 4), strides=(2, 1))


@pytest.fixture
def tiny_model(tiny_spec):
    params = embed_init(tiny_spec, seed=5)
    rng = np.random.default_rng(9)
    c = tiny_spec.out_channels
    gen = WeightGenerator(rng.normal(0.0, 0.3, size=(2 * c, c)), rng.normal(0.0, 0.3, size=c))
    return params, gen


@pytest.fixture
def small_sampler():
    base, _ = make_class_pool(4, 2, seed=11)
    return EpisodeSampler(tuple(base), n_way=1, k_shot=1, img_size=16, seed=11)
