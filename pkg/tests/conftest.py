import numpy as np
import pytest

from dib.data import make_synthetic
from dib.model import DibConfig, DibModel

MNIST_DIR = "data/mnist"


def fd_grad(fn, x, h=1e-5):
    """Central finite differences of a scalar-valued fn() w.r.t. x in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        hi = fn()
        x[idx] = orig - h
        lo = fn()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * h)
        it.iternext()
    return g


def rel_err(approx, exact):
    scale = max(np.abs(exact).max(), 1e-12)
    return float(np.abs(approx - exact).max() / scale)


def tiny_dib(rng=None, modules=2, input_dim=3, output_dim=2, width=3,
             tasks=(0,), random_routing=False):
    rng = rng or np.random.default_rng(0)
    cfg = DibConfig(input_dim=input_dim, output_dim=output_dim,
                    modules_per_cell=modules, module_width=width,
                    router_hidden=(4,), memnet_hidden=(4,))
    model = DibModel(cfg, rng, random_routing=random_routing)
    for t in tasks:
        model.new_memnets(t, rng)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_tasks():
    return make_synthetic(num_tasks=3, samples_per_task=400, input_dim=12,
                          classes=3, seed=7)
