import numpy as np
import pytest

from susl4ts import diffcore as dc
from susl4ts.model import ModelConfig, Parameters


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def perturbed(cfg, seed, scale=0.3):
    """Parameters with every array jittered, so no ReLU sits exactly on its kink."""
    p = Parameters.init(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    return Parameters(cfg, {k: v + scale * rng.standard_normal(v.shape) for k, v in p.items()})


@pytest.fixture
def tiny_conv():
    return ModelConfig(channels=1, length=8, n_known_classes=2, n_augmented_classes=1,
                       latent_dim=4, layers=2, filters=3, kernel_size=3, variant="conv")


@pytest.fixture
def tiny_mlp():
    return ModelConfig(channels=1, length=8, n_known_classes=2, n_augmented_classes=1,
                       latent_dim=4, layers=2, units=5, variant="mlp")


def leaf(rng, shape, lo=-2.0, hi=2.0):
    return dc.Array(rng.uniform(lo, hi, size=shape), requires_grad=True)
