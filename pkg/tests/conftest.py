import numpy as np
import pytest

from seflow.flow import FlowConfig, FlowModel


def tiny_config(**overrides) -> FlowConfig:
    """group 4, 2 blocks, no early outputs, small conditioner."""
    kw = dict(
        n_blocks=2,
        group_size=4,
        early_every=0,
        early_channels=0,
        wn_layers=2,
        residual_channels=6,
        skip_channels=5,
        kernel_size=3,
    )
    kw.update(overrides)
    return FlowConfig(**kw)


def perturb(model, rng, scale=0.3):
    """Random parameterization: jitter every parameter, keep 1x1 convs well conditioned."""
    for name, p in model.named_parameters():
        if name.startswith("invconv"):
            c = p.shape[0]
            q, _ = np.linalg.qr(rng.standard_normal((c, c)))
            p.data = (q + 0.1 * rng.standard_normal((c, c))).astype(p.dtype)
        else:
            p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return model


def central_difference(f, arr, index, h=1e-5):
    """(f(arr[i]+h) - f(arr[i]-h)) / 2h, restoring arr afterwards."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def rel_error(a, b, floor=1e-6):
    """Relative error; below ``floor`` in magnitude it degrades to absolute error / floor.

    Central differences on an O(1) loss carry ~1e-11 of cancellation noise,
    so gradients much smaller than ``floor`` cannot be resolved relatively.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model(rng):
    return perturb(FlowModel(tiny_config(), rng, mu=None), rng)
