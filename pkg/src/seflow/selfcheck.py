"""Invariant suites run by ``seflow check``.

Each check measures an error against a fixed tolerance using an oracle that
does not share code with the path under test: finite differences for the
Jacobian and gradients, closed forms for mu-law, direct power ratios for
mixing.
"""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Callable

import numpy as np

from . import tensor as T
from .audio import AudioBuffer, mix_at_snr, mu_compress, mu_expand
from .flow import FlowConfig, FlowModel, nll_loss
from .metrics import amplitude_histogram
from .tensor import Tensor

TINY = FlowConfig(
    n_blocks=2, group_size=4, early_every=0, early_channels=0,
    wn_layers=2, residual_channels=6, skip_channels=5, kernel_size=3,
)

# Gradients smaller than this are compared absolutely (error / GRAD_FLOOR):
# central differences on an O(1) loss cannot resolve them relatively.
GRAD_FLOOR = 1e-6


@dataclasses.dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: measured {self.measured:.3e} vs tolerance {self.tolerance:.1e} [{self.seconds:.1f}s]{extra}"


def randomize(model: FlowModel, rng: np.random.Generator, scale: float = 0.3) -> FlowModel:
    """Jitter every parameter; 1x1 convolutions become perturbed rotations."""
    for name, p in model.named_parameters():
        if name.startswith("invconv"):
            c = p.shape[0]
            q, _ = np.linalg.qr(rng.standard_normal((c, c)))
            p.data = (q + 0.1 * rng.standard_normal((c, c))).astype(p.dtype)
        else:
            p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return model


def _finite_or_inf(x: float) -> float:
    return x if math.isfinite(x) else math.inf


def bijectivity_error(model: FlowModel, rng: np.random.Generator, frames: int) -> float:
    g = model.config.group_size
    x = (0.3 * rng.standard_normal((1, g, frames))).astype(model.dtype)
    cond = (0.3 * rng.standard_normal((1, g, frames))).astype(model.dtype)
    with np.errstate(all="ignore"), T.no_grad():
        z, _ = model.forward(Tensor(x), Tensor(cond))
        back = model.inverse(z.data, cond)
    err = float(np.max(np.abs(back.astype(np.float64) - x)))
    return _finite_or_inf(err)


def check_bijectivity(n_models: int, frames: int, seed: int, model: FlowModel | None = None) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    if model is not None:
        tol = 1e-4 if model.dtype == np.float32 else 1e-10
        for _ in range(n_models):
            try:
                worst = max(worst, bijectivity_error(model, rng, frames))
            except ArithmeticError:
                worst = math.inf
        return CheckResult("bijectivity (checkpoint)", worst, tol, worst < tol)
    for i in range(n_models):
        m = randomize(FlowModel(FlowConfig.desk(), rng, dtype=np.float32), rng, scale=0.05)
        worst = max(worst, bijectivity_error(m, rng, frames))
    return CheckResult(f"bijectivity ({n_models} desk-scale models, float32)", worst, 1e-4, worst < 1e-4)


def numerical_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = x.copy()
    flat = x.reshape(-1)
    jac = np.empty((flat.size, flat.size))
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x).reshape(-1)
        flat[i] = old - h
        fm = f(x).reshape(-1)
        flat[i] = old
        jac[:, i] = (fp - fm) / (2 * h)
    return jac


def jacobian_logdet_error(model: FlowModel, rng: np.random.Generator, frames: int = 8) -> float:
    g = model.config.group_size
    x = rng.standard_normal((1, g, frames))
    cond = Tensor(rng.standard_normal((1, g, frames)))
    with T.no_grad():
        _, ld = model.forward(Tensor(x), cond)
        jac = numerical_jacobian(lambda v: model.forward(Tensor(v), cond)[0].data, x)
    _, expected = np.linalg.slogdet(jac)
    return abs(ld.item() - expected) / max(abs(ld.item()), abs(expected), 1e-8)


def check_jacobian(n_models: int, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        m = randomize(FlowModel(TINY, rng, mu=None), rng)
        worst = max(worst, jacobian_logdet_error(m, rng))
    return CheckResult(f"log-det vs finite-difference Jacobian ({n_models} tiny models)", worst, 1e-3, worst < 1e-3)


def nll_gradient_error(model: FlowModel, rng: np.random.Generator, n_params: int, h: float = 1e-5) -> float:
    g = model.config.group_size
    x = Tensor(rng.standard_normal((2, g, 8)))
    cond = Tensor(rng.standard_normal((2, g, 8)))

    def loss():
        z, ld = model.forward(x, cond)
        return nll_loss(z, ld, 1.0)

    model.zero_grad()
    loss().backward()
    params = list(model.named_parameters())
    sizes = np.array([p.size for _, p in params])
    picks = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.cumsum(sizes) - sizes
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        _, p = params[k]
        idx = np.unravel_index(int(flat - offsets[k]), p.shape)
        old = p.data[idx]
        p.data[idx] = old + h
        fp = loss().item()
        p.data[idx] = old - h
        fm = loss().item()
        p.data[idx] = old
        num = (fp - fm) / (2 * h)
        a = p.grad[idx]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), GRAD_FLOOR))
    model.zero_grad()
    return worst


def check_gradients(n_params: int, seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    m = randomize(FlowModel(TINY, rng, mu=None), rng)
    worst = nll_gradient_error(m, rng, n_params)
    return CheckResult(f"NLL gradient vs central differences ({n_params} parameters)", worst, 1e-4, worst < 1e-4)


def check_mulaw(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = AudioBuffer(rng.uniform(-1, 1, 100_000))
    rt = float(np.max(np.abs(mu_expand(mu_compress(x)).samples - x.samples)))
    closed = abs(float(mu_compress(AudioBuffer(np.array([1 / 255]))).samples[0]) - 0.125)
    lap = AudioBuffer(np.clip(rng.laplace(0, 0.05, 100_000), -1, 1))
    raw_max = int(amplitude_histogram(lap).max())
    comp_max = int(amplitude_histogram(mu_compress(lap)).max())
    return [
        CheckResult("mu-law round trip (1e5 samples)", rt, 1e-6, rt < 1e-6),
        CheckResult("mu-law g(1/255) = 1/8", closed, 1e-12, closed < 1e-12),
        CheckResult(
            "mu-law flattens Laplacian histogram", comp_max / raw_max, 1.0, comp_max < raw_max,
            detail=f"max bin {raw_max} -> {comp_max}",
        ),
    ]


def check_mixing(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for snr in (0.0, 5.0, 10.0, 15.0, 2.5, 7.5, 12.5, 17.5):
        clean = AudioBuffer(0.2 * np.tanh(rng.standard_normal(16000)))
        noise = AudioBuffer(0.2 * np.tanh(rng.standard_normal(24000)))
        mix = mix_at_snr(clean, noise, snr, rng)
        d = mix.noisy.samples - mix.clean.samples
        measured = 10 * math.log10(np.sum(mix.clean.samples**2) / np.sum(d**2))
        worst = max(worst, abs(measured - snr))
    return CheckResult("mixing SNR error at 8 target SNRs (dB)", worst, 0.01, worst < 0.01)


def run_checks(level: str = "fast", seed: int = 0, model: FlowModel | None = None) -> list[CheckResult]:
    full = level == "full"
    suites: list[Callable[[], CheckResult | list[CheckResult]]] = [
        lambda: check_bijectivity(100 if full else 5, 2000 if full else 250, seed),
        lambda: check_jacobian(20 if full else 3, seed),
        lambda: check_gradients(200 if full else 40, seed),
        lambda: check_mulaw(seed),
        lambda: check_mixing(seed),
    ]
    if model is not None:
        suites.insert(0, lambda: check_bijectivity(3, 2000, seed, model=model))
    results: list[CheckResult] = []
    for suite in suites:
        t0 = time.perf_counter()
        out = suite()
        out = out if isinstance(out, list) else [out]
        for r in out:
            r.seconds = (time.perf_counter() - t0) / len(out)
        results.extend(out)
    return results
