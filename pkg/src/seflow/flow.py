"""Conditional WaveGlow-style flow over grouped time-domain audio.

A flow block is an invertible 1x1 convolution followed by an affine coupling
whose scale and shift come from a WaveNet-like conditioner fed with the
untouched half of the channels and the grouped noisy signal. Every
``early_every`` blocks, ``early_channels`` channels leave the flow and go
straight to the latent.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import tensor as T
from .audio import (
    DEFAULT_MU,
    AudioBuffer,
    group_array,
    mu_compress,
    mu_expand,
    pad_to_multiple,
    ungroup_array,
)
from .errors import ConfigError, ModelDegeneracyError, ShapeError
from .nn import DepthwiseConv, Module, Pointwise
from .tensor import Tensor

DET_FLOOR = 1e-12


@dataclasses.dataclass(frozen=True)
class FlowConfig:
    n_blocks: int = 8
    group_size: int = 8
    early_every: int = 4
    early_channels: int = 2
    wn_layers: int = 4
    residual_channels: int = 64
    skip_channels: int = 32
    kernel_size: int = 3
    sigma_train: float = 1.0
    sigma_infer: float = 0.9

    @classmethod
    def full(cls) -> FlowConfig:
        return cls(
            n_blocks=16,
            group_size=12,
            early_every=4,
            early_channels=2,
            wn_layers=8,
            residual_channels=512,
            skip_channels=256,
        )

    @classmethod
    def desk(cls) -> FlowConfig:
        return cls()

    def __post_init__(self):
        for name in ("n_blocks", "group_size", "wn_layers", "residual_channels", "skip_channels", "kernel_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.early_every < 0 or self.early_channels < 0:
            raise ConfigError("early_every and early_channels must be >= 0")
        if self.sigma_train <= 0 or self.sigma_infer < 0:
            raise ConfigError("sigma_train must be > 0 and sigma_infer >= 0")
        for k, c in enumerate(self.block_channels()):
            if c < 2 or c % 2:
                raise ConfigError(f"block {k} would see {c} channels; coupling needs an even count >= 2")

    def early_exit_before(self, k: int) -> bool:
        """True when early channels leave the flow just before block ``k``."""
        return self.early_every > 0 and self.early_channels > 0 and k > 0 and k % self.early_every == 0

    def block_channels(self) -> list[int]:
        chans, c = [], self.group_size
        for k in range(self.n_blocks):
            if self.early_exit_before(k):
                c -= self.early_channels
            chans.append(c)
        return chans


@dataclasses.dataclass(frozen=True)
class LatentSample:
    """A Gaussian draw ``z ~ N(0, sigma^2 I)`` of a given shape."""

    z: np.ndarray
    sigma: float

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    @classmethod
    def draw(cls, shape, sigma: float, rng: np.random.Generator, dtype=np.float64) -> LatentSample:
        if sigma == 0:
            return cls(np.zeros(shape, dtype=dtype), 0.0)
        return cls((rng.standard_normal(shape) * sigma).astype(dtype), sigma)


class InvConv1x1(Module):
    """Channel-mixing square matrix applied at every time step."""

    def __init__(self, channels: int, rng: np.random.Generator, *, identity=False, dtype=np.float64):
        if identity:
            w = np.eye(channels)
        else:
            q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
            w = q * np.sign(np.diag(r))
        self.weight = Tensor(np.asarray(w, dtype=dtype), requires_grad=True)

    def _check(self) -> float:
        det = abs(np.linalg.det(self.weight.data.astype(np.float64)))
        if not det > DET_FLOOR:
            raise ModelDegeneracyError(f"1x1 convolution is singular (|det W| = {det:.3g})")
        return det

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"InvConv1x1: input shape {x.shape} does not match weight shape {self.weight.shape}")
        self._check()
        y = T.pointwise(x, self.weight)
        b, _, t = x.shape
        logdet = T.mul(T.logabsdet(self.weight), float(b * t))
        return y, logdet

    def inverse(self, y: np.ndarray) -> np.ndarray:
        if y.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"InvConv1x1: input shape {y.shape} does not match weight shape {self.weight.shape}")
        self._check()
        w_inv = np.linalg.inv(self.weight.data.astype(np.float64)).astype(y.dtype)
        return np.matmul(w_inv, y)


class WaveNet(Module):
    """Conditioner mapping (half channels, noisy signal) to (log-scale, shift).

    Dilated depthwise-separable convolutions with a tanh*sigmoid gate; the
    projection of the noisy signal is added before the gate. The final
    projection starts at zero so the coupling is the identity at init.
    """

    def __init__(self, n_in: int, n_cond: int, cfg: FlowConfig, rng, *, dtype=np.float64):
        r, s = cfg.residual_channels, cfg.skip_channels
        self.n_in = n_in
        self.n_layers = cfg.wn_layers
        self.r = r
        self.start = Pointwise(n_in, r, rng, dtype=dtype)
        self.cond = Pointwise(n_cond, 2 * r * cfg.wn_layers, rng, dtype=dtype)
        self.depthwise = []
        self.gate = []
        self.res_skip = []
        for i in range(cfg.wn_layers):
            self.depthwise.append(DepthwiseConv(r, cfg.kernel_size, 2**i, rng, dtype=dtype))
            self.gate.append(Pointwise(r, 2 * r, rng, dtype=dtype))
            out = r + s if i < cfg.wn_layers - 1 else s
            self.res_skip.append(Pointwise(r, out, rng, dtype=dtype))
        self.end = Pointwise(s, 2 * n_in, rng, zero_init=True, dtype=dtype)

    def __call__(self, x_a: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        r = self.r
        h = self.start(x_a)
        cond_all = self.cond(cond)
        skip = None
        for i in range(self.n_layers):
            pre = self.gate[i](self.depthwise[i](h))
            pre = T.add(pre, T.slice_channels(cond_all, 2 * r * i, 2 * r * (i + 1)))
            acts = T.gated_unit(T.slice_channels(pre, 0, r), T.slice_channels(pre, r, 2 * r))
            rs = self.res_skip[i](acts)
            if i < self.n_layers - 1:
                h = T.add(h, T.slice_channels(rs, 0, r))
                s = T.slice_channels(rs, r, rs.shape[1])
            else:
                s = rs
            skip = s if skip is None else T.add(skip, s)
        out = self.end(skip)
        n = self.n_in
        return T.slice_channels(out, 0, n), T.slice_channels(out, n, 2 * n)


class AffineCoupling(Module):
    """Keeps the first half; scales and shifts the second half."""

    def __init__(self, channels: int, cfg: FlowConfig, rng, *, dtype=np.float64):
        if channels % 2:
            raise ConfigError(f"affine coupling needs an even channel count, got {channels}")
        self.half = channels // 2
        self.wn = WaveNet(self.half, cfg.group_size, cfg, rng, dtype=dtype)

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != 2 * self.half:
            raise ShapeError(f"coupling expects {2 * self.half} channels, got shape {x.shape}")
        if cond.shape[2] != x.shape[2] or cond.shape[0] != x.shape[0]:
            raise ShapeError(f"conditioning shape {cond.shape} is not aligned with input shape {x.shape}")
        x_a = T.slice_channels(x, 0, self.half)
        x_b = T.slice_channels(x, self.half, x.shape[1])
        log_s, shift = self.wn(x_a, cond)
        y_b = T.add(T.mul(x_b, T.exp(log_s)), shift)
        return T.concat_channels([x_a, y_b]), T.sum(log_s)

    def inverse(self, y: np.ndarray, cond: np.ndarray) -> np.ndarray:
        with T.no_grad():
            y_a = y[:, : self.half]
            log_s, shift = self.wn(Tensor(y_a), Tensor(cond))
        x_b = (y[:, self.half :] - shift.data) * np.exp(-log_s.data)
        return np.concatenate([y_a, x_b], axis=1)


class FlowModel(Module):
    """Conditional flow p(clean | noisy) on grouped waveforms.

    ``mu`` is the companding parameter used for training data, or None when
    the model works on linear waveforms.
    """

    def __init__(
        self,
        config: FlowConfig,
        rng: np.random.Generator | int | None = 0,
        *,
        mu: float | None = DEFAULT_MU,
        identity: bool = False,
        dtype=np.float64,
    ):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        if mu is not None and not mu > 0:
            raise ConfigError(f"mu must be positive, got {mu}")
        self.config = config
        self.mu = mu
        self.invconv = []
        self.coupling = []
        for c in config.block_channels():
            self.invconv.append(InvConv1x1(c, rng, identity=identity, dtype=dtype))
            self.coupling.append(AffineCoupling(c, config, rng, dtype=dtype))

    @property
    def dtype(self):
        return self.invconv[0].weight.dtype

    def _check_inputs(self, x_shape, cond_shape) -> None:
        g = self.config.group_size
        if len(x_shape) != 3 or x_shape[1] != g:
            raise ShapeError(f"flow input must be (batch, {g}, time), got {x_shape}")
        if tuple(cond_shape) != tuple(x_shape):
            raise ShapeError(f"conditioning shape {cond_shape} does not match input shape {x_shape}")

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Map grouped clean audio to the latent; returns (z, total log-det)."""
        self._check_inputs(x.shape, cond.shape)
        cfg = self.config
        early = []
        logdet = None
        h = x
        for k in range(cfg.n_blocks):
            if cfg.early_exit_before(k):
                early.append(T.slice_channels(h, 0, cfg.early_channels))
                h = T.slice_channels(h, cfg.early_channels, h.shape[1])
            h, ld_w = self.invconv[k].forward(h)
            h, ld_s = self.coupling[k].forward(h, cond)
            ld = T.add(ld_w, ld_s)
            logdet = ld if logdet is None else T.add(logdet, ld)
        z = T.concat_channels(early + [h]) if early else h
        return z, logdet

    def inverse(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Map a latent back to grouped audio given the grouped noisy signal."""
        z = np.asarray(z.data if isinstance(z, Tensor) else z)
        cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=z.dtype)
        self._check_inputs(z.shape, cond.shape)
        cfg = self.config
        chans = cfg.block_channels()
        n_early = sum(1 for k in range(cfg.n_blocks) if cfg.early_exit_before(k))
        lo = n_early * cfg.early_channels
        early = [z[:, i * cfg.early_channels : (i + 1) * cfg.early_channels] for i in range(n_early)]
        h = z[:, lo:]
        for k in reversed(range(cfg.n_blocks)):
            if h.shape[1] != chans[k]:
                raise ShapeError(f"block {k}: expected {chans[k]} channels, got {h.shape[1]}")
            h = self.coupling[k].inverse(h, cond)
            h = self.invconv[k].inverse(h)
            if cfg.early_exit_before(k):
                h = np.concatenate([early.pop(), h], axis=1)
        return h

    def prepare(self, x: AudioBuffer) -> AudioBuffer:
        """Apply the model's companding to linear audio (no-op when ``mu`` is None)."""
        return mu_compress(x, self.mu) if self.mu is not None else x


def nll_loss(z, total_logdet, sigma: float = 1.0):
    """Per-element negative log-likelihood under N(0, sigma^2 I).

    ``-(-D/2 ln(2 pi sigma^2) - |z|^2 / (2 sigma^2) + logdet) / D``. Accepts
    Tensors (returns a scalar Tensor) or plain arrays/floats (returns float).
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if isinstance(z, Tensor):
        d = z.size
        ld = total_logdet if isinstance(total_logdet, Tensor) else Tensor(np.asarray(total_logdet, dtype=z.dtype))
        quad = T.mul(T.sum_squares(z), 1.0 / (2.0 * sigma**2 * d))
        const = 0.5 * math.log(2.0 * math.pi * sigma**2)
        return T.add(T.sub(quad, T.mul(ld, 1.0 / d)), const)
    z = np.asarray(z, dtype=np.float64)
    d = z.size
    return float(0.5 * math.log(2.0 * math.pi * sigma**2) + np.dot(z.ravel(), z.ravel()) / (2.0 * sigma**2 * d) - float(total_logdet) / d)


def enhance(
    y_noisy: AudioBuffer,
    model: FlowModel,
    sigma: float | None = None,
    rng: np.random.Generator | int | None = None,
) -> AudioBuffer:
    """Sample a clean estimate for ``y_noisy`` through the inverted flow.

    The noisy input is companded if the model was trained that way, zero
    padded to a whole number of groups, and the pad is trimmed afterwards so
    the output has the input's length.
    """
    if y_noisy.companded:
        raise ShapeError("enhance expects linear (non-companded) noisy audio")
    sigma = model.config.sigma_infer if sigma is None else sigma
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    g = model.config.group_size
    n = len(y_noisy)
    cond_audio = model.prepare(y_noisy)
    padded = pad_to_multiple(cond_audio.samples, g)
    cond = group_array(padded.astype(model.dtype), g)[None]
    latent = LatentSample.draw(cond.shape, sigma, rng, dtype=model.dtype)
    x = model.inverse(latent.z, cond)
    out = np.clip(ungroup_array(x[0])[:n].astype(np.float64), -1.0, 1.0)
    if model.mu is not None:
        return mu_expand(AudioBuffer(out, companded=True), model.mu)
    return AudioBuffer(out)
