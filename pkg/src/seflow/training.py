"""Maximum-likelihood training: Adam, gradient clipping, two-phase early stopping."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .audio import AudioBuffer, chunk_offset, group_array, take_chunk
from .errors import NonFiniteLossError
from .flow import FlowModel, nll_loss
from .nn import weight_norm_reparam  # noqa: F401  (public API)
from .tensor import Tensor

logger = logging.getLogger(__name__)

Pair = tuple[AudioBuffer, AudioBuffer]  # (clean, noisy)

HISTORY_FIELDS = ("epoch", "phase", "train_nll", "val_nll", "lr", "seconds")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr_initial: float = 3e-4
    lr_finetune: float = 3e-5
    patience: int = 20
    max_epochs: int = 150
    chunk_seconds: float = 1.0
    seed: int = 0
    grad_clip: float = 100.0

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, patience and max_epochs must be >= 1")
        if not (self.lr_initial > 0 and self.lr_finetune > 0 and self.chunk_seconds > 0):
            raise ValueError("learning rates and chunk_seconds must be positive")


# ------------------------------------------------------------------- Adam


@dataclasses.dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> bool:
    """One bias-corrected Adam update, in place. Returns False if skipped.

    A step with any non-finite gradient is skipped entirely; moments and the
    step counter are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            logger.warning("non-finite gradient in %s; skipping optimizer step %d", name, state.step + 1)
            return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if math.isfinite(total) and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------- state


@dataclasses.dataclass
class TrainState:
    """Everything needed to resume training bit-exactly."""

    epoch: int = 0
    phase: str = "initial"  # initial | finetune | done
    phase_epoch: int = 0
    best_val_nll: float = math.inf
    epochs_since_best: int = 0
    baseline_val_nll: float = math.nan
    adam: AdamState = dataclasses.field(default_factory=AdamState)
    best_params: dict[str, np.ndarray] | None = None
    rng_state: dict | None = None
    history: list[dict] = dataclasses.field(default_factory=list)


@dataclasses.dataclass
class TrainResult:
    model: FlowModel
    history: list[dict]
    state: TrainState

    @property
    def best_val_nll(self) -> float:
        return min(row["val_nll"] for row in self.history)


# --------------------------------------------------------------- batches


def _prepared_arrays(model: FlowModel, pairs: Sequence[Pair]) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for clean, noisy in pairs:
        if len(clean) != len(noisy):
            raise ValueError(f"clean/noisy lengths differ: {len(clean)} vs {len(noisy)}")
        out.append(
            (
                model.prepare(clean).samples.astype(model.dtype),
                model.prepare(noisy).samples.astype(model.dtype),
            )
        )
    return out


def batch_nll(model: FlowModel, clean: np.ndarray, noisy: np.ndarray, sigma: float) -> Tensor:
    """NLL per element of a (B, G, T) grouped clean batch given its noisy twin."""
    z, logdet = model.forward(Tensor(clean), Tensor(noisy))
    return nll_loss(z, logdet, sigma)


def evaluate_nll(model: FlowModel, pairs: Sequence[Pair], sigma: float | None = None) -> float:
    """Element-weighted validation NLL over full utterances."""
    sigma = model.config.sigma_train if sigma is None else sigma
    g = model.config.group_size
    total, count = 0.0, 0
    with T.no_grad():
        for clean, noisy in _prepared_arrays(model, pairs):
            x = group_array(clean, g)[None]
            y = group_array(noisy, g)[None]
            loss = batch_nll(model, x, y, sigma).item()
            total += loss * x.size
            count += x.size
    return total / count


def _grads(model: FlowModel) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    params, grads = {}, {}
    for name, p in model.named_parameters():
        params[name] = p.data
        grads[name] = np.array(p.grad, copy=True) if p.grad is not None else np.zeros_like(p.data)
    return params, grads


def train_epoch(
    model: FlowModel,
    data: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    adam: AdamState,
    rng: np.random.Generator,
    lr: float,
) -> float:
    """One pass with one random chunk per utterance; returns mean train NLL."""
    g = model.config.group_size
    chunk_len = int(round(cfg.chunk_seconds * 16000))
    chunk_len -= chunk_len % g
    order = rng.permutation(len(data))
    total, count = 0.0, 0
    for lo in range(0, len(order), cfg.batch_size):
        xs, ys = [], []
        for i in order[lo : lo + cfg.batch_size]:
            clean, noisy = data[i]
            off = chunk_offset(clean.shape[0], chunk_len, rng)
            xs.append(group_array(take_chunk(clean, off, chunk_len), g))
            ys.append(group_array(take_chunk(noisy, off, chunk_len), g))
        x, y = np.stack(xs), np.stack(ys)
        model.zero_grad()
        loss = batch_nll(model, x, y, model.config.sigma_train)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"training NLL became {value}")
        loss.backward()
        params, grads = _grads(model)
        clip_grad_norm(grads, cfg.grad_clip)
        adam_step(params, grads, adam, lr)
        total += value * x.shape[0]
        count += x.shape[0]
    model.zero_grad()
    return total / count


def train(
    model: FlowModel,
    train_set: Sequence[Pair],
    val_set: Sequence[Pair],
    cfg: TrainConfig,
    *,
    state: TrainState | None = None,
    on_epoch_end: Callable[[FlowModel, TrainState], None] | None = None,
    validate: Callable[[FlowModel], float] | None = None,
) -> TrainResult:
    """Fit ``model`` by minimizing the per-element NLL.

    Runs an initial phase at ``lr_initial`` until validation NLL has not
    improved for ``patience`` epochs (or ``max_epochs`` is reached), restores
    the best weights, resets Adam, and repeats at ``lr_finetune``. The model
    returned carries the best weights of the finetune phase.

    Pass a ``state`` saved by ``on_epoch_end`` to resume.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    validate = validate or (lambda m: evaluate_nll(m, val_set))
    data = _prepared_arrays(model, train_set)
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = TrainState()
        state.baseline_val_nll = validate(model)
        logger.info("baseline validation NLL %.4f", state.baseline_val_nll)
    else:
        rng.bit_generator.state = state.rng_state

    while state.phase != "done":
        lr = cfg.lr_initial if state.phase == "initial" else cfg.lr_finetune
        t0 = time.perf_counter()
        try:
            train_nll = train_epoch(model, data, cfg, state.adam, rng, lr)
            val_nll = validate(model)
            if not math.isfinite(val_nll):
                raise NonFiniteLossError(f"validation NLL became {val_nll}")
        except NonFiniteLossError:
            if state.best_params is not None:
                model.load_state_dict(state.best_params)
            raise
        state.epoch += 1
        state.phase_epoch += 1
        row = {
            "epoch": state.epoch,
            "phase": state.phase,
            "train_nll": train_nll,
            "val_nll": val_nll,
            "lr": lr,
            "seconds": time.perf_counter() - t0,
        }
        state.history.append(row)
        logger.info("epoch %d (%s) train %.4f val %.4f", state.epoch, state.phase, train_nll, val_nll)
        if val_nll < state.best_val_nll:
            state.best_val_nll = val_nll
            state.epochs_since_best = 0
            state.best_params = model.state_dict()
        else:
            state.epochs_since_best += 1
        state.rng_state = rng.bit_generator.state
        if state.epochs_since_best >= cfg.patience or state.phase_epoch >= cfg.max_epochs:
            model.load_state_dict(state.best_params)
            if state.phase == "initial":
                state.phase = "finetune"
                state.adam = AdamState()
                state.best_val_nll = math.inf
                state.best_params = None
            else:
                state.phase = "done"
            state.phase_epoch = 0
            state.epochs_since_best = 0
        if on_epoch_end is not None:
            on_epoch_end(model, state)
    return TrainResult(model, state.history, state)


def write_history(path: str | os.PathLike, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})
