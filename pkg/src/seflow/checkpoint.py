"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"SEFLOW01"
    u32       header length H
    H bytes   UTF-8 JSON header: flow config, mu (null = no companding),
              tensor count, optional training state scalars
    repeated  tensor table entries:
                u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims,
                prod(dims) x float32 data

Model parameters are stored under their own names; training state arrays
(Adam moments, best weights) under ``adam.m/``, ``adam.v/`` and ``best/``.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .flow import FlowConfig, FlowModel
from .training import AdamState, TrainState

MAGIC = b"SEFLOW01"
FORMAT_VERSION = 1


def _write_tensor(buf: io.BufferedIOBase, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_tensor(f) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
    name = _read_exact(f, n, "tensor name").decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"{name} rank"))
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"{name} shape"))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(f, 4 * count, f"{name} data"), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def _state_header(state: TrainState) -> dict:
    return {
        "epoch": state.epoch,
        "phase": state.phase,
        "phase_epoch": state.phase_epoch,
        "best_val_nll": state.best_val_nll,
        "epochs_since_best": state.epochs_since_best,
        "baseline_val_nll": state.baseline_val_nll,
        "adam": {k: getattr(state.adam, k) for k in ("beta1", "beta2", "eps", "step")},
        "rng_state": state.rng_state,
        "has_best": state.best_params is not None,
        "history": state.history,
    }


def save_checkpoint(model: FlowModel, state: TrainState | None, path: str | os.PathLike) -> None:
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.named_parameters()]
    header = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(model.config),
        "mu": model.mu,
        "companded": model.mu is not None,
        "n_model_tensors": len(tensors),
        "train_state": None,
    }
    if state is not None:
        header["train_state"] = _state_header(state)
        for n, _ in list(tensors[: header["n_model_tensors"]]):
            if n in state.adam.m:
                tensors.append((f"adam.m/{n}", state.adam.m[n]))
                tensors.append((f"adam.v/{n}", state.adam.v[n]))
        if state.best_params is not None:
            tensors.extend((f"best/{n}", a) for n, a in state.best_params.items())
    header["n_tensors"] = len(tensors)
    raw = json.dumps(header, sort_keys=True, allow_nan=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(
    path: str | os.PathLike,
    config: FlowConfig | None = None,
) -> tuple[FlowModel, TrainState | None]:
    """Load a model (float32) and, if present, its training state.

    With ``config`` given, the stored config must match it exactly.
    """
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
        tensors = dict(_read_tensor(f) for _ in range(header["n_tensors"]))
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after tensor table")

    try:
        stored = FlowConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid flow config ({exc})") from exc
    if config is not None and config != stored:
        raise CheckpointError(f"{path}: config mismatch, file has {stored}, expected {config}")
    model = FlowModel(stored, 0, mu=header["mu"], dtype=np.float32)
    own = dict(model.named_parameters())
    params = {n: a for n, a in tensors.items() if "/" not in n}
    if params.keys() != own.keys():
        raise CheckpointError(
            f"{path}: parameter names do not match the config "
            f"(missing {sorted(own.keys() - params.keys())[:3]}, unexpected {sorted(params.keys() - own.keys())[:3]})"
        )
    for n, p in own.items():
        if params[n].shape != p.shape:
            raise CheckpointError(f"{path}: {n} has shape {params[n].shape}, config needs {p.shape}")
    model.load_state_dict(params)

    state = None
    ts = header.get("train_state")
    if ts is not None:
        adam = AdamState(**ts["adam"])
        for n in own:
            if f"adam.m/{n}" in tensors:
                adam.m[n] = tensors[f"adam.m/{n}"].copy()
                adam.v[n] = tensors[f"adam.v/{n}"].copy()
        best = {n: tensors[f"best/{n}"].copy() for n in own} if ts["has_best"] else None
        state = TrainState(
            epoch=ts["epoch"],
            phase=ts["phase"],
            phase_epoch=ts["phase_epoch"],
            best_val_nll=ts["best_val_nll"],
            epochs_since_best=ts["epochs_since_best"],
            baseline_val_nll=ts["baseline_val_nll"],
            adam=adam,
            best_params=best,
            rng_state=ts["rng_state"],
            history=ts["history"],
        )
    return model, state
