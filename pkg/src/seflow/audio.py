"""Waveform I/O, mu-law companding, sample grouping, SNR mixing and chunking."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import struct
import warnings
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import AudioFormatError, CompandingError, ShapeError, SilentSignalError
from .tensor import Tensor

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
DEFAULT_MU = 255.0
CLIP_PEAK = 0.999


@dataclasses.dataclass(frozen=True)
class AudioBuffer:
    """Mono waveform in [-1, 1] at 16 kHz.

    ``companded`` records whether the samples are in the mu-law domain.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    companded: bool = False

    def __post_init__(self):
        x = np.asarray(self.samples)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(np.float64)
        if x.ndim != 1:
            raise AudioFormatError(f"audio must be mono (1-D), got shape {x.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(
                f"sample rate {self.sample_rate} Hz is not supported; resample to {SAMPLE_RATE} Hz first"
            )
        if x.size and not np.all(np.isfinite(x)):
            raise AudioFormatError("audio contains NaN or Inf")
        if x.size and np.max(np.abs(x)) > 1.0:
            raise AudioFormatError(f"samples must lie in [-1, 1], peak is {np.max(np.abs(x)):.6g}")
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def replace(self, samples: np.ndarray, **changes) -> AudioBuffer:
        return dataclasses.replace(self, samples=samples, **changes)


# ------------------------------------------------------------------ mu-law


def mu_law(x: np.ndarray, mu: float = DEFAULT_MU) -> np.ndarray:
    """``sgn(x) * ln(1 + mu|x|) / ln(1 + mu)`` without quantization."""
    x = np.asarray(x)
    return np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)


def mu_law_inverse(y: np.ndarray, mu: float = DEFAULT_MU) -> np.ndarray:
    y = np.asarray(y)
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(mu)) / mu


def mu_compress(x: AudioBuffer, mu: float = DEFAULT_MU) -> AudioBuffer:
    if x.companded:
        raise CompandingError("audio is already companded")
    if not mu > 0:
        raise CompandingError(f"mu must be positive, got {mu}")
    y = np.clip(mu_law(x.samples, mu), -1.0, 1.0)
    return x.replace(y, companded=True)


def mu_expand(y: AudioBuffer, mu: float = DEFAULT_MU) -> AudioBuffer:
    if not y.companded:
        raise CompandingError("audio is not companded")
    if not mu > 0:
        raise CompandingError(f"mu must be positive, got {mu}")
    x = np.clip(mu_law_inverse(y.samples, mu), -1.0, 1.0)
    return y.replace(x, companded=False)


# ---------------------------------------------------------------- grouping


def group_array(x: np.ndarray, group_size: int) -> np.ndarray:
    """(N,) -> (group_size, N // group_size); sample ``t*G + c`` lands at [c, t]."""
    if group_size < 2:
        raise ShapeError(f"group_size must be >= 2, got {group_size}")
    n = x.shape[-1] // group_size
    if n == 0:
        raise ShapeError(f"signal of {x.shape[-1]} samples is shorter than group_size {group_size}")
    return x[..., : n * group_size].reshape(x.shape[:-1] + (n, group_size)).swapaxes(-1, -2)


def group(x: AudioBuffer, group_size: int) -> Tensor:
    """Stack consecutive samples into channels; trailing remainder is dropped."""
    return Tensor(np.ascontiguousarray(group_array(x.samples, group_size)[None]))


def ungroup_array(g: np.ndarray) -> np.ndarray:
    """Inverse of :func:`group_array`; accepts (..., G, T)."""
    return np.ascontiguousarray(g.swapaxes(-1, -2)).reshape(g.shape[:-2] + (-1,))


def ungroup(t: Tensor | np.ndarray, group_size: int, companded: bool = False) -> AudioBuffer:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 3 or data.shape[0] != 1:
        raise ShapeError(f"ungroup expects a (1, {group_size}, T) tensor, got {data.shape}")
    if data.shape[1] != group_size:
        raise ShapeError(f"ungroup: tensor has {data.shape[1]} channels, expected {group_size}")
    return AudioBuffer(ungroup_array(data[0]), companded=companded)


def pad_to_multiple(x: np.ndarray, multiple: int) -> np.ndarray:
    rem = (-x.shape[-1]) % multiple
    if rem == 0:
        return x
    return np.concatenate([x, np.zeros(rem, dtype=x.dtype)])


# ------------------------------------------------------------------ mixing


def power(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.dot(x, x) / x.size)


@dataclasses.dataclass(frozen=True)
class Mixture:
    """Result of :func:`mix_at_snr`.

    ``clean`` and ``noise`` are the exact components of ``noisy`` (the noise
    already scaled), after any joint peak rescaling.
    """

    clean: AudioBuffer
    noise: AudioBuffer
    noisy: AudioBuffer
    noise_gain: float
    peak_scale: float


def fit_noise_length(noise: np.ndarray, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Loop short noise; crop long noise at a random offset."""
    if noise.shape[0] < n:
        reps = math.ceil(n / noise.shape[0])
        return np.tile(noise, reps)[:n]
    if noise.shape[0] == n:
        return noise
    rng = rng if rng is not None else np.random.default_rng(0)
    off = int(rng.integers(0, noise.shape[0] - n + 1))
    return noise[off : off + n]


def mix_at_snr(
    clean: AudioBuffer,
    noise: AudioBuffer,
    snr_db: float,
    rng: np.random.Generator | int | None = None,
) -> Mixture:
    """Add ``noise`` to ``clean`` scaled so the global SNR equals ``snr_db``.

    If the mixture would leave [-1, 1], clean, noise and mixture are rescaled
    together to a peak of 0.999, which keeps the SNR intact.
    """
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    if clean.companded or noise.companded:
        raise CompandingError("mix in the linear domain, not on companded audio")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = clean.samples.astype(np.float64)
    if x.size == 0:
        raise SilentSignalError("clean signal is empty")
    n = fit_noise_length(noise.samples.astype(np.float64), x.size, rng)
    p_x, p_n = power(x), power(n)
    if p_x == 0.0:
        raise SilentSignalError("clean signal is silent; SNR is undefined")
    if p_n == 0.0:
        raise SilentSignalError("noise signal is silent; SNR is undefined")
    alpha = math.sqrt(p_x / (p_n * 10.0 ** (snr_db / 10.0)))
    scaled = alpha * n
    y = x + scaled
    peak = float(np.max(np.abs(y)))
    scale = 1.0
    if peak > 1.0:
        scale = CLIP_PEAK / peak
        x, scaled, y = x * scale, scaled * scale, y * scale
    return Mixture(
        clean=AudioBuffer(x),
        noise=AudioBuffer(np.clip(scaled, -1.0, 1.0)),
        noisy=AudioBuffer(y),
        noise_gain=alpha,
        peak_scale=scale,
    )


# ---------------------------------------------------------------- chunking


def chunk_offset(n_samples: int, chunk_len: int, rng: np.random.Generator) -> int:
    """Uniform start offset for a chunk; 0 when the signal is not longer."""
    if n_samples <= chunk_len:
        return 0
    return int(rng.integers(0, n_samples - chunk_len + 1))


def take_chunk(x: np.ndarray, offset: int, chunk_len: int) -> np.ndarray:
    piece = x[offset : offset + chunk_len]
    if piece.shape[0] < chunk_len:
        piece = np.concatenate([piece, np.zeros(chunk_len - piece.shape[0], dtype=x.dtype)])
    return piece


def random_chunk(
    x: AudioBuffer,
    duration_s: float = 1.0,
    rng: np.random.Generator | int | None = None,
) -> AudioBuffer:
    """Contiguous chunk of exactly ``duration_s`` seconds; short input is zero-padded."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    length = int(round(duration_s * x.sample_rate))
    off = chunk_offset(len(x), length, rng)
    return x.replace(take_chunk(x.samples, off, length))


# --------------------------------------------------------------------- WAV


def _wav_format_tag(path: Path) -> tuple[int, int]:
    """(format tag, bits per sample) from the fmt chunk; resolves WAVE_FORMAT_EXTENSIBLE."""
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
        while True:
            hdr = f.read(8)
            if len(hdr) < 8:
                raise AudioFormatError(f"{path}: no fmt chunk")
            cid, size = hdr[:4], struct.unpack("<I", hdr[4:])[0]
            if cid == b"fmt ":
                body = f.read(size)
                if len(body) < 16:
                    raise AudioFormatError(f"{path}: truncated fmt chunk")
                tag, _, _, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                if tag == 0xFFFE and len(body) >= 26:
                    tag = struct.unpack("<H", body[24:26])[0]
                return tag, bits
            f.seek(size + (size & 1), os.SEEK_CUR)


def read_wav(path: str | os.PathLike) -> AudioBuffer:
    """Read a mono PCM16 or float32 WAV at 16 kHz into [-1, 1]."""
    path = Path(path)
    tag, bits = _wav_format_tag(path)
    if (tag, bits) not in ((1, 16), (3, 32)):
        raise AudioFormatError(
            f"{path}: unsupported codec (format tag {tag}, {bits} bit); need PCM 16-bit or IEEE float 32-bit"
        )
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        raise AudioFormatError(f"{path}: malformed WAV ({exc})") from exc
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    else:
        samples = data.astype(np.float64)
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz is not supported; resample to {SAMPLE_RATE} Hz first")
    return AudioBuffer(samples)


def write_wav(path: str | os.PathLike, x: AudioBuffer) -> None:
    """Write ``x`` as a mono IEEE float32 WAV."""
    if x.companded:
        raise CompandingError("refusing to write companded audio; expand it first")
    wavfile.write(Path(path), x.sample_rate, x.samples.astype(np.float32))


# ---------------------------------------------------------------- manifest


Split = Literal["train", "val", "test"]


@dataclasses.dataclass(frozen=True)
class MixRecord:
    clean_path: Path
    noise_path: Path
    snr_db: float
    split: Split


@dataclasses.dataclass
class MixManifest:
    records: list[MixRecord]
    root: Path = Path(".")

    @classmethod
    def read(cls, path: str | os.PathLike) -> MixManifest:
        """Read ``clean,noise,snr_db,split`` CSV; paths are relative to its directory."""
        path = Path(path)
        root = path.parent
        records = []
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != ["clean", "noise", "snr_db", "split"]:
                raise AudioFormatError(f"{path}: header must be 'clean,noise,snr_db,split', got {reader.fieldnames}")
            for i, row in enumerate(reader, start=2):
                try:
                    snr = float(row["snr_db"])
                except ValueError as exc:
                    raise AudioFormatError(f"{path}:{i}: bad snr_db {row['snr_db']!r}") from exc
                if not math.isfinite(snr):
                    raise AudioFormatError(f"{path}:{i}: snr_db must be finite")
                split = row["split"].strip()
                if split not in ("train", "val", "test"):
                    raise AudioFormatError(f"{path}:{i}: split must be train|val|test, got {split!r}")
                clean, noise = row["clean"].strip(), row["noise"].strip()
                if clean == noise:
                    raise AudioFormatError(f"{path}:{i}: clean and noise paths are identical")
                records.append(MixRecord(Path(clean), Path(noise), snr, split))
        return cls(records, root)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["clean", "noise", "snr_db", "split"])
            for r in self.records:
                w.writerow([r.clean_path.as_posix(), r.noise_path.as_posix(), repr(r.snr_db), r.split])

    def resolve(self, p: Path) -> Path:
        return p if p.is_absolute() else self.root / p


def load_pairs(paths: Sequence[tuple[os.PathLike, os.PathLike]]) -> list[tuple[AudioBuffer, AudioBuffer]]:
    out = []
    for clean_path, noisy_path in paths:
        clean, noisy = read_wav(clean_path), read_wav(noisy_path)
        if len(clean) != len(noisy):
            raise AudioFormatError(f"{clean_path} and {noisy_path} differ in length ({len(clean)} vs {len(noisy)})")
        out.append((clean, noisy))
    return out
