"""Synthetic speech-like corpus for end-to-end smoke experiments.

"Speech" is a harmonic tone with a wandering pitch under syllable-like
amplitude bursts; noise is white noise plus a band-limited component.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import SAMPLE_RATE, AudioBuffer, MixManifest, MixRecord, mix_at_snr, write_wav

TRAIN_SNRS = (0.0, 5.0, 10.0, 15.0)


def harmonic_speech(rng: np.random.Generator, seconds: float = 2.0) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(100.0, 250.0) * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(3800 // f0.max())
    formant = rng.uniform(400.0, 1500.0)
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        amp = np.exp(-0.5 * ((k * f0.mean() - formant) / 600.0) ** 2) / k + 0.1 / k
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.2) * SAMPLE_RATE)
    while pos < n:
        length = int(rng.uniform(0.15, 0.4) * SAMPLE_RATE)
        seg = np.hanning(length) * rng.uniform(0.4, 1.0)
        end = min(n, pos + length)
        env[pos:end] += seg[: end - pos]
        pos = end + int(rng.uniform(0.03, 0.15) * SAMPLE_RATE)
    x *= env
    return x / np.max(np.abs(x)) * rng.uniform(0.3, 0.6)


def mixed_noise(rng: np.random.Generator, seconds: float = 2.0) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    white = rng.standard_normal(n)
    lo = rng.uniform(200.0, 1500.0)
    hi = min(lo * rng.uniform(2.0, 4.0), 7500.0)
    sos = butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    band = sosfilt(sos, rng.standard_normal(n))
    band /= np.std(band)
    w = rng.uniform(0.2, 0.8)
    x = w * white + (1.0 - w) * band
    return x / np.max(np.abs(x)) * 0.9


@dataclasses.dataclass(frozen=True)
class ToyUtterance:
    uid: str
    clean: AudioBuffer
    noise: AudioBuffer
    noisy: AudioBuffer
    snr_db: float


def make_toy_corpus(
    n_utterances: int = 200,
    seconds: float = 2.0,
    snrs=TRAIN_SNRS,
    seed: int = 0,
) -> list[ToyUtterance]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_utterances):
        snr = float(snrs[i % len(snrs)])
        clean = AudioBuffer(harmonic_speech(rng, seconds))
        noise = AudioBuffer(mixed_noise(rng, seconds))
        mix = mix_at_snr(clean, noise, snr, rng)
        out.append(ToyUtterance(f"toy{i:04d}", mix.clean, mix.noise, mix.noisy, snr))
    return out


def split_corpus(corpus, n_val: int, n_test: int):
    """Deterministic (train, val, test) split from the end of the list."""
    n_train = len(corpus) - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training utterances")
    return corpus[:n_train], corpus[n_train : n_train + n_val], corpus[n_train + n_val :]


def write_toy_sources(
    out_dir: str | os.PathLike,
    n_utterances: int = 8,
    seconds: float = 2.0,
    snrs=TRAIN_SNRS,
    splits=("train", "val", "test"),
    seed: int = 0,
) -> Path:
    """Write clean/noise WAV sources plus a ``manifest.csv`` for ``seflow mix``."""
    out_dir = Path(out_dir)
    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "noise").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_utterances):
        c = Path("clean") / f"utt{i:04d}.wav"
        nz = Path("noise") / f"noise{i:04d}.wav"
        write_wav(out_dir / c, AudioBuffer(harmonic_speech(rng, seconds)))
        write_wav(out_dir / nz, AudioBuffer(mixed_noise(rng, seconds)))
        records.append(MixRecord(c, nz, float(snrs[i % len(snrs)]), splits[i % len(splits)]))
    path = out_dir / "manifest.csv"
    MixManifest(records, out_dir).write(path)
    return path
