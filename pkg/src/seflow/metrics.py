"""Objective metrics and diagnostics: segmental/global SNR, histograms, spectrograms."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import get_window

from .audio import AudioBuffer
from .errors import ShapeError, SilentSignalError

SEG_FRAME = 256
SEG_HOP = 128
SEG_MIN_DB = -10.0
SEG_MAX_DB = 35.0
SILENCE_ENERGY = 1e-8


def _samples(x) -> np.ndarray:
    return np.asarray(x.samples if isinstance(x, AudioBuffer) else x, dtype=np.float64)


def frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    """(n_frames, frame) view of full frames; a trailing partial frame is dropped."""
    if x.shape[0] < frame:
        return np.empty((0, frame))
    return np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]


def segmental_snr(clean, test, frame: int = SEG_FRAME, hop: int = SEG_HOP) -> float:
    """Mean of per-frame SNRs clamped to [-10, 35] dB over non-silent clean frames."""
    c, t = _samples(clean), _samples(test)
    if c.shape != t.shape:
        raise ShapeError(f"segmental_snr: length mismatch {c.shape[0]} vs {t.shape[0]}")
    fc = frame_signal(c, frame, hop)
    fe = frame_signal(c - t, frame, hop)
    sig = np.einsum("ij,ij->i", fc, fc)
    err = np.einsum("ij,ij->i", fe, fe)
    keep = sig >= SILENCE_ENERGY
    if not np.any(keep):
        raise SilentSignalError("segmental_snr: every clean frame is silent")
    with np.errstate(divide="ignore"):
        ratio = 10.0 * np.log10(sig[keep] / err[keep])
    return float(np.mean(np.clip(ratio, SEG_MIN_DB, SEG_MAX_DB)))


def global_snr(clean, test) -> float:
    """10 log10(sum clean^2 / sum (clean - test)^2); +inf when identical."""
    c, t = _samples(clean), _samples(test)
    if c.shape != t.shape:
        raise ShapeError(f"global_snr: length mismatch {c.shape[0]} vs {t.shape[0]}")
    sig = float(np.dot(c, c))
    if sig == 0.0:
        raise SilentSignalError("global_snr: clean signal is silent")
    d = c - t
    err = float(np.dot(d, d))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(sig / err)


def amplitude_histogram(x, n_bins: int = 100) -> np.ndarray:
    """Counts over ``n_bins`` equal-width bins spanning [-1, 1]."""
    counts, _ = np.histogram(_samples(x), bins=n_bins, range=(-1.0, 1.0))
    return counts


# ------------------------------------------------------------- spectrogram


def spectrogram(x, fft_size: int = 512, hop: int = 256) -> np.ndarray:
    """Hann-windowed magnitude STFT, shape (frames, fft_size // 2 + 1)."""
    s = _samples(x)
    if s.shape[0] < fft_size:
        raise ShapeError(f"spectrogram: signal of {s.shape[0]} samples is shorter than fft_size {fft_size}")
    win = get_window("hann", fft_size)
    frames = frame_signal(s, fft_size, hop) * win
    return np.abs(np.fft.rfft(frames, axis=1))


def spectral_energy(mag: np.ndarray, fft_size: int = 512, hop: int = 256) -> float:
    """Time-domain energy estimate from magnitudes, normalized by window overlap.

    Per frame, Parseval gives sum_n (w x)^2 from the one-sided spectrum; the
    sum over frames is divided by the mean overlap of w^2 per sample.
    """
    weights = np.full(mag.shape[1], 2.0)
    weights[0] = 1.0
    if fft_size % 2 == 0:
        weights[-1] = 1.0
    frame_energy = (mag**2 * weights).sum(axis=1) / fft_size
    win = get_window("hann", fft_size)
    overlap = np.sum(win**2) / hop
    return float(frame_energy.sum() / overlap)


def export_spectrogram(mag: np.ndarray, stem: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (frames x bins) and ``<stem>.pgm`` (8-bit, low freq at bottom)."""
    stem = Path(stem)
    csv_path, pgm_path = stem.with_suffix(".csv"), stem.with_suffix(".pgm")
    np.savetxt(csv_path, mag, delimiter=",", fmt="%.9g")
    img = log_magnitude_image(mag)
    h, w = img.shape
    with open(pgm_path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    return csv_path, pgm_path


def log_magnitude_image(mag: np.ndarray) -> np.ndarray:
    """uint8 image (bins x frames) of log magnitude over its own dynamic range."""
    img = np.zeros(mag.T.shape, dtype=np.uint8)
    positive = mag > 0
    if not np.any(positive):
        return img[::-1]
    floor = mag[positive].min()
    db = 20.0 * np.log10(np.maximum(mag, floor))
    lo, hi = db.min(), db.max()
    if hi > lo:
        img = np.round(255.0 * (db - lo) / (hi - lo)).astype(np.uint8).T
    else:
        img = np.where(positive, 255, 0).astype(np.uint8).T
    return np.ascontiguousarray(img[::-1])


# -------------------------------------------------------------- reporting


@dataclasses.dataclass(frozen=True)
class UtteranceMetrics:
    utterance: str
    seg_snr_db: float
    global_snr_db: float


@dataclasses.dataclass
class MetricReport:
    rows: list[UtteranceMetrics]

    @property
    def mean_seg_snr_db(self) -> float:
        return float(np.mean([r.seg_snr_db for r in self.rows]))

    @property
    def mean_global_snr_db(self) -> float:
        return float(np.mean([r.global_snr_db for r in self.rows]))

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["utterance", "seg_snr_db", "global_snr_db"])
            for r in self.rows:
                w.writerow([r.utterance, f"{r.seg_snr_db:.6f}", f"{r.global_snr_db:.6f}"])
            if self.rows:
                w.writerow(["mean", f"{self.mean_seg_snr_db:.6f}", f"{self.mean_global_snr_db:.6f}"])


def evaluate_pairs(items: Sequence[tuple[str, AudioBuffer, AudioBuffer]]) -> MetricReport:
    """Metrics for (utterance id, clean, test) triples."""
    return MetricReport(
        [UtteranceMetrics(uid, segmental_snr(c, t), global_snr(c, t)) for uid, c, t in items]
    )


def write_comparison_csv(path: str | os.PathLike, report: MetricReport, noisy: MetricReport) -> None:
    """Like :meth:`MetricReport.write_csv`, plus the noisy input's segSNR and the improvement over it."""
    base = {r.utterance: r for r in noisy.rows}
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["utterance", "seg_snr_db", "global_snr_db", "noisy_seg_snr_db", "seg_snr_improvement_db"])
        for r in report.rows:
            b = base[r.utterance].seg_snr_db
            w.writerow([r.utterance, f"{r.seg_snr_db:.6f}", f"{r.global_snr_db:.6f}", f"{b:.6f}", f"{r.seg_snr_db - b:.6f}"])
        if report.rows:
            w.writerow([
                "mean", f"{report.mean_seg_snr_db:.6f}", f"{report.mean_global_snr_db:.6f}",
                f"{noisy.mean_seg_snr_db:.6f}", f"{report.mean_seg_snr_db - noisy.mean_seg_snr_db:.6f}",
            ])
