"""Filtering, windowing, normalization and clean-reference detection.

This module turns a continuous multichannel recording into the batch of
z-score-normalized sliding windows consumed by the reconstruction layers.
The normalization statistics come from "clean" windows: windows in which
every sample of every channel stays inside a global per-channel
mean +/- 3.5 std envelope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .validation import (
    CalibrationError,
    DataError,
    EmptyBatchError,
    ParameterError,
    check_finite,
)

SIGMA_FLOOR = 1e-8
CLEAN_Z = 3.5
DEFAULT_WINDOW = 256
DEFAULT_HOP = 20
DEFAULT_BAND = (0.5, 30.0)
DEFAULT_ORDER = 6

__all__ = [
    "EegRecording",
    "WindowBatch",
    "ChannelStats",
    "bandpass_filter",
    "make_windows",
    "detect_clean_windows",
    "compute_reference_stats",
    "zscore_normalize",
    "zscore_denormalize",
    "save_recording",
    "load_recording",
]


@dataclass
class EegRecording:
    """Continuous multichannel signal with sampling-rate metadata.

    Attributes
    ----------
    data : ndarray, shape (C, T)
        Channel-major signal in microvolt-scale arbitrary units.
    fs : float
        Sampling rate in Hz.
    channel_labels : list of str
        One label per channel.
    """

    data: np.ndarray
    fs: float
    channel_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataError(f"recording data must be (C, T), got {self.data.shape}")
        c, t = self.data.shape
        if c < 2:
            raise DataError(f"recording needs at least 2 channels, got {c}")
        if t < 1:
            raise DataError("recording needs at least 1 sample")
        if self.fs <= 0:
            raise ParameterError(f"sampling rate must be positive, got {self.fs}")
        check_finite(self.data, "recording data")
        if not self.channel_labels:
            self.channel_labels = [f"ch{i}" for i in range(c)]
        if len(self.channel_labels) != c:
            raise DataError(
                f"{len(self.channel_labels)} labels for {c} channels"
            )

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.data.shape[1] / self.fs


@dataclass
class WindowBatch:
    """Batch of sliding windows shaped ``(B, C, W)`` with optional labels."""

    windows: np.ndarray
    window_start_indices: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        if self.windows.ndim != 3:
            raise DataError(f"windows must be (B, C, W), got {self.windows.shape}")
        starts = np.asarray(self.window_start_indices, dtype=np.int64)
        if starts.shape != (self.windows.shape[0],):
            raise DataError("one start index per window required")
        if starts.size > 1:
            strides = np.diff(starts)
            if (strides <= 0).any() or (strides != strides[0]).any():
                raise DataError(
                    "window_start_indices must strictly increase with a "
                    "constant stride"
                )
        self.window_start_indices = starts
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.windows.shape[0],):
                raise DataError("labels must have one entry per window")

    @property
    def n_windows(self) -> int:
        return self.windows.shape[0]

    @property
    def n_channels(self) -> int:
        return self.windows.shape[1]

    @property
    def window_length(self) -> int:
        return self.windows.shape[2]


@dataclass
class ChannelStats:
    """Per-channel clean-reference mean and standard deviation."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise DataError("mu and sigma must be 1-D vectors of equal length")
        if (self.sigma <= 0).any():
            raise DataError("sigma must be strictly positive (floor applied?)")


def bandpass_filter(
    rec: EegRecording,
    low_hz: float = DEFAULT_BAND[0],
    high_hz: float = DEFAULT_BAND[1],
    order: int = DEFAULT_ORDER,
) -> EegRecording:
    """Zero-phase Butterworth band-pass filter applied per channel.

    The filter is designed as cascaded second-order sections and run
    forward-backward, so the effective magnitude response is the squared
    single-pass response and the phase is zero. Each channel is extended
    with an odd-symmetric reflection of ``3 * order * 2`` samples on both
    sides before filtering to suppress edge transients.

    Parameters
    ----------
    rec : EegRecording
    low_hz, high_hz : float
        Pass-band edges; must satisfy ``0 < low_hz < high_hz < fs / 2``.
    order : int
        Design order of the band-pass prototype; even and >= 2.

    Returns
    -------
    EegRecording
        Filtered copy, same length and metadata as the input.
    """
    if not (0.0 < low_hz < high_hz < rec.fs / 2.0):
        raise ParameterError(
            f"cutoffs must satisfy 0 < low ({low_hz}) < high ({high_hz}) "
            f"< fs/2 ({rec.fs / 2.0})"
        )
    if order < 2 or order % 2 != 0:
        raise ParameterError(f"filter order must be even and >= 2, got {order}")
    check_finite(rec.data, "recording data")
    padlen = 3 * order * 2
    if rec.n_samples <= padlen:
        raise DataError(
            f"recording too short to filter: need > {padlen} samples, "
            f"got {rec.n_samples}"
        )
    sos = signal.butter(
        order, [low_hz, high_hz], btype="bandpass", output="sos", fs=rec.fs
    )
    out = signal.sosfiltfilt(sos, rec.data, axis=1, padtype="odd", padlen=padlen)
    return EegRecording(out, rec.fs, list(rec.channel_labels))


def make_windows(
    rec: EegRecording, w: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP
) -> WindowBatch:
    """Slice a recording into overlapping windows of length ``w``.

    Window ``b`` covers samples ``[b * hop, b * hop + w)``; the number of
    windows is ``floor((T - w) / hop) + 1``.
    """
    if hop < 1:
        raise ParameterError(f"hop must be >= 1, got {hop}")
    if w < 1:
        raise ParameterError(f"window length must be >= 1, got {w}")
    if w > rec.n_samples:
        raise EmptyBatchError(
            f"window length {w} exceeds recording length {rec.n_samples}"
        )
    views = np.lib.stride_tricks.sliding_window_view(rec.data, w, axis=1)
    windows = views[:, ::hop].transpose(1, 0, 2)
    starts = np.arange(windows.shape[0], dtype=np.int64) * hop
    return WindowBatch(windows.copy(), starts)


def detect_clean_windows(batch: WindowBatch) -> np.ndarray:
    """Flag windows whose samples all stay inside mu +/- 3.5 sigma.

    The per-channel mean and (population) standard deviation are computed
    over the samples of *all* windows. A window is clean only if every
    sample of every channel lies inside the envelope; a single violating
    channel discards the whole window.
    """
    if batch.n_windows < 1:
        raise EmptyBatchError("need at least one window")
    x = batch.windows
    mu = x.mean(axis=(0, 2))
    sigma = np.maximum(x.std(axis=(0, 2)), SIGMA_FLOOR)
    lo = (mu - CLEAN_Z * sigma)[None, :, None]
    hi = (mu + CLEAN_Z * sigma)[None, :, None]
    inside = (x >= lo) & (x <= hi)
    return inside.all(axis=(1, 2))


def compute_reference_stats(batch: WindowBatch, clean: np.ndarray) -> ChannelStats:
    """Per-channel mean/std over the concatenated clean windows.

    Uses the population standard deviation (divide by N) with a
    ``1e-8`` floor so flat channels survive the later division.
    """
    clean = np.asarray(clean, dtype=bool)
    if clean.shape != (batch.n_windows,):
        raise ParameterError("clean mask must have one entry per window")
    if not clean.any():
        raise CalibrationError(
            "no clean windows found; relax the clean-window criterion or "
            "provide calmer reference data"
        )
    x = batch.windows[clean]
    mu = x.mean(axis=(0, 2))
    sigma = np.maximum(x.std(axis=(0, 2)), SIGMA_FLOOR)
    return ChannelStats(mu, sigma)


def zscore_normalize(batch: WindowBatch, stats: ChannelStats) -> WindowBatch:
    """Channel-wise z-score: ``(x - mu[c]) / sigma[c]``."""
    if stats.mu.shape[0] != batch.n_channels:
        raise ParameterError(
            f"stats for {stats.mu.shape[0]} channels, batch has "
            f"{batch.n_channels}"
        )
    out = (batch.windows - stats.mu[None, :, None]) / stats.sigma[None, :, None]
    return WindowBatch(out, batch.window_start_indices.copy(), batch.labels)


def zscore_denormalize(batch: WindowBatch, stats: ChannelStats) -> WindowBatch:
    """Inverse of :func:`zscore_normalize`."""
    if stats.mu.shape[0] != batch.n_channels:
        raise ParameterError("stats/batch channel mismatch")
    out = batch.windows * stats.sigma[None, :, None] + stats.mu[None, :, None]
    return WindowBatch(out, batch.window_start_indices.copy(), batch.labels)


# ---------------------------------------------------------------------------
# Recording file format: a JSON header plus raw little-endian float32,
# channel-major. Shared with the CLI.
# ---------------------------------------------------------------------------

def _paths(base: str | Path) -> tuple[Path, Path]:
    base = Path(base)
    if base.suffix == ".json":
        base = base.with_suffix("")
    return base.with_suffix(".json"), base.with_suffix(".bin")


def save_recording(rec: EegRecording, base: str | Path) -> tuple[Path, Path]:
    """Write ``<base>.json`` (header) and ``<base>.bin`` (f32le payload)."""
    header_path, bin_path = _paths(base)
    header = {
        "fs": float(rec.fs),
        "channels": list(rec.channel_labels),
        "samples": int(rec.n_samples),
        "dtype": "f32le",
        "layout": "channel_major",
    }
    header_path.write_text(json.dumps(header, indent=2))
    rec.data.astype("<f4").tofile(bin_path)
    return header_path, bin_path


def load_recording(base: str | Path) -> EegRecording:
    """Read a recording written by :func:`save_recording`."""
    header_path, bin_path = _paths(base)
    header = json.loads(header_path.read_text())
    if header.get("dtype") != "f32le" or header.get("layout") != "channel_major":
        raise DataError(f"unsupported recording format in {header_path}")
    channels = header["channels"]
    samples = int(header["samples"])
    raw = np.fromfile(bin_path, dtype="<f4")
    if raw.size != len(channels) * samples:
        raise DataError(
            f"{bin_path}: expected {len(channels) * samples} samples, "
            f"got {raw.size}"
        )
    data = raw.reshape(len(channels), samples).astype(np.float64)
    return EegRecording(data, float(header["fs"]), list(channels))
