"""Simplified traditional artifact subspace reconstruction baseline.

Calibrates on clean resting data: the principal axes of the calibration
covariance define a fixed projection, and per-component RMS statistics
over short sub-windows define rejection thresholds. At transform time
each window is projected onto those axes, components whose RMS exceeds
``mu + cutoff * sigma`` are zeroed, and the window is projected back.

This is a deliberately plain Euclidean variant: no robust (RANSAC)
calibration, no Riemannian averaging, no sliding covariance blending,
and rejected components are zeroed rather than interpolated from the
calibration covariance. Those simplifications are the documented
divergence from canonical ASR implementations.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .linalg import sym_eig
from .preprocess import SIGMA_FLOOR, EegRecording
from .validation import CalibrationError, ParameterError, as_window_array

MIN_CALIB_SECONDS = 10.0
RECOMMENDED_CALIB_SECONDS = 60.0
DEFAULT_CUTOFF = 20.0
DEFAULT_SUBWIN_SECONDS = 0.5
DEFAULT_SUBWIN_OVERLAP = 0.5

__all__ = ["AsrModel", "asr_calibrate", "asr_transform", "AsrReconstructor"]


@dataclass
class AsrModel:
    """Fitted state: calibration eigenvectors and per-component RMS stats."""

    v0: np.ndarray          # (C, C), columns are calibration PCs
    comp_mu: np.ndarray     # (C,)
    comp_sigma: np.ndarray  # (C,)
    cutoff: float
    fs: float

    @property
    def thresholds(self) -> np.ndarray:
        return self.comp_mu + self.cutoff * self.comp_sigma

    def to_json(self, path: str | Path) -> None:
        payload = {
            "v0": self.v0.tolist(),
            "comp_mu": self.comp_mu.tolist(),
            "comp_sigma": self.comp_sigma.tolist(),
            "cutoff": float(self.cutoff),
            "fs": float(self.fs),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def from_json(cls, path: str | Path) -> "AsrModel":
        payload = json.loads(Path(path).read_text())
        return cls(
            v0=np.asarray(payload["v0"], dtype=np.float64),
            comp_mu=np.asarray(payload["comp_mu"], dtype=np.float64),
            comp_sigma=np.asarray(payload["comp_sigma"], dtype=np.float64),
            cutoff=float(payload["cutoff"]),
            fs=float(payload["fs"]),
        )


def asr_calibrate(
    calib: EegRecording,
    cutoff: float = DEFAULT_CUTOFF,
    subwin_seconds: float = DEFAULT_SUBWIN_SECONDS,
    subwin_overlap: float = DEFAULT_SUBWIN_OVERLAP,
) -> AsrModel:
    """Fit rejection statistics from a resting-state recording.

    Requires at least 10 s of data and warns below the recommended 60 s.
    Per-component RMS values are collected over 0.5 s sub-windows with
    50% overlap; the rejection threshold of component ``i`` is
    ``mu_i + cutoff * sigma_i``.
    """
    if calib.duration < MIN_CALIB_SECONDS:
        raise CalibrationError(
            f"calibration needs >= {MIN_CALIB_SECONDS:.0f} s of data, got "
            f"{calib.duration:.1f} s"
        )
    if calib.duration < RECOMMENDED_CALIB_SECONDS:
        warnings.warn(
            f"calibration duration {calib.duration:.1f} s is below the "
            f"recommended {RECOMMENDED_CALIB_SECONDS:.0f} s",
            stacklevel=2,
        )
    x = calib.data
    centered = x - x.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / (x.shape[1] - 1)
    _, v0 = sym_eig(cov)

    y = v0.T @ x
    n = max(int(round(subwin_seconds * calib.fs)), 2)
    step = max(int(round(n * (1.0 - subwin_overlap))), 1)
    offsets = range(0, y.shape[1] - n + 1, step)
    rms = np.stack(
        [np.sqrt(np.mean(y[:, o:o + n] ** 2, axis=1)) for o in offsets], axis=1
    )
    comp_mu = rms.mean(axis=1)
    comp_sigma = np.maximum(rms.std(axis=1), SIGMA_FLOOR)
    return AsrModel(
        v0=v0, comp_mu=comp_mu, comp_sigma=comp_sigma,
        cutoff=float(cutoff), fs=calib.fs,
    )


def asr_transform(model: AsrModel, window: np.ndarray) -> np.ndarray:
    """Reject abnormally energetic components of one ``(C, W)`` window.

    Windows in which no component exceeds its threshold are returned
    bit-identical to the input (no projection round-trip error).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[0] != model.v0.shape[0]:
        raise ParameterError(
            f"window shape {window.shape} does not match model with "
            f"{model.v0.shape[0]} channels"
        )
    y = model.v0.T @ window
    rms = np.sqrt(np.mean(y * y, axis=1))
    reject = rms > model.thresholds
    if not reject.any():
        return window.copy()
    y[reject] = 0.0
    return model.v0 @ y


class AsrReconstructor(TransformerMixin, BaseEstimator):
    """Estimator facade: fit on a calibration recording, transform windows.

    Parameters
    ----------
    cutoff : float
        Rejection threshold in calibration standard deviations.
    subwin_seconds, subwin_overlap : float
        Sub-window geometry for the calibration RMS statistics.
    """

    def __init__(
        self,
        cutoff: float = DEFAULT_CUTOFF,
        subwin_seconds: float = DEFAULT_SUBWIN_SECONDS,
        subwin_overlap: float = DEFAULT_SUBWIN_OVERLAP,
    ):
        self.cutoff = cutoff
        self.subwin_seconds = subwin_seconds
        self.subwin_overlap = subwin_overlap

    def fit(self, X: EegRecording, y=None) -> "AsrReconstructor":
        self.model_ = asr_calibrate(
            X, cutoff=self.cutoff, subwin_seconds=self.subwin_seconds,
            subwin_overlap=self.subwin_overlap,
        )
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise CalibrationError("AsrReconstructor is not fitted")
        windows = as_window_array(X)
        return np.stack([asr_transform(self.model_, w) for w in windows])

    def transform_window(self, window: np.ndarray) -> np.ndarray:
        """Single-window fast path used by the latency benchmark."""
        return asr_transform(self.model_, window)
