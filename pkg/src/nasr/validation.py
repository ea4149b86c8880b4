"""Input validation helpers and the package's exception taxonomy.

All user-facing entry points funnel their argument checking through these
helpers so that error behaviour is uniform across the library and the CLI.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ParameterError",
    "DataError",
    "EmptyBatchError",
    "CalibrationError",
    "ConvergenceError",
    "check_finite",
    "as_window_array",
    "check_labels",
    "check_adjacency",
]


class ParameterError(ValueError):
    """An argument is out of its documented range or inconsistent."""


class DataError(ValueError):
    """Input data violates a structural invariant (shape, finiteness)."""


class EmptyBatchError(DataError):
    """A windowing request cannot produce a single window."""


class CalibrationError(RuntimeError):
    """Calibration data is unusable (too short, or no clean windows)."""


class ConvergenceError(RuntimeError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message: str, sweeps: int | None = None):
        super().__init__(message)
        self.sweeps = sweeps


def check_finite(arr: np.ndarray, name: str = "data") -> None:
    """Raise :class:`DataError` if ``arr`` contains NaN or Inf."""
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values (NaN or Inf)")


def as_window_array(x, *, name: str = "windows") -> np.ndarray:
    """Coerce ``x`` to a float64 ``(B, C, W)`` array of sliding windows.

    Accepts a raw ndarray or anything exposing a ``.windows`` attribute
    (e.g. :class:`nasr.preprocess.WindowBatch`).
    """
    if hasattr(x, "windows"):
        x = x.windows
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise DataError(f"{name} must have shape (B, C, W), got {arr.shape}")
    check_finite(arr, name)
    return arr


def check_labels(y, n_windows: int) -> np.ndarray:
    """Validate a binary label vector of length ``n_windows``."""
    y = np.asarray(y)
    if y.shape != (n_windows,):
        raise DataError(f"labels must have shape ({n_windows},), got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary (0/1)")
    return y.astype(np.int64)


def check_adjacency(a: np.ndarray, n_channels: int) -> np.ndarray:
    """Validate a binary, symmetric, zero-diagonal adjacency matrix."""
    a = np.asarray(a)
    if a.shape != (n_channels, n_channels):
        raise ParameterError(
            f"adjacency must be ({n_channels}, {n_channels}), got {a.shape}"
        )
    if not np.isin(a, (0, 1)).all():
        raise ParameterError("adjacency entries must be 0/1")
    if (np.diag(a) != 0).any():
        raise ParameterError("adjacency diagonal must be zero")
    if (a != a.T).any():
        raise ParameterError("adjacency must be symmetric")
    return a.astype(np.float64)
