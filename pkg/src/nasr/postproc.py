"""Post-reconstruction layers: mask-gated channel scaling and average
re-referencing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import ParameterError

__all__ = [
    "weighted_reconstruction",
    "weighted_reconstruction_backward",
    "average_rereference",
    "average_rereference_backward",
]


def weighted_reconstruction(
    xhat: np.ndarray, mask: np.ndarray, w: np.ndarray
) -> np.ndarray:
    """Scale masked (reconstructed) channels by per-channel weights.

    ``out = xhat * (1 - mask) + xhat * (mask * w)``: channels with a zero
    mask pass through untouched, masked channels are scaled by ``w``.
    Accepts a single ``(C, W)`` window or a ``(B, C, W)`` batch; ``mask``
    may be binary or a smooth score in [0, 1].
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == xhat.ndim:  # (…, C, 1) column form
        mask = mask[..., 0]
    # gate is exactly 1.0 for unmasked channels, so they pass through bitwise
    gate = (1.0 - mask + mask * w)[..., None]
    return xhat * gate


@dataclass
class WeightedCache:
    xhat: np.ndarray
    mask: np.ndarray
    w: np.ndarray


def weighted_reconstruction_backward(
    upstream: np.ndarray, cache: WeightedCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the scaling layer.

    Returns ``(d_xhat, d_w, d_mask)`` where
    ``d_w[c] = sum_t upstream[c, t] * xhat[c, t] * mask[c]`` (summed over
    the batch when batched); unmasked channels receive zero weight
    gradient.
    """
    if cache is None:
        raise ParameterError("backward requires the forward cache")
    g = np.asarray(upstream, dtype=np.float64)
    xhat, mask, w = cache.xhat, cache.mask, cache.w
    if mask.ndim == xhat.ndim:
        mask = mask[..., 0]
    d_xhat = g * (1.0 - mask + mask * w)[..., None]
    d_w = (g * xhat).sum(axis=-1) * mask
    if d_w.ndim == 2:
        d_w = d_w.sum(axis=0)
    d_mask = (g * xhat).sum(axis=-1) * (w - 1.0)
    return d_xhat, d_w, d_mask


def average_rereference(
    x: np.ndarray, denominator: str = "c_plus_one"
) -> np.ndarray:
    """Subtract a common average reference from every channel.

    The reference at each time point is ``sum_c x[c, t] / (C + 1)``
    (``denominator="c_plus_one"``) or the strict mean over C channels
    (``denominator="c"``).
    """
    x = np.asarray(x, dtype=np.float64)
    c = x.shape[-2]
    if c < 1:
        raise ParameterError("need at least one channel")
    div = _denominator(denominator, c)
    r = x.sum(axis=-2, keepdims=True) / div
    return x - r


def average_rereference_backward(
    upstream: np.ndarray, denominator: str = "c_plus_one"
) -> np.ndarray:
    """Backward of the (symmetric) re-referencing map."""
    g = np.asarray(upstream, dtype=np.float64)
    div = _denominator(denominator, g.shape[-2])
    return g - g.sum(axis=-2, keepdims=True) / div


def _denominator(denominator: str, c: int) -> float:
    if denominator == "c_plus_one":
        return float(c + 1)
    if denominator == "c":
        return float(c)
    raise ParameterError(
        f"denominator must be 'c_plus_one' or 'c', got {denominator!r}"
    )
