"""Trainable channel-level artifact reconstruction layer.

Per window the layer estimates the spatial covariance of the trailing
non-overlapping segment, eigendecomposes it, thresholds the eigenvalues
against a learnable scalar ``k`` to discard artifact components, measures
each channel's squared projection onto the discarded subspace
("eigen-spread"), thresholds that against a second learnable scalar ``l``
to flag noisy channels, and finally replaces flagged channels with the
mean of the clean ones (optionally restricted to spatial neighbors).

Both thresholding steps use straight-through estimators: the forward pass
rounds the sigmoid scores to hard 0/1 masks while gradients flow through
the smooth scores. ``forward(..., hard=False)`` runs the fully smooth
variant used by the finite-difference gradient checks. Gradients are
computed analytically w.r.t. ``k`` and ``l`` only; eigenvalues and
eigenvectors depend on the input data alone and are treated as constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import sym_eig, window_covariance
from .validation import (
    ConvergenceError,
    ParameterError,
    as_window_array,
    check_adjacency,
)

K_OFFSET_MIN = 0.1
DEFAULT_K_INIT = 0.9 ** 2 - K_OFFSET_MIN  # 0.71
DEFAULT_L_INIT = 0.5

__all__ = [
    "NasrParams",
    "NasrConfig",
    "NasrOutput",
    "EigenCache",
    "threshold",
    "check_vector",
    "discard_mask",
    "channel_spread",
    "noise_mask",
    "reconstruct",
    "forward",
    "backward",
    "batch_eigen",
    "save_checkpoint",
    "load_checkpoint",
]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def round_half_up(x: np.ndarray) -> np.ndarray:
    """Round with the 0.5 -> 1 tie rule (numpy rounds ties to even)."""
    return np.floor(np.asarray(x) + 0.5)


@dataclass
class NasrParams:
    """Learnable thresholds plus the fixed sharpness/offset constants."""

    k: float = DEFAULT_K_INIT
    l: float = DEFAULT_L_INIT
    k_offset: float = K_OFFSET_MIN
    tau_d: float = 20.0
    tau_l: float = 20.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.k < 0:
            raise ParameterError(f"k must be >= 0, got {self.k}")
        if not (0.0 <= self.l <= 1.0):
            raise ParameterError(f"l must be in [0, 1], got {self.l}")
        if self.k_offset < K_OFFSET_MIN:
            raise ParameterError(
                f"k_offset must be >= {K_OFFSET_MIN}, got {self.k_offset}"
            )


@dataclass
class NasrConfig:
    """Structural switches of the layer (the ablation surface)."""

    reconstruct_neighbors: bool = False
    covariance_full_window: bool = False
    adjacency: np.ndarray | None = None
    s_nonoverlap: int = 20

    def __post_init__(self):
        if self.s_nonoverlap < 2:
            raise ParameterError("s_nonoverlap must be >= 2")

    def validated_adjacency(self, n_channels: int) -> np.ndarray:
        if self.adjacency is None:
            raise ParameterError(
                "reconstruct_neighbors=True requires an adjacency matrix"
            )
        return check_adjacency(self.adjacency, n_channels)


@dataclass
class NasrOutput:
    """Forward results: reconstruction plus the masks used to produce it."""

    recon: np.ndarray           # (B, C, W)
    noise_mask: np.ndarray      # (B, C, 1) bool
    discard_soft: np.ndarray    # (B, C)
    noise_soft: np.ndarray      # (B, C)


@dataclass
class EigenCache:
    """Precomputed per-window eigendecompositions (data-dependent only)."""

    d: np.ndarray   # (B, C)
    v: np.ndarray   # (B, C, C)


@dataclass
class _ForwardCache:
    x: np.ndarray
    v: np.ndarray
    v2: np.ndarray
    rowabs: np.ndarray
    diff: np.ndarray
    denom: np.ndarray
    denom_active: np.ndarray
    discard_soft: np.ndarray
    discard_fwd: np.ndarray
    noise_soft: np.ndarray
    noise_fwd: np.ndarray
    good: np.ndarray
    ngood: np.ndarray
    ngood_safe: np.ndarray
    cleanav: np.ndarray
    xt: np.ndarray
    neighbor_av: np.ndarray | None
    adjacency_norm: np.ndarray | None
    params: NasrParams
    hard: bool


def threshold(params: NasrParams) -> float:
    """Component-rejection threshold in normalized variance units."""
    return params.k + params.k_offset


def check_vector(th: float, v: np.ndarray) -> np.ndarray:
    """Row-wise absolute eigenvector sums scaled by the threshold.

    ``check[c] = th * sum_j |v[c, j]|`` (batch dims broadcast).
    """
    if th <= 0:
        raise ParameterError(f"threshold must be positive, got {th}")
    return th * np.abs(v).sum(axis=-1)


def discard_mask(
    d: np.ndarray, check: np.ndarray, params: NasrParams
) -> tuple[np.ndarray, np.ndarray]:
    """Component discard scores from normalized eigenvalue excess.

    The eigenvalue/check difference is normalized by the mean absolute
    difference of the window (floored at ``params.eps``) and squashed by
    a sharp sigmoid. Returns ``(soft, hard)`` where ``hard`` is the
    rounded score used in the forward pass.
    """
    diff = np.asarray(d, dtype=np.float64) - np.asarray(check, dtype=np.float64)
    denom = np.maximum(np.abs(diff).mean(axis=-1, keepdims=True), params.eps)
    soft = _sigmoid(params.tau_d * diff / denom)
    return soft, round_half_up(soft)


def channel_spread(discard: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-channel energy on the discarded eigenvectors.

    ``spread[c] = sum_j (discard[j] * v[c, j])**2``; lies in [0, 1] for
    orthonormal ``v`` and discard scores in [0, 1].
    """
    d2 = np.asarray(discard, dtype=np.float64) ** 2
    return np.einsum("...cj,...j->...c", np.asarray(v) ** 2, d2)


def noise_mask(
    spread: np.ndarray, params: NasrParams
) -> tuple[np.ndarray, np.ndarray]:
    """Channel-level noise scores: sigmoid of spread above threshold ``l``."""
    soft = _sigmoid(params.tau_l * (np.asarray(spread, dtype=np.float64) - params.l))
    return soft, round_half_up(soft)


def reconstruct(
    x: np.ndarray, noise_hard: np.ndarray, config: NasrConfig
) -> np.ndarray:
    """Replace noisy channels with the clean-channel average.

    With ``reconstruct_neighbors`` the replacement is refined to the mean
    over each channel's adjacency neighborhood of the already-filled
    signal. Channels with a zero noise flag pass through bitwise.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    noise = np.asarray(noise_hard, dtype=np.float64)
    nb = noise[None] if single else noise
    out = _reconstruct_batch(xb, nb, config, hard=True)[0]
    return out[0] if single else out


def _reconstruct_batch(x, noise, config: NasrConfig, hard: bool):
    good = 1.0 - noise
    ngood = good.sum(axis=-1)
    ngood_safe = np.maximum(ngood, 1.0)
    cleanav = np.einsum("bcw,bc->bw", x, good) / ngood_safe[:, None]
    xt = x * good[:, :, None] + cleanav[:, None, :] * noise[:, :, None]
    neighbor_av = None
    adjacency_norm = None
    if config.reconstruct_neighbors:
        a = config.validated_adjacency(x.shape[1])
        adjacency_norm = a / np.maximum(a.sum(axis=1), 1.0)[:, None]
        neighbor_av = np.einsum("ck,bkw->bcw", adjacency_norm, xt)
        recon = good[:, :, None] * xt + noise[:, :, None] * neighbor_av
    else:
        recon = xt
    if hard:
        # exact bitwise passthrough for clean channels
        recon = np.where(noise[:, :, None] > 0.5, recon, x)
    return recon, (good, ngood, ngood_safe, cleanav, xt, neighbor_av,
                   adjacency_norm)


def batch_eigen(
    x: np.ndarray, config: NasrConfig
) -> EigenCache:
    """Covariance + eigendecomposition for every window of a batch.

    These depend only on the input signal, so training loops compute them
    once and reuse them across epochs.
    """
    x = as_window_array(x)
    b, c, w = x.shape
    s = w if config.covariance_full_window else min(config.s_nonoverlap, w)
    seg = x[:, :, w - s:]
    centered = seg - seg.mean(axis=-1, keepdims=True)
    covs = np.einsum("bcw,bdw->bcd", centered, centered) / (s - 1)
    d = np.empty((b, c))
    v = np.empty((b, c, c))
    for i in range(b):
        try:
            d[i], v[i] = sym_eig(covs[i])
        except ConvergenceError as exc:
            raise ConvergenceError(
                f"window {i}: {exc}", sweeps=exc.sweeps
            ) from exc
    return EigenCache(d=d, v=v)


def forward(
    x: np.ndarray,
    params: NasrParams,
    config: NasrConfig,
    eigen: EigenCache | None = None,
    hard: bool = True,
    want_cache: bool = False,
):
    """Run the layer over a normalized ``(B, C, W)`` batch.

    Parameters
    ----------
    x : ndarray
        Z-score-normalized windows.
    eigen : EigenCache, optional
        Precomputed eigendecompositions; computed here when omitted.
    hard : bool
        Use rounded masks in the forward pass (training/inference). With
        ``False`` the smooth sigmoid scores are used throughout, which is
        the surrogate the gradients are defined against.
    want_cache : bool
        Additionally return the intermediate state needed by
        :func:`backward`.

    Returns
    -------
    NasrOutput or (NasrOutput, cache)
    """
    x = as_window_array(x)
    if eigen is None:
        eigen = batch_eigen(x, config)
    d, v = eigen.d, eigen.v
    if d.shape[0] != x.shape[0]:
        raise ParameterError("eigen cache does not match batch size")

    th = threshold(params)
    rowabs = np.abs(v).sum(axis=-1)
    check = th * rowabs
    diff = d - check
    absmean = np.abs(diff).mean(axis=-1, keepdims=True)
    denom = np.maximum(absmean, params.eps)
    discard_soft = _sigmoid(params.tau_d * diff / denom)
    discard_fwd = round_half_up(discard_soft) if hard else discard_soft

    v2 = v * v
    spread = np.einsum("bcj,bj->bc", v2, discard_fwd ** 2)
    noise_soft = _sigmoid(params.tau_l * (spread - params.l))
    noise_fwd = round_half_up(noise_soft) if hard else noise_soft

    recon, (good, ngood, ngood_safe, cleanav, xt, neighbor_av,
            adjacency_norm) = _reconstruct_batch(x, noise_fwd, config, hard)

    out = NasrOutput(
        recon=recon,
        noise_mask=(round_half_up(noise_soft) > 0.5)[:, :, None],
        discard_soft=discard_soft,
        noise_soft=noise_soft,
    )
    if not want_cache:
        return out
    cache = _ForwardCache(
        x=x, v=v, v2=v2, rowabs=rowabs, diff=diff, denom=denom,
        denom_active=(absmean > params.eps), discard_soft=discard_soft,
        discard_fwd=discard_fwd, noise_soft=noise_soft, noise_fwd=noise_fwd,
        good=good, ngood=ngood, ngood_safe=ngood_safe, cleanav=cleanav,
        xt=xt, neighbor_av=neighbor_av, adjacency_norm=adjacency_norm,
        params=params, hard=hard,
    )
    return out, cache


@dataclass
class LayerGrads:
    dk: float
    dl: float


def backward(
    g_recon: np.ndarray,
    cache: _ForwardCache,
    g_noise: np.ndarray | None = None,
) -> LayerGrads:
    """Analytic gradients of a scalar loss w.r.t. ``k`` and ``l``.

    ``g_recon`` is the upstream gradient w.r.t. the reconstruction,
    ``g_noise`` an optional extra gradient w.r.t. the noise mask (the
    weighted-reconstruction layer consumes the mask). Hard rounding steps
    backpropagate as identity (straight-through), eigendecompositions are
    constants, and the dependence of the normalization denominator on
    ``k`` is included. Gradients are summed over the batch.
    """
    if cache is None:
        raise ParameterError("backward requires the forward cache")
    p = cache.params
    g = np.asarray(g_recon, dtype=np.float64)
    if g.shape != cache.x.shape:
        raise ParameterError(
            f"upstream gradient shape {g.shape} != forward shape {cache.x.shape}"
        )

    noise = cache.noise_fwd
    good = cache.good

    if cache.neighbor_av is not None:
        g_xt = good[:, :, None] * g + np.einsum(
            "bcw,ck->bkw", g * noise[:, :, None], cache.adjacency_norm
        )
        g_good = (g * cache.xt).sum(axis=-1)
        g_noise_total = (g * cache.neighbor_av).sum(axis=-1)
    else:
        g_xt = g
        g_good = np.zeros(noise.shape)
        g_noise_total = np.zeros(noise.shape)
    if g_noise is not None:
        g_noise_total = g_noise_total + np.asarray(g_noise, dtype=np.float64)

    # xt = x * good + cleanav * noise
    g_good = g_good + (g_xt * cache.x).sum(axis=-1)
    g_noise_total = g_noise_total + (g_xt * cache.cleanav[:, None, :]).sum(axis=-1)
    g_cleanav = np.einsum("bcw,bc->bw", g_xt, noise)

    # cleanav = (sum_c x * good) / ngood_safe
    g_sum = g_cleanav / cache.ngood_safe[:, None]
    g_good = g_good + np.einsum("bw,bcw->bc", g_sum, cache.x)
    g_ngood_safe = -(g_cleanav * cache.cleanav).sum(axis=-1) / cache.ngood_safe
    g_ngood = g_ngood_safe * (cache.ngood > 1.0)
    g_good = g_good + g_ngood[:, None]

    # good = 1 - noise
    g_noise_total = g_noise_total - g_good

    # noise_soft = sigmoid(tau_l * (spread - l)); STE through rounding
    sig_n = cache.noise_soft * (1.0 - cache.noise_soft)
    dl = float((g_noise_total * (-p.tau_l) * sig_n).sum())
    g_spread = g_noise_total * p.tau_l * sig_n

    # spread = sum_j v2[:, :, j] * discard**2
    g_discard = 2.0 * cache.discard_fwd * np.einsum(
        "bc,bcj->bj", g_spread, cache.v2
    )

    # discard_soft = sigmoid(tau_d * diff / denom), diff = d - th * rowabs,
    # denom = max(mean|diff|, eps); d(denom)/dk active only above the floor
    sig_d = cache.discard_soft * (1.0 - cache.discard_soft)
    ddenom_dk = np.where(
        cache.denom_active,
        -(np.sign(cache.diff) * cache.rowabs).mean(axis=-1, keepdims=True),
        0.0,
    )
    dnormdiff_dk = (
        -cache.rowabs - (cache.diff / cache.denom) * ddenom_dk
    ) / cache.denom
    ddiscard_dk = p.tau_d * sig_d * dnormdiff_dk
    dk = float((g_discard * ddiscard_dk).sum())
    return LayerGrads(dk=dk, dl=dl)


# ---------------------------------------------------------------------------
# Parameter checkpoint format (JSON), shared with the trainer.
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    params: NasrParams,
    scaling_w: np.ndarray,
    extra: dict | None = None,
) -> None:
    """Write the learnable state as JSON: k, l, scaling_w, k_offset."""
    payload = {
        "k": float(params.k),
        "l": float(params.l),
        "scaling_w": np.asarray(scaling_w, dtype=float).tolist(),
        "k_offset": float(params.k_offset),
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2))


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    payload = json.loads(Path(path).read_text())
    for key in ("k", "l", "scaling_w", "k_offset"):
        if key not in payload:
            raise ParameterError(f"checkpoint {path} missing field '{key}'")
    payload["scaling_w"] = np.asarray(payload["scaling_w"], dtype=np.float64)
    return payload
