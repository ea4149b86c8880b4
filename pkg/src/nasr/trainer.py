"""Decoder, loss, optimizer and the training loop.

The downstream decoder is intentionally compact: per-channel log-variance
features of each window, inverted dropout during training, then a single
affine layer with a sigmoid output. It is sensitive to exactly the
channel-variance structure that artifact reconstruction modifies, and it
delivers clean gradients into the reconstruction thresholds.

Training follows a fixed protocol: Adam with global-norm gradient
clipping, learning-rate halving after 5 epochs without validation
improvement (floored at 1e-7), early stopping after 50 such epochs, and
restoration of the best-validation weights.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .validation import DataError, ParameterError

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
DICE_EPS = 1e-7
FEATURE_VAR_EPS = 1e-6

__all__ = [
    "TrainConfig",
    "DecoderParams",
    "decoder_init",
    "logvar_features",
    "decoder_forward",
    "decoder_forward_feats",
    "decoder_backward",
    "decoder_backward_feats",
    "combined_loss",
    "combined_loss_grad",
    "AdamState",
    "adam_step",
    "clip_global_norm",
    "PlateauSchedule",
    "split_sequential",
    "fit",
    "FitResult",
    "evaluate_metrics",
    "write_history_csv",
]


@dataclass
class TrainConfig:
    """Optimizer schedule and data-split settings."""

    lr: float = 1e-3
    clipnorm: float = 1.0
    epochs_max: int = 250
    batch: int = 64
    plateau_patience: int = 5
    lr_floor: float = 1e-7
    early_stop_patience: int = 50
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    dropout: float = 0.2

    def __post_init__(self):
        for name in ("lr", "clipnorm", "epochs_max", "batch",
                     "plateau_patience", "lr_floor", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ParameterError(f"split fractions must sum to 1, got {self.split}")
        if not (0.0 <= self.dropout < 1.0):
            raise ParameterError("dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        if "split" in kwargs:
            kwargs["split"] = tuple(kwargs["split"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Decoder: log-variance features -> dropout -> affine -> sigmoid
# ---------------------------------------------------------------------------

@dataclass
class DecoderParams:
    w: np.ndarray  # (C,)
    b: float = 0.0


def decoder_init(n_channels: int) -> DecoderParams:
    return DecoderParams(w=np.zeros(n_channels), b=0.0)


@dataclass
class _DecoderCache:
    feats_dropped: np.ndarray
    keep_scale: np.ndarray
    p: np.ndarray
    w: np.ndarray
    x: np.ndarray | None = None
    mean: np.ndarray | None = None
    var: np.ndarray | None = None


def logvar_features(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel log-variance features; returns (feats, mean, var)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1)
    return np.log(var + FEATURE_VAR_EPS), mean, var


def decoder_forward_feats(
    feats: np.ndarray,
    params: DecoderParams,
    dropout_mask: np.ndarray | None = None,
    keep_prob: float = 1.0,
) -> tuple[np.ndarray, _DecoderCache]:
    """Probabilities from precomputed ``(B, C)`` feature vectors.

    ``dropout_mask`` is a binary ``(B, C)`` mask applied with inverted
    scaling ``1 / keep_prob``; pass ``None`` in eval mode.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if dropout_mask is not None:
        keep_scale = dropout_mask / keep_prob
    else:
        keep_scale = np.ones_like(feats)
    dropped = feats * keep_scale
    z = dropped @ params.w + params.b
    p = 1.0 / (1.0 + np.exp(-z))
    return p, _DecoderCache(
        feats_dropped=dropped, keep_scale=keep_scale, p=p, w=params.w
    )


def decoder_forward(
    x: np.ndarray,
    params: DecoderParams,
    dropout_mask: np.ndarray | None = None,
    keep_prob: float = 1.0,
) -> tuple[np.ndarray, _DecoderCache]:
    """Window probabilities from per-channel log-variance of ``(B, C, W)``."""
    feats, mean, var = logvar_features(x)
    p, cache = decoder_forward_feats(feats, params, dropout_mask, keep_prob)
    cache.x = np.asarray(x, dtype=np.float64)
    cache.mean = mean
    cache.var = var
    return p, cache


def decoder_backward_feats(
    cache: _DecoderCache, d_p: np.ndarray
) -> tuple[np.ndarray, float, np.ndarray]:
    """Gradients (d_w, d_b, d_feats) given the loss gradient w.r.t. p."""
    dz = np.asarray(d_p) * cache.p * (1.0 - cache.p)
    d_w = dz @ cache.feats_dropped
    d_b = float(dz.sum())
    d_feats = dz[:, None] * cache.w[None, :] * cache.keep_scale
    return d_w, d_b, d_feats


def decoder_backward(
    cache: _DecoderCache, d_p: np.ndarray
) -> tuple[np.ndarray, float, np.ndarray]:
    """Gradients (d_w, d_b, d_x) given the loss gradient w.r.t. p."""
    d_w, d_b, d_feats = decoder_backward_feats(cache, d_p)
    d_var = d_feats / (cache.var + FEATURE_VAR_EPS)
    w_len = cache.x.shape[-1]
    d_x = d_var[:, :, None] * 2.0 * (cache.x - cache.mean) / w_len
    return d_w, d_b, d_x


# ---------------------------------------------------------------------------
# Combined BCE + Dice loss
# ---------------------------------------------------------------------------

def _clamp_probs(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return pc, (p == pc)


def combined_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Equal-weighted sum of binary cross-entropy and soft Dice loss."""
    return combined_loss_grad(p, y)[0]


def combined_loss_grad(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss value plus its gradient w.r.t. the probabilities.

    ``BCE = -mean(y log p + (1-y) log(1-p))`` and
    ``Dice = 1 - (2 sum(p y) + eps) / (sum p + sum y + eps)``; the
    returned loss is ``0.5 * BCE + 0.5 * Dice``. Probabilities are
    clamped to ``[1e-7, 1 - 1e-7]`` (clamped entries get zero gradient).
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DataError(f"p {p.shape} and y {y.shape} must match")
    n = p.size
    pc, free = _clamp_probs(p)
    bce = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    d_bce = -(y / pc - (1.0 - y) / (1.0 - pc)) / n

    inter = (pc * y).sum()
    total = pc.sum() + y.sum()
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (total + DICE_EPS)
    d_dice = -(2.0 * y * (total + DICE_EPS) - (2.0 * inter + DICE_EPS)) \
        / (total + DICE_EPS) ** 2

    loss = 0.5 * bce + 0.5 * dice
    grad = (0.5 * d_bce + 0.5 * d_dice) * free
    return float(loss), grad


# ---------------------------------------------------------------------------
# Adam with global-norm clipping and feasible-set projections
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_global_norm(
    grads: dict[str, np.ndarray], clipnorm: float
) -> dict[str, np.ndarray]:
    """Scale all gradients jointly so their global L2 norm is <= clipnorm."""
    total = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if total <= clipnorm or total == 0.0:
        return grads
    scale = clipnorm / total
    return {k: g * scale for k, g in grads.items()}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    clipnorm: float,
    projections: dict[str, Callable[[np.ndarray], np.ndarray]] | None = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with clipping and post-step projections.

    Non-finite gradients skip the step entirely (with a logged warning)
    so a bad batch cannot poison the optimizer state.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            logger.warning("non-finite gradient encountered; skipping step")
            return
    grads = clip_global_norm(grads, clipnorm)
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        if projections and name in projections:
            params[name] = projections[name](params[name])


# ---------------------------------------------------------------------------
# Plateau schedule and sequential splitting
# ---------------------------------------------------------------------------

class PlateauSchedule:
    """Tracks validation loss; halves the LR on plateaus, stops when stuck.

    The LR halves whenever the loss fails to improve for
    ``plateau_patience`` consecutive epochs (never below ``lr_floor``),
    and ``should_stop`` turns true after ``early_stop_patience``
    consecutive epochs without improvement.
    """

    def __init__(self, lr: float, plateau_patience: int = 5,
                 lr_floor: float = 1e-7, early_stop_patience: int = 50):
        self.lr = lr
        self.plateau_patience = plateau_patience
        self.lr_floor = lr_floor
        self.early_stop_patience = early_stop_patience
        self.best = np.inf
        self.plateau_count = 0
        self.stall_count = 0

    def observe(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns True on improvement."""
        if val_loss < self.best:
            self.best = val_loss
            self.plateau_count = 0
            self.stall_count = 0
            return True
        self.plateau_count += 1
        self.stall_count += 1
        if self.plateau_count >= self.plateau_patience:
            self.lr = max(self.lr / 2.0, self.lr_floor)
            self.plateau_count = 0
        return False

    @property
    def should_stop(self) -> bool:
        return self.stall_count >= self.early_stop_patience


def split_sequential(
    n: int, fractions: tuple[float, float, float]
) -> dict[str, np.ndarray]:
    """Temporal-order train/val/test index split (no shuffling)."""
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise ParameterError(
            f"split {fractions} leaves an empty subset for n={n}"
        )
    idx = np.arange(n)
    return {
        "train": idx[:n_train],
        "val": idx[n_train:n_train + n_val],
        "test": idx[n_train + n_val:],
    }


# ---------------------------------------------------------------------------
# Fit loop over an abstract trainable model
# ---------------------------------------------------------------------------

class TrainableModel(Protocol):
    """What the fit loop needs from a model.

    ``loss_and_grads`` runs one training minibatch (dropout on, hard
    masks) and returns the loss plus gradients keyed like the parameter
    dict; ``eval_loss`` must be deterministic (dropout off).
    """

    def loss_and_grads(
        self, idx: np.ndarray, rng: np.random.Generator
    ) -> tuple[float, dict[str, np.ndarray]]: ...

    def eval_loss(self, idx: np.ndarray) -> float: ...

    def apply_step(
        self, grads: dict[str, np.ndarray], state: AdamState, lr: float,
        clipnorm: float,
    ) -> None: ...

    def snapshot(self) -> dict: ...

    def restore(self, snap: dict) -> None: ...

    def history_extras(self) -> dict: ...


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    k: float
    l: float


@dataclass
class FitResult:
    history: list[HistoryRow]
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def fit(
    model: TrainableModel,
    n_windows: int,
    cfg: TrainConfig,
    split: dict[str, np.ndarray] | None = None,
) -> FitResult:
    """Train ``model`` under the plateau/early-stop protocol.

    The window index range is split sequentially before any shuffling;
    only the train portion is reshuffled each epoch. The weights with
    the minimum validation loss are restored before returning.
    """
    if split is None:
        split = split_sequential(n_windows, cfg.split)
    train_idx, val_idx = split["train"], split["val"]
    rng = np.random.default_rng(cfg.seed)
    schedule = PlateauSchedule(
        cfg.lr, cfg.plateau_patience, cfg.lr_floor, cfg.early_stop_patience
    )
    state = AdamState()
    history: list[HistoryRow] = []
    best_snap = model.snapshot()
    best_epoch = 0
    stopped_early = False

    for epoch in range(1, cfg.epochs_max + 1):
        order = rng.permutation(train_idx)
        lr = schedule.lr
        batch_losses = []
        for start in range(0, order.size, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, grads = model.loss_and_grads(idx, rng)
            model.apply_step(grads, state, lr, cfg.clipnorm)
            batch_losses.append(loss)
        val_loss = model.eval_loss(val_idx)
        improved = schedule.observe(val_loss)
        if improved:
            best_snap = model.snapshot()
            best_epoch = epoch
        extras = model.history_extras()
        history.append(HistoryRow(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            val_loss=float(val_loss),
            lr=lr,
            k=extras.get("k", float("nan")),
            l=extras.get("l", float("nan")),
        ))
        if schedule.should_stop:
            stopped_early = True
            break

    model.restore(best_snap)
    return FitResult(
        history=history,
        best_epoch=best_epoch,
        best_val_loss=float(schedule.best),
        stopped_early=stopped_early,
    )


def write_history_csv(history: list[HistoryRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "k", "l"])
        for row in history:
            writer.writerow(
                [row.epoch, row.train_loss, row.val_loss, row.lr, row.k, row.l]
            )


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------

def evaluate_metrics(
    y_true: np.ndarray, p: np.ndarray, threshold: float = 0.5
) -> dict[str, float]:
    """Accuracy, balanced accuracy (mean per-class recall) and F1 at 0.5.

    If only one class is present, balanced accuracy averages over the
    present classes and a warning is emitted.
    """
    y_true = np.asarray(y_true).astype(int)
    pred = (np.asarray(p) >= threshold).astype(int)
    accuracy = float((pred == y_true).mean())

    recalls = []
    for cls in (0, 1):
        mask = y_true == cls
        if mask.any():
            recalls.append(float((pred[mask] == cls).mean()))
    if len(recalls) < 2:
        warnings.warn(
            "only one class present; balanced accuracy covers present "
            "classes only",
            stacklevel=2,
        )
    balanced = float(np.mean(recalls))

    tp = int(((pred == 1) & (y_true == 1)).sum())
    fp = int(((pred == 1) & (y_true == 0)).sum())
    fn = int(((pred == 0) & (y_true == 1)).sum())
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) \
        if (precision + recall) else 0.0
    return {"accuracy": accuracy, "balanced_accuracy": balanced, "f1": float(f1)}
