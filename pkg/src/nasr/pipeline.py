"""End-to-end estimator: cleaning stage + re-referencing + decoder.

``ArtifactPipeline`` is the sklearn-style facade over the whole stack.
``fit`` splits the windows sequentially, computes clean-reference
statistics, normalizes, and jointly trains the decoder with the
reconstruction thresholds (method ``"nasr"``) or trains the decoder on a
frozen cleaning stage (method ``"asr"`` for the traditional baseline,
``"none"`` for an uncleaned control).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import layer as nasr_layer
from . import postproc, trainer
from .asr import AsrModel, asr_calibrate, asr_transform
from .layer import (
    DEFAULT_K_INIT,
    DEFAULT_L_INIT,
    EigenCache,
    NasrConfig,
    NasrParams,
)
from .montage import build_adjacency, default_montage
from .preprocess import (
    ChannelStats,
    EegRecording,
    WindowBatch,
    compute_reference_stats,
    detect_clean_windows,
)
from .trainer import (
    AdamState,
    DecoderParams,
    TrainConfig,
    adam_step,
    combined_loss_grad,
    decoder_backward,
    decoder_backward_feats,
    decoder_forward,
    decoder_forward_feats,
    evaluate_metrics,
    logvar_features,
)
from .validation import CalibrationError, ParameterError, as_window_array, check_labels

ASR_FLAG_ATOL = 1e-5

__all__ = ["ArtifactPipeline", "ASR_FLAG_ATOL"]


def _project_nonneg(x):
    return np.maximum(x, 0.0)


def _project_unit(x):
    return np.clip(x, 0.0, 1.0)


class _NasrCore:
    """Trainable nASR + post-layers + decoder over a fixed window corpus."""

    def __init__(self, x_norm, labels, eigen, config, *, k_init, l_init,
                 k_offset, tau_d, tau_l, eps, weighted, reference_denominator,
                 dropout):
        self.x = x_norm
        self.y = labels
        self.eigen = eigen
        self.config = config
        self.fixed = dict(k_offset=k_offset, tau_d=tau_d, tau_l=tau_l, eps=eps)
        self.weighted = weighted
        self.denominator = reference_denominator
        self.dropout = dropout
        c = x_norm.shape[1]
        self.params = {
            "k": np.float64(k_init),
            "l": np.float64(l_init),
            "dec_w": np.zeros(c),
            "dec_b": np.float64(0.0),
        }
        self.scaling_w = np.ones(c)
        if weighted:
            self.params["scaling_w"] = self.scaling_w
        self.projections = {
            "k": _project_nonneg,
            "l": _project_unit,
            "scaling_w": _project_nonneg,
        }

    def _nasr_params(self) -> NasrParams:
        return NasrParams(
            k=float(self.params["k"]), l=float(self.params["l"]), **self.fixed
        )

    def _scaling(self) -> np.ndarray:
        return self.params["scaling_w"] if self.weighted else self.scaling_w

    def _forward(self, idx, dropout_mask=None, want_caches=False):
        xb = self.x[idx]
        eig = EigenCache(d=self.eigen.d[idx], v=self.eigen.v[idx])
        out, cache = nasr_layer.forward(
            xb, self._nasr_params(), self.config, eigen=eig, hard=True,
            want_cache=True,
        )
        if self.weighted:
            wcache = postproc.WeightedCache(
                xhat=out.recon, mask=cache.noise_fwd, w=self._scaling()
            )
            xw = postproc.weighted_reconstruction(
                out.recon, cache.noise_fwd, self._scaling()
            )
        else:
            wcache = None
            xw = out.recon
        xr = postproc.average_rereference(xw, self.denominator)
        dec = DecoderParams(w=self.params["dec_w"], b=float(self.params["dec_b"]))
        p, dcache = decoder_forward(
            xr, dec, dropout_mask, keep_prob=1.0 - self.dropout
        )
        if want_caches:
            return p, (cache, wcache, dcache)
        return p

    def loss_and_grads(self, idx, rng):
        mask = None
        if self.dropout > 0.0:
            mask = (
                rng.random((idx.size, self.x.shape[1])) >= self.dropout
            ).astype(np.float64)
        p, (cache, wcache, dcache) = self._forward(
            idx, dropout_mask=mask, want_caches=True
        )
        loss, d_p = combined_loss_grad(p, self.y[idx])
        d_w, d_b, d_xr = decoder_backward(dcache, d_p)
        d_xw = postproc.average_rereference_backward(d_xr, self.denominator)
        if self.weighted:
            d_recon, d_sw, d_mask = postproc.weighted_reconstruction_backward(
                d_xw, wcache
            )
        else:
            d_recon, d_sw, d_mask = d_xw, None, None
        lg = nasr_layer.backward(d_recon, cache, g_noise=d_mask)
        grads = {
            "k": np.float64(lg.dk),
            "l": np.float64(lg.dl),
            "dec_w": d_w,
            "dec_b": np.float64(d_b),
        }
        if self.weighted:
            grads["scaling_w"] = d_sw
        return loss, grads

    def eval_loss(self, idx):
        p = self._forward(idx)
        loss, _ = combined_loss_grad(p, self.y[idx])
        return loss

    def predict_proba_idx(self, idx):
        return self._forward(idx)

    def apply_step(self, grads, state: AdamState, lr, clipnorm):
        adam_step(self.params, grads, state, lr, clipnorm, self.projections)

    def snapshot(self):
        return {k: np.copy(v) for k, v in self.params.items()}

    def restore(self, snap):
        self.params = {k: np.copy(v) for k, v in snap.items()}

    def history_extras(self):
        return {"k": float(self.params["k"]), "l": float(self.params["l"])}


class _FrozenCleanCore:
    """Decoder-only training on a frozen (precomputed) cleaning stage."""

    def __init__(self, feats, labels, dropout):
        self.feats = feats
        self.y = labels
        self.dropout = dropout
        c = feats.shape[1]
        self.params = {"dec_w": np.zeros(c), "dec_b": np.float64(0.0)}

    def _dec(self):
        return DecoderParams(w=self.params["dec_w"], b=float(self.params["dec_b"]))

    def loss_and_grads(self, idx, rng):
        mask = None
        if self.dropout > 0.0:
            mask = (
                rng.random((idx.size, self.feats.shape[1])) >= self.dropout
            ).astype(np.float64)
        p, cache = decoder_forward_feats(
            self.feats[idx], self._dec(), mask, keep_prob=1.0 - self.dropout
        )
        loss, d_p = combined_loss_grad(p, self.y[idx])
        d_w, d_b, _ = decoder_backward_feats(cache, d_p)
        return loss, {"dec_w": d_w, "dec_b": np.float64(d_b)}

    def eval_loss(self, idx):
        p, _ = decoder_forward_feats(self.feats[idx], self._dec())
        loss, _ = combined_loss_grad(p, self.y[idx])
        return loss

    def predict_proba_idx(self, idx):
        return decoder_forward_feats(self.feats[idx], self._dec())[0]

    def apply_step(self, grads, state: AdamState, lr, clipnorm):
        adam_step(self.params, grads, state, lr, clipnorm)

    def snapshot(self):
        return {k: np.copy(v) for k, v in self.params.items()}

    def restore(self, snap):
        self.params = {k: np.copy(v) for k, v in snap.items()}

    def history_extras(self):
        return {}


@dataclass
class _CleanResult:
    cleaned: np.ndarray       # pre-re-reference cleaning-stage output
    masks: np.ndarray         # (B, C) bool


class ArtifactPipeline(BaseEstimator):
    """Artifact cleaning plus binary decoding over sliding-window batches.

    Parameters
    ----------
    method : {"nasr", "asr", "none"}
        Cleaning stage: the trainable reconstruction layer, the
        traditional-ASR baseline (requires a ``calibration`` recording at
        fit time), or no cleaning (control).
    reconstruct_neighbors : bool
        Fill noisy channels from spatial neighbors instead of the global
        clean-channel mean.
    covariance_full_window : bool
        Estimate the per-window covariance over the whole window instead
        of the trailing non-overlapping segment.
    weighted : bool
        Apply the learnable per-channel scaling to reconstructed channels.
    adjacency : ndarray or None
        Binary neighbor matrix; defaults to the packaged 28-channel
        montage when needed and C == 28.
    s_nonoverlap : int
        Trailing-segment length for covariance estimation (the hop).
    asr_cutoff : float
        Rejection threshold of the ASR baseline.
    reference_denominator : {"c_plus_one", "c"}
        Divisor of the average re-reference.
    train_config : TrainConfig or None
        Optimizer/schedule settings; defaults to ``TrainConfig()``.
    """

    def __init__(
        self,
        method: str = "nasr",
        reconstruct_neighbors: bool = False,
        covariance_full_window: bool = False,
        weighted: bool = True,
        adjacency: np.ndarray | None = None,
        s_nonoverlap: int = 20,
        k_init: float = DEFAULT_K_INIT,
        l_init: float = DEFAULT_L_INIT,
        k_offset: float = 0.1,
        tau_d: float = 20.0,
        tau_l: float = 20.0,
        eps: float = 1e-6,
        asr_cutoff: float = 20.0,
        reference_denominator: str = "c_plus_one",
        train_config: TrainConfig | None = None,
    ):
        self.method = method
        self.reconstruct_neighbors = reconstruct_neighbors
        self.covariance_full_window = covariance_full_window
        self.weighted = weighted
        self.adjacency = adjacency
        self.s_nonoverlap = s_nonoverlap
        self.k_init = k_init
        self.l_init = l_init
        self.k_offset = k_offset
        self.tau_d = tau_d
        self.tau_l = tau_l
        self.eps = eps
        self.asr_cutoff = asr_cutoff
        self.reference_denominator = reference_denominator
        self.train_config = train_config

    # -- configuration ----------------------------------------------------

    def flags(self) -> dict:
        """The ablation-relevant switches as a flat dict."""
        return {
            "method": self.method,
            "reconstruct_neighbors": bool(self.reconstruct_neighbors),
            "covariance_full_window": bool(self.covariance_full_window),
            "weighted_reconstruction": bool(self.weighted),
        }

    def _config(self, n_channels: int) -> NasrConfig:
        adjacency = self.adjacency
        if self.reconstruct_neighbors and adjacency is None:
            montage = default_montage()
            if montage.n_channels != n_channels:
                raise ParameterError(
                    "reconstruct_neighbors needs an adjacency matrix for "
                    f"{n_channels} channels (default montage has "
                    f"{montage.n_channels})"
                )
            adjacency = build_adjacency(montage)
        return NasrConfig(
            reconstruct_neighbors=self.reconstruct_neighbors,
            covariance_full_window=self.covariance_full_window,
            adjacency=adjacency,
            s_nonoverlap=self.s_nonoverlap,
        )

    def _cfg(self) -> TrainConfig:
        return self.train_config if self.train_config is not None else TrainConfig()

    # -- fitting -----------------------------------------------------------

    def fit(
        self,
        X,
        y,
        calibration: EegRecording | None = None,
        eigen: EigenCache | None = None,
    ) -> "ArtifactPipeline":
        """Train on a batch of filtered windows with binary labels.

        ``X`` is a ``WindowBatch`` or ``(B, C, W)`` array of band-passed
        windows; normalization statistics are computed here from the
        clean windows of the whole batch. ``calibration`` (a filtered
        resting recording) is required for ``method="asr"``.
        """
        if self.method not in ("nasr", "asr", "none"):
            raise ParameterError(f"unknown method {self.method!r}")
        x = as_window_array(X)
        y = check_labels(y, x.shape[0])
        cfg = self._cfg()

        batch = X if isinstance(X, WindowBatch) else WindowBatch(
            x, np.arange(x.shape[0])
        )
        clean = detect_clean_windows(batch)
        self.stats_ = compute_reference_stats(batch, clean)
        x_norm = (x - self.stats_.mu[None, :, None]) \
            / self.stats_.sigma[None, :, None]
        c = x.shape[1]

        if self.method == "asr":
            if calibration is None:
                raise CalibrationError('method="asr" requires a calibration recording')
            calib_norm = EegRecording(
                (calibration.data - self.stats_.mu[:, None])
                / self.stats_.sigma[:, None],
                calibration.fs,
                list(calibration.channel_labels),
            )
            self.asr_model_ = asr_calibrate(calib_norm, cutoff=self.asr_cutoff)

        self.config_ = self._config(c) if self.method == "nasr" else None
        if self.method == "nasr":
            if eigen is None:
                eigen = nasr_layer.batch_eigen(x_norm, self.config_)
            core = _NasrCore(
                x_norm, y, eigen, self.config_,
                k_init=self.k_init, l_init=self.l_init,
                k_offset=self.k_offset, tau_d=self.tau_d, tau_l=self.tau_l,
                eps=self.eps, weighted=self.weighted,
                reference_denominator=self.reference_denominator,
                dropout=cfg.dropout,
            )
        else:
            cleaned = self._frozen_clean(x_norm).cleaned
            xr = postproc.average_rereference(cleaned, self.reference_denominator)
            feats, _, _ = logvar_features(xr)
            core = _FrozenCleanCore(feats, y, cfg.dropout)

        split = trainer.split_sequential(x.shape[0], cfg.split)
        result = trainer.fit(core, x.shape[0], cfg, split)

        self.core_ = core
        self.split_ = split
        self.fit_result_ = result
        self.history_ = result.history
        self.k_ = core.history_extras().get("k", float("nan"))
        self.l_ = core.history_extras().get("l", float("nan"))
        self.scaling_w_ = (
            np.copy(core.params["scaling_w"])
            if self.method == "nasr" and self.weighted
            else np.ones(c)
        )
        self.decoder_ = DecoderParams(
            w=np.copy(core.params["dec_w"]), b=float(core.params["dec_b"])
        )
        self.metrics_ = {
            name: evaluate_metrics(y[idx], core.predict_proba_idx(idx))
            for name, idx in split.items()
        }
        return self

    # -- frozen cleaning stages ---------------------------------------------

    def _frozen_clean(self, x_norm: np.ndarray) -> _CleanResult:
        if self.method == "none":
            return _CleanResult(
                cleaned=x_norm,
                masks=np.zeros(x_norm.shape[:2], dtype=bool),
            )
        cleaned = np.stack(
            [asr_transform(self.asr_model_, w) for w in x_norm]
        )
        masks = (np.abs(x_norm - cleaned) > ASR_FLAG_ATOL).any(axis=-1)
        return _CleanResult(cleaned=cleaned, masks=masks)

    # -- inference ----------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "stats_"):
            raise ParameterError("pipeline is not fitted")

    def _normalize(self, X) -> np.ndarray:
        x = as_window_array(X)
        return (x - self.stats_.mu[None, :, None]) \
            / self.stats_.sigma[None, :, None]

    def _clean_stage(self, x_norm: np.ndarray) -> _CleanResult:
        """Cleaning-stage output (pre re-reference) plus noise masks."""
        if self.method != "nasr":
            return self._frozen_clean(x_norm)
        params = NasrParams(
            k=self.k_, l=self.l_, k_offset=self.k_offset,
            tau_d=self.tau_d, tau_l=self.tau_l, eps=self.eps,
        )
        out = nasr_layer.forward(x_norm, params, self.config_, hard=True)
        cleaned = out.recon
        if self.weighted:
            cleaned = postproc.weighted_reconstruction(
                cleaned, out.noise_mask[:, :, 0].astype(np.float64),
                self.scaling_w_,
            )
        return _CleanResult(cleaned=cleaned, masks=out.noise_mask[:, :, 0])

    def transform(self, X) -> np.ndarray:
        """Cleaned, re-referenced windows in normalized units."""
        self._check_fitted()
        result = self._clean_stage(self._normalize(X))
        return postproc.average_rereference(
            result.cleaned, self.reference_denominator
        )

    def noise_masks(self, X) -> np.ndarray:
        """Boolean ``(B, C)`` mask of reconstructed channels per window."""
        self._check_fitted()
        return self._clean_stage(self._normalize(X)).masks

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        p, _ = decoder_forward_feats(
            logvar_features(self.transform(X))[0], self.decoder_
        )
        return p

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    # -- single-window fast paths for the latency benchmark ------------------

    def clean_window(self, window: np.ndarray) -> np.ndarray:
        """Cleaning stage + re-reference for one normalized ``(C, W)`` window."""
        if self.method == "nasr":
            params = NasrParams(
                k=self.k_, l=self.l_, k_offset=self.k_offset,
                tau_d=self.tau_d, tau_l=self.tau_l, eps=self.eps,
            )
            out = nasr_layer.forward(window[None], params, self.config_, hard=True)
            cleaned = out.recon[0]
            if self.weighted:
                cleaned = postproc.weighted_reconstruction(
                    cleaned, out.noise_mask[0, :, 0].astype(np.float64),
                    self.scaling_w_,
                )
        elif self.method == "asr":
            cleaned = asr_transform(self.asr_model_, window)
        else:
            cleaned = window
        return postproc.average_rereference(cleaned, self.reference_denominator)

    def decode_window(self, cleaned: np.ndarray) -> float:
        """Decoder probability for one cleaned ``(C, W)`` window."""
        feats, _, _ = logvar_features(cleaned[None])
        p, _ = decoder_forward_feats(feats, self.decoder_)
        return float(p[0])
