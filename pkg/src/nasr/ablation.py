"""Ablation matrix, latency benchmark, noise-map export and Pareto report.

The five experimental arms:

====  ======  =================  ================  ===================
id    stage   neighbors          full-window cov   weighted recon
====  ======  =================  ================  ===================
m01   asr     --                 --                --
m02   nasr    False              False             True
m03   nasr    True               False             True
m04   nasr    True               True              True
m05   nasr    True               False             False
====  ======  =================  ================  ===================
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pipeline import ArtifactPipeline
from .preprocess import EegRecording, WindowBatch
from .trainer import TrainConfig
from .validation import ParameterError, as_window_array

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    from contextlib import nullcontext

    def threadpool_limits(*_a, **_k):
        return nullcontext()

VARIANTS = ("m01", "m02", "m03", "m04", "m05")

_VARIANT_FLAGS = {
    "m01": {"method": "asr", "reconstruct_neighbors": False,
            "covariance_full_window": False, "weighted_reconstruction": False},
    "m02": {"method": "nasr", "reconstruct_neighbors": False,
            "covariance_full_window": False, "weighted_reconstruction": True},
    "m03": {"method": "nasr", "reconstruct_neighbors": True,
            "covariance_full_window": False, "weighted_reconstruction": True},
    "m04": {"method": "nasr", "reconstruct_neighbors": True,
            "covariance_full_window": True, "weighted_reconstruction": True},
    "m05": {"method": "nasr", "reconstruct_neighbors": True,
            "covariance_full_window": False, "weighted_reconstruction": False},
}

__all__ = [
    "VARIANTS",
    "variant_flags",
    "build_pipeline",
    "AblationData",
    "AblationRun",
    "run_ablation",
    "run_all_variants",
    "bench_latency",
    "export_noisemap",
    "pareto_front",
]


def variant_flags(variant: str) -> dict:
    """Ablation switches of one arm (copied, safe to mutate)."""
    if variant not in _VARIANT_FLAGS:
        raise ParameterError(
            f"unknown variant {variant!r}, expected one of {VARIANTS}"
        )
    return dict(_VARIANT_FLAGS[variant])


def build_pipeline(
    variant: str,
    train_config: TrainConfig | None = None,
    adjacency: np.ndarray | None = None,
    asr_cutoff: float = 20.0,
) -> ArtifactPipeline:
    """Instantiate the pipeline for an ablation arm (or "none" control)."""
    if variant == "none":
        return ArtifactPipeline(method="none", train_config=train_config)
    flags = variant_flags(variant)
    return ArtifactPipeline(
        method=flags["method"],
        reconstruct_neighbors=flags["reconstruct_neighbors"],
        covariance_full_window=flags["covariance_full_window"],
        weighted=flags["weighted_reconstruction"],
        adjacency=adjacency,
        asr_cutoff=asr_cutoff,
        train_config=train_config,
    )


@dataclass
class AblationData:
    """Everything one ablation arm needs: windows, labels, calibration."""

    batch: WindowBatch
    labels: np.ndarray
    calibration: EegRecording | None = None


@dataclass
class AblationRun:
    """Results of one arm: configuration, metrics, latency, mask stats."""

    variant: str
    flags: dict
    metrics: dict
    latency: dict
    mask_stats: dict
    history: list = field(default_factory=list)
    best_epoch: int = 0
    pipeline: ArtifactPipeline | None = None

    def to_json(self, path: str | Path) -> None:
        payload = {
            "variant": self.variant,
            "flags": self.flags,
            "metrics": self.metrics,
            "latency": self.latency,
            "mask_stats": self.mask_stats,
            "best_epoch": self.best_epoch,
        }
        Path(path).write_text(json.dumps(payload, indent=2))


def run_ablation(
    variant: str,
    data: AblationData,
    cfg: TrainConfig | None = None,
    bench_measure: int = 1000,
    bench_warmup: int = 100,
) -> AblationRun:
    """Train one arm, evaluate all splits, benchmark, collect mask stats."""
    pipe = build_pipeline(variant, train_config=cfg)
    pipe.fit(data.batch, data.labels, calibration=data.calibration)
    masks = pipe.noise_masks(data.batch)
    latency = bench_latency(
        pipe, data.batch, n_warmup=bench_warmup, n_measure=bench_measure
    )
    return AblationRun(
        variant=variant,
        flags={"variant": variant, **pipe.flags()},
        metrics=pipe.metrics_,
        latency=latency,
        mask_stats={
            "flag_fraction": float(masks.mean()),
            "flagged_windows": int(masks.any(axis=1).sum()),
            "n_windows": int(masks.shape[0]),
        },
        history=pipe.history_,
        best_epoch=pipe.fit_result_.best_epoch,
        pipeline=pipe,
    )


def _run_one(args) -> AblationRun:
    variant, data, cfg, bench_measure, bench_warmup = args
    run = run_ablation(variant, data, cfg, bench_measure, bench_warmup)
    run.pipeline = None  # keep results picklable/light across processes
    return run


def run_all_variants(
    data: AblationData,
    cfg: TrainConfig | None = None,
    variants: tuple[str, ...] = VARIANTS,
    bench_measure: int = 1000,
    bench_warmup: int = 100,
) -> dict[str, AblationRun]:
    """Run several arms; ``NASR_THREADS`` > 1 fans out to worker processes."""
    workers = int(os.environ.get("NASR_THREADS", "1"))
    jobs = [(v, data, cfg, bench_measure, bench_warmup) for v in variants]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    else:
        runs = [_run_one(job) for job in jobs]
    return {run.variant: run for run in runs}


def bench_latency(
    pipeline: ArtifactPipeline,
    windows,
    n_warmup: int = 100,
    n_measure: int = 1000,
) -> dict:
    """Single-window streaming latency of the cleaning stage and decoder.

    Cycles through the provided windows one at a time (batch size 1) on a
    monotonic clock, pinned to a single BLAS thread for stable timings.
    Returns medians and p95s in milliseconds.
    """
    if n_measure < 1000:
        raise ParameterError("n_measure must be >= 1000 for stable medians")
    if n_warmup < 100:
        raise ParameterError("n_warmup must be >= 100")
    x = as_window_array(windows)
    norm = (x - pipeline.stats_.mu[None, :, None]) \
        / pipeline.stats_.sigma[None, :, None]
    n = norm.shape[0]
    clean_ms = np.empty(n_measure)
    decode_ms = np.empty(n_measure)
    with threadpool_limits(limits=1):
        for i in range(n_warmup):
            w = norm[i % n]
            pipeline.decode_window(pipeline.clean_window(w))
        for i in range(n_measure):
            w = norm[i % n]
            t0 = time.perf_counter()
            cleaned = pipeline.clean_window(w)
            t1 = time.perf_counter()
            pipeline.decode_window(cleaned)
            t2 = time.perf_counter()
            clean_ms[i] = (t1 - t0) * 1e3
            decode_ms[i] = (t2 - t1) * 1e3
    total = clean_ms + decode_ms
    return {
        "clean_median_ms": float(np.median(clean_ms)),
        "clean_p95_ms": float(np.percentile(clean_ms, 95)),
        "decode_median_ms": float(np.median(decode_ms)),
        "decode_p95_ms": float(np.percentile(decode_ms, 95)),
        "median_ms": float(np.median(total)),
        "p95_ms": float(np.percentile(total, 95)),
        "n_measure": int(n_measure),
    }


def export_noisemap(masks: np.ndarray, path: str | Path) -> float:
    """Write a channel-by-window 0/1 CSV plus a flagged-fraction summary.

    Rows are channels, columns are windows; the final line records the
    fraction of flagged (window, channel) cells. Returns that fraction.
    """
    masks = np.asarray(masks)
    if masks.ndim != 2:
        raise ParameterError(f"masks must be (B, C), got shape {masks.shape}")
    grid = masks.T.astype(int)  # C rows x B columns
    fraction = float(masks.mean()) if masks.size else 0.0
    path = Path(path)
    with open(path, "w") as fh:
        for row in grid:
            fh.write(",".join(str(v) for v in row) + "\n")
        fh.write(f"flagged_fraction,{fraction:.6f}\n")
    return fraction


def pareto_front(points: dict[str, tuple[float, float]]) -> dict[str, bool]:
    """Mark Pareto-optimal variants among (accuracy, latency) points.

    A variant is dominated iff some other variant has strictly higher
    accuracy AND strictly lower latency.
    """
    out = {}
    for name, (acc, lat) in points.items():
        dominated = any(
            other_acc > acc and other_lat < lat
            for other, (other_acc, other_lat) in points.items()
            if other != name
        )
        out[name] = not dominated
    return out
