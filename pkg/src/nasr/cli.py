"""Command-line interface.

Subcommands::

    nasr synth    --out DIR [--spec FILE] [--seed N]
    nasr clean    --data DIR --method {asr,nasr} [--params CKPT] --out DIR
    nasr train    --data DIR --variant m01..m05 [--config FILE] --out DIR
    nasr eval     --ckpt RUNDIR --data DIR [--split test]
    nasr bench    --data DIR --variant m01..m05 [--out FILE]
    nasr noisemap --run-dir RUNDIR [--out FILE]

Config files are JSON trees; recognized top-level keys are ``train``
(TrainConfig fields), ``synth`` (SynthSpec fields), ``band``
(``[low_hz, high_hz]``), ``window`` and ``hop``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ablation import (
    VARIANTS,
    AblationData,
    bench_latency,
    build_pipeline,
    export_noisemap,
    run_ablation,
)
from .layer import load_checkpoint, save_checkpoint, NasrParams
from .preprocess import (
    DEFAULT_BAND,
    DEFAULT_HOP,
    DEFAULT_ORDER,
    DEFAULT_WINDOW,
    bandpass_filter,
    load_recording,
    make_windows,
    save_recording,
)
from .synth import GroundTruth, SynthSpec, synth_generate
from .trainer import TrainConfig, evaluate_metrics, split_sequential, write_history_csv


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _train_config(config: dict, seed: int | None = None) -> TrainConfig:
    kwargs = dict(config.get("train", {}))
    if seed is not None:
        kwargs["seed"] = seed
    return TrainConfig.from_dict(kwargs)


def _prepare_data(data_dir: Path, config: dict) -> AblationData:
    """Load a synth output directory: filter, window, attach labels."""
    band = config.get("band", list(DEFAULT_BAND))
    w = int(config.get("window", DEFAULT_WINDOW))
    hop = int(config.get("hop", DEFAULT_HOP))
    rec = load_recording(data_dir / "recording")
    filtered = bandpass_filter(rec, band[0], band[1], DEFAULT_ORDER)
    batch = make_windows(filtered, w, hop)
    labels = np.asarray(
        json.loads((data_dir / "labels.json").read_text())["labels"]
    )
    calibration = None
    calib_path = data_dir / "calibration.json"
    if calib_path.exists():
        calibration = bandpass_filter(
            load_recording(data_dir / "calibration"), band[0], band[1],
            DEFAULT_ORDER,
        )
    return AblationData(batch=batch, labels=labels, calibration=calibration)


def cmd_synth(args) -> int:
    config = _load_config(args.config)
    spec = SynthSpec.from_dict(config.get("synth", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rec, labels, truth = synth_generate(spec, seed=args.seed)
    save_recording(rec, out / "recording")
    (out / "labels.json").write_text(json.dumps({
        "window": spec.window, "hop": spec.hop, "labels": labels.tolist(),
    }))
    truth.to_json(out / "artifacts.json")

    calib_spec = SynthSpec.from_dict({
        **config.get("synth", {}),
        "duration_s": config.get("calibration_s", 60.0),
        "class_amp": 0.0,
        "artifacts": [],
    })
    calib, _, _ = synth_generate(calib_spec, seed=args.seed + 1)
    save_recording(calib, out / "calibration")
    print(f"wrote recording ({rec.n_channels} ch, {rec.duration:.1f} s), "
          f"{labels.size} window labels, {len(truth.events)} events -> {out}")
    return 0


def cmd_clean(args) -> int:
    config = _load_config(args.config)
    data = _prepare_data(Path(args.data), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variant = "m01" if args.method == "asr" else "m02"
    # decoder training is irrelevant for cleaning; one cheap epoch
    cfg = _train_config(config)
    cfg.epochs_max = 1
    pipe = build_pipeline(variant, train_config=cfg)
    pipe.fit(data.batch, data.labels, calibration=data.calibration)
    if args.method == "nasr" and args.params:
        ckpt = load_checkpoint(args.params)
        pipe.k_, pipe.l_ = float(ckpt["k"]), float(ckpt["l"])
        pipe.scaling_w_ = ckpt["scaling_w"]
    cleaned = pipe.transform(data.batch)
    masks = pipe.noise_masks(data.batch)
    cleaned.astype("<f4").tofile(out / "cleaned_windows.bin")
    (out / "cleaned_windows.json").write_text(json.dumps({
        "shape": list(cleaned.shape), "dtype": "f32le",
        "layout": "window_channel_time", "method": args.method,
    }))
    export_noisemap(masks, out / "noisemap.csv")
    print(f"cleaned {cleaned.shape[0]} windows -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    data = _prepare_data(Path(args.data), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(config, seed=args.seed)
    run = run_ablation(
        args.variant, data, cfg,
        bench_measure=int(config.get("bench_measure", 1000)),
        bench_warmup=int(config.get("bench_warmup", 100)),
    )
    run.to_json(out / "report.json")
    (out / "config.json").write_text(json.dumps({
        **run.flags,
        "train": cfg.__dict__ | {"split": list(cfg.split)},
        "data": str(Path(args.data).resolve()),
    }, indent=2))
    write_history_csv(run.history, out / "history.csv")
    pipe = run.pipeline
    save_checkpoint(
        out / "checkpoint.json",
        NasrParams(
            k=0.0 if np.isnan(pipe.k_) else pipe.k_,
            l=0.0 if np.isnan(pipe.l_) else pipe.l_,
            k_offset=pipe.k_offset,
        ),
        pipe.scaling_w_,
        extra={
            "decoder_w": pipe.decoder_.w.tolist(),
            "decoder_b": pipe.decoder_.b,
            "variant": args.variant,
        },
    )
    (out / "metrics.json").write_text(json.dumps(run.metrics, indent=2))
    export_noisemap(pipe.noise_masks(data.batch), out / "noisemap.csv")
    test = run.metrics["test"]
    print(f"{args.variant}: test balanced_accuracy={test['balanced_accuracy']:.3f} "
          f"accuracy={test['accuracy']:.3f} f1={test['f1']:.3f} "
          f"clean_median={run.latency['clean_median_ms']:.3f} ms")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.ckpt)
    if run_dir.is_dir():
        config = json.loads((run_dir / "config.json").read_text())
        data_dir = Path(args.data) if args.data else Path(config["data"])
        variant = config["variant"]
        ckpt = load_checkpoint(run_dir / "checkpoint.json")
    else:
        ckpt = load_checkpoint(run_dir)
        variant = ckpt.get("variant", "m02")
        config = {}
        data_dir = Path(args.data)
    data = _prepare_data(data_dir, config)
    cfg = _train_config(config)
    cfg.epochs_max = 1
    pipe = build_pipeline(variant, train_config=cfg)
    pipe.fit(data.batch, data.labels, calibration=data.calibration)
    if pipe.method == "nasr":
        pipe.k_, pipe.l_ = float(ckpt["k"]), float(ckpt["l"])
        pipe.scaling_w_ = np.asarray(ckpt["scaling_w"])
    pipe.decoder_.w = np.asarray(ckpt["decoder_w"])
    pipe.decoder_.b = float(ckpt["decoder_b"])
    split = split_sequential(data.batch.n_windows, cfg.split)
    idx = split[args.split]
    p = pipe.predict_proba(data.batch.windows[idx])
    metrics = evaluate_metrics(data.labels[idx], p)
    print(json.dumps({args.split: metrics}, indent=2))
    return 0


def cmd_bench(args) -> int:
    config = _load_config(args.config)
    data = _prepare_data(Path(args.data), config)
    cfg = _train_config(config)
    cfg.epochs_max = int(config.get("bench_train_epochs", 3))
    pipe = build_pipeline(args.variant, train_config=cfg)
    pipe.fit(data.batch, data.labels, calibration=data.calibration)
    result = bench_latency(
        pipe, data.batch,
        n_warmup=args.n_warmup, n_measure=args.n_measure,
    )
    result["variant"] = args.variant
    print(json.dumps(result, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2))
    return 0


def cmd_noisemap(args) -> int:
    run_dir = Path(args.run_dir)
    config = json.loads((run_dir / "config.json").read_text())
    ckpt = load_checkpoint(run_dir / "checkpoint.json")
    data = _prepare_data(Path(config["data"]), config)
    cfg = TrainConfig.from_dict(config.get("train", {}))
    cfg.epochs_max = 1
    pipe = build_pipeline(config["variant"], train_config=cfg)
    pipe.fit(data.batch, data.labels, calibration=data.calibration)
    if pipe.method == "nasr":
        pipe.k_, pipe.l_ = float(ckpt["k"]), float(ckpt["l"])
        pipe.scaling_w_ = np.asarray(ckpt["scaling_w"])
    masks = pipe.noise_masks(data.batch)
    out = Path(args.out) if args.out else run_dir / "noisemap.csv"
    fraction = export_noisemap(masks, out)
    print(f"noisemap -> {out} (flagged fraction {fraction:.4f})")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="nasr",
        description="EEG artifact reconstruction: synthesis, cleaning, "
                    "training, benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled recording")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("clean", help="clean the windows of a recording")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("asr", "nasr"), required=True)
    p.add_argument("--params", default=None, help="nASR parameter checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("train", help="train one ablation variant")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True, help="run dir or checkpoint file")
    p.add_argument("--data", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="per-window latency benchmark")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS + ("none",), default="m02")
    p.add_argument("--config", default=None)
    p.add_argument("--n-warmup", type=int, default=100)
    p.add_argument("--n-measure", type=int, default=1000)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("noisemap", help="export the channel/window noise map")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_noisemap)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
