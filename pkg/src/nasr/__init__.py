"""Channel-level EEG artifact subspace reconstruction.

A trainable cleaning layer with dual learnable thresholds, a simplified
traditional-ASR baseline, a compact differentiable decoder and training
loop, a synthetic EEG harness, and latency benchmarks.
"""

from .ablation import (
    AblationData,
    AblationRun,
    bench_latency,
    build_pipeline,
    export_noisemap,
    pareto_front,
    run_ablation,
    run_all_variants,
    variant_flags,
    VARIANTS,
)
from .asr import AsrModel, AsrReconstructor, asr_calibrate, asr_transform
from .layer import (
    EigenCache,
    NasrConfig,
    NasrOutput,
    NasrParams,
    backward,
    batch_eigen,
    channel_spread,
    check_vector,
    discard_mask,
    forward,
    load_checkpoint,
    noise_mask,
    reconstruct,
    save_checkpoint,
    threshold,
)
from .linalg import sym_eig, window_covariance
from .montage import Montage, build_adjacency, default_montage, load_montage
from .pipeline import ArtifactPipeline
from .postproc import (
    average_rereference,
    average_rereference_backward,
    weighted_reconstruction,
    weighted_reconstruction_backward,
)
from .preprocess import (
    ChannelStats,
    EegRecording,
    WindowBatch,
    bandpass_filter,
    compute_reference_stats,
    detect_clean_windows,
    load_recording,
    make_windows,
    save_recording,
    zscore_denormalize,
    zscore_normalize,
)
from .synth import ArtifactSpec, GroundTruth, SynthSpec, synth_generate
from .trainer import (
    TrainConfig,
    adam_step,
    combined_loss,
    evaluate_metrics,
    fit,
    split_sequential,
)
from .validation import (
    CalibrationError,
    ConvergenceError,
    DataError,
    EmptyBatchError,
    ParameterError,
)

__version__ = "0.1.0"
