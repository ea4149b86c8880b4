"""Synthetic EEG with class structure and injected artifacts.

The generator builds a correlated multichannel background (pink noise
plus spatially smooth narrow-band rhythm sources), modulates the mu band
of class-specific motor channels in alternating trial blocks, and injects
three artifact families: eye-blink bumps on frontal channels, band-limited
EMG bursts, and boxcar electrode pops. Every injected event is logged to a
ground-truth sidecar with the sliding windows it touches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .montage import Montage, default_montage
from .preprocess import DEFAULT_HOP, DEFAULT_WINDOW, EegRecording
from .validation import ParameterError

__all__ = ["ArtifactSpec", "SynthSpec", "GroundTruth", "synth_generate"]


@dataclass
class ArtifactSpec:
    """One artifact family: kind, rate, strength and target channels."""

    kind: str                     # blink | emg_burst | electrode_pop
    rate_per_min: float = 4.0
    amplitude: tuple[float, float] = (5.0, 15.0)
    channels: list[str] | None = None   # None = kind-specific default

    def __post_init__(self):
        if self.kind not in ("blink", "emg_burst", "electrode_pop"):
            raise ParameterError(f"unknown artifact kind {self.kind!r}")
        if self.rate_per_min < 0:
            raise ParameterError("artifact rate must be >= 0")


def default_artifacts() -> list[ArtifactSpec]:
    return [
        ArtifactSpec("blink", rate_per_min=6.0, amplitude=(5.0, 15.0)),
        ArtifactSpec("emg_burst", rate_per_min=4.0, amplitude=(3.0, 8.0)),
        ArtifactSpec("electrode_pop", rate_per_min=2.0, amplitude=(10.0, 30.0)),
    ]


@dataclass
class SynthSpec:
    """Recipe for one synthetic recording."""

    fs: float = 100.0
    duration_s: float = 60.0
    montage: Montage | None = None
    noise_amp: float = 1.0
    class_amp: float = 2.0
    trial_s: float = 4.0
    mu_band_hz: float = 10.0
    class_channels: dict[int, list[str]] = field(default_factory=lambda: {
        0: ["C3", "C5", "FC3", "CP3"],
        1: ["C4", "C6", "FC4", "CP4"],
    })
    artifacts: list[ArtifactSpec] = field(default_factory=default_artifacts)
    window: int = DEFAULT_WINDOW
    hop: int = DEFAULT_HOP

    def __post_init__(self):
        if self.montage is None:
            self.montage = default_montage()
        n = self.duration_s * self.fs
        if abs(n - round(n)) > 1e-9:
            raise ParameterError("duration_s * fs must be an integer sample count")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        kwargs = dict(d)
        if "artifacts" in kwargs:
            kwargs["artifacts"] = [
                ArtifactSpec(
                    kind=a["kind"],
                    rate_per_min=a.get("rate_per_min", 4.0),
                    amplitude=tuple(a.get("amplitude", (5.0, 15.0))),
                    channels=a.get("channels"),
                )
                for a in kwargs["artifacts"]
            ]
        if "class_channels" in kwargs:
            kwargs["class_channels"] = {
                int(k): v for k, v in kwargs["class_channels"].items()
            }
        return cls(**kwargs)


@dataclass
class GroundTruth:
    """Sidecar: injected events and the window indices they overlap."""

    events: list[dict]

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"events": self.events}, indent=1))

    @classmethod
    def from_json(cls, path: str | Path) -> "GroundTruth":
        return cls(events=json.loads(Path(path).read_text())["events"])

    def cells(self) -> set[tuple[int, int]]:
        """All injected (window, channel) cells."""
        out: set[tuple[int, int]] = set()
        for ev in self.events:
            for w in ev["windows"]:
                for c in ev["channels"]:
                    out.add((w, c))
        return out


def _pink_noise(rng: np.random.Generator, c: int, t: int) -> np.ndarray:
    white = rng.standard_normal((c, t))
    spec = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(t)
    scale = np.ones_like(freqs)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    scale[0] = 0.0
    pink = np.fft.irfft(spec * scale[None, :], n=t, axis=1)
    std = pink.std(axis=1, keepdims=True)
    return pink / np.maximum(std, 1e-12)


def _smooth_pattern(rng: np.random.Generator, montage: Montage) -> np.ndarray:
    center = montage.coords[rng.integers(montage.n_channels)]
    d2 = ((montage.coords - center) ** 2).sum(axis=1)
    return np.exp(-d2 / (2 * 0.05 ** 2))


def _windows_overlapping(start: int, stop: int, n_windows: int,
                         w: int, hop: int) -> list[int]:
    lo = max(0, (start - w) // hop + 1)
    hi = min(n_windows - 1, stop // hop)
    return [b for b in range(lo, hi + 1) if b * hop < stop and b * hop + w > start]


def _default_targets(kind: str, montage: Montage) -> list[str]:
    if kind == "blink":
        return [l for l in ("F3", "F1", "F2", "F4") if l in montage.labels] \
            or montage.labels[:2]
    return list(montage.labels)


def synth_generate(
    spec: SynthSpec, seed: int = 0
) -> tuple[EegRecording, np.ndarray, GroundTruth]:
    """Deterministically generate a labeled, artifact-injected recording.

    Returns the recording, the per-window binary labels (for the spec's
    window/hop geometry), and the ground-truth artifact sidecar.
    """
    rng = np.random.default_rng(seed)
    montage = spec.montage
    c = montage.n_channels
    t = int(round(spec.duration_s * spec.fs))
    time = np.arange(t) / spec.fs

    x = spec.noise_amp * _pink_noise(rng, c, t)

    # spatially smooth shared rhythm sources
    for freq in (10.0, 20.0, 6.0):
        pattern = _smooth_pattern(rng, montage)
        envelope = 1.0 + 0.4 * np.sin(
            2 * np.pi * rng.uniform(0.05, 0.2) * time + rng.uniform(0, 2 * np.pi)
        )
        src = np.sin(2 * np.pi * freq * time + rng.uniform(0, 2 * np.pi))
        x += 0.6 * spec.noise_amp * pattern[:, None] * (envelope * src)[None, :]

    # class-dependent mu-band modulation in alternating trial blocks
    trial_len = int(round(spec.trial_s * spec.fs))
    n_trials = max(1, t // trial_len)
    trial_classes = rng.integers(0, 2, size=n_trials)
    class_sig = np.sin(2 * np.pi * spec.mu_band_hz * time + rng.uniform(0, 2 * np.pi))
    for k, labels in spec.class_channels.items():
        idx = [montage.index(l) for l in labels if l in montage.labels]
        gate = np.zeros(t)
        for tr, cls in enumerate(trial_classes):
            if cls == k:
                gate[tr * trial_len:(tr + 1) * trial_len] = 1.0
        x[idx] += spec.class_amp * spec.noise_amp * (gate * class_sig)[None, :]

    # artifacts
    n_windows = max(0, (t - spec.window) // spec.hop + 1)
    events: list[dict] = []
    for art in spec.artifacts:
        n_events = rng.poisson(art.rate_per_min * spec.duration_s / 60.0)
        targets = art.channels or _default_targets(art.kind, montage)
        target_idx = [montage.index(l) for l in targets]
        for _ in range(n_events):
            amp = rng.uniform(*art.amplitude) * spec.noise_amp
            if art.kind == "blink":
                dur = int(rng.uniform(0.3, 0.5) * spec.fs)
                chans = target_idx
            elif art.kind == "emg_burst":
                dur = int(rng.uniform(0.3, 0.8) * spec.fs)
                chans = [target_idx[rng.integers(len(target_idx))]]
            else:  # electrode_pop
                dur = int(rng.uniform(0.5, 2.0) * spec.fs)
                chans = [target_idx[rng.integers(len(target_idx))]]
            start = int(rng.integers(0, max(1, t - dur)))
            stop = start + dur
            seg = np.arange(start, stop)
            if art.kind == "blink":
                bump = amp * 0.5 * (1 - np.cos(2 * np.pi * np.arange(dur) / dur))
                for ch in chans:
                    x[ch, seg] += bump
            elif art.kind == "emg_burst":
                burst = rng.standard_normal(dur)
                spec_b = np.fft.rfft(burst)
                f = np.fft.rfftfreq(dur, 1 / spec.fs)
                spec_b[(f < 20.0) | (f > 45.0)] = 0.0
                burst = np.fft.irfft(spec_b, n=dur)
                burst = amp * burst / max(burst.std(), 1e-12)
                x[chans[0], seg] += burst
            else:
                x[chans[0], seg] += amp
            events.append({
                "kind": art.kind,
                "start": start,
                "stop": stop,
                "channels": sorted(chans),
                "amplitude": float(amp),
                "windows": _windows_overlapping(
                    start, stop, n_windows, spec.window, spec.hop
                ),
            })

    rec = EegRecording(x, spec.fs, list(montage.labels))

    labels = np.zeros(n_windows, dtype=np.int64)
    for b in range(n_windows):
        center = b * spec.hop + spec.window // 2
        labels[b] = trial_classes[min(center // trial_len, n_trials - 1)]
    return rec, labels, GroundTruth(events=events)
