"""Electrode coordinates and neighborhood adjacency construction.

Coordinates live on a 2-D head plane obtained by azimuthal-equidistant
projection of idealized 10-10 sphere positions (head radius 0.095 m), so
Euclidean distances approximate along-scalp distances in meters and the
default 0.05 m neighbor radius reads as 5 cm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .validation import DataError, ParameterError

DEFAULT_NEIGHBOR_RADIUS = 0.05

__all__ = [
    "Montage",
    "load_montage",
    "default_montage",
    "build_adjacency",
    "adjacency_to_json",
]


@dataclass
class Montage:
    """Channel labels plus 2-D head-plane coordinates in meters."""

    labels: list[str]
    coords: np.ndarray  # (C, 2)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise DataError(f"coords must be (C, 2), got {self.coords.shape}")
        if len(self.labels) != self.coords.shape[0]:
            raise DataError("one label per coordinate row required")
        if len(set(self.labels)) != len(self.labels):
            raise DataError("channel labels must be unique")
        if not np.isfinite(self.coords).all():
            raise DataError("coordinates must be finite")

    @property
    def n_channels(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


def load_montage(path: str | Path) -> Montage:
    """Parse a montage CSV with header ``label,x_m,y_m``."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DataError(f"{path}: empty montage file")
    header = [h.strip() for h in lines[0].split(",")]
    if header != ["label", "x_m", "y_m"]:
        raise DataError(
            f"{path}:1: expected header 'label,x_m,y_m', got {lines[0]!r}"
        )
    labels: list[str] = []
    coords: list[tuple[float, float]] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        label = parts[0]
        if label in seen:
            raise DataError(f"{path}:{lineno}: duplicate label {label!r}")
        seen.add(label)
        try:
            x, y = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-numeric coordinate") from exc
        labels.append(label)
        coords.append((x, y))
    if not labels:
        raise DataError(f"{path}: montage has no channel rows")
    return Montage(labels, np.asarray(coords))


def default_montage() -> Montage:
    """The packaged 28-channel central montage (F/FC/C/CP/P rows)."""
    ref = resources.files("nasr.data").joinpath("montage28.csv")
    with resources.as_file(ref) as path:
        return load_montage(path)


def build_adjacency(
    m: Montage, radius: float = DEFAULT_NEIGHBOR_RADIUS
) -> np.ndarray:
    """Binary neighbor matrix: 1 where inter-electrode distance < radius.

    Symmetric with a zero diagonal.
    """
    if radius <= 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    diff = m.coords[:, None, :] - m.coords[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    a = (dist < radius).astype(np.int64)
    np.fill_diagonal(a, 0)
    return a


def adjacency_to_json(m: Montage, a: np.ndarray, path: str | Path) -> None:
    """Dump an adjacency matrix with its labels for inspection."""
    Path(path).write_text(
        json.dumps({"labels": m.labels, "adjacency": np.asarray(a).tolist()})
    )
