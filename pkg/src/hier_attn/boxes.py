"""Bounding-box parameterization, membership, and axis-aligned 3D IoU.

A box is stored as center + H/W/D size + heading about the vertical (z)
axis + class scores. Predictions are encoded relative to a candidate
position: a center offset, a size bin (one per class mean size) with a
residual, and a heading bin with a residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi
SIZE_FLOOR = 1e-3  # meters; keeps early-training residuals from collapsing a box


class ProtocolError(ValueError):
    """Operation requested outside the supported (axis-aligned) protocol."""


@dataclass
class BoxProposal:
    """b = {center, size, heading, class scores}."""

    center: np.ndarray
    size: np.ndarray
    heading: float = 0.0
    scores: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if np.any(self.size <= 0):
            raise ValueError("box size components must be positive")
        self.heading = float(self.heading) % TWO_PI
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if abs(self.scores.sum() - 1.0) > 1e-6:
            raise ValueError("class scores must sum to 1")


@dataclass
class BoxEncoding:
    """Detector-facing box parameterization relative to a candidate point."""

    center_offset: np.ndarray
    size_bin: int
    size_residual: np.ndarray
    heading_bin: int
    heading_residual: float
    class_logits: np.ndarray

    def __post_init__(self):
        self.center_offset = np.asarray(self.center_offset, dtype=np.float64).reshape(3)
        self.size_residual = np.asarray(self.size_residual, dtype=np.float64).reshape(3)
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64).reshape(-1)
        self.size_bin = int(self.size_bin)
        self.heading_bin = int(self.heading_bin)
        self.heading_residual = float(self.heading_residual)


@dataclass(frozen=True)
class BinConfig:
    """Quantization grid: per-class mean sizes plus uniform heading bins."""

    mean_sizes: np.ndarray           # (num_classes, 3)
    num_heading_bins: int = 12

    def __post_init__(self):
        ms = np.asarray(self.mean_sizes, dtype=np.float64)
        if ms.ndim != 2 or ms.shape[1] != 3:
            raise ValueError("mean_sizes must have shape (num_classes, 3)")
        object.__setattr__(self, "mean_sizes", ms)
        if self.num_heading_bins < 1:
            raise ValueError("need at least one heading bin")

    @property
    def num_size_bins(self) -> int:
        return self.mean_sizes.shape[0]

    def heading_bin_center(self, b: int) -> float:
        return TWO_PI * b / self.num_heading_bins


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def decode_box(encoding: BoxEncoding, candidate_pos, bins: BinConfig) -> BoxProposal:
    """Realize an encoding as a geometric box anchored at the candidate."""
    if not 0 <= encoding.size_bin < bins.num_size_bins:
        raise ValueError(f"size bin {encoding.size_bin} out of range")
    if not 0 <= encoding.heading_bin < bins.num_heading_bins:
        raise ValueError(f"heading bin {encoding.heading_bin} out of range")
    pos = np.asarray(candidate_pos, dtype=np.float64).reshape(3)
    center = pos + encoding.center_offset
    size = np.maximum(bins.mean_sizes[encoding.size_bin] + encoding.size_residual, SIZE_FLOOR)
    heading = (bins.heading_bin_center(encoding.heading_bin) + encoding.heading_residual) % TWO_PI
    scores = _softmax(encoding.class_logits)
    return BoxProposal(center=center, size=size, heading=heading, scores=scores)


def encode_box(box: BoxProposal, candidate_pos, bins: BinConfig) -> BoxEncoding:
    """Inverse of decode_box: nearest bins, residuals as differences."""
    pos = np.asarray(candidate_pos, dtype=np.float64).reshape(3)
    size_d2 = np.sum((bins.mean_sizes - box.size) ** 2, axis=1)
    size_bin = int(np.argmin(size_d2))
    centers = np.array([bins.heading_bin_center(b) for b in range(bins.num_heading_bins)])
    delta = box.heading - centers
    wrapped = (delta + np.pi) % TWO_PI - np.pi  # signed distance in (-pi, pi]
    heading_bin = int(np.argmin(np.abs(wrapped)))
    # probabilities are not recoverable from an argmax-style encoding; store
    # log-scores so decode's softmax reproduces them
    logits = np.log(np.maximum(box.scores, 1e-12))
    return BoxEncoding(
        center_offset=box.center - pos,
        size_bin=size_bin,
        size_residual=box.size - bins.mean_sizes[size_bin],
        heading_bin=heading_bin,
        heading_residual=float(wrapped[heading_bin]),
        class_logits=logits,
    )


def point_in_box(p, box: BoxProposal) -> bool:
    """Inclusive membership after undoing the box pose (translation + yaw)."""
    rel = np.asarray(p, dtype=np.float64).reshape(3) - box.center
    if box.heading != 0.0:
        c, s = np.cos(-box.heading), np.sin(-box.heading)
        rel = np.array([c * rel[0] - s * rel[1], s * rel[0] + c * rel[1], rel[2]])
    return bool(np.all(np.abs(rel) <= box.size / 2.0))


def points_in_box_mask(points: np.ndarray, box: BoxProposal) -> np.ndarray:
    """Vectorized inclusive membership test for an (N, 3) array."""
    rel = points - box.center
    if box.heading != 0.0:
        c, s = np.cos(-box.heading), np.sin(-box.heading)
        rel = np.stack([c * rel[:, 0] - s * rel[:, 1],
                        s * rel[:, 0] + c * rel[:, 1],
                        rel[:, 2]], axis=1)
    half = box.size / 2.0
    return np.all(np.abs(rel) <= half, axis=1)


def box_volume(box: BoxProposal) -> float:
    """v = H * W * D."""
    return float(np.prod(box.size))


def iou_3d_axis_aligned(a: BoxProposal, b: BoxProposal) -> float:
    """Intersection over union of two axis-aligned boxes."""
    if a.heading != 0.0 or b.heading != 0.0:
        raise ProtocolError("axis-aligned IoU requires zero headings")
    lo = np.maximum(a.center - a.size / 2, b.center - b.size / 2)
    hi = np.minimum(a.center + a.size / 2, b.center + b.size / 2)
    overlap = np.maximum(hi - lo, 0.0)
    inter = float(np.prod(overlap))
    union = box_volume(a) + box_volume(b) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# line-delimited box records: "class score cx cy cz h w d heading"
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxRecord:
    """Flat per-box record shared by ground truth and predictions."""

    class_id: int
    score: float
    center: tuple
    size: tuple
    heading: float = 0.0

    def to_proposal(self, num_classes: int) -> BoxProposal:
        scores = np.zeros(max(num_classes, self.class_id + 1))
        scores[self.class_id] = 1.0
        return BoxProposal(center=np.array(self.center), size=np.array(self.size),
                           heading=self.heading, scores=scores)


def format_record(r: BoxRecord) -> str:
    vals = [str(r.class_id), f"{r.score:.17g}"]
    vals += [f"{v:.17g}" for v in r.center]
    vals += [f"{v:.17g}" for v in r.size]
    vals.append(f"{r.heading:.17g}")
    return " ".join(vals)


def parse_record(line: str) -> BoxRecord:
    parts = line.split()
    if len(parts) != 9:
        raise ValueError(f"box record needs 9 fields, got {len(parts)}: {line!r}")
    return BoxRecord(
        class_id=int(parts[0]),
        score=float(parts[1]),
        center=tuple(float(v) for v in parts[2:5]),
        size=tuple(float(v) for v in parts[5:8]),
        heading=float(parts[8]),
    )


def save_records(records: Sequence[BoxRecord], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(format_record(r) + "\n")


def load_records(path) -> list:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(parse_record(line))
    return out
