"""Deterministic point-cloud sampling and neighborhood primitives.

Everything here is a pure function over immutable inputs. Distance ties are
always broken toward the lowest index so results are reproducible and
directly comparable against brute-force reference scans.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import ParamBlock, Tensor, concat, mlp_forward, reduce_max, reshape, take_rows

INTERP_EPS = 1e-8


class SizeError(ValueError):
    """A requested sample count exceeds what the cloud can provide."""


@dataclass(frozen=True)
class PointCloud:
    """A set of 3-D points in scene units (meters), optionally with features."""

    coords: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.float64))
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError("coords must have shape (count, 3)")
        if coords.shape[0] < 1:
            raise ValueError("a point cloud holds at least one point")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must all be finite")
        object.__setattr__(self, "coords", coords)
        if self.features is not None:
            feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
            if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
                raise ValueError("features must have one row per point")
            object.__setattr__(self, "features", feats)

    @property
    def count(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class NeighborSet:
    """Indices into a source cloud with their query distances.

    knn returns distances sorted ascending; ball_query orders by index
    instead (its contract), so sortedness is a property of the producing
    operation rather than of this container.
    """

    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        dist = np.asarray(self.distances, dtype=np.float64)
        if idx.shape != dist.shape or idx.ndim != 1:
            raise ValueError("indices and distances must be 1-D and equally long")
        if np.any(dist < 0):
            raise ValueError("distances are non-negative")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "distances", dist)


@dataclass
class FeatureMap:
    """N points with d-dim features: the token set consumed by attention."""

    positions: np.ndarray
    features: Tensor

    def __post_init__(self):
        self.positions = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if not isinstance(self.features, Tensor):
            self.features = Tensor(np.asarray(self.features, dtype=np.float64))
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must have shape (count, 3)")
        if self.features.data.ndim != 2 or self.features.data.shape[0] != self.positions.shape[0]:
            raise ValueError("features must have one row per position")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.features.data.shape[1]


# ---------------------------------------------------------------------------
# sampling and neighborhoods
# ---------------------------------------------------------------------------

def fps(cloud: PointCloud, k: int, start_index: int = 0) -> np.ndarray:
    """Furthest point sampling: greedy max-min coverage of the cloud.

    Returns k distinct indices, the first being start_index; ties on the
    max-min distance go to the lowest index (np.argmax convention).
    """
    n = cloud.count
    if not 1 <= k <= n:
        raise SizeError(f"fps: k={k} outside [1, {n}]")
    if not 0 <= start_index < n:
        raise SizeError(f"fps: start_index={start_index} outside [0, {n})")
    coords = cloud.coords
    selected = np.empty(k, dtype=np.intp)
    selected[0] = start_index
    min_d2 = np.sum((coords - coords[start_index]) ** 2, axis=1)
    min_d2[start_index] = -1.0  # sentinel: selected points never re-qualify
    for i in range(1, k):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        d2 = np.sum((coords - coords[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0
    return selected


def knn(query, cloud: PointCloud, k: int) -> NeighborSet:
    """The k nearest points by Euclidean distance, ascending, ties by index."""
    if k > cloud.count:
        raise SizeError(f"knn: k={k} exceeds cloud size {cloud.count}")
    q = np.asarray(query, dtype=np.float64)
    d = np.sqrt(np.sum((cloud.coords - q) ** 2, axis=1))
    order = np.argsort(d, kind="stable")[:k]
    return NeighborSet(indices=order, distances=d[order])


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a) x len(b)) Euclidean distances without a 3-D intermediate."""
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    return np.sqrt(np.maximum(d2, 0.0))


def knn_batch(queries: np.ndarray, positions: np.ndarray, k: int):
    """Vectorized knn for many queries; returns (indices, distances) arrays."""
    if k > positions.shape[0]:
        raise SizeError(f"knn_batch: k={k} exceeds {positions.shape[0]} points")
    d = _pairwise_distances(np.asarray(queries, dtype=np.float64),
                            np.asarray(positions, dtype=np.float64))
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(d, order, axis=1)


def ball_query(center, cloud: PointCloud, radius: float, max_samples: int) -> NeighborSet:
    """Up to max_samples points within radius, in ascending index order.

    Short groups are filled by repeating the nearest qualifying point; if
    nothing qualifies the single nearest point is repeated, so the result
    is never empty (keeps downstream tensors rectangular).
    """
    if radius <= 0:
        raise ValueError("ball_query: radius must be positive")
    if max_samples < 1:
        raise ValueError("ball_query: max_samples must be >= 1")
    c = np.asarray(center, dtype=np.float64)
    d = np.sqrt(np.sum((cloud.coords - c) ** 2, axis=1))
    inside = np.flatnonzero(d <= radius)
    if inside.size == 0:
        nearest = int(np.argmin(d))
        idx = np.full(max_samples, nearest, dtype=np.intp)
        return NeighborSet(indices=idx, distances=d[idx])
    if inside.size >= max_samples:
        idx = inside[:max_samples]
    else:
        nearest = inside[np.argmin(d[inside])]
        fill = np.full(max_samples - inside.size, nearest, dtype=np.intp)
        idx = np.concatenate([inside, fill])
    return NeighborSet(indices=idx.astype(np.intp), distances=d[idx])


def interpolate_features(query, source: FeatureMap, k: int = 3,
                         epsilon: float = INTERP_EPS) -> np.ndarray:
    """Inverse-distance weighted blend of the k nearest source features.

    Weights are 1/(d_i + eps), normalized to sum to one, so a coincident
    source point dominates in the eps -> 0 limit.
    """
    nb = knn(query, PointCloud(source.positions), k)
    inv = 1.0 / (nb.distances + epsilon)
    w = inv / inv.sum()
    return w @ source.features.data[nb.indices]


def interpolation_weights(queries: np.ndarray, positions: np.ndarray, k: int = 3,
                          epsilon: float = INTERP_EPS) -> np.ndarray:
    """Dense (len(queries) x len(positions)) inverse-distance weight matrix.

    Row i carries the normalized weights of query i over its k nearest
    positions, zero elsewhere; multiplying by a feature matrix performs the
    same blend as interpolate_features for every query at once.
    """
    idx, dist = knn_batch(queries, positions, k)
    inv = 1.0 / (dist + epsilon)
    w = inv / inv.sum(axis=1, keepdims=True)
    out = np.zeros((queries.shape[0], positions.shape[0]), dtype=np.float64)
    np.put_along_axis(out, idx, w, axis=1)
    return out


def ball_group_indices(centers: np.ndarray, positions: np.ndarray,
                       radius: float, group_size: int) -> np.ndarray:
    """ball_query for many centers at once; (len(centers) x group_size) indices."""
    d = _pairwise_distances(centers, positions)
    out = np.empty((centers.shape[0], group_size), dtype=np.intp)
    for row in range(centers.shape[0]):
        inside = np.flatnonzero(d[row] <= radius)
        if inside.size == 0:
            out[row] = int(np.argmin(d[row]))
        elif inside.size >= group_size:
            out[row] = inside[:group_size]
        else:
            nearest = inside[np.argmin(d[row][inside])]
            out[row, :inside.size] = inside
            out[row, inside.size:] = nearest
    return out


def set_abstraction(cloud: FeatureMap, raw: PointCloud, out_count: int,
                    radius: float, group_size: int, params: ParamBlock,
                    mlp_name: str, start_index: int = 0) -> FeatureMap:
    """Downsample a feature map by grouping and pooling around FPS centers.

    Centers are FPS-sampled from the raw cloud; each center gathers
    group_size ball-query neighbors from the feature map, runs a shared MLP
    on (neighbor feature, relative coordinate) rows, and max-pools over the
    group. Differentiable w.r.t. features and MLP weights.
    """
    if out_count > raw.count:
        raise SizeError(f"set_abstraction: out_count={out_count} exceeds raw count {raw.count}")
    center_idx = fps(raw, out_count, start_index)
    centers = raw.coords[center_idx]
    groups = ball_group_indices(centers, cloud.positions, radius, group_size)
    flat = groups.reshape(-1)
    rel = cloud.positions[flat] - np.repeat(centers, group_size, axis=0)
    gathered = take_rows(cloud.features, flat)
    stacked = concat([gathered, Tensor(rel)], axis=1)
    transformed = mlp_forward(stacked, params, mlp_name)
    d_out = transformed.data.shape[1]
    grouped = reshape(transformed, (out_count, group_size, d_out))
    pooled = reduce_max(grouped, axis=1)
    return FeatureMap(positions=centers, features=pooled)


# ---------------------------------------------------------------------------
# point-cloud I/O
# ---------------------------------------------------------------------------

_PCF_MAGIC = b"PCF1"


def load_cloud_text(path) -> PointCloud:
    """Whitespace-delimited text, one "x y z [f1 ... fd]" per line."""
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if rows.shape[1] < 3:
        raise ValueError(f"{path}: rows need at least x y z")
    feats = rows[:, 3:] if rows.shape[1] > 3 else None
    return PointCloud(coords=rows[:, :3], features=feats)


def save_cloud_text(cloud: PointCloud, path) -> None:
    feats = cloud.features
    with open(path, "w") as f:
        for i in range(cloud.count):
            vals = list(cloud.coords[i]) + (list(feats[i]) if feats is not None else [])
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def save_cloud_binary(cloud: PointCloud, path) -> None:
    """Binary format: "PCF1", u32 count, u32 feature dim, count x (3+dim) f32 LE."""
    dim = 0 if cloud.features is None else cloud.features.shape[1]
    rows = cloud.coords if dim == 0 else np.concatenate([cloud.coords, cloud.features], axis=1)
    with open(path, "wb") as f:
        f.write(_PCF_MAGIC)
        f.write(struct.pack("<II", cloud.count, dim))
        f.write(rows.astype("<f4").tobytes())


def load_cloud_binary(path) -> PointCloud:
    with open(path, "rb") as f:
        if f.read(4) != _PCF_MAGIC:
            raise ValueError(f"{path}: not a PCF1 file")
        count, dim = struct.unpack("<II", f.read(8))
        payload = f.read(4 * count * (3 + dim))
        if len(payload) != 4 * count * (3 + dim):
            raise ValueError(f"{path}: truncated payload")
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, 3 + dim).astype(np.float64)
    return PointCloud(coords=rows[:, :3], features=rows[:, 3:] if dim else None)
