"""Cross/self attention with hierarchical variants.

Three operations share one grouped core:

* plain multi-head attention: one head group over one token map;
* multi-scale attention: the heads are split into groups, each group takes
  keys/values from a feature map at a different point density (a learned
  2x upsampling of the input, the input itself, and optionally a 0.5x
  set-abstraction downsampling); all groups share the query and output
  projections while each scale owns its key/value projections;
* box-local attention: every candidate attends only to the points inside
  its own box proposal, truncated or padded to a fixed token budget.

Keys/values are projected before padding and the core contracts token axes
with sequential accumulation, so a padded instance is bit-identical to the
same instance computed at its natural length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boxes import BoxProposal, points_in_box_mask
from .geometry import (
    FeatureMap,
    PointCloud,
    SizeError,
    ball_query,
    fps,
    interpolation_weights,
    set_abstraction,
)
from .numerics import (
    ParamBlock,
    Tensor,
    affine,
    concat,
    masked_softmax,
    matmul,
    mlp_forward,
    reshape,
    scale,
    seq_matmul,
    slice_axis,
    take_rows,
    transpose,
)


class ConfigError(ValueError):
    """Attention configuration violates a structural constraint."""


@dataclass(frozen=True)
class AttentionConfig:
    """Dimensions and knobs shared by the attention variants.

    scales lists the point densities used by the multi-scale variant
    relative to the input map (1.0 = the input itself, which must always
    participate). n_local caps the per-candidate token budget of the local
    variant.
    """

    model_dim: int
    head_count: int = 8
    hidden_dim: int = 0          # 0 -> model_dim
    value_dim: int = 0           # 0 -> hidden_dim
    scales: tuple = (1.0,)
    n_local: int = 16
    fallback_radius_floor: float = 0.1
    sa_radius: float = 0.4
    sa_group_size: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden_dim", self.hidden_dim or self.model_dim)
        object.__setattr__(self, "value_dim", self.value_dim or self.hidden_dim)
        object.__setattr__(self, "scales", tuple(sorted(set(float(s) for s in self.scales))))
        if self.head_count < 1:
            raise ConfigError("need at least one attention head")
        if self.hidden_dim % self.head_count:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.head_count} heads")
        if self.value_dim % self.head_count:
            raise ConfigError(f"value_dim {self.value_dim} not divisible by {self.head_count} heads")
        if len(self.scales) > self.head_count:
            raise ConfigError("more scales than heads")
        if self.n_local < 1:
            raise ConfigError("n_local must be >= 1")
        for s in self.scales:
            if s not in (0.5, 1.0, 2.0):
                raise ConfigError(f"unsupported feature scale {s}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.head_count

    @property
    def value_head_dim(self) -> int:
        return self.value_dim // self.head_count

    def head_groups(self):
        """(scale, first_head, head_count) per group, coarse scales first.

        Heads are split as evenly as possible; when it does not divide,
        the coarser scales take the extra heads.
        """
        n_groups = len(self.scales)
        base, rem = divmod(self.head_count, n_groups)
        out = []
        start = 0
        for g, s in enumerate(self.scales):
            n = base + (1 if g < rem else 0)
            out.append((s, start, n))
            start += n
        return out


@dataclass
class CandidateSet:
    """Object candidates: query positions with their running features."""

    positions: np.ndarray
    features: Tensor

    def __post_init__(self):
        self.positions = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (M, 3)")
        if self.features.data.shape[0] != self.positions.shape[0]:
            raise ValueError("one feature row per candidate")

    @property
    def count(self) -> int:
        return self.positions.shape[0]


class WeightRecorder:
    """Collects per-candidate attention weights for offline inspection."""

    def __init__(self):
        self.records = []

    def add(self, candidate: int, token_indices, weights, scale: float = 1.0):
        self.records.append({
            "candidate": int(candidate),
            "scale": float(scale),
            "tokens": [int(t) for t in token_indices],
            "weights": [float(w) for w in weights],
        })


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

def init_attention_params(params: ParamBlock, prefix: str, cfg: AttentionConfig) -> None:
    """Register q / per-group k,v / o projections (plus map builders)."""
    d = cfg.model_dim
    params.dense(f"{prefix}.q", d, cfg.hidden_dim)
    for g, (_, _, n_heads) in enumerate(cfg.head_groups()):
        params.dense(f"{prefix}.k{g}", d, cfg.head_dim * n_heads)
        params.dense(f"{prefix}.v{g}", d, cfg.value_head_dim * n_heads)
    params.dense(f"{prefix}.o", cfg.value_dim, d)
    if 2.0 in cfg.scales:
        params.mlp(f"{prefix}.up", [d, d, d])
    if 0.5 in cfg.scales:
        params.mlp(f"{prefix}.sa", [d + 3, d, d])


# ---------------------------------------------------------------------------
# cores
# ---------------------------------------------------------------------------

def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q kT / sqrt(d_key)) v with optional key masking.

    Shapes: q (..., M, d_key), k (..., T, d_key), v (..., T, d_value).
    The scaling uses the key width actually contracted (q's last axis).
    """
    d_key = q.data.shape[-1]
    perm = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    logits = scale(seq_matmul(q, transpose(k, perm)), 1.0 / np.sqrt(d_key))
    weights = masked_softmax(logits, mask=mask, axis=-1)
    return seq_matmul(weights, v)


def _split_heads(x: Tensor, n_heads: int, width: int) -> Tensor:
    """(T, n_heads*width) -> (n_heads, T, width), pads staying trailing per head."""
    t = x.data.shape[0]
    return transpose(reshape(x, (t, n_heads, width)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    """(n_heads, M, width) -> (M, n_heads*width)."""
    h, m, w = x.data.shape
    return reshape(transpose(x, (1, 0, 2)), (m, h * w))


def _grouped_attention(query_feats: Tensor, groups, params: ParamBlock,
                       prefix: str, cfg: AttentionConfig,
                       recorder: Optional[WeightRecorder] = None,
                       recorder_scales=None) -> Tensor:
    """Shared multi-head core over one or more key/value token groups.

    `groups` is a list of (kv_features, mask_or_None) aligned with
    cfg.head_groups(). Head outputs are concatenated in group order and
    projected by the shared output matrix.
    """
    head_groups = cfg.head_groups()
    if len(groups) != len(head_groups):
        raise ConfigError(f"expected {len(head_groups)} token groups, got {len(groups)}")
    m = query_feats.data.shape[0]
    q_all = affine(query_feats, params, f"{prefix}.q")          # (M, d_h)
    qh = _split_heads(q_all, cfg.head_count, cfg.head_dim)       # (h, M, dh)
    inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)

    outs = []
    for g, ((_, first, n_heads), (kv, mask)) in enumerate(zip(head_groups, groups)):
        k = affine(kv, params, f"{prefix}.k{g}")                 # (T, n_heads*dh)
        v = affine(kv, params, f"{prefix}.v{g}")                 # (T, n_heads*dv)
        kh = _split_heads(k, n_heads, cfg.head_dim)              # (hg, T, dh)
        vh = _split_heads(v, n_heads, cfg.value_head_dim)        # (hg, T, dv)
        qg = slice_axis(qh, 0, first, first + n_heads)           # (hg, M, dh)
        perm = (0, 2, 1)
        logits = scale(seq_matmul(qg, transpose(kh, perm)), inv_sqrt)
        weights = masked_softmax(logits, mask=mask, axis=-1)     # (hg, M, T)
        if recorder is not None:
            w_mean = weights.data.mean(axis=0)                   # (M, T)
            s = recorder_scales[g] if recorder_scales else 1.0
            t_idx = np.arange(w_mean.shape[1])
            for i in range(m):
                keep = np.ones(w_mean.shape[1], dtype=bool) if mask is None \
                    else np.broadcast_to(mask, (m, w_mean.shape[1]))[i]
                recorder.add(i, t_idx[keep], w_mean[i][keep], scale=s)
        outs.append(_merge_heads(seq_matmul(weights, vh)))       # (M, hg*dv)
    merged = outs[0] if len(outs) == 1 else concat(outs, axis=1)
    return affine(merged, params, f"{prefix}.o")


def multi_head_attention(query_in: Tensor, key_in: Tensor, value_in: Tensor,
                         params: ParamBlock, cfg: AttentionConfig,
                         prefix: str, mask=None,
                         recorder: Optional[WeightRecorder] = None) -> Tensor:
    """Plain multi-head attention: all heads over one token map.

    key_in and value_in must be the same token set (separate projections
    produce K and V from it).
    """
    if key_in is not value_in:
        if key_in.data.shape[0] != value_in.data.shape[0]:
            raise ConfigError("key and value token counts differ")
    if len(cfg.scales) != 1:
        cfg = AttentionConfig(model_dim=cfg.model_dim, head_count=cfg.head_count,
                              hidden_dim=cfg.hidden_dim, value_dim=cfg.value_dim)
    return _grouped_attention(query_in, [(key_in, mask)], params, prefix, cfg,
                              recorder=recorder)


def learnable_upsample(input_map: FeatureMap, raw: PointCloud,
                       params: ParamBlock, prefix: str,
                       start_index: int = 0) -> FeatureMap:
    """Build a 2N-point feature map from an N-point input.

    Positions are FPS-sampled from the raw cloud; each gets the
    inverse-distance blend of its three nearest input features, passed
    through the learned projection MLP.
    """
    n2 = 2 * input_map.count
    if raw.count < n2:
        raise SizeError(f"raw cloud has {raw.count} points, need >= {n2} to upsample")
    idx = fps(raw, n2, start_index)
    positions = raw.coords[idx]
    w = interpolation_weights(positions, input_map.positions, k=3)
    blended = matmul(Tensor(w), input_map.features)
    projected = mlp_forward(blended, params, f"{prefix}.up")
    return FeatureMap(positions=positions, features=projected)


def build_scale_maps(input_map: FeatureMap, raw: PointCloud, params: ParamBlock,
                     prefix: str, cfg: AttentionConfig) -> dict:
    """Materialize the per-scale feature maps the config asks for."""
    maps = {}
    for s in cfg.scales:
        if s == 1.0:
            maps[s] = input_map
        elif s == 2.0:
            maps[s] = learnable_upsample(input_map, raw, params, prefix)
        elif s == 0.5:
            maps[s] = set_abstraction(
                input_map, PointCloud(input_map.positions),
                out_count=max(1, input_map.count // 2),
                radius=cfg.sa_radius, group_size=cfg.sa_group_size,
                params=params, mlp_name=f"{prefix}.sa")
    return maps


def ms_attention(candidates: CandidateSet, input_map: FeatureMap, raw: PointCloud,
                 params: ParamBlock, cfg: AttentionConfig, prefix: str,
                 recorder: Optional[WeightRecorder] = None) -> Tensor:
    """Multi-scale cross-attention: head groups consume different densities.

    All groups share the candidate queries and the output projection; each
    group projects keys/values from its own scale's map. Output shape
    matches plain attention, so it is a drop-in replacement.
    """
    if 1.0 not in cfg.scales:
        raise ConfigError("the input scale (1.0) must always participate")
    maps = build_scale_maps(input_map, raw, params, prefix, cfg)
    groups = [(maps[s].features, None) for s, _, _ in cfg.head_groups()]
    return _grouped_attention(candidates.features, groups, params, prefix, cfg,
                              recorder=recorder,
                              recorder_scales=[s for s, _, _ in cfg.head_groups()])


def _fallback_radius(box: BoxProposal, cfg: AttentionConfig) -> float:
    return max(0.5 * float(np.linalg.norm(box.size)), cfg.fallback_radius_floor)


def gather_local_tokens(candidate_pos, box: BoxProposal, input_map: FeatureMap,
                        cfg: AttentionConfig, rng: np.random.Generator):
    """Pick the token indices a candidate may attend to.

    Returns (indices, n_real): more points than the budget are randomly
    truncated; an empty box falls back to a ball query around the candidate
    (all real); fewer points than the budget are padded by the caller.
    """
    inside = np.flatnonzero(points_in_box_mask(input_map.positions, box))
    n_local = cfg.n_local
    if inside.size > n_local:
        keep = rng.choice(inside.size, size=n_local, replace=False)
        return np.sort(inside[keep]), n_local
    if inside.size == 0:
        nb = ball_query(candidate_pos, PointCloud(input_map.positions),
                        _fallback_radius(box, cfg), n_local)
        return nb.indices, n_local
    return inside, int(inside.size)


def local_attention(candidates: CandidateSet, input_map: FeatureMap,
                    proposals: Sequence[BoxProposal], params: ParamBlock,
                    cfg: AttentionConfig, prefix: str, seed: int = 0,
                    recorder: Optional[WeightRecorder] = None) -> Tensor:
    """Box-adaptive local cross-attention (one box proposal per candidate).

    Each candidate's keys/values come only from input points inside its
    proposal, capped at cfg.n_local by seeded random truncation, padded
    with masked zero tokens when short, or replaced by a ball query around
    the candidate when the box is empty. Truncation seeds derive from
    (seed, candidate index), so results are independent of evaluation
    order.
    """
    m = candidates.count
    if len(proposals) != m:
        raise ConfigError(f"{m} candidates but {len(proposals)} proposals")
    if len(cfg.scales) != 1:
        cfg = AttentionConfig(model_dim=cfg.model_dim, head_count=cfg.head_count,
                              hidden_dim=cfg.hidden_dim, value_dim=cfg.value_dim,
                              n_local=cfg.n_local,
                              fallback_radius_floor=cfg.fallback_radius_floor)
    q_all = affine(candidates.features, params, f"{prefix}.q")   # (M, d_h)
    inv_sqrt = 1.0 / np.sqrt(cfg.head_dim)
    h, dh, dv = cfg.head_count, cfg.head_dim, cfg.value_head_dim

    rows = []
    for i in range(m):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        tokens, n_real = gather_local_tokens(candidates.positions[i], proposals[i],
                                             input_map, cfg, rng)
        n_tok = len(tokens)
        feats = take_rows(input_map.features, np.asarray(tokens, dtype=np.intp))
        k = affine(feats, params, f"{prefix}.k0")                # (n_tok, h*dh)
        v = affine(feats, params, f"{prefix}.v0")                # (n_tok, h*dv)
        if n_tok < cfg.n_local:                                  # zero pad tokens, masked out
            pad = cfg.n_local - n_tok
            k = concat([k, Tensor(np.zeros((pad, h * dh)))], axis=0)
            v = concat([v, Tensor(np.zeros((pad, h * dv)))], axis=0)
        mask = np.zeros(max(n_tok, cfg.n_local), dtype=bool)
        mask[:n_real] = True
        kh = _split_heads(k, h, dh)
        vh = _split_heads(v, h, dv)
        qi = reshape(slice_axis(q_all, 0, i, i + 1), (1, h, dh))
        qh = transpose(qi, (1, 0, 2))                            # (h, 1, dh)
        logits = scale(seq_matmul(qh, transpose(kh, (0, 2, 1))), inv_sqrt)
        weights = masked_softmax(logits, mask=mask, axis=-1)     # (h, 1, n_local)
        if recorder is not None:
            w_mean = weights.data.mean(axis=0)[0]
            real = np.asarray(tokens[:n_real])
            recorder.add(i, real, w_mean[:n_real])
        rows.append(_merge_heads(seq_matmul(weights, vh)))       # (1, h*dv)
    merged = concat(rows, axis=0)                                # (M, d_v)
    return affine(merged, params, f"{prefix}.o")
