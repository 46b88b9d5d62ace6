"""Desk-scale end-to-end detection pipeline.

A two-stage set-abstraction backbone produces N tokens; M candidates are
FPS-sampled from them; a transformer decoder (self-attention, cross
attention that may be multi-scale, feed-forward) refines candidate
features with an independent prediction head per layer; an optional
appended layer runs box-local attention over the previous layer's
proposals. The loss supervises every layer's head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import (
    AttentionConfig,
    CandidateSet,
    ConfigError,
    WeightRecorder,
    init_attention_params,
    local_attention,
    ms_attention,
    multi_head_attention,
)
from .boxes import BinConfig, BoxEncoding, BoxProposal, BoxRecord, decode_box, encode_box, iou_3d_axis_aligned
from .geometry import FeatureMap, PointCloud, SizeError, fps, set_abstraction
from .numerics import (
    Adam,
    NumericError,
    ParamBlock,
    SGD,
    Tape,
    Tensor,
    add,
    affine,
    bce_with_logits,
    layer_norm,
    log_softmax,
    mlp_forward,
    mul,
    reduce_sum,
    scale,
    slice_axis,
    smooth_l1,
    take_rows,
)
from .scenesim import SceneSample

LOSS_WEIGHTS = {
    "objectness": 1.0,
    "center": 2.0,
    "size_bin": 0.3,
    "size_res": 2.0,
    "heading_bin": 0.3,
    "heading_res": 1.0,
    "class": 0.5,
}


@dataclass(frozen=True)
class DetectorConfig:
    backbone_points: int = 256           # N: tokens leaving the backbone
    stage1_points: int = 0               # 0 -> min(4N, raw count)
    model_dim: int = 64                  # d
    candidates: int = 32                 # M
    layers: int = 4                      # L decoder layers
    heads: int = 8
    msa_layers: Tuple[int, ...] = (0,)
    use_local_attn: bool = True
    scales: Tuple[float, ...] = (1.0, 2.0)
    n_local: int = 16
    ffn_dim: int = 128
    sa_radius1: float = 0.3
    sa_radius2: float = 0.8
    sa_group1: int = 16
    sa_group2: int = 16
    heading_bins: int = 12
    match_radius: float = 0.6    # candidates sit on surfaces; see notes
    nms_iou: float = 0.25
    seed: int = 0
    iterations: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    fps_random_start: bool = False

    def __post_init__(self):
        if self.candidates > self.backbone_points:
            raise ConfigError("candidate count exceeds backbone token count")
        if any(l < 0 or l >= self.layers for l in self.msa_layers):
            raise ConfigError(f"msa_layers {self.msa_layers} outside [0, {self.layers})")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must divide evenly into heads")
        if self.msa_layers and 1.0 not in self.scales:
            raise ConfigError("multi-scale layers need the 1.0 scale present")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def plain_attention(self) -> AttentionConfig:
        return AttentionConfig(model_dim=self.model_dim, head_count=self.heads)

    def ms_attention_cfg(self) -> AttentionConfig:
        return AttentionConfig(model_dim=self.model_dim, head_count=self.heads,
                               scales=self.scales, sa_radius=self.sa_radius2,
                               sa_group_size=self.sa_group2)

    def local_attention_cfg(self) -> AttentionConfig:
        return AttentionConfig(model_dim=self.model_dim, head_count=self.heads,
                               n_local=self.n_local)


@dataclass
class HeadLayout:
    """Column layout of a prediction head output row."""

    num_classes: int
    num_heading_bins: int

    @property
    def obj(self):
        return (0, 1)

    @property
    def center(self):
        return (1, 4)

    @property
    def size_bin(self):
        return (4, 4 + self.num_classes)

    @property
    def size_res(self):
        s = 4 + self.num_classes
        return (s, s + 3)

    @property
    def heading_bin(self):
        s = 7 + self.num_classes
        return (s, s + self.num_heading_bins)

    @property
    def heading_res(self):
        s = 7 + self.num_classes + self.num_heading_bins
        return (s, s + 1)

    @property
    def cls(self):
        s = 8 + self.num_classes + self.num_heading_bins
        return (s, s + self.num_classes)

    @property
    def width(self):
        return 8 + 2 * self.num_classes + self.num_heading_bins


@dataclass
class LayerPrediction:
    """One head's raw tensor plus its decoded geometric form."""

    head: Tensor
    proposals: List[BoxProposal]
    objectness: np.ndarray


@dataclass
class DetectionResult:
    candidate_positions: np.ndarray
    layers: List[LayerPrediction]

    @property
    def final(self) -> LayerPrediction:
        return self.layers[-1]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _ln_pair(params: ParamBlock, name: str, dim: int):
    params.tensor(f"{name}.g", (dim,), init="ones")
    params.tensor(f"{name}.b", (dim,), init="zeros")


def build_detector_params(cfg: DetectorConfig, num_classes: int) -> ParamBlock:
    d = cfg.model_dim
    layout = HeadLayout(num_classes, cfg.heading_bins)
    params = ParamBlock(cfg.seed)
    params.mlp("backbone.sa1", [3 + 3, d, d])
    params.mlp("backbone.sa2", [d + 3, d, d])
    params.dense("posembed", 3, d)
    for l in range(cfg.layers):
        init_attention_params(params, f"self{l}", cfg.plain_attention())
        cross_cfg = cfg.ms_attention_cfg() if l in cfg.msa_layers else cfg.plain_attention()
        init_attention_params(params, f"cross{l}", cross_cfg)
        params.mlp(f"ffn{l}", [d, cfg.ffn_dim, d])
        _ln_pair(params, f"ln{l}.self", d)
        _ln_pair(params, f"ln{l}.cross", d)
        _ln_pair(params, f"ln{l}.ffn", d)
        params.mlp(f"head{l}", [d, d, layout.width])
    if cfg.use_local_attn:
        init_attention_params(params, "local", cfg.local_attention_cfg())
        params.mlp("ffnL", [d, cfg.ffn_dim, d])
        _ln_pair(params, "lnL.cross", d)
        _ln_pair(params, "lnL.ffn", d)
        params.mlp("headL", [d, d, layout.width])
    return params


def _ln(x: Tensor, params: ParamBlock, name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def backbone_forward(raw: PointCloud, params: ParamBlock, cfg: DetectorConfig,
                     start_index: int = 0) -> FeatureMap:
    """Two stacked set-abstraction stages: raw -> 4N -> N tokens."""
    n = cfg.backbone_points
    if raw.count < n:
        raise SizeError(f"raw cloud has {raw.count} points, backbone needs >= {n}")
    n1 = cfg.stage1_points or min(4 * n, raw.count)
    seed_map = FeatureMap(raw.coords, Tensor(raw.coords.copy()))
    stage1 = set_abstraction(seed_map, raw, out_count=n1, radius=cfg.sa_radius1,
                             group_size=cfg.sa_group1, params=params,
                             mlp_name="backbone.sa1", start_index=start_index)
    stage2 = set_abstraction(stage1, PointCloud(stage1.positions), out_count=n,
                             radius=cfg.sa_radius2, group_size=cfg.sa_group2,
                             params=params, mlp_name="backbone.sa2",
                             start_index=0)
    return stage2


def sample_candidates(features: FeatureMap, m: int, start_index: int = 0) -> CandidateSet:
    """FPS m candidate positions over the feature map, carrying features."""
    if m > features.count:
        raise SizeError(f"asked for {m} candidates from {features.count} tokens")
    idx = fps(PointCloud(features.positions), m, start_index)
    return CandidateSet(positions=features.positions[idx],
                        features=take_rows(features.features, idx))


def _decode_head(head: Tensor, positions: np.ndarray, bins: BinConfig,
                 layout: HeadLayout) -> LayerPrediction:
    data = head.data
    m = data.shape[0]
    proposals = []
    for i in range(m):
        row = data[i]
        enc = BoxEncoding(
            center_offset=row[layout.center[0]:layout.center[1]],
            size_bin=int(np.argmax(row[layout.size_bin[0]:layout.size_bin[1]])),
            size_residual=row[layout.size_res[0]:layout.size_res[1]],
            heading_bin=int(np.argmax(row[layout.heading_bin[0]:layout.heading_bin[1]])),
            heading_residual=float(row[layout.heading_res[0]]),
            class_logits=row[layout.cls[0]:layout.cls[1]],
        )
        proposals.append(decode_box(enc, positions[i], bins))
    objness = 1.0 / (1.0 + np.exp(-data[:, 0]))
    return LayerPrediction(head=head, proposals=proposals, objectness=objness)


def decoder_forward(candidates: CandidateSet, features: FeatureMap, raw: PointCloud,
                    params: ParamBlock, cfg: DetectorConfig, bins: BinConfig,
                    local_seed: int = 0,
                    recorders: Optional[Dict[object, WeightRecorder]] = None) -> DetectionResult:
    """Run the decoder stack and decode every layer's proposals.

    recorders, when given, maps a layer index (or "local") to a collector
    for that layer's cross-attention weights.
    """
    layout = HeadLayout(bins.num_size_bins, cfg.heading_bins)
    recorders = recorders or {}
    x = add(candidates.features, affine(Tensor(candidates.positions), params, "posembed"))
    layers: List[LayerPrediction] = []
    for l in range(cfg.layers):
        plain = cfg.plain_attention()
        sa = multi_head_attention(x, x, x, params, plain, f"self{l}")
        x = _ln(add(x, sa), params, f"ln{l}.self")
        if l in cfg.msa_layers:
            ca = ms_attention(CandidateSet(candidates.positions, x), features, raw,
                              params, cfg.ms_attention_cfg(), f"cross{l}",
                              recorder=recorders.get(l))
        else:
            ca = multi_head_attention(x, features.features, features.features,
                                      params, plain, f"cross{l}",
                                      recorder=recorders.get(l))
        x = _ln(add(x, ca), params, f"ln{l}.cross")
        x = _ln(add(x, mlp_forward(x, params, f"ffn{l}")), params, f"ln{l}.ffn")
        head = mlp_forward(x, params, f"head{l}")
        layers.append(_decode_head(head, candidates.positions, bins, layout))
    if cfg.use_local_attn:
        proposals = layers[-1].proposals
        la = local_attention(CandidateSet(candidates.positions, x), features,
                             proposals, params, cfg.local_attention_cfg(), "local",
                             seed=local_seed, recorder=recorders.get("local"))
        x = _ln(add(x, la), params, "lnL.cross")
        x = _ln(add(x, mlp_forward(x, params, "ffnL")), params, "lnL.ffn")
        head = mlp_forward(x, params, "headL")
        layers.append(_decode_head(head, candidates.positions, bins, layout))
    return DetectionResult(candidate_positions=candidates.positions.copy(), layers=layers)


def detector_forward(raw: PointCloud, params: ParamBlock, cfg: DetectorConfig,
                     bins: BinConfig, local_seed: int = 0,
                     recorders: Optional[Dict[object, WeightRecorder]] = None,
                     rng: Optional[np.random.Generator] = None) -> DetectionResult:
    start = int(rng.integers(raw.count)) if (cfg.fps_random_start and rng is not None) else 0
    features = backbone_forward(raw, params, cfg, start_index=start)
    candidates = sample_candidates(features, cfg.candidates)
    return decoder_forward(candidates, features, raw, params, cfg, bins,
                           local_seed=local_seed, recorders=recorders)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def match_candidates(positions: np.ndarray, sample: SceneSample,
                     radius: float) -> np.ndarray:
    """Per-candidate ground-truth assignment: index of the nearest GT center
    within the radius, else -1."""
    m = positions.shape[0]
    out = np.full(m, -1, dtype=np.intp)
    if not sample.boxes:
        return out
    centers = np.array([b.center for b in sample.boxes])
    d = np.sqrt(((positions[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    nearest = np.argmin(d, axis=1)
    hit = d[np.arange(m), nearest] <= radius
    out[hit] = nearest[hit]
    return out


def _cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -log softmax probability at the target index."""
    n, c = logits.data.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), targets] = 1.0
    picked = mul(log_softmax(logits, axis=-1), onehot)
    return scale(reduce_sum(picked), -1.0 / n)


def compute_loss(result: DetectionResult, sample: SceneSample, bins: BinConfig,
                 cfg: DetectorConfig) -> Tuple[Tensor, Dict[str, float]]:
    """Deep-supervised detection loss summed over all prediction layers."""
    layout = HeadLayout(bins.num_size_bins, cfg.heading_bins)
    positions = result.candidate_positions
    m = positions.shape[0]
    assign = match_candidates(positions, sample, cfg.match_radius)
    pos_idx = np.flatnonzero(assign >= 0)
    n_pos = len(pos_idx)

    if n_pos:
        encodings = [encode_box(sample.boxes[assign[i]].to_proposal(bins.num_size_bins),
                                positions[i], bins) for i in pos_idx]
        t_center = np.stack([e.center_offset for e in encodings])
        t_size_bin = np.array([e.size_bin for e in encodings])
        t_size_res = np.stack([e.size_residual for e in encodings])
        t_head_bin = np.array([e.heading_bin for e in encodings])
        t_head_res = np.array([[e.heading_residual] for e in encodings])
        t_class = np.array([sample.boxes[assign[i]].class_id for i in pos_idx])
    obj_target = (assign >= 0).astype(np.float64)[:, None]

    total: Optional[Tensor] = None
    breakdown: Dict[str, float] = {}

    def accumulate(term: Tensor, name: str, weight: float):
        nonlocal total
        weighted = scale(term, weight)
        breakdown[name] = breakdown.get(name, 0.0) + weighted.item()
        total = weighted if total is None else add(total, weighted)

    for li, layer in enumerate(result.layers):
        head = layer.head
        obj_logits = slice_axis(head, 1, *layout.obj)
        obj_term = scale(reduce_sum(bce_with_logits(obj_logits, obj_target)), 1.0 / m)
        accumulate(obj_term, "objectness", LOSS_WEIGHTS["objectness"])
        if n_pos == 0:
            continue
        rows = take_rows(head, pos_idx)
        inv = 1.0 / n_pos
        center = slice_axis(rows, 1, *layout.center)
        accumulate(scale(reduce_sum(smooth_l1(center, t_center, beta=0.5)), inv),
                   "center", LOSS_WEIGHTS["center"])
        accumulate(_cross_entropy_rows(slice_axis(rows, 1, *layout.size_bin), t_size_bin),
                   "size_bin", LOSS_WEIGHTS["size_bin"])
        accumulate(scale(reduce_sum(smooth_l1(slice_axis(rows, 1, *layout.size_res),
                                              t_size_res, beta=0.5)), inv),
                   "size_res", LOSS_WEIGHTS["size_res"])
        accumulate(_cross_entropy_rows(slice_axis(rows, 1, *layout.heading_bin), t_head_bin),
                   "heading_bin", LOSS_WEIGHTS["heading_bin"])
        accumulate(scale(reduce_sum(smooth_l1(slice_axis(rows, 1, *layout.heading_res),
                                              t_head_res, beta=0.5)), inv),
                   "heading_res", LOSS_WEIGHTS["heading_res"])
        accumulate(_cross_entropy_rows(slice_axis(rows, 1, *layout.cls), t_class),
                   "class", LOSS_WEIGHTS["class"])
    breakdown["total"] = total.item()
    breakdown["matched"] = float(n_pos)
    return total, breakdown


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

def train(dataset: Sequence[SceneSample], cfg: DetectorConfig, bins: BinConfig,
          params: Optional[ParamBlock] = None, log_path=None):
    """Seeded training loop; returns (params, per-iteration log records)."""
    if not dataset:
        raise ValueError("empty dataset")
    if params is None:
        params = build_detector_params(cfg, bins.num_size_bins)
    opt = Adam(params, lr=cfg.learning_rate) if cfg.optimizer == "adam" \
        else SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    log: List[dict] = []
    for it in range(cfg.iterations):
        sample = dataset[it % len(dataset)]
        tape = Tape()
        params.watch_all(tape)
        result = detector_forward(sample.cloud, params, cfg, bins,
                                  local_seed=cfg.seed * 1_000_003 + it, rng=rng)
        loss, breakdown = compute_loss(result, sample, bins, cfg)
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite loss at iteration {it}")
        tape.backward(loss)
        opt.step()
        log.append({"iteration": it, **{k: round(v, 10) for k, v in breakdown.items()}})
    if log_path is not None:
        with open(log_path, "w") as f:
            for rec in log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return params, log


def nms_records(records: List[BoxRecord], iou_threshold: float) -> List[BoxRecord]:
    """Class-wise greedy suppression by descending score."""
    kept: List[BoxRecord] = []
    order = sorted(range(len(records)), key=lambda i: -records[i].score)
    for i in order:
        r = records[i]
        p = r.to_proposal(1)
        conflict = any(k.class_id == r.class_id and
                       iou_3d_axis_aligned(p, k.to_proposal(1)) > iou_threshold
                       for k in kept)
        if not conflict:
            kept.append(r)
    return kept


def infer(sample: SceneSample, params: ParamBlock, cfg: DetectorConfig,
          bins: BinConfig,
          recorders: Optional[Dict[object, WeightRecorder]] = None):
    """Forward a scene and return (DetectionResult, post-NMS box records)."""
    result = detector_forward(sample.cloud, params, cfg, bins,
                              local_seed=cfg.seed, recorders=recorders)
    final = result.final
    records = []
    for i, prop in enumerate(final.proposals):
        cls = int(np.argmax(prop.scores))
        score = float(final.objectness[i] * prop.scores[cls])
        records.append(BoxRecord(class_id=cls, score=score,
                                 center=tuple(prop.center), size=tuple(prop.size),
                                 heading=prop.heading))
    return result, nms_records(records, cfg.nms_iou)


# ---------------------------------------------------------------------------
# key=value config files (section-prefixed keys)
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "backbone.points": ("backbone_points", int),
    "backbone.stage1_points": ("stage1_points", int),
    "backbone.radius1": ("sa_radius1", float),
    "backbone.radius2": ("sa_radius2", float),
    "backbone.group1": ("sa_group1", int),
    "backbone.group2": ("sa_group2", int),
    "model.dim": ("model_dim", int),
    "model.heads": ("heads", int),
    "model.ffn_dim": ("ffn_dim", int),
    "decoder.layers": ("layers", int),
    "decoder.candidates": ("candidates", int),
    "decoder.msa_layers": ("msa_layers", "int_tuple"),
    "decoder.use_local_attn": ("use_local_attn", "bool"),
    "decoder.n_local": ("n_local", int),
    "decoder.scales": ("scales", "float_tuple"),
    "boxes.heading_bins": ("heading_bins", int),
    "loss.match_radius": ("match_radius", float),
    "infer.nms_iou": ("nms_iou", float),
    "train.seed": ("seed", int),
    "train.iterations": ("iterations", int),
    "train.learning_rate": ("learning_rate", float),
    "train.optimizer": ("optimizer", str),
    "train.momentum": ("momentum", float),
    "geometry.fps_random_start": ("fps_random_start", "bool"),
}


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int_tuple":
        return tuple(int(v) for v in raw.split(",") if v.strip() != "") if raw else ()
    if kind == "float_tuple":
        return tuple(float(v) for v in raw.split(",") if v.strip() != "") if raw else ()
    raise ValueError(f"unhandled kind {kind}")


def parse_config_text(text: str, base: Optional[DetectorConfig] = None) -> DetectorConfig:
    """Parse "section.key=value" lines ('#' starts a comment) into a config."""
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        name, kind = _CONFIG_KEYS[key]
        overrides[name] = _parse_value(raw, kind)
    return replace(base or DetectorConfig(), **overrides)


def load_config(path, base: Optional[DetectorConfig] = None) -> DetectorConfig:
    return parse_config_text(Path(path).read_text(), base=base)
