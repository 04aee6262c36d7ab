"""
Zoom-in boundary detection: per-layer anchor heads (stage 1) followed by
ROI-based refinement of the top-N candidates (stage 2).
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from errors import ConfigurationError, ContractError, DimensionError, NumericError
from model import DetectionHeads, GroundingModel, LayerOutputs, RadiusSchedule
from numerics import Tensor

logger = logging.getLogger(__name__)

Span = Tuple[float, float]


@dataclass(frozen=True)
class Anchor:
    t: int
    w_h: int
    scale_index: int
    layer_index: int

    @property
    def span(self) -> Span:
        return (self.t - self.w_h, self.t + self.w_h)

    def clipped(self, T) -> Span:
        return (max(0, self.t - self.w_h), min(T - 1, self.t + self.w_h))


@dataclass
class Proposal:
    start: float
    end: float
    score: float
    anchor: Optional[Anchor] = None
    stage: int = 1
    layer_index: Optional[int] = None
    position: Optional[int] = None  # row in its layer's stage-1 output

    @property
    def span(self) -> Span:
        return (self.start, self.end)

    @property
    def scale_index(self):
        return self.anchor.scale_index if self.anchor is not None else None


@dataclass
class RoiFeature:
    vector: Tensor

    def __post_init__(self):
        if self.vector.ndim != 1 or self.vector.shape[0] % 6:
            raise DimensionError(f"ROI feature must be a 6D-wide vector, got shape {self.vector.shape}")


@dataclass
class ZoomInConfig:
    N: int = 16
    N_pos: int = 4
    enabled: bool = True

    def __post_init__(self):
        if self.N < 1 or not 0 <= self.N_pos <= self.N:
            raise ConfigurationError(f"need N >= 1 and 0 <= N_pos <= N, got N={self.N}, N_pos={self.N_pos}")


# --- Anchors and overlap ---

def generate_anchors(T: int, schedule: RadiusSchedule) -> List[Anchor]:
    scales = schedule.scales
    return [Anchor(t, w, h, schedule.owning_layer(w))
            for t in range(T) for h, w in enumerate(scales)]


def _canonical(spans: Tensor) -> Tensor:
    """Orders each (start, end) row so start <= end."""
    starts, ends = nx.take(spans, [0], axis=1), nx.take(spans, [1], axis=1)
    return nx.concat([nx.minimum(starts, ends), nx.maximum(starts, ends)], axis=1)


def iou(a: Span, b: Span) -> float:
    if a[0] > a[1] or b[0] > b[1]:
        raise ContractError(f"iou needs canonical intervals, got {a} and {b}")
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def batch_iou(spans: np.ndarray, gt: Span) -> np.ndarray:
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(spans[:, 1], gt[1]) - np.maximum(spans[:, 0], gt[0]), 0.0, None)
    union = (spans[:, 1] - spans[:, 0]) + (gt[1] - gt[0]) - inter
    out = np.zeros(len(spans))
    np.divide(inter, union, out=out, where=union > 0)
    return out


# --- Stage 1 ---

@dataclass
class Stage1Output:
    layer: int
    anchors: List[Anchor]
    scores: Tensor  # (T*H_j,)
    spans: Tensor   # (T*H_j, 2)

    def proposals(self) -> List[Proposal]:
        scores, spans = self.scores.data, self.spans.data
        return [Proposal(float(spans[i, 0]), float(spans[i, 1]), float(scores[i]), a, 1, self.layer, i)
                for i, a in enumerate(self.anchors)]


def stage1_heads(V_hat_j: Tensor, layer: int, schedule: RadiusSchedule, heads: DetectionHeads) -> Stage1Output:
    T = V_hat_j.shape[0]
    scales = schedule.scales
    owned = [scales.index(s) for s in schedule.owned_scales(layer)]
    anchors = [Anchor(t, scales[h], h, layer) for t in range(T) for h in owned]

    logits = nx.take(heads.cls(V_hat_j), owned, axis=1)
    scores = nx.sigmoid(nx.reshape(logits, (T * len(owned),)))

    reg_cols = [c for h in owned for c in (2 * h, 2 * h + 1)]
    offsets = nx.reshape(nx.take(heads.reg(V_hat_j), reg_cols, axis=1), (T * len(owned), 2))
    raw = np.array([a.span for a in anchors], dtype=np.float64)
    moved = nx.clip(offsets + raw, 0.0, T - 1.0)
    return Stage1Output(layer, anchors, scores, _canonical(moved))


def select_top_n(proposals: Sequence[Proposal], N: int) -> List[Proposal]:
    if N < 1:
        raise ContractError(f"top-N needs N >= 1, got {N}")

    def key(p):
        scale = p.scale_index if p.scale_index is not None else float("inf")
        return (-p.score, p.start, scale)

    return sorted(proposals, key=key)[:N]


# --- Stage 2 ---

def _round_half_up(x):
    return int(np.floor(x + 0.5))


def roi_positions(start: float, end: float, T: int) -> List[int]:
    if not (np.isfinite(start) and np.isfinite(end)):
        raise NumericError(f"non-finite proposal span ({start}, {end})")
    return [min(T - 1, max(0, _round_half_up(x))) for x in (start, (start + end) / 2.0, end)]


def roi_layer(p: Proposal, schedule: RadiusSchedule) -> int:
    if p.anchor is not None:
        return p.anchor.layer_index
    if p.layer_index is not None:
        return p.layer_index
    return schedule.layer_for_length((p.end - p.start) / 2.0)


def roi_sample(p: Proposal, layer_outputs: Sequence[LayerOutputs], schedule: RadiusSchedule) -> RoiFeature:
    V_hat = layer_outputs[roi_layer(p, schedule)].V_hat
    rows = nx.take(V_hat, roi_positions(p.start, p.end, V_hat.shape[0]))
    return RoiFeature(nx.reshape(rows, (rows.size,)))


def roi_batch(proposals: Sequence[Proposal], layer_outputs: Sequence[LayerOutputs],
              schedule: RadiusSchedule) -> Tensor:
    """(N, 6D) matrix of ROI features in proposal order."""
    T = layer_outputs[0].V_hat.shape[0]
    stacked = nx.concat([out.V_hat for out in layer_outputs], axis=0)
    rows = [roi_layer(p, schedule) * T + pos
            for p in proposals for pos in roi_positions(p.start, p.end, T)]
    sampled = nx.take(stacked, rows)
    return nx.reshape(sampled, (len(proposals), 3 * stacked.shape[1]))


@dataclass
class Stage2Output:
    candidates: List[Proposal]
    scores: Tensor  # (N,)
    spans: Tensor   # (N, 2), clipped and canonical
    proposals: List[Proposal] = field(default_factory=list)


def stage2_refine(rois: Tensor, candidates: Sequence[Proposal], heads: DetectionHeads, T: int) -> Stage2Output:
    n = len(candidates)
    scores = nx.sigmoid(nx.reshape(heads.refine_cls(rois), (n,)))
    base = np.array([p.span for p in candidates], dtype=np.float64)
    spans = _canonical(nx.clip(heads.refine_reg(rois) + base, 0.0, T - 1.0))

    refined = [Proposal(float(spans.data[i, 0]), float(spans.data[i, 1]), float(scores.data[i]),
                        c.anchor, 2, c.layer_index, i)
               for i, c in enumerate(candidates)]
    ranked = sorted(refined, key=lambda p: (-p.score, p.start, p.position))
    return Stage2Output(list(candidates), scores, spans, ranked)


# --- End-to-end grounding pass ---

@dataclass
class GroundingOutput:
    layer_outputs: List[LayerOutputs]
    stage1: List[Stage1Output]
    stage2: Optional[Stage2Output]
    candidates: List[Proposal]

    @property
    def proposals(self) -> List[Proposal]:
        return self.stage2.proposals if self.stage2 is not None else self.candidates


def ground(model: GroundingModel, features, token_ids, zoom: ZoomInConfig,
           augment: Optional[Callable[[List[Proposal]], List[Proposal]]] = None,
           candidates: Optional[List[Proposal]] = None, rng=None) -> GroundingOutput:
    """
    Runs encoders, the alignment stack and both detection stages.

    `augment` extends the top-N list (positive injection during training).
    Passing `candidates` replays a previously selected stage-2 input instead of
    selecting again, which freezes the discrete choices of the pass.
    """
    layer_outputs = model.forward(features, token_ids, rng=rng)
    schedule = model.schedule
    stage1 = [stage1_heads(layer_outputs[j].V_hat, j, schedule, model.heads)
              for j in schedule.detection_layers()]

    if candidates is None:
        pool = [p for out in stage1 for p in out.proposals()]
        candidates = select_top_n(pool, zoom.N)
        if augment is not None:
            candidates = augment(candidates)

    stage2 = None
    if zoom.enabled and candidates:
        T = layer_outputs[0].V.shape[0]
        rois = roi_batch(candidates, layer_outputs, schedule)
        stage2 = stage2_refine(rois, candidates, model.heads, T)
    return GroundingOutput(layer_outputs, stage1, stage2, list(candidates))
