"""Detection head: per-group query attention, trajectory box embedding,
confidence + box-residual regression, the combined loss with intermediate
supervision, and desk-scale evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Box7, iou_3d, normalize_heading, to_local, to_world
from .nn import MLP, LayerNorm, Module, MultiHeadAttention, Parameter, Tensor, concat
from .nn.modules import kaiming_uniform
from .trajseq import ProposalTrajectory

__all__ = [
    "Detection",
    "Prediction",
    "BatchPrediction",
    "LossReport",
    "compute_loss_batch",
    "EvalReport",
    "encode_box_residual",
    "decode_box_residual",
    "confidence_target",
    "DetectionHead",
    "compute_loss",
    "evaluate",
    "average_precision",
]


@dataclass(frozen=True)
class Detection:
    box: Box7
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass
class Prediction:
    """One head output: raw confidence logit and regression tensor (kept for
    backprop) plus the decoded detection."""

    conf_logit: Tensor          # (1, 1)
    regression: Tensor          # (1, 8)
    detection: Detection
    anchor: Box7


@dataclass
class BatchPrediction:
    """One head output for a whole batch of trajectories."""

    conf_logit: Tensor          # (B, 1)
    regression: Tensor          # (B, 8)
    detections: list[Detection]
    anchors: list[Box7]


def encode_box_residual(target: Box7, anchor: Box7) -> np.ndarray:
    """8-dim residual of ``target`` against ``anchor``: center offset in the
    anchor's local frame normalized by its diagonal, log size ratios, and the
    heading difference as a (sin, cos) pair."""
    offset = to_local(target.center, anchor)[0] / anchor.diagonal
    log_ratio = np.log(target.size / anchor.size)
    dh = normalize_heading(target.heading - anchor.heading)
    return np.concatenate([offset, log_ratio, [math.sin(dh), math.cos(dh)]])


def decode_box_residual(residual: np.ndarray, anchor: Box7) -> Box7:
    """Inverse of :func:`encode_box_residual`; the all-zero residual decodes
    to the anchor itself."""
    residual = np.asarray(residual, dtype=float).reshape(8)
    center = to_world(residual[:3] * anchor.diagonal, anchor)[0]
    # clamp keeps decoded boxes valid while the regression branch is still
    # far from converged; |log ratio| stays well under 4 for real residuals
    size = anchor.size * np.exp(np.clip(residual[3:6], -4.0, 4.0))
    heading = anchor.heading + math.atan2(residual[6], residual[7])
    return Box7(center[0], center[1], center[2], size[0], size[1], size[2], heading)


def confidence_target(iou: float, lo: float = 0.25, hi: float = 0.75) -> float:
    """IoU-derived soft confidence target, linear between the thresholds."""
    return float(np.clip((iou - lo) / (hi - lo), 0.0, 1.0))


class DetectionHead(Module):
    """Shared across all intermediate hierarchy outputs."""

    def __init__(self, dim: int, S: int, heads: int = 4, seed: int = 0,
                 name: str = "head"):
        self.dim = dim
        self.S = S
        self.query = Parameter(kaiming_uniform((1, dim), dim, name + ".query", seed),
                               name + ".query")
        self.group_attn = MultiHeadAttention(dim, heads, name + ".group_attn", seed)
        self.box_mlp = MLP([8, dim, dim], name + ".box_mlp", seed)
        # hierarchy features arrive unnormalized; keep the branch inputs tame
        self.fused_norm = LayerNorm(S * dim + dim, name + ".fused_norm")
        self.conf_mlp = MLP([S * dim + dim, dim, 1], name + ".conf", seed)
        # zero-init of the last regression layer makes the refined box start
        # exactly at the first-stage box
        self.reg_mlp = MLP([S * dim + dim, dim, 8], name + ".reg", seed,
                           zero_init_last=True)

    def group_query(self, group: Tensor, pe: Tensor) -> Tensor:
        """Single learnable query attending over the group's proxy features;
        PE on keys only."""
        return self.group_attn(self.query, group + pe, group)

    @staticmethod
    def _box_tokens(traj: ProposalTrajectory, dt: float) -> np.ndarray:
        """(T, 8) trajectory box tokens: 7-dim geometry relative to the
        latest box plus a time channel."""
        anchor = traj.latest_box
        tokens = np.empty((traj.T, 8))
        for t, box in enumerate(traj.boxes):
            tokens[t, :3] = to_local(box.center, anchor)[0]
            tokens[t, 3:6] = np.log(box.size / anchor.size)
            tokens[t, 6] = normalize_heading(box.heading - anchor.heading)
            tokens[t, 7] = (traj.T - 1 - t) * dt
        return tokens

    def embed_boxes(self, traj: ProposalTrajectory, dt: float) -> Tensor:
        """Trajectory box embedding: the box tokens run through a shared MLP
        and max-pooled over frames."""
        per_token = self.box_mlp(Tensor(self._box_tokens(traj, dt)))   # (T, D)
        return per_token.max(axis=0).reshape(1, self.dim)

    def embed_boxes_batch(self, trajs: list[ProposalTrajectory], dt: float) -> Tensor:
        """(B, D) box embeddings for a batch of same-length trajectories."""
        tokens = np.stack([self._box_tokens(traj, dt) for traj in trajs])
        return self.box_mlp(Tensor(tokens)).max(axis=1)                # (B, D)

    def predict(self, group_feats: list[Tensor], pe: Tensor, box_emb: Tensor,
                latest_box: Box7) -> Prediction:
        if len(group_feats) != self.S:
            raise ValueError(f"expected {self.S} group features, got {len(group_feats)}")
        group_vecs = [self.group_query(g, pe) for g in group_feats]
        fused = self.fused_norm(concat(group_vecs + [box_emb], axis=1))  # (1, S*D + D)
        conf_logit = self.conf_mlp(fused)
        regression = self.reg_mlp(fused)
        box = decode_box_residual(regression.data[0], latest_box)
        logit = np.clip(conf_logit.data[0, 0], -500, 500)
        confidence = float(1.0 / (1.0 + np.exp(-logit)))
        return Prediction(conf_logit, regression, Detection(box, confidence), latest_box)

    def predict_batch(self, group_feats: Tensor, pe: Tensor, box_emb: Tensor,
                      anchors: list[Box7]) -> "BatchPrediction":
        """Batched head pass: ``group_feats`` is (B, S, N, D), ``box_emb``
        (B, D); one detection per trajectory in the batch."""
        B, S, N, D = group_feats.shape
        if S != self.S:
            raise ValueError(f"expected {self.S} groups, got {S}")
        # broadcast the learnable query over batch and groups
        query = self.query.reshape(1, 1, 1, D) + Tensor(np.zeros((B, S, 1, D)))
        vecs = self.group_attn(query, group_feats + pe, group_feats)  # (B, S, 1, D)
        fused = self.fused_norm(concat([vecs.reshape(B, S * D), box_emb], axis=1))
        conf_logit = self.conf_mlp(fused)       # (B, 1)
        regression = self.reg_mlp(fused)        # (B, 8)
        detections = []
        for i, anchor in enumerate(anchors):
            box = decode_box_residual(regression.data[i], anchor)
            logit = np.clip(conf_logit.data[i, 0], -500, 500)
            detections.append(Detection(box, float(1.0 / (1.0 + np.exp(-logit)))))
        return BatchPrediction(conf_logit, regression, detections, list(anchors))


@dataclass
class LossReport:
    conf_loss: float
    reg_loss: float
    alpha: float
    total: float
    per_output: list[tuple[float, float]] = field(default_factory=list)
    total_tensor: Tensor | None = None

    def backward(self):
        if self.total_tensor is None:
            raise ValueError("loss graph not retained")
        self.total_tensor.backward()


def compute_loss(preds: list[Prediction], gt_box: Box7, alpha: float = 2.0) -> LossReport:
    """Confidence BCE against the IoU-derived soft target plus smooth-L1 box
    regression, summed over all intermediate outputs."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not preds:
        raise ValueError("need at least one prediction")
    conf_parts = []
    reg_parts = []
    per_output = []
    for pred in preds:
        c_star = confidence_target(iou_3d(pred.anchor, gt_box))
        z = pred.conf_logit.reshape(1)
        # BCE with logits: softplus(z) - c* z
        conf = (z.softplus() - z * c_star).sum()
        conf_parts.append(conf)
        if c_star > 0:
            target = encode_box_residual(gt_box, pred.anchor)
            reg = (pred.regression.reshape(8) - Tensor(target)).smooth_l1().sum()
        else:
            reg = Tensor(0.0)
        reg_parts.append(reg)
        per_output.append((float(conf.data), float(reg.data)))
    conf_total = conf_parts[0]
    reg_total = reg_parts[0]
    for c in conf_parts[1:]:
        conf_total = conf_total + c
    for r in reg_parts[1:]:
        reg_total = reg_total + r
    total = conf_total + reg_total * alpha
    return LossReport(conf_loss=float(conf_total.data), reg_loss=float(reg_total.data),
                      alpha=alpha, total=float(total.data), per_output=per_output,
                      total_tensor=total)


def compute_loss_batch(preds: list[BatchPrediction], gt_boxes: list[Box7],
                       alpha: float = 2.0) -> LossReport:
    """Batched :func:`compute_loss`: the reported values and the loss tensor
    are the per-trajectory losses summed over the batch."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if not preds:
        raise ValueError("need at least one prediction")
    B = len(gt_boxes)
    conf_total = reg_total = None
    per_output = []
    for bp in preds:
        c_star = np.array([confidence_target(iou_3d(a, gt))
                           for a, gt in zip(bp.anchors, gt_boxes)])
        z = bp.conf_logit.reshape(B)
        conf = (z.softplus() - z * Tensor(c_star)).sum()
        targets = np.zeros((B, 8))
        mask = c_star > 0
        for i in np.flatnonzero(mask):
            targets[i] = encode_box_residual(gt_boxes[i], bp.anchors[i])
        diffs = (bp.regression - Tensor(targets)).smooth_l1()
        reg = (diffs * Tensor(mask[:, None].astype(np.float64))).sum()
        per_output.append((float(conf.data), float(reg.data)))
        conf_total = conf if conf_total is None else conf_total + conf
        reg_total = reg if reg_total is None else reg_total + reg
    total = conf_total + reg_total * alpha
    return LossReport(conf_loss=float(conf_total.data), reg_loss=float(reg_total.data),
                      alpha=alpha, total=float(total.data), per_output=per_output,
                      total_tensor=total)


@dataclass
class EvalReport:
    mean_iou_before: float
    mean_iou_after: float
    ap: float | None
    n_detections: int
    n_gt: int

    @property
    def delta(self) -> float:
        return self.mean_iou_after - self.mean_iou_before


def average_precision(detections: list[Detection], gt_boxes: list[Box7],
                      iou_thresh: float) -> float | None:
    """AP by confidence-ranked greedy matching and trapezoidal integration of
    the precision-recall curve. None when there is no ground truth."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must be in (0, 1)")
    if not gt_boxes:
        return None
    if not detections:
        return 0.0
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    matched = [False] * len(gt_boxes)
    tp = np.zeros(len(detections))
    for rank, i in enumerate(order):
        best_j, best_iou = -1, iou_thresh
        for j, gt in enumerate(gt_boxes):
            if matched[j]:
                continue
            iou = iou_3d(detections[i].box, gt)
            if iou >= best_iou:
                best_j, best_iou = j, iou
        if best_j >= 0:
            matched[best_j] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / (np.arange(len(detections)) + 1)
    recall = cum_tp / len(gt_boxes)
    # trapezoidal integration over recall, anchored at recall 0
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[precision[0] if len(precision) else 0.0], precision])
    return float(np.trapezoid(p, r))


def evaluate(detections: list[Detection], proposal_boxes: list[Box7],
             gt_boxes: list[Box7], iou_thresh: float = 0.5) -> EvalReport:
    """Mean refined IoU vs GT, mean first-stage IoU vs GT, and AP.

    ``detections[i]`` refines ``proposal_boxes[i]``; each pair is scored
    against the GT box its proposal overlaps most.
    """
    if len(detections) != len(proposal_boxes):
        raise ValueError("detections and proposal_boxes must align")
    before, after = [], []
    for det, prop in zip(detections, proposal_boxes):
        if not gt_boxes:
            break
        ious = [iou_3d(prop, gt) for gt in gt_boxes]
        j = int(np.argmax(ious))
        before.append(ious[j])
        after.append(iou_3d(det.box, gt_boxes[j]))
    return EvalReport(
        mean_iou_before=float(np.mean(before)) if before else 0.0,
        mean_iou_after=float(np.mean(after)) if after else 0.0,
        ap=average_precision(detections, gt_boxes, iou_thresh),
        n_detections=len(detections),
        n_gt=len(gt_boxes),
    )
