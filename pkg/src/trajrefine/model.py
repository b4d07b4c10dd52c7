"""Full second-stage model: per-frame encoding, temporal hierarchy and the
detection head, plus the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .encode import FrameEncoder, make_proxy_grid
from .geom import Box7
from .head import (BatchPrediction, DetectionHead, Prediction, compute_loss,
                   compute_loss_batch, evaluate, EvalReport)
from .nn import Adam, Module
from .temporal import GroupSpec, TemporalHierarchy, make_groups
from .trajseq import ProposalTrajectory

__all__ = ["ModelConfig", "TrajectoryRefiner", "TrainRecord", "train_model",
           "evaluate_model"]


@dataclass(frozen=True)
class ModelConfig:
    T: int = 8
    n: int = 4                  # proxy grid resolution; N = n^3
    dim: int = 64
    S: int = 4
    grouping: str = "strided"
    depth: int = 2
    heads: int = 4
    nsample: int = 32
    use_attention: bool = True
    dt: float = 0.1
    alpha: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.T % self.S != 0:
            raise ValueError(f"S={self.S} must divide T={self.T}")


class TrajectoryRefiner(Module):
    """Refines one proposal trajectory into a confidence + 3D box."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.encoder = FrameEncoder(n=cfg.n, dim=cfg.dim, nsample=cfg.nsample,
                                    seed=cfg.seed)
        self.groups: GroupSpec = make_groups(cfg.T, cfg.S, cfg.grouping)
        self.hierarchy = TemporalHierarchy(cfg.n, cfg.dim, self.groups.T_prime,
                                           cfg.S, depth=cfg.depth, heads=cfg.heads,
                                           use_attention=cfg.use_attention,
                                           seed=cfg.seed)
        self.head = DetectionHead(cfg.dim, cfg.S, heads=cfg.heads, seed=cfg.seed)

    def forward_batch(self, trajs: list[ProposalTrajectory]) -> list[BatchPrediction]:
        """One batched prediction per intermediate hierarchy output; the last
        one is the model's answer at inference time."""
        cfg = self.cfg
        for traj in trajs:
            if traj.T != cfg.T:
                raise ValueError(f"trajectory length {traj.T} != model T {cfg.T}")
        stacked = self.encoder.encode_batch(trajs, cfg.dt)
        # any box's grid works for the PE: it depends only on the indices
        grid = make_proxy_grid(trajs[0].latest_box, cfg.n)
        intermediates = self.hierarchy.run_batch(stacked, self.groups, grid)
        pe = self.hierarchy.index_pe(grid)
        box_emb = self.head.embed_boxes_batch(trajs, cfg.dt)
        anchors = [traj.latest_box for traj in trajs]
        return [self.head.predict_batch(g, pe, box_emb, anchors)
                for g in intermediates]

    def forward(self, traj: ProposalTrajectory) -> list[Prediction]:
        """Single-trajectory wrapper around :meth:`forward_batch`."""
        return [Prediction(bp.conf_logit, bp.regression, bp.detections[0],
                           bp.anchors[0])
                for bp in self.forward_batch([traj])]

    def refine(self, traj: ProposalTrajectory):
        """Inference: the detection from the last intermediate output."""
        return self.forward(traj)[-1].detection


def _clip_grad_norm(params, max_norm: float):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale


@dataclass
class TrainRecord:
    step: int
    loss: float
    conf_loss: float
    reg_loss: float
    elapsed: float


def train_model(model: TrajectoryRefiner,
                trajectories: list[ProposalTrajectory],
                gt_boxes: list[Box7],
                steps: int = 500,
                batch_size: int = 4,
                lr: float = 1e-3,
                seed: int = 0,
                log_every: int = 50,
                optimizer: Adam | None = None,
                start_step: int = 0,
                grad_clip: float = 10.0,
                total_steps: int | None = None,
                min_lr_frac: float = 0.03,
                callback=None) -> list[TrainRecord]:
    """Adam training with mini-batch gradient averaging; ``gt_boxes[i]``
    supervises ``trajectories[i]``.

    The batch for step k is drawn from a fresh RNG seeded with (seed, k), so
    a resumed run (``start_step`` > 0) sees the same batches it would have
    seen uninterrupted. The learning rate follows cosine decay from ``lr``
    to ``min_lr_frac * lr`` over ``total_steps`` (default: this call's
    steps); without the decay the regression output jitters at a noise floor
    proportional to the learning rate, which caps box-accuracy gains.
    """
    if len(trajectories) != len(gt_boxes):
        raise ValueError("trajectories and gt_boxes must align")
    if not trajectories:
        raise ValueError("empty training set")
    opt = optimizer or Adam(model.parameters(), lr=lr)
    horizon = total_steps if total_steps is not None else start_step + steps
    records = []
    start = time.monotonic()
    for step in range(start_step, start_step + steps):
        frac = min(step / max(horizon - 1, 1), 1.0)
        opt.lr = lr * (min_lr_frac + (1.0 - min_lr_frac)
                       * 0.5 * (1.0 + np.cos(np.pi * frac)))
        rng = np.random.default_rng((seed, step))
        batch = rng.choice(len(trajectories), size=min(batch_size, len(trajectories)),
                           replace=False)
        opt.zero_grad()
        preds = model.forward_batch([trajectories[i] for i in batch])
        report = compute_loss_batch(preds, [gt_boxes[i] for i in batch],
                                    alpha=model.cfg.alpha)
        if not np.isfinite(report.total):
            raise FloatingPointError(f"non-finite loss at step {step}")
        (report.total_tensor * (1.0 / len(batch))).backward()
        if grad_clip > 0:
            _clip_grad_norm(opt.params, grad_clip)
        opt.step()
        rec = TrainRecord(step=step, loss=report.total / len(batch),
                          conf_loss=report.conf_loss / len(batch),
                          reg_loss=report.reg_loss / len(batch),
                          elapsed=time.monotonic() - start)
        if step % log_every == 0 or step == start_step + steps - 1:
            records.append(rec)
        if callback is not None and callback(rec) is False:
            records.append(rec)
            break
    return records


def evaluate_model(model: TrajectoryRefiner,
                   trajectories: list[ProposalTrajectory],
                   gt_boxes: list[Box7],
                   iou_thresh: float = 0.5,
                   chunk: int = 16) -> EvalReport:
    detections = []
    for lo in range(0, len(trajectories), chunk):
        detections.extend(model.forward_batch(trajectories[lo:lo + chunk])[-1].detections)
    proposals = [traj.latest_box for traj in trajectories]
    return evaluate(detections, proposals, gt_boxes, iou_thresh)
