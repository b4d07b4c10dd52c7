"""Proposal trajectories: speed-propagated IoU association across frames and
region pooling of per-frame object points."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Box7, iou_3d, points_in_box
from .synth import Frame, NoisyProposal

__all__ = [
    "PooledPoints",
    "ProposalTrajectory",
    "associate",
    "pool_points",
    "build_trajectories",
    "DEFAULT_POOL_MARGIN",
]

# the pooling margin keeps context points for slightly under-sized proposals
DEFAULT_POOL_MARGIN = 0.5


@dataclass
class PooledPoints:
    points: np.ndarray          # (count, 3) world positions, or the sentinel
    count: int                  # 0 means the sentinel center point only

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))


@dataclass
class ProposalTrajectory:
    """Per-object T-frame box sequence, ordered oldest -> latest.

    Frames where association failed are filled by speed propagation and
    flagged false in ``valid_mask``; the latest frame is always valid.
    """

    boxes: list[Box7]
    scores: np.ndarray
    valid_mask: np.ndarray
    speeds: np.ndarray                                # (T, 2) speeds used for propagation
    pooled: list[PooledPoints] | None = None

    def __post_init__(self):
        T = len(self.boxes)
        if T < 1:
            raise ValueError("trajectory needs at least one frame")
        self.scores = np.asarray(self.scores, dtype=float).reshape(T)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool).reshape(T)
        self.speeds = np.asarray(self.speeds, dtype=float).reshape(T, 2)
        if not self.valid_mask[-1]:
            raise ValueError("latest frame of a trajectory must be valid")

    @property
    def T(self) -> int:
        return len(self.boxes)

    @property
    def latest_box(self) -> Box7:
        return self.boxes[-1]


def _propagate_back(box: Box7, speed: np.ndarray, dt: float) -> Box7:
    return box.translated(-speed[0] * dt, -speed[1] * dt)


def associate(per_frame_proposals: list[list[NoisyProposal]], iou_thresh: float,
              dt: float) -> list[ProposalTrajectory]:
    """Link per-frame proposals into trajectories, latest frame backward.

    Latest-frame proposals are processed in descending score order; each is
    propagated back by -predicted_speed*dt and greedily matched to the
    unclaimed proposal of highest IoU >= threshold. A missed frame keeps the
    propagated box with valid_mask False and score 0.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must be in (0, 1)")
    T = len(per_frame_proposals)
    if T == 0 or not per_frame_proposals[-1]:
        return []
    claimed: list[set[int]] = [set() for _ in range(T)]
    latest_order = sorted(range(len(per_frame_proposals[-1])),
                          key=lambda i: -per_frame_proposals[-1][i].score)
    trajectories = []
    for li in latest_order:
        start = per_frame_proposals[-1][li]
        claimed[-1].add(li)
        boxes = [start.box]
        scores = [start.score]
        valid = [True]
        speeds = [start.predicted_speed]
        cur_box, cur_speed = start.box, start.predicted_speed
        for t in range(T - 2, -1, -1):
            predicted = _propagate_back(cur_box, cur_speed, dt)
            best_j, best_iou = -1, iou_thresh
            for j, prop in enumerate(per_frame_proposals[t]):
                if j in claimed[t]:
                    continue
                iou = iou_3d(predicted, prop.box)
                if iou >= best_iou:
                    best_j, best_iou = j, iou
            if best_j >= 0:
                claimed[t].add(best_j)
                matched = per_frame_proposals[t][best_j]
                cur_box, cur_speed = matched.box, matched.predicted_speed
                boxes.append(matched.box)
                scores.append(matched.score)
                valid.append(True)
                speeds.append(matched.predicted_speed)
            else:
                cur_box = predicted
                boxes.append(predicted)
                scores.append(0.0)
                valid.append(False)
                speeds.append(cur_speed)
        boxes.reverse()
        scores.reverse()
        valid.reverse()
        speeds.reverse()
        trajectories.append(ProposalTrajectory(boxes, np.array(scores),
                                               np.array(valid), np.array(speeds)))
    return trajectories


def pool_points(frame: Frame, box: Box7, margin: float = DEFAULT_POOL_MARGIN,
                m_max: int = 128, seed: int = 0) -> PooledPoints:
    """Collect in-box points (with margin); subsample uniformly past ``m_max``.

    An empty box yields a single sentinel point at the box center, with
    count 0 recorded.
    """
    if m_max < 1:
        raise ValueError("m_max must be >= 1")
    if len(frame.points) == 0:
        return PooledPoints(box.center[None, :], 0)
    mask = points_in_box(frame.points, box, margin)
    inside = frame.points[mask]
    if len(inside) == 0:
        return PooledPoints(box.center[None, :], 0)
    if len(inside) > m_max:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(inside), size=m_max, replace=False)
        inside = inside[keep]
    return PooledPoints(inside.copy(), len(inside))


def build_trajectories(frames: list[Frame],
                       per_frame_proposals: list[list[NoisyProposal]],
                       iou_thresh: float = 0.5, dt: float = 0.1,
                       margin: float = DEFAULT_POOL_MARGIN, m_max: int = 128,
                       seed: int = 0) -> list[ProposalTrajectory]:
    """Associate proposals and pool each trajectory's per-frame points."""
    trajectories = associate(per_frame_proposals, iou_thresh, dt)
    for k, traj in enumerate(trajectories):
        traj.pooled = [
            pool_points(frames[t], traj.boxes[t], margin, m_max, seed=seed + 7919 * k + t)
            for t in range(traj.T)
        ]
    return trajectories
