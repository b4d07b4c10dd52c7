"""Independent reference implementations used to cross-check the fast paths:
Monte-Carlo rotated IoU and exhaustive trajectory association. These stay
deliberately brute-force and share no code with what they verify."""

from __future__ import annotations

import itertools

import numpy as np

from .geom import Box7, iou_3d, points_in_box
from .synth import NoisyProposal

__all__ = ["mc_iou", "exhaustive_associate", "random_box_pair"]


def mc_iou(a: Box7, b: Box7, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """Monte-Carlo IoU estimate: uniform samples in the axis-aligned bounding
    volume of both boxes, counting containment per box."""
    rng = np.random.default_rng(seed)
    corners = []
    for box in (a, b):
        signs = np.array(list(itertools.product([-1, 1], repeat=3)), dtype=float)
        local = signs * (box.size / 2.0)
        c, s = np.cos(box.heading), np.sin(box.heading)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        corners.append(local @ rot.T + box.center)
    corners = np.concatenate(corners)
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = points_in_box(pts, a)
    in_b = points_in_box(pts, b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return inter / union


def random_box_pair(rng: np.random.Generator,
                    max_center_offset: float = 0.6) -> tuple[Box7, Box7]:
    """A pair of overlapping rotated boxes for IoU cross-checks."""
    l, w, h = rng.uniform(1.5, 4.5), rng.uniform(1.0, 2.5), rng.uniform(1.0, 2.0)
    a = Box7(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 1),
             l, w, h, rng.uniform(-np.pi, np.pi))
    offset = rng.uniform(-max_center_offset, max_center_offset, size=3) * a.size
    ratios = rng.uniform(0.8, 1.25, size=3)
    b = Box7(a.cx + offset[0], a.cy + offset[1], a.cz + offset[2],
             a.l * ratios[0], a.w * ratios[1], a.h * ratios[2],
             a.heading + rng.uniform(-np.pi, np.pi))
    return a, b


def exhaustive_associate(per_frame_proposals: list[list[NoisyProposal]],
                         iou_thresh: float, dt: float) -> list[list[int | None]]:
    """Globally optimal backward association by enumerating every frame-wise
    assignment combination and maximizing summed matched IoU.

    Returns, per latest-frame proposal (in input order), the chosen proposal
    index at each earlier frame (None where unmatched), frames ordered
    oldest -> latest. Only feasible for tiny instances.
    """
    T = len(per_frame_proposals)
    latest = per_frame_proposals[-1]
    n_traj = len(latest)

    def propagate(box: Box7, speed, step_dt: float) -> Box7:
        return box.translated(-speed[0] * step_dt, -speed[1] * step_dt)

    best_score = -1.0
    best_choice: list[list[int | None]] | None = None

    def recurse(t: int, states: list[tuple[Box7, np.ndarray]],
                chosen: list[list[int | None]], score: float):
        nonlocal best_score, best_choice
        if t < 0:
            if score > best_score:
                best_score = score
                best_choice = [list(c) for c in chosen]
            return
        candidates = per_frame_proposals[t]
        options_per_traj = list(range(len(candidates))) + [None]
        for combo in itertools.product(options_per_traj, repeat=n_traj):
            used = [j for j in combo if j is not None]
            if len(used) != len(set(used)):
                continue
            new_states = []
            new_score = score
            ok = True
            for k, j in enumerate(combo):
                box, speed = states[k]
                predicted = propagate(box, speed, dt)
                if j is None:
                    new_states.append((predicted, speed))
                else:
                    iou = iou_3d(predicted, candidates[j].box)
                    if iou < iou_thresh:
                        ok = False
                        break
                    new_score += iou
                    new_states.append((candidates[j].box, candidates[j].predicted_speed))
            if not ok:
                continue
            for k, j in enumerate(combo):
                chosen[k].append(j)
            recurse(t - 1, new_states, chosen, new_score)
            for c in chosen:
                c.pop()

    init_states = [(p.box, p.predicted_speed) for p in latest]
    recurse(T - 2, init_states, [[] for _ in range(n_traj)], 0.0)
    if best_choice is None:
        return [[None] * (T - 1) for _ in range(n_traj)]
    # recursion appended newest-first; reverse to oldest -> latest
    return [list(reversed(c)) for c in best_choice]
