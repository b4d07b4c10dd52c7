"""Synthetic LiDAR-sequence generator.

Stands in for a first-stage detector: moving ground-truth boxes, simulated
surface point clouds per frame (half-space visibility from a sensor origin),
and jittered noisy proposals carrying predicted speeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Box7, box_keypoints, iou_3d, normalize_heading, to_world

__all__ = [
    "SceneConfig",
    "JitterConfig",
    "TrackedObject",
    "Frame",
    "NoisyProposal",
    "simulate_sequence",
    "make_proposals",
]

# keep sampled surface points strictly inside the box under round-trips
_SURFACE_INSET = 1e-6


@dataclass
class SceneConfig:
    num_objects: int = 3
    xy_range: float = 20.0              # object centers start in [-r, r]^2
    z_range: tuple[float, float] = (0.5, 1.2)
    length_range: tuple[float, float] = (3.5, 5.0)
    width_range: tuple[float, float] = (1.6, 2.2)
    height_range: tuple[float, float] = (1.4, 1.9)
    speed_range: tuple[float, float] = (0.0, 8.0)      # m/s magnitude
    turn_rate_range: tuple[float, float] = (-0.3, 0.3)  # rad/s
    points_per_object: int = 256
    noise_sigma: float = 0.02
    dt: float = 0.1
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 1.5)
    background_points: int = 0


@dataclass
class JitterConfig:
    center_frac: float = 0.1        # offset per axis, as fraction of box diagonal
    size_ratio: float = 0.1         # each extent scaled by U(1-r, 1+r)
    heading_sigma: float = 0.1      # uniform in [-s, s] radians
    speed_sigma: float = 0.2        # gaussian per component, m/s
    dropout: float = 0.0            # probability a frame's proposal is missing


@dataclass
class TrackedObject:
    id: int
    trajectory: list[Box7]          # per-frame world boxes, oldest -> latest
    speeds: np.ndarray = field(repr=False)  # (T, 2) m/s

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=float).reshape(len(self.trajectory), 2)


@dataclass
class Frame:
    timestamp: float
    points: np.ndarray              # (M, 3) world positions
    labels: np.ndarray              # (M,) object id, -1 for background

    def points_of(self, obj_id: int) -> np.ndarray:
        return self.points[self.labels == obj_id]


@dataclass
class NoisyProposal:
    box: Box7
    score: float
    predicted_speed: np.ndarray     # (2,) m/s

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        self.predicted_speed = np.asarray(self.predicted_speed, dtype=float).reshape(2)


# face id -> (outward normal axis, sign); normals in the box local frame
_FACES = [(0, +1), (0, -1), (1, +1), (1, -1), (2, +1), (2, -1)]


def _sample_surface(box: Box7, n_points: int, sensor: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Sample points on faces visible from the sensor, area-weighted."""
    half = box.size / 2.0 - _SURFACE_INSET
    kps = box_keypoints(box, frame="world")
    areas = []
    visible = []
    for axis, sign in _FACES:
        # world-frame face normal and face center
        normal_local = np.zeros(3)
        normal_local[axis] = sign
        center_local = normal_local * half
        center_world = to_world(center_local, box)[0]
        normal_world = to_world(normal_local, box)[0] - kps.center
        if np.dot(normal_world, sensor - center_world) <= 0:
            continue
        other = [i for i in range(3) if i != axis]
        visible.append((axis, sign, other))
        areas.append(box.size[other[0]] * box.size[other[1]])
    if not visible:
        return np.zeros((0, 3))
    areas = np.asarray(areas)
    counts = rng.multinomial(n_points, areas / areas.sum())
    locals_ = []
    for (axis, sign, other), cnt in zip(visible, counts):
        if cnt == 0:
            continue
        p = np.empty((cnt, 3))
        p[:, axis] = sign * half[axis]
        for o in other:
            p[:, o] = rng.uniform(-half[o], half[o], size=cnt)
        locals_.append(p)
    if not locals_:
        return np.zeros((0, 3))
    return to_world(np.concatenate(locals_), box)


def _spawn_objects(cfg: SceneConfig, T: int, rng: np.random.Generator) -> list[TrackedObject]:
    objects = []
    for obj_id in range(cfg.num_objects):
        cx = rng.uniform(-cfg.xy_range, cfg.xy_range)
        cy = rng.uniform(-cfg.xy_range, cfg.xy_range)
        cz = rng.uniform(*cfg.z_range)
        l = rng.uniform(*cfg.length_range)
        w = rng.uniform(*cfg.width_range)
        h = rng.uniform(*cfg.height_range)
        heading = rng.uniform(-math.pi, math.pi)
        speed_mag = rng.uniform(*cfg.speed_range)
        turn_rate = rng.uniform(*cfg.turn_rate_range)
        # velocity initially along heading
        vel = speed_mag * np.array([math.cos(heading), math.sin(heading)])
        boxes = []
        speeds = np.empty((T, 2))
        center = np.array([cx, cy, cz])
        hd = heading
        for t in range(T):
            boxes.append(Box7(center[0], center[1], center[2], l, w, h, hd))
            speeds[t] = vel
            center = center + np.array([vel[0], vel[1], 0.0]) * cfg.dt
            dpsi = turn_rate * cfg.dt
            c, s = math.cos(dpsi), math.sin(dpsi)
            vel = np.array([c * vel[0] - s * vel[1], s * vel[0] + c * vel[1]])
            hd = normalize_heading(hd + dpsi)
        objects.append(TrackedObject(obj_id, boxes, speeds))
    return objects


def simulate_sequence(cfg: SceneConfig, T: int, seed: int) -> tuple[list[Frame], list[TrackedObject]]:
    """Generate T frames of surface-sampled points plus their ground truth.

    Deterministic for a fixed seed; the RNG stream is consumed in
    (object spawn, then frame-by-frame sampling) order.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng(seed)
    sensor = np.asarray(cfg.sensor_origin, dtype=float)
    objects = _spawn_objects(cfg, T, rng)
    frames = []
    for t in range(T):
        pts_parts = []
        label_parts = []
        for obj in objects:
            surf = _sample_surface(obj.trajectory[t], cfg.points_per_object, sensor, rng)
            if cfg.noise_sigma > 0 and len(surf):
                surf = surf + rng.normal(0.0, cfg.noise_sigma, size=surf.shape)
            pts_parts.append(surf)
            label_parts.append(np.full(len(surf), obj.id, dtype=np.int64))
        if cfg.background_points > 0:
            bg = np.empty((cfg.background_points, 3))
            bg[:, 0] = rng.uniform(-cfg.xy_range * 1.5, cfg.xy_range * 1.5, cfg.background_points)
            bg[:, 1] = rng.uniform(-cfg.xy_range * 1.5, cfg.xy_range * 1.5, cfg.background_points)
            bg[:, 2] = rng.uniform(-0.2, 0.2, cfg.background_points)
            pts_parts.append(bg)
            label_parts.append(np.full(cfg.background_points, -1, dtype=np.int64))
        points = np.concatenate(pts_parts) if pts_parts else np.zeros((0, 3))
        labels = np.concatenate(label_parts) if label_parts else np.zeros(0, dtype=np.int64)
        frames.append(Frame(timestamp=t * cfg.dt, points=points, labels=labels))
    return frames, objects


def make_proposals(objects: list[TrackedObject], jitter: JitterConfig,
                   seed: int, T: int | None = None) -> list[list[NoisyProposal]]:
    """Perturb each ground-truth box independently per frame.

    The proposal score is the IoU between the jittered and true box, a
    monotone confidence proxy; predicted speed is the true speed plus
    gaussian noise. Returns one proposal list per frame; pass ``T`` explicitly
    for the frame count when there are no objects.
    """
    rng = np.random.default_rng(seed)
    if T is None:
        T = len(objects[0].trajectory) if objects else 0
    per_frame: list[list[NoisyProposal]] = [[] for _ in range(T)]
    for obj in objects:
        for t, gt in enumerate(obj.trajectory):
            # draw the full jitter sample first so the RNG stream does not
            # depend on the dropout outcome
            offset = rng.uniform(-1.0, 1.0, size=3) * (jitter.center_frac * gt.diagonal / math.sqrt(3.0))
            ratios = rng.uniform(1.0 - jitter.size_ratio, 1.0 + jitter.size_ratio, size=3)
            dheading = rng.uniform(-jitter.heading_sigma, jitter.heading_sigma)
            speed_noise = rng.normal(0.0, jitter.speed_sigma, size=2) if jitter.speed_sigma > 0 else np.zeros(2)
            dropped = rng.random() < jitter.dropout if jitter.dropout > 0 else False
            if dropped:
                continue
            box = Box7(gt.cx + offset[0], gt.cy + offset[1], gt.cz + offset[2],
                       gt.l * ratios[0], gt.w * ratios[1], gt.h * ratios[2],
                       gt.heading + dheading)
            score = iou_3d(box, gt)
            per_frame[t].append(NoisyProposal(box, score, obj.speeds[t] + speed_noise))
    return per_frame
