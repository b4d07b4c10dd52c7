"""Oriented 3D box algebra: keypoints, frame transforms, rotated IoU, containment.

Boxes are 7-DOF: center (cx, cy, cz), size (l, w, h) and a heading angle
about the vertical axis. All rotations are yaw-only; full SO(3) orientations
are out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Box7",
    "BoxKeypoints",
    "Pose2D",
    "InvalidBoxError",
    "box_keypoints",
    "to_local",
    "to_world",
    "iou_3d",
    "points_in_box",
    "normalize_heading",
]


class InvalidBoxError(ValueError):
    """Raised when a box has non-positive extents."""


def normalize_heading(heading: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    h = math.fmod(heading, 2.0 * math.pi)
    if h > math.pi:
        h -= 2.0 * math.pi
    elif h <= -math.pi:
        h += 2.0 * math.pi
    return h


@dataclass(frozen=True)
class Box7:
    """Oriented 3D bounding box: center, size, heading (yaw).

    ``l`` runs along the heading direction, ``w`` lateral, ``h`` vertical.
    Heading is normalized to (-pi, pi] on construction.
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    heading: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise InvalidBoxError(
                f"box extents must be positive, got ({self.l}, {self.w}, {self.h})"
            )
        object.__setattr__(self, "heading", normalize_heading(float(self.heading)))
        for name in ("cx", "cy", "cz", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.l**2 + self.w**2 + self.h**2)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.heading])

    @classmethod
    def from_array(cls, a) -> "Box7":
        a = np.asarray(a, dtype=float)
        return cls(*a[:7])

    def translated(self, dx: float, dy: float, dz: float = 0.0) -> "Box7":
        return Box7(self.cx + dx, self.cy + dy, self.cz + dz, self.l, self.w, self.h, self.heading)


# Corner sign patterns enumerated x-major over (+-l/2, +-w/2, +-h/2); this fixed
# order makes every keypoint concatenation downstream deterministic.
_CORNER_SIGNS = np.array(
    [
        [+1, +1, +1],
        [+1, +1, -1],
        [+1, -1, +1],
        [+1, -1, -1],
        [-1, +1, +1],
        [-1, +1, -1],
        [-1, -1, +1],
        [-1, -1, -1],
    ],
    dtype=float,
)


@dataclass(frozen=True)
class BoxKeypoints:
    """The 8 corners (fixed sign order) followed by the center, shape (9, 3)."""

    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape != (9, 3):
            raise ValueError(f"expected (9, 3) keypoints, got {pts.shape}")
        object.__setattr__(self, "points", pts)

    @property
    def corners(self) -> np.ndarray:
        return self.points[:8]

    @property
    def center(self) -> np.ndarray:
        return self.points[8]


@dataclass(frozen=True)
class Pose2D:
    """Rigid transform (local -> world) with translation and yaw about vertical."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    yaw: float = 0.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return pts @ rot.T + np.array([self.tx, self.ty, self.tz])

    def apply_box(self, box: Box7) -> Box7:
        center = self.apply(box.center)[0]
        return Box7(center[0], center[1], center[2], box.l, box.w, box.h,
                    normalize_heading(box.heading + self.yaw))

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # R^T @ (-t) for the yaw-only rotation
        return Pose2D(-(c * self.tx + s * self.ty), -(-s * self.tx + c * self.ty),
                      -self.tz, -self.yaw)

    def compose(self, other: "Pose2D") -> "Pose2D":
        # self after other: (self * other).apply(p) == self.apply(other.apply(p))
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        tx = self.tx + c * other.tx - s * other.ty
        ty = self.ty + s * other.tx + c * other.ty
        return Pose2D(tx, ty, self.tz + other.tz, normalize_heading(self.yaw + other.yaw))


def _yaw_matrix(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_keypoints(box: Box7, frame: str = "world") -> BoxKeypoints:
    """8 corners + center of ``box``, in its local frame or the world frame."""
    if frame not in ("world", "local"):
        raise ValueError(f"frame must be 'world' or 'local', got {frame!r}")
    local = np.empty((9, 3))
    local[:8] = _CORNER_SIGNS * (box.size / 2.0)
    local[8] = 0.0
    if frame == "local":
        return BoxKeypoints(local)
    world = local @ _yaw_matrix(box.heading).T + box.center
    return BoxKeypoints(world)


def to_local(points: np.ndarray, box: Box7) -> np.ndarray:
    """Express world-frame points in the box frame (origin at center, x along heading)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return (pts - box.center) @ _yaw_matrix(box.heading)


def to_world(points: np.ndarray, box: Box7) -> np.ndarray:
    """Inverse of :func:`to_local`."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pts @ _yaw_matrix(box.heading).T + box.center


def _bev_corners(box: Box7) -> np.ndarray:
    """Footprint polygon (4, 2), counter-clockwise."""
    half = np.array(
        [[box.l / 2, box.w / 2], [-box.l / 2, box.w / 2],
         [-box.l / 2, -box.w / 2], [box.l / 2, -box.w / 2]]
    )
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, -s], [s, c]])
    return half @ rot.T + np.array([box.cx, box.cy])


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as (k, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clip``."""
    output = [tuple(p) for p in subject]
    k = len(clip)
    for i in range(k):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % k]
        edge = (b[0] - a[0], b[1] - a[1])
        input_list = output
        output = []

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0

        def intersect(p, q):
            dp = (q[0] - p[0], q[1] - p[1])
            denom = edge[0] * dp[1] - edge[1] * dp[0]
            if denom == 0.0:
                # the segment is (numerically) parallel to the clip edge, so
                # both endpoints are within rounding error of the line and
                # either one serves as the intersection
                return q
            num = edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])
            t = num / denom
            return (p[0] + t * dp[0], p[1] + t * dp[1])

        for j, cur in enumerate(input_list):
            prev = input_list[j - 1]
            if inside(cur):
                if not inside(prev):
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif inside(prev):
                output.append(intersect(prev, cur))
    return np.array(output) if output else np.zeros((0, 2))


def iou_3d(a: Box7, b: Box7) -> float:
    """Exact rotated IoU: BEV polygon intersection times vertical overlap over union."""
    if a == b:
        return 1.0
    inter_poly = _clip_polygon(_bev_corners(a), _bev_corners(b))
    inter_area = _polygon_area(inter_poly)
    if inter_area <= 0.0:
        return 0.0
    z_lo = max(a.cz - a.h / 2, b.cz - b.h / 2)
    z_hi = min(a.cz + a.h / 2, b.cz + b.h / 2)
    if z_hi <= z_lo:
        return 0.0
    inter_vol = inter_area * (z_hi - z_lo)
    union = a.volume + b.volume - inter_vol
    if union <= 0.0:
        return 0.0
    return min(1.0, inter_vol / union)


def points_in_box(points: np.ndarray, box: Box7, margin: float = 0.0) -> np.ndarray:
    """Boolean mask: inside the box enlarged by ``margin`` on every size axis."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    local = to_local(points, box)
    half = box.size / 2.0 + margin
    return np.all(np.abs(local) <= half, axis=1)
