"""Boxes, proposals, scene frames and the rotated-rectangle queries built on them.

Point clouds are plain ``(N, 3)`` float arrays in the sensor frame (x forward,
y left, z up, sensor at the origin).  Boxes are immutable values; batch
routines take ``(N, 7)`` arrays laid out as ``BoxBEV.to_array``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = [
    "BoxBEV",
    "Proposal",
    "SceneFrame",
    "wrap_angle",
    "as_cloud",
    "box_corners",
    "points_in_box",
    "points_in_box_mask",
    "bev_iou",
    "bev_iou_many",
    "polygon_area",
]


def wrap_angle(angle):
    """Wrap angles to the half-open interval (-pi, pi]."""
    a = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    a = np.where(a <= -np.pi, a + 2.0 * np.pi, a)
    return float(a) if a.ndim == 0 else a


def as_cloud(points) -> np.ndarray:
    """Validate and return an ``(N, 3)`` float64 point array."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class BoxBEV:
    """Oriented vehicle box.

    ``w`` is the extent along the heading ``alpha`` (vehicle length) and ``h``
    the extent across it (vehicle width).  The vertical extent is carried for
    3D membership tests; IoU is computed in bird's eye view only.
    """

    x: float
    y: float
    w: float
    h: float
    alpha: float
    z_min: float
    z_max: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h", "alpha", "z_min", "z_max"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"box field {name} must be finite")
            object.__setattr__(self, name, value)
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box extents w and h must be positive")
        if self.z_max <= self.z_min:
            raise ValueError("box requires z_max > z_min")
        object.__setattr__(self, "alpha", wrap_angle(self.alpha))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, 0.5 * (self.z_min + self.z_max)])

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h, self.alpha, self.z_min, self.z_max])

    @classmethod
    def from_array(cls, arr) -> "BoxBEV":
        return cls(*(float(v) for v in np.asarray(arr, dtype=float)[:7]))

    def corners(self) -> np.ndarray:
        """BEV corners, counter-clockwise, shape ``(4, 2)``."""
        return box_corners(self.to_array()[None])[0]

    def moved(self, rotation: float = 0.0, translation=(0.0, 0.0, 0.0)) -> "BoxBEV":
        """Apply a rigid motion (rotation about z through the origin, then translation)."""
        c, s = np.cos(rotation), np.sin(rotation)
        tx, ty, tz = (float(v) for v in translation)
        return BoxBEV(
            c * self.x - s * self.y + tx,
            s * self.x + c * self.y + ty,
            self.w,
            self.h,
            self.alpha + rotation,
            self.z_min + tz,
            self.z_max + tz,
        )


@dataclass(frozen=True)
class Proposal:
    box: BoxBEV
    score: float

    def __post_init__(self):
        score = float(self.score)
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"proposal score must lie in [0, 1], got {score}")
        object.__setattr__(self, "score", score)


@dataclass(frozen=True, eq=False)
class SceneFrame:
    """One LiDAR sweep plus its ground-truth vehicle boxes."""

    frame_id: str
    cloud: np.ndarray
    labels: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "cloud", as_cloud(self.cloud))
        object.__setattr__(self, "labels", tuple(self.labels))

    def with_cloud(self, cloud) -> "SceneFrame":
        return SceneFrame(self.frame_id, cloud, self.labels)

    def label_point_counts(self) -> np.ndarray:
        return np.array([points_in_box_mask(self.cloud, b).sum() for b in self.labels], dtype=int)


def box_corners(boxes: np.ndarray) -> np.ndarray:
    """Counter-clockwise BEV corners for an ``(N, >=5)`` box array -> ``(N, 4, 2)``."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
    half_w = 0.5 * boxes[:, 2]
    half_h = 0.5 * boxes[:, 3]
    c, s = np.cos(boxes[:, 4]), np.sin(boxes[:, 4])
    local = np.stack(
        [
            np.stack([half_w, -half_h], axis=1),
            np.stack([half_w, half_h], axis=1),
            np.stack([-half_w, half_h], axis=1),
            np.stack([-half_w, -half_h], axis=1),
        ],
        axis=1,
    )
    x = c[:, None] * local[..., 0] - s[:, None] * local[..., 1] + boxes[:, None, 0]
    y = s[:, None] * local[..., 0] + c[:, None] * local[..., 1] + boxes[:, None, 1]
    return np.stack([x, y], axis=-1)


def points_in_box_mask(cloud, box: BoxBEV) -> np.ndarray:
    pts = as_cloud(cloud)
    dx = pts[:, 0] - box.x
    dy = pts[:, 1] - box.y
    c, s = np.cos(box.alpha), np.sin(box.alpha)
    along = c * dx + s * dy
    across = -s * dx + c * dy
    return (
        (np.abs(along) <= 0.5 * box.w)
        & (np.abs(across) <= 0.5 * box.h)
        & (pts[:, 2] >= box.z_min)
        & (pts[:, 2] <= box.z_max)
    )


def points_in_box(cloud, box: BoxBEV) -> np.ndarray:
    """Points inside the rotated box (BEV rectangle and vertical extent), order preserved."""
    pts = as_cloud(cloud)
    return pts[points_in_box_mask(pts, box)]


def polygon_area(poly: np.ndarray, count: np.ndarray | None = None) -> np.ndarray:
    """Shoelace area of padded polygons ``(N, M, 2)``; padding must repeat vertex 0."""
    poly = np.asarray(poly, dtype=float)
    x, y = poly[..., 0], poly[..., 1]
    area = 0.5 * np.sum(x * np.roll(y, -1, axis=-1) - np.roll(x, -1, axis=-1) * y, axis=-1)
    if count is not None:
        area = np.where(count >= 3, area, 0.0)
    return area


@njit(cache=True)
def _clip_area(subject, clip):
    """Area of convex quad ``subject`` clipped by convex quad ``clip`` (both CCW)."""
    buf_a = np.empty((16, 2))
    buf_b = np.empty((16, 2))
    n = 4
    for i in range(4):
        buf_a[i, 0] = subject[i, 0]
        buf_a[i, 1] = subject[i, 1]
    for e in range(4):
        ax, ay = clip[e, 0], clip[e, 1]
        ex = clip[(e + 1) % 4, 0] - ax
        ey = clip[(e + 1) % 4, 1] - ay
        m = 0
        for i in range(n):
            cx, cy = buf_a[i, 0], buf_a[i, 1]
            px, py = buf_a[(i - 1) % n, 0], buf_a[(i - 1) % n, 1]
            sc = ex * (cy - ay) - ey * (cx - ax)
            sp_ = ex * (py - ay) - ey * (px - ax)
            if (sc >= 0.0) != (sp_ >= 0.0):
                f = sp_ / (sp_ - sc)
                buf_b[m, 0] = px + f * (cx - px)
                buf_b[m, 1] = py + f * (cy - py)
                m += 1
            if sc >= 0.0:
                buf_b[m, 0] = cx
                buf_b[m, 1] = cy
                m += 1
        n = m
        if n < 3:
            return 0.0
        buf_a, buf_b = buf_b, buf_a
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += buf_a[i, 0] * buf_a[j, 1] - buf_a[j, 0] * buf_a[i, 1]
    return max(0.5 * area, 0.0)


@njit(cache=True)
def _inter_areas(corners, ref, candidates):
    out = np.zeros(corners.shape[0])
    for k in range(candidates.size):
        i = candidates[k]
        out[i] = _clip_area(corners[i], ref)
    return out


def bev_iou_many(boxes, box: BoxBEV | np.ndarray) -> np.ndarray:
    """BEV IoU of every row of ``boxes`` (``(N, >=5)``) with a single ``box``."""
    boxes = np.atleast_2d(np.asarray(boxes, dtype=float))
    if boxes.shape[0] == 0:
        return np.zeros(0)
    ref = box.to_array() if isinstance(box, BoxBEV) else np.asarray(box, dtype=float)
    # boxes whose circumscribed circles are disjoint cannot overlap
    reach = 0.5 * (np.hypot(boxes[:, 2], boxes[:, 3]) + np.hypot(ref[2], ref[3]))
    near = np.hypot(boxes[:, 0] - ref[0], boxes[:, 1] - ref[1]) < reach
    cand = np.flatnonzero(near)
    if cand.size == 0:
        return np.zeros(boxes.shape[0])
    corners = np.zeros((boxes.shape[0], 4, 2))
    corners[cand] = box_corners(boxes[cand])
    inter = _inter_areas(corners, box_corners(ref[None])[0], cand)
    area_a = boxes[:, 2] * boxes[:, 3]
    area_b = ref[2] * ref[3]
    union = area_a + area_b - inter
    return np.clip(inter / union, 0.0, 1.0)


def bev_iou(a: BoxBEV, b: BoxBEV) -> float:
    """Intersection-over-union of two rotated BEV rectangles."""
    return float(bev_iou_many(a.to_array()[None], b)[0])
