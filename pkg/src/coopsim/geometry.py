"""Planar rigid transforms, BEV boxes, and rotated-rectangle IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def wrap_angles(a: np.ndarray) -> np.ndarray:
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi)
    w = np.where(w <= 0.0, w + 2.0 * np.pi, w)
    return w - np.pi


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        """World-frame points ``[..., 2]`` expressed in this pose's frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = np.asarray(pts, dtype=np.float64) - (self.x, self.y)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        p = np.asarray(pts, dtype=np.float64)
        return np.stack([c * p[..., 0] - s * p[..., 1] + self.x, s * p[..., 0] + c * p[..., 1] + self.y], axis=-1)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.yaw)


@dataclass(frozen=True)
class DetBox:
    """BEV rectangle: ``length`` runs along the heading, ``width`` across it."""

    x: float
    y: float
    width: float
    length: float
    yaw: float
    score: float = 1.0

    def corners(self) -> np.ndarray:
        return box_corners(self.x, self.y, self.width, self.length, self.yaw)

    @property
    def area(self) -> float:
        return self.width * self.length

    def transformed(self, src: Pose2D, dst: Pose2D) -> "DetBox":
        """Re-express a box given in ``src``'s frame in ``dst``'s frame."""
        world = src.to_world(np.array([self.x, self.y]))
        local = dst.to_local(world)
        return DetBox(float(local[0]), float(local[1]), self.width, self.length,
                      wrap_angle(self.yaw + src.yaw - dst.yaw), self.score)

    def with_score(self, score: float) -> "DetBox":
        return DetBox(self.x, self.y, self.width, self.length, self.yaw, score)


def box_corners(x, y, width, length, yaw) -> np.ndarray:
    """Counter-clockwise corners ``[4, 2]`` of a rotated rectangle."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + (x, y)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _ensure_ccw(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    signed = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return poly if signed >= 0 else poly[::-1]


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by convex ``clipper`` (both CCW)."""
    out = [p for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a
        inp, out = out, []

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
    return np.array(out) if out else np.zeros((0, 2))


def rotated_iou(a: DetBox, b: DetBox) -> float:
    """Intersection over union of two BEV rectangles; 0 for degenerate boxes."""
    if a.width <= 0 or a.length <= 0 or b.width <= 0 or b.length <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.width, a.length)
    rb = 0.5 * math.hypot(b.width, b.length)
    if math.hypot(a.x - b.x, a.y - b.y) >= ra + rb:
        return 0.0
    pa = _ensure_ccw(a.corners())
    pb = _ensure_ccw(b.corners())
    inter = polygon_area(clip_convex(pa, pb))
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def boxes_to_array(boxes) -> np.ndarray:
    return np.array([[b.x, b.y, b.width, b.length, b.yaw, b.score] for b in boxes], dtype=np.float64).reshape(-1, 6)
