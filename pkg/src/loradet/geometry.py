"""Oriented boxes and their exact IoU by convex polygon clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

HALF_PI = math.pi / 2


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi/2, pi/2); rectangles repeat every pi."""
    if -HALF_PI <= theta < HALF_PI:
        return theta
    out = (theta + HALF_PI) % math.pi - HALF_PI
    return out if out < HALF_PI else -HALF_PI


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle centred at ``(cx, cy)``; ``w`` runs along ``theta``, ``h`` along ``theta + pi/2``."""

    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ArgumentError(f"box extents must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @classmethod
    def from_array(cls, a) -> "OrientedBox":
        return cls(*(float(v) for v in a))

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.theta])

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> np.ndarray:
        """Four corners, counter-clockwise in a y-up frame."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        ux, uy = c * self.w / 2, s * self.w / 2
        vx, vy = -s * self.h / 2, c * self.h / 2
        return np.array(
            [
                [self.cx - ux - vx, self.cy - uy - vy],
                [self.cx + ux - vx, self.cy + uy - vy],
                [self.cx + ux + vx, self.cy + uy + vy],
                [self.cx - ux + vx, self.cy - uy + vy],
            ]
        )

    def moved(self, angle: float, tx: float = 0.0, ty: float = 0.0) -> "OrientedBox":
        """Apply a rotation about the origin followed by a translation."""
        c, s = math.cos(angle), math.sin(angle)
        return OrientedBox(c * self.cx - s * self.cy + tx, s * self.cx + c * self.cy + ty, self.w, self.h, self.theta + angle)


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_intersect(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_intersect(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection over union of two oriented rectangles."""
    if not isinstance(a, OrientedBox):
        a = OrientedBox.from_array(a)
    if not isinstance(b, OrientedBox):
        b = OrientedBox.from_array(b)
    # Quick reject on circumscribed circles.
    ra = 0.5 * math.hypot(a.w, a.h)
    rb = 0.5 * math.hypot(b.w, b.h)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(a.corners(), b.corners()))
    inter = max(inter, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def rasterized_iou(a: OrientedBox, b: OrientedBox, resolution: int = 2000) -> float:
    """Grid-sampling IoU estimate; slow, used only to cross-check :func:`rotated_iou`."""
    pts = np.concatenate([a.corners(), b.corners()])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    xs = lo[0] + (np.arange(resolution) + 0.5) * (hi[0] - lo[0]) / resolution
    ys = lo[1] + (np.arange(resolution) + 0.5) * (hi[1] - lo[1]) / resolution
    gx, gy = np.meshgrid(xs, ys)
    ina = _inside(a, gx, gy)
    inb = _inside(b, gx, gy)
    union = np.count_nonzero(ina | inb)
    return np.count_nonzero(ina & inb) / union if union else 0.0


def _inside(box: OrientedBox, x, y):
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = x - box.cx, y - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)


def coverage(box: OrientedBox, size: int, samples: int = 2) -> np.ndarray:
    """Fraction of each pixel of a ``size x size`` grid covered by ``box``.

    Pixel ``(row, col)`` spans ``[col, col+1) x [row, row+1)``.
    """
    offs = (np.arange(samples) + 0.5) / samples
    cov = np.zeros((size, size))
    base = np.arange(size, dtype=np.float64)
    for oy in offs:
        for ox in offs:
            gx, gy = np.meshgrid(base + ox, base + oy)
            cov += _inside(box, gx, gy)
    return cov / (samples * samples)
