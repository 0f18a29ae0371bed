"""Geometric primitives: poses, pinhole camera, box fitting and overlap measures.

Conventions used throughout the package:

* world frame is y-up; at yaw 0 the camera looks along +z and +x is to its left;
* yaw grows counter-clockwise seen from above (turning left), pitch grows upward;
* image column ``u`` grows to the right, row ``v`` grows downward, and pixel
  ``(i, j)`` is sampled through the continuous point ``(i + 0.5, j + 0.5)``;
* depth is measured along the viewing axis, not along the ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

PITCH_LIMIT = 60.0
HALF_EXTENT_FLOOR = 1e-3


def _wrap_yaw(yaw: float, period: float = 360.0) -> float:
    y = math.fmod(float(yaw), period)
    if y < 0:
        y += period
    # fmod can land exactly on the period after the shift for tiny negatives
    return 0.0 if y >= period else y


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self) -> None:
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ValueError(f"position must be a finite 3-vector, got {self.position!r}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "yaw", _wrap_yaw(self.yaw))
        object.__setattr__(self, "pitch", float(np.clip(self.pitch, -PITCH_LIMIT, PITCH_LIMIT)))

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World-frame (right, up, forward) unit vectors of the camera."""
        psi, th = math.radians(self.yaw), math.radians(self.pitch)
        sp, cp, st, ct = math.sin(psi), math.cos(psi), math.sin(th), math.cos(th)
        forward = np.array([sp * ct, st, cp * ct])
        up = np.array([-sp * st, ct, -cp * st])
        right = np.array([-cp, 0.0, sp])
        return right, up, forward

    def key(self) -> tuple[float, ...]:
        return tuple(round(v, 6) for v in (*self.position, self.yaw, self.pitch))


@dataclass(frozen=True)
class CameraConfig:
    width: int = 128
    height: int = 128
    vertical_fov: float = 90.0
    eye_height: float = 1.0
    max_range: float = 10.0

    def __post_init__(self) -> None:
        if self.width != self.height or self.width <= 0:
            raise ValueError("camera frames must be square with positive size")
        if not 0.0 < self.vertical_fov < 180.0:
            raise ValueError("vertical_fov must lie in (0, 180)")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels, square frame)."""
        return (self.height / 2.0) / math.tan(math.radians(self.vertical_fov) / 2.0)

    @property
    def frame_area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class Box2D:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(f"inverted box {self}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def clipped(self, width: float, height: float) -> "Box2D":
        x0, x1 = np.clip([self.xmin, self.xmax], 0.0, width)
        y0, y1 = np.clip([self.ymin, self.ymax], 0.0, height)
        return Box2D(float(x0), float(y0), float(x1), float(y1))


@dataclass(frozen=True)
class OrientedBox3D:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        c = tuple(float(v) for v in self.center)
        h = tuple(float(v) for v in self.half_extents)
        if len(c) != 3 or len(h) != 3:
            raise ValueError("center and half_extents must be 3-vectors")
        if min(h) <= 0:
            raise ValueError(f"half_extents must be strictly positive, got {h}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "yaw", _wrap_yaw(self.yaw, 180.0))

    def local_axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Ground-plane unit vectors of the box's local x and z axes, in world (x, z)."""
        a = math.radians(self.yaw)
        return np.array([math.cos(a), -math.sin(a)]), np.array([math.sin(a), math.cos(a)])

    def footprint(self) -> np.ndarray:
        """Counter-clockwise (in x-z) corners of the ground footprint, shape (4, 2)."""
        ax, az = self.local_axes()
        hx, _, hz = self.half_extents
        c = np.array([self.center[0], self.center[2]])
        corners = [c + sx * hx * ax + sz * hz * az for sx, sz in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
        return _ccw(np.array(corners))

    def corners(self) -> np.ndarray:
        """The eight 3D corners, shape (8, 3)."""
        fp = self.footprint()
        y0 = self.center[1] - self.half_extents[1]
        y1 = self.center[1] + self.half_extents[1]
        out = [(x, y, z) for y in (y0, y1) for x, z in fp]
        return np.array(out)

    @property
    def volume(self) -> float:
        hx, hy, hz = self.half_extents
        return 8.0 * hx * hy * hz

    @property
    def footprint_area(self) -> float:
        return 4.0 * self.half_extents[0] * self.half_extents[2]

    def contains(self, points: np.ndarray, slack: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ax, az = self.local_axes()
        d = pts - np.asarray(self.center)
        lx = d[:, 0] * ax[0] + d[:, 2] * ax[1]
        lz = d[:, 0] * az[0] + d[:, 2] * az[1]
        hx, hy, hz = self.half_extents
        return (np.abs(lx) <= hx + slack) & (np.abs(d[:, 1]) <= hy + slack) & (np.abs(lz) <= hz + slack)


# --------------------------------------------------------------------- camera


def project_point(cam: CameraConfig, pose: Pose, world) -> Optional[tuple[np.ndarray, float]]:
    """Pixel coordinates and axial depth of a world point, or None when outside the frustum."""
    right, up, forward = pose.axes()
    d = np.asarray(world, dtype=float) - np.asarray(pose.position)
    depth = float(d @ forward)
    if depth <= 0.0:
        return None
    f = cam.focal
    u = cam.width / 2.0 + f * float(d @ right) / depth
    v = cam.height / 2.0 - f * float(d @ up) / depth
    eps = 1e-9
    if not (-eps <= u <= cam.width + eps and -eps <= v <= cam.height + eps):
        return None
    return np.array([u, v]), depth


def backproject_pixel(cam: CameraConfig, pose: Pose, pixel, depth: float) -> np.ndarray:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    f = cam.focal
    right, up, forward = pose.axes()
    x = (u - cam.width / 2.0) / f
    y = -(v - cam.height / 2.0) / f
    return np.asarray(pose.position) + depth * (forward + x * right + y * up)


def backproject_pixels(cam: CameraConfig, pose: Pose, cols: np.ndarray, rows: np.ndarray,
                       depth: np.ndarray) -> np.ndarray:
    """Vectorised back-projection of integer pixel indices (pixel-center convention)."""
    f = cam.focal
    right, up, forward = pose.axes()
    x = (np.asarray(cols) + 0.5 - cam.width / 2.0) / f
    y = -(np.asarray(rows) + 0.5 - cam.height / 2.0) / f
    dirs = forward[None, :] + x[:, None] * right[None, :] + y[:, None] * up[None, :]
    return np.asarray(pose.position)[None, :] + np.asarray(depth)[:, None] * dirs


# ------------------------------------------------------------- box fitting


@dataclass(frozen=True)
class ObbFit:
    box: OrientedBox3D
    area: float
    degenerate: bool = False


def _footprint_sweep(xz: np.ndarray, angles_deg: np.ndarray) -> np.ndarray:
    a = np.radians(angles_deg)
    c, s = np.cos(a), np.sin(a)
    # local x = (cos, -sin), local z = (sin, cos) in world (x, z)
    lx = np.outer(c, xz[:, 0]) - np.outer(s, xz[:, 1])
    lz = np.outer(s, xz[:, 0]) + np.outer(c, xz[:, 1])
    return (lx.max(axis=1) - lx.min(axis=1)) * (lz.max(axis=1) - lz.min(axis=1))


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull; returns vertices counter-clockwise without repetition."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _hull_candidates(xz: np.ndarray) -> np.ndarray:
    if len(xz) <= 64:
        return xz
    try:
        from scipy.spatial import ConvexHull, QhullError

        try:
            return xz[ConvexHull(xz).vertices]
        except QhullError:
            return xz
    except ImportError:  # pragma: no cover
        return convex_hull_2d(xz)


def fit_min_area_obb(points: Sequence, angle_step: float = 0.5) -> ObbFit:
    """Gravity-aligned box of minimum ground footprint around ``points``.

    Yaw is swept over ``[0, 90)`` at ``angle_step`` degrees; the vertical extent
    comes straight from the min/max of the up coordinate.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise ValueError("need at least 3 points of dimension 3")
    if not 0.0 < angle_step <= 90.0:
        raise ValueError("angle_step must lie in (0, 90]")
    xz = pts[:, [0, 2]]
    hull = _hull_candidates(xz)
    angles = np.arange(0.0, 90.0, angle_step)
    areas = _footprint_sweep(hull, angles)
    best = int(np.argmin(areas))
    yaw = float(angles[best])

    a = math.radians(yaw)
    ax = np.array([math.cos(a), -math.sin(a)])
    az = np.array([math.sin(a), math.cos(a)])
    lx, lz = xz @ ax, xz @ az
    y = pts[:, 1]
    lo = np.array([lx.min(), y.min(), lz.min()])
    hi = np.array([lx.max(), y.max(), lz.max()])
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    degenerate = bool(half[0] < HALF_EXTENT_FLOOR or half[2] < HALF_EXTENT_FLOOR)
    half = np.maximum(half, HALF_EXTENT_FLOOR)
    cxz = mid[0] * ax + mid[2] * az
    box = OrientedBox3D((cxz[0], mid[1], cxz[1]), tuple(half), yaw)
    return ObbFit(box=box, area=float(areas[best]), degenerate=degenerate)


# ------------------------------------------------------- polygons & overlap


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if polygon_signed_area(poly) >= 0 else poly[::-1].copy()


def polygon_signed_area(poly: np.ndarray) -> float:
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    p = np.asarray(poly, dtype=float)
    a = polygon_signed_area(p)
    if abs(a) < 1e-12:
        return p.mean(axis=0)
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cr = x * yn - xn * y
    return np.array([np.sum((x + xn) * cr), np.sum((y + yn) * cr)]) / (6.0 * a)


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a polygon by a convex counter-clockwise polygon."""
    out = [np.asarray(p, dtype=float) for p in subject]
    clip = _ccw(np.asarray(clipper, dtype=float))
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        inp, out = out, []
        if not inp:
            break

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
            prev, sp = cur, sc
    return np.array(out) if out else np.zeros((0, 2))


def convex_polygon_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Euclidean distance between two convex polygons (0 when they overlap)."""
    overlap = clip_convex(p, q)
    if len(overlap) >= 3 and abs(polygon_signed_area(overlap)) > 0:
        return 0.0

    def seg_point(a, b, x):
        ab = b - a
        t = np.clip(np.dot(x - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
        return float(np.linalg.norm(a + t * ab - x))

    best = math.inf
    for poly, other in ((p, q), (q, p)):
        m = len(other)
        for x in poly:
            for i in range(m):
                best = min(best, seg_point(other[i], other[(i + 1) % m], x))
    return best


def iou_box2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def iou_obb3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Volume IoU of two yaw-only boxes."""
    inter_poly = clip_convex(a.footprint(), b.footprint())
    inter_area = abs(polygon_signed_area(inter_poly)) if len(inter_poly) >= 3 else 0.0
    lo = max(a.center[1] - a.half_extents[1], b.center[1] - b.half_extents[1])
    hi = min(a.center[1] + a.half_extents[1], b.center[1] + b.half_extents[1])
    inter = inter_area * max(0.0, hi - lo)
    union = a.volume + b.volume - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def _mask_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou_masks(a, b, target_absent: bool = False) -> float:
    a, b = _mask_pair(a, b)
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0 if target_absent else 0.0
    return inter / union


def dice_masks(a, b, target_absent: bool = False) -> float:
    a, b = _mask_pair(a, b)
    total = np.count_nonzero(a) + np.count_nonzero(b)
    if total == 0:
        return 1.0 if target_absent else 0.0
    return 2.0 * np.count_nonzero(a & b) / total


__all__ = [
    "Pose", "CameraConfig", "Box2D", "OrientedBox3D", "ObbFit",
    "project_point", "backproject_pixel", "backproject_pixels", "fit_min_area_obb",
    "iou_box2d", "iou_obb3d", "iou_masks", "dice_masks", "clip_convex",
    "convex_hull_2d", "convex_polygon_distance", "polygon_signed_area", "polygon_centroid",
]
