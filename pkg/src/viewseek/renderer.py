"""Raycast depth + instance-id camera over a scene of oriented cuboids."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .geomcore import CameraConfig, OrientedBox3D, Pose
from .scenegen import Scene

_CACHE_SIZE = 2048


@dataclass(frozen=True, eq=False)
class Observation:
    depth: np.ndarray  # float32 [H, W], meters along the viewing axis
    instance: np.ndarray  # int16 [H, W], 0 = background / floor / walls
    pose: Pose
    step_index: int
    cam: CameraConfig


@dataclass(frozen=True)
class VisibilityStats:
    visible_pixels: int
    silhouette_pixels: int
    visible_fraction: float
    center_offset: tuple[float, float]
    mean_depth: float = 0.0


class _LRU(OrderedDict):
    def __init__(self, maxsize: int):
        super().__init__()
        self.maxsize = maxsize

    def get_or(self, key, make):
        if key in self:
            self.move_to_end(key)
            return self[key]
        val = make()
        self[key] = val
        if len(self) > self.maxsize:
            self.popitem(last=False)
        return val


_frames = _LRU(_CACHE_SIZE)
_silhouettes = _LRU(8 * _CACHE_SIZE)


def clear_caches() -> None:
    _frames.clear()
    _silhouettes.clear()


@lru_cache(maxsize=16)
def _pixel_offsets(cam: CameraConfig) -> tuple[np.ndarray, np.ndarray]:
    f = cam.focal
    xs = (np.arange(cam.width) + 0.5 - cam.width / 2.0) / f
    ys = -(np.arange(cam.height) + 0.5 - cam.height / 2.0) / f
    return xs, ys


def ray_directions(cam: CameraConfig, pose: Pose) -> np.ndarray:
    """Per-pixel ray directions, shape (H, W, 3), scaled so the forward component is 1."""
    right, up, forward = pose.axes()
    xs, ys = _pixel_offsets(cam)
    return forward + xs[None, :, None] * right + ys[:, None, None] * up


def _screen_rect(cam: CameraConfig, pose: Pose, box: OrientedBox3D) -> Optional[tuple[int, int, int, int]]:
    """Pixel rows/cols (r0, r1, c0, c1) that can see ``box``; None when provably off-screen."""
    right, up, forward = pose.axes()
    rel = box.corners() - np.asarray(pose.position)
    depth = rel @ forward
    if np.all(depth <= 0):
        return None
    if np.any(depth <= 1e-6):
        return 0, cam.height, 0, cam.width
    f = cam.focal
    u = cam.width / 2.0 + f * (rel @ right) / depth
    v = cam.height / 2.0 - f * (rel @ up) / depth
    c0 = max(0, int(math.ceil(u.min() - 0.5)))
    c1 = min(cam.width, int(math.floor(u.max() - 0.5)) + 1)
    r0 = max(0, int(math.ceil(v.min() - 0.5)))
    r1 = min(cam.height, int(math.floor(v.max() - 0.5)) + 1)
    if c0 >= c1 or r0 >= r1:
        return None
    return r0, r1, c0, c1


def intersect_box(origin: np.ndarray, dirs: np.ndarray, box: OrientedBox3D) -> np.ndarray:
    """Entry parameter of each ray into ``box`` (inf on miss); dirs shape (..., 3)."""
    ax, az = box.local_axes()
    o = np.asarray(origin, dtype=float) - np.asarray(box.center)
    ol = (o[0] * ax[0] + o[2] * ax[1], o[1], o[0] * az[0] + o[2] * az[1])
    dl = (dirs[..., 0] * ax[0] + dirs[..., 2] * ax[1], dirs[..., 1],
          dirs[..., 0] * az[0] + dirs[..., 2] * az[1])
    tnear = np.full(dirs.shape[:-1], -np.inf)
    tfar = np.full(dirs.shape[:-1], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(3):
            inv = 1.0 / dl[k]
            t1 = (-box.half_extents[k] - ol[k]) * inv
            t2 = (box.half_extents[k] - ol[k]) * inv
            tnear = np.fmax(tnear, np.fmin(t1, t2))
            tfar = np.fmin(tfar, np.fmax(t1, t2))
    hit = (tnear <= tfar) & (tnear > 0)
    return np.where(hit, tnear, np.inf)


def _room_hits(scene: Scene, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Axial depth of floor / wall hits seen from inside the room (inf when the ray escapes)."""
    x0, z0, x1, z1 = scene.bounds
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx > 0, (x1 - origin[0]) / dx, np.where(dx < 0, (x0 - origin[0]) / dx, np.inf))
        tz = np.where(dz > 0, (z1 - origin[2]) / dz, np.where(dz < 0, (z0 - origin[2]) / dz, np.inf))
        tfloor = np.where(dy < 0, -origin[1] / dy, np.inf)
    twall = np.minimum(tx, tz)
    wall_y = origin[1] + twall * dy
    twall = np.where((wall_y <= scene.wall_height) & (twall > 0), twall, np.inf)
    return np.minimum(twall, np.where(tfloor > 0, tfloor, np.inf))


def _render(scene: Scene, pose: Pose, cam: CameraConfig) -> tuple[np.ndarray, np.ndarray]:
    origin = np.asarray(pose.position)
    dirs = ray_directions(cam, pose)
    zbuf = _room_hits(scene, origin, dirs)
    ids = np.zeros(zbuf.shape, dtype=np.int16)
    for obj in scene.objects:
        rect = _screen_rect(cam, pose, obj.box)
        if rect is None:
            continue
        r0, r1, c0, c1 = rect
        t = intersect_box(origin, dirs[r0:r1, c0:c1], obj.box)
        sub_z = zbuf[r0:r1, c0:c1]
        closer = t < sub_z
        sub_z[closer] = t[closer]
        ids[r0:r1, c0:c1][closer] = obj.id
    far = ~(zbuf <= cam.max_range)
    depth = np.where(far, cam.max_range, zbuf).astype(np.float32)
    ids[far] = 0
    depth.setflags(write=False)
    ids.setflags(write=False)
    return depth, ids


def render(scene: Scene, pose: Pose, cam: CameraConfig, step_index: int = 0) -> Observation:
    key = (scene.uid, pose.key(), cam)
    depth, ids = _frames.get_or(key, lambda: _render(scene, pose, cam))
    return Observation(depth, ids, pose, step_index, cam)


def silhouette_mask(scene: Scene, pose: Pose, cam: CameraConfig, object_id: int) -> np.ndarray:
    """Pixels the object would cover with every occluder removed (clipped to the frame)."""
    box = scene.object_by_id(object_id).box
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    rect = _screen_rect(cam, pose, box)
    if rect is None:
        return mask
    r0, r1, c0, c1 = rect
    dirs = ray_directions(cam, pose)[r0:r1, c0:c1]
    t = intersect_box(np.asarray(pose.position), dirs, box)
    mask[r0:r1, c0:c1] = t <= cam.max_range
    return mask


def visibility(scene: Scene, pose: Pose, cam: CameraConfig, object_id: int) -> VisibilityStats:
    scene.object_by_id(object_id)  # raises KeyError for unknown ids

    def compute() -> VisibilityStats:
        obs = render(scene, pose, cam)
        sil = int(np.count_nonzero(silhouette_mask(scene, pose, cam, object_id)))
        vis_mask = obs.instance == object_id
        vis = int(np.count_nonzero(vis_mask))
        if vis == 0:
            return VisibilityStats(0, sil, 0.0, (0.0, 0.0), 0.0)
        rows, cols = np.nonzero(vis_mask)
        off = ((cols.mean() + 0.5 - cam.width / 2.0) / cam.width,
               (rows.mean() + 0.5 - cam.height / 2.0) / cam.height)
        frac = vis / sil if sil else 0.0
        return VisibilityStats(vis, sil, float(min(1.0, frac)), (float(off[0]), float(off[1])),
                               float(obs.depth[vis_mask].mean()))

    return _silhouettes.get_or((scene.uid, pose.key(), cam, object_id), compute)


def write_pgm(path, image: np.ndarray, max_value: Optional[float] = None) -> None:
    """Binary 8-bit portable graymap; float images are scaled by ``max_value`` (or their max)."""
    img = np.asarray(image, dtype=float)
    top = max_value if max_value is not None else (img.max() if img.size and img.max() > 0 else 1.0)
    gray = np.clip(np.round(img / top * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def dump_frame(obs: Observation, prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    d, i = prefix.with_name(prefix.name + "_depth.pgm"), prefix.with_name(prefix.name + "_inst.pgm")
    write_pgm(d, obs.depth, obs.cam.max_range)
    ids = np.asarray(obs.instance, dtype=float)
    write_pgm(i, ids, max(1.0, float(ids.max())))
    return d, i
