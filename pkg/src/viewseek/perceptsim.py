"""Frozen perception modules behind a single (observation, prompt) -> (prediction, confidence) interface.

Grounding and segmentation are emulators: they read the scene's ground truth
internally and degrade it according to how informative the viewpoint is.  The
3D box estimator is a real estimator working from the mask and depth image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .geomcore import (
    Box2D, CameraConfig, OrientedBox3D, backproject_pixels, clip_convex, convex_hull_2d,
    fit_min_area_obb, polygon_centroid, polygon_signed_area,
)
from .renderer import Observation, VisibilityStats, visibility
from .scenegen import Scene, TaskType, resolve_description

REFERENCE_FRAME_AREA = 128 * 128
NEAR_PLANE = 0.05

Prediction = Union[Box2D, np.ndarray, OrientedBox3D, None]


@dataclass(frozen=True)
class EmulatorParams:
    noise_std: float = 0.05
    detect_floor: float = 20.0  # visible pixels at 128x128, scaled with frame area
    preferred_distance: float = 1.5
    distance_band: float = 3.0
    w_visible: float = 0.5
    w_center: float = 0.25
    w_distance: float = 0.25
    box_gain: float = 0.5
    mask_gain: float = 8.0  # boundary band width in pixels at 128x128 when s = 0
    angle_step: float = 0.5

    def __post_init__(self) -> None:
        w = (self.w_visible, self.w_center, self.w_distance)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("informativeness weights must be >= 0 and sum to 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.distance_band <= 0:
            raise ValueError("distance_band must be positive")
        if min(self.box_gain, self.mask_gain, self.detect_floor) < 0:
            raise ValueError("gains and detect_floor must be >= 0")


@dataclass(frozen=True)
class SegConfidenceWeights:
    mu3: float = 0.5
    mu4: float = 0.5

    def __post_init__(self) -> None:
        if min(self.mu3, self.mu4) < 0 or abs(self.mu3 + self.mu4 - 1.0) > 1e-9:
            raise ValueError("mu3, mu4 must be >= 0 and sum to 1")


@dataclass(frozen=True, eq=False)
class PerceptionOutput:
    prediction: Prediction
    confidence: float
    module: TaskType
    flags: tuple[str, ...] = ()
    details: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.prediction is None and self.confidence != 0.0:
            raise ValueError("absent prediction must carry zero confidence")

    @property
    def detected(self) -> bool:
        if self.prediction is None:
            return False
        if isinstance(self.prediction, np.ndarray):
            return bool(self.prediction.any())
        return True


def _none(module: TaskType, *flags: str, **details) -> PerceptionOutput:
    return PerceptionOutput(None, 0.0, module, tuple(flags), dict(details))


def _clamp01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def informativeness(stats: VisibilityStats, depth_to_target: float, params: EmulatorParams) -> float:
    """Viewpoint quality in [0, 1] from visibility, centering and standoff distance."""
    if stats.visible_pixels == 0:
        return 0.0
    centering = 1.0 - 2.0 * math.hypot(*stats.center_offset) / math.sqrt(2.0)
    distance = _clamp01(1.0 - abs(depth_to_target - params.preferred_distance) / params.distance_band)
    s = (params.w_visible * stats.visible_fraction + params.w_center * centering
         + params.w_distance * distance)
    return _clamp01(s)


@dataclass(frozen=True)
class _TargetView:
    object_id: int
    stats: VisibilityStats
    s: float


def _target_view(obs: Observation, prompt: str, scene: Scene, params: EmulatorParams):
    oid = resolve_description(scene, prompt)
    if oid is None:
        return None
    stats = visibility(scene, obs.pose, obs.cam, oid)
    return _TargetView(oid, stats, informativeness(stats, stats.mean_depth, params))


def _detect_floor(params: EmulatorParams, cam: CameraConfig) -> float:
    return params.detect_floor * cam.frame_area / REFERENCE_FRAME_AREA


def tight_box(mask: np.ndarray) -> Optional[Box2D]:
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return None
    return Box2D(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))


def ground(obs: Observation, prompt: str, scene: Scene, params: EmulatorParams,
           rng_seed: int) -> PerceptionOutput:
    view = _target_view(obs, prompt, scene, params)
    if view is None:
        return _none(TaskType.GROUNDING, "unresolved_prompt")
    if view.stats.visible_pixels < _detect_floor(params, obs.cam):
        return _none(TaskType.GROUNDING, "below_detect_floor", s=view.s)
    box = tight_box(obs.instance == view.object_id)
    rng = np.random.default_rng(rng_seed)
    jitter = rng.standard_normal(4) * (1.0 - view.s) * params.box_gain
    w, h = box.xmax - box.xmin, box.ymax - box.ymin
    cx, cy = box.center
    cx += jitter[0] * w
    cy += jitter[1] * h
    w = max(1.0, w * (1.0 + jitter[2]))
    h = max(1.0, h * (1.0 + jitter[3]))
    pred = Box2D(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clipped(obs.cam.width, obs.cam.height)
    conf = _clamp01(view.s + params.noise_std * rng.standard_normal())
    return PerceptionOutput(pred, conf, TaskType.GROUNDING, (), {"s": view.s, "target_id": view.object_id})


def _box_pixel_mask(box: Box2D, shape) -> np.ndarray:
    h, w = shape
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    inside_c = (cols >= box.xmin) & (cols <= box.xmax)
    inside_r = (rows >= box.ymin) & (rows <= box.ymax)
    return inside_r[:, None] & inside_c[None, :]


def segment(obs: Observation, prompt: str, scene: Scene, params: EmulatorParams,
            weights: Optional[SegConfidenceWeights] = None, rng_seed: int = 0) -> PerceptionOutput:
    weights = weights or SegConfidenceWeights()
    det = ground(obs, prompt, scene, params, rng_seed)
    empty = np.zeros((obs.cam.height, obs.cam.width), dtype=bool)
    if det.prediction is None:
        return PerceptionOutput(empty, 0.0, TaskType.SEGMENTATION, det.flags,
                                {"det_conf": 0.0, "mask_conf": 0.0})
    s = det.details["s"]
    oid = det.details["target_id"]
    rng = np.random.default_rng([rng_seed, 1])
    mask = (obs.instance == oid) & _box_pixel_mask(det.prediction, empty.shape)
    band_px = int(round((1.0 - s) * params.mask_gain * obs.cam.width / 128.0))
    if band_px > 0 and mask.any():
        outer = ndimage.binary_dilation(mask, iterations=band_px)
        inner = ndimage.binary_erosion(mask, iterations=band_px)
        band = outer & ~inner
        flips = band & (rng.random(mask.shape) < 0.5)
        mask = mask ^ flips
    c_mask = _clamp01(s + params.noise_std * rng.standard_normal())
    conf = _clamp01(weights.mu3 * det.confidence + weights.mu4 * c_mask)
    return PerceptionOutput(mask, conf, TaskType.SEGMENTATION, (),
                            {"s": s, "target_id": oid, "det_conf": det.confidence, "mask_conf": c_mask,
                             "det_box": det.prediction})


def estimate_box3d(obs: Observation, mask: np.ndarray, detector_conf: float, mask_conf: float,
                   params: EmulatorParams) -> PerceptionOutput:
    """Point cloud from mask x depth, MAD outlier filter, minimum-footprint box fit."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != obs.depth.shape:
        raise ValueError("mask must match the frame")
    valid = mask & (obs.depth < obs.cam.max_range)
    rows, cols = np.nonzero(valid)
    total = len(rows)
    if total < 3:
        return _none(TaskType.BOX3D, "too_few_points", points=total)
    depth = obs.depth[rows, cols].astype(float)
    med = float(np.median(depth))
    mad = float(np.median(np.abs(depth - med)))
    # identical depths give MAD 0; a 1 cm floor keeps the filter from rejecting rounding noise
    keep = np.abs(depth - med) <= 3.0 * max(mad, 0.01)
    kept = int(keep.sum())
    if kept < 3:
        return _none(TaskType.BOX3D, "too_few_points", points=kept)
    pts = backproject_pixels(obs.cam, obs.pose, cols[keep], rows[keep], depth[keep])
    fit = fit_min_area_obb(pts, params.angle_step)
    g_count = min(kept / 200.0, 1.0)
    g_retain = kept / total
    g_depth = 1.0 - _clamp01(mad / 0.25)
    conf = _clamp01(float(np.mean([detector_conf, mask_conf, g_count, g_retain, g_depth])))
    flags = ("degenerate_fit",) if fit.degenerate else ()
    return PerceptionOutput(fit.box, conf, TaskType.BOX3D, flags,
                            {"det_conf": detector_conf, "mask_conf": mask_conf, "g_count": g_count,
                             "g_retain": g_retain, "g_depth": g_depth, "points": kept})


def perceive(module, obs: Observation, prompt: str, scene: Scene, params: EmulatorParams,
             rng_seed: int, weights: Optional[SegConfidenceWeights] = None) -> PerceptionOutput:
    try:
        module = TaskType(module)
    except ValueError:
        raise ValueError(f"unknown perception module {module!r}") from None
    if module is TaskType.GROUNDING:
        return ground(obs, prompt, scene, params, rng_seed)
    seg = segment(obs, prompt, scene, params, weights, rng_seed)
    if module is TaskType.SEGMENTATION:
        return seg
    if not seg.detected:
        return _none(TaskType.BOX3D, *seg.flags, "no_mask")
    out = estimate_box3d(obs, seg.prediction, seg.details["det_conf"], seg.details["mask_conf"], params)
    out.details["target_id"] = seg.details["target_id"]
    return out


# ------------------------------------------------------------ region geometry


def projected_box_polygon(box: OrientedBox3D, obs: Observation) -> np.ndarray:
    """Image-plane hull of a 3D box, clipped to the near plane and the frame."""
    cam, pose = obs.cam, obs.pose
    right, up, forward = pose.axes()
    corners = box.corners()
    rel = corners - np.asarray(pose.position)
    depth = rel @ forward
    pts = [rel[i] for i in range(8) if depth[i] > NEAR_PLANE]
    # box edges: pairs of corners differing in exactly one local coordinate
    for i in range(8):
        for j in range(i + 1, 8):
            same_layer = (i < 4) == (j < 4)
            adjacent = (abs(i - j) in (1, 3) and same_layer) or j - i == 4
            if not adjacent:
                continue
            di, dj = depth[i] - NEAR_PLANE, depth[j] - NEAR_PLANE
            if di * dj < 0:
                t = di / (di - dj)
                pts.append(rel[i] + t * (rel[j] - rel[i]))
    if len(pts) < 3:
        return np.zeros((0, 2))
    pts = np.array(pts)
    d = pts @ forward
    f = cam.focal
    uv = np.stack([cam.width / 2.0 + f * (pts @ right) / d, cam.height / 2.0 - f * (pts @ up) / d], 1)
    hull = convex_hull_2d(uv)
    if len(hull) < 3:
        return np.zeros((0, 2))
    frame = np.array([[0.0, 0.0], [cam.width, 0.0], [cam.width, cam.height], [0.0, cam.height]])
    return clip_convex(hull, frame)


def region_of(out: PerceptionOutput, obs: Observation) -> Optional[tuple[float, tuple[float, float]]]:
    """(area in pixels, center in pixels) of the predicted region, or None when absent."""
    if not out.detected:
        return None
    pred = out.prediction
    if isinstance(pred, Box2D):
        return float(pred.area), pred.center
    if isinstance(pred, np.ndarray):
        rows, cols = np.nonzero(pred)
        return float(len(rows)), (float(cols.mean() + 0.5), float(rows.mean() + 0.5))
    poly = projected_box_polygon(pred, obs)
    if len(poly) < 3:
        return None
    area = abs(polygon_signed_area(poly))
    if area <= 0:
        return None
    c = polygon_centroid(poly)
    return float(area), (float(c[0]), float(c[1]))
