"""Perception-feedback reward: format, confidence-delta and geometric-delta terms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

FORMAT_OK = 0.05
FORMAT_BAD = -0.05
MISROUTE_PENALTY = -1.0

DECISION_FIELDS = ("thoughts", "task_type", "prompt", "action")
ACTION_NAMES = ("move_forward", "turn_left", "turn_right", "look_up", "look_down", "stop")
TASK_NAMES = ("grounding", "segmentation", "box3d")


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5
    mu1: float = 0.5
    mu2: float = 0.5

    def __post_init__(self) -> None:
        for a, b, name in ((self.lambda1, self.lambda2, "lambda"), (self.mu1, self.mu2, "mu")):
            if a < 0 or b < 0 or abs(a + b - 1.0) > 1e-12:
                raise ValueError(f"{name} weights must be >= 0 and sum to 1, got ({a}, {b})")


@dataclass(frozen=True)
class GeomSnapshot:
    predicted_region_area: Optional[float]  # None = no prediction
    frame_area: float
    predicted_center: Optional[tuple[float, float]]
    frame_center: tuple[float, float]
    frame_size: tuple[float, float]

    @classmethod
    def absent(cls, width: float, height: float) -> "GeomSnapshot":
        return cls(None, width * height, None, (width / 2.0, height / 2.0), (width, height))

    @classmethod
    def of_region(cls, area: float, center, width: float, height: float) -> "GeomSnapshot":
        area = min(max(0.0, float(area)), width * height)
        return cls(area, width * height, (float(center[0]), float(center[1])),
                   (width / 2.0, height / 2.0), (width, height))


@dataclass(frozen=True)
class RewardBreakdown:
    r_f: float
    r_c: float
    r_a: float
    r_u: float
    g: float
    r_g: float
    total: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("r_f", "r_c", "r_a", "r_u", "g", "r_g", "total")}


def _no_duplicate_keys(pairs):
    keys = [k for k, _ in pairs]
    if len(keys) != len(set(keys)):
        raise ValueError("duplicate key")
    return dict(pairs)


def format_reward(raw_output: str) -> float:
    """+0.05 iff the output is a decision record with thoughts and exactly one action."""
    try:
        doc = json.loads(raw_output, object_pairs_hook=_no_duplicate_keys)
    except (ValueError, TypeError):
        return FORMAT_BAD
    if not isinstance(doc, dict) or set(doc) != set(DECISION_FIELDS):
        return FORMAT_BAD
    thoughts, action = doc["thoughts"], doc["action"]
    if not isinstance(thoughts, dict) or not isinstance(thoughts.get("text"), str):
        return FORMAT_BAD
    if not isinstance(action, dict) or set(action) != {"name"} or action["name"] not in ACTION_NAMES:
        return FORMAT_BAD
    if doc["task_type"] not in TASK_NAMES or not isinstance(doc["prompt"], str):
        return FORMAT_BAD
    return FORMAT_OK


def _check_unit(name: str, v: float) -> None:
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"{name}={v} outside [0, 1]")


def confidence_reward(c_t: float, c_prev: float) -> float:
    _check_unit("c_t", c_t)
    _check_unit("c_prev", c_prev)
    return c_t - c_prev


def area_reward(snap: GeomSnapshot) -> float:
    if snap.frame_area <= 0:
        raise ValueError("frame area must be positive")
    if snap.predicted_region_area is None:
        return 0.0
    return snap.predicted_region_area / snap.frame_area


def center_reward(snap: GeomSnapshot) -> float:
    if snap.predicted_center is None:
        return 0.0
    w, h = snap.frame_size
    dx = (snap.predicted_center[0] - snap.frame_center[0]) / w
    dy = (snap.predicted_center[1] - snap.frame_center[1]) / h
    d = min(1.0, math.hypot(dx, dy) / math.sqrt(2.0))
    return 1.0 - d


def geometric_score(snap: GeomSnapshot, weights: RewardWeights) -> float:
    g = weights.mu1 * area_reward(snap) + weights.mu2 * center_reward(snap)
    return min(1.0, max(0.0, g))


def geometric_reward(g_t: float, g_prev: float) -> float:
    _check_unit("g_t", g_t)
    _check_unit("g_prev", g_prev)
    return g_t - g_prev


def total_reward(h, h_gt, r_f: float, r_c: float, r_g: float, weights: RewardWeights) -> float:
    if h != h_gt:
        return MISROUTE_PENALTY
    return r_f + weights.lambda1 * r_c + weights.lambda2 * r_g


def step_breakdown(h, h_gt, raw_output: str, c_t: float, c_prev: float, snap: GeomSnapshot,
                   g_prev: float, weights: RewardWeights) -> RewardBreakdown:
    r_f = format_reward(raw_output)
    r_c = confidence_reward(c_t, c_prev)
    r_a = area_reward(snap)
    r_u = center_reward(snap)
    g = geometric_score(snap, weights)
    r_g = geometric_reward(g, g_prev)
    return RewardBreakdown(r_f, r_c, r_a, r_u, g, r_g, total_reward(h, h_gt, r_f, r_c, r_g, weights))
