"""Instruction parsing, the decision record, scripted baselines and the compact learned policy."""

from __future__ import annotations

import io
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embodiment import ACTIONS, Action, forward_target
from .geomcore import Pose
from .rewardkit import GeomSnapshot, area_reward
from .scenegen import (
    TASK_TYPES, TASK_VERBS, Scene, TaskType, astar_grid, bfs_distances,
)

N_FEATURES = 16
N_ACTIONS = len(ACTIONS)
N_TASKS = len(TASK_TYPES)
TOKEN_BUCKETS = 64
HIDDEN = 32
PARAMS_MAGIC = b"VIEWSEEK-PARAMS 1\n"


class InstructionParseError(ValueError):
    pass


# ------------------------------------------------------------ instructions


@dataclass(frozen=True)
class ParsedInstruction:
    task_type: TaskType
    prompt: str
    exact: bool = True


_KEYWORDS = (
    (TaskType.BOX3D, ("3d", "box", "estimate", "bounding")),
    (TaskType.SEGMENTATION, ("segment", "mask", "segmentation")),
    (TaskType.GROUNDING, ("locate", "find", "ground", "detect", "where")),
)


def parse_instruction(text: str) -> ParsedInstruction:
    """Invert the instruction template; off-grammar text falls back to verb keywords."""
    stripped = text.strip()
    # longest verb first so "estimate the 3D box of" wins over any shorter prefix
    for task, verb in sorted(TASK_VERBS.items(), key=lambda kv: -len(kv[1])):
        prefix = f"{verb} the "
        if stripped.startswith(prefix) and len(stripped) > len(prefix):
            return ParsedInstruction(task, stripped[len(prefix):], True)
    tokens = stripped.lower().replace(",", " ").split()
    for task, keys in _KEYWORDS:
        if any(k in tokens for k in keys):
            words = [t for t in tokens if t not in keys and t not in ("the", "a", "an", "of", "please")]
            return ParsedInstruction(task, " ".join(words), False)
    raise InstructionParseError(f"no task verb in {text!r}")


def encode_instruction(text: str) -> np.ndarray:
    """Bag-of-tokens vector with stable hashing into ``TOKEN_BUCKETS`` bins (plus a bias slot)."""
    v = np.zeros(TOKEN_BUCKETS + 1)
    for tok in text.lower().split():
        v[zlib.crc32(tok.encode("utf-8")) % TOKEN_BUCKETS] += 1.0
    v[TOKEN_BUCKETS] = 1.0
    return v


# ------------------------------------------------------------ decisions


@dataclass(frozen=True)
class Decision:
    thoughts: str
    task_type: TaskType
    prompt: str
    action: Action

    def to_json(self) -> str:
        # field order: thoughts, task_type, prompt, action
        return json.dumps({
            "thoughts": {"text": self.thoughts},
            "task_type": TaskType(self.task_type).value,
            "prompt": self.prompt,
            "action": {"name": Action(self.action).value},
        })


@dataclass(frozen=True)
class PerceptionSummary:
    confidence: float
    snapshot: GeomSnapshot

    @property
    def detected(self) -> bool:
        return self.snapshot.predicted_region_area is not None

    @property
    def area_ratio(self) -> float:
        return area_reward(self.snapshot)

    @property
    def center_offset(self) -> tuple[float, float]:
        if self.snapshot.predicted_center is None:
            return (0.0, 0.0)
        (cx, cy), (fx, fy), (w, h) = (self.snapshot.predicted_center, self.snapshot.frame_center,
                                      self.snapshot.frame_size)
        return (float(np.clip((cx - fx) / w, -0.5, 0.5)), float(np.clip((cy - fy) / h, -0.5, 0.5)))


@dataclass
class PolicyState:
    """What a controller sees when choosing the next action."""

    instruction: str
    task_type: TaskType
    prompt: str
    step: int
    horizon: int
    history: list = field(default_factory=list)  # PerceptionSummary per observed frame
    last_action: Optional[Action] = None
    pose: Optional[Pose] = None


def featurize(history: Sequence[PerceptionSummary], last_action: Optional[Action], step: int,
              horizon: int, task_type: TaskType) -> np.ndarray:
    if not history:
        raise ValueError("featurize needs at least one perception output")
    cur = history[-1]
    prev = history[-2] if len(history) > 1 else cur
    ox, oy = cur.center_offset
    x = np.zeros(N_FEATURES)
    x[0] = cur.confidence
    x[1] = prev.confidence
    x[2] = cur.area_ratio
    x[3], x[4] = ox, oy
    x[5] = 1.0 if cur.detected else 0.0
    x[6] = step / horizon
    if last_action is not None:
        x[7 + Action(last_action).index] = 1.0
    x[13 + TaskType(task_type).index] = 1.0
    return x


def state_features(state: PolicyState) -> np.ndarray:
    return featurize(state.history, state.last_action, state.step, state.horizon, state.task_type)


# ------------------------------------------------------------ baselines


def _decision(state: PolicyState, action: Action, thoughts: str) -> Decision:
    return Decision(thoughts, state.task_type, state.prompt, action)


def forward_policy(state: PolicyState) -> Decision:
    return _decision(state, Action.MOVE_FORWARD, "always advance")


def random_policy(state: PolicyState, seed: int) -> Decision:
    rng = np.random.default_rng(seed)
    a = ACTIONS[int(rng.integers(N_ACTIONS))]
    return _decision(state, a, "random action")


@dataclass(frozen=True)
class HeuristicThresholds:
    area_threshold: float = 0.08


def heuristic_action(last: PerceptionSummary, thresholds: HeuristicThresholds) -> tuple[Action, str]:
    """Search / centering / approach phase logic over one perception summary."""
    if not last.detected or last.confidence <= 0.0:
        return Action.TURN_RIGHT, "search: target not detected, rotate"
    (cx, cy), (w, h) = last.snapshot.predicted_center, last.snapshot.frame_size
    if cx < w / 3.0:
        return Action.TURN_LEFT, "center: target left of middle cell"
    if cx > 2.0 * w / 3.0:
        return Action.TURN_RIGHT, "center: target right of middle cell"
    if cy < h / 3.0:
        return Action.LOOK_UP, "center: target above middle cell"
    if cy > 2.0 * h / 3.0:
        return Action.LOOK_DOWN, "center: target below middle cell"
    if last.area_ratio < thresholds.area_threshold:
        return Action.MOVE_FORWARD, "approach: centered but small"
    return Action.STOP, "stop: centered and large enough"


def heuristic_policy(state: PolicyState, thresholds: Optional[HeuristicThresholds] = None) -> Decision:
    action, trace = heuristic_action(state.history[-1], thresholds or HeuristicThresholds())
    return _decision(state, action, trace)


def _wrap180(a: float) -> float:
    return (a + 180.0) % 360.0 - 180.0


def _turns_needed(delta: float) -> int:
    return int(math.ceil(max(0.0, abs(delta) - 5.0) / 10.0))


def _bearing(dx: float, dz: float) -> float:
    return math.degrees(math.atan2(dx, dz))


def _facing_cost(yaw: float, pitch: float, pos, target_center) -> int:
    dx, dz = target_center[0] - pos[0], target_center[2] - pos[2]
    want_yaw = _bearing(dx, dz)
    want_pitch = math.degrees(math.atan2(target_center[1] - pos[1], math.hypot(dx, dz)))
    want_pitch = max(-60.0, min(60.0, want_pitch))
    return _turns_needed(_wrap180(want_yaw - yaw)) + _turns_needed(want_pitch - pitch)


def _line_clear(scene: Scene, a, b) -> bool:
    """True when every cell the floor segment a-b passes through is navigable."""
    n = max(1, int(math.ceil(math.hypot(b[0] - a[0], b[1] - a[1]) / (0.2 * scene.cell_size))))
    for k in range(n + 1):
        x = a[0] + (b[0] - a[0]) * k / n
        z = a[1] + (b[1] - a[1]) * k / n
        if not scene.navigable(scene.cell_of(x, z)):
            return False
    return True


def _waypoints(scene: Scene, pos, path) -> list[tuple[float, float]]:
    """String-pull a grid path into straight floor segments starting at ``pos``."""
    pts = [scene.cell_center(c) for c in path[1:]]
    out, cur, i = [], (pos[0], pos[2]), 0
    while i < len(pts):
        j = len(pts) - 1
        while j > i and not _line_clear(scene, cur, pts[j]):
            j -= 1
        out.append(pts[j])
        cur, i = pts[j], j + 1
    return out


def _path_cost(scene: Scene, pos, path, yaw: float) -> tuple[int, float]:
    steps, cur = 0, (pos[0], pos[2])
    for wp in _waypoints(scene, pos, path):
        dx, dz = wp[0] - cur[0], wp[1] - cur[1]
        heading = _bearing(dx, dz)
        steps += _turns_needed(_wrap180(heading - yaw)) + int(round(math.hypot(dx, dz) / 0.25))
        yaw, cur = heading, wp
    return steps, yaw


def standoff_goal(scene: Scene, pose: Pose, target_center, standoff: float,
                  budget: Optional[int] = None):
    """Cheapest reachable cell in the best standoff-ring band, honouring a step budget.

    Bands are 0.25 m wide in |distance to target - standoff|.  Within the first
    band that has a cell affordable under ``budget`` (turns + moves + final
    facing), the cheapest cell wins.  Returns ``(goal_cell, path)``, the start
    cell when nothing is affordable, or None off the navigable grid.
    """
    start = scene.cell_of(pose.position[0], pose.position[2])
    if not scene.navigable(start):
        return None
    dist = bfs_distances(scene.nav_grid, start)
    cells = np.argwhere(dist >= 0)
    if budget is not None:
        # string-pulled paths shorten grid distance by at most sqrt(2)
        cells = cells[dist[cells[:, 0], cells[:, 1]] <= budget * math.sqrt(2.0) + 1]
    centers = np.array([scene.cell_center(tuple(c)) for c in cells])
    band = np.round(np.abs(np.hypot(centers[:, 0] - target_center[0],
                                    centers[:, 1] - target_center[2]) - standoff) / 0.25)
    for b in np.unique(band):
        best = None
        for idx in np.nonzero(band == b)[0]:
            cell = tuple(int(v) for v in cells[idx])
            path = astar_grid(scene.nav_grid, start, cell)
            if path is None:
                continue
            moves, yaw = _path_cost(scene, pose.position, path, pose.yaw)
            cx, cz = scene.cell_center(cell)
            cost = moves + _facing_cost(yaw, pose.pitch, (cx, pose.position[1], cz), target_center)
            if budget is not None and cost > budget:
                continue
            if best is None or (cost, cell) < best[0]:
                best = ((cost, cell), path)
        if best is not None:
            return best[0][1], best[1]
    return start, [start]


def shortest_path_action(scene: Scene, pose: Pose, target_center, standoff: float,
                         budget: Optional[int] = None, moving: bool = False) -> tuple[Action, str]:
    """Next oracle action; ``moving`` widens the heading tolerance after a forward step."""
    plan = standoff_goal(scene, pose, target_center, standoff, budget)
    if plan is None:
        return Action.STOP, "oracle: no navigable start cell, stop in place"
    goal, path = plan
    if len(path) > 1:
        x, z = forward_target(pose)
        for nxt in (_waypoints(scene, pose.position, path)[0], scene.cell_center(path[1])):
            heading = _bearing(nxt[0] - pose.position[0], nxt[1] - pose.position[2])
            delta = _wrap180(heading - pose.yaw)
            # hysteresis: 45 degree segments sit on the 5 degree boundary and would zigzag
            if abs(delta) > (10.0 if moving else 5.0):
                return (Action.TURN_LEFT if delta > 0 else Action.TURN_RIGHT), "oracle: face next waypoint"
            # a quantized heading can clip an obstacle corner; fall back to the raw grid step
            if scene.navigable(scene.cell_of(x, z)):
                return Action.MOVE_FORWARD, f"oracle: follow path to {goal}"
        return Action.TURN_LEFT, "oracle: forward blocked, turn"
    dx, dz = target_center[0] - pose.position[0], target_center[2] - pose.position[2]
    dyaw = _wrap180(_bearing(dx, dz) - pose.yaw)
    if abs(dyaw) > 5.0:
        return (Action.TURN_LEFT if dyaw > 0 else Action.TURN_RIGHT), "oracle: turn toward target"
    want_pitch = math.degrees(math.atan2(target_center[1] - pose.position[1], math.hypot(dx, dz)))
    dpitch = max(-60.0, min(60.0, want_pitch)) - pose.pitch
    if abs(dpitch) > 5.0:
        return (Action.LOOK_UP if dpitch > 0 else Action.LOOK_DOWN), "oracle: tilt toward target"
    return Action.STOP, "oracle: at standoff and facing target"


def shortest_path_policy(state: PolicyState, scene: Scene, target_center, standoff: float = 1.5) -> Decision:
    action, trace = shortest_path_action(scene, state.pose, target_center, standoff,
                                         budget=state.horizon - state.step,
                                         moving=state.last_action is Action.MOVE_FORWARD)
    return _decision(state, action, trace)


# ------------------------------------------------------------ learned policy


PARAM_SHAPES = {
    "route_w": (N_TASKS, TOKEN_BUCKETS + 1),
    "w1": (HIDDEN, N_FEATURES),
    "b1": (HIDDEN,),
    "w2": (N_ACTIONS, HIDDEN),
    "b2": (N_ACTIONS,),
}


class PolicyParams(dict):
    """Named float64 arrays of the routing head and the action MLP."""

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self[k].ravel() for k in sorted(self)])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())

    @property
    def n_actions(self) -> int:
        return self["w2"].shape[0]


def init_params(seed: int, n_features: int = N_FEATURES, n_actions: int = N_ACTIONS,
                hidden: int = HIDDEN) -> PolicyParams:
    rng = np.random.default_rng(seed)
    return PolicyParams({
        "route_w": rng.normal(0.0, 0.01, (N_TASKS, TOKEN_BUCKETS + 1)),
        "w1": rng.normal(0.0, math.sqrt(2.0 / n_features), (hidden, n_features)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 0.01, (n_actions, hidden)),
        "b2": np.zeros(n_actions),
    })


def action_logits(params: PolicyParams, x: np.ndarray) -> np.ndarray:
    """Logits for features ``x`` of shape (F,) or (N, F)."""
    h = np.maximum(0.0, x @ params["w1"].T + params["b1"])
    return h @ params["w2"].T + params["b2"]


def route_logits(params: PolicyParams, tokens: np.ndarray) -> np.ndarray:
    return tokens @ params["route_w"].T


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if temperature <= 0.0:
        out = np.zeros_like(z)
        idx = np.argmax(z, axis=-1)
        np.put_along_axis(out, np.expand_dims(idx, -1), 1.0, axis=-1)
        return out
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


@dataclass(frozen=True)
class ActionDistribution:
    action_probs: np.ndarray
    route_probs: Optional[np.ndarray] = None

    def log_prob(self, action: Action) -> float:
        return float(np.log(self.action_probs[Action(action).index]))


def route(instruction: str, params: PolicyParams, temperature: float,
          rng: np.random.Generator) -> tuple[TaskType, str, np.ndarray]:
    probs = softmax(route_logits(params, encode_instruction(instruction)), temperature)
    h = TASK_TYPES[sample_index(probs, rng)]
    try:
        prompt = parse_instruction(instruction).prompt
    except InstructionParseError:
        prompt = instruction
    return h, prompt, probs


def learned_policy(instruction: str, features: np.ndarray, params: PolicyParams, temperature: float,
                   seed: int, routed: Optional[tuple[TaskType, str]] = None):
    """One decision of the learned controller.

    Routing is sampled only when ``routed`` is None (the first step); afterwards the
    caller passes the frozen ``(task_type, prompt)`` back in.
    """
    rng = np.random.default_rng(seed)
    route_probs = None
    if routed is None:
        h, prompt, route_probs = route(instruction, params, temperature, rng)
        features = features.copy()
        features[13:16] = 0.0
        features[13 + h.index] = 1.0
    else:
        h, prompt = routed
    probs = softmax(action_logits(params, features), temperature)
    a = ACTIONS[sample_index(probs, rng)]
    decision = Decision(f"learned policy: p(action)={probs[a.index]:.3f}", h, prompt, a)
    return decision, ActionDistribution(probs, route_probs)


# ------------------------------------------------------------ serialization


def dumps_params(params: PolicyParams) -> bytes:
    names = sorted(params)
    header = {"format_version": 1, "dtype": "<f8",
              "arrays": [{"name": k, "shape": list(params[k].shape)} for k in names]}
    buf = io.BytesIO()
    buf.write(PARAMS_MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for k in names:
        buf.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return buf.getvalue()


def loads_params(data: bytes) -> PolicyParams:
    if not data.startswith(PARAMS_MAGIC):
        raise ValueError("not a parameter file (bad magic)")
    rest = data[len(PARAMS_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl].decode("utf-8"))
    if header.get("format_version") != 1:
        raise ValueError(f"unsupported parameter format {header.get('format_version')!r}")
    body = rest[nl + 1:]
    out, off = PolicyParams(), 0
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        chunk = body[off:off + 8 * n]
        if len(chunk) != 8 * n:
            raise ValueError(f"truncated parameter file at array {spec['name']!r}")
        out[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(spec["shape"]).astype(float)
        off += 8 * n
    if off != len(body):
        raise ValueError("trailing bytes in parameter file")
    return out


def save_params(params: PolicyParams, path) -> None:
    Path(path).write_bytes(dumps_params(params))


def load_params(path) -> PolicyParams:
    return loads_params(Path(path).read_bytes())
