"""Agent state machine: discrete actions, collisions and the episode lifecycle."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from .geomcore import CameraConfig, Pose
from .renderer import Observation, render, visibility
from .scenegen import TASK_TYPES, Instruction, Scene, largest_component, synthesize_instruction

STEP_SIZE = 0.25
TURN_STEP = 10.0
DEFAULT_HORIZON = 10


class Action(str, Enum):
    MOVE_FORWARD = "move_forward"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    LOOK_UP = "look_up"
    LOOK_DOWN = "look_down"
    STOP = "stop"

    @property
    def index(self) -> int:
        return ACTIONS.index(self)


ACTIONS = tuple(Action)


class EpisodeError(RuntimeError):
    pass


class SpawnError(EpisodeError):
    """No valid (pose, target) pair found within the retry budget."""


class DoneReason(str, Enum):
    STOPPED = "stopped"
    HORIZON = "horizon"


@dataclass(frozen=True)
class AgentState:
    pose: Pose
    step: int = 0
    done: bool = False
    done_reason: Optional[DoneReason] = None
    horizon: int = DEFAULT_HORIZON


@dataclass(frozen=True, eq=False)
class EpisodeSpec:
    scene: Scene
    instruction: Instruction
    start_pose: Pose
    horizon: int = DEFAULT_HORIZON
    seed: int = 0

    def initial_state(self) -> AgentState:
        return AgentState(self.start_pose, horizon=self.horizon)


@dataclass(frozen=True)
class SpawnConfig:
    visible_threshold: float = 0.01  # fraction of the frame
    max_tries: int = 60
    horizon: int = DEFAULT_HORIZON


def forward_target(pose: Pose) -> tuple[float, float]:
    yaw = math.radians(pose.yaw)
    return (pose.position[0] + STEP_SIZE * math.sin(yaw), pose.position[2] + STEP_SIZE * math.cos(yaw))


def step(state: AgentState, scene: Scene, action) -> AgentState:
    if state.done:
        raise EpisodeError("cannot step a finished episode")
    action = Action(action)
    pose = state.pose
    if action is Action.MOVE_FORWARD:
        x, z = forward_target(pose)
        if scene.navigable(scene.cell_of(x, z)):
            pose = Pose((x, pose.position[1], z), pose.yaw, pose.pitch)
    elif action is Action.TURN_LEFT:
        pose = Pose(pose.position, pose.yaw + TURN_STEP, pose.pitch)
    elif action is Action.TURN_RIGHT:
        pose = Pose(pose.position, pose.yaw - TURN_STEP, pose.pitch)
    elif action is Action.LOOK_UP:
        pose = Pose(pose.position, pose.yaw, pose.pitch + TURN_STEP)
    elif action is Action.LOOK_DOWN:
        pose = Pose(pose.position, pose.yaw, pose.pitch - TURN_STEP)
    n = state.step + 1
    if action is Action.STOP:
        return replace(state, pose=pose, step=n, done=True, done_reason=DoneReason.STOPPED)
    if n >= state.horizon:
        return replace(state, pose=pose, step=n, done=True, done_reason=DoneReason.HORIZON)
    return replace(state, pose=pose, step=n)


def observe(state: AgentState, scene: Scene, cam: CameraConfig) -> Observation:
    return render(scene, state.pose, cam, step_index=state.step)


def spawn_episode(scene: Scene, seed: int, cam: CameraConfig,
                  config: Optional[SpawnConfig] = None) -> EpisodeSpec:
    cfg = config or SpawnConfig()
    if not scene.objects:
        raise SpawnError("scene has no objects")
    rng = np.random.default_rng(seed)
    cells = np.argwhere(largest_component(scene.nav_grid))
    if len(cells) == 0:
        raise SpawnError("scene has no navigable cells")
    floor_px = cfg.visible_threshold * cam.frame_area
    for _ in range(cfg.max_tries):
        cell = tuple(int(v) for v in cells[int(rng.integers(len(cells)))])
        x, z = scene.cell_center(cell)
        pose = Pose((x, cam.eye_height, z), float(rng.integers(36)) * TURN_STEP, 0.0)
        candidates = [o.id for o in scene.objects
                      if visibility(scene, pose, cam, o.id).visible_pixels >= floor_px]
        if not candidates:
            continue
        target = candidates[int(rng.integers(len(candidates)))]
        task = TASK_TYPES[int(rng.integers(len(TASK_TYPES)))]
        instr = synthesize_instruction(scene, target, task, seed=int(rng.integers(2**31)))
        return EpisodeSpec(scene, instr, pose, cfg.horizon, int(seed))
    raise SpawnError(f"no valid spawn after {cfg.max_tries} tries (scene seed {scene.seed})")
