"""Episode construction and the shared rollout loop used by training and evaluation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .embodiment import Action, AgentState, EpisodeSpec, SpawnConfig, SpawnError, observe, spawn_episode, step
from .geomcore import CameraConfig, Pose
from .perceptsim import (
    EmulatorParams, PerceptionOutput, SegConfidenceWeights, perceive, region_of,
)
from .policies import (
    ActionDistribution, Decision, HeuristicThresholds, PerceptionSummary, PolicyParams, PolicyState,
    forward_policy, heuristic_policy, learned_policy, random_policy, route, shortest_path_policy,
    state_features,
)
from .rewardkit import GeomSnapshot, RewardBreakdown, RewardWeights, geometric_score, step_breakdown
from .scenegen import SceneConfig, TaskType, generate_scene


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints and strings."""
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode("utf-8")) for p in parts]
    return int(np.random.SeedSequence([abs(int(i)) for i in ints]).generate_state(1)[0])


@dataclass(frozen=True)
class EnvConfig:
    cam: CameraConfig = field(default_factory=CameraConfig)
    emulator: EmulatorParams = field(default_factory=EmulatorParams)
    seg_weights: SegConfidenceWeights = field(default_factory=SegConfidenceWeights)
    reward: RewardWeights = field(default_factory=RewardWeights)
    thresholds: HeuristicThresholds = field(default_factory=HeuristicThresholds)
    standoff: float = 1.5


def make_episodes(n: int, seed: int, split: str = "test", scene_config: Optional[SceneConfig] = None,
                  cam: Optional[CameraConfig] = None, spawn: Optional[SpawnConfig] = None,
                  per_scene: int = 5) -> tuple[list[EpisodeSpec], int]:
    """``n`` episode specs from fresh scenes; returns (specs, spawn failures skipped)."""
    cam = cam or CameraConfig()
    specs, failures, k = [], 0, 0
    while len(specs) < n:
        scene = generate_scene(derive_seed(seed, split, "scene", k), scene_config)
        for j in range(per_scene):
            if len(specs) >= n:
                break
            try:
                specs.append(spawn_episode(scene, derive_seed(seed, split, "spawn", k, j), cam, spawn))
            except SpawnError:
                failures += 1
        k += 1
        if failures > 10 * n + 100:
            raise SpawnError(f"too many spawn failures ({failures}) building {n} episodes")
    return specs, failures


# ------------------------------------------------------------ controllers


class Controller:
    """Routing at the first step plus one decision per step."""

    name = "controller"
    moves = True

    def route(self, spec: EpisodeSpec, seed: int):
        """(task type, prompt, routing distribution or None)."""
        return spec.instruction.task_type_gt, spec.instruction.description_gt, None

    def decide(self, spec: EpisodeSpec, state: PolicyState, seed: int) -> tuple[Decision, Optional[ActionDistribution]]:
        raise NotImplementedError


class ForwardController(Controller):
    name = "forward"

    def decide(self, spec, state, seed):
        return forward_policy(state), None


class RandomController(Controller):
    name = "random"

    def decide(self, spec, state, seed):
        return random_policy(state, seed), None


class HeuristicController(Controller):
    name = "heuristic"

    def __init__(self, thresholds: Optional[HeuristicThresholds] = None):
        self.thresholds = thresholds or HeuristicThresholds()

    def decide(self, spec, state, seed):
        return heuristic_policy(state, self.thresholds), None


class ShortestPathController(Controller):
    name = "shortest_path"

    def __init__(self, standoff: float = 1.5):
        self.standoff = standoff

    def decide(self, spec, state, seed):
        target = spec.scene.object_by_id(spec.instruction.target_id).box.center
        return shortest_path_policy(state, spec.scene, target, self.standoff), None


class PPMController(Controller):
    """Frozen module on the first frame; the agent never moves."""

    name = "ppm"
    moves = False


class LearnedController(Controller):
    name = "learned"

    def __init__(self, params: PolicyParams, temperature: float, name: str = "learned"):
        self.params = params
        self.temperature = temperature
        self.name = name

    def route(self, spec, seed):
        return route(spec.instruction.text, self.params, self.temperature, np.random.default_rng(seed))

    def decide(self, spec, state, seed):
        x = state_features(state)
        return learned_policy(state.instruction, x, self.params, self.temperature, seed,
                              routed=(state.task_type, state.prompt))


# ------------------------------------------------------------ rollout


@dataclass(frozen=True, eq=False)
class StepRecord:
    step: int
    pose_before: Pose
    pose_after: Pose
    decision: Decision
    raw_output: str
    perception: PerceptionOutput
    summary: PerceptionSummary
    reward: RewardBreakdown
    features: np.ndarray
    distribution: Optional[ActionDistribution] = None

    def log_row(self) -> dict:
        return {
            "step": self.step,
            "pose_before": _pose_dict(self.pose_before),
            "pose_after": _pose_dict(self.pose_after),
            "decision": self.decision.to_json(),
            "confidence": self.summary.confidence,
            "detected": self.summary.detected,
            "reward": self.reward.as_dict(),
            "action_probs": None if self.distribution is None else [float(p) for p in self.distribution.action_probs],
        }


def _pose_dict(p: Pose) -> dict:
    return {"position": [float(v) for v in p.position], "yaw": p.yaw, "pitch": p.pitch}


@dataclass(frozen=True, eq=False)
class Trajectory:
    spec: EpisodeSpec
    routed: TaskType
    prompt: str
    route_probs: Optional[np.ndarray]
    initial: PerceptionOutput
    initial_summary: PerceptionSummary
    g0: float
    steps: tuple[StepRecord, ...]
    final_state: AgentState

    @property
    def misrouted(self) -> bool:
        return self.routed != self.spec.instruction.task_type_gt

    @property
    def episode_return(self) -> float:
        return float(sum(s.reward.total for s in self.steps))

    @property
    def final_perception(self) -> PerceptionOutput:
        return self.steps[-1].perception if self.steps else self.initial

    @property
    def final_summary(self) -> PerceptionSummary:
        return self.steps[-1].summary if self.steps else self.initial_summary

    @property
    def final_g(self) -> float:
        return self.steps[-1].reward.g if self.steps else self.g0

    @property
    def final_pose(self) -> Pose:
        return self.final_state.pose


def summarize(out: PerceptionOutput, obs) -> PerceptionSummary:
    region = region_of(out, obs)
    w, h = obs.cam.width, obs.cam.height
    snap = GeomSnapshot.absent(w, h) if region is None else GeomSnapshot.of_region(region[0], region[1], w, h)
    return PerceptionSummary(float(out.confidence), snap)


def _perceive(spec: EpisodeSpec, env: EnvConfig, module: TaskType, prompt: str, obs, step_index: int):
    seed = derive_seed(spec.seed, "perception", step_index)
    out = perceive(module, obs, prompt, spec.scene, env.emulator, seed, env.seg_weights)
    return out, summarize(out, obs)


def run_episode(spec: EpisodeSpec, controller: Controller, env: EnvConfig, seed: int = 0) -> Trajectory:
    """Roll one episode to stop / horizon.

    Perception noise depends only on (episode seed, step), so every trajectory
    sampled from one spec sees common random numbers; ``seed`` drives the policy.
    """
    h, prompt, route_probs = controller.route(spec, derive_seed(seed, "route"))
    state = spec.initial_state()
    obs = observe(state, spec.scene, env.cam)
    out, summ = _perceive(spec, env, h, prompt, obs, 0)
    initial, initial_summary = out, summ
    g_prev = geometric_score(summ.snapshot, env.reward)
    g0 = g_prev
    c_prev = summ.confidence
    pstate = PolicyState(spec.instruction.text, h, prompt, 0, spec.horizon, [summ], None, state.pose)
    records = []
    while controller.moves and not state.done:
        decision, dist = controller.decide(spec, pstate, derive_seed(seed, "act", state.step))
        x = state_features(pstate)
        raw = decision.to_json()
        before = state.pose
        state = step(state, spec.scene, decision.action)
        if decision.action is not Action.STOP:
            obs = observe(state, spec.scene, env.cam)
            out, summ = _perceive(spec, env, h, prompt, obs, state.step)
        rb = step_breakdown(h, spec.instruction.task_type_gt, raw, summ.confidence, c_prev,
                            summ.snapshot, g_prev, env.reward)
        records.append(StepRecord(state.step, before, state.pose, decision, raw, out, summ, rb, x, dist))
        c_prev, g_prev = summ.confidence, rb.g
        pstate.history.append(summ)
        pstate.step = state.step
        pstate.last_action = decision.action
        pstate.pose = state.pose
    return Trajectory(spec, h, prompt, route_probs, initial, initial_summary, g0, tuple(records), state)
