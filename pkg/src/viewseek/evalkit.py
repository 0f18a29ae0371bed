"""Episode scoring, metric tables, bootstrap comparisons and the ablation harness."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embodiment import EpisodeSpec
from .episodes import Controller, EnvConfig, LearnedController, PPMController, Trajectory, derive_seed, run_episode
from .geomcore import Box2D, OrientedBox3D, dice_masks, iou_box2d, iou_masks, iou_obb3d
from .perceptsim import tight_box
from .renderer import render
from .rewardkit import RewardWeights
from .scenegen import TaskType
from .trainkit import TrainConfig, train

TABLE_COLUMNS = ("n", "geo_score", "task_score", "ap50", "ap75", "map_avg", "seg_iou", "dice",
                 "iou3d", "center_score")


def center_score(pred: OrientedBox3D, gt: OrientedBox3D) -> float:
    """1 - center distance / gt diagonal, clamped to [0, 1]."""
    diag = 2.0 * float(np.linalg.norm(gt.half_extents))
    d = float(np.linalg.norm(np.asarray(pred.center) - np.asarray(gt.center)))
    return 1.0 - min(1.0, max(0.0, d / diag))


# ------------------------------------------------------------ per-episode results


@dataclass(frozen=True)
class EpisodeResult:
    episode_id: int
    policy: str
    routed: TaskType
    task_type_gt: TaskType
    metrics: dict  # zeroed on misroute
    geo_score: float  # final geometric score, zeroed on misroute
    task_score: float
    trajectory_length: int
    terminal_cause: str
    prediction: Optional[dict] = None
    ground_truth: Optional[dict] = None

    @property
    def misrouted(self) -> bool:
        return self.routed != self.task_type_gt

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id, "policy": self.policy, "routed": self.routed.value,
            "task_type_gt": self.task_type_gt.value, "misrouted": self.misrouted, "metrics": self.metrics,
            "geo_score": self.geo_score, "task_score": self.task_score,
            "trajectory_length": self.trajectory_length, "terminal_cause": self.terminal_cause,
            "prediction": self.prediction, "ground_truth": self.ground_truth,
        }


def _box_dict(b: Box2D) -> dict:
    return {"box2d": [b.xmin, b.ymin, b.xmax, b.ymax]}


def _obb_dict(b: OrientedBox3D) -> dict:
    return {"box3d": {"center": [float(v) for v in b.center], "half_extents": [float(v) for v in b.half_extents],
                      "yaw": b.yaw}}


def _mask_dict(m: np.ndarray) -> dict:
    flat = np.asarray(m, dtype=np.int8).ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate([[0], change, [len(flat)]]))
    return {"mask_rle": {"shape": list(m.shape), "first": int(flat[0]) if len(flat) else 0,
                         "runs": [int(r) for r in runs]}}


def task_score(task: TaskType, metrics: dict) -> float:
    """Single per-episode task quality in [0, 1]."""
    if task is TaskType.GROUNDING:
        return (metrics["hit50"] + metrics["hit75"]) / 2.0
    if task is TaskType.SEGMENTATION:
        return (metrics["iou"] + metrics["dice"]) / 2.0
    return (metrics["iou3d"] + metrics["center_score"]) / 2.0


def _zero_metrics(task: TaskType) -> dict:
    if task is TaskType.GROUNDING:
        return {"iou": 0.0, "hit50": 0.0, "hit75": 0.0}
    if task is TaskType.SEGMENTATION:
        return {"iou": 0.0, "dice": 0.0}
    return {"iou3d": 0.0, "center_score": 0.0}


def score_trajectory(tr: Trajectory, env: EnvConfig, episode_id: int, policy: str) -> EpisodeResult:
    """Score the final module output against ground truth at the final pose."""
    spec = tr.spec
    task = spec.instruction.task_type_gt
    target = spec.instruction.target_id
    obs = render(spec.scene, tr.final_pose, env.cam)
    gt_mask = obs.instance == target
    out = tr.final_perception
    metrics = _zero_metrics(task)
    pred_d = gt_d = None
    if task is TaskType.BOX3D:
        gt_box = spec.scene.object_by_id(target).box
        gt_d = _obb_dict(gt_box)
    elif task is TaskType.GROUNDING:
        gt_box = tight_box(gt_mask)
        gt_d = _box_dict(gt_box) if gt_box is not None else None
    else:
        gt_d = _mask_dict(gt_mask)
    visible = bool(gt_mask.any())
    if not tr.misrouted and out.detected and visible:
        pred = out.prediction
        if task is TaskType.GROUNDING:
            iou = iou_box2d(pred, gt_box)
            metrics = {"iou": iou, "hit50": float(iou >= 0.5), "hit75": float(iou >= 0.75)}
            pred_d = _box_dict(pred)
        elif task is TaskType.SEGMENTATION:
            metrics = {"iou": iou_masks(pred, gt_mask), "dice": dice_masks(pred, gt_mask)}
            pred_d = _mask_dict(pred)
        else:
            metrics = {"iou3d": iou_obb3d(pred, gt_box), "center_score": center_score(pred, gt_box)}
            pred_d = _obb_dict(pred)
    elif out.detected:
        pred = out.prediction
        pred_d = (_box_dict(pred) if isinstance(pred, Box2D) else _obb_dict(pred)
                  if isinstance(pred, OrientedBox3D) else _mask_dict(pred))
    geo = 0.0 if tr.misrouted else float(tr.final_g)
    cause = "first_frame" if not tr.steps else tr.final_state.done_reason.value
    return EpisodeResult(episode_id, policy, tr.routed, task, metrics, geo, task_score(task, metrics),
                         len(tr.steps), cause, pred_d, gt_d)


# ------------------------------------------------------------ aggregation


def ap_at(results: Sequence[EpisodeResult], tau: float) -> float:
    """Thresholded success rate over grounding episodes (one target, one prediction each)."""
    rs = [r for r in results if r.task_type_gt is TaskType.GROUNDING]
    if not rs:
        raise ValueError("no grounding episodes")
    return sum(1 for r in rs if not r.misrouted and r.metrics["iou"] >= tau) / len(rs)


def map_avg(results: Sequence[EpisodeResult]) -> float:
    return (ap_at(results, 0.5) + ap_at(results, 0.75)) / 2.0


def _mean(xs) -> float:
    # fsum keeps aggregation independent of episode order
    xs = list(xs)
    return math.fsum(xs) / len(xs) if xs else 0.0


@dataclass(frozen=True)
class MetricsRow:
    policy: str
    values: dict  # column -> value (None when the task has no episodes)
    counts: dict  # task -> episodes


def summarize_results(policy: str, results: Sequence[EpisodeResult]) -> MetricsRow:
    by = {t: [r for r in results if r.task_type_gt is t] for t in TaskType}
    g, s, b = by[TaskType.GROUNDING], by[TaskType.SEGMENTATION], by[TaskType.BOX3D]
    vals = {
        "n": len(results),
        "geo_score": _mean(r.geo_score for r in results),
        "task_score": _mean(r.task_score for r in results),
        "ap50": ap_at(g, 0.5) if g else None,
        "ap75": ap_at(g, 0.75) if g else None,
        "map_avg": map_avg(g) if g else None,
        "seg_iou": _mean(r.metrics["iou"] for r in s) if s else None,
        "dice": _mean(r.metrics["dice"] for r in s) if s else None,
        "iou3d": _mean(r.metrics["iou3d"] for r in b) if b else None,
        "center_score": _mean(r.metrics["center_score"] for r in b) if b else None,
    }
    return MetricsRow(policy, vals, {t.value: len(v) for t, v in by.items()})


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple[MetricsRow, ...]
    reference: Optional[str] = "ppm"

    def row(self, policy: str) -> MetricsRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def delta(self, policy: str, column: str) -> Optional[float]:
        """Relative change vs the reference row."""
        if self.reference is None:
            return None
        ref = self.row(self.reference).values.get(column)
        v = self.row(policy).values.get(column)
        if ref is None or v is None or ref == 0:
            return None
        return (v - ref) / ref

    def check_identity(self) -> bool:
        for r in self.rows:
            a, b, m = r.values["ap50"], r.values["ap75"], r.values["map_avg"]
            if m is not None and abs(m - (a + b) / 2.0) > 1e-12:
                return False
        return True

    def to_text(self) -> str:
        header = ["policy", *TABLE_COLUMNS, "d_geo_vs_ref"]
        body = []
        for r in self.rows:
            cells = [r.policy]
            for c in TABLE_COLUMNS:
                v = r.values[c]
                cells.append("-" if v is None else (str(v) if c == "n" else f"{v:.4f}"))
            d = self.delta(r.policy, "geo_score")
            cells.append("-" if d is None else f"{d * 100:+.2f}%")
            body.append(cells)
        widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        note = f"reference row: {self.reference}; map_avg = (ap50 + ap75) / 2; misrouted episodes score 0"
        return "\n".join(lines) + "\n" + note + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", *TABLE_COLUMNS, "n_grounding", "n_segmentation", "n_box3d", "rel_delta_geo"])
        for r in self.rows:
            d = self.delta(r.policy, "geo_score")
            w.writerow([r.policy, *("" if r.values[c] is None else repr(r.values[c]) for c in TABLE_COLUMNS),
                        r.counts["grounding"], r.counts["segmentation"], r.counts["box3d"],
                        "" if d is None else repr(d)])
        return buf.getvalue()

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        txt, csv_path = out / f"{stem}.txt", out / f"{stem}.csv"
        txt.write_text(self.to_text())
        csv_path.write_text(self.to_csv())
        return txt, csv_path


# ------------------------------------------------------------ evaluation


def _eval_chunk(args) -> list[EpisodeResult]:
    controller, env, seed, items = args
    return [score_trajectory(run_episode(spec, controller, env, seed=derive_seed(seed, "eval", i)),
                             env, i, controller.name) for i, spec in items]


def run_controller(controller: Controller, specs: Sequence[EpisodeSpec], env: EnvConfig, seed: int = 0,
                   jobs: int = 1) -> list[EpisodeResult]:
    items = list(enumerate(specs))
    if jobs <= 1 or len(items) < 2:
        return _eval_chunk((controller, env, seed, items))
    chunks = [items[k::jobs] for k in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        parts = list(ex.map(_eval_chunk, [(controller, env, seed, c) for c in chunks]))
    return sorted((r for p in parts for r in p), key=lambda r: r.episode_id)


@dataclass(frozen=True, eq=False)
class EvalReport:
    table: MetricsTable
    results: dict  # policy -> list[EpisodeResult]

    def write(self, out_dir, stem: str = "metrics") -> dict:
        out = Path(out_dir)
        txt, csv_path = self.table.write(out, stem)
        stream = out / f"{stem}_episodes.jsonl"
        with open(stream, "w") as fh:
            for name, rs in self.results.items():
                for r in rs:
                    fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        return {"table": str(txt), "csv": str(csv_path), "episodes": str(stream)}


def evaluate(controllers: Sequence[Controller], specs: Sequence[EpisodeSpec], env: Optional[EnvConfig] = None,
             seed: int = 0, jobs: int = 1, include_ppm: bool = True) -> EvalReport:
    """Run each controller over the same episodes; the first-frame module row is the reference."""
    env = env or EnvConfig()
    ctls = list(controllers)
    if include_ppm and not any(c.name == "ppm" for c in ctls):
        ctls.insert(0, PPMController())
    results = {}
    for c in ctls:
        if c.name in results:
            raise ValueError(f"duplicate policy name {c.name!r}")
        results[c.name] = run_controller(c, specs, env, seed, jobs)
    rows = tuple(summarize_results(name, rs) for name, rs in results.items())
    ref = "ppm" if "ppm" in results else None
    return EvalReport(MetricsTable(rows, ref), results)


# ------------------------------------------------------------ statistics


@dataclass(frozen=True)
class BootstrapResult:
    mean_diff: float
    lo: float
    hi: float

    @property
    def significant(self) -> bool:
        return self.lo > 0.0


def paired_bootstrap(a, b, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> BootstrapResult:
    """Percentile interval for mean(a - b) resampling episodes jointly."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.size == 0:
        raise ValueError("empty samples")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(n_boot, d.size))
    means = d[idx].mean(1)
    alpha = (1.0 - level) / 2.0
    return BootstrapResult(float(d.mean()), float(np.quantile(means, alpha)), float(np.quantile(means, 1 - alpha)))


# ------------------------------------------------------------ ablations


TRAINING_STRATEGIES = {
    "rl_only": dict(use_sft=False, use_rl=True),
    "sft_only": dict(use_sft=True, use_rl=False),
    "sft_rl": dict(use_sft=True, use_rl=True),
}
REWARD_VARIANTS = {
    "format_geometric": 0.0,
    "format_confidence": 1.0,
    "format_confidence_geometric": 0.5,
}
LAMBDA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_LAMBDA1 = 0.5


def reward_env(env: EnvConfig, lambda1: float) -> EnvConfig:
    r = env.reward
    return replace(env, reward=RewardWeights(lambda1, 1.0 - lambda1, r.mu1, r.mu2))


@dataclass(eq=False)
class AblationReport:
    strategies: MetricsTable
    rewards: MetricsTable
    lambda_grid: MetricsTable
    default_lambda1: float = DEFAULT_LAMBDA1
    results: dict = field(default_factory=dict)

    def to_text(self) -> str:
        return ("# training strategies\n" + self.strategies.to_text()
                + "\n# reward variants\n" + self.rewards.to_text()
                + f"\n# lambda1 grid (default lambda1 = {self.default_lambda1})\n" + self.lambda_grid.to_text())

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name, t in (("strategies", self.strategies), ("rewards", self.rewards), ("lambda_grid", self.lambda_grid)):
            txt, c = t.write(out, f"ablation_{name}")
            paths[name] = str(c)
        (out / "ablation_report.txt").write_text(self.to_text())
        return paths


def _lambda_name(l1: float) -> str:
    tag = f"lambda1={l1:g}"
    return tag + " (default)" if l1 == DEFAULT_LAMBDA1 else tag


def ablation_suite(train_cfg: TrainConfig, specs: Sequence[EpisodeSpec], seed: int,
                   env: Optional[EnvConfig] = None, jobs: int = 1, scene_config=None) -> AblationReport:
    """Training-strategy, reward-variant and lambda1 sweeps, each evaluated on ``specs`` against the first-frame row."""
    env = env or EnvConfig()
    cache: dict = {}

    def trained(use_sft: bool, use_rl: bool, lambda1: float):
        key = (use_sft, use_rl if use_rl else None, lambda1 if use_rl else None)
        if key not in cache:
            r_env = reward_env(env, lambda1)
            if use_sft and use_rl:
                # SFT ignores the reward weights, so every RL variant resumes from one shared snapshot
                cfg = replace(train_cfg, use_sft=True, use_rl=True)
                cache[key] = train(cfg, seed, r_env, scene_config, resume=trained(True, False, lambda1)).final
            else:
                cfg = replace(train_cfg, use_sft=use_sft, use_rl=use_rl)
                cache[key] = train(cfg, seed, r_env, scene_config).final
        return cache[key]

    def table(named: dict) -> MetricsTable:
        ctls = [LearnedController(p, 0.0, name) for name, p in named.items()]
        return evaluate(ctls, specs, env, seed, jobs).table

    strategies = table({k: trained(v["use_sft"], v["use_rl"], DEFAULT_LAMBDA1)
                        for k, v in TRAINING_STRATEGIES.items()})
    rewards = table({k: trained(True, True, l1) for k, l1 in REWARD_VARIANTS.items()})
    grid = table({_lambda_name(l1): trained(True, True, l1) for l1 in LAMBDA_GRID})
    return AblationReport(strategies, rewards, grid)
