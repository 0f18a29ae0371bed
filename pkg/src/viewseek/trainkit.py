"""Heuristic trajectory collection, behavior cloning and group-relative policy optimization."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .embodiment import EpisodeSpec
from .episodes import (
    EnvConfig, HeuristicController, LearnedController, Trajectory, derive_seed, make_episodes, run_episode,
)
from .policies import (
    PolicyParams, encode_instruction, init_params, save_params, softmax,
)
from .rewardkit import total_reward
from .scenegen import SceneConfig


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; carries a diagnostic dump."""

    def __init__(self, message: str, dump: Optional[dict] = None):
        super().__init__(message)
        self.dump = dump or {}


# ------------------------------------------------------------ configs


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 4
    batch_episodes: int = 8
    kl_coef: float = 0.04
    temperature: float = 0.4
    clip_eps: float = 0.2
    learning_rate: float = 1e-3
    updates: int = 60

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.batch_episodes < 1:
            raise ValueError("batch_episodes must be >= 1")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.updates < 0:
            raise ValueError("updates must be >= 0")


@dataclass(frozen=True)
class SftConfig:
    episodes: int = 500
    epochs: int = 400
    learning_rate: float = 1e-2

    def __post_init__(self) -> None:
        if self.episodes < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("sft episodes/epochs must be >= 1 and learning_rate > 0")


@dataclass(frozen=True)
class TrainConfig:
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    train_pool: int = 400  # distinct episode starts sampled by the RL stage
    use_sft: bool = True
    use_rl: bool = True


# ------------------------------------------------------------ optimizer


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: PolicyParams, grads: dict) -> PolicyParams:
        self.t += 1
        out = PolicyParams()
        for k in sorted(params):
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            out[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


# ------------------------------------------------------------ gradients


def _forward(params: PolicyParams, x: np.ndarray):
    pre = x @ params["w1"].T + params["b1"]
    h = np.maximum(0.0, pre)
    return pre, h, h @ params["w2"].T + params["b2"]


def backprop(params: PolicyParams, x: np.ndarray, d_logits: np.ndarray,
             tokens: Optional[np.ndarray] = None, d_route: Optional[np.ndarray] = None) -> dict:
    """Parameter gradients given upstream gradients on action and routing logits."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if len(x):
        pre, h, _ = _forward(params, x)
        grads["w2"] = d_logits.T @ h
        grads["b2"] = d_logits.sum(0)
        dh = (d_logits @ params["w2"]) * (pre > 0)
        grads["w1"] = dh.T @ x
        grads["b1"] = dh.sum(0)
    if tokens is not None and len(tokens):
        grads["route_w"] = d_route.T @ tokens
    return grads


def _check_finite(grads: dict, loss: float, where: str, extra: Optional[dict] = None) -> None:
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad or not math.isfinite(loss):
        dump = {"loss": loss, "non_finite": bad, **(extra or {})}
        raise TrainingError(f"{where}: non-finite loss or gradient ({dump})", dump)


# ------------------------------------------------------------ stage 1: collection + SFT


@dataclass(frozen=True, eq=False)
class SftDataset:
    features: np.ndarray  # (N, F)
    actions: np.ndarray  # (N,)
    tokens: np.ndarray  # (E, TOKEN_BUCKETS + 1)
    task_types: np.ndarray  # (E,)

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True, eq=False)
class HeuristicCorpus:
    trajectories: tuple[Trajectory, ...]
    skipped: int

    @property
    def n_steps(self) -> int:
        return sum(len(t.steps) for t in self.trajectories)

    def to_dataset(self) -> SftDataset:
        feats, acts, toks, tasks = [], [], [], []
        for tr in self.trajectories:
            toks.append(encode_instruction(tr.spec.instruction.text))
            tasks.append(tr.spec.instruction.task_type_gt.index)
            for s in tr.steps:
                feats.append(s.features)
                acts.append(s.decision.action.index)
        return SftDataset(np.array(feats), np.array(acts, dtype=int), np.array(toks), np.array(tasks, dtype=int))


def collect_heuristic(n_episodes: int, seed: int, env: Optional[EnvConfig] = None,
                      scene_config: Optional[SceneConfig] = None,
                      specs: Optional[Sequence[EpisodeSpec]] = None) -> HeuristicCorpus:
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = env or EnvConfig()
    skipped = 0
    if specs is None:
        specs, skipped = make_episodes(n_episodes, seed, "sft", scene_config, env.cam)
    ctl = HeuristicController(env.thresholds)
    trajs = tuple(run_episode(s, ctl, env, seed=derive_seed(seed, "collect", i)) for i, s in enumerate(specs))
    return HeuristicCorpus(trajs, skipped)


def sft_loss_and_grad(params: PolicyParams, data: SftDataset) -> tuple[float, dict]:
    """Mean action cross-entropy plus mean routing cross-entropy."""
    _, _, logits = _forward(params, data.features)
    p = softmax(logits)
    n = len(data.actions)
    loss = -float(np.mean(np.log(p[np.arange(n), data.actions] + 1e-300)))
    d_logits = p.copy()
    d_logits[np.arange(n), data.actions] -= 1.0
    d_logits /= n
    r = softmax(data.tokens @ params["route_w"].T)
    e = len(data.task_types)
    loss -= float(np.mean(np.log(r[np.arange(e), data.task_types] + 1e-300)))
    d_route = r.copy()
    d_route[np.arange(e), data.task_types] -= 1.0
    d_route /= e
    return loss, backprop(params, data.features, d_logits, data.tokens, d_route)


def action_accuracy(params: PolicyParams, data: SftDataset) -> float:
    _, _, logits = _forward(params, data.features)
    return float(np.mean(np.argmax(logits, 1) == data.actions))


def route_accuracy(params: PolicyParams, data: SftDataset) -> float:
    return float(np.mean(np.argmax(data.tokens @ params["route_w"].T, 1) == data.task_types))


@dataclass(frozen=True, eq=False)
class SftResult:
    params: PolicyParams
    losses: tuple[float, ...]
    accuracy: float


def sft_train(data: SftDataset, epochs: int, lr: float, seed: int,
              init: Optional[PolicyParams] = None) -> SftResult:
    """Full-batch behavior cloning with Adam."""
    if len(data) == 0:
        raise ValueError("empty SFT dataset")
    params = init.copy() if init is not None else init_params(seed)
    opt = Adam(lr)
    losses = []
    for epoch in range(epochs):
        loss, grads = sft_loss_and_grad(params, data)
        _check_finite(grads, loss, "sft", {"epoch": epoch})
        losses.append(loss)
        params = opt.step(params, grads)
    losses.append(sft_loss_and_grad(params, data)[0])
    return SftResult(params, tuple(losses), action_accuracy(params, data))


# ------------------------------------------------------------ stage 2: GRPO


@dataclass(frozen=True, eq=False)
class Token:
    """One sampled categorical choice: an action (input = features) or a routing choice (input = tokens)."""

    kind: str  # "action" | "route"
    inputs: np.ndarray
    choice: int
    old_probs: np.ndarray


@dataclass(frozen=True, eq=False)
class SampleTrace:
    tokens: tuple[Token, ...]
    ret: float


@dataclass(frozen=True, eq=False)
class GroupRollout:
    spec: Optional[EpisodeSpec]
    samples: tuple[SampleTrace, ...]
    trajectories: tuple[Trajectory, ...] = ()

    @property
    def returns(self) -> np.ndarray:
        return np.array([s.ret for s in self.samples])


def trace_of(tr: Trajectory) -> SampleTrace:
    toks = []
    if tr.route_probs is not None:
        toks.append(Token("route", encode_instruction(tr.spec.instruction.text), tr.routed.index, tr.route_probs))
    for s in tr.steps:
        if s.distribution is None:
            raise ValueError("trajectory was not generated by a learned policy")
        toks.append(Token("action", s.features, s.decision.action.index, s.distribution.action_probs))
    return SampleTrace(tuple(toks), tr.episode_return)


def rollout_group(spec: EpisodeSpec, params: PolicyParams, group_size: int, temperature: float, seed: int,
                  env: Optional[EnvConfig] = None) -> GroupRollout:
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    env = env or EnvConfig()
    ctl = LearnedController(params, temperature)
    trajs = tuple(run_episode(spec, ctl, env, seed=derive_seed(seed, "member", i)) for i in range(group_size))
    return GroupRollout(spec, tuple(trace_of(t) for t in trajs), trajs)


def group_advantages(returns) -> np.ndarray:
    """(R - mean) / (population std + 1e-8); all zeros when the group has no spread."""
    r = np.asarray(returns, dtype=float)
    std = r.std()
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + 1e-8)


def clipped_surrogate(ratio, adv, eps: float):
    ratio = np.asarray(ratio, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def categorical_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(-1)


@dataclass(frozen=True)
class GrpoStats:
    mean_return: float
    kl: float
    clip_fraction: float
    loss: float
    degenerate_groups: int


def grpo_loss_and_grad(params: PolicyParams, ref: PolicyParams, groups: Sequence[GroupRollout],
                       cfg: GrpoConfig) -> tuple[float, dict, GrpoStats]:
    """Clipped surrogate plus exact KL(current || reference), token-mean per trajectory, mean over trajectories."""
    tau = cfg.temperature
    rows = {"action": ([], [], [], [], []), "route": ([], [], [], [], [])}
    n_traj = sum(len(g.samples) for g in groups)
    degenerate = 0
    for g in groups:
        adv = group_advantages(g.returns)
        if np.all(adv == 0.0):
            degenerate += 1
        for s, a in zip(g.samples, adv):
            if not s.tokens:
                continue
            w = 1.0 / (len(s.tokens) * n_traj)
            for t in s.tokens:
                x, c, old, adv_l, w_l = rows[t.kind]
                x.append(t.inputs)
                c.append(t.choice)
                old.append(t.old_probs)
                adv_l.append(a)
                w_l.append(w)
    loss = 0.0
    kl_sum, clipped, n_tok = 0.0, 0, 0
    d_logits = d_route = None
    x_act = tok_route = None
    for kind in ("action", "route"):
        x, c, old, adv, w = rows[kind]
        if not x:
            continue
        x, c, old, adv, w = (np.array(x), np.array(c, dtype=int), np.array(old), np.array(adv), np.array(w))
        if kind == "action":
            z = _forward(params, x)[2]
            zr = _forward(ref, x)[2]
        else:
            z = x @ params["route_w"].T
            zr = x @ ref["route_w"].T
        p = softmax(z, tau)
        q = softmax(zr, tau)
        idx = np.arange(len(c))
        ratio = p[idx, c] / old[idx, c]
        surr = clipped_surrogate(ratio, adv, cfg.clip_eps)
        kl = categorical_kl(p, q)
        loss += float(np.sum(w * (-surr + cfg.kl_coef * kl)))
        # the min() picks the unclipped branch unless clipping binds in the advantage's direction
        active = ~(((adv > 0) & (ratio > 1 + cfg.clip_eps)) | ((adv < 0) & (ratio < 1 - cfg.clip_eps)))
        clipped += int(np.sum(~active))
        onehot = np.zeros_like(p)
        onehot[idx, c] = 1.0
        d_surr = (active * ratio * adv)[:, None] * (onehot - p) / tau
        with np.errstate(divide="ignore", invalid="ignore"):
            logratio = np.where(p > 0, np.log(p) - np.log(q), 0.0)
        d_kl = p * (logratio - kl[:, None]) / tau
        d = w[:, None] * (-d_surr + cfg.kl_coef * d_kl)
        kl_sum += float(kl.sum())
        n_tok += len(c)
        if kind == "action":
            d_logits, x_act = d, x
        else:
            d_route, tok_route = d, x
    if x_act is None:
        x_act = np.zeros((0, params["w1"].shape[1]))
        d_logits = np.zeros((0, params.n_actions))
    grads = backprop(params, x_act, d_logits, tok_route, d_route)
    rets = [s.ret for g in groups for s in g.samples]
    stats = GrpoStats(float(np.mean(rets)) if rets else 0.0, kl_sum / max(n_tok, 1),
                      clipped / max(n_tok, 1), loss, degenerate)
    return loss, grads, stats


def grpo_update(params: PolicyParams, ref: PolicyParams, groups: Sequence[GroupRollout], cfg: GrpoConfig,
                optimizer: Optional[Adam] = None) -> tuple[PolicyParams, GrpoStats]:
    loss, grads, stats = grpo_loss_and_grad(params, ref, groups, cfg)
    _check_finite(grads, loss, "grpo", {"stats": asdict(stats)})
    opt = optimizer or Adam(cfg.learning_rate)
    return opt.step(params, grads), stats


def audit_rewards(tr: Trajectory, env: EnvConfig) -> bool:
    """Every stored total equals the reward recomputed from its stored components."""
    h_gt = tr.spec.instruction.task_type_gt
    return all(s.reward.total == total_reward(tr.routed, h_gt, s.reward.r_f, s.reward.r_c, s.reward.r_g, env.reward)
               for s in tr.steps)


# ------------------------------------------------------------ full pipeline


@dataclass(eq=False)
class TrainResult:
    checkpoints: dict  # stage name -> PolicyParams
    report: list  # per-stage / per-update rows, timestamp-free
    wall_times: dict

    @property
    def final(self) -> PolicyParams:
        return self.checkpoints["final"]


def _grpo_loop(params: PolicyParams, ref: PolicyParams, pool: Sequence[EpisodeSpec], cfg: GrpoConfig,
               env: EnvConfig, seed: int, report: list, start_update: int = 0) -> PolicyParams:
    opt = Adam(cfg.learning_rate)
    rng = np.random.default_rng(derive_seed(seed, "grpo-batches"))
    for u in range(start_update, start_update + cfg.updates):
        idx = rng.choice(len(pool), size=cfg.batch_episodes, replace=len(pool) < cfg.batch_episodes)
        groups = [rollout_group(pool[int(i)], params, cfg.group_size, cfg.temperature,
                                derive_seed(seed, "update", u, int(i)), env) for i in idx]
        params, stats = grpo_update(params, ref, groups, cfg, opt)
        report.append({"stage": "grpo", "update": u, **asdict(stats)})
    return params


def train(cfg: TrainConfig, seed: int, env: Optional[EnvConfig] = None,
          scene_config: Optional[SceneConfig] = None, resume: Optional[PolicyParams] = None) -> TrainResult:
    """Collect -> behavior cloning -> GRPO with the post-SFT snapshot as the KL reference.

    ``resume`` skips collection and SFT and starts GRPO from the given parameters.
    """
    env = env or EnvConfig()
    report: list = []
    times: dict = {}
    params = init_params(derive_seed(seed, "init"))
    ckpts = {"init": params.copy()}
    if resume is not None:
        params = resume.copy()
        ckpts["sft"] = params.copy()
    elif cfg.use_sft:
        t0 = time.perf_counter()
        corpus = collect_heuristic(cfg.sft.episodes, derive_seed(seed, "collect"), env, scene_config)
        data = corpus.to_dataset()
        times["collect"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        res = sft_train(data, cfg.sft.epochs, cfg.sft.learning_rate, seed, init=params)
        times["sft"] = time.perf_counter() - t0
        params = res.params
        report.append({"stage": "sft", "episodes": len(corpus.trajectories), "skipped": corpus.skipped,
                       "samples": len(data), "loss_first": res.losses[0], "loss_last": res.losses[-1],
                       "action_accuracy": res.accuracy, "route_accuracy": route_accuracy(params, data)})
        ckpts["sft"] = params.copy()
    if cfg.use_rl and cfg.grpo.updates > 0:
        t0 = time.perf_counter()
        pool, skipped = make_episodes(cfg.train_pool, derive_seed(seed, "pool"), "train", scene_config, env.cam)
        report.append({"stage": "grpo_pool", "episodes": len(pool), "skipped": skipped})
        params = _grpo_loop(params, params.copy(), pool, cfg.grpo, env, seed, report)
        times["grpo"] = time.perf_counter() - t0
    ckpts["final"] = params
    return TrainResult(ckpts, report, times)


def write_training_artifacts(result: TrainResult, out_dir) -> dict:
    """Checkpoints + timestamp-free report; wall times go to a separate manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, p in result.checkpoints.items():
        path = out / f"{name}.params"
        save_params(p, path)
        paths[name] = str(path)
    report = out / "training_report.jsonl"
    report.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in result.report))
    paths["report"] = str(report)
    (out / "manifest.json").write_text(json.dumps({"wall_times_s": result.wall_times, "files": paths},
                                                  indent=1, sort_keys=True) + "\n")
    return paths
