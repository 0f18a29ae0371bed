"""``viewseek`` command line entry point.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config
from .embodiment import EpisodeError
from .episodes import (
    ForwardController, HeuristicController, LearnedController, PPMController, RandomController,
    ShortestPathController, derive_seed, make_episodes, run_episode,
)
from .evalkit import ablation_suite, evaluate, score_trajectory
from .geomcore import Pose
from .perceptsim import perceive
from .policies import load_params
from .renderer import dump_frame, render
from .scenegen import TaskType, generate_scene, load_scene, save_scene
from .trainkit import TrainingError, collect_heuristic, train, write_training_artifacts

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
HARD_NOISE_STD = 0.15
POLICIES = ("ppm", "forward", "random", "heuristic", "shortest_path", "learned")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (flags override it, it overrides defaults)")
    p.add_argument("--seed", type=int, help="run seed (default: config seed)")
    p.add_argument("--out", help="output directory (default: config out)")
    p.add_argument("--jobs", type=int, help="concurrent episode workers")
    p.add_argument("--hard", action="store_true",
                   help=f"hard perception profile: confidence jitter {HARD_NOISE_STD} instead of the config value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewseek", description="Active-perception viewpoint control: simulate, train, evaluate.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    scene = sub.add_parser("scene", help="scene utilities")
    scene_sub = scene.add_subparsers(dest="scene_command", parser_class=_Parser)
    gen = scene_sub.add_parser("gen", help="generate scene files and a manifest")
    _common(gen)
    gen.add_argument("--count", type=int, default=10, help="number of scenes")

    col = sub.add_parser("collect", help="run the heuristic and log trajectories")
    _common(col)
    col.add_argument("--episodes", type=int, help="episodes to collect (default: sft.episodes)")

    sft = sub.add_parser("sft", help="collect heuristic data and behavior-clone it")
    _common(sft)
    sft.add_argument("--episodes", type=int, help="heuristic episodes (default: sft.episodes)")
    sft.add_argument("--epochs", type=int, help="training epochs (default: sft.epochs)")

    grpo = sub.add_parser("grpo", help="full two-stage training, or GRPO from a checkpoint")
    _common(grpo)
    grpo.add_argument("--resume", help="parameter file to start GRPO from (skips collection and SFT)")
    grpo.add_argument("--updates", type=int, help="GRPO updates (default: grpo.updates)")
    grpo.add_argument("--rl-only", action="store_true", help="skip SFT; GRPO from random init")
    grpo.add_argument("--sft-only", action="store_true", help="skip GRPO")

    ev = sub.add_parser("eval", help="evaluate policies; the first-frame module row is the reference")
    _common(ev)
    ev.add_argument("--policy", action="append", choices=POLICIES, help="policy to evaluate (repeatable)")
    ev.add_argument("--params", help="parameter file for --policy learned")
    ev.add_argument("--episodes", type=int, help="test episodes (default: eval.episodes)")

    ab = sub.add_parser("ablate", help="training-strategy, reward-variant and lambda1 sweeps")
    _common(ab)
    ab.add_argument("--updates", type=int, help="GRPO updates per trained variant")
    ab.add_argument("--episodes", type=int, help="test episodes (default: eval.episodes)")

    ro = sub.add_parser("rollout", help="dump one episode's full trajectory log")
    _common(ro)
    ro.add_argument("--policy", choices=POLICIES, default="heuristic")
    ro.add_argument("--params", help="parameter file for --policy learned")
    ro.add_argument("--episode", type=int, default=0, help="index into the test episodes")
    ro.add_argument("--frames", action="store_true", help="also write depth / instance PGM frames")

    pc = sub.add_parser("perceive", help="run one perception module at a pose")
    _common(pc)
    pc.add_argument("--scene", required=True, help="scene file")
    pc.add_argument("--module", required=True, choices=[t.value for t in TaskType])
    pc.add_argument("--prompt", required=True, help="object description, e.g. 'red chair'")
    pc.add_argument("--pose", nargs=4, type=float, required=True, metavar=("X", "Z", "YAW", "PITCH"))

    rp = sub.add_parser("report", help="render metric tables and reward curves")
    _common(rp)
    rp.add_argument("--input", required=True, help="run directory with metrics / training reports")
    return parser


# ------------------------------------------------------------ helpers


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("jobs: must be >= 1")
        over["jobs"] = args.jobs
    if args.hard:
        over["emulator"] = dataclasses.replace(cfg.emulator, noise_std=HARD_NOISE_STD)
    return dataclasses.replace(cfg, **over)


def _out(cfg: RunConfig, *parts) -> Path:
    p = Path(cfg.out, *parts)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out: Path, cfg: RunConfig, command: str, files: dict, wall: float, extra=None) -> None:
    (out / "config.yaml").write_text(dump_config(cfg))
    doc = {"command": command, "seed": cfg.seed, "files": files, "wall_time_s": wall,
           "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"), **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _controller(name: str, params_path: Optional[str], cfg: RunConfig, temperature: float = 0.0):
    if name == "learned":
        if not params_path:
            raise ConfigError("--params is required for --policy learned")
        return LearnedController(load_params(params_path), temperature)
    return {
        "ppm": PPMController, "forward": ForwardController, "random": RandomController,
        "heuristic": lambda: HeuristicController(cfg.heuristic),
        "shortest_path": lambda: ShortestPathController(cfg.standoff),
    }[name]()


def _test_episodes(cfg: RunConfig, n: Optional[int]):
    n = n if n is not None else cfg.eval.episodes
    if n < 1:
        raise ConfigError("--episodes: must be >= 1")
    return make_episodes(n, cfg.seed, "test", cfg.scene, cfg.camera, cfg.spawn, cfg.eval.per_scene)


# ------------------------------------------------------------ commands


def cmd_scene_gen(args, cfg: RunConfig) -> int:
    if args.count < 1:
        raise ConfigError("--count: must be >= 1")
    out = _out(cfg, "scenes")
    t0 = time.perf_counter()
    files = []
    for i in range(args.count):
        seed = derive_seed(cfg.seed, "scene-gen", i)
        path = out / f"scene_{i:04d}.json"
        save_scene(generate_scene(seed, cfg.scene), path)
        files.append({"file": path.name, "scene_seed": seed})
    (out / "scenes.json").write_text(json.dumps({"seed": cfg.seed, "scenes": files}, indent=1) + "\n")
    _write_manifest(out, cfg, "scene gen", {"index": "scenes.json"}, time.perf_counter() - t0)
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_collect(args, cfg: RunConfig) -> int:
    n = args.episodes if args.episodes is not None else cfg.sft.episodes
    out = _out(cfg, "collect")
    t0 = time.perf_counter()
    corpus = collect_heuristic(n, derive_seed(cfg.seed, "collect"), cfg.env(), cfg.scene)
    with open(out / "trajectories.jsonl", "w") as fh:
        for i, tr in enumerate(corpus.trajectories):
            fh.write(json.dumps({"episode": i, "instruction": tr.spec.instruction.text,
                                 "task_type": tr.spec.instruction.task_type_gt.value,
                                 "steps": [s.log_row() for s in tr.steps]}, sort_keys=True) + "\n")
    _write_manifest(out, cfg, "collect", {"trajectories": "trajectories.jsonl"}, time.perf_counter() - t0,
                    {"episodes": len(corpus.trajectories), "steps": corpus.n_steps, "skipped": corpus.skipped})
    print(f"collected {len(corpus.trajectories)} episodes / {corpus.n_steps} steps into {out}")
    return EXIT_OK


def cmd_sft(args, cfg: RunConfig) -> int:
    sft = cfg.sft
    if args.episodes is not None or args.epochs is not None:
        sft = dataclasses.replace(sft, episodes=args.episodes or sft.episodes, epochs=args.epochs or sft.epochs)
        cfg = dataclasses.replace(cfg, sft=sft)
    out = _out(cfg, "sft")
    t0 = time.perf_counter()
    result = train(cfg.train_config(use_sft=True, use_rl=False), cfg.seed, cfg.env(), cfg.scene)
    paths = write_training_artifacts(result, out)
    _write_manifest(out, cfg, "sft", paths, time.perf_counter() - t0)
    row = result.report[0]
    print(f"sft: {row['samples']} samples, loss {row['loss_first']:.4f} -> {row['loss_last']:.4f}, "
          f"action accuracy {row['action_accuracy']:.3f}; checkpoints in {out}")
    return EXIT_OK


def cmd_grpo(args, cfg: RunConfig) -> int:
    if args.rl_only and args.sft_only:
        raise UsageError("--rl-only and --sft-only are mutually exclusive")
    if args.updates is not None:
        cfg = dataclasses.replace(cfg, grpo=dataclasses.replace(cfg.grpo, updates=args.updates))
    resume = load_params(args.resume) if args.resume else None
    out = _out(cfg, "grpo")
    t0 = time.perf_counter()
    tc = cfg.train_config(use_sft=not args.rl_only, use_rl=not args.sft_only)
    result = train(tc, cfg.seed, cfg.env(), cfg.scene, resume=resume)
    paths = write_training_artifacts(result, out)
    _write_manifest(out, cfg, "grpo", paths, time.perf_counter() - t0, {"resume": args.resume})
    print(f"training finished; final checkpoint {paths['final']}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    names = args.policy or ["heuristic"]
    ctls = [_controller(n, args.params, cfg) for n in dict.fromkeys(names)]
    specs, skipped = _test_episodes(cfg, args.episodes)
    out = _out(cfg, "eval")
    t0 = time.perf_counter()
    report = evaluate(ctls, specs, cfg.env(), cfg.seed, cfg.jobs)
    if not report.table.check_identity():
        raise RuntimeError("map_avg identity violated")
    paths = report.write(out)
    _write_manifest(out, cfg, "eval", paths, time.perf_counter() - t0, {"spawn_failures": skipped})
    print(report.table.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    if args.updates is not None:
        cfg = dataclasses.replace(cfg, grpo=dataclasses.replace(cfg.grpo, updates=args.updates))
    specs, _ = _test_episodes(cfg, args.episodes)
    out = _out(cfg, "ablate")
    t0 = time.perf_counter()
    rep = ablation_suite(cfg.train_config(), specs, cfg.seed, cfg.env(), cfg.jobs, cfg.scene)
    paths = rep.write(out)
    _write_manifest(out, cfg, "ablate", paths, time.perf_counter() - t0)
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_rollout(args, cfg: RunConfig) -> int:
    specs, _ = _test_episodes(cfg, args.episode + 1)
    spec = specs[args.episode]
    ctl = _controller(args.policy, args.params, cfg)
    env = cfg.env()
    tr = run_episode(spec, ctl, env, seed=derive_seed(cfg.seed, "eval", args.episode))
    res = score_trajectory(tr, env, args.episode, ctl.name)
    out = _out(cfg, "rollout")
    log = out / f"episode_{args.episode:04d}_{ctl.name}.jsonl"
    with open(log, "w") as fh:
        fh.write(json.dumps({"kind": "episode", "instruction": spec.instruction.text,
                             "task_type_gt": spec.instruction.task_type_gt.value, "routed": tr.routed.value,
                             "prompt": tr.prompt, "initial_confidence": tr.initial_summary.confidence,
                             "initial_g": tr.g0}, sort_keys=True) + "\n")
        for s in tr.steps:
            fh.write(json.dumps({"kind": "step", **s.log_row()}, sort_keys=True) + "\n")
        fh.write(json.dumps({"kind": "result", **res.to_dict()}, sort_keys=True) + "\n")
    files = {"log": log.name}
    if args.frames:
        poses = [spec.start_pose] + [s.pose_after for s in tr.steps]
        for t, pose in enumerate(poses):
            d, i = dump_frame(render(spec.scene, pose, cfg.camera, t), out / f"frame_{t:02d}")
            files[f"frame_{t:02d}"] = [d.name, i.name]
    _write_manifest(out, cfg, "rollout", files, 0.0)
    print(f"episode {args.episode}: {len(tr.steps)} steps, final g {tr.final_g:.4f}, log {log}")
    return EXIT_OK


def cmd_perceive(args, cfg: RunConfig) -> int:
    scene = load_scene(args.scene)
    x, z, yaw, pitch = args.pose
    obs = render(scene, Pose((x, cfg.camera.eye_height, z), yaw, pitch), cfg.camera)
    out = perceive(args.module, obs, args.prompt, scene, cfg.emulator, cfg.seed, cfg.seg_weights)
    pred = out.prediction
    if pred is None:
        shown = None
    elif isinstance(pred, np.ndarray):
        shown = {"mask_pixels": int(pred.sum())}
    else:
        shown = json.loads(json.dumps(dataclasses.asdict(pred), default=lambda o: o.tolist() if hasattr(o, "tolist") else float(o)))
    print(json.dumps({"module": out.module.value, "confidence": out.confidence, "flags": list(out.flags),
                      "prediction": shown}, sort_keys=True))
    return EXIT_OK


def cmd_report(args, cfg: RunConfig) -> int:
    import csv

    src = Path(args.input)
    if not src.is_dir():
        raise ConfigError(f"--input: {src} is not a directory")
    out = _out(cfg, "report")
    written = {}
    for csv_path in sorted(src.rglob("*.csv")):
        rows = list(csv.DictReader(csv_path.open()))
        for r in rows:
            if r.get("map_avg"):
                if abs(float(r["map_avg"]) - (float(r["ap50"]) + float(r["ap75"])) / 2) > 1e-12:
                    raise RuntimeError(f"{csv_path}: map_avg identity violated for {r['policy']}")
        target = out / f"{csv_path.parent.name}_{csv_path.name}"
        target.write_text(csv_path.read_text())
        written[target.name] = str(csv_path)
    for rep in sorted(src.rglob("training_report.jsonl")):
        rows = [json.loads(line) for line in rep.read_text().splitlines() if line.strip()]
        curve = [r for r in rows if r.get("stage") == "grpo"]
        if not curve:
            continue
        stem = f"{rep.parent.name}_reward_curve"
        with open(out / f"{stem}.csv", "w") as fh:
            fh.write("update,mean_return,kl,clip_fraction\n")
            for r in curve:
                fh.write(f"{r['update']},{r['mean_return']!r},{r['kl']!r},{r['clip_fraction']!r}\n")
        _plot_curve(curve, out / f"{stem}.png")
        written[f"{stem}.csv"] = str(rep)
    if not written:
        raise ConfigError(f"--input: no metric tables or training reports under {src}")
    _write_manifest(out, cfg, "report", written, 0.0)
    print(f"wrote {len(written)} report files to {out}")
    return EXIT_OK


def _plot_curve(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    u = [r["update"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(u, [r["mean_return"] for r in rows])
    axes[0].set_xlabel("update")
    axes[0].set_ylabel("mean episode return")
    axes[1].plot(u, [r["kl"] for r in rows])
    axes[1].set_xlabel("update")
    axes[1].set_ylabel("KL to reference")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


COMMANDS = {
    "collect": cmd_collect, "sft": cmd_sft, "grpo": cmd_grpo, "eval": cmd_eval, "ablate": cmd_ablate,
    "rollout": cmd_rollout, "perceive": cmd_perceive, "report": cmd_report,
}


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("viewseek: a subcommand is required")
        if args.command == "scene":
            if args.scene_command != "gen":
                raise UsageError("viewseek scene: expected 'gen'")
            fn = cmd_scene_gen
        else:
            fn = COMMANDS[args.command]
        cfg = _resolve(args)
        return fn(args, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))
    except (TrainingError, EpisodeError, RuntimeError, OSError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", str(exc))


if __name__ == "__main__":
    sys.exit(main())
