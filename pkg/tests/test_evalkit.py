import random

import numpy as np
import pytest

from viewseek.episodes import (
    Controller, EnvConfig, HeuristicController, LearnedController, PPMController, RandomController,
    make_episodes, run_episode,
)
from viewseek.evalkit import (
    LAMBDA_GRID, EpisodeResult, MetricsTable, ablation_suite, ap_at, center_score, evaluate, map_avg,
    paired_bootstrap, run_controller, score_trajectory, summarize_results,
)
from viewseek.geomcore import OrientedBox3D
from viewseek.perceptsim import tight_box
from viewseek.policies import dumps_params, init_params
from viewseek.renderer import render
from viewseek.scenegen import TaskType, dumps_scene
from viewseek.trainkit import GrpoConfig, SftConfig, TrainConfig

ENV = EnvConfig()


@pytest.fixture(scope="module")
def specs():
    return make_episodes(24, 31)[0]


def _grounding(i, iou, routed=TaskType.GROUNDING):
    m = {"iou": iou, "hit50": float(iou >= 0.5), "hit75": float(iou >= 0.75)}
    if routed is not TaskType.GROUNDING:
        m = {"iou": 0.0, "hit50": 0.0, "hit75": 0.0}
    return EpisodeResult(i, "p", routed, TaskType.GROUNDING, m, 0.0, 0.0, 3, "stopped")


# ------------------------------------------------------------ metric arithmetic


def test_ap_example():
    ious = [0.9] * 5 + [0.6] * 3 + [0.3] * 2
    rs = [_grounding(i, v) for i, v in enumerate(ious)]
    assert ap_at(rs, 0.5) == pytest.approx(0.8)
    assert ap_at(rs, 0.75) == pytest.approx(0.5)
    assert map_avg(rs) == pytest.approx(0.65)
    rs[0] = _grounding(0, 0.9, routed=TaskType.BOX3D)
    assert ap_at(rs, 0.5) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        ap_at([], 0.5)


def test_map_avg_is_mean_of_thresholds():
    from viewseek.evalkit import MetricsRow
    row = MetricsRow("x", {"ap50": 0.7958, "ap75": 0.6225, "map_avg": 0.70915}, {})
    assert MetricsTable((row,), reference=None).check_identity()
    bad = MetricsRow("x", {"ap50": 0.7958, "ap75": 0.6225, "map_avg": 0.7092}, {})
    assert not MetricsTable((bad,), reference=None).check_identity()


def test_center_score_examples():
    gt = OrientedBox3D((0.0, 0.0, 0.0), (0.5, 0.5, 0.5))
    assert center_score(gt, gt) == 1.0
    off = 0.866 / np.sqrt(3)
    moved = OrientedBox3D((off, off, off), (0.2, 0.2, 0.2))
    assert center_score(moved, gt) == pytest.approx(1 - 0.866 / np.sqrt(3), abs=1e-9)
    assert center_score(moved, gt) == pytest.approx(0.5, abs=1e-4)
    far = OrientedBox3D((3.0, 0.0, 0.0), (0.5, 0.5, 0.5))
    assert center_score(far, gt) == 0.0


# ------------------------------------------------------------ scoring


class _AlwaysWrong(Controller):
    name = "always_wrong"

    def route(self, spec, seed):
        gt = spec.instruction.task_type_gt
        wrong = next(t for t in TaskType if t is not gt)
        return wrong, spec.instruction.description_gt, None

    def decide(self, spec, state, seed):
        return HeuristicController().decide(spec, state, seed)


def test_always_misrouting_scores_zero(specs):
    rs = run_controller(_AlwaysWrong(), specs, ENV)
    assert all(r.misrouted for r in rs)
    row = summarize_results("w", rs)
    for k, v in row.values.items():
        if k != "n" and v is not None:
            assert v == 0.0, k


def test_ppm_never_moves(specs):
    rs = run_controller(PPMController(), specs, ENV)
    assert all(r.trajectory_length == 0 and r.terminal_cause == "first_frame" for r in rs)
    assert not any(r.misrouted for r in rs)


def test_metric_ranges_and_dice_dominates_iou(specs):
    for ctl in (HeuristicController(), RandomController()):
        for r in run_controller(ctl, specs, ENV):
            for v in r.metrics.values():
                assert 0.0 <= v <= 1.0
            assert 0.0 <= r.geo_score <= 1.0 and 0.0 <= r.task_score <= 1.0
            if r.task_type_gt is TaskType.SEGMENTATION:
                assert r.metrics["dice"] >= r.metrics["iou"] - 1e-12


def test_ground_truth_conventions(specs):
    for i, spec in enumerate(specs[:12]):
        tr = run_episode(spec, HeuristicController(), ENV, seed=i)
        r = score_trajectory(tr, ENV, i, "h")
        obs = render(spec.scene, tr.final_pose, ENV.cam)
        target = spec.instruction.target_id
        if r.task_type_gt is TaskType.BOX3D:
            box = spec.scene.object_by_id(target).box
            assert r.ground_truth["box3d"]["center"] == list(box.center)
        elif r.task_type_gt is TaskType.GROUNDING:
            b = tight_box(obs.instance == target)
            if b is not None:
                assert r.ground_truth["box2d"] == [b.xmin, b.ymin, b.xmax, b.ymax]
        if not (obs.instance == target).any():
            assert r.task_score == 0.0


def test_invisible_target_scores_zero(specs):
    spec = specs[0]

    class TurnAway(Controller):
        name = "turn_away"

        def decide(self, spec, state, seed):
            from viewseek.policies import Decision
            from viewseek.embodiment import Action
            return Decision("", state.task_type, state.prompt, Action.TURN_LEFT), None

    tr = run_episode(spec, TurnAway(), ENV)
    obs = render(spec.scene, tr.final_pose, ENV.cam)
    r = score_trajectory(tr, ENV, 0, "t")
    if not (obs.instance == spec.instruction.target_id).any():
        assert r.task_score == 0.0 and all(v == 0.0 for v in r.metrics.values())


# ------------------------------------------------------------ evaluation runs


def test_evaluate_deterministic_and_side_effect_free(specs, tmp_path):
    params = init_params(2)
    before_p = dumps_params(params)
    before_s = [dumps_scene(s.scene) for s in specs]
    ctls = [HeuristicController(), LearnedController(params, 0.0)]
    a = evaluate(ctls, specs, ENV, seed=4)
    b = evaluate(ctls, specs, ENV, seed=4)
    assert a.table.to_csv() == b.table.to_csv()
    assert [r.policy for r in a.table.rows] == ["ppm", "heuristic", "learned"]
    assert a.table.check_identity()
    assert dumps_params(params) == before_p
    assert [dumps_scene(s.scene) for s in specs] == before_s
    paths = a.write(tmp_path)
    text = (tmp_path / "metrics.txt").read_text()
    assert "map_avg = (ap50 + ap75) / 2" in text
    lines = (tmp_path / "metrics_episodes.jsonl").read_text().splitlines()
    assert len(lines) == 3 * len(specs)
    assert set(paths) == {"table", "csv", "episodes"}


def test_parallel_matches_serial(specs):
    serial = run_controller(RandomController(), specs, ENV, seed=1, jobs=1)
    par = run_controller(RandomController(), specs, ENV, seed=1, jobs=3)
    assert [r.to_dict() for r in serial] == [r.to_dict() for r in par]


def test_aggregation_is_order_independent(specs):
    rs = run_controller(RandomController(), specs, ENV, seed=2)
    shuffled = rs[:]
    random.Random(0).shuffle(shuffled)
    assert summarize_results("r", rs) == summarize_results("r", shuffled)


def test_table_delta_and_identity():
    rs = [_grounding(i, v) for i, v in enumerate([0.9, 0.6, 0.3, 0.8])]
    low = [_grounding(i, v) for i, v in enumerate([0.6, 0.3, 0.3, 0.3])]
    t = MetricsTable((summarize_results("ppm", low), summarize_results("x", rs)))
    assert t.delta("x", "ap50") == pytest.approx((0.75 - 0.25) / 0.25)
    assert t.delta("ppm", "seg_iou") is None
    assert t.check_identity()
    with pytest.raises(KeyError):
        t.row("nope")


def test_duplicate_policy_names_rejected(specs):
    with pytest.raises(ValueError, match="duplicate"):
        evaluate([HeuristicController(), HeuristicController()], specs[:2], ENV)


# ------------------------------------------------------------ statistics


def test_paired_bootstrap():
    rng = np.random.default_rng(0)
    b = rng.random(200)
    a = b + 0.1 + rng.normal(0, 0.05, 200)
    res = paired_bootstrap(a, b, seed=1)
    assert res.lo < 0.1 < res.hi and res.significant
    assert res == paired_bootstrap(a, b, seed=1)
    null = paired_bootstrap(b, b, seed=1)
    assert null.mean_diff == 0.0 and not null.significant
    with pytest.raises(ValueError):
        paired_bootstrap([], [])


# ------------------------------------------------------------ ablations


def test_ablation_row_sets(specs, tmp_path):
    cfg = TrainConfig(SftConfig(episodes=5, epochs=10), GrpoConfig(batch_episodes=2, updates=1), train_pool=3)
    rep = ablation_suite(cfg, specs[:6], seed=0, env=ENV)
    assert [r.policy for r in rep.strategies.rows] == ["ppm", "rl_only", "sft_only", "sft_rl"]
    assert [r.policy for r in rep.rewards.rows] == [
        "ppm", "format_geometric", "format_confidence", "format_confidence_geometric"]
    names = [r.policy for r in rep.lambda_grid.rows][1:]
    assert len(names) == len(LAMBDA_GRID)
    assert [n for n in names if "default" in n] == ["lambda1=0.5 (default)"]
    # the combined reward and the default grid point are the same training run
    comb = rep.rewards.row("format_confidence_geometric").values
    assert comb == rep.lambda_grid.row("lambda1=0.5 (default)").values
    assert comb == rep.strategies.row("sft_rl").values
    paths = rep.write(tmp_path)
    assert set(paths) == {"strategies", "rewards", "lambda_grid"}
    assert "lambda1 grid (default lambda1 = 0.5)" in (tmp_path / "ablation_report.txt").read_text()
