import dataclasses
import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewseek.embodiment import ACTIONS, Action
from viewseek.episodes import EnvConfig, ShortestPathController, make_episodes, run_episode
from viewseek.geomcore import OrientedBox3D, Pose
from viewseek.policies import (
    N_FEATURES, ActionDistribution, Decision, HeuristicThresholds, InstructionParseError, PerceptionSummary,
    PolicyState, action_logits, dumps_params, encode_instruction, featurize, forward_policy,
    heuristic_action, heuristic_policy, init_params, learned_policy, load_params, loads_params,
    parse_instruction, random_policy, route, save_params, shortest_path_action, softmax,
)
from viewseek.rewardkit import GeomSnapshot, format_reward
from viewseek.scenegen import Scene, SceneObject, TaskType, bfs_distances, compute_nav_grid

W = H = 128


def summary(conf, area=None, center=None):
    if area is None:
        return PerceptionSummary(conf, GeomSnapshot.absent(W, H))
    return PerceptionSummary(conf, GeomSnapshot.of_region(area, center, W, H))


def state(history, step=0, last=None, task=TaskType.GROUNDING):
    return PolicyState("locate the lamp", task, "lamp", step, 10, list(history), last, Pose((0, 1, 0)))


# ------------------------------------------------------------ parsing


def test_parse_examples():
    p = parse_instruction("segment the red chair next to the table")
    assert (p.task_type, p.prompt, p.exact) == (TaskType.SEGMENTATION, "red chair next to the table", True)
    p = parse_instruction("locate the lamp")
    assert (p.task_type, p.prompt) == (TaskType.GROUNDING, "lamp")
    p = parse_instruction("estimate the 3D box of the small blue sofa")
    assert (p.task_type, p.prompt) == (TaskType.BOX3D, "small blue sofa")
    with pytest.raises(InstructionParseError):
        parse_instruction("make me a sandwich")


def test_parse_keyword_fallback_is_flagged():
    p = parse_instruction("please find a lamp")
    assert p.task_type is TaskType.GROUNDING and not p.exact and p.prompt == "lamp"
    assert parse_instruction("give me the mask of the chair").task_type is TaskType.SEGMENTATION


def test_encode_instruction_is_deterministic_bag():
    a = encode_instruction("locate the lamp")
    assert a.shape == (65,) and a[-1] == 1.0
    assert np.array_equal(a, encode_instruction("locate  the LAMP"))
    assert a[:-1].sum() == 3


# ------------------------------------------------------------ decisions and baselines


def test_decision_schema_field_order():
    d = Decision("why", TaskType.BOX3D, "sofa", Action.STOP)
    assert list(json.loads(d.to_json())) == ["thoughts", "task_type", "prompt", "action"]
    assert format_reward(d.to_json()) == 0.05


def test_forward_always_moves():
    for k in range(10):
        assert forward_policy(state([summary(0.3)], step=k)).action is Action.MOVE_FORWARD


def test_random_reproducible_and_uniform():
    s = state([summary(0.0)])
    assert [random_policy(s, k).action for k in range(20)] == [random_policy(s, k).action for k in range(20)]
    n = 100_000
    counts = Counter(random_policy(s, k).action for k in range(n))
    assert set(counts) == set(ACTIONS)
    for a in ACTIONS:
        assert abs(counts[a] / n - 1 / 6) < 0.01


def test_heuristic_examples():
    th = HeuristicThresholds()
    assert heuristic_action(summary(0.0), th)[0] is Action.TURN_RIGHT
    assert heuristic_action(summary(0.4, 100, (20, 64)), th)[0] is Action.TURN_LEFT
    assert heuristic_action(summary(0.4, 100, (110, 64)), th)[0] is Action.TURN_RIGHT
    assert heuristic_action(summary(0.4, 100, (64, 10)), th)[0] is Action.LOOK_UP
    assert heuristic_action(summary(0.4, 100, (64, 120)), th)[0] is Action.LOOK_DOWN
    # horizontal deviation resolved before vertical
    assert heuristic_action(summary(0.4, 100, (10, 10)), th)[0] is Action.TURN_LEFT
    assert heuristic_action(summary(0.4, 0.05 * W * H, (64, 64)), th)[0] is Action.MOVE_FORWARD
    assert heuristic_action(summary(0.4, 0.08 * W * H, (64, 64)), th)[0] is Action.STOP


@settings(max_examples=100)
@given(st.floats(0, 1), st.floats(0, W * H), st.floats(0, W), st.floats(0, H), st.floats(0.01, 0.5))
def test_heuristic_is_pure(conf, area, cx, cy, thr):
    s = summary(conf, area, (cx, cy))
    th = HeuristicThresholds(thr)
    assert heuristic_action(s, th) == heuristic_action(s, th)
    d = heuristic_policy(state([s]), th)
    assert format_reward(d.to_json()) == 0.05


# ------------------------------------------------------------ shortest path oracle


def _open_room(target_center):
    lamp = SceneObject(1, "lamp", (), OrientedBox3D(target_center, (0.2, 1.0, 0.2)))
    bounds = (0.0, 0.0, 8.0, 8.0)
    return Scene(bounds, (lamp,), compute_nav_grid(bounds, 0.25, 0.15, [lamp.box]), 0.25, 0)


def test_shortest_path_examples():
    target = (2.125, 1.0, 4.125)
    s = _open_room(target)
    assert shortest_path_action(s, Pose((2.125, 1.0, 2.625), 0), target, 1.5)[0] is Action.STOP
    far = (6.125, 1.0, 2.625)
    s = _open_room(far)
    # the standoff cell lies along +x, which is 90 degrees to the left at yaw 0
    assert shortest_path_action(s, Pose((2.125, 1.0, 2.625), 0), far, 1.5)[0] is Action.TURN_LEFT
    assert shortest_path_action(s, Pose((2.125, 1.0, 2.625), 90), far, 1.5)[0] is Action.MOVE_FORWARD


def test_shortest_path_stops_off_grid():
    s = _open_room((6.125, 1.0, 2.625))
    # inside the lamp's blocked footprint
    assert shortest_path_action(s, Pose((6.125, 1.0, 2.625), 0), (6.125, 1.0, 2.625), 1.5)[0] is Action.STOP


def test_shortest_path_reaches_standoff_audit():
    """With an unconstrained budget the oracle ends within one step of the best reachable standoff."""
    env = EnvConfig()
    specs, _ = make_episodes(200, 7)
    for k, spec in enumerate(specs):
        long = dataclasses.replace(spec, horizon=80)
        sc = spec.scene
        tgt = sc.object_by_id(spec.instruction.target_id).box.center
        start = sc.cell_of(spec.start_pose.position[0], spec.start_pose.position[2])
        reach = np.argwhere(bfs_distances(sc.nav_grid, start) >= 0)
        best = min(abs(math.hypot(*np.subtract(sc.cell_center(tuple(c)), (tgt[0], tgt[2]))) - 1.5)
                   for c in reach)
        tr = run_episode(long, ShortestPathController(), env, k)
        p = tr.final_pose.position
        gap = abs(math.hypot(p[0] - tgt[0], p[2] - tgt[2]) - 1.5) - best
        assert gap <= 0.25, (k, gap)
        assert tr.final_state.done_reason.value == "stopped"


# ------------------------------------------------------------ learned policy


def test_softmax_properties():
    z = np.array([1.0, -2.0, 0.5, 3.0, 0.0, 0.1])
    p = softmax(z, 0.4)
    assert p.sum() == pytest.approx(1.0, abs=1e-12) and (p >= 0).all()
    assert softmax(z + 123.0, 0.4) == pytest.approx(p, abs=1e-12)
    assert softmax(np.zeros(6)) == pytest.approx(np.full(6, 1 / 6))
    one_hot = softmax(z, 0.0)
    assert one_hot[3] == 1.0 and one_hot.sum() == 1.0
    assert softmax(z, 1e-3)[3] == pytest.approx(1.0)


@given(st.lists(st.floats(-20, 20), min_size=6, max_size=6), st.floats(-50, 50), st.floats(0.05, 5))
def test_softmax_shift_and_scale(logits, c, tau):
    z = np.array(logits)
    assert softmax(z + c, tau) == pytest.approx(softmax(z, tau), abs=1e-9)
    p = softmax(z, tau)
    assert abs(p.sum() - 1) < 1e-9
    assert np.argmax(p) == np.argmax(softmax(z, tau * 3.0)) or np.isclose(np.sort(z)[-1], np.sort(z)[-2])


def test_learned_policy_replay_log_prob():
    params = init_params(3)
    x = featurize([summary(0.2, 300, (40, 70)), summary(0.5, 500, (60, 70))], Action.TURN_LEFT, 2, 10,
                  TaskType.SEGMENTATION)
    for seed in range(20):
        d, dist = learned_policy("segment the lamp", x, params, 0.4, seed,
                                 routed=(TaskType.SEGMENTATION, "lamp"))
        d2, dist2 = learned_policy("segment the lamp", x, params, 0.4, seed,
                                   routed=(TaskType.SEGMENTATION, "lamp"))
        assert d == d2
        assert dist.log_prob(d.action) == pytest.approx(
            math.log(softmax(action_logits(params, x), 0.4)[d.action.index]))
        assert dist.action_probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert format_reward(d.to_json()) == 0.05


def test_learned_policy_routing_first_step():
    params = init_params(0)
    params["route_w"][:] = 0.0
    params["route_w"][TaskType.BOX3D.index, -1] = 50.0
    x = np.zeros(N_FEATURES)
    d, dist = learned_policy("locate the lamp", x, params, 0.4, 1)
    assert d.task_type is TaskType.BOX3D and d.prompt == "lamp"
    assert dist.route_probs[TaskType.BOX3D.index] == pytest.approx(1.0)
    h, prompt, probs = route("locate the lamp", params, 0.0, np.random.default_rng(0))
    assert h is TaskType.BOX3D and probs.tolist() == [0.0, 0.0, 1.0]


def test_argmax_temperature_is_deterministic():
    params = init_params(5)
    x = np.random.default_rng(0).random(N_FEATURES)
    acts = {learned_policy("locate the lamp", x, params, 0.0, s, (TaskType.GROUNDING, "lamp"))[0].action
            for s in range(30)}
    assert len(acts) == 1


# ------------------------------------------------------------ features


def test_featurize_examples():
    absent = featurize([summary(0.0)], None, 0, 10, TaskType.GROUNDING)
    assert absent.shape == (N_FEATURES,)
    assert absent[2] == 0 and absent[3] == 0 and absent[4] == 0 and absent[5] == 0
    full = featurize([summary(0.9, W * H, (64, 64))], None, 0, 10, TaskType.BOX3D)
    assert full[2] == 1.0 and full[3] == 0.0 and full[4] == 0.0 and full[5] == 1.0
    assert full[13:].tolist() == [0, 0, 1]
    two = featurize([summary(0.4, 10, (64, 64)), summary(0.7, 10, (64, 64))], Action.LOOK_UP, 3, 10,
                    TaskType.GROUNDING)
    assert (two[0], two[1]) == (0.7, 0.4)
    assert two[6] == 0.3
    assert two[7:13].tolist() == [0, 0, 0, 1, 0, 0]
    first = featurize([summary(0.4)], None, 0, 10, TaskType.GROUNDING)
    assert first[0] == first[1] == 0.4
    with pytest.raises(ValueError):
        featurize([], None, 0, 10, TaskType.GROUNDING)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 2 * W * H), st.floats(-100, 300), st.floats(-100, 300)),
                min_size=1, max_size=4),
       st.sampled_from([None, *ACTIONS]), st.integers(0, 10), st.sampled_from(list(TaskType)))
def test_featurize_invariants(hist, last, step, task):
    x = featurize([summary(c, a, (u, v)) for c, a, u, v in hist], last, step, 10, task)
    assert np.isfinite(x).all()
    assert -0.5 <= x[3] <= 0.5 and -0.5 <= x[4] <= 0.5
    assert x[5] in (0.0, 1.0)
    assert set(np.unique(x[7:])) <= {0.0, 1.0}


# ------------------------------------------------------------ params files


def test_params_round_trip(tmp_path):
    p = init_params(9)
    assert loads_params(dumps_params(p)).keys() == p.keys()
    back = loads_params(dumps_params(p))
    for k in p:
        assert np.array_equal(back[k], p[k])
    save_params(p, tmp_path / "x.params")
    assert dumps_params(load_params(tmp_path / "x.params")) == dumps_params(p)


def test_params_file_errors():
    data = dumps_params(init_params(1))
    with pytest.raises(ValueError, match="magic"):
        loads_params(b"junk" + data)
    with pytest.raises(ValueError, match="truncated"):
        loads_params(data[:-9])
    with pytest.raises(ValueError, match="trailing"):
        loads_params(data + b"\0" * 8)


def test_action_distribution_log_prob():
    d = ActionDistribution(np.array([0.5, 0.1, 0.1, 0.1, 0.1, 0.1]))
    assert d.log_prob(Action.MOVE_FORWARD) == pytest.approx(math.log(0.5))
