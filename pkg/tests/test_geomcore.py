import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from shapely.geometry import Polygon

from oracles import brute_force_min_footprint, camera_basis, footprint_corners, monte_carlo_iou3d
from viewseek.geomcore import (
    Box2D, CameraConfig, OrientedBox3D, Pose, backproject_pixel, backproject_pixels, clip_convex,
    convex_hull_2d, dice_masks, fit_min_area_obb, iou_box2d, iou_masks, iou_obb3d, polygon_signed_area,
    project_point,
)

CAM = CameraConfig()
ORIGIN = Pose((0.0, 1.0, 0.0))


# ------------------------------------------------------------ pose and camera


def test_pose_normalizes_yaw_and_clamps_pitch():
    p = Pose((0, 0, 0), yaw=-10, pitch=75)
    assert p.yaw == 350.0
    assert p.pitch == 60.0
    assert Pose((0, 0, 0), yaw=720).yaw == 0.0
    with pytest.raises(ValueError):
        Pose((0, math.nan, 0))


@given(st.floats(-720, 720), st.floats(-60, 60))
def test_axes_match_oracle_basis(yaw, pitch):
    right, up, fwd = Pose((0, 0, 0), yaw, pitch).axes()
    r, u, f = camera_basis(yaw, pitch)
    np.testing.assert_allclose(right, r, atol=1e-12)
    np.testing.assert_allclose(up, u, atol=1e-12)
    np.testing.assert_allclose(fwd, f, atol=1e-12)


def test_camera_rejects_bad_config():
    with pytest.raises(ValueError):
        CameraConfig(width=64, height=32)
    with pytest.raises(ValueError):
        CameraConfig(vertical_fov=180)
    with pytest.raises(ValueError):
        CameraConfig(max_range=0)


def test_on_axis_point_projects_to_center():
    pix, depth = project_point(CAM, ORIGIN, (0.0, 1.0, 2.0))
    np.testing.assert_allclose(pix, [64.0, 64.0])
    assert depth == 2.0


def test_point_behind_camera_is_absent():
    assert project_point(CAM, ORIGIN, (0.0, 1.0, -1.0)) is None


def test_left_edge_point():
    # +x is to the camera's left at yaw 0; tan(45 deg) = 1 puts it on the frame edge
    pix, depth = project_point(CAM, ORIGIN, (2.0, 1.0, 2.0))
    assert pix[0] == pytest.approx(0.0, abs=1e-9)
    assert pix[1] == pytest.approx(64.0)
    assert depth == pytest.approx(2.0)


def test_center_pixel_backprojects_along_axis():
    p = backproject_pixel(CAM, ORIGIN, (64.0, 64.0), 3.0)
    np.testing.assert_allclose(p, [0.0, 1.0, 3.0])


def test_corner_pixel_offsets():
    # pixel (0, 0) samples (0.5, 0.5): offset (0.5 - 64) / 64 = -0.9921875 image units
    p = backproject_pixels(CAM, ORIGIN, np.array([0]), np.array([0]), np.array([1.0]))[0]
    np.testing.assert_allclose(p, [0.9921875, 1.0 + 0.9921875, 1.0])


def test_backproject_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        backproject_pixel(CAM, ORIGIN, (1, 1), 0.0)


def test_round_trip_1000_points():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        pose = Pose(rng.uniform(-3, 3, 3), rng.uniform(0, 360), rng.uniform(-60, 60))
        pix = rng.uniform(0, 128, 2)
        depth = rng.uniform(0.1, 9.0)
        world = backproject_pixel(CAM, pose, pix, depth)
        got = project_point(CAM, pose, world)
        assert got is not None
        back = backproject_pixel(CAM, pose, got[0], got[1])
        worst = max(worst, float(np.abs(back - world).max()))
    assert worst < 1e-6


# ------------------------------------------------------------ box fit


def test_axis_aligned_square():
    pts = [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 1, 1)]
    fit = fit_min_area_obb(pts)
    assert fit.box.yaw == 0.0
    assert fit.area == pytest.approx(1.0)


def test_rotated_square_oracle_value():
    pts = [(0, 0, 0), (0.7071, 0, 0.7071), (1.4142, 1, 0), (0.7071, 0, -0.7071)]
    oracle_area, oracle_yaw = brute_force_min_footprint(pts, 0.01)
    # frozen oracle output
    assert oracle_yaw == pytest.approx(45.0, abs=0.01)
    assert oracle_area == pytest.approx(0.99998082, abs=1e-6)
    fit = fit_min_area_obb(pts, 0.5)
    assert fit.box.yaw == pytest.approx(45.0, abs=0.5)
    assert fit.area == pytest.approx(1.0, rel=1e-3)


def test_recovers_known_box_from_samples():
    rng = np.random.default_rng(3)
    truth = OrientedBox3D((1.0, 0.5, -2.0), (0.8, 0.5, 0.3), 33.0)
    local = rng.uniform(-1, 1, (10_000, 3)) * np.array(truth.half_extents)
    ax, az = truth.local_axes()
    world = np.stack([truth.center[0] + local[:, 0] * ax[0] + local[:, 2] * az[0],
                      truth.center[1] + local[:, 1],
                      truth.center[2] + local[:, 0] * ax[1] + local[:, 2] * az[1]], 1)
    fit = fit_min_area_obb(world, 0.5)
    assert abs(fit.box.yaw - truth.yaw) <= 0.5
    assert fit.area == pytest.approx(truth.footprint_area, rel=0.02)


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_min_area_obb([(0, 0, 0), (1, 0, 0)])
    with pytest.raises(ValueError):
        fit_min_area_obb([(0, 0, 0), (1, 0, 0), (0, 0, 1)], angle_step=0)


def test_collinear_points_are_flagged_degenerate():
    fit = fit_min_area_obb([(0, 0, 0), (1, 0, 0), (2, 1, 0)])
    assert fit.degenerate
    assert min(fit.box.half_extents) > 0


point_clouds = st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5)), min_size=3, max_size=40)


@settings(max_examples=60, deadline=None)
@given(point_clouds)
def test_fit_contains_inputs_and_beats_same_grid_oracle(pts):
    fit = fit_min_area_obb(pts, 5.0)
    assert fit.box.contains(np.array(pts), slack=1e-9).all()
    oracle, _ = brute_force_min_footprint(pts, 5.0)
    assert fit.area <= oracle + 1e-6


@settings(max_examples=30, deadline=None)
@given(point_clouds)
def test_fit_area_monotone_in_angle_step(pts):
    # nested grids: 2 deg refines 10 deg, 0.5 refines 2
    a10, a2, a05 = (fit_min_area_obb(pts, s).area for s in (10.0, 2.0, 0.5))
    assert a05 <= a2 + 1e-9 <= a10 + 2e-9


# ------------------------------------------------------------ overlaps


def test_iou_box2d_examples():
    a = Box2D(0, 0, 1, 1)
    assert iou_box2d(a, a) == 1.0
    assert iou_box2d(a, Box2D(2, 2, 3, 3)) == 0.0
    assert iou_box2d(a, Box2D(0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)


boxes2d = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 50), st.floats(0.1, 50)).map(
    lambda t: Box2D(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(boxes2d, boxes2d)
def test_iou_box2d_properties(a, b):
    v = iou_box2d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_box2d(b, a))
    assert iou_box2d(a, a) == pytest.approx(1.0)


def test_iou_obb3d_examples():
    a = OrientedBox3D((0, 0, 0), (0.5, 0.5, 0.5))
    assert iou_obb3d(a, a) == pytest.approx(1.0)
    assert iou_obb3d(a, OrientedBox3D((0.5, 0, 0), (0.5, 0.5, 0.5))) == pytest.approx(1 / 3)


obbs = st.builds(
    OrientedBox3D,
    st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)),
    st.tuples(st.floats(0.1, 1), st.floats(0.1, 1), st.floats(0.1, 1)),
    st.floats(0, 180),
)


@settings(max_examples=80, deadline=None)
@given(obbs, obbs, st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 360))
def test_iou_obb3d_rigid_invariance_and_symmetry(a, b, tx, tz, rot):
    def move(box):
        r = math.radians(rot)
        x, y, z = box.center
        # rotate about +y by the same sense as box yaw: local x = (cos, -sin)
        nx = x * math.cos(r) + z * math.sin(r)
        nz = -x * math.sin(r) + z * math.cos(r)
        return OrientedBox3D((nx + tx, y, nz + tz), box.half_extents, box.yaw + rot)

    v = iou_obb3d(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_obb3d(b, a), abs=1e-9)
    assert v == pytest.approx(iou_obb3d(move(a), move(b)), abs=1e-6)


def test_footprint_intersection_matches_shapely():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = (tuple(rng.uniform(-1, 1, 3)), tuple(rng.uniform(0.1, 1, 3)), float(rng.uniform(0, 180)))
        b = (tuple(rng.uniform(-1, 1, 3)), tuple(rng.uniform(0.1, 1, 3)), float(rng.uniform(0, 180)))
        pa, pb = Polygon(footprint_corners(*a)), Polygon(footprint_corners(*b))
        mine = clip_convex(OrientedBox3D(*a).footprint(), OrientedBox3D(*b).footprint())
        area = abs(polygon_signed_area(mine)) if len(mine) >= 3 else 0.0
        assert area == pytest.approx(pa.intersection(pb).area, abs=1e-9)


def test_iou_obb3d_monte_carlo_spot_check():
    a = ((0.1, 0.0, 0.2), (0.6, 0.4, 0.3), 20.0)
    b = ((0.3, 0.1, 0.0), (0.5, 0.5, 0.5), 70.0)
    est = monte_carlo_iou3d(a, b, 200_000, seed=1)
    assert iou_obb3d(OrientedBox3D(*a), OrientedBox3D(*b)) == pytest.approx(est, abs=0.02)


def test_mask_examples():
    a = np.zeros((20, 20), bool)
    b = np.zeros((20, 20), bool)
    a[:10, :10] = True
    b[5:15, :10] = True
    assert iou_masks(a, b) == pytest.approx(1 / 3)
    assert dice_masks(a, b) == pytest.approx(0.5)
    assert iou_masks(a, a) == dice_masks(a, a) == 1.0


def test_empty_masks_only_score_when_target_absent():
    e = np.zeros((4, 4), bool)
    assert iou_masks(e, e) == 0.0 and dice_masks(e, e) == 0.0
    assert iou_masks(e, e, target_absent=True) == 1.0
    assert dice_masks(e, e, target_absent=True) == 1.0
    with pytest.raises(ValueError):
        iou_masks(e, np.zeros((3, 3), bool))


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_dice_at_least_iou(seed, pa, pb):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16)) < pa, rng.random((16, 16)) < pb
    i, d = iou_masks(a, b), dice_masks(a, b)
    assert 0.0 <= i <= d <= 1.0
    assert i == iou_masks(b, a) and d == dice_masks(b, a)


def test_convex_hull_is_ccw():
    pts = np.random.default_rng(0).normal(size=(50, 2))
    hull = convex_hull_2d(pts)
    assert polygon_signed_area(hull) > 0
