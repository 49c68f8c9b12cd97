import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxprior.errors import BoxNotVisibleError, ChainError, SceneParseError, TransformError
from boxprior.geometry import (
    BoundingBox2D,
    BoundingBox3D,
    ImagePlane,
    IntrinsicMatrix,
    Point3,
    PointCloud,
    PoseChain,
    ProjectedPoint,
    RigidTransform,
    box3d_corners,
    compose_chain,
    format_calibration,
    invert_transform,
    parse_calibration,
    points_in_box2d,
    project_box3d,
    project_points,
    rasterize,
    rasterize_all,
)

import oracles

UNIT_K = IntrinsicMatrix([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]])
K100 = IntrinsicMatrix.from_pinhole(100.0, 100.0, 320.0, 240.0)
PLANE = ImagePlane(640, 480)

FRAMES = ["lidar", "ego_tl", "global", "ego_tc", "camera"]


def random_chain(rng, n=4):
    frames = [f"f{i}" for i in range(n + 1)] if n != 4 else FRAMES
    return PoseChain(
        tuple((f"{frames[i + 1]}<-{frames[i]}", RigidTransform(oracles.random_rigid(rng))) for i in range(n))
    )


def assert_rigid(t: RigidTransform):
    r = t.rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
    assert np.linalg.det(r) > 0
    assert t.matrix[3].tolist() == [0, 0, 0, 1]


# -- transforms ----------------------------------------------------------------------


def test_compose_identity_chain():
    chain = PoseChain(tuple((f"{FRAMES[i + 1]}<-{FRAMES[i]}", RigidTransform.identity()) for i in range(4)))
    np.testing.assert_array_equal(compose_chain(chain).matrix, np.eye(4))


def test_compose_with_inverse():
    t = RigidTransform(oracles.random_rigid(np.random.default_rng(0)))
    chain = PoseChain((("b<-a", t), ("a<-b", invert_transform(t))))
    np.testing.assert_allclose(compose_chain(chain).matrix, np.eye(4), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_compose_matches_naive_product(seed):
    chain = random_chain(np.random.default_rng(seed))
    # Written order: camera<-ego_tc @ ego_tc<-global @ global<-ego_tl @ ego_tl<-lidar
    expected = np.eye(4)
    for _, t in reversed(chain.stages):
        expected = oracles.naive_matmul(expected, t.matrix)
    result = compose_chain(chain)
    assert np.abs(result.matrix - expected).max() < 1e-12
    assert_rigid(result)


def test_chain_frame_mismatch():
    t = RigidTransform.identity()
    with pytest.raises(ChainError):
        PoseChain((("ego<-lidar", t), ("camera<-global", t)))
    with pytest.raises(ChainError):
        PoseChain(())
    with pytest.raises(ChainError):
        PoseChain((("no arrow", t),))


def test_invert_cases():
    np.testing.assert_array_equal(invert_transform(RigidTransform.identity()).matrix, np.eye(4))
    t = RigidTransform.from_rotation_translation(np.eye(3), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(invert_transform(t).translation, [-1.0, -2.0, -3.0])
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = RigidTransform(oracles.random_rigid(rng))
        inv = invert_transform(t)
        assert_rigid(inv)
        assert np.abs(oracles.naive_matmul(inv.matrix, t.matrix) - np.eye(4)).max() < 1e-12


def test_rigid_invariants_enforced():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(TransformError):
        RigidTransform(bad)
    reflect = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(TransformError):
        RigidTransform(reflect)
    with pytest.raises(TransformError):
        IntrinsicMatrix([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 1]])


def test_inverted_chain_labels():
    chain = random_chain(np.random.default_rng(2))
    inv = chain.inverted()
    assert inv.source == "camera" and inv.target == "lidar"
    np.testing.assert_allclose((compose_chain(chain) @ compose_chain(inv)).matrix, np.eye(4), atol=1e-12)


# -- projection ---------------------------------------------------------------------


def test_projection_optical_axis_and_behind():
    cloud = PointCloud.from_points([Point3(0, 0, 2), Point3(0, 0, -1)])
    proj = project_points(cloud, UNIT_K, RigidTransform.identity(), ImagePlane(10, 10))
    assert list(proj) == [ProjectedPoint(0, 0.0, 0.0, 2.0)]


def test_projection_pinhole_formula():
    cloud = PointCloud.from_points([Point3(2, 4, 2)])
    proj = project_points(cloud, K100, RigidTransform.identity(), PLANE)
    # u = f x / z + cx, v = f y / z + cy
    assert (proj.u[0], proj.v[0], proj.depth[0]) == (100 * 2 / 2 + 320, 100 * 4 / 2 + 240, 2.0)


def test_projection_empty_cloud():
    assert len(project_points(PointCloud.empty(), K100, RigidTransform.identity(), PLANE)) == 0


@pytest.mark.parametrize("seed", range(3))
def test_projection_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    chain = random_chain(rng)
    xyz = rng.uniform(-10, 10, size=(500, 3))
    cloud = PointCloud(xyz, rng.uniform(0, 1, 500))
    proj = project_points(cloud, K100, compose_chain(chain), PLANE)
    idx, u, v, d = oracles.project_oracle(xyz, K100.matrix, [t.matrix for _, t in chain.stages], 640, 480)
    np.testing.assert_array_equal(proj.source_index, idx)
    np.testing.assert_allclose(proj.u, u, atol=1e-9, rtol=0)
    np.testing.assert_allclose(proj.v, v, atol=1e-9, rtol=0)
    np.testing.assert_allclose(proj.depth, d, atol=1e-9, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_invariants(seed):
    rng = np.random.default_rng(seed)
    chain = random_chain(rng)
    xyz = rng.uniform(-20, 20, size=(200, 3))
    cloud = PointCloud(xyz, rng.uniform(0, 1, 200))
    t = compose_chain(chain)
    proj = project_points(cloud, K100, t, PLANE)
    assert len(cloud) >= len(proj)
    assert np.all(proj.depth > 0)
    assert np.all((proj.u >= 0) & (proj.u < 640) & (proj.v >= 0) & (proj.v < 480))
    assert np.all(np.diff(proj.source_index) > 0)
    # Same result when points are first carried through every stage explicitly.
    moved = xyz
    for _, stage in chain.stages:
        moved = stage.apply(moved)
    staged = project_points(PointCloud(moved, cloud.intensity), K100, RigidTransform.identity(), PLANE)
    common = np.intersect1d(proj.source_index, staged.source_index)
    a = np.searchsorted(proj.source_index, common)
    b = np.searchsorted(staged.source_index, common)
    np.testing.assert_allclose(proj.u[a], staged.u[b], atol=1e-9, rtol=0)
    np.testing.assert_allclose(proj.v[a], staged.v[b], atol=1e-9, rtol=0)
    # Membership can only differ for points sitting within rounding of an image edge.
    for name, p in (("chain", proj), ("staged", staged)):
        other = staged if name == "chain" else proj
        lone = np.setdiff1d(p.source_index, other.source_index)
        k = np.searchsorted(p.source_index, lone)
        edge = np.minimum.reduce([p.u[k], 640 - p.u[k], p.v[k], 480 - p.v[k]])
        assert np.all(edge < 1e-9)


def test_projection_deterministic():
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.uniform(-10, 10, (300, 3)), rng.uniform(0, 1, 300))
    t = compose_chain(random_chain(rng))
    a, b = project_points(cloud, K100, t, PLANE), project_points(cloud, K100, t, PLANE)
    for field in ("source_index", "u", "v", "depth"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


# -- rasterization ------------------------------------------------------------------------


def test_rasterize_cases():
    assert rasterize(ProjectedPoint(0, 420.7, 440.2, 1.0)) == (420, 440)
    assert rasterize(ProjectedPoint(0, 0.999, 0.0, 1.0)) == (0, 0)


def test_rasterize_matches_floor_oracle():
    rng = np.random.default_rng(4)
    u, v = rng.uniform(0, 640, 1000), rng.uniform(0, 480, 1000)
    px = rasterize_all(u, v)
    assert px.tolist() == [[math.floor(a), math.floor(b)] for a, b in zip(u, v)]
    assert [rasterize(ProjectedPoint(0, a, b, 1.0)) for a, b in zip(u, v)] == [tuple(p) for p in px.tolist()]


# -- boxes --------------------------------------------------------------------------------------


def test_unit_cube_corners():
    corners = box3d_corners(BoundingBox3D((0, 0, 0), (1, 1, 1), 0.0, 0))
    assert sorted(map(tuple, corners)) == sorted(
        (sx * 0.5, sy * 0.5, sz * 0.5) for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)
    )


def test_quarter_turn_swaps_extent():
    box = BoundingBox3D((0, 0, 0), (2, 1, 1), 0.0, 0)
    turned = BoundingBox3D((0, 0, 0), (2, 1, 1), math.pi / 2, 0)
    c0, c1 = box3d_corners(box), box3d_corners(turned)
    np.testing.assert_allclose(np.ptp(c0, axis=0), [1, 2, 1], atol=1e-12)
    np.testing.assert_allclose(np.ptp(c1, axis=0), [2, 1, 1], atol=1e-12)


def test_corners_match_rotation_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        center, size, yaw = rng.normal(size=3) * 5, rng.uniform(0.2, 4, 3), rng.uniform(-math.pi, math.pi)
        got = box3d_corners(BoundingBox3D(center, size, yaw, 1))
        np.testing.assert_allclose(got, oracles.yaw_corners_oracle(center, size, yaw), atol=1e-12, rtol=0)


def test_box_projection_is_corner_min_max():
    box = BoundingBox3D((0.0, 0.0, 8.0), (1.0, 1.0, 1.0), 0.0, 2)
    got = project_box3d(box, K100, RigidTransform.identity(), PLANE)
    us, vs = [], []
    for c in oracles.yaw_corners_oracle(box.center, box.size, 0.0):
        us.append(100 * c[0] / c[2] + 320)
        vs.append(100 * c[1] / c[2] + 240)
    assert (got.x1, got.y1, got.x2, got.y2) == pytest.approx((min(us), min(vs), max(us), max(vs)), abs=1e-9)
    assert got.class_id == 2


def test_box_behind_camera():
    box = BoundingBox3D((0.0, 0.0, -8.0), (1.0, 1.0, 1.0), 0.0, 2)
    with pytest.raises(BoxNotVisibleError):
        project_box3d(box, K100, RigidTransform.identity(), PLANE)


def test_box_outside_image_rejected():
    box = BoundingBox3D((100.0, 0.0, 5.0), (1.0, 1.0, 1.0), 0.0, 1)
    with pytest.raises(BoxNotVisibleError):
        project_box3d(box, K100, RigidTransform.identity(), PLANE)


def test_box_partially_outside_is_clamped():
    box = BoundingBox3D((15.0, 0.0, 5.0), (2.0, 2.0, 2.0), 0.3, 1)
    raw = project_box3d(box, K100, RigidTransform.identity(), PLANE, clamp=False)
    got = project_box3d(box, K100, RigidTransform.identity(), PLANE)
    assert raw.x2 > 640
    assert got.x2 == 640 and got.x1 == raw.x1
    assert (got.y1, got.y2) == (raw.y1, raw.y2)


def test_box_with_corners_behind_uses_front_corners():
    box = BoundingBox3D((0.0, 0.0, 0.2), (1.0, 1.0, 1.0), 0.0, 1)
    raw = project_box3d(box, K100, RigidTransform.identity(), PLANE, clamp=False)
    front = [c for c in box3d_corners(box) if c[2] > 0]
    us = [100 * c[0] / c[2] + 320 for c in front]
    assert raw.x1 == pytest.approx(min(us)) and raw.x2 == pytest.approx(max(us))


@pytest.mark.parametrize("seed", range(3))
def test_box_contains_every_positive_depth_corner(seed):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        box = BoundingBox3D(rng.uniform([-3, -3, 1], [3, 3, 12]), rng.uniform(0.5, 3, 3), rng.uniform(-3, 3), 0)
        try:
            b = project_box3d(box, K100, RigidTransform.identity(), PLANE)
        except BoxNotVisibleError:
            continue
        for c in box3d_corners(box):
            if c[2] <= 0:
                continue
            u = min(max(100 * c[0] / c[2] + 320, 0), 640)
            v = min(max(100 * c[1] / c[2] + 240, 0), 480)
            assert b.x1 - 1e-9 <= u <= b.x2 + 1e-9 and b.y1 - 1e-9 <= v <= b.y2 + 1e-9


def test_points_in_box_cases():
    rng = np.random.default_rng(6)
    cloud = PointCloud(rng.uniform([-5, -5, 1], [5, 5, 10], (400, 3)), rng.uniform(0, 1, 400))
    proj = project_points(cloud, K100, RigidTransform.identity(), PLANE)
    assert points_in_box2d(proj, BoundingBox2D(0.0, 0.0, 0.5, 0.5, 0)).tolist() == []
    np.testing.assert_array_equal(points_in_box2d(proj, BoundingBox2D.whole_image(PLANE)), proj.source_index)


def test_points_in_box_strict_boundary():
    cloud = PointCloud.from_points([Point3(0, 0, 1), Point3(1, 0, 1), Point3(0.5, 0.5, 1)])
    proj = project_points(cloud, UNIT_K, RigidTransform.identity(), ImagePlane(4, 4))
    assert points_in_box2d(proj, BoundingBox2D(0.0, 0.0, 1.0, 1.0, 0)).tolist() == [2]


def test_points_in_box_matches_scan():
    rng = np.random.default_rng(7)
    cloud = PointCloud(rng.uniform([-8, -6, 1], [8, 6, 20], (10_000, 3)), rng.uniform(0, 1, 10_000))
    proj = project_points(cloud, K100, RigidTransform.identity(), PLANE)
    us, vs, idx = proj.u.tolist(), proj.v.tolist(), proj.source_index.tolist()
    for _ in range(100):
        x1, x2 = sorted(rng.uniform(0, 640, 2))
        y1, y2 = sorted(rng.uniform(0, 480, 2))
        got = points_in_box2d(proj, BoundingBox2D(x1, y1, x2, y2, 0))
        assert got.tolist() == oracles.box_scan_oracle(us, vs, idx, x1, y1, x2, y2)


# -- calibration format -----------------------------------------------------------------------------


def test_calibration_round_trip_bit_exact():
    rng = np.random.default_rng(8)
    chain = random_chain(rng)
    k = IntrinsicMatrix.from_pinhole(*rng.uniform(50, 500, 4))
    k2, chain2 = parse_calibration(format_calibration(k, chain))
    assert k2 == k
    assert [label for label, _ in chain2.stages] == [label for label, _ in chain.stages]
    for (_, a), (_, b) in zip(chain.stages, chain2.stages):
        assert a == b


def test_calibration_format_lines():
    chain = PoseChain((("camera<-lidar", RigidTransform.identity()),))
    text = format_calibration(K100, chain)
    lines = text.splitlines()
    assert lines[0].startswith("K: 100 0 320 0 0 100 240 0")
    assert lines[1] == "T camera<-lidar: 1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1"


def test_calibration_parse_errors():
    with pytest.raises(SceneParseError, match="offset 0"):
        parse_calibration("K: 1 2 3\n")
    good = "K: 1 0 0 0 0 1 0 0 0 0 1 0\n"
    with pytest.raises(SceneParseError, match=f"offset {len(good)}"):
        parse_calibration(good + "T a<-b: 1 2\n")
