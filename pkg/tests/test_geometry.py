import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcslam.geometry import (
    PointCloud2,
    Pose2,
    compose,
    estimate_normals,
    find_correspondences,
    inverse,
    transform_point,
    voxel_decimate,
    wrap_angle,
)

finite = st.floats(-50, 50, allow_nan=False)
angles = st.floats(-20, 20, allow_nan=False)
poses = st.builds(Pose2, finite, finite, angles)


def matrix(p):
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.x], [s, c, p.y], [0, 0, 1.0]])


def close(a, b, tol=1e-9):
    return (abs(a.x - b.x) < tol and abs(a.y - b.y) < tol
            and abs(wrap_angle(a.theta - b.theta)) < tol)


def test_wrap_convention():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert -math.pi < wrap_angle(-3 * math.pi) <= math.pi


def test_compose_examples():
    T = Pose2(0.3, -1.2, 2.0)
    assert compose(Pose2.identity(), T) == T
    assert close(compose(T, inverse(T)), Pose2.identity(), 1e-12)
    r = compose(Pose2(1, 0, math.pi / 2), Pose2(1, 0, 0))
    m = matrix(Pose2(1, 0, math.pi / 2)) @ matrix(Pose2(1, 0, 0))
    assert r.x == pytest.approx(m[0, 2], abs=1e-12) and r.x == pytest.approx(1.0)
    assert r.y == pytest.approx(m[1, 2], abs=1e-12) and r.y == pytest.approx(1.0)
    assert r.theta == pytest.approx(math.pi / 2)


def test_inverse_examples():
    assert inverse(Pose2.identity()) == Pose2.identity()
    assert inverse(Pose2(1, 2, 0)) == Pose2(-1, -2, 0)
    assert inverse(Pose2(0, 0, 0.7)).theta == pytest.approx(-0.7)
    assert inverse(Pose2(0, 0, 0.7)).x == pytest.approx(0.0, abs=1e-15)


def test_transform_point_examples():
    np.testing.assert_allclose(transform_point(Pose2.identity(), (3, 4)), [3, 4])
    c, s = math.cos(math.pi), math.sin(math.pi)
    oracle = np.array([[c, -s], [s, c]]) @ np.array([1.0, 0.0])
    np.testing.assert_allclose(transform_point(Pose2(0, 0, math.pi), (1, 0)), oracle, atol=1e-12)
    np.testing.assert_allclose(transform_point(Pose2(0, 0, math.pi), (1, 0)), [-1, 0], atol=1e-12)
    np.testing.assert_allclose(transform_point(Pose2(5, 0, 0), (1, 1)), [6, 1])


@given(poses, poses)
def test_compose_matches_matrix_product(a, b):
    m = matrix(a) @ matrix(b)
    r = compose(a, b)
    assert close(r, Pose2(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0])), 1e-9)


@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-9)


@given(st.lists(poses, min_size=1, max_size=20))
def test_theta_stays_wrapped(seq):
    acc = Pose2.identity()
    for p in seq:
        acc = compose(acc, inverse(p)) if p.x > 0 else compose(p, acc)
        assert -math.pi < acc.theta <= math.pi


@given(poses)
def test_inverse_law(a):
    assert close(compose(a, inverse(a)), Pose2.identity(), 1e-9)
    assert close(compose(inverse(a), a), Pose2.identity(), 1e-9)


def test_pointcloud_invariants():
    with pytest.raises(ValueError):
        PointCloud2([[0, np.inf]])
    with pytest.raises(ValueError):
        PointCloud2([[0, 0]], [[2, 0]])
    c = PointCloud2([[0, 0], [1, 1]], [[1, 0], [np.nan, np.nan]])
    assert c.has_normal.tolist() == [True, False]


def test_normals_on_a_line():
    pts = np.stack([np.linspace(-5, 5, 50), np.zeros(50)], axis=1) + [0, 1.0]
    c = estimate_normals(PointCloud2(pts), k=8)
    assert c.has_normal.all()
    np.testing.assert_allclose(np.abs(c.normals[:, 1]), 1.0, atol=1e-12)
    np.testing.assert_allclose(c.normals[:, 0], 0.0, atol=1e-12)
    # the line lies at y = 1, so the origin-facing normal points down
    assert np.all(c.normals[:, 1] < 0)


def test_single_point_is_flagged():
    c = estimate_normals(PointCloud2([[1.0, 2.0]]), k=8)
    assert not c.has_normal.any()


def test_normals_on_circle_are_radial():
    a = np.linspace(0, 2 * np.pi, 300, endpoint=False)
    pts = 2.0 * np.stack([np.cos(a), np.sin(a)], axis=1)
    c = estimate_normals(PointCloud2(pts), k=8)
    assert c.has_normal.all()
    # analytic normal of a circle around the origin, facing the origin
    radial = -pts / 2.0
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", radial, c.normals), -1, 1))
    assert ang.max() < 0.05


def test_outlier_without_neighbours_is_flagged():
    pts = np.vstack([np.stack([np.linspace(0, 1, 40), np.zeros(40)], axis=1), [[30.0, 30.0]]])
    c = estimate_normals(PointCloud2(pts), k=8)
    assert not c.has_normal[-1]
    assert c.has_normal[:-1].all()


def brute_force(fixed, moving, guess, gate, normal_gate):
    out = set()
    q = guess.transform_points(moving.points)
    for i, p in enumerate(q):
        d = np.hypot(*(fixed.points - p).T)
        j = int(np.argmin(d))
        if d[j] > gate:
            continue
        if fixed.normals is not None and moving.normals is not None:
            nf, nm = fixed.normals[j], guess.rotate_vectors(moving.normals[i:i + 1])[0]
            if not (np.isnan(nf[0]) or np.isnan(nm[0])):
                if math.acos(np.clip(nf @ nm, -1, 1)) > normal_gate:
                    continue
        out.add((j, i, round(float(d[j]), 12)))
    return out


def test_correspondences_identity():
    rng = np.random.default_rng(0)
    c = PointCloud2(rng.uniform(-3, 3, (100, 2)))
    corr = find_correspondences(c, c, Pose2.identity(), 0.1)
    assert len(corr) == 100
    assert np.all(corr.distance == 0)
    assert corr.fixed_index.tolist() == corr.moving_index.tolist()


def test_correspondences_far_apart():
    rng = np.random.default_rng(1)
    c = PointCloud2(rng.uniform(-1, 1, (50, 2)))
    assert len(find_correspondences(c, c, Pose2(10, 0, 0), 0.5)) == 0


@pytest.mark.parametrize("seed", range(12))
def test_correspondences_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 500))
    fixed = estimate_normals(PointCloud2(rng.uniform(-4, 4, (n, 2))), k=4)
    moving = estimate_normals(PointCloud2(rng.uniform(-4, 4, (int(rng.integers(20, 500)), 2))), k=4)
    guess = Pose2(*rng.uniform(-0.5, 0.5, 2), rng.uniform(-0.5, 0.5))
    gate = float(rng.uniform(0.05, 0.6))
    normal_gate = float(rng.uniform(0.2, 3.0))
    corr = find_correspondences(fixed, moving, guess, gate, normal_gate)
    got = {(f.fixed_index, f.moving_index, round(f.distance, 12)) for f in corr.as_list()}
    assert got == brute_force(fixed, moving, guess, gate, normal_gate)
    assert np.all(corr.distance <= gate) and np.all(corr.distance >= 0)


def test_voxel_decimation_keeps_first_and_is_idempotent():
    pts = np.array([[0.01, 0.01], [0.02, 0.02], [0.2, 0.0], [0.011, 0.0]])
    c = voxel_decimate(PointCloud2(pts), 0.05)
    np.testing.assert_array_equal(c.points, pts[[0, 2]])
    assert voxel_decimate(c, 0.05) == c
