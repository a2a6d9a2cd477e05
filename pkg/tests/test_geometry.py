import math

import numpy as np
import pytest

from trajstream.geometry import Pose2D, compose_pose_array, wrap_angle


def test_wrap_angle_range_and_boundary():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    rng = np.random.default_rng(0)
    a = rng.uniform(-50, 50, 1000)
    w = wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    assert np.allclose(np.sin(w), np.sin(a), atol=1e-12)
    assert np.allclose(np.cos(w), np.cos(a), atol=1e-12)


def test_pose_rejects_non_finite():
    with pytest.raises(ValueError):
        Pose2D(float("nan"), 0.0, 0.0)


def test_compose_inverse_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = Pose2D(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi))
        q = p.compose(p.inverse())
        assert abs(q.x) < 1e-9 and abs(q.y) < 1e-9 and abs(q.yaw) < 1e-9


def test_transform_points_matches_compose():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a = Pose2D(*rng.uniform(-10, 10, 2), rng.uniform(-math.pi, math.pi))
        b = Pose2D(*rng.uniform(-10, 10, 2), rng.uniform(-math.pi, math.pi))
        # composing and transforming the origin of b agree
        ab = a.compose(b)
        pt = a.transform_points(np.array([b.x, b.y]))
        assert np.allclose(pt, [ab.x, ab.y], atol=1e-12)


def test_compose_pose_array_matches_scalar_compose():
    rng = np.random.default_rng(3)
    frame = Pose2D(1.5, -2.0, 0.7)
    poses = np.column_stack([rng.uniform(-5, 5, 20), rng.uniform(-5, 5, 20),
                             rng.uniform(-math.pi, math.pi, 20)])
    out = compose_pose_array(frame, poses)
    for row_in, row_out in zip(poses, out):
        ref = frame.compose(Pose2D(*row_in))
        assert np.allclose(row_out, [ref.x, ref.y, ref.yaw], atol=1e-12)


def test_rotate_vectors_no_translation():
    p = Pose2D(5.0, 7.0, math.pi / 2)
    v = p.rotate_vectors(np.array([1.0, 0.0]))
    assert np.allclose(v, [0.0, 1.0], atol=1e-12)
