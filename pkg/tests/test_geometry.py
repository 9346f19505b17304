import numpy as np
import pytest

from duetgen.geometry import (
    RigidTransform2D,
    matrix_to_rot6d,
    rot6d_to_matrix,
    wrap_angle,
    yaw_from_root_rotation,
    yaw_matrix,
)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def test_identity_rot6d_is_first_two_identity_columns():
    assert np.allclose(matrix_to_rot6d(np.eye(3)), [1, 0, 0, 0, 1, 0])


def test_rot6d_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = random_rotation(rng)
        back = rot6d_to_matrix(matrix_to_rot6d(m))
        assert np.abs(back - m).max() < 1e-9


def test_rot6d_decode_orthonormal_det_plus_one():
    rng = np.random.default_rng(1)
    r6 = rng.standard_normal((50, 6))
    mats = rot6d_to_matrix(r6)
    eye = np.einsum("bij,bik->bjk", mats, mats)
    assert np.abs(eye - np.eye(3)).max() < 1e-9
    assert np.allclose(np.linalg.det(mats), 1.0)


def test_rot6d_parallel_columns_perturbation_rule():
    r6 = np.array([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])  # exactly parallel
    m = rot6d_to_matrix(r6)
    assert np.abs(m @ m.T - np.eye(3)).max() < 1e-9
    assert np.isclose(np.linalg.det(m), 1.0)


def test_yaw_from_rotation_quarter_turn():
    assert np.isclose(yaw_from_root_rotation(yaw_matrix(np.pi / 2)), np.pi / 2)


def test_yaw_degenerate_uses_fallback():
    # forward axis pitched straight up
    m = np.array([[1.0, 0, 0], [0, 0.0, -1.0], [0, 1.0, 0.0]])
    assert yaw_from_root_rotation(m, fallback=0.7) == 0.7
    with pytest.raises(ValueError):
        yaw_from_root_rotation(m)


def test_rigid_transform_inverse_is_identity():
    rng = np.random.default_rng(2)
    pts = rng.standard_normal((100, 3))
    for _ in range(50):
        tf = RigidTransform2D(*rng.uniform(-5, 5, 2), rng.uniform(-np.pi, np.pi))
        back = tf.inverse().apply_points(tf.apply_points(pts))
        assert np.abs(back - pts).max() < 1e-9


def test_rigid_transform_compose_matches_sequential():
    rng = np.random.default_rng(3)
    pts = rng.standard_normal((20, 3))
    a = RigidTransform2D(1.0, -2.0, 0.4)
    b = RigidTransform2D(-0.5, 3.0, -1.2)
    assert np.abs(a.compose(b).apply_points(pts) - a.apply_points(b.apply_points(pts))).max() < 1e-12


def test_transform_preserves_y():
    tf = RigidTransform2D(5.0, -1.0, 1.1)
    p = np.array([[0.3, 1.7, -0.2]])
    assert np.isclose(tf.apply_points(p)[0, 1], 1.7)


def test_wrap_angle_range():
    a = wrap_angle(np.array([0.0, np.pi, -np.pi, 3 * np.pi, -7.5]))
    assert np.all(a >= -np.pi) and np.all(a < np.pi + 1e-12)
    assert np.isclose(wrap_angle(3 * np.pi), -np.pi) or np.isclose(wrap_angle(3 * np.pi), np.pi)
