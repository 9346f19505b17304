import numpy as np
import pytest

from conftest import make_sequence
from duetgen.geometry import RigidTransform2D, wrap_angle
from duetgen.motion import (
    DuetSequence,
    MotionSequence,
    canonicalize_window,
    compute_features,
    feature_dim,
    foot_contacts,
    invert_canonicalization,
    relation_from_poses,
    relation_track,
    relation_world_pose,
    sequence_from_features,
    windowize,
)
from duetgen.synthetic import SyntheticDuetSpec, generate_synthetic_duet


def _static_pose(skeleton, frames=20):
    pose = skeleton.rest_offsets.copy()
    pose[0] = [0.0, 0.95, 0.0]
    # resolve the chain so heights look sane (children relative to parents)
    for j, p in enumerate(skeleton.parents):
        if p >= 0:
            pose[j] = pose[p] + skeleton.rest_offsets[j]
    return np.tile(pose, (frames, 1, 1))


def test_static_pose_zero_velocity_all_contacts(skeleton):
    seq = compute_features(_static_pose(skeleton), skeleton, 20.0)
    assert np.abs(seq.velocities).max() == 0.0
    assert np.all(seq.contacts == 1.0)


def test_feature_dim_22_joints(skeleton):
    seq = compute_features(_static_pose(skeleton), skeleton, 20.0)
    feats = seq.features()
    assert feats.shape[1] == 268 == feature_dim(skeleton.joint_count)


def test_root_velocity_finite_difference(skeleton):
    pos = _static_pose(skeleton, frames=20)
    for i in range(20):
        pos[i, :, 2] += 0.5 * i / 20.0  # +0.5 m/s along Z at 20 fps
    seq = compute_features(pos, skeleton, 20.0)
    assert np.allclose(seq.velocities[1:, 0], [0.0, 0.0, 0.5])
    assert np.allclose(seq.velocities[0], seq.velocities[1])  # padding rule


def test_compute_features_rejects_nonfinite(skeleton):
    pos = _static_pose(skeleton)
    pos[7, 3, 1] = np.nan
    with pytest.raises(ValueError, match="frame 7"):
        compute_features(pos, skeleton, 20.0)


def test_foot_contacts_threshold_rules():
    t = 10
    p = np.zeros((t, 4, 3))
    assert np.all(foot_contacts(p, 20.0) == 1.0)  # zero velocity
    fast = p.copy()
    fast[:, 1, 0] = np.arange(t) * 0.5  # 10 m/s at 20 fps
    c = foot_contacts(fast, 20.0, threshold=0.05)
    assert np.all(c[:, 1] == 0.0)
    # power-of-two values make speed == v_c bit-exact: strict inequality tie-break.
    exact = p.copy()
    exact[:, 2, 0] = np.arange(t) * 2.0**-8  # speed = 2^-8 * 16 fps = 0.0625
    c = foot_contacts(exact, fps=16.0, threshold=0.0625)
    assert np.all(c[:, 2] == 0.0)
    below = p.copy()
    below[:, 3, 0] = np.arange(t) * 2.0**-9  # half that speed: contact
    c = foot_contacts(below, fps=16.0, threshold=0.0625)
    assert np.all(c[:, 3] == 1.0)


def test_relation_identity_and_example():
    r = relation_from_poses(np.zeros(2), 0.0, np.zeros(2), 0.0)
    assert (r.r_x, r.r_z, r.r_theta) == (0.0, 0.0, 0.0)
    r = relation_from_poses(np.zeros(2), 0.0, np.array([1.0, 2.0]), np.pi)
    assert np.allclose([r.r_x, r.r_z], [1.0, 2.0])
    assert np.isclose(abs(r.r_theta), np.pi)


def test_relation_invariance_under_common_transform():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        lxz = rng.uniform(-3, 3, 2)
        fxz = rng.uniform(-3, 3, 2)
        ly, fy = rng.uniform(-np.pi, np.pi, 2)
        base = relation_from_poses(lxz, ly, fxz, fy)
        tf = RigidTransform2D(*rng.uniform(-10, 10, 2), rng.uniform(-np.pi, np.pi))
        lxz2 = tf.apply_points(np.array([lxz[0], 0, lxz[1]]))[[0, 2]]
        fxz2 = tf.apply_points(np.array([fxz[0], 0, fxz[1]]))[[0, 2]]
        moved = relation_from_poses(lxz2, float(tf.apply_yaw(ly)), fxz2, float(tf.apply_yaw(fy)))
        assert abs(moved.r_x - base.r_x) < 1e-9
        assert abs(moved.r_z - base.r_z) < 1e-9
        assert abs(wrap_angle(moved.r_theta - base.r_theta)) < 1e-9


def test_relation_world_pose_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(100):
        lxz = rng.uniform(-3, 3, 2)
        ly = rng.uniform(-np.pi, np.pi)
        fxz = rng.uniform(-3, 3, 2)
        fy = rng.uniform(-np.pi, np.pi)
        rel = relation_from_poses(lxz, ly, fxz, fy)
        back_xz, back_yaw = relation_world_pose(lxz, ly, rel)
        assert np.abs(back_xz - fxz).max() < 1e-9
        assert abs(wrap_angle(back_yaw - fy)) < 1e-9


def _toy_duet(t=40, fps=20.0):
    duet, _ = generate_synthetic_duet(
        SyntheticDuetSpec(duration=t / fps, fps=fps), np.random.default_rng(0)
    )
    return duet


def test_windowize_counts():
    duet = _toy_duet(40)
    assert len(windowize(duet, 20)) == 2
    duet39 = DuetSequence(
        duet.fps, duet.leader.slice(0, 39), duet.follower.slice(0, 39),
        duet.relation[:39],
    )
    assert len(windowize(duet39, 20)) == 1  # trailing 19 frames dropped
    short = DuetSequence(
        duet.fps, duet.leader.slice(0, 10), duet.follower.slice(0, 10), duet.relation[:10]
    )
    assert windowize(short, 20) == []


def test_window_is_one_second_at_20fps():
    duet = _toy_duet(40)
    (lw, _, _), *_ = windowize(duet, 20)
    assert len(lw) == 20 and duet.fps == 20.0
    assert len(lw) / duet.fps == 1.0


def test_relation_window_not_canonicalized():
    duet = _toy_duet(40)
    wins = windowize(duet, 20)
    assert np.array_equal(wins[1][2], duet.relation[20:40])


def test_canonicalize_window_already_canonical_is_identity(skeleton):
    pos = _static_pose(skeleton)
    seq = compute_features(pos, skeleton, 20.0)
    win = canonicalize_window(seq)
    tf = win.to_world
    assert abs(tf.t_x) < 1e-12 and abs(tf.t_z) < 1e-12 and abs(tf.yaw) < 1e-12


def test_canonicalize_known_pose_and_inverse(skeleton):
    pos = _static_pose(skeleton)
    base = compute_features(pos, skeleton, 20.0)
    moved = base.transformed(RigidTransform2D(3.0, 4.0, np.pi / 2))
    win = canonicalize_window(moved)
    assert np.abs(win.frames.positions[0, 0, [0, 2]]).max() < 1e-6
    assert abs(win.frames.root_yaws()[0]) < 1e-6
    assert np.isclose(win.to_world.t_x, 3.0) and np.isclose(win.to_world.t_z, 4.0)
    assert np.isclose(win.to_world.yaw, np.pi / 2)
    back = invert_canonicalization(win)
    assert np.abs(back.positions - moved.positions).max() < 1e-6


def test_canonicalize_round_trip_random_windows():
    duet = _toy_duet(200)
    for lw, fw, _ in windowize(duet, 20):
        for win, src in ((lw, duet.leader), (fw, duet.follower)):
            back = invert_canonicalization(win)
            orig = src.slice(win.start, win.start + 20)
            assert np.abs(back.positions - orig.positions).max() < 1e-6
            assert np.abs(back.velocities - orig.velocities).max() < 1e-6


def test_velocity_consistency_invariant():
    duet = _toy_duet(100)
    for seq in (duet.leader, duet.follower):
        fd = np.diff(seq.positions, axis=0) * seq.fps
        assert np.abs(seq.velocities[1:] - fd).max() < 1e-9


def test_duet_relation_invariant_and_validate():
    duet = _toy_duet(60)
    duet.validate()
    recomputed = relation_track(duet.leader, duet.follower)
    err = np.abs(recomputed - duet.relation)
    err[:, 2] = np.abs(wrap_angle(err[:, 2]))
    assert err.max() < 1e-6


def test_features_round_trip(skeleton):
    duet = _toy_duet(40)
    feats = duet.leader.features()
    back = sequence_from_features(feats, skeleton.joint_count, duet.fps)
    assert np.abs(back.positions - duet.leader.positions).max() < 1e-12
    assert np.abs(back.rotations - duet.leader.rotations).max() < 1e-12
