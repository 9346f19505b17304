import numpy as np
import pytest

from conftest import make_sequence
from duetgen.geometry import RigidTransform2D
from duetgen.metrics import (
    MetricReport,
    bas,
    bed,
    crossdist_features,
    diversity,
    fid,
    graphical_features,
    kinematic_features,
    motion_beats,
)
from duetgen.motion import DuetSequence, relation_track
from duetgen.synthetic import SyntheticDuetSpec, generate_synthetic_duet


def _duet(duration=5.0, seed=0):
    return generate_synthetic_duet(
        SyntheticDuetSpec(duration=duration), np.random.default_rng(seed)
    )[0]


# --- kinematic ----------------------------------------------------------------


def test_kinematic_static_is_zero(skeleton):
    pos = np.tile(np.random.default_rng(0).standard_normal((1, 22, 3)), (10, 1, 1))
    seq = make_sequence(pos)
    f = kinematic_features(seq)
    assert f.shape == (66,)
    assert np.all(f == 0.0)


def test_kinematic_scaling_law():
    duet = _duet()
    seq = duet.follower
    f1 = kinematic_features(seq)
    doubled = make_sequence(seq.positions)  # placeholder container
    doubled.velocities = seq.velocities * 2.0
    doubled.fps = seq.fps
    f2 = kinematic_features(doubled)
    n = seq.n_joints
    assert np.allclose(f2[:n], 2.0 * f1[:n])        # speeds x2
    assert np.allclose(f2[n : 2 * n], 4.0 * f1[n : 2 * n])  # energy x4
    assert np.allclose(f2[2 * n :], 2.0 * f1[2 * n :])      # accel x2


def test_kinematic_dimension_is_3nj():
    duet = _duet()
    assert kinematic_features(duet.leader).shape == (3 * 22,)


# --- graphical ---------------------------------------------------------------


def _tpose_sequence(skeleton, frames=10):
    pose = np.zeros((22, 3))
    pose[0] = [0, 0.95, 0]
    for j, p in enumerate(skeleton.parents):
        if p >= 0:
            pose[j] = pose[p] + skeleton.rest_offsets[j]
    return make_sequence(np.tile(pose, (frames, 1, 1)))


def test_graphical_tpose_wrist_not_above_head(skeleton):
    f = graphical_features(_tpose_sequence(skeleton), skeleton)
    assert f.shape == (16,)
    assert f[0] == 0.0 and f[1] == 0.0  # wrists at shoulder height, below head


def test_graphical_raised_wrist_is_one(skeleton):
    seq = _tpose_sequence(skeleton)
    seq.positions[:, skeleton.left_wrist, 1] = seq.positions[:, skeleton.head, 1] + 0.5
    f = graphical_features(seq, skeleton)
    assert f[0] == 1.0


def test_graphical_invariant_under_world_transform(skeleton):
    duet = _duet()
    rng = np.random.default_rng(1)
    base = graphical_features(duet.follower, skeleton)
    for _ in range(20):
        tf = RigidTransform2D(*rng.uniform(-10, 10, 2), rng.uniform(-np.pi, np.pi))
        moved = duet.follower.transformed(tf)
        assert np.abs(graphical_features(moved, skeleton) - base).max() < 1e-9


# --- cross-distance -------------------------------------------------------------


def test_crossdist_coincident_dancers_zero_means(skeleton):
    seq = _tpose_sequence(skeleton)
    duet = DuetSequence(20.0, seq, seq, np.zeros((len(seq), 3)))
    f = crossdist_features(duet, skeleton)
    assert f.shape == (18,)
    assert np.allclose(f[0], 0.0)  # root-root mean
    assert np.allclose(f[9:], 0.0)  # all stds


def test_crossdist_constant_offset(skeleton):
    a = _tpose_sequence(skeleton)
    b = _tpose_sequence(skeleton)
    b.positions = b.positions + np.array([0.0, 0.0, 1.0])
    duet = DuetSequence(20.0, a, b, relation_track(a, b))
    f = crossdist_features(duet, skeleton)
    assert np.isclose(f[0], 1.0)  # root-root mean distance 1 m
    assert np.isclose(f[9], 0.0)  # static: zero std


def test_crossdist_invariant_under_common_transform(skeleton):
    duet = _duet()
    base = crossdist_features(duet, skeleton)
    rng = np.random.default_rng(2)
    for _ in range(20):
        tf = RigidTransform2D(*rng.uniform(-5, 5, 2), rng.uniform(-np.pi, np.pi))
        moved = DuetSequence(
            duet.fps, duet.leader.transformed(tf), duet.follower.transformed(tf),
            duet.relation,
        )
        assert np.abs(crossdist_features(moved, skeleton) - base).max() < 1e-9


# --- FID ------------------------------------------------------------------------


def test_fid_identical_sets_is_zero():
    x = np.random.default_rng(3).standard_normal((200, 8))
    assert fid(x, x) < 1e-8


def test_fid_1d_gaussian_closed_form():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((500, 1))
    b = rng.standard_normal((500, 1))
    a = (a - a.mean()) / a.std(ddof=1)          # exactly N(0, 1) sample stats
    b = (b - b.mean()) / b.std(ddof=1) + 1.0    # exactly mean 1, var 1
    assert abs(fid(a, b) - 1.0) < 1e-6


def test_fid_mean_shift_closed_form():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((400, 4))
    m = np.array([0.5, -1.0, 2.0, 0.0])
    assert abs(fid(x, x + m) - np.sum(m**2)) < 1e-8


def test_fid_symmetric_and_monotone_in_shift():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((300, 3))
    vals = []
    for d in (0.0, 0.5, 1.0, 2.0, 4.0):
        shifted = x + d
        assert abs(fid(x, shifted) - fid(shifted, x)) < 1e-9
        vals.append(fid(x, shifted))
    assert all(vals[i] < vals[i + 1] for i in range(len(vals) - 1))


def test_fid_rejects_nonfinite():
    x = np.zeros((10, 2))
    y = x.copy()
    y[0, 0] = np.inf
    with pytest.raises(ValueError):
        fid(x, y)


def test_fid_small_sample_shrinkage_still_finite():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((10, 30))  # n <= dim triggers shrinkage
    b = rng.standard_normal((10, 30))
    v = fid(a, b)
    assert np.isfinite(v) and v >= 0.0


# --- diversity --------------------------------------------------------------------


def test_diversity_identical_set_zero():
    x = np.ones((10, 4))
    assert diversity(x, pairs=16, seed=0) == 0.0


def test_diversity_two_samples_equals_distance():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert np.isclose(diversity(x, pairs=8, seed=1), 5.0)


def test_diversity_seed_reproducible():
    x = np.random.default_rng(8).standard_normal((50, 6))
    assert diversity(x, 32, seed=3) == diversity(x, 32, seed=3)
    assert diversity(x, 32, seed=3) != diversity(x, 32, seed=4)


def test_diversity_needs_two_samples():
    with pytest.raises(ValueError):
        diversity(np.ones((1, 3)), 4)


# --- beats ------------------------------------------------------------------------


def _speed_controlled_sequence(speeds, fps=20.0):
    """Root moves along +x with the given per-frame speeds; mean joint speed
    equals |speed| since every joint translates with the root."""
    t = len(speeds) + 1
    x = np.concatenate([[0.0], np.cumsum(np.asarray(speeds) / fps)])
    pos = np.zeros((t, 22, 3))
    pos[:, :, 0] = x[:, None]
    return make_sequence(pos, fps)


def test_constant_speed_no_beats():
    seq = _speed_controlled_sequence([1.0] * 40)
    assert motion_beats(seq).size == 0


def test_beats_every_half_second():
    speeds = []
    for i in range(80):
        speeds.append(0.1 + 0.9 * (1 - np.cos(2 * np.pi * (i % 10) / 10)) / 2)
    seq = _speed_controlled_sequence(speeds)
    beats = motion_beats(seq)
    gaps = np.diff(beats)
    assert np.allclose(gaps, 0.5, atol=0.051)


def test_uniform_speed_offset_leaves_beats():
    # period 16 puts minima on integer frames (no sampling plateaus)
    speeds = [0.5 + 0.4 * np.sin(2 * np.pi * i / 16) for i in range(80)]
    a = motion_beats(_speed_controlled_sequence(speeds))
    b = motion_beats(_speed_controlled_sequence([s + 2.0 for s in speeds]))
    assert a.size > 2
    assert np.array_equal(a, b)


def test_plateau_minima_do_not_count():
    # strict local minima: an exact two-frame plateau yields no beat.
    # fps=1 and half-integer increments keep every speed bit-exact.
    speeds = np.array([1.0] * 10 + [0.5, 0.5] + [1.0] * 10)
    x = np.concatenate([[0.0], np.cumsum(speeds)])
    pos = np.zeros((len(x), 22, 3))
    pos[:, :, 0] = x[:, None]
    seq = make_sequence(pos, fps=1.0)
    sp = np.linalg.norm(seq.velocities, axis=-1).mean(axis=1)
    assert sp[11] == sp[12] == 0.5
    assert motion_beats(seq, smooth_window=1).size == 0


def test_bas_perfect_alignment_is_one():
    beats = np.array([0.5, 1.0, 1.5, 2.0])
    assert bas(beats, beats, fps=20.0) == 1.0


def test_bas_no_motion_beats_is_zero():
    assert bas(np.array([]), np.array([0.5, 1.0]), fps=20.0) == 0.0


def test_bas_sigma_offset_single_beat():
    sigma_s = 3.0 / 20.0
    music = np.array([1.0])
    motion = np.array([1.0 + sigma_s])
    assert abs(bas(motion, music, fps=20.0) - np.exp(-0.5)) < 1e-6


def test_bed_identical_and_empty():
    leader = np.array([0.2, 0.7, 1.2])
    assert bed(leader, leader.copy(), 20.0) == 1.0
    assert bed(leader, np.array([]), 20.0) == 0.0


def test_bed_symmetric_offset_hand_value():
    leader = np.array([1.0, 2.0])
    follower = np.array([1.15, 2.15])  # offset sigma = 0.15 s at 20 fps
    expected = np.exp(-0.5)
    assert abs(bed(leader, follower, 20.0) - expected) < 1e-9


def test_bed_requires_reference_beats():
    with pytest.raises(ValueError):
        bed(np.array([]), np.array([1.0]), 20.0)


# --- report -------------------------------------------------------------------------


def test_metric_report_json_round_trip():
    rep = MetricReport(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, 0.25, 64, "abc")
    back = MetricReport.from_json(rep.to_json())
    assert back == rep


def test_metric_report_validates_ranges():
    rep = MetricReport(-1.0, 0, 0, 0, 0, 0, 0.5, 0.5, 1)
    with pytest.raises(ValueError):
        rep.validate()
    rep = MetricReport(0, 0, 0, 0, 0, 0, 1.5, 0.5, 1)
    with pytest.raises(ValueError):
        rep.validate()
