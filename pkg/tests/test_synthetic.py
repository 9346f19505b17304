import numpy as np
import pytest

from duetgen.geometry import wrap_angle
from duetgen.synthetic import (
    RelationPreset,
    SyntheticDuetSpec,
    generate_corpus,
    generate_synthetic_duet,
)


def test_transition_matrix_validated():
    spec = SyntheticDuetSpec(move_transitions=np.full((4, 4), 0.3))
    with pytest.raises(ValueError):
        spec.validate()
    SyntheticDuetSpec().validate()


def test_zero_lag_zero_noise_relation_constant_at_preset():
    preset = RelationPreset("hold", 0.3, 0.9, 2.5)
    spec = SyntheticDuetSpec(
        duration=8.0, lag_frames=0, noise_amplitude=0.0, relation_presets=(preset,),
    )
    duet, _ = generate_synthetic_duet(spec, np.random.default_rng(0))
    rel = duet.relation
    assert np.abs(rel[:, 0] - preset.r_x).max() < 1e-9
    assert np.abs(rel[:, 1] - preset.r_z).max() < 1e-9
    assert np.abs(wrap_angle(rel[:, 2] - preset.r_theta)).max() < 1e-9


def test_same_seed_identical_output():
    spec = SyntheticDuetSpec(duration=6.0)
    a, beat_a = generate_synthetic_duet(spec, np.random.default_rng(5))
    b, beat_b = generate_synthetic_duet(spec, np.random.default_rng(5))
    assert np.array_equal(a.leader.positions, b.leader.positions)
    assert np.array_equal(a.follower.positions, b.follower.positions)
    assert np.array_equal(beat_a.onsets, beat_b.onsets)


def test_corpus_seed_determinism_and_ids():
    spec = SyntheticDuetSpec(duration=4.0)
    c1 = generate_corpus(spec, 3, seed=9)
    c2 = generate_corpus(spec, 3, seed=9)
    assert [d.seq_id for d, _ in c1] == ["seq000", "seq001", "seq002"]
    for (d1, _), (d2, _) in zip(c1, c2):
        assert np.array_equal(d1.follower.positions, d2.follower.positions)
    c3 = generate_corpus(spec, 3, seed=10)
    assert not np.array_equal(c1[0][0].leader.positions, c3[0][0].leader.positions)


def test_basic_step_reverses_direction_every_bar():
    # force the grammar to emit only basic steps
    tm = np.zeros((4, 4))
    tm[:, 0] = 1.0
    spec = SyntheticDuetSpec(
        duration=20.0, move_transitions=tm, noise_amplitude=0.0, syncopation=(0.0,),
        bpm_jitter=0.0, bpm=120.0,
    )
    duet, beat = generate_synthetic_duet(spec, np.random.default_rng(3))
    period = 60.0 / beat.bpm
    bar = 4.0 * period
    fps = duet.fps
    signs = []
    for b in range(int(20.0 / bar) - 1):
        lo = int(round((b * bar) * fps))
        hi = int(round(((b + 1) * bar) * fps))
        dz = duet.leader.positions[hi, 0] - duet.leader.positions[lo, 0]
        # displacement along the (constant) facing direction
        signs.append(np.sign(dz[2]))
    assert all(s != 0 for s in signs)
    assert all(signs[i] != signs[i + 1] for i in range(len(signs) - 1))


def test_styles_and_presets_sampled_from_spec():
    spec = SyntheticDuetSpec(duration=4.0)
    styles = set()
    for duet, _ in generate_corpus(spec, 12, seed=0):
        styles.add(duet.style)
        duet.validate()
    assert styles <= set(spec.styles)
    assert len(styles) > 1


def test_passive_foot_contacts_present():
    duet, _ = generate_synthetic_duet(SyntheticDuetSpec(duration=6.0), np.random.default_rng(1))
    rate = duet.leader.contacts.mean()
    assert 0.2 < rate < 0.9  # feet plant between steps
