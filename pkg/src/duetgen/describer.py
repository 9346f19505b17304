"""Rule-based skeleton-dynamics captioner.

Maps a canonical motion window to short movement phrases from a closed
inventory (the text side of the token vocabulary is built from these).
Rules fire independently and phrases are emitted in rule-id order; a window
that triggers nothing is captioned "holds position".

Canonical-window conventions (first frame at origin facing +Z):
forward = +Z, left = +X, up = +Y. Positive yaw change = counterclockwise
seen from above.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import wrap_angle
from .motion import MotionSequence, MotionWindow, Skeleton

DISPLACEMENT_THRESHOLD = 0.2  # meters
TURN_THRESHOLD = np.deg2rad(30.0)
FAST_SPEED = 1.5  # m/s mean root speed
SLOW_SPEED = 0.3
LIFT_THRESHOLD = 0.12
HEIGHT_CHANGE = 0.15


@dataclass(frozen=True)
class CaptionRule:
    rule_id: int
    phrase: str
    predicate: Callable[[MotionSequence, Skeleton], bool]


@dataclass(frozen=True)
class Caption:
    phrases: tuple[str, ...]
    window_index: int = 0

    @property
    def text(self) -> str:
        return ", ".join(self.phrases)


def _root_xz_disp(seq: MotionSequence) -> np.ndarray:
    return seq.positions[-1, 0, [0, 2]] - seq.positions[0, 0, [0, 2]]


def _yaw_change(seq: MotionSequence) -> float:
    yaws = seq.root_yaws()
    return float(np.sum(wrap_angle(np.diff(yaws))))


def _mean_root_speed(seq: MotionSequence) -> float:
    v = seq.velocities[:, 0, [0, 2]]
    return float(np.mean(np.linalg.norm(v, axis=-1)))


def _rise(seq: MotionSequence, joint: int, ref_joint: int) -> float:
    """End height of `joint` above `ref_joint`, provided it rose over the window."""
    dy = seq.positions[-1, joint, 1] - seq.positions[0, joint, 1]
    above = seq.positions[-1, joint, 1] - seq.positions[-1, ref_joint, 1]
    return min(dy, above)


def default_rules() -> tuple[CaptionRule, ...]:
    """The fixed 25-rule inventory."""

    def r(rule_id, phrase, fn):
        return CaptionRule(rule_id, phrase, fn)

    rules = [
        r(0, "raises the left hand above the shoulder",
          lambda s, sk: _rise(s, sk.left_wrist, sk.left_shoulder) > 0.0
          and s.positions[-1, sk.left_wrist, 1] - s.positions[0, sk.left_wrist, 1] > DISPLACEMENT_THRESHOLD),
        r(1, "raises the right hand above the shoulder",
          lambda s, sk: _rise(s, sk.right_wrist, sk.right_shoulder) > 0.0
          and s.positions[-1, sk.right_wrist, 1] - s.positions[0, sk.right_wrist, 1] > DISPLACEMENT_THRESHOLD),
        r(2, "lowers the left hand",
          lambda s, sk: s.positions[0, sk.left_wrist, 1] - s.positions[-1, sk.left_wrist, 1] > DISPLACEMENT_THRESHOLD),
        r(3, "lowers the right hand",
          lambda s, sk: s.positions[0, sk.right_wrist, 1] - s.positions[-1, sk.right_wrist, 1] > DISPLACEMENT_THRESHOLD),
        r(4, "steps forward", lambda s, sk: _root_xz_disp(s)[1] > DISPLACEMENT_THRESHOLD),
        r(5, "steps backward", lambda s, sk: _root_xz_disp(s)[1] < -DISPLACEMENT_THRESHOLD),
        r(6, "steps to the left", lambda s, sk: _root_xz_disp(s)[0] > DISPLACEMENT_THRESHOLD),
        r(7, "steps to the right", lambda s, sk: _root_xz_disp(s)[0] < -DISPLACEMENT_THRESHOLD),
        r(8, "turns counterclockwise", lambda s, sk: _yaw_change(s) > TURN_THRESHOLD),
        r(9, "turns clockwise", lambda s, sk: _yaw_change(s) < -TURN_THRESHOLD),
        r(10, "moves quickly", lambda s, sk: _mean_root_speed(s) > FAST_SPEED),
        r(11, "moves slowly",
          lambda s, sk: 0.02 < _mean_root_speed(s) < SLOW_SPEED),
        r(12, "lifts the left foot",
          lambda s, sk: float(np.max(s.positions[:, sk.left_toe, 1]) - s.positions[0, sk.left_toe, 1]) > LIFT_THRESHOLD),
        r(13, "lifts the right foot",
          lambda s, sk: float(np.max(s.positions[:, sk.right_toe, 1]) - s.positions[0, sk.right_toe, 1]) > LIFT_THRESHOLD),
        r(14, "reaches the left hand forward",
          lambda s, sk: float(s.positions[-1, sk.left_wrist, 2] - s.positions[-1, 0, 2]) > 0.35),
        r(15, "reaches the right hand forward",
          lambda s, sk: float(s.positions[-1, sk.right_wrist, 2] - s.positions[-1, 0, 2]) > 0.35),
        r(16, "brings the hands together",
          lambda s, sk: float(np.linalg.norm(s.positions[0, sk.left_wrist] - s.positions[0, sk.right_wrist])) > 0.45
          and float(np.linalg.norm(s.positions[-1, sk.left_wrist] - s.positions[-1, sk.right_wrist])) < 0.25),
        r(17, "spreads the hands apart",
          lambda s, sk: float(np.linalg.norm(s.positions[0, sk.left_wrist] - s.positions[0, sk.right_wrist])) < 0.25
          and float(np.linalg.norm(s.positions[-1, sk.left_wrist] - s.positions[-1, sk.right_wrist])) > 0.45),
        r(18, "crouches down",
          lambda s, sk: s.positions[0, 0, 1] - s.positions[-1, 0, 1] > HEIGHT_CHANGE),
        r(19, "rises up",
          lambda s, sk: s.positions[-1, 0, 1] - s.positions[0, 0, 1] > HEIGHT_CHANGE),
        r(20, "extends the left arm to the side",
          lambda s, sk: float(s.positions[-1, sk.left_wrist, 0] - s.positions[-1, 0, 0]) > 0.55),
        r(21, "extends the right arm to the side",
          lambda s, sk: float(s.positions[-1, 0, 0] - s.positions[-1, sk.right_wrist, 0]) > 0.55),
        r(22, "leans forward",
          lambda s, sk: float(s.positions[-1, sk.head, 2] - s.positions[-1, 0, 2]) > 0.2),
        r(23, "leans back",
          lambda s, sk: float(s.positions[-1, 0, 2] - s.positions[-1, sk.head, 2]) > 0.2),
        r(24, "bobs with the beat",
          lambda s, sk: _bob_count(s, sk) >= 2),
    ]
    return tuple(rules)


def _bob_count(seq: MotionSequence, sk: Skeleton) -> int:
    """Number of distinct dips of the wrist/head group (beat-pulse detector)."""
    y = seq.positions[:, [sk.left_wrist, sk.right_wrist, sk.head], 1].mean(axis=1)
    if np.ptp(y) < 0.05:
        return 0
    dy = np.diff(y)
    signs = np.sign(dy[np.abs(dy) > 1e-6])
    if signs.size < 2:
        return 0
    return int(np.sum((signs[:-1] < 0) & (signs[1:] > 0)))


HOLD_PHRASE = "holds position"


def describe_window(
    window: MotionWindow, skeleton: Skeleton, rules: tuple[CaptionRule, ...] | None = None
) -> Caption:
    """Evaluate every rule on a canonical window; no hits -> "holds position"."""
    rules = default_rules() if rules is None else rules
    phrases = [
        rule.phrase
        for rule in sorted(rules, key=lambda r: r.rule_id)
        if rule.predicate(window.frames, skeleton)
    ]
    if not phrases:
        phrases = [HOLD_PHRASE]
    return Caption(tuple(phrases), window.start)


def phrase_inventory() -> tuple[str, ...]:
    """All phrases the describer can emit (vocabulary contract)."""
    return tuple(r.phrase for r in default_rules()) + (HOLD_PHRASE,)
