"""Deterministic beat-feature audio tokenizer.

Stands in for a learned waveform codec: a beat track (tempo, onsets, accents)
is quantized into one token per motion frame so audio and motion spans stay
aligned. Token semantics: code 0 is reserved for silence; codes 1..32 encode
(phase bucket in 0..7) x (accent level in 0..3) as
1 + phase_bucket * 4 + accent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

PHASE_BUCKETS = 8
ACCENT_LEVELS = 4
SILENCE_CODE = 0
ACTIVE_CODES = PHASE_BUCKETS * ACCENT_LEVELS  # ids 1..32
DEFAULT_HOP = 1.0 / 20.0
DEFAULT_ACCENTS = (2, 0, 1, 0)


@dataclass(frozen=True)
class BeatTrack:
    bpm: float
    onsets: np.ndarray  # seconds, strictly increasing, within [0, duration)
    accents: np.ndarray  # int 0..3 per onset
    duration: float

    def validate(self) -> None:
        if self.bpm <= 0:
            raise ValueError("bpm must be positive")
        o = np.asarray(self.onsets)
        if o.size and (np.any(np.diff(o) <= 0) or o[-1] >= self.duration or o[0] < 0):
            raise ValueError("onsets must be strictly increasing within duration")
        if len(self.accents) != len(self.onsets):
            raise ValueError("accents/onsets length mismatch")


@dataclass(frozen=True)
class AudioTokenStream:
    tokens: np.ndarray  # int, in [0, k_audio)
    hop: float  # seconds per token


def synthesize_beat_track(
    bpm: float, duration: float, accent_pattern: tuple[int, ...] = DEFAULT_ACCENTS
) -> BeatTrack:
    """Regular onsets at k * 60/bpm with the accent pattern cycled."""
    if bpm <= 0:
        raise ValueError("bpm must be positive")
    period = 60.0 / bpm
    count = max(0, math.ceil(duration / period - 1e-9))
    onsets = np.arange(count) * period
    onsets = onsets[onsets < duration]
    accents = np.array(
        [accent_pattern[i % len(accent_pattern)] for i in range(len(onsets))], dtype=np.int64
    )
    return BeatTrack(bpm, onsets, accents, duration)


def tokenize_audio(
    track: BeatTrack, hop: float = DEFAULT_HOP, k_audio: int = 512
) -> AudioTokenStream:
    """One token per hop: phase within the current beat x that beat's accent.

    Stream length is ceil(duration / hop). With no onsets every token is the
    reserved silence code. After the last onset the nominal period 60/bpm
    keeps the phase running.
    """
    if k_audio < 8:
        raise ValueError("k_audio must be at least 8")
    n = math.ceil(track.duration / hop - 1e-9)
    onsets = np.asarray(track.onsets, dtype=np.float64)
    if onsets.size == 0:
        return AudioTokenStream(np.full(n, SILENCE_CODE, dtype=np.int64), hop)

    period = 60.0 / track.bpm
    tokens = np.empty(n, dtype=np.int64)
    for i in range(n):
        t = i * hop
        k = int(np.searchsorted(onsets, t + 1e-9) - 1)
        if k < 0:
            tokens[i] = SILENCE_CODE
            continue
        start = onsets[k]
        end = onsets[k + 1] if k + 1 < len(onsets) else start + period
        span = max(end - start, 1e-9)
        phase = min((t - start) / span, 1.0 - 1e-9)
        bucket = int(phase * PHASE_BUCKETS)
        accent = int(track.accents[k]) % ACCENT_LEVELS
        tokens[i] = 1 + bucket * ACCENT_LEVELS + accent
    return AudioTokenStream(tokens, hop)


def beat_track_to_json(track: BeatTrack) -> str:
    return json.dumps(
        {
            "bpm": track.bpm,
            "onsets": [float(x) for x in track.onsets],
            "accents": [int(x) for x in track.accents],
            "duration": track.duration,
        },
        sort_keys=True,
    )


def beat_track_from_json(text: str) -> BeatTrack:
    d = json.loads(text)
    return BeatTrack(
        float(d["bpm"]),
        np.asarray(d["onsets"], dtype=np.float64),
        np.asarray(d["accents"], dtype=np.int64),
        float(d["duration"]),
    )
