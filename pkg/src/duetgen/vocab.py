"""Extended multimodal vocabulary: text words, motion/relation/audio token ids,
and special markers, in disjoint contiguous id ranges.

Id layout:  [specials][text words][motion 0..K_m)[relation 0..K_r)[audio 0..K_a).
The text side is a closed word vocabulary built from the describer's phrase
inventory plus the task instruction templates (no external tokenizer).
The manifest JSON is the bit-exact contract checkpoints are validated against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .describer import phrase_inventory

PAD, UNK, EOS, SYS = "<pad>", "<unk>", "<eos>", "<sys>"
AUDIO_OPEN, AUDIO_CLOSE = "<audio>", "</audio>"
LEADER_OPEN, LEADER_CLOSE = "<leader>", "</leader>"
RELATION_OPEN, RELATION_CLOSE = "<relation>", "</relation>"
FOLLOWER_OPEN, FOLLOWER_CLOSE = "<follower>", "</follower>"

SPECIALS = (
    PAD, UNK, EOS, SYS,
    AUDIO_OPEN, AUDIO_CLOSE,
    LEADER_OPEN, LEADER_CLOSE,
    RELATION_OPEN, RELATION_CLOSE,
    FOLLOWER_OPEN, FOLLOWER_CLOSE,
)

# SYS instruction templates, versioned through the manifest
TEMPLATES = {
    "lead2follow": "generate the follower motion for this leader and music .",
    "gen_leader": "generate a leader motion .",
    "gen_follower": "generate a follower motion .",
    "complete_leader": "continue the leader motion .",
    "complete_follower": "continue the follower motion .",
    "cross_l2f": "predict the follower motion from the leader motion .",
    "cross_f2l": "predict the leader motion from the follower motion .",
    "caption2motion": "generate a motion matching the description .",
    "motion2caption": "describe the motion .",
}


def _words_from_text(text: str) -> list[str]:
    for p in ",.":
        text = text.replace(p, f" {p} ")
    return [w for w in text.lower().split() if w]


@dataclass
class Vocabulary:
    words: tuple[str, ...]
    k_motion: int = 512
    k_relation: int = 512
    k_audio: int = 512
    templates: dict = field(default_factory=lambda: dict(TEMPLATES))

    def __post_init__(self):
        self._word_to_id = {
            w: len(SPECIALS) + i for i, w in enumerate(self.words)
        }

    # --- range boundaries -------------------------------------------------
    @property
    def text_start(self) -> int:
        return len(SPECIALS)

    @property
    def motion_start(self) -> int:
        return self.text_start + len(self.words)

    @property
    def relation_start(self) -> int:
        return self.motion_start + self.k_motion

    @property
    def audio_start(self) -> int:
        return self.relation_start + self.k_relation

    @property
    def size(self) -> int:
        return self.audio_start + self.k_audio

    # --- id constructors ----------------------------------------------------
    def special(self, s: str) -> int:
        return SPECIALS.index(s)

    def motion_id(self, k: int) -> int:
        if not (0 <= k < self.k_motion):
            raise ValueError(f"motion codebook index {k} out of range")
        return self.motion_start + k

    def relation_id(self, k: int) -> int:
        if not (0 <= k < self.k_relation):
            raise ValueError(f"relation codebook index {k} out of range")
        return self.relation_start + k

    def audio_id(self, k: int) -> int:
        if not (0 <= k < self.k_audio):
            raise ValueError(f"audio code {k} out of range")
        return self.audio_start + k

    # --- id decoding ------------------------------------------------------
    def class_of(self, token_id: int) -> str:
        if 0 <= token_id < self.text_start:
            return "special"
        if token_id < self.motion_start:
            return "text"
        if token_id < self.relation_start:
            return "motion"
        if token_id < self.audio_start:
            return "relation"
        if token_id < self.size:
            return "audio"
        raise ValueError(f"token id {token_id} out of vocabulary")

    def codebook_index(self, token_id: int) -> int:
        cls = self.class_of(token_id)
        start = {"motion": self.motion_start, "relation": self.relation_start,
                 "audio": self.audio_start}.get(cls)
        if start is None:
            raise ValueError(f"token id {token_id} is not a codebook token")
        return token_id - start

    def token_string(self, token_id: int) -> str:
        cls = self.class_of(token_id)
        if cls == "special":
            return SPECIALS[token_id]
        if cls == "text":
            return self.words[token_id - self.text_start]
        tag = {"motion": "M", "relation": "R", "audio": "A"}[cls]
        return f"<{tag}_{self.codebook_index(token_id)}>"

    # --- text ------------------------------------------------------------
    def encode_text(self, text: str, strict: bool = False) -> list[int]:
        ids = []
        for w in _words_from_text(text):
            if w in self._word_to_id:
                ids.append(self._word_to_id[w])
            elif strict:
                raise ValueError(f"word {w!r} not in the closed vocabulary")
            else:
                ids.append(self.special(UNK))
        return ids

    def decode_text(self, ids) -> str:
        return " ".join(self.token_string(int(i)) for i in ids)

    # --- manifest ----------------------------------------------------------
    def manifest(self) -> dict:
        return {
            "specials": list(SPECIALS),
            "words": list(self.words),
            "k_motion": self.k_motion,
            "k_relation": self.k_relation,
            "k_audio": self.k_audio,
            "ranges": {
                "special": [0, self.text_start],
                "text": [self.text_start, self.motion_start],
                "motion": [self.motion_start, self.relation_start],
                "relation": [self.relation_start, self.audio_start],
                "audio": [self.audio_start, self.size],
            },
            "templates": self.templates,
            "version": 1,
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), sort_keys=True, indent=1)

    @classmethod
    def from_manifest(cls, manifest: dict) -> "Vocabulary":
        if tuple(manifest["specials"]) != SPECIALS:
            raise ValueError("special-token set differs from this build")
        return cls(
            tuple(manifest["words"]),
            manifest["k_motion"],
            manifest["k_relation"],
            manifest["k_audio"],
            dict(manifest["templates"]),
        )


def build_default_vocabulary(
    k_motion: int = 512, k_relation: int = 512, k_audio: int = 512
) -> Vocabulary:
    """Closed word list from describer phrases + instruction templates."""
    words: set[str] = set()
    for phrase in phrase_inventory():
        words.update(_words_from_text(phrase))
    for template in TEMPLATES.values():
        words.update(_words_from_text(template))
    words.update(("then", ",", "."))  # caption joiners
    return Vocabulary(tuple(sorted(words)), k_motion, k_relation, k_audio)
