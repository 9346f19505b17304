"""Prompt assembly and parsing over the multimodal vocabulary.

Leader-to-follower layout (markers in fixed order, optional spans dropped by
ablation):

  <sys> ...instruction words... [caption words]
  <audio> A* </audio> <leader> M* </leader> <relation> R* </relation>
  <follower> M* </follower>

The loss mask is 1 exactly on the supervised target span plus its closing
marker; in an inference prompt the follower span is open (no closer) and the
mask is all zeros. Stage-I builds the alignment task mix; Stage-II builds
leader-to-follower only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import (
    AUDIO_CLOSE,
    AUDIO_OPEN,
    EOS,
    FOLLOWER_CLOSE,
    FOLLOWER_OPEN,
    LEADER_CLOSE,
    LEADER_OPEN,
    RELATION_CLOSE,
    RELATION_OPEN,
    SYS,
    Vocabulary,
)

MAX_CAPTION_WORDS = 60


@dataclass
class PromptSequence:
    ids: np.ndarray  # (L,) int64
    mask: np.ndarray  # (L,) int64, 1 = supervised target position
    task: str

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class ParsedPrompt:
    sys_text: list[int]
    caption: list[int]
    audio: list[int]  # codebook indices
    leader: list[int]
    relation: list[int]
    follower: list[int] | None  # None when the prompt has no follower span
    follower_open: bool = False  # inference prompt: opener without closer


class PromptError(ValueError):
    pass


def _span(vocab: Vocabulary, open_s: str, close_s: str, ids: list[int]) -> list[int]:
    return [vocab.special(open_s), *ids, vocab.special(close_s)]


def assemble_prompt(
    vocab: Vocabulary,
    task: str,
    audio_tokens=None,
    leader_tokens=None,
    relation_tokens=None,
    follower_tokens=None,
    caption: str | None = None,
    inference: bool = False,
) -> PromptSequence:
    """Leader-to-follower prompt; pass None to drop an optional span.

    `inference=True` ends the prompt at the <follower> opener (mask all
    zeros); otherwise the mask covers the follower tokens plus </follower>.
    """
    ids: list[int] = [vocab.special(SYS)]
    ids += vocab.encode_text(vocab.templates[task])
    if caption:
        ids += vocab.encode_text(caption)[:MAX_CAPTION_WORDS]

    if audio_tokens is not None:
        ids += _span(vocab, AUDIO_OPEN, AUDIO_CLOSE, [vocab.audio_id(int(k)) for k in audio_tokens])
    if leader_tokens is not None:
        ids += _span(vocab, LEADER_OPEN, LEADER_CLOSE, [vocab.motion_id(int(k)) for k in leader_tokens])
    if relation_tokens is not None:
        ids += _span(
            vocab, RELATION_OPEN, RELATION_CLOSE, [vocab.relation_id(int(k)) for k in relation_tokens]
        )

    mask_start = len(ids) + 1  # first follower token position
    if inference:
        ids.append(vocab.special(FOLLOWER_OPEN))
        mask = np.zeros(len(ids), dtype=np.int64)
    else:
        foll = [] if follower_tokens is None else [vocab.motion_id(int(k)) for k in follower_tokens]
        ids += _span(vocab, FOLLOWER_OPEN, FOLLOWER_CLOSE, foll)
        mask = np.zeros(len(ids), dtype=np.int64)
        mask[mask_start:] = 1  # follower tokens + closing marker
    return PromptSequence(np.array(ids, dtype=np.int64), mask, task)


def parse_prompt(vocab: Vocabulary, ids) -> ParsedPrompt:
    """Recover per-modality spans; unbalanced markers raise PromptError.

    A trailing bare <follower> opener (inference form) is accepted and
    reported via follower_open.
    """
    ids = [int(i) for i in ids]
    pairs = {
        vocab.special(AUDIO_OPEN): (vocab.special(AUDIO_CLOSE), "audio"),
        vocab.special(LEADER_OPEN): (vocab.special(LEADER_CLOSE), "leader"),
        vocab.special(RELATION_OPEN): (vocab.special(RELATION_CLOSE), "relation"),
        vocab.special(FOLLOWER_OPEN): (vocab.special(FOLLOWER_CLOSE), "follower"),
    }
    closers = {c for c, _ in pairs.values()}
    out = ParsedPrompt([], [], [], [], [], None)
    i = 0
    seen_span = False
    while i < len(ids):
        tid = ids[i]
        if tid in pairs:
            close_id, name = pairs[tid]
            j = i + 1
            while j < len(ids) and ids[j] != close_id:
                if ids[j] in pairs or ids[j] in closers:
                    raise PromptError(f"marker inside open <{name}> span")
                j += 1
            if j == len(ids):
                if name == "follower" and i == len(ids) - 1:
                    out.follower = []
                    out.follower_open = True
                    return out
                raise PromptError(f"missing closing marker for <{name}> span")
            body = [vocab.codebook_index(t) for t in ids[i + 1 : j]]
            if name == "follower":
                out.follower = body
            else:
                setattr(out, name, body)
            seen_span = True
            i = j + 1
        elif tid in closers:
            raise PromptError("closing marker without matching opener")
        else:
            cls = vocab.class_of(tid)
            if cls == "text" or (cls == "special" and tid in (vocab.special(SYS), vocab.special(EOS))):
                (out.sys_text if not seen_span else out.caption).append(tid)
            else:
                raise PromptError(f"{cls} token outside any span")
            i += 1
    return out


# ---------------------------------------------------------------------------
# task streams


@dataclass
class ClipRecord:
    """Aligned token views of one clip of a sequence (clip = a few windows)."""

    seq_id: str
    start_window: int
    audio: np.ndarray  # one code per frame of the clip
    leader: np.ndarray  # one motion token per window
    relation: np.ndarray
    follower: np.ndarray
    leader_caption: str = ""
    follower_caption: str = ""


def _completion_prompt(vocab: Vocabulary, task: str, open_s: str, close_s: str, tokens) -> PromptSequence:
    ids: list[int] = [vocab.special(SYS)]
    ids += vocab.encode_text(vocab.templates[task])
    body = [vocab.motion_id(int(k)) for k in tokens]
    ids += _span(vocab, open_s, close_s, body)
    half = len(body) // 2
    mask = np.zeros(len(ids), dtype=np.int64)
    span_first = len(ids) - len(body) - 1  # index of first body token
    mask[span_first + half :] = 1  # second half + closing marker
    return PromptSequence(np.array(ids, dtype=np.int64), mask, task)


def _span_target_prompt(
    vocab: Vocabulary, task: str, context: list[tuple[str, str, list[int]]],
    open_s: str, close_s: str, target: list[int], caption: str | None = None
) -> PromptSequence:
    ids: list[int] = [vocab.special(SYS)]
    ids += vocab.encode_text(vocab.templates[task])
    if caption:
        ids += vocab.encode_text(caption)[:MAX_CAPTION_WORDS]
    for o, c, body in context:
        ids += _span(vocab, o, c, body)
    mask_start = len(ids) + 1
    ids += _span(vocab, open_s, close_s, target)
    mask = np.zeros(len(ids), dtype=np.int64)
    mask[mask_start:] = 1
    return PromptSequence(np.array(ids, dtype=np.int64), mask, task)


STAGE1_FAMILIES = (
    "gen_leader", "gen_follower", "complete_leader", "complete_follower",
    "cross_l2f", "cross_f2l", "caption2motion", "motion2caption",
)


def build_stage1_prompts(
    vocab: Vocabulary,
    records: list[ClipRecord],
    use_captions: bool = True,
    tasks_per_clip: int | None = None,
) -> list[PromptSequence]:
    """Representation-alignment task mix, uniform across families:
    role-conditioned generation, motion completion (prefix -> suffix),
    cross-role prediction both ways, and caption <-> motion when captions are
    on. With tasks_per_clip set, each clip contributes that many families on
    a rotating schedule (coverage stays uniform over the corpus).
    """
    families = [f for f in STAGE1_FAMILIES
                if use_captions or f not in ("caption2motion", "motion2caption")]
    prompts = []
    for r_idx, rec in enumerate(records):
        leader = [int(k) for k in rec.leader]
        follower = [int(k) for k in rec.follower]
        lm_ids = [vocab.motion_id(k) for k in leader]
        fm_ids = [vocab.motion_id(k) for k in follower]
        if tasks_per_clip is None:
            chosen = families
        else:
            n = max(1, min(tasks_per_clip, len(families)))
            chosen = [families[(r_idx * n + j) % len(families)] for j in range(n)]
        for fam in chosen:
            if fam == "gen_leader":
                prompts.append(_span_target_prompt(
                    vocab, "gen_leader", [], LEADER_OPEN, LEADER_CLOSE, lm_ids))
            elif fam == "gen_follower":
                prompts.append(_span_target_prompt(
                    vocab, "gen_follower", [], FOLLOWER_OPEN, FOLLOWER_CLOSE, fm_ids))
            elif fam == "complete_leader":
                prompts.append(_completion_prompt(
                    vocab, "complete_leader", LEADER_OPEN, LEADER_CLOSE, leader))
            elif fam == "complete_follower":
                prompts.append(_completion_prompt(
                    vocab, "complete_follower", FOLLOWER_OPEN, FOLLOWER_CLOSE, follower))
            elif fam == "cross_l2f":
                prompts.append(_span_target_prompt(
                    vocab, "cross_l2f", [(LEADER_OPEN, LEADER_CLOSE, lm_ids)],
                    FOLLOWER_OPEN, FOLLOWER_CLOSE, fm_ids))
            elif fam == "cross_f2l":
                prompts.append(_span_target_prompt(
                    vocab, "cross_f2l", [(FOLLOWER_OPEN, FOLLOWER_CLOSE, fm_ids)],
                    LEADER_OPEN, LEADER_CLOSE, lm_ids))
            elif fam == "caption2motion" and rec.leader_caption:
                prompts.append(_span_target_prompt(
                    vocab, "caption2motion", [], LEADER_OPEN, LEADER_CLOSE, lm_ids,
                    caption=rec.leader_caption))
            elif fam == "motion2caption" and rec.leader_caption:
                cap_ids = vocab.encode_text(rec.leader_caption)[:MAX_CAPTION_WORDS]
                ids = [vocab.special(SYS)]
                ids += vocab.encode_text(vocab.templates["motion2caption"])
                ids += _span(vocab, LEADER_OPEN, LEADER_CLOSE, lm_ids)
                mask_start = len(ids)
                ids += cap_ids + [vocab.special(EOS)]
                mask = np.zeros(len(ids), dtype=np.int64)
                mask[mask_start:] = 1
                prompts.append(PromptSequence(np.array(ids, dtype=np.int64), mask,
                                              "motion2caption"))
    return prompts


def build_stage2_prompt(
    vocab: Vocabulary,
    rec: ClipRecord,
    use_audio: bool = True,
    use_relation: bool = True,
    inference: bool = False,
    initial_relation_only: bool = False,
) -> PromptSequence:
    """Leader-to-follower prompt for one clip, honoring ablation switches."""
    relation = rec.relation
    if initial_relation_only and len(relation):
        relation = relation[:1]
    return assemble_prompt(
        vocab,
        "lead2follow",
        audio_tokens=rec.audio if use_audio else None,
        leader_tokens=rec.leader,
        relation_tokens=relation if use_relation else None,
        follower_tokens=None if inference else rec.follower,
        inference=inference,
    )
