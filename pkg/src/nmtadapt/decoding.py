"""Greedy and beam search under target-language vocabulary filtering.

Every step masks the scores to the target language's words plus end-of-
sentence before any selection, so no decode can emit a token of another
language. Source words missing from the vocabulary are embedded on the fly
through their language's n-gram fallback when that language has an aligned
space, and mapped to ``<unk>`` otherwise.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import pad_batch
from .errors import ConfigError
from .model import TranslationModel
from .numerics import Tensor, concat, no_grad
from .vocabulary import MultiVocab, lang_mask, prefixed

LENGTH_ALPHA = 0.6


@dataclass
class DecodeConfig:
    target_lang: str
    beam_size: int = 4
    max_len: int | None = None          # None: 2 * source length + 10
    length_norm: float = LENGTH_ALPHA
    collapse_duplicates: bool = False

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.max_len is not None and self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")

    def limit(self, src_len: int) -> int:
        return self.max_len if self.max_len is not None else 2 * src_len + 10


@dataclass
class Hypothesis:
    ids: list[int]
    score: float = 0.0
    finished: bool = False
    norm_score: float = field(default=-math.inf, compare=False)

    @property
    def length(self) -> int:
        return len(self.ids) - 1


@dataclass
class DecodeAudit:
    """Running count of emitted tokens and of any outside the target mask."""

    emitted: int = 0
    off_target: int = 0

    def record(self, ids: Sequence[int], allowed: np.ndarray) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        self.emitted += int(ids.size)
        self.off_target += int((~allowed[ids]).sum()) if ids.size else 0

    def reset(self) -> None:
        self.emitted = self.off_target = 0


audit = DecodeAudit()


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def collapse_duplicates(tokens: Sequence) -> list:
    """Reduce each run of identical adjacent tokens to one."""
    return [k for k, _ in itertools.groupby(tokens)]


def continuous_decode_step(pred: np.ndarray, v: MultiVocab, target_lang: str,
                           matrix: np.ndarray | None = None) -> np.ndarray:
    """Nearest row by cosine within the target words plus eos; lowest id on ties."""
    allowed = v.emittable_mask(target_lang)
    if not (allowed & ~v.special_mask).any():
        raise ConfigError(f"language {target_lang!r} has no words to decode into")
    rows = v.embedding_matrix if matrix is None else matrix
    ids = np.flatnonzero(allowed)
    cand = rows[ids]
    cand = cand / np.maximum(np.linalg.norm(cand, axis=1, keepdims=True), 1e-12)
    pred = np.atleast_2d(pred)
    sims = pred @ cand.T / np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), 1e-12)
    return ids[np.argmax(sims, axis=1)]


def source_ids(m: TranslationModel, sentences: Sequence[Sequence[str]], src_lang: str,
               tgt_lang: str) -> tuple[np.ndarray, Tensor | None]:
    """Padded source id matrix and, if OOV rows were needed, the widened table."""
    v = m.vocab
    tag = v.tag_id(tgt_lang)
    space = v.spaces.get(src_lang)
    fallback = space is not None and space.transform is not None
    extra: dict[str, int] = {}
    rows = []
    for sent in sentences:
        ids = [tag]
        for w in sent:
            tok = prefixed(src_lang, w)
            if tok in v.index:
                ids.append(v.index[tok])
            elif fallback:
                if w not in extra:
                    extra[w] = len(v) + len(extra)
                ids.append(extra[w])
            else:
                ids.append(v.unk_id)
        rows.append(ids)
    src, _ = pad_batch(rows, v.pad_id)
    if not extra:
        return src, None
    vecs = np.stack([space.lookup(w) for w in extra])
    vecs = vecs / np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), 1e-12)
    table = concat([m.embedding_matrix(), Tensor(vecs.astype(m.config.np_dtype))], axis=0)
    return src, table


def _greedy(m: TranslationModel, enc, limits: np.ndarray, allowed: np.ndarray,
            continuous: bool, table: np.ndarray | None, alpha: float = LENGTH_ALPHA) -> list[Hypothesis]:
    v = m.vocab
    n = len(limits)
    hyps = [Hypothesis([v.bos_id]) for _ in range(n)]
    active = np.arange(n)
    step = 0
    while len(active):
        prefix = np.array([hyps[i].ids for i in active])
        sub = enc if len(active) == n else enc.select(active)
        out = m.decode_step(sub, prefix, None if continuous else allowed).data
        if continuous:
            nxt = _nn(out, allowed, table)
            gains = np.zeros(len(active))
        else:
            nxt = np.argmax(out, axis=1)
            gains = out[np.arange(len(active)), nxt]
        step += 1
        keep = []
        for j, i in enumerate(active):
            h = hyps[i]
            h.ids.append(int(nxt[j]))
            h.score += float(gains[j])
            if nxt[j] == v.eos_id or step >= limits[i]:
                h.finished = True
                h.norm_score = h.score / length_penalty(h.length, alpha)
            else:
                keep.append(i)
        active = np.array(keep, dtype=np.int64)
    return hyps


def _nn(pred: np.ndarray, allowed: np.ndarray, table: np.ndarray) -> np.ndarray:
    ids = np.flatnonzero(allowed)
    cand = table[ids]
    cand = cand / np.maximum(np.linalg.norm(cand, axis=1, keepdims=True), 1e-12)
    return ids[np.argmax(pred @ cand.T, axis=1)]


def _beam(m: TranslationModel, enc, limits: np.ndarray, allowed: np.ndarray, k: int,
          alpha: float) -> list[Hypothesis]:
    v = m.vocab
    n = len(limits)
    beams: list[list[Hypothesis]] = [[Hypothesis([v.bos_id])] for _ in range(n)]
    done: list[list[Hypothesis]] = [[] for _ in range(n)]
    step = 0
    while True:
        owners = [(i, h) for i in range(n) for h in beams[i]]
        if not owners:
            break
        rows = np.array([i for i, _ in owners])
        prefix = np.array([h.ids for _, h in owners])
        logp = m.decode_step(enc.select(rows), prefix, allowed).data
        step += 1
        base = np.array([h.score for _, h in owners])
        total = base[:, None] + logp
        for i in range(n):
            mine = np.flatnonzero(rows == i)
            if not len(mine):
                continue
            cand = total[mine]                      # (hyps, V)
            flat = cand.reshape(-1)
            finite = np.flatnonzero(np.isfinite(flat))
            # best first; ties resolved by hypothesis order then token id
            order = finite[np.lexsort((finite, -flat[finite]))][: 2 * k]
            new_beam = []
            for f in order:
                hi, tok = divmod(int(f), cand.shape[1])
                parent = owners[mine[hi]][1]
                h = Hypothesis(parent.ids + [tok], float(flat[f]))
                if tok == v.eos_id or step >= limits[i]:
                    h.finished = True
                    h.norm_score = h.score / length_penalty(h.length, alpha)
                    done[i].append(h)
                else:
                    new_beam.append(h)
                if len(new_beam) == k:
                    break
            beams[i] = new_beam if len(done[i]) < k else []
    out = []
    for i in range(n):
        best = min(done[i], key=lambda h: (-h.norm_score, h.ids))
        out.append(best)
    return out


def decode_ids(m: TranslationModel, sentences: Sequence[Sequence[str]], src_lang: str,
               cfg: DecodeConfig) -> list[Hypothesis]:
    """Best hypothesis per source sentence, with token ids."""
    v = m.vocab
    if cfg.target_lang not in v.langs:
        raise ConfigError(f"unknown target language {cfg.target_lang!r}; vocabulary has {', '.join(v.langs)}")
    lang_mask(v, cfg.target_lang)
    if not sentences:
        return []
    allowed = v.emittable_mask(cfg.target_lang)
    continuous = m.config.head_kind == "continuous"
    was_training = m.training
    m.eval()
    try:
        with no_grad():
            src, table = source_ids(m, sentences, src_lang, cfg.target_lang)
            enc = m.encode(src, table)
            m.prime_cache(enc)
            limits = np.array([cfg.limit(len(s)) for s in sentences])
            if continuous or cfg.beam_size == 1:
                emb = m.embedding_matrix().data if continuous else None
                hyps = _greedy(m, enc, limits, allowed, continuous, emb, cfg.length_norm)
            else:
                hyps = _beam(m, enc, limits, allowed, cfg.beam_size, cfg.length_norm)
    finally:
        m.training = was_training
    for h in hyps:
        audit.record(h.ids[1:], allowed)
    return hyps


def decode(m: TranslationModel, sentences: Sequence[Sequence[str]], src_lang: str,
           cfg: DecodeConfig) -> list[list[str]]:
    """Translate token sequences; returns target-language surface words."""
    out = []
    for h in decode_ids(m, sentences, src_lang, cfg):
        words = m.vocab.words_of(h.ids[1:])
        out.append(collapse_duplicates(words) if cfg.collapse_duplicates else words)
    return out


def blind_decode(m: TranslationModel, sentences: Sequence[Sequence[str]], src_lang: str,
                 tgt_lang: str, cfg: DecodeConfig | None = None) -> list[list[str]]:
    """Decode from a language the model never trained on.

    The source language must already be in the (extended) vocabulary, which
    requires its embedding space to be aligned into the hub.
    """
    v = m.vocab
    space = v.spaces.get(src_lang)
    if src_lang not in v.langs or space is None or space.transform is None:
        raise ConfigError(f"language {src_lang!r} is not aligned into the shared embedding space; "
                          "align it and extend the vocabulary first")
    cfg = cfg or DecodeConfig(target_lang=tgt_lang)
    if cfg.target_lang != tgt_lang:
        cfg = DecodeConfig(tgt_lang, cfg.beam_size, cfg.max_len, cfg.length_norm, cfg.collapse_duplicates)
    return decode(m, sentences, src_lang, cfg)
