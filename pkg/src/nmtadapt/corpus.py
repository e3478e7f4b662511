"""Text ingestion and batching.

The tokenizer and truecaser are small stand-ins for the Moses scripts: they
split punctuation off words and lower a sentence-initial word only when its
lowercase form dominates elsewhere in the training text.
"""
from __future__ import annotations

import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .vocabulary import MultiVocab

log = logging.getLogger(__name__)

MAX_SENT_LEN = 100
BUCKET_WIDTH = 10

_TOKEN_RE = re.compile(r"\w+(?:['’-]\w+)*|[^\w\s]", re.UNICODE)
_ATTACH_LEFT = set(",.!?;:)]}%")
_ATTACH_RIGHT = set("([{")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def detokenize(tokens: Sequence[str]) -> str:
    out: list[str] = []
    glue = True
    for tok in tokens:
        if out and not glue and tok not in _ATTACH_LEFT:
            out.append(" ")
        out.append(tok)
        glue = tok in _ATTACH_RIGHT
    return "".join(out)


class TruecaseModel:
    """Per-language case statistics from non-initial sentence positions."""

    def __init__(self, counts: dict[str, Counter] | None = None):
        self.counts: dict[str, Counter] = counts or {}

    @classmethod
    def fit(cls, sentences: Iterable[Sequence[str]]) -> "TruecaseModel":
        counts: dict[str, Counter] = defaultdict(Counter)
        for sent in sentences:
            for tok in sent[1:]:
                counts[tok.lower()][tok] += 1
        return cls(dict(counts))

    def lowers(self, token: str) -> bool:
        low = token.lower()
        forms = self.counts.get(low)
        if not forms or low == token:
            return False
        best = max(forms.values())
        winners = [f for f, c in forms.items() if c == best]
        return winners == [low]


def truecase(tokens: Sequence[str], model: TruecaseModel) -> list[str]:
    out = list(tokens)
    if out and model.lowers(out[0]):
        out[0] = out[0].lower()
    return out


class Pair(NamedTuple):
    src: tuple[str, ...]
    tgt: tuple[str, ...]
    src_lang: str
    tgt_lang: str


@dataclass
class ParallelCorpus:
    pairs: list[Pair] = field(default_factory=list)

    def __post_init__(self):
        clean = []
        for p in self.pairs:
            p = Pair(tuple(p[0]), tuple(p[1]), p[2], p[3])
            if not p.src or not p.tgt:
                raise DataError(f"empty side in {p.src_lang}-{p.tgt_lang} pair {p!r}")
            clean.append(p)
        self.pairs = clean

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.pairs)

    def __add__(self, other: "ParallelCorpus") -> "ParallelCorpus":
        return ParallelCorpus(self.pairs + other.pairs)

    def languages(self) -> set[str]:
        return {p.src_lang for p in self.pairs} | {p.tgt_lang for p in self.pairs}

    def direction(self, src_lang: str, tgt_lang: str) -> "ParallelCorpus":
        return ParallelCorpus([p for p in self.pairs if p.src_lang == src_lang and p.tgt_lang == tgt_lang])

    @classmethod
    def from_lists(cls, src: Sequence[Sequence[str]], tgt: Sequence[Sequence[str]],
                   src_lang: str, tgt_lang: str) -> "ParallelCorpus":
        if len(src) != len(tgt):
            raise DataError(f"{src_lang}-{tgt_lang}: {len(src)} source vs {len(tgt)} target sentences")
        return cls([Pair(tuple(s), tuple(t), src_lang, tgt_lang) for s, t in zip(src, tgt)])


@dataclass
class MonoCorpus:
    lang: str
    sentences: list[tuple[str, ...]]

    def __post_init__(self):
        self.sentences = [tuple(s) for s in self.sentences]
        if any(not s for s in self.sentences):
            raise DataError(f"{self.lang}: monolingual corpus contains an empty sentence")

    def __len__(self) -> int:
        return len(self.sentences)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def read_sentences(path: str | Path, tokenized: bool = True) -> list[list[str]]:
    """One sentence per line; blank lines are kept as empty lists."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            out.append(line.split() if tokenized else tokenize(line))
    return out


def write_sentences(sentences: Iterable[Sequence[str]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(" ".join(s) + "\n")


def read_parallel(src_path: str | Path, tgt_path: str | Path, src_lang: str, tgt_lang: str) -> ParallelCorpus:
    src, tgt = read_sentences(src_path), read_sentences(tgt_path)
    if len(src) != len(tgt):
        raise DataError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    keep = [(s, t) for s, t in zip(src, tgt) if s and t]
    if len(keep) != len(src):
        log.warning("%s-%s: dropped %d pairs with an empty side", src_lang, tgt_lang, len(src) - len(keep))
    return ParallelCorpus([Pair(tuple(s), tuple(t), src_lang, tgt_lang) for s, t in keep])


def read_mono(path: str | Path, lang: str) -> MonoCorpus:
    return MonoCorpus(lang, [s for s in read_sentences(path) if s])


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray          # (B, S) ids, first column is the target tag
    src_len: np.ndarray
    tgt: np.ndarray          # (B, T) ids: bos ... eos
    tgt_len: np.ndarray
    pad_id: int
    pair_ids: np.ndarray
    tgt_langs: tuple[str, ...] = ()

    @property
    def src_pad_mask(self) -> np.ndarray:
        return self.src == self.pad_id

    @property
    def rows(self) -> int:
        return self.src.shape[0]

    @property
    def padded_tokens(self) -> int:
        return self.rows * max(self.src.shape[1], self.tgt.shape[1])

    @property
    def target_tokens(self) -> int:
        return int((self.tgt_len - 1).sum())


@dataclass
class BatchSet:
    batches: list[Batch]
    skipped: int

    def __iter__(self) -> Iterator[Batch]:
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def encode_pair(p: Pair, v: MultiVocab) -> tuple[list[int], list[int]]:
    src = [v.tag_id(p.tgt_lang)] + v.word_ids(p.src, p.src_lang)
    tgt = [v.bos_id] + v.word_ids(p.tgt, p.tgt_lang) + [v.eos_id]
    return src, tgt


def pad_batch(rows: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(r) for r in rows], dtype=np.int64)
    out = np.full((len(rows), int(lens.max())), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out, lens


def collate(encoded: Sequence[tuple[list[int], list[int]]], ids: Sequence[int], pad_id: int,
            tgt_langs: Sequence[str] = ()) -> Batch:
    src, src_len = pad_batch([e[0] for e in encoded], pad_id)
    tgt, tgt_len = pad_batch([e[1] for e in encoded], pad_id)
    return Batch(src, src_len, tgt, tgt_len, pad_id, np.asarray(ids, dtype=np.int64), tuple(tgt_langs))


def batch_of(pairs: Sequence[Pair], v: MultiVocab) -> Batch:
    """Collate pairs as one batch, in the given order."""
    return collate([encode_pair(p, v) for p in pairs], range(len(pairs)), v.pad_id,
                   [p.tgt_lang for p in pairs])


def make_batches(data: ParallelCorpus, v: MultiVocab, budget: int, seed: int, epoch: int = 0,
                 max_len: int = MAX_SENT_LEN, bucket_width: int = BUCKET_WIDTH) -> BatchSet:
    """One epoch of source-length-bucketed batches within a padded-token budget.

    Each batch holds ``rows * max(padded src len, padded tgt len) <= budget``
    tokens. Pairs that cannot fit alone, or exceed ``max_len``, are skipped.
    """
    unknown = data.languages() - set(v.langs)
    if unknown:
        raise ConfigError(f"languages {sorted(unknown)} are not in the vocabulary")
    rng = np.random.default_rng([seed, epoch])
    encoded = [encode_pair(p, v) for p in data.pairs]
    order = rng.permutation(len(encoded)) if encoded else np.zeros(0, dtype=np.int64)
    buckets: dict[int, list[int]] = defaultdict(list)
    skipped = 0
    for i in order:
        s, t = encoded[i]
        width = max(len(s), len(t))
        if width > budget or len(s) - 1 > max_len or len(t) - 2 > max_len:
            skipped += 1
            continue
        buckets[(len(s) - 1) // bucket_width].append(int(i))
    if skipped:
        log.warning("skipped %d pairs that exceed the batch budget or max length", skipped)
    batches: list[Batch] = []

    def emit(ids):
        return collate([encoded[j] for j in ids], ids, v.pad_id, [data.pairs[j].tgt_lang for j in ids])

    for key in sorted(buckets):
        cur: list[int] = []
        cur_w = 0
        for i in buckets[key]:
            s, t = encoded[i]
            w = max(cur_w, len(s), len(t))
            if cur and w * (len(cur) + 1) > budget:
                batches.append(emit(cur))
                cur, w = [], max(len(s), len(t))
            cur.append(i)
            cur_w = w
        if cur:
            batches.append(emit(cur))
    perm = rng.permutation(len(batches)) if batches else []
    return BatchSet([batches[i] for i in perm], skipped)


def batch_stream(data: ParallelCorpus, v: MultiVocab, budget: int, seed: int,
                 start_epoch: int = 0) -> Iterator[Batch]:
    """Endless sequence of epochs, reshuffled per epoch."""
    epoch = start_epoch
    while True:
        bs = make_batches(data, v, budget, seed, epoch)
        if not bs.batches:
            raise DataError("no pair fits the batch budget; nothing to train on")
        yield from bs
        epoch += 1
