"""How language-independent are the encoder's sentence representations?

Each sentence is mean-pooled over its non-pad encoder states. Parallel
sentences of a universal encoder should land close together (high paired
cosine relative to random pairs) while each language's encodings vary.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..corpus import ParallelCorpus
from ..decoding import source_ids
from ..errors import ConfigError
from ..model import TranslationModel
from ..numerics import no_grad


@dataclass(frozen=True)
class ReprDiagnostics:
    lang_means: dict[str, np.ndarray]
    paired_cosine: float
    random_cosine: float
    variance: dict[str, float]       # trace of the covariance of pooled encodings
    pairs: int

    @property
    def gap(self) -> float:
        return self.paired_cosine - self.random_cosine

    def as_record(self) -> dict:
        return {"paired_cosine": self.paired_cosine, "random_cosine": self.random_cosine, "gap": self.gap,
                "variance": dict(self.variance), "pairs": self.pairs}


def pooled_encodings(m: TranslationModel, sentences: Sequence[Sequence[str]], lang: str,
                     tag_lang: str, chunk: int = 64) -> np.ndarray:
    """(n, d) mean of the word positions' encoder states.

    Inputs carry ``tag_lang``'s target tag, which is left out of the mean.
    """
    out = []
    was_training = m.training
    m.eval()
    try:
        with no_grad():
            for i in range(0, len(sentences), chunk):
                src, table = source_ids(m, sentences[i: i + chunk], lang, tag_lang)
                out.append(m.encode(src, table).pooled(skip_tag=True))
    finally:
        m.training = was_training
    return np.concatenate(out, axis=0) if out else np.zeros((0, m.config.model_dim))


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    c = np.einsum("ij,ij->i", a, b) / np.maximum(na * nb, 1e-12)
    # two zero vectors count as identical
    c[(na < 1e-12) & (nb < 1e-12)] = 1.0
    return np.clip(c, -1.0, 1.0)


def _length_matched_derangement(lengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """A partner of equal source length for each sentence, never itself; -1 if none exists."""
    out = np.full(len(lengths), -1, dtype=np.int64)
    for ln in np.unique(lengths):
        idx = np.flatnonzero(lengths == ln)
        if len(idx) > 1:
            shift = rng.integers(1, len(idx), size=len(idx))
            out[idx] = idx[(np.arange(len(idx)) + shift) % len(idx)]
    return out


def diagnose_representations(m: TranslationModel, dev: ParallelCorpus, seed: int = 0) -> ReprDiagnostics:
    """Paired vs random-pair cosine of pooled encodings, plus per-language variance.

    Each side is encoded as a source translating into the other side's
    language, which is how the encoder sees it at translation time. Random
    pairs are drawn within a direction among sentences of equal source length,
    since pooled encodings of an untrained model already correlate with length.
    """
    langs = sorted(dev.languages())
    if len(langs) < 2:
        raise ConfigError(f"representation diagnostics need parallel data across >= 2 languages, got {langs}")
    src_enc, tgt_enc, lengths = [], [], []
    by_lang: dict[str, list[np.ndarray]] = {l: [] for l in langs}
    for a, b in sorted({(p.src_lang, p.tgt_lang) for p in dev.pairs}):
        pairs = [p for p in dev.pairs if p.src_lang == a and p.tgt_lang == b]
        ea = pooled_encodings(m, [p.src for p in pairs], a, b)
        eb = pooled_encodings(m, [p.tgt for p in pairs], b, a)
        src_enc.append(ea)
        lengths.append(np.array([len(p.src) for p in pairs]))
        tgt_enc.append(eb)
        by_lang[a].append(ea)
        by_lang[b].append(eb)
    rng = np.random.default_rng(seed)
    paired_c, rand_c = [], []
    for ea, eb, lens in zip(src_enc, tgt_enc, lengths):
        paired_c.append(_cos(ea, eb))
        partner = _length_matched_derangement(lens, rng)
        ok = partner >= 0
        if ok.any():
            rand_c.append(_cos(ea[ok], eb[partner[ok]]))
    paired = float(np.concatenate(paired_c).mean())
    rand = float(np.concatenate(rand_c).mean()) if rand_c else paired
    n = sum(len(e) for e in src_enc)
    means, var = {}, {}
    for lang, chunks in by_lang.items():
        e = np.concatenate(chunks)
        means[lang] = e.mean(axis=0)
        var[lang] = float(np.trace(np.atleast_2d(np.cov(e, rowvar=False)))) if len(e) > 1 else 0.0
        var[lang] = max(var[lang], 0.0)
    return ReprDiagnostics(means, paired, rand, var, n)
