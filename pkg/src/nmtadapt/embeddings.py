"""Monolingual word vectors, subword fallback and hub-space alignment.

Spaces are read from the text vector-exchange format (``count dim`` header,
then ``word v1 ... v_dim`` per line). Every non-pivot space is mapped into the
pivot ("hub") space by a linear transform learned from a bilingual
dictionary: orthogonal Procrustes first, optionally refined by gradient
ascent on the relaxed CSLS criterion.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, FormatError
from .numerics import Tensor, backward, einsum, embedding, l2_norm, matmul

log = logging.getLogger(__name__)

NGRAM_MIN = 3
NGRAM_MAX = 6
NGRAM_BUCKETS = 50_000
NEIGHBORHOOD_VOCAB = 20_000

_FNV_OFFSET = 2166136261
_FNV_PRIME = 16777619


def fnv1a(text: str) -> int:
    """32-bit FNV-1a hash of the UTF-8 bytes of ``text``."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFF
    return h


def char_ngrams(word: str, nmin: int = NGRAM_MIN, nmax: int = NGRAM_MAX) -> list[str]:
    """Character n-grams of the boundary-marked word ``<word>``."""
    marked = f"<{word}>"
    grams = []
    for n in range(nmin, nmax + 1):
        for i in range(len(marked) - n + 1):
            grams.append(marked[i:i + n])
    if not grams:
        grams.append(marked)
    return grams


def unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return m / np.maximum(norms, 1e-12)


@dataclass
class EmbeddingSpace:
    lang: str
    words: list[str]
    vectors: np.ndarray
    transform: np.ndarray | None = None
    nmin: int = NGRAM_MIN
    nmax: int = NGRAM_MAX
    buckets: int = NGRAM_BUCKETS
    index: dict[str, int] = field(init=False, repr=False)
    _ngram_sums: dict[int, np.ndarray] | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.words):
            raise DataError(f"{self.lang}: {len(self.words)} words but vector matrix {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError(f"{self.lang}: non-finite vector entries")
        self.index = {}
        for i, w in enumerate(self.words):
            self.index.setdefault(w, i)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    # -- subword fallback -------------------------------------------------
    def _bucket_table(self) -> dict[int, np.ndarray]:
        if self._ngram_sums is None:
            sums: dict[int, np.ndarray] = {}
            counts: dict[int, int] = {}
            unit = unit_rows(self.vectors)
            for word, row in zip(self.words, unit):
                for g in char_ngrams(word, self.nmin, self.nmax):
                    b = fnv1a(g) % self.buckets
                    if b in sums:
                        sums[b] += row
                        counts[b] += 1
                    else:
                        sums[b] = row.copy()
                        counts[b] = 1
            self._ngram_sums = {b: s / counts[b] for b, s in sums.items()}
        return self._ngram_sums

    def _bucket_vector(self, bucket: int) -> np.ndarray:
        table = self._bucket_table()
        if bucket in table:
            return table[bucket]
        # unsupported buckets get a fixed small random vector
        rng = np.random.default_rng(bucket)
        return rng.uniform(-1.0 / self.dim, 1.0 / self.dim, self.dim)

    def oov_vector(self, word: str) -> np.ndarray:
        return oov_vector(self, word)

    # -- lookup -----------------------------------------------------------
    def raw_vector(self, word: str) -> np.ndarray:
        i = self.index.get(word)
        if i is not None:
            return self.vectors[i]
        return oov_vector(self, word)

    def lookup(self, word: str) -> np.ndarray:
        """Hub-space vector: ``W @ unit(v)`` once aligned, ``unit(v)`` otherwise."""
        v = self.raw_vector(word)
        v = v / max(np.linalg.norm(v), 1e-12)
        return v if self.transform is None else self.transform @ v

    def unit_matrix(self) -> np.ndarray:
        return unit_rows(self.vectors)

    def hub_matrix(self, limit: int | None = None) -> np.ndarray:
        m = self.unit_matrix() if limit is None else self.unit_matrix()[:limit]
        return m if self.transform is None else m @ self.transform.T

    def aligned(self, transform: np.ndarray) -> "EmbeddingSpace":
        out = replace(self, transform=np.asarray(transform, dtype=np.float64))
        out._ngram_sums = self._ngram_sums
        return out

    def permuted(self, seed: int) -> "EmbeddingSpace":
        """Copy whose vectors are shuffled against the words (deliberate misalignment)."""
        perm = np.random.default_rng(seed).permutation(len(self.words))
        return EmbeddingSpace(self.lang, list(self.words), self.vectors[perm], self.transform,
                              self.nmin, self.nmax, self.buckets)


def oov_vector(space: EmbeddingSpace, word: str) -> np.ndarray:
    """Vector for ``word``: its own row if known, else the mean of its n-gram buckets."""
    if not word:
        raise DataError("oov_vector needs a non-empty word")
    i = space.index.get(word)
    if i is not None:
        return space.vectors[i]
    grams = char_ngrams(word, space.nmin, space.nmax)
    acc = np.zeros(space.dim)
    for g in grams:
        acc += space._bucket_vector(fnv1a(g) % space.buckets)
    return acc / len(grams)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_vec(path: str | Path, lang: str, max_words: int | None = None) -> EmbeddingSpace:
    path = Path(path)
    words: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8", errors="surrogateescape") as fh:
        header = fh.readline().split()
        if len(header) != 2 or not all(h.isdigit() for h in header):
            raise FormatError(f"{path}:1: malformed header {' '.join(header)!r}; expected 'count dim'")
        dim = int(header[1])
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            word, values = parts[0], parts[1:]
            if len(values) != dim:
                raise FormatError(f"{path}:{lineno}: word {word!r} has {len(values)} values, expected {dim}")
            if word in seen:
                continue
            try:
                rows.append(np.array(values, dtype=np.float64))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric value for word {word!r}") from exc
            seen.add(word)
            words.append(word)
            if max_words is not None and len(words) >= max_words:
                break
    vectors = np.vstack(rows) if rows else np.zeros((0, dim))
    return EmbeddingSpace(lang, words, vectors)


def save_vec(space: EmbeddingSpace, path: str | Path, precision: int = 8) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{len(space.words)} {space.dim}\n")
        for w, row in zip(space.words, space.vectors):
            fh.write(w + " " + " ".join(f"{x:.{precision}g}" for x in row) + "\n")


@dataclass
class BilingualDictionary:
    src_lang: str
    tgt_lang: str
    pairs: list[tuple[str, str]]

    def __post_init__(self):
        seen = set()
        clean = []
        for s, t in self.pairs:
            if not s or not t:
                raise DataError(f"empty word in dictionary pair ({s!r}, {t!r})")
            if (s, t) not in seen:
                seen.add((s, t))
                clean.append((s, t))
        self.pairs = clean

    def __len__(self) -> int:
        return len(self.pairs)

    def split(self, n_first: int) -> tuple["BilingualDictionary", "BilingualDictionary"]:
        return (BilingualDictionary(self.src_lang, self.tgt_lang, self.pairs[:n_first]),
                BilingualDictionary(self.src_lang, self.tgt_lang, self.pairs[n_first:]))


def load_dictionary(path: str | Path, src_lang: str, tgt_lang: str) -> BilingualDictionary:
    pairs = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'src_word tgt_word', got {line.strip()!r}")
            pairs.append((parts[0], parts[1]))
    return BilingualDictionary(src_lang, tgt_lang, pairs)


def save_dictionary(d: BilingualDictionary, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s, t in d.pairs:
            fh.write(f"{s} {t}\n")


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def _resolve(src: EmbeddingSpace, tgt: EmbeddingSpace, d: BilingualDictionary) -> tuple[np.ndarray, np.ndarray]:
    si, ti = [], []
    for s, t in d.pairs:
        a, b = src.index.get(s), tgt.index.get(t)
        if a is not None and b is not None:
            si.append(a)
            ti.append(b)
    skipped = len(d.pairs) - len(si)
    if skipped:
        log.info("%s-%s: skipped %d dictionary pairs with words missing from a space",
                 d.src_lang, d.tgt_lang, skipped)
    return np.array(si, dtype=np.int64), np.array(ti, dtype=np.int64)


def procrustes(src: EmbeddingSpace, tgt: EmbeddingSpace, d: BilingualDictionary) -> np.ndarray:
    """Orthogonal ``W`` minimizing ``||W X - Y||_F`` over the dictionary pairs."""
    si, ti = _resolve(src, tgt, d)
    if len(si) < src.dim:
        raise DataError(f"procrustes needs >= {src.dim} resolvable dictionary pairs, found {len(si)}")
    x = src.unit_matrix()[si]
    y = tgt.hub_matrix()[ti]
    u, _, vt = np.linalg.svd(y.T @ x)
    return u @ vt


def _topk_idx(sims: np.ndarray, k: int) -> np.ndarray:
    k = min(k, sims.shape[1])
    part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    return part


def rcsls_criterion(w: np.ndarray, src: EmbeddingSpace, tgt: EmbeddingSpace,
                    d: BilingualDictionary, k: int = 10, max_vocab: int = NEIGHBORHOOD_VOCAB) -> float:
    """Mean relaxed-CSLS score of the dictionary pairs under map ``w`` (higher is better)."""
    si, ti = _resolve(src, tgt, d)
    return float(_rcsls_objective(Tensor(w), src.unit_matrix()[si], tgt.hub_matrix()[ti],
                                  src.unit_matrix()[:max_vocab], tgt.hub_matrix(max_vocab), k).data)


def _rcsls_objective(w: Tensor, x: np.ndarray, y: np.ndarray, s_pop: np.ndarray,
                     t_pop: np.ndarray, k: int) -> Tensor:
    wx = matmul(Tensor(x), w.T)
    z = wx / l2_norm(wx)
    ws = matmul(Tensor(s_pop), w.T)
    zs = ws / l2_norm(ws)
    # neighbour sets are piecewise constant in w; the gradient treats them as fixed
    nn_t = _topk_idx(z.data @ t_pop.T, k)
    nn_s = _topk_idx(y @ zs.data.T, k)
    kk = nn_t.shape[1]
    fit = (z * Tensor(y)).sum(axis=1) * 2.0
    hub_t = einsum("nd,nkd->nk", z, Tensor(t_pop[nn_t])).sum(axis=1) * (1.0 / kk)
    gathered = embedding(zs, nn_s)
    hub_s = einsum("nkd,nd->nk", gathered, Tensor(y)).sum(axis=1) * (1.0 / nn_s.shape[1])
    return (fit - hub_t - hub_s).mean()


def rcsls_align(src: EmbeddingSpace, tgt: EmbeddingSpace, d: BilingualDictionary, k: int = 10,
                steps: int = 50, lr: float = 0.1, max_vocab: int = NEIGHBORHOOD_VOCAB,
                init: np.ndarray | None = None) -> np.ndarray:
    """Unconstrained map refined from the Procrustes solution by gradient ascent.

    The best iterate by criterion value is returned, so the result never
    scores below the initialization.
    """
    w0 = procrustes(src, tgt, d) if init is None else np.array(init, dtype=np.float64)
    if steps <= 0:
        return w0
    si, ti = _resolve(src, tgt, d)
    x, y = src.unit_matrix()[si], tgt.hub_matrix()[ti]
    s_pop, t_pop = src.unit_matrix()[:max_vocab], tgt.hub_matrix(max_vocab)
    w = Tensor(w0.copy(), requires_grad=True)
    best_w, best_f = w0.copy(), -np.inf
    for _ in range(steps + 1):
        w.grad = None
        f = _rcsls_objective(w, x, y, s_pop, t_pop, k)
        if f.data > best_f:
            best_f, best_w = float(f.data), w.data.copy()
        backward(f)
        w.data = w.data + lr * w.grad
    return best_w


def csls_scores(queries: np.ndarray, targets: np.ndarray, source_pop: np.ndarray, k: int) -> np.ndarray:
    """CSLS matrix ``2cos(x, y) - r_T(x) - r_S(y)`` for unit-normalized inputs."""
    sims = queries @ targets.T
    kt = min(k, targets.shape[0])
    r_t = -np.sort(-sims, axis=1)[:, :kt].mean(axis=1)
    sims_s = targets @ source_pop.T
    ks = min(k, source_pop.shape[0])
    r_s = -np.sort(-sims_s, axis=1)[:, :ks].mean(axis=1)
    return 2.0 * sims - r_t[:, None] - r_s[None, :]


def csls_retrieve(query: np.ndarray, space: EmbeddingSpace, k: int = 10,
                  source: np.ndarray | None = None) -> list[str]:
    """Words of ``space`` ranked by CSLS against ``query``.

    ``source`` is the population of (hub-space) query-side vectors used for
    the target-side hubness penalty; it defaults to the query alone. Ties keep
    vocabulary order.
    """
    if len(space) == 0:
        raise DataError(f"csls_retrieve: space {space.lang!r} is empty")
    if k < 1:
        raise DataError("csls_retrieve: k must be >= 1")
    q = unit_rows(np.atleast_2d(np.asarray(query, dtype=np.float64)))
    pop = q if source is None else unit_rows(np.atleast_2d(source))
    scores = csls_scores(q, unit_rows(space.hub_matrix()), pop, k)[0]
    order = np.argsort(-scores, kind="stable")
    return [space.words[i] for i in order]


@dataclass
class AlignmentReport:
    method: str
    nn_accuracy: float
    csls_accuracy: float
    dictionary_size: int

    def as_record(self) -> dict:
        return {"method": self.method, "nn_accuracy": self.nn_accuracy,
                "csls_accuracy": self.csls_accuracy, "dictionary_size": self.dictionary_size}


def evaluate_alignment(src: EmbeddingSpace, tgt: EmbeddingSpace, d: BilingualDictionary,
                       method: str = "procrustes", k: int = 10,
                       max_vocab: int = NEIGHBORHOOD_VOCAB) -> AlignmentReport:
    """Precision@1 of dictionary translation retrieval in the hub space.

    A source word counts as correct when the retrieved word is any of its
    dictionary translations.
    """
    gold: dict[int, set[int]] = {}
    for s, t in d.pairs:
        a, b = src.index.get(s), tgt.index.get(t)
        if a is not None and b is not None:
            gold.setdefault(a, set()).add(b)
    if not gold:
        raise DataError(f"evaluate_alignment: no resolvable pairs in {d.src_lang}-{d.tgt_lang} dictionary")
    rows = sorted(gold)
    q = unit_rows(src.hub_matrix()[rows])
    t = unit_rows(tgt.hub_matrix())
    nn = np.argmax(q @ t.T, axis=1)
    pop = unit_rows(src.hub_matrix(max_vocab))
    cs = np.argmax(csls_scores(q, t, pop, k), axis=1)
    nn_acc = float(np.mean([nn[i] in gold[r] for i, r in enumerate(rows)]))
    cs_acc = float(np.mean([cs[i] in gold[r] for i, r in enumerate(rows)]))
    return AlignmentReport(method, nn_acc, cs_acc, len(rows))


def align_to_pivot(spaces: dict[str, EmbeddingSpace], pivot: str,
                   dictionaries: dict[str, BilingualDictionary], method: str = "rcsls",
                   k: int = 10, steps: int = 50, lr: float = 0.1) -> dict[str, EmbeddingSpace]:
    """Map every space into the pivot's space; the pivot keeps the identity."""
    if pivot not in spaces:
        raise DataError(f"pivot language {pivot!r} has no embedding space")
    out = {pivot: spaces[pivot].aligned(np.eye(spaces[pivot].dim))}
    for lang, space in spaces.items():
        if lang == pivot:
            continue
        if lang not in dictionaries:
            raise DataError(f"no {lang}-{pivot} dictionary for alignment")
        d = dictionaries[lang]
        if method == "procrustes":
            w = procrustes(space, out[pivot], d)
        elif method == "rcsls":
            w = rcsls_align(space, out[pivot], d, k=k, steps=steps, lr=lr)
        else:
            raise DataError(f"unknown alignment method {method!r}")
        out[lang] = space.aligned(w)
    return out


def mean_pair_cosine(a: EmbeddingSpace, b: EmbeddingSpace, pairs: Iterable[tuple[str, str]]) -> float:
    sims = [float(unit_rows(a.lookup(x)[None])[0] @ unit_rows(b.lookup(y)[None])[0]) for x, y in pairs]
    return float(np.mean(sims)) if sims else 0.0

