"""Synthetic language families with known translations and embeddings.

All languages share one abstract grammar over typed concepts (determiners,
adjectives, nouns, verbs, adpositions). A language is a surface relabeling of
the concepts, a word-order rule, and a rotation of the shared concept vector
space, optionally perturbed by noise. Parallel text is exact by construction,
so transfer effects can be measured at desk scale.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import MonoCorpus, Pair, ParallelCorpus, write_sentences
from .embeddings import BilingualDictionary, EmbeddingSpace, save_dictionary, save_vec
from .errors import ConfigError

TYPES = ("D", "A", "N", "V", "P")
TYPE_SHARES = {"D": 0.04, "A": 0.24, "N": 0.44, "V": 0.24, "P": 0.04}
CLAUSE_ORDERS = ("SVO", "SOV", "VSO")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class OrderRule:
    clause: str = "SVO"       # subject always precedes object
    adj: str = "post"         # adjective after ("post") or before ("pre") the noun
    det: str = "pre"
    adp: str = "pre"          # prepositions or postpositions
    reverse: bool = False     # mirror the whole sentence (test fixture only)

    def __post_init__(self):
        if self.clause not in CLAUSE_ORDERS:
            raise ConfigError(f"clause order must be one of {CLAUSE_ORDERS}")
        for name in ("adj", "det", "adp"):
            if getattr(self, name) not in ("pre", "post"):
                raise ConfigError(f"{name} placement must be 'pre' or 'post'")


ORDER_PRESETS = {
    "svo_post": OrderRule("SVO", "post", "pre", "pre"),
    "sov_pre": OrderRule("SOV", "pre", "post", "post"),
    "vso_pre": OrderRule("VSO", "pre", "pre", "pre"),
    "reverse": OrderRule("SVO", "post", "pre", "pre", reverse=True),
}


@dataclass(frozen=True)
class LanguageSpec:
    code: str
    order: str = "svo_post"
    relabel: bool = True
    rotate: bool = True
    noise: float = 0.0        # embedding perturbation: the "distant language" knob
    role: str = "base"        # base languages have parallel data; new ones only mono

    def __post_init__(self):
        if self.order not in ORDER_PRESETS:
            raise ConfigError(f"unknown word-order preset {self.order!r}; choose from {sorted(ORDER_PRESETS)}")
        if self.role not in ("base", "new"):
            raise ConfigError(f"language role must be 'base' or 'new', got {self.role!r}")
        if self.noise < 0:
            raise ConfigError("embedding noise must be >= 0")

    @property
    def rule(self) -> OrderRule:
        return ORDER_PRESETS[self.order]


def default_languages() -> tuple[LanguageSpec, ...]:
    return (
        LanguageSpec("xa", "svo_post", role="base"),
        LanguageSpec("xb", "sov_pre", role="base"),
        LanguageSpec("xn", "svo_post", noise=0.05, role="new"),
        LanguageSpec("xd", "vso_pre", noise=0.05, role="new"),
    )


@dataclass(frozen=True)
class FamilySpec:
    concepts: int = 500
    dim: int = 32
    pairs_per_direction: int = 3000
    mono_sentences: int = 1000
    dev_size: int = 200
    test_size: int = 200
    zipf: float = 1.0
    type_cohesion: float = 1.0
    languages: tuple[LanguageSpec, ...] = field(default_factory=default_languages)

    def __post_init__(self):
        if self.concepts < len(TYPES):
            raise ConfigError(f"need at least {len(TYPES)} concepts, got {self.concepts}")
        if self.dim < 2:
            raise ConfigError("embedding dim must be >= 2")
        codes = [l.code for l in self.languages]
        if len(set(codes)) != len(codes):
            raise ConfigError(f"duplicate language codes {codes}")
        if len(self.base_langs) < 2 or len(self.languages) < 3:
            raise ConfigError("a family needs at least two base languages and one held-out language")

    @property
    def base_langs(self) -> list[str]:
        return [l.code for l in self.languages if l.role == "base"]

    @property
    def new_langs(self) -> list[str]:
        return [l.code for l in self.languages if l.role != "base"]

    def as_dict(self) -> dict:
        return asdict(self)


def _sub_seed(seed: int, *parts) -> np.random.Generator:
    key = zlib.crc32("/".join(map(str, parts)).encode("utf-8"))
    return np.random.default_rng([seed, key])


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


def _pseudo_words(rng: np.random.Generator, n: int) -> list[str]:
    out: list[str] = []
    seen = set()
    syll = 2
    while len(out) < n:
        w = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(syll))
        if w not in seen:
            seen.add(w)
            out.append(w)
        if len(seen) > 0.5 * (len(_CONSONANTS) * len(_VOWELS)) ** syll:
            syll += 1
    return out


# An abstract sentence: ((D|None, A|None, N) subject, V, object NP, (P, NP) | None)
Sentence = tuple


@dataclass
class SyntheticFamily:
    spec: FamilySpec
    seed: int
    concept_types: list[str]
    concept_vectors: np.ndarray
    lexicon: dict[str, list[str]]            # language -> surface word per concept
    rotations: dict[str, np.ndarray]
    spaces: dict[str, EmbeddingSpace]
    _by_type: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _weights: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    # -- language access ------------------------------------------------------
    def lang(self, code: str) -> LanguageSpec:
        for l in self.spec.languages:
            if l.code == code:
                return l
        raise ConfigError(f"language {code!r} is not part of this family")

    @property
    def base_langs(self) -> list[str]:
        return self.spec.base_langs

    @property
    def new_langs(self) -> list[str]:
        return self.spec.new_langs

    # -- generation -------------------------------------------------------------
    def _concept(self, rng: np.random.Generator, kind: str, avoid: Sequence[int] = ()) -> int:
        ids, w = self._by_type[kind], self._weights[kind]
        while True:
            c = int(ids[rng.choice(len(ids), p=w)])
            if c not in avoid or len(ids) <= len(avoid):
                return c

    def _np(self, rng: np.random.Generator, avoid: Sequence[int] = ()) -> tuple:
        d = self._concept(rng, "D") if rng.random() < 0.7 else None
        a = self._concept(rng, "A") if rng.random() < 0.4 else None
        return d, a, self._concept(rng, "N", avoid)

    def sample_sentence(self, rng: np.random.Generator) -> Sentence:
        subj = self._np(rng)
        verb = self._concept(rng, "V")
        obj = self._np(rng, avoid=(subj[2],))
        pp = (self._concept(rng, "P"), self._np(rng, avoid=(subj[2], obj[2]))) if rng.random() < 0.3 else None
        return subj, verb, obj, pp

    @staticmethod
    def _realize_np(np_: tuple, rule: OrderRule) -> list[int]:
        d, a, n = np_
        core = [n] if a is None else ([a, n] if rule.adj == "pre" else [n, a])
        if d is None:
            return core
        return [d] + core if rule.det == "pre" else core + [d]

    def realize(self, sent: Sentence, code: str) -> tuple[str, ...]:
        rule = self.lang(code).rule
        subj, verb, obj, pp = sent
        s, o = self._realize_np(subj, rule), self._realize_np(obj, rule)
        clause = {"SVO": s + [verb] + o, "SOV": s + o + [verb], "VSO": [verb] + s + o}[rule.clause]
        if pp is not None:
            p, pnp = pp
            inner = self._realize_np(pnp, rule)
            clause += [p] + inner if rule.adp == "pre" else inner + [p]
        if rule.reverse:
            clause = clause[::-1]
        words = self.lexicon[code]
        return tuple(words[c] for c in clause)

    def _clean_sentence(self, rng: np.random.Generator, langs: Sequence[str]) -> Sentence:
        while True:
            sent = self.sample_sentence(rng)
            if all(not any(a == b for a, b in zip(r, r[1:])) for r in (self.realize(sent, l) for l in langs)):
                return sent

    def sentences(self, n: int, tag: str) -> list[Sentence]:
        rng = _sub_seed(self.seed, "sentences", tag)
        langs = [l.code for l in self.spec.languages]
        return [self._clean_sentence(rng, langs) for _ in range(n)]

    def parallel(self, src: str, tgt: str, n: int | None = None, split: str = "train") -> ParallelCorpus:
        """Exact translations ``src -> tgt``; each (direction, split) draws its own sentences."""
        sizes = {"train": self.spec.pairs_per_direction, "dev": self.spec.dev_size, "test": self.spec.test_size}
        n = sizes[split] if n is None else n
        sents = self.sentences(n, f"{split}/{src}-{tgt}")
        return ParallelCorpus([Pair(self.realize(s, src), self.realize(s, tgt), src, tgt) for s in sents])

    def base_corpus(self, n: int | None = None, split: str = "train") -> ParallelCorpus:
        out = ParallelCorpus()
        for a in self.base_langs:
            for b in self.base_langs:
                if a != b:
                    out = out + self.parallel(a, b, n, split)
        return out

    def mono(self, code: str, n: int | None = None) -> MonoCorpus:
        n = self.spec.mono_sentences if n is None else n
        return MonoCorpus(code, [self.realize(s, code) for s in self.sentences(n, f"mono/{code}")])

    def dictionary(self, src: str, tgt: str) -> BilingualDictionary:
        """Gold concept bijection, in a seeded random order."""
        order = _sub_seed(self.seed, "dict", src, tgt).permutation(self.spec.concepts)
        ls, lt = self.lexicon[src], self.lexicon[tgt]
        return BilingualDictionary(src, tgt, [(ls[c], lt[c]) for c in order])

    # -- files -----------------------------------------------------------------
    def write(self, root: str | Path, pivot: str | None = None, dict_train: int | None = None) -> Path:
        """Emit vector, dictionary and corpus files plus a manifest."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        pivot = pivot or self.base_langs[0]
        dict_train = dict_train if dict_train is not None else int(0.8 * self.spec.concepts)
        for code, space in self.spaces.items():
            save_vec(space, root / f"{code}.vec", precision=10)
            if code != pivot:
                train, test = self.dictionary(code, pivot).split(dict_train)
                save_dictionary(train, root / f"dict.{code}-{pivot}.train.txt")
                save_dictionary(test, root / f"dict.{code}-{pivot}.test.txt")
        files: dict[str, list] = {"train": [], "dev": [], "test": [], "mono": []}

        def emit(corpus: ParallelCorpus, split: str, a: str, b: str) -> None:
            stem = root / f"{split}.{a}-{b}"
            write_sentences([p.src for p in corpus], f"{stem}.{a}")
            write_sentences([p.tgt for p in corpus], f"{stem}.{b}")
            files[split].append([a, b])

        for a in self.base_langs:
            for b in self.base_langs:
                if a != b:
                    for split in ("train", "dev", "test"):
                        emit(self.parallel(a, b, split=split), split, a, b)
        for new in self.new_langs:
            write_sentences(self.mono(new).sentences, root / f"mono.{new}.txt")
            files["mono"].append(new)
            for base in self.base_langs:
                for a, b in ((base, new), (new, base)):
                    for split in ("train", "dev", "test"):
                        emit(self.parallel(a, b, split=split), split, a, b)
        manifest = {"seed": self.seed, "pivot": pivot, "spec": self.spec.as_dict(), "files": files,
                    "base_langs": self.base_langs, "new_langs": self.new_langs}
        (root / "family.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        return root


def generate_family(spec: FamilySpec | None = None, seed: int = 0) -> SyntheticFamily:
    spec = spec or FamilySpec()
    rng = _sub_seed(seed, "family")
    # concept types in fixed shares, at least one of each
    counts = {t: max(1, int(round(TYPE_SHARES[t] * spec.concepts))) for t in TYPES}
    counts["N"] += spec.concepts - sum(counts.values())
    if counts["N"] < 1:
        raise ConfigError(f"too few concepts ({spec.concepts}) for the grammar")
    types = [t for t in TYPES for _ in range(counts[t])]
    centroids = np.stack([random_rotation(rng, spec.dim)[0] for _ in TYPES])
    vecs = np.stack([spec.type_cohesion * centroids[TYPES.index(t)] + rng.normal(size=spec.dim) / np.sqrt(spec.dim)
                     for t in types])
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    lexicon, rotations, spaces = {}, {}, {}
    for l in spec.languages:
        lrng = _sub_seed(seed, "lang", l.code)
        if l.relabel:
            lexicon[l.code] = _pseudo_words(lrng, spec.concepts)
        else:
            lexicon[l.code] = [f"c{i}" for i in range(spec.concepts)]
        rot = random_rotation(lrng, spec.dim) if l.rotate else np.eye(spec.dim)
        rotations[l.code] = rot
        local = vecs + l.noise * lrng.normal(size=vecs.shape) / np.sqrt(spec.dim)
        spaces[l.code] = EmbeddingSpace(l.code, list(lexicon[l.code]), local @ rot.T)
    fam = SyntheticFamily(spec, seed, types, vecs, lexicon, rotations, spaces)
    for t in TYPES:
        ids = np.array([i for i, ty in enumerate(types) if ty == t])
        ranks = np.arange(1, len(ids) + 1, dtype=float)
        w = ranks ** -spec.zipf
        fam._by_type[t] = ids
        fam._weights[t] = w / w.sum()
    return fam
