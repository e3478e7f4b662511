"""Merged multilingual vocabulary of language-prefixed full-word tokens.

A word ``bank`` of language ``en`` becomes the token ``en@bank``. Special
tokens (padding, sentence boundaries, unknown, and one ``<2xx>`` target tag
per language) carry no prefix and belong to every language mask.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingSpace
from .errors import ConfigError, ContractError, FormatError

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
BASE_SPECIALS = (PAD, BOS, EOS, UNK)
SEP = "@"
SPECIAL_ROW_STD = 0.1


def tag_token(lang: str) -> str:
    return f"<2{lang}>"


def escape_word(word: str) -> str:
    return word.replace("%", "%25").replace(SEP, "%40")


def unescape_word(text: str) -> str:
    return text.replace("%40", SEP).replace("%25", "%")


def prefixed(lang: str, word: str) -> str:
    return f"{lang}{SEP}{escape_word(word)}"


def split_token(token: str) -> tuple[str, str]:
    """``'en@bank' -> ('en', 'bank')``."""
    lang, _, rest = token.partition(SEP)
    return lang, unescape_word(rest)


def is_special(token: str) -> bool:
    return token in BASE_SPECIALS or (token.startswith("<2") and token.endswith(">"))


def _special_row(token: str, dim: int, seed: int) -> np.ndarray:
    # seeded per token so rows do not depend on build order
    digest = sum((i + 1) * ord(c) for i, c in enumerate(token))
    return np.random.default_rng([seed, digest]).normal(0.0, SPECIAL_ROW_STD, dim)


@dataclass(frozen=True)
class MultiVocab:
    tokens: tuple[str, ...]
    embedding_matrix: np.ndarray
    frozen: bool = True
    spaces: Mapping[str, EmbeddingSpace] = field(default_factory=dict, compare=False, repr=False)
    seed: int = 0

    def __post_init__(self):
        index: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise ContractError(f"duplicate vocabulary token {tok!r}")
            index[tok] = i
        if self.embedding_matrix.shape[0] != len(self.tokens):
            raise ContractError(f"{len(self.tokens)} tokens but {self.embedding_matrix.shape[0]} rows")
        special = np.array([is_special(t) for t in self.tokens], dtype=bool)
        lang_of: dict[str, str] = {}
        langs: list[str] = []
        token_lang = []
        for tok, sp in zip(self.tokens, special):
            if sp:
                token_lang.append("")
                if tok.startswith("<2") and tok not in BASE_SPECIALS:
                    lang = tok[2:-1]
                    if lang not in langs:
                        langs.append(lang)
                continue
            lang, word = split_token(tok)
            if not lang or not word:
                raise ContractError(f"token {tok!r} lacks a language prefix")
            lang_of[tok] = lang
            token_lang.append(lang)
            if lang not in langs:
                langs.append(lang)
        token_lang_arr = np.array(token_lang, dtype=object)
        masks = {lang: special | (token_lang_arr == lang) for lang in langs}
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "special_mask", special)
        object.__setattr__(self, "lang_of", lang_of)
        object.__setattr__(self, "langs", tuple(langs))
        object.__setattr__(self, "lang_masks", masks)

    # -- basic accessors --------------------------------------------------
    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def dim(self) -> int:
        return self.embedding_matrix.shape[1]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def tag_id(self, lang: str) -> int:
        tok = tag_token(lang)
        if tok not in self.index:
            raise ConfigError(f"language {lang!r} has no target tag in the vocabulary")
        return self.index[tok]

    def token_id(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def word_ids(self, words: Sequence[str], lang: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(prefixed(lang, w), unk) for w in words]

    def words_of(self, ids: Iterable[int]) -> list[str]:
        """Surface words for non-special ids; specials are dropped."""
        out = []
        for i in ids:
            tok = self.tokens[i]
            if not self.special_mask[i]:
                out.append(split_token(tok)[1])
        return out

    def lang_ids(self, lang: str) -> np.ndarray:
        return np.flatnonzero(lang_mask(self, lang) & ~self.special_mask)

    @property
    def word_row_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.special_mask)

    @property
    def special_row_ids(self) -> np.ndarray:
        return np.flatnonzero(self.special_mask)

    def emittable_mask(self, lang: str) -> np.ndarray:
        """Tokens a decoder may emit for ``lang``: its words and end-of-sentence."""
        m = lang_mask(self, lang) & ~self.special_mask
        m = m.copy()
        m[self.eos_id] = True
        return m


def lang_mask(v: MultiVocab, lang: str) -> np.ndarray:
    if lang not in v.lang_masks:
        raise ConfigError(f"unknown language {lang!r}; vocabulary has {', '.join(v.langs)}")
    return v.lang_masks[lang]


def _word_types(sentences: Iterable[Sequence[str]]) -> list[str]:
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    for sent in sentences:
        for w in sent:
            if w not in first:
                first[w] = len(first)
            counts[w] += 1
    return sorted(counts, key=lambda w: (-counts[w], first[w]))


def _hub_row(space: EmbeddingSpace, word: str) -> np.ndarray:
    v = space.lookup(word)
    return v / max(np.linalg.norm(v), 1e-12)


def build_vocab(corpora: Mapping[str, Iterable[Sequence[str]]], spaces: Mapping[str, EmbeddingSpace],
                frozen: bool = True, seed: int = 0) -> MultiVocab:
    """Union of per-language corpus word types, prefixed, with hub-space rows.

    Words missing from a language's space get its subword-fallback vector.
    """
    for lang in corpora:
        space = spaces.get(lang)
        if space is None or space.transform is None:
            raise ConfigError(f"language {lang!r} has no aligned embedding space; run alignment first")
    dim = next(iter(spaces.values())).dim
    langs = list(corpora)
    tokens = list(BASE_SPECIALS) + [tag_token(lang) for lang in langs]
    rows = [_special_row(t, dim, seed) for t in tokens]
    for lang in langs:
        for w in _word_types(corpora[lang]):
            tokens.append(prefixed(lang, w))
            rows.append(_hub_row(spaces[lang], w))
    return MultiVocab(tuple(tokens), np.vstack(rows), frozen=frozen,
                      spaces={lang: spaces[lang] for lang in langs}, seed=seed)


def extend_vocab(v: MultiVocab, new_lang: str, corpus: Iterable[Sequence[str]],
                 space: EmbeddingSpace) -> MultiVocab:
    """Append ``new_lang`` words after all existing ids.

    Only sound for frozen vocabularies: base rows must still live in the hub
    space for newly aligned vectors to be comparable to them.
    """
    if not v.frozen:
        raise ContractError("extend_vocab requires a frozen vocabulary: trained (unfrozen) word rows "
                            "have left the shared embedding space")
    if space.transform is None:
        raise ConfigError(f"language {new_lang!r} embedding space is not aligned into the hub")
    tokens = list(v.tokens)
    rows = [v.embedding_matrix]
    new_rows = []
    tag = tag_token(new_lang)
    if tag not in v.index:
        tokens.append(tag)
        new_rows.append(_special_row(tag, v.dim, v.seed))
    present = set(v.tokens)
    for w in _word_types(corpus):
        tok = prefixed(new_lang, w)
        if tok not in present:
            present.add(tok)
            tokens.append(tok)
            new_rows.append(_hub_row(space, w))
    if new_rows:
        rows.append(np.vstack(new_rows))
    spaces = dict(v.spaces)
    spaces[new_lang] = space
    return MultiVocab(tuple(tokens), np.vstack(rows), frozen=True, spaces=spaces, seed=v.seed)


def save_vocab(v: MultiVocab, manifest: str | Path, rows_path: str | Path | None = None) -> None:
    manifest = Path(manifest)
    manifest.write_text("".join(t + "\n" for t in v.tokens), encoding="utf-8")
    rows_path = Path(rows_path) if rows_path else manifest.with_suffix(".rows.npy")
    np.save(rows_path, v.embedding_matrix)


def load_vocab(manifest: str | Path, rows_path: str | Path | None = None, frozen: bool = True) -> MultiVocab:
    manifest = Path(manifest)
    tokens = tuple(manifest.read_text(encoding="utf-8").splitlines())
    rows_path = Path(rows_path) if rows_path else manifest.with_suffix(".rows.npy")
    rows = np.load(rows_path)
    if rows.shape[0] != len(tokens):
        raise FormatError(f"{manifest}: {len(tokens)} tokens but {rows_path} holds {rows.shape[0]} rows")
    return MultiVocab(tokens, rows, frozen=frozen)
