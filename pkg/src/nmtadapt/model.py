"""Transformer encoder-decoder over a merged multilingual vocabulary.

Pre-norm layers, Shaw-style relative positions on the self-attention keys,
one embedding matrix shared by encoder input, decoder input and (for the
softmax head) the output projection. Word rows of that matrix come from the
hub embedding space and can be frozen; special-token rows always train.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import (
    Tensor,
    concat,
    dropout,
    einsum,
    embedding,
    getitem,
    l2_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    no_grad,
    relu,
    reshape,
    softmax,
    sqrt,
    swapaxes,
    tsum,
)
from .vocabulary import MultiVocab

NEG = -1e9
HEAD_KINDS = ("softmax", "continuous")


@dataclass
class TransformerConfig:
    layers: int = 6
    model_dim: int = 300
    ff_dim: int = 1200
    heads: int = 6
    dropout: float = 0.2
    rel_pos_clip: int = 16
    head_kind: str = "softmax"
    label_smoothing: float = 0.1
    lambda_vmf: float = 0.2
    train_target_filter: bool = True
    output_gain: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        if min(self.layers, self.model_dim, self.ff_dim, self.heads) <= 0:
            raise ConfigError(f"model sizes must be positive: {self}")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.head_kind == "continuous" and self.model_dim <= 4:
            raise ConfigError("the von Mises-Fisher head needs model_dim > 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.rel_pos_clip < 0:
            raise ConfigError("rel_pos_clip must be >= 0")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def as_dict(self) -> dict:
        return asdict(self)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smoothed_targets(targets: np.ndarray, vocab_size: int, smoothing: float, pad_id: int | None,
                     allowed: np.ndarray | None = None, dtype=np.float64) -> np.ndarray:
    """Target distribution: 1-eps on the gold token, eps spread over the rest.

    The rest excludes the gold token, padding, and anything outside ``allowed``.
    """
    n = targets.shape[0]
    support = np.ones((n, vocab_size), dtype=bool) if allowed is None else np.broadcast_to(allowed, (n, vocab_size)).copy()
    if pad_id is not None:
        support[:, pad_id] = False
    support[np.arange(n), targets] = False
    q = np.zeros((n, vocab_size), dtype=dtype)
    if smoothing > 0:
        count = support.sum(axis=1, keepdims=True)
        q = np.where(support, smoothing / np.maximum(count, 1), 0.0).astype(dtype)
        gold = np.where(count[:, 0] > 0, 1.0 - smoothing, 1.0)
    else:
        gold = np.ones(n)
    q[np.arange(n), targets] = gold
    return q


def nll_loss(logp: Tensor, targets: np.ndarray, smoothing: float = 0.1, pad_id: int | None = 0,
             allowed: np.ndarray | None = None, relative: bool = True) -> Tensor:
    """Token-averaged label-smoothed cross entropy over non-pad positions.

    ``logp`` is (N, V) log-probabilities. With ``relative`` the entropy of the
    smoothed target is subtracted, so a perfect fit scores 0 for any smoothing.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    keep = np.ones(targets.shape[0], dtype=bool) if pad_id is None else targets != pad_id
    if not keep.any():
        raise ContractError("nll_loss: every target position is padding")
    rows = np.flatnonzero(keep)
    lp = getitem(logp, rows) if len(rows) != logp.shape[0] else logp
    al = None if allowed is None else (allowed[rows] if np.ndim(allowed) == 2 else allowed)
    q = smoothed_targets(targets[rows], logp.shape[1], smoothing, pad_id, al, dtype=logp.dtype)
    # masked-out log-probs are huge negatives; zero weight keeps them out
    ce = -tsum(lp * q) / float(len(rows))
    if relative:
        qs = q[q > 0]
        ce = ce + float(np.sum(qs * np.log(qs))) / len(rows)
    return ce


def vmf_log_normalizer(kappa: Tensor, m: int) -> Tensor:
    """Bounded approximation of -log C_m(kappa) for the vMF density on S^{m-1}."""
    v = m / 2.0 - 1.0
    root = sqrt(kappa * kappa + (v + 1.0) ** 2)
    return root - (v - 1.0) * log(root + (v - 1.0))


def vmf_loss(pred: Tensor, target: np.ndarray, lambda_vmf: float = 0.2, eps: float = 1e-8) -> Tensor:
    """Mean vMF negative log-likelihood with the dot-product regularizer.

    ``pred`` is (N, m); ``target`` holds unit rows and receives no gradient.
    The concentration is ``||pred||``, floored by ``eps`` inside the root.
    """
    m = pred.shape[-1]
    kappa = l2_norm(pred, axis=-1, keepdims=False, eps=eps)
    dot = tsum(pred * Tensor(np.asarray(target, dtype=pred.dtype)), axis=-1)
    per = vmf_log_normalizer(kappa, m) - dot * lambda_vmf
    return tsum(per) / float(pred.shape[0])


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def relative_index(tq: int, tk: int, clip: int, offset: int = 0) -> np.ndarray:
    """Clipped key-minus-query distances shifted into [0, 2*clip]."""
    q = np.arange(tq)[:, None] + offset
    k = np.arange(tk)[None, :]
    return np.clip(k - q, -clip, clip) + clip


def rel_attention(q: Tensor, k: Tensor, v: Tensor, key_pad: np.ndarray | None,
                  rel_k: Tensor | None = None, clip: int = 0, causal: bool = False,
                  q_offset: int = 0) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with optional relative-position keys.

    q: (B, H, Tq, dh); k, v: (B, H, Tk, dh); key_pad: (B, Tk) true at padding.
    Returns the context (B, H, Tq, dh) and the attention weights.
    """
    dh = q.shape[-1]
    tq, tk = q.shape[-2], k.shape[-2]
    logits = matmul(q, swapaxes(k, -1, -2))
    if rel_k is not None:
        rel = embedding(rel_k, relative_index(tq, tk, clip, q_offset))
        logits = logits + einsum("bhtd,tsd->bhts", q, rel)
    logits = logits * (1.0 / math.sqrt(dh))
    block = np.zeros((1, 1, tq, tk), dtype=bool)
    if key_pad is not None:
        block = block | key_pad[:, None, None, :]
    if causal:
        future = np.arange(tk)[None, :] > (np.arange(tq)[:, None] + q_offset)
        block = block | future[None, None]
    if block.any():
        logits = logits + Tensor(np.where(block, NEG, 0.0).astype(logits.dtype))
    w = softmax(logits, axis=-1)
    return matmul(w, v), w


@dataclass
class EncoderStates:
    states: Tensor               # (B, S, d)
    pad_mask: np.ndarray         # (B, S) true at padding
    cache: dict = field(default_factory=dict, repr=False)

    def select(self, rows: np.ndarray) -> "EncoderStates":
        rows = np.asarray(rows, dtype=np.int64)
        cache = {k: Tensor(val.data[rows]) for k, val in self.cache.items()}
        return EncoderStates(Tensor(self.states.data[rows]), self.pad_mask[rows], cache)

    def pooled(self, skip_tag: bool = False) -> np.ndarray:
        """Mean over non-pad positions; ``skip_tag`` also leaves out column 0."""
        keep = (~self.pad_mask).astype(self.states.data.dtype)[..., None]
        if skip_tag:
            keep = keep.copy()
            keep[:, 0] = 0.0
        return (self.states.data * keep).sum(axis=1) / np.maximum(keep.sum(axis=1), 1.0)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def _hash_arrays(arrays: Iterable[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class TranslationModel:
    """Encoder-decoder with freeze controls and a softmax or continuous head."""

    def __init__(self, config: TransformerConfig, vocab: MultiVocab, freeze_embeddings: bool = True,
                 freeze_encoder: bool = False, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.freeze_embeddings = freeze_embeddings
        self.freeze_encoder = freeze_encoder
        self.training = False
        self.rng = np.random.default_rng([seed, 1])
        self.params: dict[str, Tensor] = {}
        init = np.random.default_rng([seed, 0])
        d, ff, dt = config.model_dim, config.ff_dim, config.np_dtype
        if vocab.dim != d:
            raise ConfigError(f"vocabulary rows have dim {vocab.dim} but model_dim is {d}")

        def add(name, arr):
            self.params[name] = Tensor(np.asarray(arr, dtype=dt), requires_grad=True, name=name)

        add("emb.word_rows", vocab.embedding_matrix[vocab.word_row_ids])
        add("emb.special_rows", vocab.embedding_matrix[vocab.special_row_ids])
        self._build_perm()
        dh = d // config.heads
        nrel = 2 * config.rel_pos_clip + 1
        for side in ("enc", "dec"):
            for i in range(config.layers):
                p = f"{side}.{i}"
                add(f"{p}.self.wqkv", glorot(init, d, d, (d, 3 * d)))
                add(f"{p}.self.bqkv", np.zeros(3 * d))
                add(f"{p}.self.wo", glorot(init, d, d))
                add(f"{p}.self.bo", np.zeros(d))
                add(f"{p}.self.rel", glorot(init, nrel, dh, (nrel, dh)))
                lns = ("ln1", "ln2", "ln3") if side == "dec" else ("ln1", "ln2")
                for ln in lns:
                    add(f"{p}.{ln}.g", np.ones(d))
                    add(f"{p}.{ln}.b", np.zeros(d))
                if side == "dec":
                    add(f"{p}.cross.wq", glorot(init, d, d))
                    add(f"{p}.cross.bq", np.zeros(d))
                    add(f"{p}.cross.wkv", glorot(init, d, d, (d, 2 * d)))
                    add(f"{p}.cross.bkv", np.zeros(2 * d))
                    add(f"{p}.cross.wo", glorot(init, d, d))
                    add(f"{p}.cross.bo", np.zeros(d))
                add(f"{p}.ff.w1", glorot(init, d, ff))
                add(f"{p}.ff.b1", np.zeros(ff))
                add(f"{p}.ff.w2", glorot(init, ff, d))
                add(f"{p}.ff.b2", np.zeros(d))
            add(f"{side}.ln.g", np.ones(d))
            add(f"{side}.ln.b", np.zeros(d))
        if config.head_kind == "softmax":
            # small output gain keeps untrained predictions close to uniform
            self.params["dec.ln.g"].data[:] = config.output_gain
        else:
            add("head.ln.g", np.ones(d))
            add("head.ln.b", np.zeros(d))
            add("head.w", glorot(init, d, d))
            add("head.b", np.zeros(d))
        self.apply_freeze()

    # -- parameter bookkeeping ----------------------------------------------
    def _build_perm(self) -> None:
        v = self.vocab
        perm = np.empty(len(v), dtype=np.int64)
        w, s = v.word_row_ids, v.special_row_ids
        perm[w] = np.arange(len(w))
        perm[s] = len(w) + np.arange(len(s))
        self._perm = perm

    def apply_freeze(self) -> None:
        for name, p in self.params.items():
            frozen = (name == "emb.word_rows" and self.freeze_embeddings) or \
                     (name.startswith("enc.") and self.freeze_encoder)
            p.requires_grad = not frozen
            if frozen:
                p.grad = None

    def set_freeze(self, embeddings: bool | None = None, encoder: bool | None = None) -> None:
        if embeddings is not None:
            self.freeze_embeddings = embeddings
        if encoder is not None:
            self.freeze_encoder = encoder
        self.apply_freeze()

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def no_decay_parameter_names(self) -> frozenset:
        # Embedding rows double as continuous-head targets. Under Adam, L2 decay on a row
        # that gets no gradient (</s> is never an input) drives it to zero and the target
        # direction with it.
        return frozenset({"emb.word_rows", "emb.special_rows"})

    def encoder_parameter_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("enc.")]

    def parameter_hash(self, names: Iterable[str] | None = None) -> str:
        names = sorted(self.params) if names is None else list(names)
        return _hash_arrays(self.params[n].data for n in names)

    def train(self) -> "TranslationModel":
        self.training = True
        return self

    def eval(self) -> "TranslationModel":
        self.training = False
        return self

    def copy(self) -> "TranslationModel":
        other = copy.copy(self)
        other.params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)
                        for n, p in self.params.items()}
        other.rng = copy.deepcopy(self.rng)
        other.config = copy.deepcopy(self.config)
        return other

    def embedding_matrix(self) -> Tensor:
        """Token-id-ordered shared embedding matrix, built from its parts."""
        table = concat([self.params["emb.word_rows"], self.params["emb.special_rows"]], axis=0)
        return embedding(table, self._perm)

    def extend(self, vocab: MultiVocab) -> "TranslationModel":
        """Grow the embedding to an extended vocabulary, in place.

        Existing rows keep their values. New word rows come from the new
        vocabulary's hub vectors; a new target tag starts at the mean of the
        existing tag rows.
        """
        old = self.vocab
        if vocab.tokens[: len(old)] != old.tokens:
            raise ContractError("extended vocabulary must keep every existing token id")
        if not self.freeze_embeddings:
            raise ContractError("cannot extend a model whose word embeddings were trained: "
                                "its rows no longer live in the shared embedding space")
        dt = self.config.np_dtype
        new_ids = np.arange(len(old), len(vocab))
        new_words = [i for i in new_ids if not vocab.special_mask[i]]
        new_specials = [i for i in new_ids if vocab.special_mask[i]]
        words = self.params["emb.word_rows"]
        specials = self.params["emb.special_rows"]
        if new_words:
            words.data = np.vstack([words.data, vocab.embedding_matrix[new_words].astype(dt)])
        if new_specials:
            tag_rows = [self._perm[i] - len(old.word_row_ids) for i in old.special_row_ids
                        if old.tokens[i].startswith("<2")]
            base = specials.data[tag_rows].mean(axis=0) if tag_rows else np.zeros(self.config.model_dim)
            specials.data = np.vstack([specials.data, np.tile(base.astype(dt), (len(new_specials), 1))])
        words.grad = specials.grad = None
        self.vocab = vocab
        self._build_perm()
        return self

    # -- building blocks --------------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self._p(prefix + ".g"), self._p(prefix + ".b"))

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.config.dropout, self.rng, self.training)

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        h = self.config.heads
        return swapaxes(reshape(x, (b, t, h, -1)), 1, 2)

    def _merge(self, x: Tensor) -> Tensor:
        b, _, t, _ = x.shape
        return reshape(swapaxes(x, 1, 2), (b, t, self.config.model_dim))

    def _self_attention(self, x: Tensor, prefix: str, key_pad, causal: bool) -> Tensor:
        d = self.config.model_dim
        qkv = matmul(x, self._p(prefix + ".wqkv")) + self._p(prefix + ".bqkv")
        q = self._heads(getitem(qkv, (Ellipsis, slice(0, d))))
        k = self._heads(getitem(qkv, (Ellipsis, slice(d, 2 * d))))
        v = self._heads(getitem(qkv, (Ellipsis, slice(2 * d, 3 * d))))
        ctx, _ = rel_attention(q, k, v, key_pad, self._p(prefix + ".rel"), self.config.rel_pos_clip, causal)
        return matmul(self._merge(ctx), self._p(prefix + ".wo")) + self._p(prefix + ".bo")

    def _cross_kv(self, enc: EncoderStates, prefix: str) -> tuple[Tensor, Tensor]:
        d = self.config.model_dim
        if prefix in enc.cache:
            kv = enc.cache[prefix]
        else:
            kv = matmul(enc.states, self._p(prefix + ".wkv")) + self._p(prefix + ".bkv")
            if not self.training:
                enc.cache[prefix] = kv
        return (self._heads(getitem(kv, (Ellipsis, slice(0, d)))),
                self._heads(getitem(kv, (Ellipsis, slice(d, 2 * d)))))

    def prime_cache(self, enc: EncoderStates) -> None:
        """Precompute cross-attention keys and values for repeated decode steps."""
        for i in range(self.config.layers):
            self._cross_kv(enc, f"dec.{i}.cross")

    def _cross_attention(self, x: Tensor, enc: EncoderStates, prefix: str) -> Tensor:
        q = self._heads(matmul(x, self._p(prefix + ".wq")) + self._p(prefix + ".bq"))
        k, v = self._cross_kv(enc, prefix)
        ctx, _ = rel_attention(q, k, v, enc.pad_mask)
        return matmul(self._merge(ctx), self._p(prefix + ".wo")) + self._p(prefix + ".bo")

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        h = relu(matmul(x, self._p(prefix + ".w1")) + self._p(prefix + ".b1"))
        return matmul(self._drop(h), self._p(prefix + ".w2")) + self._p(prefix + ".b2")

    def _embed(self, ids: np.ndarray, table: Tensor | None = None) -> Tensor:
        table = self.embedding_matrix() if table is None else table
        x = embedding(table, ids) * math.sqrt(self.config.model_dim)
        return self._drop(x)

    # -- public forward passes ----------------------------------------------
    def encode(self, src: np.ndarray, table: Tensor | None = None) -> EncoderStates:
        src = np.asarray(src, dtype=np.int64)
        if src.ndim == 1:
            src = src[None]
        pad = src == self.vocab.pad_id
        x = self._embed(src, table)
        for i in range(self.config.layers):
            p = f"enc.{i}"
            x = x + self._drop(self._self_attention(self._ln(x, p + ".ln1"), p + ".self", pad, False))
            x = x + self._drop(self._ff(self._ln(x, p + ".ln2"), p + ".ff"))
        return EncoderStates(self._ln(x, "enc.ln"), pad)

    def decoder_hidden(self, enc: EncoderStates, prefix: np.ndarray, table: Tensor | None = None) -> Tensor:
        prefix = np.asarray(prefix, dtype=np.int64)
        pad = prefix == self.vocab.pad_id
        x = self._embed(prefix, table)
        for i in range(self.config.layers):
            p = f"dec.{i}"
            x = x + self._drop(self._self_attention(self._ln(x, p + ".ln1"), p + ".self", pad, True))
            x = x + self._drop(self._cross_attention(self._ln(x, p + ".ln2"), enc, p + ".cross"))
            x = x + self._drop(self._ff(self._ln(x, p + ".ln3"), p + ".ff"))
        return self._ln(x, "dec.ln")

    def output_logits(self, h: Tensor, table: Tensor | None = None) -> Tensor:
        table = self.embedding_matrix() if table is None else table
        return matmul(h, table.T)

    def continuous_output(self, h: Tensor) -> Tensor:
        return matmul(self._ln(h, "head.ln"), self._p("head.w")) + self._p("head.b")

    def decode_step(self, enc: EncoderStates, prefix: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Scores for the token following ``prefix`` (B, T).

        Softmax head: (B, V) log-probabilities, restricted to ``mask`` when
        given. Continuous head: (B, d) predicted vectors.
        """
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[None]
        if prefix.shape[-1] == 0:
            raise ContractError("decode_step needs a prefix starting with the bos token")
        if np.any(prefix[:, 0] != self.vocab.bos_id):
            raise ContractError("decode prefixes must begin with the bos token")
        h = self.decoder_hidden(enc, prefix)
        last = getitem(h, (slice(None), -1))
        if self.config.head_kind == "continuous":
            return self.continuous_output(last)
        logits = self.output_logits(last)
        if mask is not None:
            logits = logits + Tensor(np.where(mask, 0.0, -np.inf).astype(logits.dtype))
        return log_softmax(logits, axis=-1)

    def target_masks(self, langs: Iterable[str]) -> np.ndarray:
        """Per-row training support: target-language words plus specials."""
        v = self.vocab
        return np.stack([v.lang_masks[l] for l in langs])

    def loss(self, batch) -> tuple[Tensor, int]:
        """Token-normalized training loss of one batch and its target count."""
        table = self.embedding_matrix()
        enc = self.encode(batch.src, table)
        dec_in, gold = batch.tgt[:, :-1], batch.tgt[:, 1:]
        h = self.decoder_hidden(enc, dec_in, table)
        b, t, d = h.shape
        flat_gold = gold.reshape(-1)
        keep = flat_gold != self.vocab.pad_id
        ntok = int(keep.sum())
        hf = reshape(h, (b * t, d))
        if self.config.head_kind == "continuous":
            rows = np.flatnonzero(keep)
            pred = self.continuous_output(getitem(hf, rows))
            e = self.vocab_unit_rows(table.data)[flat_gold[rows]]
            return vmf_loss(pred, e, self.config.lambda_vmf), ntok
        logits = self.output_logits(hf, table)
        allowed = None
        if self.config.train_target_filter and batch.tgt_langs:
            allowed = np.repeat(self.target_masks(batch.tgt_langs), t, axis=0)
            logits = logits + Tensor(np.where(allowed, 0.0, NEG).astype(logits.dtype))
        logp = log_softmax(logits, axis=-1)
        loss = nll_loss(logp, flat_gold, self.config.label_smoothing, self.vocab.pad_id, allowed)
        return loss, ntok

    @staticmethod
    def vocab_unit_rows(matrix: np.ndarray) -> np.ndarray:
        return matrix / np.maximum(np.linalg.norm(matrix, axis=1, keepdims=True), 1e-12)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ContractError(f"state is missing parameters: {sorted(missing)[:5]}")
        for n, p in self.params.items():
            a = arrays[n]
            if a.shape != p.data.shape and n not in ("emb.word_rows", "emb.special_rows"):
                raise ContractError(f"parameter {n}: shape {a.shape} does not match {p.data.shape}")
            p.data = np.array(a, dtype=self.config.np_dtype)


def perplexity(m: TranslationModel, batch) -> float:
    """exp of the unsmoothed, unfiltered token cross entropy."""
    with no_grad():
        enc = m.encode(batch.src)
        h = m.decoder_hidden(enc, batch.tgt[:, :-1])
        b, t, d = h.shape
        logp = log_softmax(m.output_logits(reshape(h, (b * t, d))), axis=-1)
        ce = nll_loss(logp, batch.tgt[:, 1:].reshape(-1), 0.0, m.vocab.pad_id, relative=False)
    return float(np.exp(ce.data))
