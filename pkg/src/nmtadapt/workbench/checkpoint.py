"""Versioned single-file checkpoints for a model, its vocabulary and optimizer.

Layout::

    MAGIC (8 bytes) | version (u32 LE) | header length (u64 LE) | header JSON
    | raw little-endian tensor payload | sha256 of everything before it

The header is JSON with sorted keys and holds the model config, vocabulary
tokens, embedding-space metadata, optimizer settings, the training step and
an index of (name, dtype, shape, offset) for every tensor in the payload.
Tensors are written in header order, so identical state gives identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..embeddings import EmbeddingSpace
from ..errors import FormatError, IntegrityError
from ..model import TransformerConfig, TranslationModel
from ..numerics import Optimizer
from ..vocabulary import MultiVocab

MAGIC = b"NMTACKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class Checkpoint:
    model: TranslationModel
    optimizer: Optimizer | None
    step: int
    extra: dict


def _tensor_entries(m: TranslationModel, opt: Optimizer | None) -> list[tuple[str, np.ndarray]]:
    items = [(f"model/{n}", a) for n, a in sorted(m.state_dict().items())]
    items.append(("vocab/rows", m.vocab.embedding_matrix))
    for lang in sorted(m.vocab.spaces):
        sp = m.vocab.spaces[lang]
        items.append((f"space/{lang}/vectors", sp.vectors))
        if sp.transform is not None:
            items.append((f"space/{lang}/transform", sp.transform))
    if opt is not None:
        items += [(f"opt/{n}", a) for n, a in sorted(opt.state_arrays().items())]
    return items


def encode_checkpoint(m: TranslationModel, opt: Optimizer | None = None, step: int = 0,
                      extra: dict | None = None) -> bytes:
    tensors = _tensor_entries(m, opt)
    index, chunks, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    spaces = {lang: {"words": list(sp.words), "nmin": sp.nmin, "nmax": sp.nmax, "buckets": sp.buckets}
              for lang, sp in sorted(m.vocab.spaces.items())}
    header = {
        "config": m.config.as_dict(),
        "freeze": {"embeddings": m.freeze_embeddings, "encoder": m.freeze_encoder},
        "seed": m.seed,
        "step": int(step),
        "vocab": {"tokens": list(m.vocab.tokens), "frozen": m.vocab.frozen, "seed": m.vocab.seed},
        "spaces": spaces,
        "optimizer": None if opt is None else {
            "kind": opt.kind, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "weight_decay": opt.weight_decay, "max_grad_norm": opt.max_grad_norm,
            "step_count": opt.step_count},
        "tensors": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(m: TranslationModel, path: str | Path, opt: Optimizer | None = None, step: int = 0,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    data = encode_checkpoint(m, opt, step, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST:
        raise IntegrityError(f"{source}: truncated checkpoint ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: not a checkpoint file (bad magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{source}: checkpoint format version {version}, this build reads version {VERSION}")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{source}: checksum mismatch, the file is corrupt or truncated")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: unreadable header: {e}") from None
    payload = memoryview(body)[_PREFIX.size + hlen:]
    arrays = {}
    for t in header["tensors"]:
        if t["offset"] + t["nbytes"] > len(payload):
            raise IntegrityError(f"{source}: tensor {t['name']} runs past the end of the payload")
        raw = payload[t["offset"]: t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        arrays[t["name"]] = arr.astype(arr.dtype.newbyteorder("="))

    spaces = {}
    for lang, meta in header["spaces"].items():
        sp = EmbeddingSpace(lang, meta["words"], arrays[f"space/{lang}/vectors"], None,
                            meta["nmin"], meta["nmax"], meta["buckets"])
        tr = arrays.get(f"space/{lang}/transform")
        spaces[lang] = sp.aligned(tr) if tr is not None else sp
    vmeta = header["vocab"]
    vocab = MultiVocab(tuple(vmeta["tokens"]), arrays["vocab/rows"], frozen=vmeta["frozen"],
                       spaces=spaces, seed=vmeta["seed"])
    cfg = TransformerConfig(**header["config"])
    fr = header["freeze"]
    m = TranslationModel(cfg, vocab, freeze_embeddings=fr["embeddings"], freeze_encoder=fr["encoder"],
                         seed=header["seed"])
    m.load_state_dict({k[len("model/"):]: a for k, a in arrays.items() if k.startswith("model/")})
    m.eval()
    opt = None
    if header["optimizer"] is not None:
        o = dict(header["optimizer"])
        step_count = o.pop("step_count")
        opt = Optimizer(m.trainable_parameters(), no_decay=m.no_decay_parameter_names(), **o)
        opt.step_count = step_count
        opt.load_state_arrays({k[len("opt/"):]: a for k, a in arrays.items() if k.startswith("opt/")})
    return Checkpoint(m, opt, header["step"], header.get("extra", {}))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: checkpoint not found") from None
    return decode_checkpoint(data, str(path))
