"""Stage runners behind the CLI, and the end-to-end pipeline.

Inputs live in ``data_dir`` with these names (the layout ``nmtadapt synth``
writes)::

    {lang}.vec                          word vectors, text format
    dict.{lang}-{pivot}.train.txt       alignment dictionary (test.txt: held out)
    {split}.{a}-{b}.{a} / .{b}          parallel text, split in train/dev/test
    mono.{lang}.txt                     monolingual text of the new language

Every stage writes into ``work_dir`` and checks that the artifacts of the
stages before it exist, naming the missing one otherwise.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..corpus import MonoCorpus, ParallelCorpus, read_mono, read_parallel, read_sentences, write_sentences
from ..decoding import decode
from ..embeddings import align_to_pivot, evaluate_alignment, load_dictionary, load_vec
from ..errors import ConfigError, NmtAdaptError
from ..model import TranslationModel
from ..training import adapt, backtranslate, corpus_bleu, train_supervised
from ..vocabulary import build_vocab, extend_vocab, load_vocab, save_vocab
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .diagnostics import diagnose_representations

log = logging.getLogger(__name__)

STAGES = ("align", "build-vocab", "train", "extend", "adapt", "backtranslate", "evaluate", "diagnose")
PIPELINE = ("align", "build-vocab", "train", "extend", "adapt", "evaluate", "diagnose")


# ---------------------------------------------------------------------------
# paths and records
# ---------------------------------------------------------------------------

class Workspace:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.data = cfg.data_dir
        self.work = cfg.work_dir

    def transform(self, lang: str) -> Path:
        return self.work / "align" / f"{lang}.transform.npy"

    @property
    def vocab(self) -> Path:
        return self.work / "vocab" / "vocab.txt"

    @property
    def base(self) -> Path:
        return self.work / "models" / "base.ckpt"

    def extended(self, lang: str) -> Path:
        return self.work / "models" / f"extended.{lang}.ckpt"

    def adapted(self, lang: str, method: str) -> Path:
        return self.work / "models" / f"adapted.{lang}.{method}.ckpt"

    def report(self, name: str) -> Path:
        return self.work / "reports" / f"{name}.jsonl"

    def need(self, path: Path, what: str, stage: str) -> Path:
        if not path.exists():
            raise ConfigError(f"missing {what} ({path}); run the '{stage}' stage first")
        return path

    def record(self, name: str, rec: dict) -> None:
        path = self.report(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def parallel(self, split: str, pairs: Sequence[tuple[str, str]] | None = None) -> ParallelCorpus:
        out = ParallelCorpus()
        if pairs is None:
            base = self.cfg.require("base_langs")
            pairs = [(a, b) for a in base for b in base if a != b]
        for a, b in pairs:
            stem = self.data / f"{split}.{a}-{b}"
            src, tgt = Path(f"{stem}.{a}"), Path(f"{stem}.{b}")
            if src.exists() and tgt.exists():
                out = out + read_parallel(src, tgt, a, b)
        return out

    def mono(self, lang: str) -> MonoCorpus:
        return read_mono(self.need(self.data / f"mono.{lang}.txt", f"monolingual corpus for {lang!r}",
                                   "data"), lang)

    def space(self, lang: str, aligned: bool = True):
        space = load_vec(self.need(self.data / f"{lang}.vec", f"embeddings for {lang!r}", "data"), lang)
        if not aligned:
            return space
        w = np.load(self.need(self.transform(lang), f"aligned embeddings for {lang!r}", "align"))
        return space.aligned(w)


def _langs(cfg: RunConfig) -> list[str]:
    base = list(cfg.require("base_langs"))
    new = cfg.get("new_lang")
    return base + ([new] if new and new not in base else [])


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_align(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    pivot = cfg.require("pivot")
    langs = _langs(cfg)
    if pivot not in langs:
        langs.insert(0, pivot)
    spaces = {l: ws.space(l, aligned=False) for l in langs}
    dicts = {l: load_dictionary(ws.need(ws.data / f"dict.{l}-{pivot}.train.txt", f"{l}-{pivot} dictionary",
                                        "data"), l, pivot) for l in langs if l != pivot}
    aligned = align_to_pivot(spaces, pivot, dicts, method=cfg.get("align_method", "rcsls"),
                             k=cfg.get("align_k", 10), steps=cfg.get("align_steps", 50),
                             lr=cfg.get("align_lr", 0.1))
    out = {}
    for lang, sp in aligned.items():
        path = ws.transform(lang)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, sp.transform)
        test = ws.data / f"dict.{lang}-{pivot}.test.txt"
        if lang != pivot and test.exists():
            rep = evaluate_alignment(sp, aligned[pivot], load_dictionary(test, lang, pivot),
                                     method=cfg.get("align_method", "rcsls"), k=cfg.get("align_k", 10))
            rec = {"lang": lang, "pivot": pivot, **rep.as_record()}
            ws.record("align", rec)
            out[lang] = rec
    return {"stage": "align", "languages": sorted(aligned), "reports": out}


def stage_build_vocab(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    base = cfg.require("base_langs")
    train = ws.parallel("train")
    if not len(train):
        raise ConfigError(f"no base-language training files found in {ws.data}")
    corpora = {l: [p.src for p in train if p.src_lang == l] + [p.tgt for p in train if p.tgt_lang == l]
               for l in base}
    v = build_vocab(corpora, {l: ws.space(l) for l in base}, seed=cfg.seed)
    ws.vocab.parent.mkdir(parents=True, exist_ok=True)
    save_vocab(v, ws.vocab)
    return {"stage": "build-vocab", "size": len(v), "languages": list(v.langs)}


def _vocab_with_spaces(ws: Workspace):
    v = load_vocab(ws.need(ws.vocab, "vocabulary", "build-vocab"))
    spaces = {l: ws.space(l) for l in v.langs}
    return type(v)(v.tokens, v.embedding_matrix, v.frozen, spaces, v.seed)


def stage_train(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    v = _vocab_with_spaces(ws)
    m = TranslationModel(cfg.model_config(), v, freeze_embeddings=True, seed=cfg.seed)
    res = train_supervised(m, ws.parallel("train"), cfg.train_settings(), ws.parallel("dev") or None)
    for rec in res.log:
        ws.record("train", rec)
    ws.base.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.model, ws.base, step=res.best_step, extra={"best_dev_bleu": res.best_bleu})
    return {"stage": "train", "best_step": res.best_step, "best_dev_bleu": res.best_bleu}


def _base_model(ws: Workspace) -> TranslationModel:
    return load_checkpoint(ws.need(ws.base, "base model", "train")).model


def _extended_model(ws: Workspace, lang: str) -> TranslationModel:
    if ws.extended(lang).exists():
        return load_checkpoint(ws.extended(lang)).model
    m = _base_model(ws)
    return m.extend(extend_vocab(m.vocab, lang, ws.mono(lang).sentences, ws.space(lang)))


def stage_extend(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    lang = cfg.require("new_lang")
    m = _base_model(ws)
    before = len(m.vocab)
    m.extend(extend_vocab(m.vocab, lang, ws.mono(lang).sentences, ws.space(lang)))
    save_checkpoint(m, ws.extended(lang))
    return {"stage": "extend", "new_lang": lang, "added_tokens": len(m.vocab) - before}


def _new_lang_pairs(cfg: RunConfig, lang: str) -> list[tuple[str, str]]:
    base = cfg.require("base_langs")
    return [(b, lang) for b in base] + [(lang, b) for b in base]


def stage_adapt(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    plan = cfg.adaptation_plan()
    if not ws.base.exists():
        raise ConfigError(f"adaptation needs a trained base model ({ws.base}); run the 'train' stage first")
    m = _extended_model(ws, plan.new_lang)
    base = cfg.require("base_langs")
    dev = ws.parallel("dev", [(b, plan.new_lang) for b in base])
    parallel = ws.parallel("train", [(b, plan.new_lang) for b in base]) if plan.method == "supervised" else None
    mono = ws.mono(plan.new_lang) if plan.method != "supervised" else None
    out, rep = adapt(m, plan, mono, dev, cfg.train_settings(adapt=True), parallel)
    save_checkpoint(out, ws.adapted(plan.new_lang, plan.method), step=rep.best_step,
                    extra={"report": rep.as_record()})
    ws.record("adapt", rep.as_record())
    return {"stage": "adapt", **rep.as_record()}


def stage_backtranslate(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    lang = cfg.require("new_lang")
    m = _extended_model(ws, lang)
    pivots = cfg.get("pivot_langs") or cfg.require("base_langs")
    data, skipped = backtranslate(m, ws.mono(lang), pivots)
    out_dir = ws.work / "backtranslated"
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in pivots:
        pairs = [x for x in data if x.src_lang == p]
        write_sentences([x.src for x in pairs], out_dir / f"train.{p}-{lang}.{p}")
        write_sentences([x.tgt for x in pairs], out_dir / f"train.{p}-{lang}.{lang}")
    return {"stage": "backtranslate", "pairs": len(data), "skipped": skipped, "pivots": list(pivots)}


def stage_decode(cfg: RunConfig, input_path: str | Path, output_path: str | Path | None, src_lang: str,
                 tgt_lang: str, checkpoint: str | Path | None = None) -> list[list[str]]:
    ws = Workspace(cfg)
    path = Path(checkpoint) if checkpoint else ws.need(ws.base, "base model", "train")
    m = load_checkpoint(path).model
    sents = read_sentences(input_path)
    nonempty = [i for i, s in enumerate(sents) if s]
    hyps = decode(m, [sents[i] for i in nonempty], src_lang, cfg.decode_config(tgt_lang))
    out: list[list[str]] = [[] for _ in sents]
    for i, h in zip(nonempty, hyps):
        out[i] = h
    if output_path is not None:
        write_sentences(out, output_path)
    return out


def _models(ws: Workspace) -> list[tuple[str, Path]]:
    found = []
    if ws.base.exists():
        found.append(("base", ws.base))
    for p in sorted((ws.work / "models").glob("extended.*.ckpt")):
        found.append((f"blind.{p.name.split('.')[1]}", p))
    for p in sorted((ws.work / "models").glob("adapted.*.ckpt")):
        _, lang, method, _ = p.name.split(".")
        found.append((f"{method}.{lang}", p))
    return found


def format_table(rows: dict[str, dict[str, float]]) -> str:
    """Plain-text BLEU table: one row per model, one column per language pair."""
    cols = sorted({c for r in rows.values() for c in r})
    width = max([len(r) for r in rows] + [6])
    lines = [" " * width + "".join(f"{c:>10}" for c in cols)]
    for name, r in rows.items():
        lines.append(f"{name:<{width}}" + "".join(f"{r[c]:>10.2f}" if c in r else f"{'-':>10}" for c in cols))
    return "\n".join(lines)


def stage_evaluate(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    models = _models(ws)
    if not models:
        raise ConfigError(f"no models to evaluate in {ws.work / 'models'}; run the 'train' stage first")
    langs = _langs(cfg)
    pairs = [(a, b) for a in langs for b in langs if a != b]
    table: dict[str, dict[str, float]] = {}
    for name, path in models:
        m = load_checkpoint(path).model
        row = {}
        for a, b in pairs:
            if a not in m.vocab.langs or b not in m.vocab.langs:
                continue
            test = ws.parallel("test", [(a, b)])
            if not len(test):
                continue
            rep = corpus_bleu(m, test, cfg.get("beam_size", 4), cfg.get("collapse_duplicates", False))
            row[f"{a}-{b}"] = rep.bleu
            ws.record("bleu", {"model": name, "pair": f"{a}-{b}", **rep.as_record()})
        table[name] = row
    text = format_table(table)
    (ws.work / "reports").mkdir(parents=True, exist_ok=True)
    (ws.work / "reports" / "bleu_table.txt").write_text(text + "\n", encoding="utf-8")
    return {"stage": "evaluate", "table": table, "text": text}


def stage_diagnose(cfg: RunConfig) -> dict:
    ws = Workspace(cfg)
    m = _base_model(ws)
    dev = ws.parallel("dev")
    d = diagnose_representations(m, dev, seed=cfg.seed)
    ws.record("diagnostics", d.as_record())
    return {"stage": "diagnose", **d.as_record()}


RUNNERS: dict[str, Callable[[RunConfig], dict]] = {
    "align": stage_align, "build-vocab": stage_build_vocab, "train": stage_train, "extend": stage_extend,
    "adapt": stage_adapt, "backtranslate": stage_backtranslate, "evaluate": stage_evaluate,
    "diagnose": stage_diagnose,
}


def execute(cfg: RunConfig, stages: Sequence[str] = PIPELINE) -> list[dict]:
    unknown = [s for s in stages if s not in RUNNERS]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; choose from {', '.join(STAGES)}")
    # run in pipeline order whatever order they were requested in
    results = []
    for stage in [s for s in STAGES if s in stages]:
        log.info("stage %s", stage)
        results.append(RUNNERS[stage](cfg))
    return results


def run_pipeline(config_path: str | Path | None, stages: Sequence[str] = PIPELINE,
                 seed: int | None = None) -> int:
    """Run the configured stages; returns a process exit status."""
    try:
        cfg = load_config(config_path).with_overrides(seed=seed)
        results = execute(cfg, stages)
    except NmtAdaptError as e:
        log.error("%s", e)
        return e.exit_code
    for r in results:
        if r["stage"] == "evaluate":
            print(r["text"])
    return 0
