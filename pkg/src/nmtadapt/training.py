"""Learning procedures: supervised training and new-language adaptation.

Adaptation covers plain and denoising autoencoding (optionally with the
encoder frozen) on monolingual text of the new language, and one round of
backtranslation. Every run keeps the parameters that scored best on dev BLEU.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .corpus import Batch, MonoCorpus, Pair, ParallelCorpus, make_batches
from .decoding import DecodeConfig, blind_decode, decode
from .errors import ConfigError, DataError
from .model import TranslationModel
from .numerics import LrSchedule, Optimizer, backward
from .workbench.bleu import BleuReport, bleu

log = logging.getLogger(__name__)

METHODS = ("supervised", "denoise_ae", "frozen_ae", "frozen_denoise_ae", "backtranslate")
AE_METHODS = ("denoise_ae", "frozen_ae", "frozen_denoise_ae")


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    shuffle_n: int = 3
    word_dropout_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.shuffle_n < 0:
            raise ConfigError(f"shuffle_n must be >= 0, got {self.shuffle_n}")
        if not 0.0 <= self.word_dropout_p < 1.0:
            raise ConfigError(f"word_dropout_p must lie in [0, 1), got {self.word_dropout_p}")

    def apply(self, tokens: Sequence[str], rng: np.random.Generator) -> list[str]:
        out = word_dropout(tokens, self.word_dropout_p, rng)
        return shuffle_noise(out, self.shuffle_n, rng)


IDENTITY_NOISE = NoiseSpec(0, 0.0)


def shuffle_noise(tokens: Sequence, n: int, rng: np.random.Generator) -> list:
    """Local shuffle: sort positions by ``i + U[0, n+1)``, moving no token more than n."""
    tokens = list(tokens)
    if n <= 0 or len(tokens) < 2:
        return tokens
    keys = np.arange(len(tokens)) + rng.uniform(0.0, n + 1.0, len(tokens))
    return [tokens[i] for i in np.argsort(keys, kind="stable")]


def word_dropout(tokens: Sequence, p: float, rng: np.random.Generator) -> list:
    """Drop each token with probability p, always keeping at least the first survivor."""
    tokens = list(tokens)
    if p <= 0.0 or not tokens:
        return tokens
    keep = rng.random(len(tokens)) >= p
    if not keep.any():
        keep[0] = True
    return [t for t, k in zip(tokens, keep) if k]


# ---------------------------------------------------------------------------
# settings and plans
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    steps: int = 2000
    batch_budget: int = 1536
    accum_count: int = 1
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    max_grad_norm: float | None = 5.0
    schedule: LrSchedule = field(default_factory=LrSchedule)
    eval_every: int = 200
    dev_beam: int = 4
    dev_limit: int | None = None
    collapse_eval: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.accum_count < 1:
            raise ConfigError("accum_count must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class AdaptationPlan:
    method: str
    new_lang: str
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    pivot_langs: tuple[str, ...] = ()
    iterations: int = 1000
    freeze: frozenset | None = None  # None: the method's default
    selection: str = "dev-bleu"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown adaptation method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.freeze is None:
            # backtranslation trains with a frozen encoder unless told otherwise
            self.freeze = {"embeddings", "encoder"} if self.method == "backtranslate" else {"embeddings"}
        self.freeze = frozenset(self.freeze)
        unknown = self.freeze - {"embeddings", "encoder"}
        if unknown:
            raise ConfigError(f"unknown freeze targets {sorted(unknown)}")
        if self.method.startswith("frozen") and "encoder" not in self.freeze:
            self.freeze = self.freeze | {"encoder"}
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.selection != "dev-bleu":
            raise ConfigError(f"unsupported selection criterion {self.selection!r}")

    @property
    def effective_noise(self) -> NoiseSpec:
        if self.method in ("denoise_ae", "frozen_denoise_ae"):
            return self.noise
        return IDENTITY_NOISE


@dataclass
class TrainResult:
    model: TranslationModel
    log: list[dict] = field(default_factory=list)
    trajectory: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    best_bleu: float | None = None

    def dev_records(self) -> list[dict]:
        return [{"step": s, "dev_bleu": b} for s, b in self.trajectory]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def directions(data: ParallelCorpus) -> list[tuple[str, str]]:
    seen: dict[tuple[str, str], None] = {}
    for p in data.pairs:
        seen[(p.src_lang, p.tgt_lang)] = None
    return list(seen)


def translate_corpus(m: TranslationModel, data: ParallelCorpus, beam: int = 4,
                     collapse: bool = False) -> list[list[str]]:
    """Decode every pair's source in its own direction, keeping corpus order."""
    out: list[list[str] | None] = [None] * len(data)
    for src_lang, tgt_lang in directions(data):
        idx = [i for i, p in enumerate(data.pairs) if p.src_lang == src_lang and p.tgt_lang == tgt_lang]
        cfg = DecodeConfig(tgt_lang, beam_size=beam, collapse_duplicates=collapse)
        hyps = decode(m, [data.pairs[i].src for i in idx], src_lang, cfg)
        for i, h in zip(idx, hyps):
            out[i] = h
    return out  # type: ignore[return-value]


def corpus_bleu(m: TranslationModel, data: ParallelCorpus, beam: int = 4, collapse: bool = False) -> BleuReport:
    hyps = translate_corpus(m, data, beam, collapse)
    return bleu(hyps, [p.tgt for p in data.pairs])


def _dev_subset(dev: ParallelCorpus, limit: int | None) -> ParallelCorpus:
    if limit is None or len(dev) <= limit:
        return dev
    # evenly spaced picks keep every direction represented
    idx = np.linspace(0, len(dev) - 1, limit).round().astype(int)
    return ParallelCorpus([dev.pairs[i] for i in idx])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _batches(epoch_data: Callable[[int], ParallelCorpus], m: TranslationModel,
             s: TrainSettings) -> Iterator[Batch]:
    epoch = 0
    while True:
        bs = make_batches(epoch_data(epoch), m.vocab, s.batch_budget, s.seed, epoch)
        if not bs.batches:
            raise DataError("no training pair fits the batch budget")
        yield from bs
        epoch += 1


def _snapshot(m: TranslationModel) -> dict[str, np.ndarray]:
    return {n: a.copy() for n, a in m.state_dict().items()}


def run_training(m: TranslationModel, epoch_data: Callable[[int], ParallelCorpus], s: TrainSettings,
                 dev: ParallelCorpus | None = None, eval_initial: bool = False,
                 on_eval: Callable[[int, float, TranslationModel], None] | None = None) -> TrainResult:
    """Shared optimizer loop; ``epoch_data(e)`` supplies the pairs of epoch e."""
    result = TrainResult(m)
    if s.steps == 0 and not eval_initial:
        return result
    opt = Optimizer(m.trainable_parameters(), kind=s.optimizer, beta1=s.beta1, beta2=s.beta2,
                    weight_decay=s.weight_decay, no_decay=m.no_decay_parameter_names(),
                    max_grad_norm=s.max_grad_norm)
    dev = _dev_subset(dev, s.dev_limit) if dev is not None and len(dev) else None
    best_state = None

    def evaluate(step: int) -> None:
        nonlocal best_state
        score = corpus_bleu(m, dev, s.dev_beam, s.collapse_eval).bleu
        result.trajectory.append((step, score))
        result.log.append({"step": step, "dev_bleu": score})
        if result.best_bleu is None or score > result.best_bleu:
            result.best_bleu, result.best_step = score, step
            best_state = _snapshot(m)
            if on_eval is not None:
                on_eval(step, score, m)

    if dev is not None and eval_initial:
        evaluate(0)
    stream = _batches(epoch_data, m, s) if s.steps else iter(())
    for step in range(1, s.steps + 1):
        m.train()
        total, ntok = 0.0, 0
        for _ in range(s.accum_count):
            batch = next(stream)
            loss, n = m.loss(batch)
            if s.accum_count > 1:
                loss = loss * (1.0 / s.accum_count)
            backward(loss)
            total += loss.item()
            ntok += n
        lr = s.schedule(opt.step_count + 1)
        opt.step(lr)
        result.log.append({"step": step, "loss": total, "lr": lr, "tokens": ntok,
                           "grad_norm": opt.last_grad_norm})
        if not math.isfinite(total):
            raise DataError(f"training diverged at step {step}: loss {total}")
        if dev is not None and (step % s.eval_every == 0 or step == s.steps):
            evaluate(step)
    m.eval()
    if best_state is not None:
        m.load_state_dict(best_state)
    return result


def train_supervised(m: TranslationModel, data: ParallelCorpus, s: TrainSettings,
                     dev: ParallelCorpus | None = None, **kw) -> TrainResult:
    if not len(data):
        raise ConfigError("supervised training needs a non-empty parallel corpus")
    unknown = data.languages() - set(m.vocab.langs)
    if unknown:
        raise ConfigError(f"languages {sorted(unknown)} are not in the model vocabulary")
    return run_training(m, lambda epoch: data, s, dev, **kw)


def autoencoder_pairs(mono: MonoCorpus, noise: NoiseSpec, epoch: int) -> ParallelCorpus:
    """(noise(s), s) pairs; the noise is redrawn every epoch."""
    rng = np.random.default_rng([noise.seed, epoch])
    lang = mono.lang
    return ParallelCorpus([Pair(tuple(noise.apply(s, rng)), s, lang, lang) for s in mono.sentences])


def _apply_plan_freeze(m: TranslationModel, plan: AdaptationPlan) -> None:
    m.set_freeze(embeddings=m.freeze_embeddings or "embeddings" in plan.freeze,
                 encoder="encoder" in plan.freeze)


def train_autoencoder(m: TranslationModel, mono: MonoCorpus, plan: AdaptationPlan, s: TrainSettings,
                      dev: ParallelCorpus | None = None, **kw) -> TrainResult:
    if plan.new_lang not in m.vocab.langs:
        raise ConfigError(f"new language {plan.new_lang!r} is not in the model vocabulary; extend it first")
    if mono.lang != plan.new_lang:
        raise ConfigError(f"monolingual corpus is {mono.lang!r}, plan targets {plan.new_lang!r}")
    if not len(mono):
        raise ConfigError("autoencoder adaptation needs monolingual sentences")
    _apply_plan_freeze(m, plan)
    noise = plan.effective_noise
    s = _with_steps(s, plan.iterations)
    return run_training(m, lambda epoch: autoencoder_pairs(mono, noise, epoch), s, dev, **kw)


def backtranslate(m: TranslationModel, mono: MonoCorpus, pivots: Sequence[str],
                  beam: int = 1) -> tuple[ParallelCorpus, int]:
    """One round: blind-decode each new-language sentence into every pivot.

    Returns pairs (decoded pivot text -> original sentence) and the number of
    sentences skipped because decoding produced nothing.
    """
    pairs: list[Pair] = []
    skipped = 0
    for pivot in pivots:
        if pivot not in m.vocab.langs:
            raise ConfigError(f"pivot language {pivot!r} is not in the model vocabulary")
        if not len(mono):
            continue
        outs = blind_decode(m, mono.sentences, mono.lang, pivot, DecodeConfig(pivot, beam_size=beam))
        for src, tgt in zip(outs, mono.sentences):
            if not src:
                skipped += 1
                continue
            pairs.append(Pair(tuple(src), tgt, pivot, mono.lang))
    if skipped:
        log.warning("backtranslation skipped %d sentences with empty decodes", skipped)
    return ParallelCorpus(pairs), skipped


def _with_steps(s: TrainSettings, steps: int) -> TrainSettings:
    return replace(s, steps=steps)


@dataclass
class AdaptReport:
    method: str
    new_lang: str
    blind_bleu: float | None
    trajectory: list[tuple[int, float]]
    best_step: int
    best_bleu: float | None
    synthetic_pairs: int = 0
    skipped: int = 0

    def as_record(self) -> dict:
        return {"method": self.method, "new_lang": self.new_lang, "blind_bleu": self.blind_bleu,
                "best_step": self.best_step, "best_bleu": self.best_bleu,
                "trajectory": [list(t) for t in self.trajectory],
                "synthetic_pairs": self.synthetic_pairs, "skipped": self.skipped}


def adapt(m: TranslationModel, plan: AdaptationPlan, mono: MonoCorpus | None, dev: ParallelCorpus,
          s: TrainSettings, parallel: ParallelCorpus | None = None) -> tuple[TranslationModel, AdaptReport]:
    """Run one adaptation method on a copy of ``m`` and keep its dev-best state.

    ``dev`` holds pairs involving the new language. ``parallel`` is only used
    by the supervised method (real new-language data, an upper bound).
    """
    if dev is not None and len(dev) and plan.new_lang not in dev.languages():
        raise ConfigError(f"dev data does not involve the new language {plan.new_lang!r}")
    work = m.copy()
    s = _with_steps(s, plan.iterations)
    if plan.iterations == 0:
        blind = corpus_bleu(work.eval(), _dev_subset(dev, s.dev_limit), s.dev_beam, s.collapse_eval).bleu \
            if dev is not None and len(dev) else None
        return work, AdaptReport(plan.method, plan.new_lang, blind, [(0, blind)] if blind is not None else [],
                                 0, blind)
    synthetic = skipped = 0
    if plan.method in AE_METHODS:
        if mono is None:
            raise ConfigError(f"{plan.method} needs a monolingual corpus for {plan.new_lang!r}")
        res = train_autoencoder(work, mono, plan, s, dev, eval_initial=True)
    elif plan.method == "backtranslate":
        if mono is None:
            raise ConfigError("backtranslation needs a monolingual corpus")
        pivots = plan.pivot_langs or tuple(l for l in m.vocab.langs if l != plan.new_lang)
        data, skipped = backtranslate(work, mono, pivots)
        synthetic = len(data)
        if not synthetic:
            raise DataError("backtranslation produced no usable pairs")
        _apply_plan_freeze(work, plan)
        res = run_training(work, lambda epoch: data, s, dev, eval_initial=True)
    else:
        if parallel is None or not len(parallel):
            raise ConfigError("supervised adaptation needs parallel data for the new language")
        _apply_plan_freeze(work, plan)
        res = train_supervised(work, parallel, s, dev, eval_initial=True)
    blind = res.trajectory[0][1] if res.trajectory and res.trajectory[0][0] == 0 else None
    report = AdaptReport(plan.method, plan.new_lang, blind, res.trajectory, res.best_step, res.best_bleu,
                         synthetic, skipped)
    return work, report
