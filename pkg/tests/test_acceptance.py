"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk benchmark is the default synthetic family (two base languages
``xa``/``xb``, a near new language ``xn`` and a word-order-divergent ``xd``)
run through the same stage functions the CLI uses, with the bundled ``desk``
configuration. Models are trained once per module and shared by criteria 4-6,
so the decoding audit of criterion 8 sees every decode they perform.
"""
import time
from functools import cached_property

import numpy as np
import pytest

from gradcheck import check
from nmtadapt import decoding
from nmtadapt.corpus import ParallelCorpus, batch_of
from nmtadapt.decoding import DecodeConfig, decode
from nmtadapt.embeddings import EmbeddingSpace, evaluate_alignment, procrustes, rcsls_align
from nmtadapt.errors import FormatError
from nmtadapt.model import TransformerConfig, TranslationModel, nll_loss, rel_attention, vmf_loss
from nmtadapt.numerics import (
    LrSchedule,
    Optimizer,
    Tensor,
    backward,
    embedding,
    layer_norm,
    log_softmax,
    no_grad,
    tsum,
)
from nmtadapt.synthbench import FamilySpec, LanguageSpec, generate_family
from nmtadapt.training import corpus_bleu, shuffle_noise, train_supervised
from nmtadapt.vocabulary import build_vocab, extend_vocab
from nmtadapt.workbench import checkpoint as ck
from nmtadapt.workbench import pipeline
from nmtadapt.workbench.bleu import bleu
from nmtadapt.workbench.config import load_bundled

from test_bleu import CASES as BLEU_CASES
from test_numerics import BINARY_CASES, UNARY_CASES

pytestmark = pytest.mark.slow

BASE = ("xa", "xb")
NEW = ("xn", "xd")
AE_METHODS = ("denoise_ae", "frozen_ae", "frozen_denoise_ae")
SEEDS = range(20)


class Desk:
    """Lazily trained desk-scale models over one synthetic family."""

    def __init__(self, root):
        self.data = root / "data"
        generate_family(FamilySpec(), seed=0).write(self.data)
        self.cfg = load_bundled("desk").with_overrides(data_dir=str(self.data), work_dir=str(root / "work"))
        self.ws = pipeline.Workspace(self.cfg)
        self._adapted = {}
        self._scores = {}

    @cached_property
    def base(self) -> TranslationModel:
        pipeline.execute(self.cfg, ["align", "build-vocab", "train"])
        return ck.load_checkpoint(self.ws.base).model

    def new_cfg(self, lang, **kw):
        return self.cfg.with_overrides(new_lang=lang, **kw)

    def extended(self, lang) -> TranslationModel:
        self.base
        if not self.ws.transform(lang).exists():
            pipeline.stage_align(self.new_cfg(lang))
        if not self.ws.extended(lang).exists():
            pipeline.stage_extend(self.new_cfg(lang))
        return ck.load_checkpoint(self.ws.extended(lang)).model

    def adapted(self, lang, method) -> TranslationModel:
        if (lang, method) not in self._adapted:
            self.extended(lang)
            pipeline.stage_adapt(self.new_cfg(lang, adapt_method=method))
            self._adapted[lang, method] = ck.load_checkpoint(self.ws.adapted(lang, method)).model
        return self._adapted[lang, method]

    def test(self, src, tgt) -> ParallelCorpus:
        return self.ws.parallel("test", [(src, tgt)])

    def score(self, name, m, src, tgt, collapse=False) -> float:
        key = (name, src, tgt, collapse)
        if key not in self._scores:
            self._scores[key] = corpus_bleu(m, self.test(src, tgt), self.cfg.get("beam_size"), collapse).bleu
        return self._scores[key]

    def into_new(self, lang, method) -> dict[str, float]:
        """Test BLEU base -> ``lang`` per base source, for a method or ``blind``."""
        m = self.extended(lang) if method == "blind" else self.adapted(lang, method)
        return {b: self.score(f"{method}.{lang}", m, b, lang) for b in BASE}


@pytest.fixture(scope="module", autouse=True)
def _fresh_audit():
    decoding.audit.reset()


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return Desk(tmp_path_factory.mktemp("desk"))


def _fmt(d):
    return " ".join(f"{k}={v:.1f}" for k, v in d.items())


# -- 1 ---------------------------------------------------------------------------

def _rel_attention_case(rng, seed):
    b, h, t, dh, clip = 2, 2, int(rng.integers(2, 5)), 3, 2
    pad = np.zeros((b, t), dtype=bool)
    pad[1, -1] = True
    arrays = [rng.normal(size=(b, h, t, dh)) for _ in range(3)] + [rng.normal(size=(2 * clip + 1, dh))]
    w = rng.normal(size=(b, h, t, dh))

    def build(ts):
        ctx, _ = rel_attention(ts[0], ts[1], ts[2], pad, ts[3], clip, causal=bool(seed % 2))
        return tsum(ctx * Tensor(w))
    return build, arrays


def _nll_case(rng, seed):
    n, v = int(rng.integers(2, 6)), int(rng.integers(4, 9))
    targets = rng.integers(0, v, n)
    targets[0] = 1
    return (lambda ts: nll_loss(log_softmax(ts[0]), targets, 0.1, pad_id=0)), [rng.normal(size=(n, v))]


def _vmf_case(rng, seed):
    n, m = int(rng.integers(1, 5)), int(rng.integers(6, 12))
    e = rng.normal(size=(n, m))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    return (lambda ts: vmf_loss(ts[0], e, 0.2)), [rng.normal(size=(n, m)) * rng.uniform(0.5, 5.0)]


def _layer_norm_case(rng, seed):
    w = rng.normal(size=(3, 5))
    arrays = [rng.normal(size=(3, 5)), rng.normal(size=(5,)), rng.normal(size=(5,))]
    return (lambda t: tsum(layer_norm(t[0], t[1], t[2]) * Tensor(w))), arrays


def _embedding_case(rng, seed):
    ids = rng.integers(0, 4, size=(2, 3))
    w = rng.normal(size=(2, 3, 5))
    return (lambda t: tsum(embedding(t[0], ids) * Tensor(w))), [rng.normal(size=(4, 5))]


def _unary_case(name):
    def make(rng, seed):
        x = rng.normal(size=(int(rng.integers(1, 4)) + 1, int(rng.integers(1, 5))))
        if name == "relu":
            x = x + np.sign(x) * 0.1
        return UNARY_CASES[name], [x]
    return make


def _binary_case(name):
    build, make = BINARY_CASES[name]
    return lambda rng, seed: (build, make(rng))


GRAD_CASES = {
    **{f"unary.{k}": _unary_case(k) for k in UNARY_CASES},
    **{f"binary.{k}": _binary_case(k) for k in BINARY_CASES},
    "layer_norm": _layer_norm_case, "embedding": _embedding_case, "rel_attention": _rel_attention_case,
    "nll_loss(smoothing=0.1)": _nll_case, "vmf_loss(lambda=0.2)": _vmf_case,
}


@pytest.mark.criterion(1)
def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    worst = {}
    for name, make in GRAD_CASES.items():
        worst[name] = max(check(*make(np.random.default_rng(seed), seed)) for seed in SEEDS)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = not bad and elapsed < 120
    criterion(1, ok, f"{len(worst)} ops x {len(SEEDS)} seeds, worst rel err {max(worst.values()):.2e}, "
                     f"{elapsed:.0f}s" + (f", failing {sorted(bad)}" if bad else ""))
    assert not bad
    assert elapsed < 120


# -- 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_criterion_2_alignment(criterion):
    t0 = time.perf_counter()
    langs = (LanguageSpec("aa"), LanguageSpec("bb", order="sov_pre"), LanguageSpec("cc", role="new"))
    fam = generate_family(FamilySpec(concepts=500, dim=32, languages=langs), seed=0)
    pivot = fam.spaces["aa"].aligned(np.eye(32))
    train, rest = fam.dictionary("bb", "aa").split(200)
    held_out = rest.split(100)[0]
    w = procrustes(fam.spaces["bb"], fam.spaces["aa"], train)
    err = float(np.linalg.norm(w - fam.rotations["aa"] @ fam.rotations["bb"].T))
    pro = evaluate_alignment(fam.spaces["bb"].aligned(w), pivot, held_out, method="procrustes")
    wr = rcsls_align(fam.spaces["bb"], pivot, train, init=w)
    rc = evaluate_alignment(fam.spaces["bb"].aligned(wr), pivot, held_out, method="rcsls")
    elapsed = time.perf_counter() - t0
    ok = err < 1e-6 and pro.nn_accuracy >= 0.99 and rc.csls_accuracy >= pro.csls_accuracy and elapsed < 60
    criterion(2, ok, f"rotation error {err:.1e}, procrustes nn {pro.nn_accuracy:.3f} csls {pro.csls_accuracy:.3f}, "
                     f"rcsls csls {rc.csls_accuracy:.3f} on {len(held_out)} held-out pairs, "
                     f"{elapsed:.0f}s")
    assert err < 1e-6
    assert pro.nn_accuracy >= 0.99
    assert rc.csls_accuracy >= pro.csls_accuracy
    assert elapsed < 60


# -- 3 ---------------------------------------------------------------------------

OVERFIT_STEPS = 2000
OVERFIT_LR = 3e-3


@pytest.mark.criterion(3)
def test_criterion_3_overfit(criterion):
    t0 = time.perf_counter()
    fam = generate_family(FamilySpec(dim=64), seed=0)
    pairs = fam.parallel("xa", "xb", 64).pairs
    spaces = {l: fam.spaces[l].aligned(fam.rotations["xa"] @ fam.rotations[l].T) for l in ("xa", "xb")}
    v = build_vocab({"xa": [p.src for p in pairs], "xb": [p.tgt for p in pairs]}, spaces)
    cfg = TransformerConfig(layers=2, model_dim=64, ff_dim=256, heads=4, dropout=0.0, rel_pos_clip=8,
                            label_smoothing=0.1, dtype="float32")
    m = TranslationModel(cfg, v, seed=0)
    opt = Optimizer(m.trainable_parameters(), kind="adam")
    sched = LrSchedule(kind="linear_warmup", warmup_steps=100, warmup_init_lr=1e-5, warmup_end_lr=OVERFIT_LR,
                       min_lr=1e-6)
    batch = batch_of(pairs, v)
    loss = acc = None
    step = 0
    for step in range(1, OVERFIT_STEPS + 1):
        m.train()
        backward(m.loss(batch)[0])
        opt.step(sched(step))
        if step % 100 == 0:
            m.eval()
            with no_grad():
                loss = m.loss(batch)[0].item()
            hyps = decode(m, [p.src for p in pairs], "xa", DecodeConfig("xb", beam_size=1))
            acc = float(np.mean([tuple(h) == p.tgt for h, p in zip(hyps, pairs)]))
            if loss < 0.1 and acc >= 0.95:
                break
    elapsed = time.perf_counter() - t0
    ok = loss < 0.1 and acc >= 0.95 and elapsed < 600
    criterion(3, ok, f"step {step}: smoothed loss {loss:.4f}, exact greedy reproduction {acc:.1%}, {elapsed:.0f}s")
    assert loss < 0.1 and acc >= 0.95
    assert elapsed < 600


# -- 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_criterion_4_blind_transfer(desk, criterion):
    t0 = time.perf_counter()
    lang = "xn"
    blind_m = desk.extended(lang)
    blind = {b: desk.score("blind.xn", blind_m, lang, b) for b in BASE}
    # ceiling: the same extended model trained on real xn -> base data
    cfg = desk.new_cfg(lang)
    ceiling_m = desk.extended(lang)
    train = desk.ws.parallel("train", [(lang, b) for b in BASE])
    dev = desk.ws.parallel("dev", [(lang, b) for b in BASE])
    settings = cfg.train_settings(adapt=True)
    train_supervised(ceiling_m, train, settings, dev, eval_initial=True)
    ceiling = {b: desk.score("ceiling.xn", ceiling_m, lang, b) for b in BASE}
    # baseline: identical pipeline, but xn's vectors shuffled against its words
    base = desk.base
    bad = desk.ws.space(lang).permuted(1)
    shuffled_m = base.copy().extend(extend_vocab(base.vocab, lang, desk.ws.mono(lang).sentences, bad))
    shuffled = {b: desk.score("shuffled.xn", shuffled_m, lang, b) for b in BASE}
    mb, mc, ms = (float(np.mean(list(d.values()))) for d in (blind, ceiling, shuffled))
    elapsed = time.perf_counter() - t0
    ok = mb >= 0.6 * mc and mb >= 5 * ms and elapsed < 1800
    criterion(4, ok, f"xn->base blind {mb:.1f} ({_fmt(blind)}), ceiling {mc:.1f}, ratio {mb / mc:.2f} (>=0.60); "
                     f"shuffled-embedding {ms:.1f}; {elapsed:.0f}s")
    assert mb >= 0.6 * mc
    assert mb >= 5 * ms
    assert elapsed < 1800


# -- 5 ---------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_criterion_5_method_ordering(desk, criterion):
    t0 = time.perf_counter()
    rows = {method: {lang: desk.into_new(lang, method) for lang in NEW}
            for method in ("blind", *AE_METHODS, "backtranslate", "supervised")}
    mean = {method: float(np.mean([v for r in per.values() for v in r.values()])) for method, per in rows.items()}
    best_ae = max(AE_METHODS, key=mean.get)
    chain = [mean["blind"], mean[best_ae], mean["backtranslate"], mean["supervised"]]
    gaps = [chain[1] - chain[0], chain[2] - chain[1], chain[3] - chain[2]]
    elapsed = time.perf_counter() - t0
    ok = gaps[0] >= 1.0 and gaps[1] >= 1.0 and gaps[2] >= -2.0 and elapsed < 3600
    detail = " | ".join(f"{m} {mean[m]:.1f}" for m in mean)
    criterion(5, ok, f"mean base->new BLEU: {detail}; best AE {best_ae}; gaps {gaps[0]:+.1f} {gaps[1]:+.1f} "
                     f"{gaps[2]:+.1f} (need >=1, >=1, >=-2); {elapsed:.0f}s")
    for method, per in rows.items():
        print(method, {lang: _fmt(r) for lang, r in per.items()})
    assert gaps[0] >= 1.0, "blind < best autoencoder"
    assert gaps[1] >= 1.0, "best autoencoder < backtranslation"
    assert gaps[2] >= -2.0, "backtranslation near supervised"
    assert elapsed < 3600


# -- 6 ---------------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_criterion_6_frozen_and_denoising(desk, criterion):
    lang = "xd"
    mean = {m: float(np.mean(list(desk.into_new(lang, m).values()))) for m in AE_METHODS}
    fd = mean["frozen_denoise_ae"]
    collapse = {}
    for new in NEW:
        m = desk.extended(new)
        for b in BASE:
            collapse[f"{b}-{new}"] = (desk.score(f"blind.{new}", m, b, new),
                                      desk.score(f"blind.{new}", m, b, new, collapse=True))
    lowered = [k for k, (plain, col) in collapse.items() if col < plain]
    ok = fd >= mean["frozen_ae"] + 0.5 and fd >= mean["denoise_ae"] + 0.5 and not lowered
    criterion(6, ok, f"xd: frozen_denoise_ae {fd:.1f}, frozen_ae {mean['frozen_ae']:.1f}, "
                     f"denoise_ae {mean['denoise_ae']:.1f} (need +0.5 over both); collapse "
                     + " ".join(f"{k} {p:.1f}->{c:.1f}" for k, (p, c) in collapse.items()))
    assert fd >= mean["frozen_ae"] + 0.5
    assert fd >= mean["denoise_ae"] + 0.5
    assert not lowered


# -- 7 ---------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_criterion_7_noise(criterion):
    t0 = time.perf_counter()
    violations = 0
    for n in (0, 1, 3, 5):
        rng = np.random.default_rng(100 + n)
        for _ in range(10_000):
            toks = list(range(int(rng.integers(1, 20))))
            out = shuffle_noise(toks, n, rng)
            violations += sorted(out) != toks
            violations += max(abs(pos - t) for pos, t in enumerate(out)) > n
            violations += n == 0 and out != toks
    elapsed = time.perf_counter() - t0
    criterion(7, violations == 0 and elapsed < 10,
              f"40000 shuffles at n in (0,1,3,5): {violations} violations, {elapsed:.1f}s")
    assert violations == 0
    assert elapsed < 10


# -- 8 ---------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_criterion_8_decode_masking(desk, criterion):
    # runs after 3-6 in file order; the audit was reset when this module started
    a = decoding.audit
    criterion(8, a.off_target == 0 and a.emitted > 0,
              f"{a.off_target} off-target tokens out of {a.emitted} emitted")
    assert a.emitted > 0
    assert a.off_target == 0


# -- 9 ---------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_criterion_9_bleu_oracle(criterion):
    worst = 0.0
    for hyp, ref, prec, bp in BLEU_CASES:
        r = bleu([hyp.split()], [ref.split()])
        errs = [abs(g - w) for g, w in zip(r.precisions, prec) if w is not None]
        worst = max([worst, abs(r.brevity_penalty - bp), *errs])
    criterion(9, worst < 1e-9, f"{len(BLEU_CASES)} hand cases, max deviation {worst:.1e}")
    assert worst < 1e-9


# -- 10 --------------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_criterion_10_checkpoint(tmp_path, criterion):
    from test_model import toy_model, toy_pairs
    m = toy_model(seed=5)
    opt = Optimizer(m.trainable_parameters())
    batch = batch_of(toy_pairs(6), m.vocab)
    for _ in range(3):
        backward(m.loss(batch)[0])
        opt.step(1e-2)
    loaded = ck.load_checkpoint(ck.save_checkpoint(m, tmp_path / "m.ckpt", opt)).model
    rng = np.random.default_rng(0)
    xs = [tuple(f"x{k}" for k in rng.integers(0, 10, int(rng.integers(1, 8)))) for _ in range(100)]
    cfg = DecodeConfig("yy", beam_size=2)
    same_hash = loaded.parameter_hash() == m.parameter_hash()
    same_out = decode(loaded, xs, "xx", cfg) == decode(m, xs, "xx", cfg)
    data = ck.encode_checkpoint(m)
    missed = 0
    for pos in range(len(data)):  # every byte, one flipped bit each
        bad = bytearray(data)
        bad[pos] ^= 1 << (pos % 8)
        try:
            ck.decode_checkpoint(bytes(bad))
            missed += 1
        except FormatError:
            pass
    ok = same_hash and same_out and missed == 0
    criterion(10, ok, f"hash identical {same_hash}, 100 decodes identical {same_out}, "
                      f"{missed} of {len(data)} single-byte corruptions undetected")
    assert same_hash and same_out
    assert missed == 0


# -- 11 --------------------------------------------------------------------------

def _inflated_pair(dim=32, n=500, factor=10):
    rng = np.random.default_rng(0)
    models = []
    for size in (n, n * factor):
        words = [f"w{i}" for i in range(size)]
        space = EmbeddingSpace("xx", words, rng.normal(size=(size, dim))).aligned(np.eye(dim))
        yy = EmbeddingSpace("yy", words, rng.normal(size=(size, dim))).aligned(np.eye(dim))
        v = build_vocab({"xx": [words], "yy": [words]}, {"xx": space, "yy": yy})
        cfg = TransformerConfig(layers=1, model_dim=dim, ff_dim=2 * dim, heads=4, dropout=0.0,
                                head_kind="continuous", dtype="float32")
        models.append(TranslationModel(cfg, v, seed=0))
    return models


def _best_time(fn, repeats=7, inner=200):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, time.perf_counter() - t0)
    return best


@pytest.mark.criterion(11)
def test_criterion_11_continuous_head(desk, tmp_path, criterion):
    softmax_m = desk.base
    cont_cfg = desk.cfg.with_overrides(model="vmf", work_dir=str(tmp_path / "vmf"))
    pipeline.execute(cont_cfg, ["align", "build-vocab", "train"])
    cont_m = ck.load_checkpoint(pipeline.Workspace(cont_cfg).base).model
    pairs = [(a, b) for a in BASE for b in BASE if a != b]
    s_bleu = float(np.mean([desk.score("base", softmax_m, a, b) for a, b in pairs]))
    c_bleu = float(np.mean([desk.score("continuous", cont_m, a, b) for a, b in pairs]))

    small, big = _inflated_pair()
    timings = {}
    for name, m in (("small", small), ("big", big)):
        enc = m.encode(np.array([[m.vocab.tag_id("yy"), 5, 6, 7]]))
        h = m.decoder_hidden(enc, np.array([[m.vocab.bos_id, 8, 9]]))
        with no_grad():
            timings[name, "continuous"] = _best_time(lambda: m.continuous_output(h))
            timings[name, "softmax"] = _best_time(lambda: m.output_logits(h))
    slow_c = timings["big", "continuous"] / timings["small", "continuous"]
    slow_s = timings["big", "softmax"] / timings["small", "softmax"]
    ok = c_bleu >= s_bleu - 6.0 and slow_c < 1.2
    criterion(11, ok, f"base-task BLEU continuous {c_bleu:.1f} vs softmax {s_bleu:.1f} (within 6); "
                      f"10x vocabulary: continuous projection x{slow_c:.2f} (<1.2), softmax projection x{slow_s:.1f}")
    assert c_bleu >= s_bleu - 6.0
    assert slow_c < 1.2
