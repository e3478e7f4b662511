"""Corpus BLEU over tokenized, case-sensitive text with a single reference."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from ..errors import DataError

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuReport:
    bleu: float                       # 0..100
    precisions: tuple[float, ...]     # p1..p4 as fractions
    brevity_penalty: float
    length_ratio: float
    hyp_len: int
    ref_len: int
    matches: tuple[int, ...]
    totals: tuple[int, ...]

    def recompute(self) -> float:
        """BLEU rebuilt from this report's own components."""
        if min(self.precisions) <= 0.0:
            return 0.0
        return 100.0 * self.brevity_penalty * math.exp(sum(math.log(p) for p in self.precisions) / len(self.precisions))

    def as_record(self) -> dict:
        return {"bleu": self.bleu, "precisions": list(self.precisions), "bp": self.brevity_penalty,
                "ratio": self.length_ratio, "hyp_len": self.hyp_len, "ref_len": self.ref_len}


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], max_order: int = MAX_ORDER) -> BleuReport:
    """Standard corpus BLEU; any zero n-gram precision gives 0 (no smoothing)."""
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise DataError("BLEU needs at least one sentence")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = list(h), list(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc, rc = ngrams(h, n), ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len > ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    ratio = hyp_len / ref_len if ref_len else 0.0
    report = BleuReport(0.0, precisions, bp, ratio, hyp_len, ref_len, tuple(matches), tuple(totals))
    return BleuReport(report.recompute(), precisions, bp, ratio, hyp_len, ref_len, tuple(matches), tuple(totals))
