"""Corpus-level captioning metrics: BLEU-n, ROUGE-L, CIDEr-D and the SPIDEr combiner.

METEOR and SPICE are never computed here; their values can be supplied from an
external tool and are carried through to the report.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .errors import InsufficientCorpus

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4


@dataclass(frozen=True)
class EvaluationItem:
    item_id: str
    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not self.references:
            raise ValueError(f"item {self.item_id!r} has no references")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(c: int, refs) -> int:
    return min((len(r) for r in refs), key=lambda L: (abs(L - c), L))


def bleu(items: Iterable[EvaluationItem], n: int = 4) -> float:
    """Corpus BLEU with uniform weights over orders 1..n and no smoothing."""
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must lie in 1..4, got {n}")
    matched = [0] * n
    total = [0] * n
    c_len = r_len = 0
    for it in items:
        c_len += len(it.candidate)
        r_len += _closest_ref_length(len(it.candidate), it.references)
        for k in range(1, n + 1):
            cand = ngrams(it.candidate, k)
            max_ref: Counter = Counter()
            for ref in it.references:
                max_ref |= ngrams(ref, k)
            matched[k - 1] += sum(min(cnt, max_ref[g]) for g, cnt in cand.items())
            total[k - 1] += sum(cand.values())
    if c_len == 0 or min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(candidate: Sequence[str], references) -> float:
    """F-measure from the best precision and best recall over references."""
    if not candidate:
        return 0.0
    prec = rec = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        prec = max(prec, lcs / len(candidate))
        rec = max(rec, lcs / len(ref) if ref else 0.0)
    if prec == 0.0 or rec == 0.0:
        return 0.0
    b2 = ROUGE_BETA ** 2
    return (1 + b2) * prec * rec / (rec + b2 * prec)


def rouge_l(items: Iterable[EvaluationItem]) -> float:
    scores = [rouge_l_item(it.candidate, it.references) for it in items]
    return sum(scores) / len(scores) if scores else 0.0


def _tfidf(tokens, df, log_n):
    vecs, norms = [], []
    for k in range(1, CIDER_MAX_N + 1):
        v = {g: tf * (log_n - math.log(max(1.0, df.get(g, 0)))) for g, tf in ngrams(tokens, k).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider_d_items(items: Sequence[EvaluationItem]) -> list[float]:
    """Per-item CIDEr-D scores (corpus-dependent through document frequencies)."""
    items = list(items)
    if len(items) < 2:
        raise InsufficientCorpus("CIDEr needs at least two items to estimate document frequencies")
    df: Counter = Counter()
    for it in items:
        seen = set()
        for ref in it.references:
            for k in range(1, CIDER_MAX_N + 1):
                seen.update(ngrams(ref, k))
        df.update(seen)
    log_n = math.log(len(items))
    scores = []
    for it in items:
        cvec, cnorm = _tfidf(it.candidate, df, log_n)
        total = 0.0
        for ref in it.references:
            rvec, rnorm = _tfidf(ref, df, log_n)
            penalty = math.exp(-((len(it.candidate) - len(ref)) ** 2) / (2 * CIDER_SIGMA ** 2))
            sim = 0.0
            for k in range(CIDER_MAX_N):
                if cnorm[k] == 0.0 or rnorm[k] == 0.0:
                    continue
                dot = sum(min(v, rvec[k].get(g, 0.0)) * rvec[k].get(g, 0.0) for g, v in cvec[k].items())
                sim += dot / (cnorm[k] * rnorm[k]) * penalty
            total += sim / CIDER_MAX_N
        scores.append(10.0 * total / len(it.references))
    return scores


def cider(items: Sequence[EvaluationItem]) -> float:
    scores = cider_d_items(items)
    return sum(scores) / len(scores)


def spider(cider_value: float | None, spice_value: float | None) -> float | None:
    """Equal-weight mean of CIDEr and SPICE; None when either is missing."""
    if cider_value is None or spice_value is None:
        return None
    if cider_value < 0 or spice_value < 0:
        raise ValueError("CIDEr and SPICE must be non-negative")
    return (cider_value + spice_value) / 2.0


def format_score(x: float | None, digits: int = 3) -> str:
    """Half-up rounding of the shortest decimal form, as scores are printed in tables."""
    if x is None:
        return "-"
    q = Decimal(1).scaleb(-digits)
    return str(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class MetricsReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    rouge_l: float
    cider: float
    meteor: float | None = None
    spice: float | None = None

    @property
    def spider(self) -> float | None:
        return spider(self.cider, self.spice)

    def to_dict(self) -> dict:
        d = asdict(self)
        d = {k: v for k, v in d.items() if v is not None}
        if self.spider is not None:
            d["spider"] = self.spider
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = [("BLEU_1", self.bleu_1), ("BLEU_2", self.bleu_2), ("BLEU_3", self.bleu_3),
                ("BLEU_4", self.bleu_4), ("ROUGE_L", self.rouge_l), ("METEOR", self.meteor),
                ("CIDEr", self.cider), ("SPICE", self.spice), ("SPIDEr", self.spider)]
        return "\n".join(f"{name:<8} {format_score(v)}" for name, v in rows) + "\n"


def evaluate_corpus(items: Sequence[EvaluationItem], external: dict | None = None) -> MetricsReport:
    items = list(items)
    external = external or {}
    unknown = set(external) - {"meteor", "spice"}
    if unknown:
        raise ValueError(f"unknown external score fields: {sorted(unknown)}")
    return MetricsReport(
        *(bleu(items, n) for n in range(1, 5)),
        rouge_l=rouge_l(items),
        cider=cider(items),
        meteor=external.get("meteor"),
        spice=external.get("spice"),
    )
