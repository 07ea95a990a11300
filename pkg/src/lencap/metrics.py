"""Caption metrics: BLEU-4, ROUGE-L, CIDEr-D, mCIDEr, LenMSE, bad-ending rate.

Captions are sequences of hashable tokens (strings or ids). Corpus-level
functions take ``candidates[i]`` and ``references[i]`` (a list of token
sequences) for the same image ``i``. Scores are on a 0-100 scale.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

Caption = Sequence[Hashable]

DEFAULT_BAD_WORDS = frozenset({
    "a", "an", "the", "in", "for", "at", "of", "with", "before", "after", "on",
    "upon", "near", "to", "is", "are", "am", "and",
})
CIDER_SIGMA = 6.0
MAX_N = 4


def ngrams(tokens: Caption, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _counts(tokens: Caption) -> list[Counter]:
    return [ngrams(tokens, n) for n in range(1, MAX_N + 1)]


@dataclass
class IdfTable:
    """Document frequencies over images' reference sets."""
    df: Counter
    corpus_size: int

    @classmethod
    def build(cls, references: Sequence[Sequence[Caption]]) -> "IdfTable":
        df: Counter = Counter()
        for refs in references:
            seen = set()
            for ref in refs:
                for counts in _counts(ref):
                    seen.update(counts)
            df.update(seen)
        return cls(df, len(references))

    def idf(self, gram: tuple) -> float:
        return math.log(float(self.corpus_size)) - math.log(max(1.0, float(self.df.get(gram, 0))))


def _vec(counts: Counter, idf: IdfTable) -> tuple[dict, float]:
    vec = {g: c * idf.idf(g) for g, c in counts.items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def _clipped_cosine(cand: Counter, ref: Counter, idf: IdfTable) -> float:
    """Clipped TF-IDF cosine between one candidate and one target count vector."""
    cv, cn = _vec(cand, idf)
    rv, rn = _vec(ref, idf)
    if cn == 0.0 or rn == 0.0:
        return 0.0
    num = sum(min(cv[g], rv[g]) * rv[g] for g in cv if g in rv)
    return num / (cn * rn)


def _check(candidates, references):
    if len(candidates) != len(references):
        raise ValueError("one candidate per image required")
    if not candidates:
        raise ValueError("empty corpus")
    if any(len(r) == 0 for r in references):
        raise ValueError("every image needs at least one reference")


def cider_d_per_image(candidates, references, idf: IdfTable | None = None,
                      sigma: float = CIDER_SIGMA) -> list[float]:
    """Raw per-image CIDEr-D on the 0-10 scale."""
    _check(candidates, references)
    idf = idf or IdfTable.build(references)
    scores = []
    for cand, refs in zip(candidates, references):
        cc = _counts(cand)
        total = 0.0
        for ref in refs:
            rc = _counts(ref)
            delta = len(cand) - len(ref)
            penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            total += sum(_clipped_cosine(cc[n], rc[n], idf) for n in range(MAX_N)) / MAX_N * penalty
        scores.append(10.0 * total / len(refs))
    return scores


def cider_d(candidates, references, idf: IdfTable | None = None,
            sigma: float = CIDER_SIGMA) -> float:
    per = cider_d_per_image(candidates, references, idf, sigma)
    return 10.0 * sum(per) / len(per)


def pool_counts(refs: Sequence[Caption], mode: str = "sum") -> list[Counter]:
    """Combine the n-gram counts of all references of one image."""
    pooled = [Counter() for _ in range(MAX_N)]
    for ref in refs:
        for n, counts in enumerate(_counts(ref)):
            if mode == "sum":
                pooled[n].update(counts)
            elif mode == "max":
                for g, c in counts.items():
                    pooled[n][g] = max(pooled[n][g], c)
            else:
                raise ValueError(f"unknown pooling mode {mode!r}")
    return pooled


def mcider_per_image(candidates, references, idf: IdfTable | None = None,
                     pooling: str = "sum") -> list[float]:
    """CIDEr without length penalty, against one pooled reference vector."""
    _check(candidates, references)
    idf = idf or IdfTable.build(references)
    scores = []
    for cand, refs in zip(candidates, references):
        cc = _counts(cand)
        pooled = pool_counts(refs, pooling)
        scores.append(10.0 * sum(_clipped_cosine(cc[n], pooled[n], idf)
                                 for n in range(MAX_N)) / MAX_N)
    return scores


def mcider(candidates, references, idf: IdfTable | None = None, pooling: str = "sum") -> float:
    per = mcider_per_image(candidates, references, idf, pooling)
    return 10.0 * sum(per) / len(per)


def bleu4(candidates, references) -> float:
    """Corpus BLEU-4, closest-reference brevity penalty, no smoothing."""
    _check(candidates, references)
    matched = [0] * MAX_N
    total = [0] * MAX_N
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, MAX_N + 1):
            cc = ngrams(cand, n)
            best: Counter = Counter()
            for r in refs:
                best |= ngrams(r, n)
            matched[n - 1] += sum(min(c, best[g]) for g, c in cc.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if min(matched) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / MAX_N
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


def lcs_length(a: Caption, b: Caption) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean over images of the best LCS F-measure against any reference."""
    _check(candidates, references)
    total = 0.0
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            lcs = lcs_length(cand, ref)
            if lcs == 0:
                continue
            p, r = lcs / len(cand), lcs / len(ref)
            best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
        total += best
    return 100.0 * total / len(candidates)


def len_mse(desired: Sequence[int], actual: Sequence[int]) -> float:
    if len(desired) != len(actual):
        raise ValueError("desired and actual length lists differ in size")
    if not desired:
        raise ValueError("no lengths given")
    return sum((d - a) ** 2 for d, a in zip(desired, actual)) / len(desired)


def bad_ending_rate(candidates: Sequence[Caption], bad_words=DEFAULT_BAD_WORDS) -> float:
    if not bad_words:
        raise ValueError("bad word list is empty")
    if not candidates:
        return 0.0
    bad = sum(1 for c in candidates if len(c) == 0 or c[-1] in bad_words)
    return 100.0 * bad / len(candidates)


def length_histogram(captions: Sequence[Caption]) -> dict[int, int]:
    return dict(sorted(Counter(len(c) for c in captions).items()))


@dataclass
class EvalReport:
    metrics: dict[str, float] = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)
    histogram: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "rows": self.rows,
                "length_histogram": {str(k): v for k, v in self.histogram.items()}}


def evaluate(candidates, references, desired_lengths=None, bad_words=DEFAULT_BAD_WORDS,
             pooling: str = "sum") -> EvalReport:
    """The full metric table for one set of candidates."""
    idf = IdfTable.build(references)
    m = {
        "bleu4": bleu4(candidates, references),
        "rougeL": rouge_l(candidates, references),
        "ciderD": cider_d(candidates, references, idf),
        "mcider": mcider(candidates, references, idf, pooling),
        "ber": bad_ending_rate(candidates, bad_words),
    }
    if desired_lengths is not None:
        m["lenmse"] = len_mse(desired_lengths, [len(c) for c in candidates])
    return EvalReport(metrics=m, histogram=length_histogram(candidates))
