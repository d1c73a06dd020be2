"""BLEU-4 and CIDEr over token lists."""

from __future__ import annotations

import logging
import math
from collections import Counter

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(c, refs):
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu_stats(candidate, references, max_n=4):
    """Clipped n-gram matches, candidate n-gram totals, and lengths."""
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand = ngrams(candidate, n)
        max_ref = Counter()
        for ref in references:
            for g, k in ngrams(ref, n).items():
                max_ref[g] = max(max_ref[g], k)
        matches.append(sum(min(k, max_ref[g]) for g, k in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return np.array(matches), np.array(totals), len(candidate), _closest_ref_length(len(candidate), references)


def _bleu_from_stats(matches, totals, c, r, smooth=False):
    if c == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        if smooth:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs.append(math.log(m / t))
    return brevity_penalty(c, r) * math.exp(sum(logs) / len(logs))


def bleu4(candidate, references, smooth: bool = False) -> float:
    """Sentence BLEU-4; no smoothing unless asked, so any zero precision gives 0."""
    if not references:
        raise ContractError("BLEU needs at least one reference")
    if len(candidate) == 0:
        return 0.0
    return _bleu_from_stats(*bleu_stats(candidate, references), smooth=smooth)


def corpus_bleu4(candidates, references, smooth: bool = False) -> float:
    """Corpus BLEU-4: n-gram and length statistics summed before the ratios."""
    if len(candidates) != len(references):
        raise ContractError("one reference list per candidate required")
    M, T = np.zeros(4, dtype=np.int64), np.zeros(4, dtype=np.int64)
    c_len = r_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ContractError("BLEU needs at least one reference")
        m, t, c, r = bleu_stats(cand, refs)
        M += m
        T += t
        c_len += c
        r_len += r
    return _bleu_from_stats(M, T, c_len, r_len, smooth=smooth)


def _doc_freq(references, n):
    df = Counter()
    for refs in references:
        seen = set()
        for ref in refs:
            seen.update(ngrams(ref, n))
        df.update(seen)
    return df


def _tfidf(tokens, n, df, log_n):
    return {g: k * (log_n - math.log(max(1.0, df[g]))) for g, k in ngrams(tokens, n).items()}


def _cosine(a, b):
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_scores(candidates, references, max_n=4):
    """Per-scene CIDEr (TF-IDF cosine over 1..4-grams, scaled by 10).

    Document frequencies come from the reference corpus. Returns
    ``(scores, degenerate)`` where ``degenerate`` flags a single-scene corpus,
    whose IDF weights are all zero.
    """
    if len(candidates) != len(references):
        raise ContractError("one reference list per candidate required")
    if any(len(refs) == 0 for refs in references):
        raise ContractError("every scene needs at least one reference")
    N = len(references)
    degenerate = N < 2
    if degenerate:
        log.warning("CIDEr on a single-scene corpus: IDF is degenerate")
    log_n = math.log(max(1.0, float(N)))
    scores = np.zeros(N)
    for n in range(1, max_n + 1):
        df = _doc_freq(references, n)
        for i, (cand, refs) in enumerate(zip(candidates, references)):
            vc = _tfidf(cand, n, df, log_n)
            sims = [_cosine(vc, _tfidf(ref, n, df, log_n)) for ref in refs]
            scores[i] += np.mean(sims) / max_n
    return 10.0 * scores, degenerate


def cider(candidates, references) -> float:
    scores, _ = cider_scores(candidates, references)
    return float(np.mean(scores)) if len(scores) else 0.0
