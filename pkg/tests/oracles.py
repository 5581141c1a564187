"""Independent brute-force implementations used as oracles.

Deliberately written with different machinery than the package code
(list.count, recursion with memo, sorted scans) so agreement is
meaningful.
"""

import math
from functools import lru_cache


def ngrams(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_bf(cand, ref, n, eps=1e-9):
    cand, ref = list(cand), list(ref)
    if not cand:
        return 0.0
    logs = []
    for k in range(1, n + 1):
        cg = ngrams(cand, k)
        rg = ngrams(ref, k)
        hit = 0
        for g in set(cg):
            hit += min(cg.count(g), rg.count(g))
        if len(cg) == 0:
            p = eps
        else:
            p = hit / len(cg) if hit > 0 else eps
        logs.append(math.log(p))
    bp = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return bp * math.exp(sum(logs) / n)


def rouge_n_bf(cand, ref, n):
    cg = ngrams(list(cand), n)
    rg = ngrams(list(ref), n)
    hit = 0
    for g in set(cg):
        hit += min(cg.count(g), rg.count(g))
    if hit == 0 or not cg or not rg:
        return 0.0
    p = hit / len(cg)
    r = hit / len(rg)
    return 2 * p * r / (p + r)


def lcs_bf(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0 or j == 0:
            return 0
        if a[i - 1] == b[j - 1]:
            return rec(i - 1, j - 1) + 1
        return max(rec(i - 1, j), rec(i, j - 1))

    return rec(len(a), len(b))


def rouge_l_bf(cand, ref):
    if not cand:
        return 0.0
    m = lcs_bf(cand, ref)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    return 2 * p * r / (p + r)


def accuracy_bf(gold_sets, pred_sets):
    return sum(g == p for g, p in zip(gold_sets, pred_sets)) / len(gold_sets)


def weighted_f1_bf(gold_sets, pred_sets):
    score = 0.0
    for label in set(gold_sets):
        tp = fp = fn = 0
        for g, p in zip(gold_sets, pred_sets):
            if p == label and g == label:
                tp += 1
            elif p == label:
                fp += 1
            elif g == label:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        score += f1 * sum(1 for g in gold_sets if g == label)
    return score / len(gold_sets)


def duplicate_spans_exist(docs, min_span):
    """Sorted-scan check: does any span of min_span tokens occur at two
    distinct in-document positions of the corpus?"""
    grams = []
    for di, doc in enumerate(docs):
        toks = list(doc)
        for i in range(len(toks) - min_span + 1):
            grams.append(tuple(toks[i : i + min_span]))
    grams.sort()
    return any(grams[i] == grams[i + 1] for i in range(len(grams) - 1))


def duplicate_spans_exist_allpairs(docs, min_span):
    """Literal all-pairs comparison; only for very small corpora."""
    positions = []
    for di, doc in enumerate(docs):
        toks = list(doc)
        for i in range(len(toks) - min_span + 1):
            positions.append(tuple(toks[i : i + min_span]))
    for i in range(len(positions)):
        for j in range(i + 1, len(positions)):
            if positions[i] == positions[j]:
                return True
    return False
