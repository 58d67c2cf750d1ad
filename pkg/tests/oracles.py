"""Brute-force reference implementations used only by the tests.

Plain Python loops over pixels and pixel pairs; nothing here is shared with
the package's vectorized code paths.
"""

from __future__ import annotations

import math
from decimal import ROUND_CEILING, Decimal


def _cells(map_, mask):
    scores = [float(v) for row in map_ for v in row]
    labels = [int(v) for row in mask for v in row]
    return scores, labels


def ranked(scores):
    return [i for _, i in sorted((-s, i) for i, s in enumerate(scores))]


def top_k_indices(map_, k):
    scores = [float(v) for row in map_ for v in row]
    return ranked(scores)[:k]


def percent_count(p, n):
    k = (Decimal(str(p)) * n / 100).to_integral_value(rounding=ROUND_CEILING)
    return max(1, int(k))


def gamepoint_k(map_, mask, k):
    scores, labels = _cells(map_, mask)
    top = ranked(scores)[:k]
    return sum(labels[i] for i in top) / k


def gamepoint_p(map_, mask, p):
    n = sum(len(row) for row in map_)
    return gamepoint_k(map_, mask, percent_count(p, n))


def auc(map_, mask):
    scores, labels = _cells(map_, mask)
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    if not pos or not neg:
        raise ValueError("undefined AUC")
    greater = ties = 0
    for a in pos:
        for b in neg:
            if a > b:
                greater += 1
            elif a == b:
                ties += 1
    return (2 * greater + ties) / (2 * len(pos) * len(neg))


def nss(map_, mask):
    scores, labels = _cells(map_, mask)
    n = len(scores)
    mu = math.fsum(scores) / n
    devs = [s - mu for s in scores]
    sd = math.sqrt(math.fsum(d * d for d in devs) / n)
    if sd == 0.0:
        raise ValueError("zero variance")
    picked = [d / sd for d, l in zip(devs, labels) if l]
    if not picked:
        raise ValueError("empty mask")
    return math.fsum(picked) / len(picked)


def average_precision(map_, mask):
    scores, labels = _cells(map_, mask)
    n_pos = sum(labels)
    if n_pos == 0:
        raise ValueError("empty mask")
    hits, terms = 0, []
    for rank, i in enumerate(ranked(scores), start=1):
        if labels[i]:
            hits += 1
            terms.append(hits / rank)
    return math.fsum(terms) / n_pos


def precision_at(map_, mask, tau=0.75):
    scores, labels = _cells(map_, mask)
    lo, hi = min(scores), max(scores)
    tp = fp = 0
    for s, l in zip(scores, labels):
        v = (s - lo) / (hi - lo) if hi > lo else 0.0
        if v >= tau:
            if l:
                tp += 1
            else:
                fp += 1
    return tp / (tp + fp) if tp + fp else 0.0


def bilinear_align_corners(grid, out_h, out_w):
    """Direct per-pixel evaluation of the align-corners formula."""
    h, w = len(grid), len(grid[0])
    out = []
    for i in range(out_h):
        y = 0.0 if out_h == 1 or h == 1 else i * (h - 1) / (out_h - 1)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        row = []
        for j in range(out_w):
            x = 0.0 if out_w == 1 or w == 1 else j * (w - 1) / (out_w - 1)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = grid[y0][x0] * (1 - fx) + grid[y0][x1] * fx
            bot = grid[y1][x0] * (1 - fx) + grid[y1][x1] * fx
            row.append(top * (1 - fy) + bot * fy)
        out.append(row)
    return out


def phrase_matches(phrase_words, objects):
    """Objects whose attributes cover every non-article word of the phrase."""
    words = [w for w in phrase_words if w != "the"]
    return [o for o in objects if all(w in (o["shape"], o["color"], o["texture"]) for w in words)]
