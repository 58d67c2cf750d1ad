"""Localization metrics for attention maps against binary masks.

Ranking always uses score descending, then row-major index ascending.
Sums go through ``math.fsum`` so results do not depend on summation order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from swimlab.numerics import Node

DEFAULT_P = (1, 5, 10)
DEFAULT_K = (1, 5, 10, 50, 100)
DEFAULT_TAU = 0.75


def _flat(map_, mask=None):
    m = np.asarray(map_.value if isinstance(map_, Node) else map_, dtype=np.float64)
    if mask is None:
        return m.reshape(-1), None
    k = np.asarray(mask)
    if k.shape != m.shape:
        raise ValueError(f"map shape {m.shape} != mask shape {k.shape}")
    return m.reshape(-1), k.reshape(-1).astype(bool)


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Flat indices sorted by score descending, ties by ascending index."""
    return np.lexsort((np.arange(scores.size), -scores))


def top_count(percent: float, n: int) -> int:
    """ceil(percent / 100 * n), evaluated exactly on the decimal value of ``percent``."""
    if not 0 < percent <= 100:
        raise ValueError(f"P must lie in (0, 100], got {percent}")
    return max(1, math.ceil(Fraction(str(percent)) * n / 100))


def top_perc(map_, percent: float) -> list[tuple[int, int]]:
    """The highest-scoring ceil(P% of pixels) as (row, col), in rank order."""
    m = np.asarray(map_.value if isinstance(map_, Node) else map_, dtype=np.float64)
    flat = m.reshape(-1)
    k = top_count(percent, flat.size)
    width = m.shape[-1]
    return [divmod(int(i), width) for i in rank_order(flat)[:k]]


def gamepoint_k(map_, mask, k: int) -> float:
    scores, pos = _flat(map_, mask)
    if not 1 <= k <= scores.size:
        raise ValueError(f"K must lie in [1, {scores.size}], got {k}")
    hits = int(pos[rank_order(scores)[:k]].sum())
    return hits / k


def gamepoint_p(map_, mask, percent: float) -> float:
    scores, _ = _flat(map_, mask)
    return gamepoint_k(map_, mask, top_count(percent, scores.size))


def auc(map_, mask) -> float:
    """Mann-Whitney AUC with ties worth one half, via midranks in exact integers."""
    scores, pos = _flat(map_, mask)
    n_pos = int(pos.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUC: mask needs both positive and negative pixels")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    # twice the midrank of each tie group: 2 * first_rank + size - 1 (1-based ranks)
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    sizes = np.diff(np.r_[starts, scores.size])
    twice_rank = np.repeat(2 * (starts + 1) + sizes - 1, sizes)
    twice_u = int(twice_rank[pos[order]].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def nss(map_, mask) -> float:
    """Mean of the population-standardized map over mask pixels."""
    scores, pos = _flat(map_, mask)
    if not pos.any():
        raise ValueError("empty mask")
    n = scores.size
    mu = math.fsum(scores.tolist()) / n
    dev = scores - mu
    var = math.fsum((dev * dev).tolist()) / n
    sd = math.sqrt(var)
    if sd == 0.0:
        raise ValueError("zero variance")
    z = dev / sd
    return math.fsum(z[pos].tolist()) / int(pos.sum())


def average_precision(map_, mask) -> float:
    scores, pos = _flat(map_, mask)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("empty mask")
    ranked = pos[rank_order(scores)]
    ranks = np.flatnonzero(ranked) + 1
    hits = np.arange(1, n_pos + 1)
    return math.fsum((hits / ranks).tolist()) / n_pos


def precision_counts(map_, mask, tau: float = DEFAULT_TAU) -> tuple[int, int]:
    """(true positives, predicted positives) after min-max normalization."""
    scores, pos = _flat(map_, mask)
    lo, hi = scores.min(), scores.max()
    if hi > lo:
        norm = (scores - lo) / (hi - lo)
    else:
        norm = np.zeros_like(scores)
    pred = norm >= tau
    return int((pred & pos).sum()), int(pred.sum())


def precision_at(map_, mask, tau: float = DEFAULT_TAU) -> float:
    """TP / (TP + FP) at threshold ``tau`` on the min-max normalized map; 0 if nothing fires."""
    tp, predicted = precision_counts(map_, mask, tau)
    return tp / predicted if predicted else 0.0


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    """Per-sample metric rows plus means that skip degenerate samples."""

    columns: list[str]
    ids: list[int] = field(default_factory=list)
    rows: list[dict[str, float | None]] = field(default_factory=list)
    flags: list[list[str]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.rows)

    def add(self, sample_id: int, values: dict[str, float | None], flags: Sequence[str] = ()) -> None:
        self.ids.append(sample_id)
        self.rows.append(values)
        self.flags.append(list(flags))

    def excluded(self) -> dict[str, int]:
        return {c: sum(r[c] is None for r in self.rows) for c in self.columns}

    def means(self) -> dict[str, float | None]:
        out = {}
        for c in self.columns:
            vals = [r[c] for r in self.rows if r[c] is not None]
            out[c] = math.fsum(vals) / len(vals) if vals else None
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", *self.columns, "flags"])
        for sid, row, flags in zip(self.ids, self.rows, self.flags):
            writer.writerow([sid, *(_fmt(row[c]) for c in self.columns), ";".join(flags)])
        means = self.means()
        excl = self.excluded()
        note = ";".join(f"excluded_{c}={v}" for c, v in excl.items() if v)
        writer.writerow(["mean", *(_fmt(means[c]) for c in self.columns), note])
        return buf.getvalue()


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def metric_columns(p_list: Sequence[float] = DEFAULT_P, k_list: Sequence[int] = DEFAULT_K) -> list[str]:
    cols = [f"gp_p{_label(p)}" for p in p_list]
    cols += [f"gp_k{k}" for k in k_list]
    return cols + ["auc", "nss", "ap", "precision"]


def _label(p: float) -> str:
    return str(int(p)) if float(p).is_integer() else str(p)


def score_map(
    map_,
    mask,
    p_list: Sequence[float] = DEFAULT_P,
    k_list: Sequence[int] = DEFAULT_K,
    tau: float = DEFAULT_TAU,
) -> tuple[dict[str, float | None], list[str]]:
    """All metrics for one map; degenerate ones come back as None with a flag."""
    values: dict[str, float | None] = {}
    flags: list[str] = []
    for p in p_list:
        values[f"gp_p{_label(p)}"] = gamepoint_p(map_, mask, p)
    for k in k_list:
        values[f"gp_k{k}"] = gamepoint_k(map_, mask, k)
    for name, fn in (("auc", auc), ("nss", nss), ("ap", average_precision)):
        try:
            values[name] = fn(map_, mask)
        except ValueError as exc:
            values[name] = None
            flags.append(f"{name}:{exc}")
    tp, predicted = precision_counts(map_, mask, tau)
    values["precision"] = tp / predicted if predicted else 0.0
    if not predicted:
        flags.append("precision:no positive prediction")
    return values, flags
