"""Noun-token attention supervision.

Pipeline per batch: pick the tagged noun's cross-attention rows, average over
heads and span tokens, reshape to the visual grid, resize to the mask,
fuse the selected layers, and score the fused map against the mask.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from swimlab import numerics as nx
from swimlab.model import ForwardTrace
from swimlab.numerics import Node

logger = logging.getLogger(__name__)

EPS = 1e-7
SMOOTH = 1.0


class Fusion(str, Enum):
    MEAN = "mean"
    ADD = "add"
    POOL = "pool"
    PROD = "prod"


@dataclass(frozen=True)
class LossKind:
    name: str = "bce"
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if self.name not in LOSSES:
            raise ValueError(f"unknown loss {self.name!r}; choose from {sorted(LOSSES)}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("focal alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")


# ---------------------------------------------------------------- layer selection


def even_layers(k: int, n_layers: int) -> list[int]:
    """``k`` evenly spaced 1-based layer indices.

    Prefers the range [2, n_layers - 1] (28 layers, k=6 gives 2,7,12,17,22,27),
    widening to [2, n_layers] and then [1, n_layers] when the depth is too small.
    """
    if k < 1:
        raise ValueError("layer count must be >= 1")
    if k > n_layers:
        logger.warning("even:%d exceeds model depth; clamped to even:%d", k, n_layers)
        k = n_layers
    for lo, hi in ((2, n_layers - 1), (2, n_layers), (1, n_layers)):
        if hi - lo + 1 >= k:
            break
    if k == 1:
        return [lo]
    step = (hi - lo) / (k - 1)
    return [int(math.floor(lo + i * step + 0.5)) for i in range(k)]


def default_selection(n_layers: int) -> list[int]:
    return even_layers(min(6, n_layers), n_layers)


def parse_selection(choice: str | Sequence[int], n_layers: int) -> list[int]:
    """Accept ``"even:k"``, ``"all"``, ``"1,3,5"`` or a list of ints."""
    if isinstance(choice, str):
        choice = choice.strip()
        if choice == "all":
            return list(range(1, n_layers + 1))
        if choice == "default":
            return default_selection(n_layers)
        if choice.startswith("even:"):
            return even_layers(int(choice[5:]), n_layers)
        layers = [int(s) for s in choice.split(",") if s.strip()]
    else:
        layers = [int(s) for s in choice]
    if not layers:
        raise ValueError("empty layer selection")
    if len(set(layers)) != len(layers):
        raise ValueError(f"duplicate layers in {layers}")
    bad = [l for l in layers if not 1 <= l <= n_layers]
    if bad:
        raise ValueError(f"layers {bad} outside [1, {n_layers}]")
    return layers


# ---------------------------------------------------------------- maps


def _spans_list(spans, batch: int) -> list[tuple[int, int]]:
    if len(spans) == 2 and all(isinstance(s, (int, np.integer)) for s in spans):
        spans = [tuple(spans)]
    spans = [tuple(int(v) for v in s) for s in spans]
    if len(spans) != batch:
        raise ValueError(f"{len(spans)} spans for a batch of {batch}")
    return spans


def extract_noun_attention(trace: ForwardTrace, spans, grid: tuple[int, int]) -> list[Node]:
    """Per-layer (B, grid_h, grid_w) maps of the tagged noun's cross-attention."""
    gh, gw = grid
    b, _, t, lv = trace.attention[0].shape
    if lv != gh * gw:
        raise ValueError(f"{lv} visual tokens do not fill a {gh}x{gw} grid")
    spans = _spans_list(spans, b)
    weights = np.zeros((b, 1, t))
    for i, (s, e) in enumerate(spans):
        if not 0 <= s <= e < t:
            raise ValueError(f"span {(s, e)} outside text of length {t}")
        weights[i, 0, s : e + 1] = 1.0 / (e - s + 1)
    w = nx.const(weights)
    maps = []
    for layer in trace.attention:
        rows = w @ nx.mean(layer, axis=1)  # (B, 1, L_v)
        maps.append(nx.reshape(rows, (b, gh, gw)))
    return maps


def resize_to_mask(maps: Sequence[Node], mask_shape: tuple[int, int]) -> list[Node]:
    h, w = mask_shape
    return [nx.bilinear_resize(m, h, w) for m in maps]


def fuse(maps: Sequence[Node], selection: Sequence[int], method: Fusion | str = Fusion.MEAN) -> Node:
    """Combine the selected (1-based) layer maps and clamp into [EPS, 1 - EPS]."""
    method = Fusion(method)
    if not selection:
        raise ValueError("empty layer selection")
    for l in selection:
        if not 1 <= l <= len(maps):
            raise ValueError(f"layer {l} outside [1, {len(maps)}]")
    stacked = nx.stack([maps[l - 1] for l in selection], axis=1)
    if method is Fusion.MEAN:
        out = nx.anchored_mean(stacked, axis=1)
    elif method is Fusion.ADD:
        out = nx.sum(stacked, axis=1)
    elif method is Fusion.POOL:
        out = nx.amax(stacked, axis=1)
    else:
        out = nx.prod(stacked, axis=1)
    return nx.clamp(out, EPS, 1.0 - EPS)


# ---------------------------------------------------------------- losses


def _bce(a: Node, m: np.ndarray, kind: LossKind) -> Node:
    terms = nx.mul(m, nx.log(a)) + nx.mul(1.0 - m, nx.log(1.0 - a))
    return nx.scale(nx.mean(terms), -1.0)


def _focal(a: Node, m: np.ndarray, kind: LossKind) -> Node:
    pos = nx.mul(kind.alpha * m, nx.mul(nx.power(1.0 - a, kind.gamma), nx.log(a)))
    neg = nx.mul((1.0 - kind.alpha) * (1.0 - m), nx.mul(nx.power(a, kind.gamma), nx.log(1.0 - a)))
    return nx.scale(nx.mean(pos + neg), -1.0)


def _overlap_sums(a: Node, m: np.ndarray):
    inter = nx.sum(nx.mul(a, m), axis=(1, 2))
    total_a = nx.sum(a, axis=(1, 2))
    total_m = m.sum(axis=(1, 2))
    return inter, total_a, total_m


def _dice(a: Node, m: np.ndarray, kind: LossKind) -> Node:
    inter, total_a, total_m = _overlap_sums(a, m)
    num = nx.scale(inter, 2.0) + SMOOTH
    den = total_a + (total_m + SMOOTH)
    return 1.0 - nx.mean(nx.mul(num, nx.power(den, -1.0)))


def _miou(a: Node, m: np.ndarray, kind: LossKind) -> Node:
    inter, total_a, total_m = _overlap_sums(a, m)
    num = inter + SMOOTH
    den = total_a - inter + (total_m + SMOOTH)
    return 1.0 - nx.mean(nx.mul(num, nx.power(den, -1.0)))


LOSSES = {"bce": _bce, "dice": _dice, "focal": _focal, "miou": _miou}


def attn_loss(fused: Node, mask, kind: LossKind | str = "bce") -> Node:
    """Batch-mean of the per-sample loss between (B, H, W) maps and binary masks."""
    if isinstance(kind, str):
        kind = LossKind(kind)
    m = np.asarray(mask, dtype=np.float64)
    if fused.value.ndim == 2:
        fused = nx.reshape(fused, (1, *fused.shape))
    if m.ndim == 2:
        m = m[None]
    if m.shape != fused.shape:
        raise ValueError(f"map shape {fused.shape} != mask shape {m.shape}")
    return LOSSES[kind.name](fused, m, kind)


@dataclass
class StepLoss:
    total: Node
    task: Node
    attn: Node
    fused: Node


def swim_step_loss(
    trace: ForwardTrace,
    spans,
    masks,
    selection: Sequence[int],
    fusion: Fusion | str,
    loss: LossKind | str,
    lam: float,
    task: Node,
    grid: tuple[int, int] | None = None,
) -> StepLoss:
    """task + lam * attention loss over extract -> resize -> fuse."""
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    if grid is None:
        lv = trace.attention[0].shape[-1]
        side = int(round(math.sqrt(lv)))
        if side * side != lv:
            raise ValueError("grid must be given for non-square visual token counts")
        grid = (side, side)
    maps = extract_noun_attention(trace, spans, grid)
    maps = resize_to_mask(maps, m.shape[-2:])
    fused = fuse(maps, selection, fusion)
    attn = attn_loss(fused, m, loss)
    total = task if lam == 0 else task + nx.scale(attn, lam)
    return StepLoss(total, task, attn, fused)
