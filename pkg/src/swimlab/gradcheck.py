"""Finite-difference suites for every differentiable path.

Each case builds a scalar from random inputs (outputs are contracted with a
random weight tensor so the whole Jacobian is exercised) and compares
``backward`` against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from swimlab import align
from swimlab import numerics as nx
from swimlab.model import ModelConfig, collate, forward, init_params, task_loss
from swimlab.numerics import Node, SeededRng

NUMERICS_TOL = 1e-4
MODEL_TOL = 1e-3
ALIGN_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    worst: float
    tolerance: float
    cases: int
    seconds: float
    worst_case: str = ""

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def _contract(out: Node, weights: np.ndarray) -> Node:
    return nx.sum(nx.mul(out, weights))


def _case(rng: np.random.Generator, build: Callable) -> tuple[Callable[[], Node], list[Node]]:
    inputs, op = build(rng)
    probe = op(*inputs)
    weights = rng.normal(size=probe.shape)
    return (lambda: _contract(op(*inputs), weights)), list(inputs)


def _p(rng, *shape, lo=-1.0, hi=1.0):
    return nx.param(rng.uniform(lo, hi, shape))


def _distinct(rng, shape, gap=1e-2):
    while True:
        x = rng.uniform(0.05, 0.95, shape)
        s = np.sort(x.reshape(-1))
        if np.all(np.diff(s) > gap):
            return x


NUMERIC_CASES: dict[str, Callable] = {
    "add": lambda r: ((_p(r, 3, 4), _p(r, 1, 4)), nx.add),
    "sub": lambda r: ((_p(r, 2, 3, 4), _p(r, 3, 4)), nx.sub),
    "mul": lambda r: ((_p(r, 3, 4), _p(r, 3, 1)), nx.mul),
    "scale": lambda r: ((_p(r, 3, 4),), lambda a: nx.scale(a, 2.5)),
    "exp": lambda r: ((_p(r, 3, 4),), nx.exp),
    "log": lambda r: ((_p(r, 3, 4, lo=0.2, hi=2.0),), nx.log),
    "power": lambda r: ((_p(r, 3, 4, lo=0.2, hi=2.0),), lambda a: nx.power(a, 2.0)),
    "power_neg": lambda r: ((_p(r, 3, 4, lo=0.5, hi=2.0),), lambda a: nx.power(a, -1.0)),
    "clamp": lambda r: ((nx.param(_distinct(r, (3, 4))),), lambda a: nx.clamp(a, 0.3, 0.7)),
    "gelu": lambda r: ((_p(r, 3, 4, lo=-3, hi=3),), nx.gelu),
    "matmul": lambda r: ((_p(r, 2, 3, 4), _p(r, 4, 5)), nx.matmul),
    "reshape": lambda r: ((_p(r, 3, 4),), lambda a: nx.reshape(a, (2, 6))),
    "permute": lambda r: ((_p(r, 2, 3, 4),), lambda a: nx.permute(a, (2, 0, 1))),
    "transpose": lambda r: ((_p(r, 2, 3, 4),), nx.transpose),
    "take": lambda r: ((_p(r, 4, 3),), lambda a: nx.take(a, (np.array([0, 2, 2]), np.array([1, 0, 0])))),
    "embed": lambda r: ((_p(r, 5, 3),), lambda a: nx.embed(a, np.array([[0, 4, 4], [1, 0, 2]]))),
    "stack": lambda r: ((_p(r, 3, 2), _p(r, 3, 2)), lambda a, b: nx.stack([a, b], axis=1)),
    "concat": lambda r: ((_p(r, 3, 2), _p(r, 3, 4)), lambda a, b: nx.concat([a, b], axis=-1)),
    "sum": lambda r: ((_p(r, 2, 3, 4),), lambda a: nx.sum(a, axis=(1, 2))),
    "mean": lambda r: ((_p(r, 2, 3, 4),), lambda a: nx.mean(a, axis=1)),
    "anchored_mean": lambda r: ((_p(r, 2, 3, 4),), lambda a: nx.anchored_mean(a, axis=1)),
    "amax": lambda r: ((nx.param(_distinct(r, (2, 3, 4), gap=1e-3)),), lambda a: nx.amax(a, axis=1)),
    "prod": lambda r: ((_p(r, 2, 3, 4, lo=0.1, hi=1.0),), lambda a: nx.prod(a, axis=1)),
    "softmax": lambda r: ((_p(r, 2, 3, 5, lo=-3, hi=3),), lambda a: nx.softmax(a, axis=-1)),
    "softmax_masked": lambda r: (
        (_p(r, 2, 4, 4, lo=-3, hi=3),),
        lambda a: nx.softmax(a, axis=-1, mask=np.tril(np.ones((4, 4), dtype=bool))),
    ),
    "softmax_row": lambda r: ((_p(r, 6, lo=-3, hi=3),), nx.softmax_row),
    "log_softmax": lambda r: ((_p(r, 3, 5, lo=-3, hi=3),), nx.log_softmax),
    "layer_norm": lambda r: ((_p(r, 2, 3, 6, lo=-2, hi=2), _p(r, 6, lo=0.5, hi=1.5)), nx.layer_norm),
    "cross_entropy": lambda r: ((_p(r, 4, 6, lo=-3, hi=3),), lambda a: nx.cross_entropy(a, np.array([0, 5, 2, 2]))),
    "bilinear_resize": lambda r: ((_p(r, 2, 3, 4),), lambda a: nx.bilinear_resize(a, 5, 7)),
}


def run_numerics(trials: int = 100, seed: int = 0, h: float = 1e-4) -> SuiteResult:
    start = time.perf_counter()
    worst, worst_case, cases = 0.0, "", 0
    for i, (name, build) in enumerate(NUMERIC_CASES.items()):
        rng = np.random.default_rng([seed, 0, i])
        for _ in range(trials):
            fn, inputs = _case(rng, build)
            err = nx.check_gradients(fn, inputs, h)
            cases += 1
            if err >= worst:
                worst, worst_case = err, name
    return SuiteResult("numerics", worst, NUMERICS_TOL, cases, time.perf_counter() - start, worst_case)


def tiny_model_case(seed: int = 0):
    """d=8, 2 layers, 2 heads, 3x3 grid, batch of 2, full SWIM objective."""
    rng = np.random.default_rng([seed, 1])
    cfg = ModelConfig(d=8, n_layers=2, n_heads=2, ffn_mult=2, vocab_size=11, visual_feature_dim=5, max_text_len=6)
    params = init_params(cfg, SeededRng([seed, 2]))
    for p in params.values():
        # larger weights than init so the check is not dominated by near-linear regimes
        p.value += rng.normal(0, 0.3, p.shape)
    tokens = [list(rng.integers(0, cfg.vocab_size, 5)), list(rng.integers(0, cfg.vocab_size, 4))]
    feats = [rng.uniform(0, 1, (9, 5)), rng.uniform(0, 1, (9, 5))]
    inp = collate(tokens, feats)
    spans = [(2, 3), (1, 1)]
    masks = (rng.uniform(size=(2, 3, 3)) < 0.4).astype(float)
    answers = rng.integers(0, cfg.vocab_size, 2)

    def fn():
        trace = forward(params, cfg, inp)
        task = task_loss(trace.logits, answers)
        return align.swim_step_loss(trace, spans, masks, [1, 2], "mean", "bce", 1.0, task, grid=(3, 3)).total

    return fn, list(params.values())


def run_model(seed: int = 0, h: float = 1e-4) -> SuiteResult:
    start = time.perf_counter()
    fn, inputs = tiny_model_case(seed)
    err = nx.check_gradients(fn, inputs, h)
    return SuiteResult("model", err, MODEL_TOL, 1, time.perf_counter() - start, "tiny swim objective")


def _align_cases(kind: str):
    def build(rng):
        fused = nx.param(rng.uniform(0.05, 0.95, (1, 4, 4)))
        mask = (rng.uniform(size=(1, 4, 4)) < 0.4).astype(float)
        mask[0, rng.integers(4), rng.integers(4)] = 1.0
        return fn_factory(fused, mask), [fused]

    def fn_factory(fused, mask):
        return lambda: align.attn_loss(fused, mask, kind)

    return build


def _fusion_case(method: str):
    def build(rng):
        hi = 0.3 if method == "add" else 0.95
        if method == "pool":
            maps = [nx.param(m) for m in _distinct(rng, (3, 1, 4, 4), gap=1e-4)]
        else:
            maps = [nx.param(rng.uniform(0.05, hi, (1, 4, 4))) for _ in range(3)]
        mask = (rng.uniform(size=(1, 4, 4)) < 0.4).astype(float)
        return (lambda: align.attn_loss(align.fuse(maps, [1, 2, 3], method), mask, "bce")), maps

    return build


def run_align(trials: int = 100, seed: int = 0, h: float = 1e-5) -> SuiteResult:
    start = time.perf_counter()
    worst, worst_case, cases = 0.0, "", 0
    builders = {f"loss:{k}": _align_cases(k) for k in align.LOSSES}
    builders.update({f"fusion:{m.value}": _fusion_case(m.value) for m in align.Fusion})
    for i, (name, build) in enumerate(builders.items()):
        rng = np.random.default_rng([seed, 2, i])
        for _ in range(trials):
            fn, inputs = build(rng)
            err = nx.check_gradients(fn, inputs, h)
            cases += 1
            if err >= worst:
                worst, worst_case = err, name
    return SuiteResult("align", worst, ALIGN_TOL, cases, time.perf_counter() - start, worst_case)


def run_all(trials: int = 100, seed: int = 0) -> list[SuiteResult]:
    return [run_numerics(trials, seed), run_model(seed), run_align(trials, seed)]
