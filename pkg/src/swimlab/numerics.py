"""Dense float64 arithmetic with a reverse-mode tape.

Every operation takes and returns :class:`Node` objects wrapping numpy arrays.
A node remembers its parents and a closure mapping the upstream gradient to
one gradient per parent; :func:`backward` walks the graph in reverse
topological order and accumulates into ``Node.grad``.

Graphs are rebuilt on every forward pass. A graph must stay on one thread.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Node:
    """A value in the computation graph.

    ``grad`` is ``None`` until the first backward pass reaches the node.
    Leaves created with ``requires_grad=True`` act as trainable parameters.
    """

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: tuple[Node, ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
        requires_grad: bool = False,
        name: str = "",
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def param(value, name: str = "") -> Node:
    return Node(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def const(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(value)


def _node(value, parents, backward_fn) -> Node:
    # Skip closures entirely when nothing upstream needs a gradient.
    if not any(p.requires_grad for p in parents):
        return Node(value)
    return Node(value, parents, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- backward


def backward(root: Node, seed_grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(node) into every node reachable from ``root``.

    Gradients add onto whatever is already stored; call ``zero_grad`` on
    parameters between steps. ``root`` must hold a single element.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")

    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))

    # Intermediate gradients live here; only leaves keep theirs on the node.
    grads: dict[int, np.ndarray] = {
        id(root): np.ones_like(root.value) if seed_grad is None else seed_grad
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    return _node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Node, c: float) -> Node:
    return _node(a.value * c, (a,), lambda g: (g * c,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,))


def power(a: Node, p: float) -> Node:
    """``a ** p`` for a constant exponent; ``a`` must be positive unless p is integral."""
    av = a.value
    if p == 0:
        return _node(np.ones_like(av), (a,), lambda g: (np.zeros_like(av),))
    return _node(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def clamp(a: Node, lo: float, hi: float) -> Node:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _node(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Node) -> Node:
    """Tanh approximation of GELU."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), fn)


# ---------------------------------------------------------------- shape ops


def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    av, bv = a.value, b.value

    def fn(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node(av @ bv, (a, b), fn)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    orig = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def permute(a: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def transpose(a: Node) -> Node:
    """Swap the last two axes."""
    return _node(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def take(a: Node, index) -> Node:
    """Numpy-style indexing; repeated indices accumulate in backward."""
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.value[index], (a,), fn)


def embed(table: Node, ids: np.ndarray) -> Node:
    """Row lookup ``table[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids)
    shape = table.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _node(table.value[ids], (table,), fn)


def stack(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = [const(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return _node(out, tuple(nodes), fn)


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = [const(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([n.value for n in nodes], axis=axis),
        tuple(nodes),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# ---------------------------------------------------------------- reductions


def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    count = a.value.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def anchored_mean(a: Node, axis: int = 0) -> Node:
    """Mean along ``axis`` computed as ``first + mean(x - first)``.

    Same derivative as the plain mean, but averaging k identical slices gives
    back that slice bit for bit, which ``sum / k`` does not.
    """
    x = a.value
    k = x.shape[axis]
    first = np.take(x, [0], axis=axis)
    out = np.take(x, 0, axis=axis) + (x - first).sum(axis=axis) / k
    shape = a.shape
    return _node(
        out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis) / k, shape).copy(),)
    )


def amax(a: Node, axis: int = 0) -> Node:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = a.value
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis=axis).squeeze(axis)

    def fn(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node(out, (a,), fn)


def prod(a: Node, axis: int = 0) -> Node:
    """Product along ``axis``; backward uses exclusive products so zeros are safe."""
    x = np.moveaxis(a.value, axis, 0)
    k = x.shape[0]
    out = np.prod(x, axis=0)

    def fn(g):
        left = np.ones_like(x)
        right = np.ones_like(x)
        for i in range(1, k):
            left[i] = left[i - 1] * x[i - 1]
            right[k - 1 - i] = right[k - i] * x[k - i]
        return (np.moveaxis(g * left * right, 0, axis),)

    return _node(out, (a,), fn)


# ---------------------------------------------------------------- softmax family


def softmax(a: Node, axis: int = -1, mask: np.ndarray | None = None) -> Node:
    """Softmax with max-subtraction. ``mask`` (bool, broadcastable) marks allowed keys."""
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (a,), fn)


def softmax_row(logits):
    """Probability vector of a 1-D logit vector.

    Accepts plain sequences (returns an ndarray) or a :class:`Node`
    (returns a node on the graph).
    """
    if isinstance(logits, Node):
        if logits.value.size == 0:
            raise ValueError("empty logits")
        return softmax(logits, axis=-1)
    x = np.asarray(logits, dtype=DTYPE)
    if x.size == 0:
        raise ValueError("empty logits")
    e = np.exp(x - x.max())
    return e / e.sum()


def log_softmax(a: Node, axis: int = -1) -> Node:
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Node, gain: Node, eps: float = 1e-5) -> Node:
    """Normalize over the last axis and scale by ``gain`` (no bias)."""
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def fn(g):
        gxhat = g * gv
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = _unbroadcast(g * xhat, gv.shape)
        return gx, ggain

    return _node(xhat * gv, (x, gain), fn)


def cross_entropy(logits: Node, targets: np.ndarray) -> Node:
    """Mean of -log softmax(logits)[target] over the leading axis of (B, V) logits."""
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(targets.shape[0])
    return scale(sum(take(lp, (rows, targets))), -1.0 / targets.shape[0])


# ---------------------------------------------------------------- interpolation


def interp_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) align-corners linear interpolation weights along one axis."""
    if src < 1 or dst < 1:
        raise ValueError(f"interpolation sizes must be >= 1, got {src} -> {dst}")
    w = np.zeros((dst, src), dtype=DTYPE)
    if src == 1:
        w[:, 0] = 1.0
        return w
    if dst == 1:
        w[0, 0] = 1.0
        return w
    pos = np.arange(dst, dtype=DTYPE) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    w[rows, lo] = 1.0 - frac
    w[rows, lo + 1] += frac
    return w


def bilinear_resize(grid, target_h: int, target_w: int):
    """Align-corners bilinear resize of the last two axes.

    Works on ndarrays (returns ndarray) and on nodes (stays on the graph).
    Same-shape resizes return the input unchanged.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    is_node = isinstance(grid, Node)
    value = grid.value if is_node else np.asarray(grid, dtype=DTYPE)
    h, w = value.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("source grid is empty")
    if (h, w) == (target_h, target_w):
        return grid if is_node else value.copy()
    rh = interp_matrix(h, target_h)
    rw = interp_matrix(w, target_w)
    if is_node:
        return matmul(matmul(const(rh), grid), const(rw.T))
    return rh @ value @ rw.T


# ---------------------------------------------------------------- rng


class SeededRng:
    """Thin wrapper over numpy's PCG64 generator that counts draws."""

    def __init__(self, seed: int | Sequence[int]):
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(seed))
        self.draws = 0

    def uniform(self, low=0.0, high=1.0, size=None):
        self.draws += 1 if size is None else int(np.prod(size))
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.draws += 1 if size is None else int(np.prod(size))
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        self.draws += 1 if size is None else int(np.prod(size))
        return self.generator.integers(low, high, size)

    def choice(self, n: int):
        """Uniform index in ``range(n)``."""
        self.draws += 1
        return int(self.generator.integers(0, n))

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self.generator.permutation(n)

    def spawn(self, *key: int) -> SeededRng:
        base = list(self.seed) if isinstance(self.seed, (list, tuple)) else [self.seed]
        return SeededRng(base + list(key))


# ---------------------------------------------------------------- gradient checking


def numeric_grad(fn: Callable[[], Node], x: Node, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``x.value``."""
    grad = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().value)
        flat[i] = orig - h
        fm = float(fn().value)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max absolute discrepancy scaled by the larger of the two gradients' max magnitude."""
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale_)


def check_gradients(
    fn: Callable[[], Node], inputs: Iterable[Node], h: float = 1e-4
) -> float:
    """Worst relative error between backward() and finite differences over ``inputs``."""
    inputs = list(inputs)
    for x in inputs:
        x.zero_grad()
    root = fn()
    backward(root)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.value)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, x, h)))
    return worst
