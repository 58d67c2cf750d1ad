"""Toy text-to-visual cross-attention transformer.

Each block: pre-norm causal self-attention over text, pre-norm cross-attention
from text queries to visual keys/values, pre-norm feed-forward, all residual.
Visual tokens are a linear projection of per-cell scene features and are not
updated between blocks. The answer is read from the last real text position.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from swimlab import numerics as nx
from swimlab.numerics import Node, SeededRng

MAGIC = b"SWIM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    n_layers: int = 4
    n_heads: int = 2
    ffn_mult: int = 4
    vocab_size: int = 32
    visual_feature_dim: int = 12
    max_text_len: int = 16

    def __post_init__(self):
        for name in ("d", "n_layers", "n_heads", "ffn_mult", "vocab_size", "visual_feature_dim", "max_text_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


@dataclass
class ModelInput:
    """Everything the forward pass may see. Masks are deliberately absent."""

    ids: np.ndarray  # (B, T) int, right-padded
    lengths: np.ndarray  # (B,)
    features: np.ndarray  # (B, L_v, F)


@dataclass
class ForwardTrace:
    logits: Node  # (B, vocab)
    attention: list[Node]  # per layer, (B, heads, T, L_v) cross-attention probabilities

    @property
    def n_layers(self) -> int:
        return len(self.attention)


ModelParams = dict  # name -> Node; insertion order is the canonical order


def _layer_names(l: int) -> list[str]:
    p = f"layer{l}."
    return [
        p + n
        for n in (
            "norm_self",
            "self_q",
            "self_k",
            "self_v",
            "self_o",
            "norm_cross",
            "cross_q",
            "cross_k",
            "cross_v",
            "cross_o",
            "norm_ffn",
            "ffn_in",
            "ffn_out",
        )
    ]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hidden = cfg.d, cfg.d * cfg.ffn_mult
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_text_len, d),
        "vis_proj": (cfg.visual_feature_dim, d),
    }
    for l in range(cfg.n_layers):
        names = _layer_names(l)
        for name in names:
            kind = name.split(".")[1]
            if kind.startswith("norm"):
                shapes[name] = (d,)
            elif kind == "ffn_in":
                shapes[name] = (d, hidden)
            elif kind == "ffn_out":
                shapes[name] = (hidden, d)
            else:
                shapes[name] = (d, d)
    shapes["final_norm"] = (d,)
    shapes["head"] = (d, cfg.vocab_size)
    return shapes


def init_params(cfg: ModelConfig, rng: SeededRng) -> ModelParams:
    """Glorot-uniform matrices, N(0, 0.02) embeddings, unit norm gains."""
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_emb"):
            value = rng.normal(0.0, 0.02, shape)
        elif len(shape) == 1:
            value = np.ones(shape)
        else:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-a, a, shape)
        params[name] = nx.param(value, name)
    return params


def _split_heads(x: Node, n_heads: int) -> Node:
    b, t, d = x.shape
    return nx.permute(nx.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Node) -> Node:
    b, h, t, dh = x.shape
    return nx.reshape(nx.permute(x, (0, 2, 1, 3)), (b, t, h * dh))


def forward(params: ModelParams, cfg: ModelConfig, inp: ModelInput) -> ForwardTrace:
    ids = np.asarray(inp.ids)
    b, t = ids.shape
    if t > cfg.max_text_len:
        raise ValueError(f"text length {t} exceeds max_text_len={cfg.max_text_len}")
    feats = np.asarray(inp.features, dtype=np.float64)
    if feats.shape[0] != b or feats.shape[-1] != cfg.visual_feature_dim:
        raise ValueError(
            f"visual features have shape {feats.shape}, expected ({b}, L_v, {cfg.visual_feature_dim})"
        )
    H, dh = cfg.n_heads, cfg.d_head
    inv_scale = 1.0 / math.sqrt(dh)

    x = nx.embed(params["tok_emb"], ids) + params["pos_emb"][:t]
    vis = nx.const(feats) @ params["vis_proj"]  # (B, L_v, d)
    causal = np.tril(np.ones((t, t), dtype=bool))

    attention = []
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        h = nx.layer_norm(x, params[p + "norm_self"])
        q = _split_heads(h @ params[p + "self_q"], H)
        k = _split_heads(h @ params[p + "self_k"], H)
        v = _split_heads(h @ params[p + "self_v"], H)
        scores = nx.scale(q @ nx.transpose(k), inv_scale)
        attn = nx.softmax(scores, axis=-1, mask=causal)
        x = x + _merge_heads(attn @ v) @ params[p + "self_o"]

        h = nx.layer_norm(x, params[p + "norm_cross"])
        q = _split_heads(h @ params[p + "cross_q"], H)
        k = _split_heads(vis @ params[p + "cross_k"], H)
        v = _split_heads(vis @ params[p + "cross_v"], H)
        cross = nx.softmax(nx.scale(q @ nx.transpose(k), inv_scale), axis=-1)
        attention.append(cross)
        x = x + _merge_heads(cross @ v) @ params[p + "cross_o"]

        h = nx.layer_norm(x, params[p + "norm_ffn"])
        x = x + nx.gelu(h @ params[p + "ffn_in"]) @ params[p + "ffn_out"]

    x = nx.layer_norm(x, params["final_norm"])
    last = np.asarray(inp.lengths) - 1
    final = nx.take(x, (np.arange(b), last))  # (B, d)
    return ForwardTrace(final @ params["head"], attention)


def task_loss(logits: Node, answer_ids) -> Node:
    """Mean cross-entropy of the answer ids under the logits."""
    answer_ids = np.atleast_1d(np.asarray(answer_ids))
    if logits.value.ndim == 1:
        logits = nx.reshape(logits, (1, -1))
    vocab = logits.shape[-1]
    if np.any(answer_ids < 0) or np.any(answer_ids >= vocab):
        raise ValueError(f"answer id out of range for vocab of {vocab}")
    return nx.cross_entropy(logits, answer_ids)


def collate(token_lists: Sequence[Sequence[int]], features: Sequence[np.ndarray], pad_id: int = 0) -> ModelInput:
    lengths = np.array([len(t) for t in token_lists])
    if np.any(lengths < 1):
        raise ValueError("empty prompt")
    ids = np.full((len(token_lists), lengths.max()), pad_id, dtype=np.int64)
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
    return ModelInput(ids, lengths, np.stack(features))


# ---------------------------------------------------------------- persistence


def save_params(params: ModelParams, cfg: ModelConfig, path: str | Path) -> None:
    """Binary layout: magic, u32 version, u32 config length + JSON, u32 count,
    then per array: u16 name length, name, u8 ndim, u32 dims, <f8 data."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params)))
    for name, node in params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        arr = np.ascontiguousarray(node.value, dtype="<f8")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_params(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    data = Path(path).read_bytes()
    pos = 0

    def read(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated parameter file")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if read(4) != MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    (version,) = struct.unpack("<I", read(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    (clen,) = struct.unpack("<I", read(4))
    cfg = ModelConfig(**json.loads(read(clen)))
    expected = param_shapes(cfg)
    (count,) = struct.unpack("<I", read(4))
    params: ModelParams = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", read(2))
        name = read(nlen).decode()
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        if expected.get(name) != tuple(shape):
            raise ValueError(f"{path}: array {name!r} has shape {shape}, config implies {expected.get(name)}")
        size = int(np.prod(shape))
        arr = np.frombuffer(read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = nx.param(arr, name)
    if set(params) != set(expected):
        raise ValueError(f"{path}: missing arrays {sorted(set(expected) - set(params))}")
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return params, cfg
