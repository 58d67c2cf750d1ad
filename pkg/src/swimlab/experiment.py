"""Training and evaluation drivers shared by the CLI and the scripts."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from swimlab import align, metrics
from swimlab import numerics as nx
from swimlab.model import ModelConfig, ModelInput, ModelParams, collate, forward, init_params, task_loss
from swimlab.numerics import SeededRng
from swimlab.prompt import SynonymTable, Vocabulary, default_vocabulary, perturb_synonyms, tokenize_and_locate
from swimlab.scenes import FEATURE_DIM, DatasetRecord, generate_dataset

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    train_path: str = ""
    eval_path: str = ""
    model_out: str = "model.swim"
    log_out: str = "train_log.csv"
    # model
    d: int = 32
    n_layers: int = 4
    n_heads: int = 2
    ffn_mult: int = 4
    max_text_len: int = 16
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 1500
    batch_size: int = 16
    # supervision
    lam: float = 1.0
    select: str = "default"
    fusion: str = "mean"
    loss: str = "bce"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    log_every: int = 50
    eval_every: int = 500
    train_limit: int = 0  # use only the first N training records when > 0

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            d=self.d,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            ffn_mult=self.ffn_mult,
            vocab_size=vocab_size,
            visual_feature_dim=FEATURE_DIM,
            max_text_len=self.max_text_len,
        )

    def loss_kind(self) -> align.LossKind:
        return align.LossKind(self.loss, self.focal_alpha, self.focal_gamma)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class Adam:
    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p.value -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# ---------------------------------------------------------------- encoding


@dataclass
class Encoded:
    """Model-ready arrays for a list of records. ``masks`` never reach the model."""

    tokens: list[list[int]]
    spans: list[tuple[int, int]]
    features: list[np.ndarray]
    answers: np.ndarray
    masks: np.ndarray
    grid: tuple[int, int]
    ids: list[int]

    def model_input(self, idx: Sequence[int]) -> ModelInput:
        return collate([self.tokens[i] for i in idx], [self.features[i] for i in idx])


def encode_records(
    records: Sequence[DatasetRecord],
    vocab: Vocabulary,
    synonyms: SynonymTable | None = None,
    seed: int = 0,
) -> Encoded:
    """Tokenize prompts and build features; with ``synonyms`` the tagged noun
    of every record is swapped for a seeded random synonym first."""
    if not records:
        raise ValueError("no records")
    grids = {(r.scene.grid_h, r.scene.grid_w) for r in records}
    if len(grids) != 1:
        raise ValueError(f"records mix grid sizes {sorted(grids)}")
    tokens, spans, feats, answers, masks = [], [], [], [], []
    for rec in records:
        prompt = rec.prompt_refined
        if synonyms is not None:
            prompt, _ = perturb_synonyms(prompt, synonyms, SeededRng([seed, 7, rec.id]))
        toks, span = tokenize_and_locate(prompt, vocab)
        tokens.append(toks)
        spans.append(span)
        feats.append(rec.scene.features())
        answers.append(vocab.id(rec.answer))
        masks.append(rec.mask.array())
    return Encoded(tokens, spans, feats, np.array(answers), np.stack(masks), grids.pop(), [r.id for r in records])


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "task_loss", "attn_loss", "total_loss", "eval_gp_p5")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join("" if r.get(c) is None else repr(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"


class TrainingDiverged(RuntimeError):
    pass


def train(
    cfg: RunConfig,
    train_records: Sequence[DatasetRecord],
    vocab: Vocabulary | None = None,
    eval_records: Sequence[DatasetRecord] | None = None,
) -> tuple[ModelParams, ModelConfig, TrainLog]:
    """Adam on the batch mean of task + lam * attention loss.

    lam = 0 gives the unsupervised baseline with the same init and batch order.
    """
    vocab = vocab or default_vocabulary()
    if cfg.train_limit > 0:
        train_records = train_records[: cfg.train_limit]
    data = encode_records(train_records, vocab)
    model_cfg = cfg.model_config(len(vocab))
    selection = align.parse_selection(cfg.select, model_cfg.n_layers)
    loss_kind = cfg.loss_kind()
    params = init_params(model_cfg, SeededRng([cfg.seed, 1]))
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    order_rng = SeededRng([cfg.seed, 2])
    eval_data = encode_records(eval_records, vocab) if eval_records else None

    n = len(train_records)
    batch = min(cfg.batch_size, n)
    order, cursor = order_rng.permutation(n), 0
    log = TrainLog()
    for step in range(1, cfg.steps + 1):
        if cursor + batch > n:
            order, cursor = order_rng.permutation(n), 0
        idx = order[cursor : cursor + batch]
        cursor += batch

        trace = forward(params, model_cfg, data.model_input(idx))
        task = task_loss(trace.logits, data.answers[idx])
        parts = align.swim_step_loss(
            trace,
            [data.spans[i] for i in idx],
            data.masks[idx],
            selection,
            cfg.fusion,
            loss_kind,
            cfg.lam,
            task,
            grid=data.grid,
        )
        total = float(parts.total.value)
        if not math.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        nx.backward(parts.total)
        opt.step()

        if step == 1 or step % cfg.log_every == 0 or step == cfg.steps:
            row = {
                "step": step,
                "task_loss": float(task.value),
                "attn_loss": float(parts.attn.value),
                "total_loss": total,
                "eval_gp_p5": None,
            }
            if eval_data is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
                report = evaluate_encoded(params, model_cfg, eval_data, selection, cfg.fusion, p_list=(5,), k_list=())
                row["eval_gp_p5"] = report.means()["gp_p5"]
            log.rows.append(row)
            logger.debug("step %d task %.4f attn %.4f", step, row["task_loss"], row["attn_loss"])
    return params, model_cfg, log


# ---------------------------------------------------------------- evaluation


def fused_maps(
    params: ModelParams,
    model_cfg: ModelConfig,
    data: Encoded,
    selection: Sequence[int],
    fusion: str = "mean",
    batch_size: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Fused noun attention maps (N, H, W) and answer logits (N, V); no mask is read."""
    maps, logits = [], []
    h, w = data.masks.shape[-2:]
    for start in range(0, len(data.tokens), batch_size):
        idx = list(range(start, min(start + batch_size, len(data.tokens))))
        trace = forward(params, model_cfg, data.model_input(idx))
        layer_maps = align.extract_noun_attention(trace, [data.spans[i] for i in idx], data.grid)
        layer_maps = align.resize_to_mask(layer_maps, (h, w))
        maps.append(align.fuse(layer_maps, selection, fusion).value)
        logits.append(trace.logits.value)
    return np.concatenate(maps), np.concatenate(logits)


def evaluate_encoded(
    params: ModelParams,
    model_cfg: ModelConfig,
    data: Encoded,
    selection: Sequence[int],
    fusion: str = "mean",
    p_list: Sequence[float] = metrics.DEFAULT_P,
    k_list: Sequence[int] = metrics.DEFAULT_K,
    tau: float = metrics.DEFAULT_TAU,
) -> metrics.MetricReport:
    maps, _ = fused_maps(params, model_cfg, data, selection, fusion)
    hw = maps.shape[1] * maps.shape[2]
    k_list = [k for k in k_list if k <= hw]
    report = metrics.MetricReport(metrics.metric_columns(p_list, k_list))
    for sid, fmap, mask in zip(data.ids, maps, data.masks):
        values, flags = metrics.score_map(fmap, mask, p_list, k_list, tau)
        report.add(sid, values, flags)
    return report


def evaluate_dataset(
    params: ModelParams,
    model_cfg: ModelConfig,
    records: Sequence[DatasetRecord],
    vocab: Vocabulary | None = None,
    select: str | Sequence[int] = "default",
    fusion: str = "mean",
    p_list: Sequence[float] = metrics.DEFAULT_P,
    k_list: Sequence[int] = metrics.DEFAULT_K,
    tau: float = metrics.DEFAULT_TAU,
    synonyms: SynonymTable | None = None,
    seed: int = 0,
) -> metrics.MetricReport:
    if not records:
        raise ValueError("evaluation needs at least one record")
    vocab = vocab or default_vocabulary()
    data = encode_records(records, vocab, synonyms, seed)
    selection = align.parse_selection(select, model_cfg.n_layers)
    return evaluate_encoded(params, model_cfg, data, selection, fusion, p_list, k_list, tau)


def answer_accuracy(params: ModelParams, model_cfg: ModelConfig, records, vocab: Vocabulary | None = None) -> float:
    vocab = vocab or default_vocabulary()
    data = encode_records(records, vocab)
    _, logits = fused_maps(params, model_cfg, data, [1])
    return float(np.mean(logits.argmax(axis=1) == data.answers))


# ---------------------------------------------------------------- desk runs


@dataclass
class DeskResult:
    seed: int
    config: RunConfig
    plain: dict
    synonym: dict
    accuracy: float
    seconds: float


def desk_run(
    seed: int,
    num_train: int = 800,
    num_eval: int = 200,
    synonym_rate: float = 0.0,
    **overrides,
) -> DeskResult:
    """Generate the default desk datasets for ``seed``, train, and score the eval split
    both as written and with every tagged noun swapped for a synonym."""
    start = time.perf_counter()
    vocab = default_vocabulary()
    table = SynonymTable() if synonym_rate > 0 else None
    train_records = generate_dataset(seed, num_train, vocab, split=0, synonyms=table, synonym_rate=synonym_rate)
    eval_records = generate_dataset(seed, num_eval, vocab, split=1)
    cfg = RunConfig(seed=seed, **overrides)
    params, model_cfg, _ = train(cfg, train_records, vocab)
    kw = dict(select=cfg.select, fusion=cfg.fusion, k_list=())
    plain = evaluate_dataset(params, model_cfg, eval_records, vocab, **kw).means()
    synonym = evaluate_dataset(params, model_cfg, eval_records, vocab, synonyms=SynonymTable(), seed=seed, **kw).means()
    acc = answer_accuracy(params, model_cfg, eval_records, vocab)
    return DeskResult(seed, cfg, plain, synonym, acc, time.perf_counter() - start)
