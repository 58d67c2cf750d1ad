"""Command-line harness: gen-data, train, eval, ablate, gradcheck, plot.

Exit codes: 0 success, 1 user error (bad flags, missing files, malformed
input), 2 internal failure (including failed gradient checks).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from swimlab import align, experiment, gradcheck, metrics, plot
from swimlab.model import load_params, save_params
from swimlab.prompt import SynonymTable, default_vocabulary
from swimlab.scenes import generate_dataset, read_dataset, write_dataset

logger = logging.getLogger("swimlab")

STUDIES = ("layers", "fusion", "loss", "datascale")
ABLATION_SEEDS = (0, 1, 2)
SWEEP_METRICS = ("gp_p1", "gp_p5", "gp_p10", "auc", "nss", "ap", "precision")


class UserError(Exception):
    pass


def _pair(text: str, sep: str = ",") -> tuple[int, int]:
    parts = text.replace("x", sep).split(sep)
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected one or two integers, got {text!r}")
    return int(parts[0]), int(parts[1])


def _int_list(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _float_list(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s.strip()]


def _write_text(path: str | Path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise UserError(f"cannot write {path}: {exc.strerror}") from exc


def _read_records(path: str):
    if not path:
        raise UserError("dataset path is required")
    if not Path(path).is_file():
        raise UserError(f"dataset not found: {path}")
    return read_dataset(path)


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    vocab = default_vocabulary()
    synonyms = SynonymTable() if args.synonym_rate > 0 else None
    outputs = [(args.out, args.num, 0)]
    if args.eval_out:
        outputs.append((args.eval_out, args.num_eval, 1))
    for path, num, split in outputs:
        if num < 0:
            raise UserError("--num must be >= 0")
        if num == 0:
            logger.warning("writing empty dataset to %s", path)
        records = generate_dataset(
            args.seed,
            num,
            vocab,
            split=split,
            grid=args.grid,
            n_objects=args.objects,
            synonyms=synonyms,
            synonym_rate=args.synonym_rate,
        )
        try:
            write_dataset(records, path)
        except OSError as exc:
            raise UserError(f"cannot write {path}: {exc.strerror}") from exc
        print(f"wrote {len(records)} records to {path}")
    if args.vocab_out:
        _write_text(args.vocab_out, vocab.to_json() + "\n")
    return 0


# ---------------------------------------------------------------- train


_TRAIN_FLAGS = {
    "train": "train_path",
    "eval": "eval_path",
    "out": "model_out",
    "log": "log_out",
    "d": "d",
    "layers": "n_layers",
    "heads": "n_heads",
    "ffn_mult": "ffn_mult",
    "lr": "lr",
    "beta1": "beta1",
    "beta2": "beta2",
    "adam_eps": "adam_eps",
    "steps": "steps",
    "batch_size": "batch_size",
    "lam": "lam",
    "select": "select",
    "fusion": "fusion",
    "loss": "loss",
    "focal_alpha": "focal_alpha",
    "focal_gamma": "focal_gamma",
    "seed": "seed",
    "train_limit": "train_limit",
    "log_every": "log_every",
    "eval_every": "eval_every",
}


def run_config_from_args(args) -> experiment.RunConfig:
    """JSON file first (``--config``), then any flag given on the command line."""
    data: dict = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UserError(f"config not found: {args.config}") from None
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if "seed" not in data:
        raise UserError("--seed is required (no clock-based default)")
    try:
        cfg = experiment.RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UserError(str(exc)) from exc
    _check_selection(cfg)
    return cfg


def _check_selection(cfg: experiment.RunConfig) -> None:
    if cfg.select.startswith("even:"):
        k = int(cfg.select[5:])
        if k > cfg.n_layers:
            logger.warning("--select even:%d on a %d-layer model; using even:%d", k, cfg.n_layers, cfg.n_layers)
            cfg.select = f"even:{cfg.n_layers}"
    align.parse_selection(cfg.select, cfg.n_layers)
    align.Fusion(cfg.fusion)
    cfg.loss_kind()


def cmd_train(args) -> int:
    cfg = run_config_from_args(args)
    train_records = _read_records(cfg.train_path)
    eval_records = _read_records(cfg.eval_path) if cfg.eval_path else None
    if not train_records:
        raise UserError(f"no training records in {cfg.train_path}")
    params, model_cfg, log = experiment.train(cfg, train_records, eval_records=eval_records)
    save_params(params, model_cfg, cfg.model_out)
    _write_text(cfg.log_out, log.to_csv())
    last = log.rows[-1]
    print(
        f"trained {cfg.steps} steps: task {last['task_loss']:.4f} attn {last['attn_loss']:.4f}"
        f" -> {cfg.model_out}, log {cfg.log_out}"
    )
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    if not Path(args.model).is_file():
        raise UserError(f"model file not found: {args.model}")
    params, model_cfg = load_params(args.model)
    records = _read_records(args.data)
    if not records:
        raise UserError(f"no records in {args.data}")
    report = experiment.evaluate_dataset(
        params,
        model_cfg,
        records,
        select=args.select,
        fusion=args.fusion,
        p_list=args.p_list,
        k_list=args.k_list,
        tau=args.tau,
        synonyms=SynonymTable() if args.synonyms else None,
        seed=args.seed,
    )
    _write_text(args.out, report.to_csv())
    means = report.means()
    print(" ".join(f"{k}={'nan' if v is None else f'{v:.4f}'}" for k, v in means.items()))
    return 0


# ---------------------------------------------------------------- ablate


def study_variants(study: str, n_layers: int, sizes: list[int] | None = None) -> list[tuple[str, dict]]:
    """(variant label, RunConfig overrides) for one ablation study."""
    if study == "layers":
        specs = ["1", str(n_layers), "even:2", "all"]
        seen, out = set(), []
        for s in specs:
            key = tuple(align.parse_selection(s, n_layers))
            if key not in seen:
                seen.add(key)
                out.append((s, {"select": s}))
        return out
    if study == "fusion":
        return [(m.value, {"fusion": m.value}) for m in align.Fusion]
    if study == "loss":
        return [(k, {"loss": k}) for k in ("bce", "dice", "focal", "miou")]
    if study == "datascale":
        if not sizes:
            raise UserError("--sizes is required for the datascale study")
        return [(str(n), {"train_limit": n}) for n in sizes]
    raise UserError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")


def _ablation_run(job) -> dict:
    variant, seed, cfg, train_records, eval_records = job
    params, model_cfg, log = experiment.train(cfg, train_records)
    report = experiment.evaluate_dataset(
        params, model_cfg, eval_records, select=cfg.select, fusion=cfg.fusion, k_list=()
    )
    means = report.means()
    row = {"variant": variant, "seed": seed}
    row.update({m: means.get(m) for m in SWEEP_METRICS})
    row["task_loss"] = log.rows[-1]["task_loss"]
    row["attn_loss"] = log.rows[-1]["attn_loss"]
    return row


def run_ablation(
    study: str,
    base: experiment.RunConfig,
    seeds=ABLATION_SEEDS,
    sizes: list[int] | None = None,
    train_records=None,
    eval_records=None,
    num_train: int = 800,
    num_eval: int = 200,
    jobs: int = 1,
) -> list[dict]:
    """Rows for every (variant, seed), in variant-then-seed order, followed by per-variant means.

    Without explicit datasets each seed gets its own generated train/eval split.
    """
    variants = study_variants(study, base.n_layers, sizes)
    vocab = default_vocabulary()
    need = max(sizes) if study == "datascale" else num_train
    work = []
    for label, overrides in variants:
        for seed in seeds:
            tr = train_records if train_records is not None else generate_dataset(seed, need, vocab, split=0)
            ev = eval_records if eval_records is not None else generate_dataset(seed, num_eval, vocab, split=1)
            if study == "datascale" and len(tr) < overrides["train_limit"]:
                raise UserError(f"datascale size {overrides['train_limit']} exceeds {len(tr)} training records")
            cfg = replace(base, seed=seed, **overrides)
            work.append((label, seed, cfg, tr, ev))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_ablation_run, work))
    else:
        rows = [_ablation_run(w) for w in work]
    order = {label: i for i, (label, _) in enumerate(variants)}
    rows.sort(key=lambda r: (order[r["variant"]], r["seed"]))
    means = []
    for label, _ in variants:
        group = [r for r in rows if r["variant"] == label]
        mean = {"variant": label, "seed": "mean"}
        for col in (*SWEEP_METRICS, "task_loss", "attn_loss"):
            vals = [r[col] for r in group if r[col] is not None]
            mean[col] = math.fsum(vals) / len(vals) if vals else None
        means.append(mean)
    return rows + means


def sweep_csv(study: str, rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["study", "variant", "seed", *SWEEP_METRICS, "task_loss", "attn_loss"]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in rows:
        writer.writerow([study, *("" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols[1:])])
    return buf.getvalue()


def cmd_ablate(args) -> int:
    if args.study not in STUDIES:
        raise UserError(f"unknown study {args.study!r}; choose from {', '.join(STUDIES)}")
    base = run_config_from_args(args)
    train_records = _read_records(base.train_path) if base.train_path else None
    eval_records = _read_records(base.eval_path) if base.eval_path else None
    rows = run_ablation(
        args.study,
        base,
        seeds=tuple(args.seeds),
        sizes=args.sizes,
        train_records=train_records,
        eval_records=eval_records,
        num_train=args.num_train,
        num_eval=args.num_eval,
        jobs=args.jobs,
    )
    _write_text(args.out_csv, sweep_csv(args.study, rows))
    print(f"{len(rows)} rows -> {args.out_csv}")
    return 0


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(trials=args.trials, seed=args.seed)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(
            f"{status} {r.name}: worst relative error {r.worst:.3e} (< {r.tolerance:g}) "
            f"over {r.cases} case(s), worst in {r.worst_case}, {r.seconds:.1f}s"
        )
        ok &= r.passed
    return 0 if ok else 2


# ---------------------------------------------------------------- plot


def cmd_plot(args) -> int:
    where = {}
    for item in args.where or []:
        key, _, value = item.partition("=")
        where[key] = value
    if not Path(args.csv).is_file():
        raise UserError(f"CSV not found: {args.csv}")
    columns, rows = plot.read_csv(args.csv, where)
    if args.bars:
        svg = plot.bar_chart(columns, rows, args.bars.split(","), label=args.label, title=args.title)
    else:
        if not args.x or not args.y:
            raise UserError("line charts need --x and --y (or use --bars)")
        svg = plot.line_chart(columns, rows, args.x, args.y.split(","), title=args.title)
    _write_text(args.out, svg)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig; flags override its values")
    p.add_argument("--train", help="training JSONL")
    p.add_argument("--eval", help="evaluation JSONL")
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn-mult", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--adam-eps", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--select", help="even:k, all, default, or a comma list of 1-based layers")
    p.add_argument("--fusion", choices=[m.value for m in align.Fusion])
    p.add_argument("--loss", choices=sorted(align.LOSSES))
    p.add_argument("--focal-alpha", type=float)
    p.add_argument("--focal-gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-limit", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--eval-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swimlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic referring-expression datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=800)
    p.add_argument("--eval-out")
    p.add_argument("--num-eval", type=int, default=200)
    p.add_argument("--grid", type=_pair, default=(12, 12), help="N or HxW")
    p.add_argument("--objects", type=_pair, default=(3, 5), help="min,max objects per scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--synonym-rate", type=float, default=0.0, help="chance a tagged noun is written as a synonym")
    p.add_argument("--vocab-out", help="also write the vocabulary as JSON")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train with (lambda > 0) or without attention supervision")
    _add_run_flags(p)
    p.add_argument("--out", help="parameter file to write")
    p.add_argument("--log", help="training log CSV")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score fused noun attention against masks")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metric report CSV")
    p.add_argument("--select", default="default")
    p.add_argument("--fusion", default="mean", choices=[m.value for m in align.Fusion])
    p.add_argument("--p-list", type=_float_list, default=list(metrics.DEFAULT_P))
    p.add_argument("--k-list", type=_int_list, default=list(metrics.DEFAULT_K))
    p.add_argument("--tau", type=float, default=metrics.DEFAULT_TAU)
    p.add_argument("--synonyms", action="store_true", help="swap tagged nouns for synonyms before scoring")
    p.add_argument("--seed", type=int, default=0, help="seed for synonym choice")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="layer / fusion / loss / data-scale sweeps")
    _add_run_flags(p)
    p.add_argument("--study", required=True)
    p.add_argument("--sizes", type=_int_list)
    p.add_argument("--seeds", type=_int_list, default=list(ABLATION_SEEDS))
    p.add_argument("--num-train", type=int, default=800)
    p.add_argument("--num-eval", type=int, default=200)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", dest="out_csv", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every gradient path")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("plot", help="SVG chart from a CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--x")
    p.add_argument("--y", help="comma-separated columns for a line chart")
    p.add_argument("--bars", help="comma-separated columns for a grouped bar chart")
    p.add_argument("--label", help="row label column for bar charts")
    p.add_argument("--where", action="append", help="col=value row filter (repeatable)")
    p.add_argument("--title", default="")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "ablate":
        args.seed = 0 if args.seed is None else args.seed
    try:
        return args.fn(args)
    except (UserError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
