"""``scouter`` command line: train, explain, metrics, ablate.

Every command writes into one run directory holding the resolved config
echo and its artifacts. Exit codes: 0 on success, 2 for usage, config, or
prerequisite errors, 1 for anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from typing import List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from .config import TrainConfig, dump_config, load_config
from .data import Dataset, find_mnist, ink_bboxes, load_image_dir, load_mnist, load_taxonomy
from .errors import ConfigError, PrerequisiteError, ScouterError
from .explain import heatmap_from_attention, render
from .metrics import EXPLANATION_METRICS, ModelAdapter, evaluate, parallelism, select_classes
from .trainer import EpochRecord, TrainState, load_checkpoint, save_checkpoint, train, write_log

log = logging.getLogger("scouter")

CONFIG_ECHO = "config.toml"
LOG_FILE = "log.csv"
CHECKPOINT_FILE = "checkpoint.ckpt"
ABLATION_VARIANTS = {
    "full": {},
    "no_gru": {"xslot.use_gru": False},
    "no_pe": {"xslot.use_pe": False},
}


class UsageFailure(Exception):
    """Bad invocation that argparse itself cannot detect."""


# ---------------------------------------------------------------- helpers


def prepare_run_dir(path: str, force: bool) -> str:
    if os.path.exists(path) and os.listdir(path):
        if not force:
            raise UsageFailure(f"run directory {path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def datasets_for(config: TrainConfig) -> Tuple[Dataset, Dataset]:
    """Train and test sets named by the config's data section (test boxes filled in for digits)."""
    d = config.data
    if d.kind == "mnist":
        root = find_mnist(d.root)
        if root is None:
            raise ConfigError("MNIST IDX files not found; set data.root or $SCOUTER_MNIST_DIR")
        train_set = load_mnist(root, "train").head(d.train_subset)
        test_set = load_mnist(root, "test").head(d.test_subset)
        test_set.bboxes = ink_bboxes(test_set.images)
        return train_set, test_set
    if not d.root or not d.manifest or not d.test_manifest:
        raise ConfigError("image_dir data needs data.root, data.manifest, and data.test_manifest")
    size = tuple(d.image_size) if d.image_size else None
    train_set = load_image_dir(d.root, d.manifest, size).head(d.train_subset)
    test_set = load_image_dir(d.root, d.test_manifest, size).head(d.test_subset)
    return train_set, test_set


def resolve_path(path: Optional[str], args) -> Optional[str]:
    """``path`` as given if it exists, else relative to the directory of ``--config``."""
    if not path or os.path.isabs(path) or os.path.exists(path) or not getattr(args, "config", None):
        return path
    return os.path.join(os.path.dirname(os.path.abspath(args.config)), path)


def taxonomy_for(args, config: TrainConfig):
    path = resolve_path(args.taxonomy or config.data.taxonomy, args)
    return load_taxonomy(path, config.data.category_names) if path else None


def resolve_config(args) -> TrainConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def run_training(config: TrainConfig, run_dir: str, train_set: Dataset, test_set: Dataset) -> TrainState:
    with open(os.path.join(run_dir, CONFIG_ECHO), "w") as fh:
        fh.write(dump_config(config))
    log_path = os.path.join(run_dir, LOG_FILE)

    def on_epoch(rec: EpochRecord, state: TrainState) -> None:
        write_log(log_path, state.history)

    # single BLAS thread keeps every reduction order, and so every bit, fixed
    with threadpool_limits(limits=1):
        state = train(config, train_set, test_set, on_epoch=on_epoch)
    save_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE), state)
    return state


def _default_out(args, stem: str) -> str:
    if args.out:
        return args.out
    base = os.path.splitext(os.path.basename(args.config or args.checkpoint or "run"))[0]
    return os.path.join("runs", f"{base}-{stem}")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    config = resolve_config(args)
    run_dir = prepare_run_dir(_default_out(args, f"seed{config.seed}"), args.force)
    train_set, test_set = datasets_for(config)
    state = run_training(config, run_dir, train_set, test_set)
    last = state.history[-1]
    print(f"{run_dir}: epoch {last.epoch} test_acc {last.test_acc:.4f}")
    return 0


def _load_model(args):
    state = load_checkpoint(args.checkpoint)
    config = state.config
    if args.config:
        data_cfg = load_config(args.config).data
        config = config.replace(**{f"data.{k}": v for k, v in data_cfg.__dict__.items() if v is not None})
    return state.model, config


def cmd_explain(args) -> int:
    model, config = _load_model(args)
    if not model.is_scouter:
        raise ConfigError("explain needs a checkpoint with the scouter head")
    taxonomy = taxonomy_for(args, config)
    selector = args.class_selector or "gt"
    if selector == "lsc" and taxonomy is None:
        raise ConfigError("class selector 'lsc' needs --taxonomy or data.taxonomy")
    _, test_set = datasets_for(config)
    indices = args.index if args.index else list(range(min(8, len(test_set))))
    subset = test_set.subset(indices)
    classes = select_classes(selector, subset.labels, config.model.n_classes, taxonomy)
    adapter = ModelAdapter(model, config.data.mean, config.data.std)
    run_dir = prepare_run_dir(_default_out(args, "explain"), args.force)
    with open(os.path.join(run_dir, CONFIG_ECHO), "w") as fh:
        fh.write(dump_config(config))
    attn = adapter.attention(subset.images)
    for k, (i, c) in enumerate(zip(indices, classes)):
        hm = heatmap_from_attention(attn[k, c], attn.shape[2:], subset.images.shape[-2:], int(c),
                                    config.model.xslot.e)
        stem = os.path.join(run_dir, f"image{i}_class{int(c)}")
        render(hm, subset.images[k], stem + "_raw.pgm", "raw")
        render(hm, subset.images[k], stem + "_overlay.ppm", "overlay")
    print(f"{run_dir}: {len(indices)} heatmaps")
    return 0


def _parse_metrics(text: str) -> List[str]:
    names = [m.strip() for m in text.split(",") if m.strip()]
    if names == ["all"]:
        return list(EXPLANATION_METRICS) + ["classification"]
    return names


def _default_selector(config: TrainConfig, taxonomy) -> str:
    # negative explanations are judged on the least similar class when a taxonomy exists
    return "lsc" if config.model.xslot.e == -1 and taxonomy is not None else "gt"


def cmd_metrics(args) -> int:
    model, config = _load_model(args)
    taxonomy = taxonomy_for(args, config)
    metrics = _parse_metrics(args.metrics)
    _, test_set = datasets_for(config)
    test_set = test_set.head(args.limit)
    selector = args.class_selector or _default_selector(config, taxonomy)
    adapter = ModelAdapter(model, config.data.mean, config.data.std)
    needs_attention = any(m in metrics for m in EXPLANATION_METRICS if m != "similarity")
    if needs_attention and not model.is_scouter:
        raise ConfigError("explanation metrics need a checkpoint with the scouter head")
    run_dir = prepare_run_dir(_default_out(args, "metrics"), args.force)
    report = evaluate(adapter, test_set, metrics, selector, taxonomy, seed=args.metric_seed,
                      threads=parallelism())
    report.write(os.path.join(run_dir, "metrics.csv"), os.path.join(run_dir, "metrics.json"))
    for name, agg in report.aggregate().items():
        mean = "n/a" if agg["mean"] is None else f"{agg['mean']:.4f}"
        print(f"{name:>16} {mean} (n={agg['count']}, skipped={agg['skipped']})")
    return 0


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    seeds = args.seeds if args.seeds else [base.seed]
    root = prepare_run_dir(_default_out(args, "ablate"), args.force)
    train_set, test_set = datasets_for(base)
    eval_set = test_set.head(args.eval_limit)
    metrics = ["iauc", "dauc"] + (["precision"] if eval_set.has_bboxes else [])
    rows = []
    for name, overrides in ABLATION_VARIANTS.items():
        for seed in seeds:
            config = base.replace(seed=seed, **overrides)
            run_dir = prepare_run_dir(os.path.join(root, f"{name}-seed{seed}"), True)
            state = run_training(config, run_dir, train_set, test_set)
            adapter = ModelAdapter(state.model, config.data.mean, config.data.std)
            agg = evaluate(adapter, eval_set, metrics, "gt", seed=args.metric_seed,
                           threads=parallelism()).aggregate()
            rows.append({
                "variant": name,
                "seed": seed,
                "accuracy": state.history[-1].test_acc,
                **{m: agg[m]["mean"] for m in metrics},
            })
    cols = ["variant", "seed", "accuracy"] + metrics
    with open(os.path.join(root, "ablation.csv"), "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) if not isinstance(r[c], float) else repr(r[c]) for c in cols) + "\n")
    summary = {}
    for name in ABLATION_VARIANTS:
        sel = [r for r in rows if r["variant"] == name]
        summary[name] = {c: float(np.mean([r[c] for r in sel])) for c in cols[2:]}
    with open(os.path.join(root, "ablation.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{'variant':<8} " + " ".join(f"{c:>10}" for c in cols[2:]))
    for name, vals in summary.items():
        print(f"{name:<8} " + " ".join(f"{vals[c]:>10.4f}" for c in cols[2:]))
    return 0


# ---------------------------------------------------------------- parser


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scouter", description="Slot-attention explainable classifier")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--seed", type=_seed, help="overrides train.seed")
    common.add_argument("--out", help="run directory (default runs/<name>-<command>)")
    common.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.set_defaults(func=cmd_train, need_config=True)

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument("--checkpoint", required=True)
    model_args.add_argument("--taxonomy", help="category tree file (id parent_id name per line)")
    model_args.add_argument("--class", dest="class_selector", help="gt, lsc, or a class index")

    p = sub.add_parser("explain", parents=[common, model_args], help="render heatmaps")
    p.add_argument("--index", type=int, nargs="+", help="test-set image indices (default: first 8)")
    p.set_defaults(func=cmd_explain, need_config=False)

    p = sub.add_parser("metrics", parents=[common, model_args], help="explanation and classification metrics")
    p.add_argument("--metrics", default="all", help=f"comma list from {', '.join(EXPLANATION_METRICS)}, "
                                                    "classification, or 'all'")
    p.add_argument("--limit", type=int, help="evaluate only the first N test images")
    p.add_argument("--metric-seed", type=int, default=0)
    p.set_defaults(func=cmd_metrics, need_config=False)

    p = sub.add_parser("ablate", parents=[common], help="train full, no-GRU, and no-PE variants")
    p.add_argument("--seeds", type=_seed, nargs="+", help="seeds to average over (default: --seed)")
    p.add_argument("--eval-limit", type=int, default=200, help="test images used for heatmap metrics")
    p.add_argument("--metric-seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate, need_config=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.need_config and not args.config:
        parser.error(f"{args.command} needs --config")
    try:
        return args.func(args)
    except (UsageFailure, ConfigError, PrerequisiteError) as err:
        print(f"scouter {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    except (ScouterError, OSError, ValueError, IndexError, KeyError) as err:
        print(f"scouter {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
