"""Command-line entry point for batch experiments.

Subcommands: gen (datasets), train, eval, reproduce (paper tables),
corpus-predict, gradcheck. All logging goes to stderr; outputs land at the
paths given by --out. Exit codes: 0 success, 1 run failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .autodiff import run_registered_gradchecks
from .corpus import CorpusError, ingest_symbols, ingest_text, windowize
from .harness import (
    Grid,
    corpus_predict,
    fast_config,
    grid_search,
    reproduce_table,
    run_simulations,
    write_manifest,
    write_report,
)
from .models import (
    ARCHITECTURES,
    RBP_VARIANTS,
    ConfigError,
    TrainingDivergedError,
    evaluate,
    load_model,
    save_model,
    train,
)
from .patterns import (
    ALL_TASKS,
    DatasetError,
    TaskSpec,
    build_task,
    load_dataset,
    save_dataset,
)

logger = logging.getLogger("rbplab")

_HYPER_KEYS = ("hidden_size", "hidden_layers", "learning_rate", "dropout",
               "epochs", "head_hidden", "batch_size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbplab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rbplab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="build a synthetic task dataset")
    gen.add_argument("--task", required=True, choices=ALL_TASKS)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train one model on a task")
    tr.add_argument("--task", choices=ALL_TASKS)
    tr.add_argument("--data", help="dataset file from gen (overrides --task)")
    tr.add_argument("--model", required=True, choices=ARCHITECTURES)
    tr.add_argument("--rbp", default="none", choices=RBP_VARIANTS)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--config", help="JSON file overriding hyperparameters")
    tr.add_argument("--out", required=True, help="checkpoint path")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("--model-path", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--metric", default="accuracy", choices=("accuracy", "cross_entropy"))

    rep = sub.add_parser("reproduce", help="reproduce a published table")
    rep.add_argument("--table", required=True, type=int, choices=(1, 2, 3, 4, 5, 6))
    rep.add_argument("--sims", type=int, default=10)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--fast", action="store_true",
                     help="pin converged hyperparameters instead of grid searching")
    rep.add_argument("--out", required=True, help="report CSV path (JSON twin beside it)")

    cp = sub.add_parser("corpus-predict", help="next-token prediction on a corpus file")
    cp.add_argument("--corpus", required=True)
    cp.add_argument("--mode", default="text", choices=("text", "symbols"))
    cp.add_argument("--model", required=True, choices=ARCHITECTURES)
    cp.add_argument("--rbp", default="none", choices=RBP_VARIANTS)
    cp.add_argument("--context", type=int, default=5)
    cp.add_argument("--seed", type=int, default=0)
    cp.add_argument("--config", help="JSON file overriding hyperparameters")
    cp.add_argument("--out", help="write metrics JSON here")

    gc = sub.add_parser("gradcheck", help="finite-difference check of all registered graphs")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def _load_overrides(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    unknown = set(raw) - set(_HYPER_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}; allowed: {_HYPER_KEYS}")
    return raw


def _dataset_for(args):
    if args.data:
        return load_dataset(args.data)
    if not args.task:
        raise ConfigError("either --task or --data is required")
    return build_task(TaskSpec(args.task, seed=args.seed))


def cmd_gen(args) -> int:
    spec = TaskSpec(args.task, seed=args.seed)
    logger.info("gen task=%s seed=%d", args.task, args.seed)
    dataset = build_task(spec)
    save_dataset(dataset, args.out)
    logger.info("wrote %d items to %s", len(dataset.items), args.out)
    return 0


def cmd_train(args) -> int:
    from .harness import _make_config  # shared dataset-to-config glue

    dataset = _dataset_for(args)
    hyper = fast_config(dataset.task, args.model, args.rbp)
    overrides = _load_overrides(args.config)
    epochs = overrides.pop("epochs", None)
    head_hidden = overrides.pop("head_hidden", None)
    batch_size = overrides.pop("batch_size", None)
    hyper.update(overrides)
    config = _make_config(dataset, args.model, args.rbp, hyper, seed=args.seed)
    if epochs is not None:
        config.epochs = epochs
    if head_hidden is not None:
        config.head_hidden = head_hidden
    if batch_size is not None:
        config.batch_size = batch_size
    logger.info("train config=%s", asdict(config))
    trained = train(config, *dataset.arrays("train"))
    save_model(trained, args.out)
    logger.info("final train accuracy %.3f; checkpoint at %s",
                trained.history[-1].accuracy, args.out)
    return 0


def cmd_eval(args) -> int:
    trained = load_model(args.model_path)
    dataset = load_dataset(args.data)
    logger.info("eval model=%s data=%s split=%s", args.model_path, args.data, args.split)
    value = evaluate(trained, *dataset.arrays(args.split), metric=args.metric)
    print(f"{args.metric}: {value}")
    return 0


def cmd_reproduce(args) -> int:
    logger.info("reproduce table=%d sims=%d seed=%d fast=%s",
                args.table, args.sims, args.seed, args.fast)
    report = reproduce_table(args.table, sims=args.sims, base_seed=args.seed,
                             fast=args.fast)
    write_report(report, args.out)
    manifest_path = Path(args.out).with_suffix(".manifest.json")
    write_manifest(manifest_path, [report], grid=None if args.fast else Grid())
    failed = [c for c in report.cells if not c.passed]
    for c in failed:
        logger.warning("cell %s/%s/%s mean %.3f outside band %s",
                       c.task, c.model, c.rbp, c.mean, c.band)
    logger.info("report written to %s (%d/%d cells in band)",
                args.out, len(report.cells) - len(failed), len(report.cells))
    return 0


def cmd_corpus_predict(args) -> int:
    ingest = ingest_text if args.mode == "text" else ingest_symbols
    corpus = ingest(args.corpus)
    dataset = windowize(corpus, args.context)
    overrides = _load_overrides(args.config)
    epochs = overrides.pop("epochs", 10)
    batch = overrides.pop("batch_size", 64)
    overrides.pop("head_hidden", None)
    hyper = {**{"hidden_size": 30, "hidden_layers": 1, "learning_rate": 0.01,
                "dropout": 0.1}, **overrides}
    logger.info("corpus-predict corpus=%s mode=%s model=%s rbp=%s context=%d seed=%d",
                args.corpus, args.mode, args.model, args.rbp, args.context, args.seed)
    metrics = corpus_predict(dataset, args.model, args.rbp, seed=args.seed,
                             hyper=hyper, epochs=epochs, batch_size=batch)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        logger.info("metrics written to %s", args.out)
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    logger.info("gradcheck seed=%d", args.seed)
    results = run_registered_gradchecks(seed=args.seed)
    worst = max(results.values())
    for name, err in sorted(results.items()):
        print(f"{name}: max relative error {err:.3e}")
    if worst >= 1e-4:
        logger.error("gradient check failed: worst error %.3e", worst)
        return 1
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "reproduce": cmd_reproduce,
    "corpus-predict": cmd_corpus_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DatasetError, CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 2
    except (TrainingDivergedError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
