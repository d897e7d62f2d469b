# Command-line entry point: `ugt <command>` or `python -m ugt_rec <command>`
# Commands: generate, train, grid, sweep, eval, export, verify

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import data as data_mod
from . import tensor as T
from .encoder import ItemInputs
from .errors import ConfigurationError, ContractError, DataFormatError, DivergenceError, ReportError, UGTError
from .evaluation import evaluate, make_run_id, popularity_baseline, write_report
from .fusion import build_graph, export_embeddings
from .model import load_checkpoint, save_checkpoint
from .settings import configure_logging, load_settings
from .train import (
    SWEEP_PARAMETERS,
    TrainConfig,
    build_model,
    dump_config,
    grid_search,
    load_config,
    sensitivity_sweep,
    train,
)
from .verify import format_table, run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3

CHECKPOINT_FILE = "checkpoint.bin"
CONFIG_FILE = "config.txt"
LOG_FILE = "training_log.csv"


# =============================================================================
# SHARED HELPERS
# =============================================================================

def _config(args: argparse.Namespace) -> TrainConfig:
    config = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "ablate", None):
        changes["ablation"] = sorted(set(config.ablation) | set(args.ablate))
    return config.with_updates(**changes) if changes else config


def _split(data_dir: Path, config: TrainConfig) -> data_mod.SplitDataset:
    dataset = data_mod.load(data_dir)
    return data_mod.split(dataset, seed=config.seed)


def _restore(run_dir: Path, split: data_mod.SplitDataset):
    config = load_config(run_dir / CONFIG_FILE)
    inputs = ItemInputs.from_dataset(split.dataset, config.patch_size)
    model = build_model(split, config, inputs, np.random.default_rng(config.seed))
    arrays, _ = load_checkpoint(run_dir / CHECKPOINT_FILE)
    model.load_state_dict(arrays, source=run_dir / CHECKPOINT_FILE)
    return config, model, inputs


def _full_report(split, model, config: TrainConfig, inputs, target: str = "test"):
    report = evaluate(split, model, target=target, inputs=inputs)
    report.config = config.model_dump()
    report.seed = config.seed
    report.run_id = make_run_id(report.config, config.seed, split.dataset.fingerprint())
    try:
        report.baseline = popularity_baseline(split, target=target)
    except ReportError:
        logger.warning("No users for the popularity baseline")
    return report


def _print_metrics(report) -> None:
    for name, value in report.metrics.items():
        print(f"  {name:<10} {value:.4f}")
    if report.alignment_mse is not None:
        print(f"  alignment_mse {report.alignment_mse:.4f} (raw {report.alignment_mse_raw:.4f})")
    if report.baseline is not None:
        print(f"  popularity recall@10 {report.baseline.metrics.get('recall@10', float('nan')):.4f}")


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_generate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"Refusing to write into non-empty directory {out} (use --force)", file=sys.stderr)
        return EXIT_USAGE
    dataset = data_mod.generate_synthetic(
        args.users, args.items, latent_dim=args.latent_dim, density=args.density, seed=args.seed,
        image_size=args.image_size, vocab_size=args.vocab_size, max_text_len=args.max_text_len,
    )
    data_mod.save(dataset, out)
    lengths = [len(t) for t in dataset.item_texts]
    print(f"Wrote {out}: {dataset.num_users} users, {dataset.num_items} items, "
          f"{len(dataset.interactions)} interactions "
          f"(density {len(dataset.interactions) / max(1, dataset.num_users * dataset.num_items):.3f}), "
          f"images {dataset.image_size}x{dataset.image_size}x{dataset.channels}, "
          f"text length {min(lengths, default=0)}-{max(lengths, default=0)}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _config(args)
    if args.epochs is not None:
        config = config.with_updates(max_epochs=args.epochs)
    split = _split(Path(args.data), config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = ItemInputs.from_dataset(split.dataset, config.patch_size)

    print(f"Training {config.switches.label} (λ_c = {config.effective_lambda_c}, ε = {config.epsilon})")
    result = train(split, config, inputs=inputs, log_path=out / LOG_FILE)
    save_checkpoint(result.model.state_dict(), out / CHECKPOINT_FILE, metadata={"config": config.model_dump()})
    (out / CONFIG_FILE).write_text(dump_config(config))
    if result.stopped_early:
        print(f"Early stop at epoch {result.state.epoch}; best epoch {result.state.best_epoch}")
    else:
        print(f"Finished {len(result.history)} epochs; best epoch {result.state.best_epoch}")

    report = _full_report(split, result.model, config, inputs)
    write_report(report, out)
    _print_metrics(report)
    return EXIT_OK


def cmd_grid(args: argparse.Namespace) -> int:
    config = _config(args)
    split = _split(Path(args.data), config)
    result = grid_search(split, config, epochs=args.epochs, threads=load_settings().threads)
    print(f"{'epsilon':>8} {'lambda_c':>8} {'recall@10':>10} {'ndcg@10':>8}")
    for cell in result.cells:
        print(f"{cell.epsilon:>8.2f} {cell.lambda_c:>8.2f} {cell.val_recall:>10.4f} {cell.val_ndcg:>8.4f}")
    print(f"best: epsilon={result.best.epsilon} lambda_c={result.best.lambda_c} recall@10={result.best.val_recall:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.json").write_text(json.dumps({"cells": result.table(), "best": vars(result.best)}, indent=2) + "\n")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _config(args)
    split = _split(Path(args.data), config)
    values = [float(v) for v in args.values.split(",")] if args.values else None
    points = sensitivity_sweep(split, config, args.parameter, values, epochs=args.epochs, threads=load_settings().threads)
    print(f"{args.parameter:>9} {'val recall@10':>14} {'test recall@10':>15} {'test ndcg@10':>13}")
    for p in points:
        print(f"{p.value:>9.2f} {p.validation.get('recall@10', float('nan')):>14.4f} "
              f"{p.test.get('recall@10', float('nan')):>15.4f} {p.test.get('ndcg@10', float('nan')):>13.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    config = load_config(run_dir / CONFIG_FILE)
    split = _split(Path(args.data), config)
    config, model, inputs = _restore(run_dir, split)
    report = _full_report(split, model, config, inputs, target=args.target)
    write_report(report, Path(args.out) if args.out else run_dir)
    _print_metrics(report)
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    config = load_config(run_dir / CONFIG_FILE)
    split = _split(Path(args.data), config)
    config, model, inputs = _restore(run_dir, split)
    with T.no_grad():
        out = model.forward(build_graph(split), inputs)
    paths = export_embeddings(args.out or run_dir, out.X_user.data, out.X_item.data, out.H_v.data, out.H_t.data)
    for path in paths:
        print(f"Wrote {path}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        results = run_checks(only=args.only, checkpoint=Path(args.checkpoint) if args.checkpoint else None)
    except KeyError as e:
        print(str(e.args[0]), file=sys.stderr)
        return EXIT_USAGE
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_FAILURE
    print(f"All {len(results)} checks passed")
    return EXIT_OK


# =============================================================================
# ARGUMENT PARSER
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ugt", description="Unified graph transformer recommender on synthetic multi-modal data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--items", type=int, default=30)
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent-dim", type=int, default=4)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--max-text-len", type=int, default=16)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_generate)

    def experiment(name: str, help_text: str) -> argparse.ArgumentParser:
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--data", required=True)
        q.add_argument("--config")
        q.add_argument("--seed", type=int)
        q.add_argument("--ablate", action="append", choices=["attn_fuse", "ugnn", "trans", "cl"], default=[])
        q.add_argument("--epochs", type=int, help="override max_epochs")
        return q

    p = experiment("train", "train one model and write checkpoint, logs and report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = experiment("grid", "grid search over epsilon × lambda_c on validation recall@10")
    p.add_argument("--out")
    p.set_defaults(func=cmd_grid)

    p = experiment("sweep", "vary one hyper-parameter with the rest fixed")
    p.add_argument("--parameter", choices=SWEEP_PARAMETERS, required=True)
    p.add_argument("--values", help="comma-separated values (default: the config grid)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="directory written by `ugt train`")
    p.add_argument("--target", choices=["test", "validation", "train"], default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write embeddings.tsv and modal_embeddings.tsv")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("verify", help="run the invariant, oracle and gradient checks")
    p.add_argument("--only", action="append", help="run only this check (repeatable)")
    p.add_argument("--checkpoint", help="validate this checkpoint file instead of a synthetic one")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = load_settings()
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(settings.log_level)
    T.set_debug(settings.debug)
    try:
        return args.func(args)
    except (ConfigurationError, ContractError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataFormatError as e:
        print(f"Data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"Training diverged: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except (ReportError, UGTError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
