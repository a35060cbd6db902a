"""
fibo – command-line entry point.

Commands:
    gen-data            sample a pretraining corpus from the function prior
    train               fit encoder and flow on a corpus, write a checkpoint
    bench               run a benchmark suite from a JSON spec
    suggest             ask: propose the next batch of an ask-tell session
    tell                record results for the pending batch
    status              history size, best-so-far, GAP
    inspect-checkpoint  print a checkpoint header as JSON

Usage:
    python -m fibo gen-data --dim 2 --count 2000 --seed 7 --out corpus_d2.fibc
    python -m fibo train --corpus corpus_d2.fibc --seed 0 --out ckpt_d2.fibm
    python -m fibo suggest --session run1 --checkpoint ckpt_d2.fibm --bounds 0:10 0:5 --seed 3 --q 10

Logs go to stderr, machine-readable results (JSON, CSV) to stdout.
"""

import argparse
import json
import multiprocessing
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from loguru import logger

from . import __version__
from .bench import DomainMap, SuiteSpec, load_history_csv, run_suite
from .config import (
    BATCH_SIZE,
    BINS_PER_DIM,
    EPOCHS,
    LEARNING_RATE,
    N_MAX,
    N_MIN,
    NUM_FEATURES,
    VALIDATION_FRACTION,
    CorpusQuotaError,
    FiboError,
    restarts_for,
)
from .corpus import corpus_digest, export_jsonl, load_corpus, save_corpus
from .funcprior import PriorHyperparams, generate_corpus
from .hardware import resolve_workers
from .model import load_checkpoint, peek_dimension
from .session import (
    create_session,
    import_history,
    load_session,
    save_session,
    session_exists,
    session_lock,
    status,
    suggest,
    tell,
)
from .trainer import TrainConfig, train
from .utils import resolve_path


def _emit_json(document: dict) -> None:
    print(json.dumps(document, sort_keys=True))


# ---------------------------------------------------------------------------
# gen-data / train / bench
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    hp = PriorHyperparams(dim=args.dim, num_features=args.num_features)
    restarts = args.restarts if args.restarts is not None else restarts_for(args.dim)
    workers = resolve_workers(args.workers)
    try:
        corpus = generate_corpus(
            hp, args.count, args.n_min, args.n_max, restarts, args.bins, args.seed, workers=workers,
        )
    except CorpusQuotaError as err:
        logger.error(f"Corpus generation failed: {err}")
        _emit_json({"error": str(err), "bin_counts": err.bin_counts, "quota": err.quota, "draws": err.draws})
        return 1

    out = resolve_path(args.out)
    digest = save_corpus(corpus, out)
    if args.jsonl:
        export_jsonl(corpus, resolve_path(args.jsonl))
    report = corpus.report.to_dict()
    for k, filled in enumerate(report["bin_counts"]):
        logger.info(f"bin {k}: {filled}/{report['quota']}")
    _emit_json({"out": str(out), "sha256": digest, "count": len(corpus), "dim": corpus.dim, **report})
    logger.success(f"Corpus written: {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    corpus_path = resolve_path(args.corpus)
    corpus = load_corpus(corpus_path)
    if args.dim is not None and args.dim != corpus.dim:
        logger.error(f"Corpus {corpus_path} has dimension {corpus.dim}, --dim is {args.dim}")
        return 1
    out = resolve_path(args.out)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        validation_fraction=args.val_fraction,
        attention=args.attention,
        checkpoint_path=str(out),
    )
    checkpoint = train(corpus, config, corpus_sha256=corpus_digest(corpus_path))
    meta = checkpoint.metadata
    _emit_json({
        "checkpoint": str(out),
        "epochs_completed": meta["epochs_completed"],
        "train_nll": meta["train_nll"],
        "val_nll": meta["val_nll"],
    })
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    spec = SuiteSpec.from_json(resolve_path(args.suite))
    if args.resume:
        spec.resume = True
    workers = resolve_workers(args.workers if args.workers is not None else spec.workers)
    result = run_suite(spec, workers=workers)
    print(result.summary.to_csv(index=False), end="")
    if result.failed:
        for cell in result.failed:
            logger.error(f"{cell.trace_name}: {cell.error_msg}")
        return 1
    logger.success(f"Suite finished: {len(result.traces)} traces in {spec.output_dir}")
    return 0


# ---------------------------------------------------------------------------
# Ask-tell session
# ---------------------------------------------------------------------------

def _parse_bounds(raw: Sequence[str], dim: int) -> DomainMap:
    """'LO:HI' per dimension, or a single 'LO:HI' for every dimension."""
    pairs = []
    for item in raw:
        lo, sep, hi = item.partition(":")
        if not sep:
            raise ValueError(f"bounds must be given as LO:HI, got {item!r}")
        pairs.append((float(lo), float(hi)))
    if len(pairs) == 1:
        pairs = pairs * dim
    if len(pairs) != dim:
        raise ValueError(f"got {len(pairs)} bounds for a {dim}-dimensional checkpoint")
    return DomainMap(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))


def _points_frame(points: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(points, columns=[f"x{i}" for i in range(points.shape[1])])


def cmd_suggest(args: argparse.Namespace) -> int:
    session_dir = resolve_path(args.session)
    with session_lock(session_dir):
        if session_exists(session_dir):
            state = load_session(session_dir)
        else:
            if args.checkpoint is None or args.bounds is None or args.seed is None:
                logger.error("A new session needs --checkpoint, --bounds and --seed")
                return 1
            checkpoint_path = resolve_path(args.checkpoint)
            dim = peek_dimension(checkpoint_path)
            state = create_session(dim, _parse_bounds(args.bounds, dim), str(checkpoint_path), args.seed,
                                   experiment_id=args.experiment_id)
            if args.history:
                X, y = load_history_csv(resolve_path(args.history), dim)
                state = import_history(state, X, y)

        checkpoint = load_checkpoint(Path(state.checkpoint)) if state.size else None
        state, points = suggest(state, args.q, checkpoint, force_discard=args.force_discard)
        save_session(state, session_dir)

    frame = _points_frame(points)
    if args.out:
        frame.to_csv(resolve_path(args.out), index=False)
    print(frame.to_csv(index=False), end="")
    logger.success(f"Round {state.round}: {len(points)} points pending in {session_dir}")
    return 0


def cmd_tell(args: argparse.Namespace) -> int:
    session_dir = resolve_path(args.session)
    with session_lock(session_dir):
        state = load_session(session_dir)
        if args.csv:
            X, y = load_history_csv(resolve_path(args.csv), state.dim)
            state = tell(state, y, X)
        else:
            state = tell(state, np.asarray(args.values, dtype=np.float64))
        save_session(state, session_dir)
    _emit_json(status(state))
    logger.success(f"Recorded results, history has {state.size} points")
    return 0


def cmd_status(args: argparse.Namespace) -> int:
    state = load_session(resolve_path(args.session))
    _emit_json(status(state, args.y_star))
    return 0


def cmd_inspect_checkpoint(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(resolve_path(args.checkpoint))
    _emit_json({
        "format_version": checkpoint.format_version,
        "d": checkpoint.dim,
        "model": checkpoint.model.config.to_dict(),
        "prior": checkpoint.prior.to_dict() if checkpoint.prior is not None else None,
        "parameters": int(sum(w.size for w in checkpoint.model.weights.values())),
        "metadata": checkpoint.metadata,
    })
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fibo",
        description="fibo – in-context batch Bayesian optimization with a pretrained flow",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="Generate a pretraining corpus")
    p.add_argument("--dim", type=int, required=True, help="Input dimension d")
    p.add_argument("--count", type=int, required=True, help="Number of (x*, D) pairs")
    p.add_argument("--n-min", type=int, default=N_MIN, help=f"Smallest context size (default: {N_MIN})")
    p.add_argument("--n-max", type=int, default=N_MAX, help=f"Largest context size (default: {N_MAX})")
    p.add_argument("--restarts", type=int, default=None, help="Ascent restarts (default: 32 for d<=2, else 64)")
    p.add_argument("--bins", type=int, default=BINS_PER_DIM, help=f"Optimum bins per dimension (default: {BINS_PER_DIM})")
    p.add_argument("--num-features", type=int, default=NUM_FEATURES, help=f"RFF features (default: {NUM_FEATURES})")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="Corpus file")
    p.add_argument("--jsonl", default=None, help="Also write a JSON-lines mirror for inspection")
    p.add_argument("--workers", type=int, default=None, help="Worker processes (default: FIBO_WORKERS or CPU count)")
    p.set_defaults(handler=cmd_gen_data)

    p = commands.add_parser("train", help="Train a model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--dim", type=int, default=None, help="Expected corpus dimension")
    p.add_argument("--epochs", type=int, default=EPOCHS)
    p.add_argument("--batch", type=int, default=BATCH_SIZE)
    p.add_argument("--lr", type=float, default=LEARNING_RATE)
    p.add_argument("--val-fraction", type=float, default=VALIDATION_FRACTION)
    p.add_argument("--attention", action="store_true", help="Self-attention block in the encoder")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="Checkpoint file")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("bench", help="Run a benchmark suite")
    p.add_argument("--suite", required=True, help="Suite spec (JSON)")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--resume", action="store_true", help="Keep cells whose trace file is complete")
    p.set_defaults(handler=cmd_bench)

    p = commands.add_parser("suggest", help="Propose the next batch of a session")
    p.add_argument("--session", required=True, help="Session directory")
    p.add_argument("--q", type=int, required=True, help="Batch size")
    p.add_argument("--checkpoint", default=None, help="Checkpoint (new sessions only)")
    p.add_argument("--bounds", nargs="+", default=None, metavar="LO:HI", help="Native bounds (new sessions only)")
    p.add_argument("--seed", type=int, default=None, help="Session seed (new sessions only)")
    p.add_argument("--history", default=None, help="CSV of earlier results x0..,y (new sessions only)")
    p.add_argument("--experiment-id", default=None)
    p.add_argument("--force-discard", action="store_true", help="Drop an unresolved pending batch")
    p.add_argument("--out", default=None, help="Also write the points to this CSV file")
    p.set_defaults(handler=cmd_suggest)

    p = commands.add_parser("tell", help="Record results for the pending batch")
    p.add_argument("--session", required=True)
    p.add_argument("values", nargs="*", type=float, help="One result per pending point, in order")
    p.add_argument("--csv", default=None, help="CSV with columns x0..,y instead of inline values")
    p.set_defaults(handler=cmd_tell)

    p = commands.add_parser("status", help="Show session progress")
    p.add_argument("--session", required=True)
    p.add_argument("--y-star", type=float, default=None, help="Known optimum for GAP")
    p.set_defaults(handler=cmd_status)

    p = commands.add_parser("inspect-checkpoint", help="Print a checkpoint header")
    p.add_argument("checkpoint")
    p.set_defaults(handler=cmd_inspect_checkpoint)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    fibo entry point.

    Returns:
        Exit code (0 = success, 1 = error).
    """
    # worker pools use 'spawn' on every platform
    multiprocessing.set_start_method('spawn', force=True)

    parser = build_parser()
    args = parser.parse_args(argv)

    # --- Logging ---
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if args.verbose else "INFO")

    if args.command == "tell" and not args.csv and not args.values:
        logger.error("tell needs result values or --csv")
        return 1

    try:
        return args.handler(args)
    except (FiboError, ValueError, KeyError, FileNotFoundError) as err:
        logger.error(f"{args.command} failed: {err}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
