"""Command-line surface: prepare, train, eval, grid, recommend, bench, serve.

Metric outputs are JSON on stdout; progress logs go to stderr. Exit codes:
0 success, 1 usage error, 2 runtime failure. ``recommend`` either computes
locally from artifacts on disk or acts as a thin client against a running
service (``--server``); ``serve`` starts that service.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation, incremental, ingest, persist, scoring
from .matrices import build_state
from .model import TrainConfig, train

logger = logging.getLogger("nextrec")

DEFAULT_HIDDEN = 128
DEFAULT_EPOCHS = 100
DEFAULT_LR = 1e-3
DEFAULT_BATCH = 128
DEFAULT_K = 10


class _UsageError(Exception):
    """Invalid flag combination detected after parsing."""


def _emit(payload: dict) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _add_infer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda1", type=float, default=1.0 / 3.0,
                        help="weight of the collaborative component")
    parser.add_argument("--lambda2", type=float, default=1.0 / 3.0,
                        help="weight of the one-hop transition component")
    parser.add_argument("--hops", type=int, default=2, help="transition hops (>= 2)")
    parser.add_argument("--normalize", choices=scoring.NORMALIZATIONS, default="minmax",
                        help="per-component normalization before combining")
    parser.add_argument("--components", default="collab,one_hop,two_hop",
                        help="comma list of enabled components")
    parser.add_argument("--filter-seen", action="store_true",
                        help="exclude already-seen items from rankings")
    parser.add_argument("--k", type=int, default=DEFAULT_K, help="cutoff for Recall@K / top-K")


def _add_train_flags(parser: argparse.ArgumentParser, include_hidden: bool = True) -> None:
    if include_hidden:
        parser.add_argument("--hidden", type=int, default=DEFAULT_HIDDEN, help="embedding width")
    parser.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    parser.add_argument("--lr", type=float, default=DEFAULT_LR, help="learning rate")
    parser.add_argument("--batch", type=int, default=DEFAULT_BATCH, help="rows per mini-batch")
    parser.add_argument("--transform", choices=("log1p", "raw"), default="log1p",
                        help="transition-count transform fed to the encoder")
    parser.add_argument("--decoder-activation", choices=("identity", "sigmoid"),
                        default="identity")
    parser.add_argument("--drop-self-transitions", action="store_true",
                        help="do not count an item following itself")


def _add_split_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--train-frac", type=float, default=0.8)
    parser.add_argument("--val-frac", type=float, default=0.1)


def _infer_cfg(args: argparse.Namespace) -> scoring.InferenceConfig:
    components = frozenset(c.strip() for c in args.components.split(",") if c.strip())
    try:
        return scoring.InferenceConfig(
            lambda1=args.lambda1,
            lambda2=args.lambda2,
            hops=args.hops,
            normalization=args.normalize,
            components=components,
            filter_seen=args.filter_seen,
            top_k=args.k,
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc


def _train_cfg(args: argparse.Namespace, hidden: int | None = None) -> TrainConfig:
    try:
        return TrainConfig(
            hidden=hidden if hidden is not None else args.hidden,
            learning_rate=args.lr,
            epochs=args.epochs,
            batch_size=args.batch,
            seed=args.seed,
            decoder_activation=args.decoder_activation,
            transition_transform=args.transform,
        )
    except ValueError as exc:
        raise _UsageError(str(exc)) from exc


def _load_prepared(data_dir: str):
    log, vocab = ingest.load_canonical(data_dir)
    return log, vocab


def _split(log, args) -> ingest.SplitLog:
    return ingest.chronological_split(log, train_frac=args.train_frac, val_frac=args.val_frac)


def _cmd_prepare(args: argparse.Namespace) -> int:
    stats = ingest.prepare_dataset(
        args.input, args.format, args.out,
        min_count=args.min_count, iterative=args.iterative,
    )
    logger.info("prepared %s: %d malformed lines skipped", args.input, stats["malformed"])
    print(f"users={stats['users']} items={stats['items']} events={stats['events']}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_cfg(args)
    log, vocab = _load_prepared(args.data)
    split = _split(log, args)
    state = build_state(split.train, self_transitions=not args.drop_self_transitions)
    t0 = time.perf_counter()
    result = train(state, cfg)
    seconds = time.perf_counter() - t0
    persist.save_checkpoint(
        result.params, args.out,
        vocab_digest=vocab.digest(), seed=args.seed, num_users=log.num_users,
    )
    last = result.history[-1] if result.history else None
    _emit({
        "checkpoint": str(args.out),
        "train_seconds": seconds,
        "epochs": len(result.history),
        "final_loss": None if last is None else {
            "collab": last.loss_collab,
            "source": last.loss_source,
            "target": last.loss_target,
            "total": last.loss_total,
        },
        "hidden": cfg.hidden,
        "seed": cfg.seed,
    })
    return 0


def _write_per_event_csv(path: str, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "user", "item", "rank", "reciprocal_rank",
                         "hit", "latency_us", "fallback"])
        for r in records:
            writer.writerow([r.index, r.user, r.item, r.rank,
                             f"{r.reciprocal_rank:.8f}", int(r.hit),
                             f"{r.latency_us:.1f}", int(r.fallback)])


def _cmd_eval(args: argparse.Namespace) -> int:
    infer_cfg = _infer_cfg(args)
    log, vocab = _load_prepared(args.data)
    split = _split(log, args)
    params, _meta = persist.load_checkpoint(args.checkpoint, expected_vocab_digest=vocab.digest())
    result = evaluation.run_future_interaction(
        split, _train_cfg(args), infer_cfg, params=params,
        self_transitions=not args.drop_self_transitions,
    )
    if args.per_event_csv:
        _write_per_event_csv(args.per_event_csv, result.test_records)
    _emit({
        "test": result.test_report.to_dict(),
        "validation": result.validation_report.to_dict(),
        "fallback_count": sum(r.fallback for r in result.test_records),
        "latency": result.test_latency,
    })
    return 0


def _parse_hidden_list(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise _UsageError(f"bad --hidden-sizes value {text!r}") from exc
    if not sizes:
        raise _UsageError("--hidden-sizes must name at least one size")
    return sizes


def _cmd_grid(args: argparse.Namespace) -> int:
    infer_cfg = _infer_cfg(args)
    log, vocab = _load_prepared(args.data)
    split = _split(log, args)
    sizes = _parse_hidden_list(args.hidden)
    grid = evaluation.GridSpec(hidden_sizes=sizes, metric=args.metric)
    result = evaluation.grid_search(
        split, grid, _train_cfg(args, hidden=sizes[0]), infer_cfg, jobs=args.jobs,
        self_transitions=not args.drop_self_transitions,
    )
    if args.table:
        with open(args.table, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(
                handle, fieldnames=["hidden", "lambda1", "lambda2", "val_mrr", "val_recall"])
            writer.writeheader()
            writer.writerows(result.table)
    if args.emit_heatmap:
        values = list(grid.lambda_values)
        heat = result.heatmap(values, metric="recall")
        with open(args.emit_heatmap, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["lambda1\\lambda2"] + [str(v) for v in values])
            for i, l1 in enumerate(values):
                row = [str(l1)] + ["" if np.isnan(x) else f"{x:.6f}" for x in heat[i]]
                writer.writerow(row)
    _emit({
        "best": result.best,
        "test": result.test_report.to_dict(),
        "validation": result.validation_report.to_dict(),
        "cells": len(result.table),
    })
    return 0


def _cmd_recommend(args: argparse.Namespace) -> int:
    if args.server:
        import httpx

        response = httpx.post(
            args.server.rstrip("/") + "/recommend",
            json={"user": args.user, "k": args.k},
            timeout=30.0,
        )
        if response.status_code != 200:
            raise RuntimeError(f"server error {response.status_code}: {response.text}")
        for entry in response.json()["items"]:
            print(f"{entry['rank']}\t{entry['item']}\t{entry['score']:.6f}")
        return 0

    if not args.data or not args.checkpoint:
        raise _UsageError("recommend needs either --server or both --data and --checkpoint")
    infer_cfg = _infer_cfg(args)
    log, vocab = _load_prepared(args.data)
    params, _meta = persist.load_checkpoint(args.checkpoint, expected_vocab_digest=vocab.digest())
    if args.state:
        state = persist.load_state(args.state, expected_vocab_digest=vocab.digest())
    else:
        state = build_state(log)
    if args.user not in vocab.user_index:
        raise RuntimeError(f"unknown user key {args.user!r}")
    cache = incremental.warm_cache(state, params)
    p, _fallback = incremental.predict_next(
        vocab.user_index[args.user], state, cache, params, infer_cfg)
    for pos, item_idx in enumerate(scoring.top_k(p, args.k), start=1):
        print(f"{pos}\t{vocab.items[int(item_idx)]}\t{p[int(item_idx)]:.6f}")
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    infer_cfg = _infer_cfg(args)
    log, vocab = _load_prepared(args.data)
    split = _split(log, args)
    train_seconds = None
    if args.checkpoint:
        params, _meta = persist.load_checkpoint(
            args.checkpoint, expected_vocab_digest=vocab.digest())
    else:
        cfg = _train_cfg(args)
        state = build_state(split.train)
        t0 = time.perf_counter()
        params = train(state, cfg).params
        train_seconds = time.perf_counter() - t0
    report = evaluation.bench_efficiency(
        split, params, infer_cfg,
        naive_events=args.naive_events, train_seconds=train_seconds,
    )
    if args.hidden_sizes:
        report["latency_vs_hidden"] = evaluation.bench_latency_vs_hidden(
            split, _parse_hidden_list(args.hidden_sizes), infer_cfg,
            seed=args.seed, events=args.events,
        )
    _emit(report)
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import create_app
    from .service.runtime import EngineRuntime

    runtime = EngineRuntime.from_artifacts(
        data_dir=args.data,
        checkpoint_path=args.checkpoint,
        state_path=args.state,
        infer_cfg=_infer_cfg(args),
    )
    uvicorn.run(create_app(runtime), host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nextrec",
        description="Incremental sequential recommender: prepare data, train, "
                    "evaluate, search hyperparameters, benchmark, recommend, serve.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse a raw dataset into canonical files")
    p.add_argument("--format", required=True, choices=ingest.FORMATS)
    p.add_argument("--input", required=True, help="raw dataset file")
    p.add_argument("--out", required=True, help="output directory for canonical files")
    p.add_argument("--min-count", type=int, default=5,
                   help="drop users/items with fewer interactions")
    p.add_argument("--iterative", action="store_true",
                   help="re-filter until stable instead of a single pass")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train", help="train a model on the earliest split")
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    _add_split_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="future-interaction metrics for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-event-csv", help="write per-event replay records here")
    _add_train_flags(p)
    _add_split_flags(p)
    _add_infer_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grid", help="hidden-size and weight grid search")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", default="32,64,128,256",
                   help="comma list of hidden sizes to train")
    p.add_argument("--metric", choices=("mrr", "recall"), default="mrr",
                   help="validation metric that picks the winner")
    p.add_argument("--jobs", type=int, default=1, help="parallel training jobs")
    p.add_argument("--table", help="write the full grid table CSV here")
    p.add_argument("--emit-heatmap", help="write a lambda1 x lambda2 recall CSV here")
    _add_train_flags(p, include_hidden=False)
    _add_split_flags(p)
    _add_infer_flags(p)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("recommend", help="top-K items for one user")
    p.add_argument("--user", required=True, help="external user key")
    p.add_argument("--data", help="prepared dataset directory (local mode)")
    p.add_argument("--checkpoint", help="model checkpoint (local mode)")
    p.add_argument("--state", help="matrix-state snapshot; defaults to replaying all events")
    p.add_argument("--server", help="base URL of a running service (thin-client mode)")
    p.add_argument("--seed", type=int, default=0)
    _add_infer_flags(p)
    p.set_defaults(func=_cmd_recommend)

    p = sub.add_parser("bench", help="incremental vs naive efficiency benchmark")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="reuse a trained checkpoint instead of training")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--naive-events", type=int, default=50,
                   help="events for the (slow) full-recompute baseline")
    p.add_argument("--events", type=int, default=300,
                   help="events per point for the latency-vs-hidden sweep")
    p.add_argument("--hidden-sizes", default="",
                   help="comma list of hidden sizes for the latency sweep (empty to skip)")
    _add_train_flags(p)
    _add_split_flags(p)
    _add_infer_flags(p)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("serve", help="run the recommendation service")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--state", help="matrix-state snapshot; defaults to replaying all events")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    _add_infer_flags(p)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 for --help; fold usage into 1.
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError, FloatingPointError,
            persist.CheckpointError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
