"""Metrics, the future-interaction experiment, grid search, ablations, benchmarks.

The experiment protocol: train on the earliest split, fold validation events in
with frozen weights, then replay the test stream and report MRR and Recall@K
over its events. Hyperparameter search trains once per hidden size and scores
every admissible weight pair from a single validation replay, because the
combination weights only affect the last (cheap) stage of prediction.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .incremental import (
    ComponentScores,
    latency_summary,
    naive_replay,
    replay,
    warm_cache,
)
from .ingest import SplitLog
from .matrices import build_state
from .model import ModelParams, TrainConfig, init_params, train
from .scoring import (
    InferenceConfig,
    combine,
    component_weights,
    minmax_normalize,
    rank_of,
)

ABLATION_VARIANTS = (
    "b.c",
    "a.c",
    "ab.c",
    "only-hidden",
    "hidden+interaction",
    "hidden+transition",
    "all",
)


def mrr(ranks: Sequence[int]) -> float:
    """Mean reciprocal rank; ranks are 1-based."""
    if len(ranks) == 0:
        raise ValueError("mrr of an empty rank list is undefined")
    if min(ranks) < 1:
        raise ValueError("ranks must be >= 1")
    return float(np.mean([1.0 / r for r in ranks]))


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    """Fraction of ranks within the top ``k``."""
    if len(ranks) == 0:
        raise ValueError("recall of an empty rank list is undefined")
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.mean([r <= k for r in ranks]))


def config_dict(cfg: InferenceConfig) -> dict:
    d = asdict(cfg)
    d["components"] = sorted(cfg.components)
    return d


@dataclass
class MetricReport:
    mrr: float
    recall_at_k: float
    k: int
    events: int
    config: dict = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks: Sequence[int], cfg: InferenceConfig) -> "MetricReport":
        return cls(
            mrr=mrr(ranks),
            recall_at_k=recall_at_k(ranks, cfg.top_k),
            k=cfg.top_k,
            events=len(ranks),
            config=config_dict(cfg),
        )

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "recall_at_k": self.recall_at_k,
            "k": self.k,
            "events": self.events,
            "config": self.config,
        }


@dataclass
class ExperimentResult:
    test_report: MetricReport
    validation_report: MetricReport
    params: ModelParams
    train_seconds: Optional[float]
    test_latency: dict
    test_records: list
    validation_records: list


def run_future_interaction(
    split: SplitLog,
    train_cfg: TrainConfig,
    infer_cfg: InferenceConfig,
    params: Optional[ModelParams] = None,
    self_transitions: bool = True,
) -> ExperimentResult:
    """Train on the train split (unless given params), fold validation events in
    with frozen weights, then replay and score the test stream."""
    state = build_state(split.train, self_transitions=self_transitions)
    train_seconds: Optional[float] = None
    if params is None:
        validation_score = None
        if train_cfg.patience is not None:
            def validation_score(candidate: ModelParams) -> float:
                trial_state = state.copy()
                trial_cache = warm_cache(trial_state, candidate)
                result = replay(split.validation, trial_state, trial_cache, candidate, infer_cfg)
                return mrr(result.ranks())
        t0 = time.perf_counter()
        params = train(state, train_cfg, validation_score=validation_score).params
        train_seconds = time.perf_counter() - t0
    cache = warm_cache(state, params)
    val_result = replay(split.validation, state, cache, params, infer_cfg)
    test_result = replay(split.test, state, cache, params, infer_cfg)
    return ExperimentResult(
        test_report=MetricReport.from_ranks(test_result.ranks(), infer_cfg),
        validation_report=MetricReport.from_ranks(val_result.ranks(), infer_cfg),
        params=params,
        train_seconds=train_seconds,
        test_latency=latency_summary(test_result.records),
        test_records=test_result.records,
        validation_records=val_result.records,
    )


@dataclass
class GridSpec:
    hidden_sizes: tuple = (32, 64, 128, 256)
    lambda_values: tuple = tuple(round(0.1 * i, 1) for i in range(11))
    metric: str = "mrr"

    def __post_init__(self) -> None:
        if not self.hidden_sizes or not self.lambda_values:
            raise ValueError("grid must have at least one hidden size and one lambda value")
        if self.metric not in ("mrr", "recall"):
            raise ValueError("selection metric must be 'mrr' or 'recall'")


def admissible_lambda_pairs(values: Sequence[float]) -> list[tuple[float, float]]:
    """All (lambda1, lambda2) pairs whose weights stay non-negative."""
    return [(l1, l2) for l1 in values for l2 in values if l1 + l2 <= 1.0 + 1e-9]


def sweep_lambda(
    stream,
    state,
    cache,
    params: ModelParams,
    base_cfg: InferenceConfig,
    pairs: Sequence[tuple[float, float]],
) -> dict[tuple[float, float], list[int]]:
    """Per-pair rank lists for every weight pair from one replay pass.

    Component vectors are computed once per event; each pair only re-weights
    them. The model is never retrained and the state advances exactly as in a
    plain replay.
    """
    per_pair_weights = {
        pair: component_weights(base_cfg.with_lambdas(*pair)) for pair in pairs
    }
    per_pair_ranks: dict[tuple[float, float], list[int]] = {pair: [] for pair in pairs}

    def on_components(index: int, u: int, i: int, comps: ComponentScores) -> None:
        if comps.fallback:
            p = (
                minmax_normalize(comps.collab)
                if base_cfg.normalization == "minmax"
                else comps.collab
            )
            rank = rank_of(p, i)
            for pair in pairs:
                per_pair_ranks[pair].append(rank)
            return
        vectors = {"collab": comps.collab, "one_hop": comps.one_hop, "two_hop": comps.two_hop}
        if base_cfg.normalization == "minmax":
            vectors = {name: minmax_normalize(v) for name, v in vectors.items()}
        for pair in pairs:
            weights = per_pair_weights[pair]
            p = sum(w * vectors[name] for name, w in weights.items())
            per_pair_ranks[pair].append(rank_of(p, i))

    replay(stream, state, cache, params, base_cfg, on_components=on_components)
    return per_pair_ranks


@dataclass
class GridResult:
    best: dict
    table: list
    test_report: MetricReport
    validation_report: MetricReport
    params: ModelParams

    def heatmap(self, lambda_values: Sequence[float], metric: str = "recall") -> np.ndarray:
        """Validation metric for the best hidden size as a lambda1 x lambda2
        matrix; inadmissible cells are NaN."""
        key = "val_recall" if metric == "recall" else "val_mrr"
        grid = np.full((len(lambda_values), len(lambda_values)), np.nan)
        for row in self.table:
            if row["hidden"] != self.best["hidden"]:
                continue
            i = lambda_values.index(row["lambda1"])
            j = lambda_values.index(row["lambda2"])
            grid[i, j] = row[key]
        return grid


def _grid_job(args: tuple) -> tuple[int, ModelParams, list[dict]]:
    """Train one hidden size and sweep all weight pairs on validation."""
    split, train_cfg, base_cfg, pairs, self_transitions = args
    state = build_state(split.train, self_transitions=self_transitions)
    params = train(state, train_cfg).params
    cache = warm_cache(state, params)
    per_pair = sweep_lambda(split.validation, state, cache, params, base_cfg, pairs)
    rows = [
        {
            "hidden": train_cfg.hidden,
            "lambda1": pair[0],
            "lambda2": pair[1],
            "val_mrr": mrr(ranks),
            "val_recall": recall_at_k(ranks, base_cfg.top_k),
        }
        for pair, ranks in per_pair.items()
    ]
    return train_cfg.hidden, params, rows


def grid_search(
    split: SplitLog,
    grid: GridSpec,
    train_cfg: TrainConfig,
    infer_cfg: InferenceConfig,
    jobs: int = 1,
    self_transitions: bool = True,
) -> GridResult:
    """Train once per hidden size, score all weight pairs on validation, pick
    the winner by the selection metric, and report its test metrics."""
    pairs = admissible_lambda_pairs(grid.lambda_values)
    job_args = [
        (split, replace(train_cfg, hidden=h), infer_cfg, pairs, self_transitions)
        for h in grid.hidden_sizes
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_grid_job, job_args))
    else:
        outcomes = [_grid_job(args) for args in job_args]

    table: list[dict] = []
    params_by_hidden: dict[int, ModelParams] = {}
    for hidden, params, rows in outcomes:
        params_by_hidden[hidden] = params
        table.extend(rows)

    key = "val_mrr" if grid.metric == "mrr" else "val_recall"
    best_row = max(table, key=lambda row: (row[key], -row["hidden"]))
    best_cfg = infer_cfg.with_lambdas(best_row["lambda1"], best_row["lambda2"])
    final = run_future_interaction(
        split,
        train_cfg,
        best_cfg,
        params=params_by_hidden[best_row["hidden"]],
        self_transitions=self_transitions,
    )
    return GridResult(
        best=dict(best_row),
        table=table,
        test_report=final.test_report,
        validation_report=final.validation_report,
        params=params_by_hidden[best_row["hidden"]],
    )


def ablation_config(variant: str, base: InferenceConfig) -> InferenceConfig:
    """Scoring configuration for one ablation variant.

    The embedding-operation variants score with the two-hop component alone and
    differ in which embeddings enter its product; the decoder-output variants
    add the collaborative and/or one-hop components back in.
    """
    if variant == "b.c":
        return replace(base, components=frozenset({"two_hop"}), two_hop_factors="b",
                       lambda1=0.0, lambda2=0.0)
    if variant == "a.c":
        return replace(base, components=frozenset({"two_hop"}), two_hop_factors="a",
                       lambda1=0.0, lambda2=0.0)
    if variant in ("ab.c", "only-hidden"):
        return replace(base, components=frozenset({"two_hop"}), two_hop_factors="ab",
                       lambda1=0.0, lambda2=0.0)
    if variant == "hidden+interaction":
        return replace(base, components=frozenset({"collab", "two_hop"}), two_hop_factors="ab")
    if variant == "hidden+transition":
        return replace(base, components=frozenset({"one_hop", "two_hop"}), two_hop_factors="ab")
    if variant == "all":
        return replace(base, components=frozenset(("collab", "one_hop", "two_hop")),
                       two_hop_factors="ab")
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")


def run_ablation(
    split: SplitLog,
    variant: str,
    train_cfg: TrainConfig,
    infer_cfg: InferenceConfig,
    params: Optional[ModelParams] = None,
    self_transitions: bool = True,
) -> ExperimentResult:
    """Future-interaction experiment under one ablation's scoring configuration.

    Pass ``params`` to share one trained model across variants.
    """
    cfg = ablation_config(variant, infer_cfg)
    return run_future_interaction(
        split, train_cfg, cfg, params=params, self_transitions=self_transitions
    )


def bench_efficiency(
    split: SplitLog,
    params: ModelParams,
    infer_cfg: InferenceConfig,
    naive_events: int = 50,
    train_seconds: Optional[float] = None,
    self_transitions: bool = True,
) -> dict:
    """Compare incremental per-event latency against the rebuild-everything path.

    The naive path is measured on a truncated stream because it is quadratically
    more work per event; both paths score the same validation-stream prefix
    states, so the ratio is an apples-to-apples per-event cost comparison.
    """
    state = build_state(split.train, self_transitions=self_transitions)
    cache = warm_cache(state, params)
    incr_result = replay(split.validation, state, cache, params, infer_cfg)
    incr = latency_summary(incr_result.records)

    naive_stream = split.validation.slice(0, min(naive_events, len(split.validation)))
    naive_result = naive_replay(
        split.train, naive_stream, params, infer_cfg, self_transitions=self_transitions
    )
    naive = latency_summary(naive_result.records)

    speedup = None
    if incr["mean_us"] and naive["mean_us"]:
        speedup = naive["mean_us"] / incr["mean_us"]
    return {
        "train_seconds": train_seconds,
        "incremental": incr,
        "naive": naive,
        "speedup": speedup,
    }


def bench_latency_vs_hidden(
    split: SplitLog,
    hidden_sizes: Sequence[int],
    infer_cfg: InferenceConfig,
    seed: int = 0,
    events: int = 300,
    self_transitions: bool = True,
) -> dict:
    """Incremental per-event latency as a function of the hidden size.

    Uses freshly initialized (untrained) weights: the arithmetic per event is
    identical, so latency scaling does not require a trained model. Reports a
    linear fit with its R^2.
    """
    base_state = build_state(split.train, self_transitions=self_transitions)
    stream = split.validation.slice(0, min(events, len(split.validation)))
    points = []
    for hidden in hidden_sizes:
        params = init_params(base_state.num_items, hidden, seed)
        state = base_state.copy()
        cache = warm_cache(state, params)
        result = replay(stream, state, cache, params, infer_cfg)
        points.append({"hidden": hidden, "mean_us": latency_summary(result.records)["mean_us"]})
    xs = np.array([p["hidden"] for p in points], dtype=np.float64)
    ys = np.array([p["mean_us"] for p in points], dtype=np.float64)
    slope, intercept = np.polyfit(xs, ys, 1)
    predicted = slope * xs + intercept
    ss_res = float(np.sum((ys - predicted) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {
        "points": points,
        "slope_us_per_unit": float(slope),
        "intercept_us": float(intercept),
        "r_squared": r_squared,
    }
