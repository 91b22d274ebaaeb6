"""Cached embeddings, row-local refresh, and the predict-then-update replay loop.

Model weights never change at inference time. Each incoming event touches one
interaction row, one transition row, and one transition column, so at most
three cached embedding rows are re-encoded per event; everything else is
reused. ``replay`` folds the protocol over an event stream: score the user
first (the ground truth must not leak into its own prediction), record the
rank, then fold the true event into the state.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ingest import InteractionLog
from .matrices import MatrixState, TouchedRows, apply_interaction, build_state
from .model import ModelParams, encode, transform_transitions
from .scoring import (
    InferenceConfig,
    collaborative_scores,
    combine,
    minmax_normalize,
    multi_hop_scores,
    one_hop_scores,
    rank_of,
    two_hop_scores,
)


@dataclass
class EmbeddingCache:
    """Encoded rows of the interaction matrix (per user) and of the transition
    matrix in both orientations (per item). Rows listed in the dirty sets need
    a refresh before use; ``refresh_rows`` clears them."""

    user_emb: np.ndarray
    source_emb: np.ndarray
    target_emb: np.ndarray
    dirty_users: set = field(default_factory=set)
    dirty_sources: set = field(default_factory=set)
    dirty_targets: set = field(default_factory=set)


@dataclass(frozen=True)
class ReplayRecord:
    """Outcome of one replayed event."""

    index: int
    user: int
    item: int
    rank: int
    reciprocal_rank: float
    hit: bool
    latency_us: float
    fallback: bool


@dataclass
class ComponentScores:
    """Raw (unnormalized, uncombined) per-component score vectors for one user."""

    collab: np.ndarray
    one_hop: Optional[np.ndarray]
    two_hop: Optional[np.ndarray]
    fallback: bool


def warm_cache(state: MatrixState, params: ModelParams) -> EmbeddingCache:
    """Encode every row of all three matrices from scratch."""
    source_view = transform_transitions(state.transitions, params.transition_transform)
    return EmbeddingCache(
        user_emb=encode(state.interactions, params),
        source_emb=encode(source_view, params),
        target_emb=encode(source_view.T, params),
    )


def refresh_rows(
    cache: EmbeddingCache, state: MatrixState, params: ModelParams, touched: TouchedRows
) -> None:
    """Re-encode exactly the rows invalidated by one applied event."""
    cache.user_emb[touched.user_row] = encode(state.interactions[touched.user_row], params)
    if touched.source_row is not None:
        row = transform_transitions(state.transitions[touched.source_row], params.transition_transform)
        cache.source_emb[touched.source_row] = encode(row, params)
    if touched.target_row is not None:
        col = transform_transitions(state.transitions[:, touched.target_row], params.transition_transform)
        cache.target_emb[touched.target_row] = encode(col, params)
    cache.dirty_users.discard(touched.user_row)
    cache.dirty_sources.discard(touched.source_row)
    cache.dirty_targets.discard(touched.target_row)


def component_scores(
    u: int, state: MatrixState, cache: EmbeddingCache, params: ModelParams, cfg: InferenceConfig
) -> ComponentScores:
    """Raw score vectors for user ``u``; transition components are None for a
    user with no history (collaborative fallback)."""
    p_collab = collaborative_scores(u, cache, params)
    last = int(state.last_item[u])
    if last < 0:
        return ComponentScores(collab=p_collab, one_hop=None, two_hop=None, fallback=True)
    p_one = one_hop_scores(last, cache, params)
    if cfg.hops == 2:
        p_two = two_hop_scores(u, last, cache, cfg.two_hop_factors)
    else:
        p_two = multi_hop_scores(u, last, cfg.hops, cache, cfg.two_hop_factors)
    return ComponentScores(collab=p_collab, one_hop=p_one, two_hop=p_two, fallback=False)


def _finalize(p: np.ndarray, u: int, state: MatrixState, cfg: InferenceConfig) -> np.ndarray:
    if cfg.filter_seen:
        p = p.copy()
        p[state.interactions[u] > 0] = -np.inf
    return p


def predict_next(
    u: int, state: MatrixState, cache: EmbeddingCache, params: ModelParams, cfg: InferenceConfig
) -> tuple[np.ndarray, bool]:
    """Combined next-item scores for user ``u``.

    Users with no history fall back to the collaborative component alone
    (flagged), regardless of which components are enabled, so every event in a
    stream still yields a ranking.
    """
    comps = component_scores(u, state, cache, params, cfg)
    if comps.fallback:
        p = minmax_normalize(comps.collab) if cfg.normalization == "minmax" else comps.collab
        return _finalize(p, u, state, cfg), True
    p = combine(comps.collab, comps.one_hop, comps.two_hop, cfg)
    return _finalize(p, u, state, cfg), False


def step(
    state: MatrixState,
    cache: EmbeddingCache,
    u: int,
    i: int,
    params: ModelParams,
    cfg: InferenceConfig,
    index: int = 0,
) -> tuple[ReplayRecord, np.ndarray]:
    """Score, record, then fold one true event into state and cache.

    The true item updates the state after scoring (teacher forcing), and only
    the touched embedding rows are re-encoded. Returns the record and the
    score vector the rank was taken from.
    """
    t0 = time.perf_counter_ns()
    p, fallback = predict_next(u, state, cache, params, cfg)
    rank = rank_of(p, i)
    touched = apply_interaction(state, u, i)
    refresh_rows(cache, state, params, touched)
    latency_us = (time.perf_counter_ns() - t0) / 1e3
    record = ReplayRecord(
        index=index,
        user=u,
        item=i,
        rank=rank,
        reciprocal_rank=1.0 / rank,
        hit=rank <= cfg.top_k,
        latency_us=latency_us,
        fallback=fallback,
    )
    return record, p


@dataclass
class ReplayResult:
    records: list[ReplayRecord]
    scores: Optional[list[np.ndarray]] = None

    def ranks(self) -> list[int]:
        return [r.rank for r in self.records]


def replay(
    stream: InteractionLog,
    state: MatrixState,
    cache: EmbeddingCache,
    params: ModelParams,
    cfg: InferenceConfig,
    collect_scores: bool = False,
    on_components: Optional[Callable[[int, int, int, ComponentScores], None]] = None,
) -> ReplayResult:
    """Fold ``step`` over a stream in order, mutating state and cache.

    ``on_components`` receives the raw component vectors of each event before
    the update is applied; the hyperparameter sweep uses it to score every
    weight setting from a single pass.
    """
    records: list[ReplayRecord] = []
    scores: Optional[list[np.ndarray]] = [] if collect_scores else None
    for index, (u, i) in enumerate(zip(stream.users.tolist(), stream.items.tolist())):
        if on_components is not None:
            on_components(index, u, i, component_scores(u, state, cache, params, cfg))
        record, p = step(state, cache, u, i, params, cfg, index=index)
        records.append(record)
        if scores is not None:
            scores.append(p)
    return ReplayResult(records=records, scores=scores)


def naive_replay(
    prior: InteractionLog,
    stream: InteractionLog,
    params: ModelParams,
    cfg: InferenceConfig,
    collect_scores: bool = False,
    self_transitions: bool = True,
) -> ReplayResult:
    """Reference path with no caching: before every event, rebuild the matrices
    from the full event prefix and re-encode all rows, then score.

    Orders of magnitude slower than :func:`replay`; exists as the correctness
    oracle and the efficiency baseline.
    """
    users = list(prior.users.tolist())
    items = list(prior.items.tolist())
    records: list[ReplayRecord] = []
    scores: Optional[list[np.ndarray]] = [] if collect_scores else None
    for index, (u, i) in enumerate(zip(stream.users.tolist(), stream.items.tolist())):
        t0 = time.perf_counter_ns()
        prefix = InteractionLog(
            users=np.asarray(users, dtype=np.int64),
            items=np.asarray(items, dtype=np.int64),
            timestamps=np.arange(len(users), dtype=np.int64),
            num_users=prior.num_users,
            num_items=prior.num_items,
        )
        state = build_state(prefix, self_transitions=self_transitions)
        cache = warm_cache(state, params)
        p, fallback = predict_next(u, state, cache, params, cfg)
        rank = rank_of(p, i)
        latency_us = (time.perf_counter_ns() - t0) / 1e3
        users.append(u)
        items.append(i)
        records.append(
            ReplayRecord(
                index=index,
                user=u,
                item=i,
                rank=rank,
                reciprocal_rank=1.0 / rank,
                hit=rank <= cfg.top_k,
                latency_us=latency_us,
                fallback=fallback,
            )
        )
        if scores is not None:
            scores.append(p)
    return ReplayResult(records=records, scores=scores)


def latency_summary(records: list[ReplayRecord]) -> dict:
    """Latency distribution of a replay in microseconds."""
    if not records:
        return {"events": 0, "mean_us": None, "p50_us": None, "p95_us": None}
    lat = np.array([r.latency_us for r in records])
    return {
        "events": len(records),
        "mean_us": float(lat.mean()),
        "p50_us": float(np.percentile(lat, 50)),
        "p95_us": float(np.percentile(lat, 95)),
    }


def replay_report(records: list[ReplayRecord], cfg: InferenceConfig) -> dict:
    """JSON-ready summary of a replay: metrics, fallbacks, latency percentiles."""
    summary = latency_summary(records)
    ranks = [r.rank for r in records]
    return {
        "events": len(records),
        "mrr": float(np.mean([1.0 / r for r in ranks])) if ranks else None,
        "recall_at_k": float(np.mean([r <= cfg.top_k for r in ranks])) if ranks else None,
        "k": cfg.top_k,
        "fallback_count": sum(r.fallback for r in records),
        "p50_latency_us": summary["p50_us"],
        "p95_latency_us": summary["p95_us"],
    }
