"""Long-running engine state behind the service endpoints.

Owns the matrices, the embedding cache, and the frozen model weights. Writes
(event application) take an exclusive lock; the matrices only ever grow, and
weights never change, so reads between writes are consistent snapshots.
"""

from __future__ import annotations

import threading
import time
from typing import Optional

from .. import persist
from ..incremental import (
    ReplayRecord,
    apply_interaction,
    predict_next,
    refresh_rows,
    step,
    warm_cache,
)
from ..ingest import Vocabulary, load_canonical
from ..matrices import MatrixState, build_state
from ..model import ModelParams
from ..scoring import InferenceConfig, top_k


class UnknownKeyError(KeyError):
    """User or item key not present in the prepared vocabulary."""


class EngineRuntime:
    """One loaded model plus mutable interaction state, single-writer."""

    def __init__(
        self,
        state: MatrixState,
        params: ModelParams,
        vocab: Vocabulary,
        infer_cfg: InferenceConfig,
    ) -> None:
        self.state = state
        self.params = params
        self.vocab = vocab
        self.cfg = infer_cfg
        self.cache = warm_cache(state, params)
        self.records: list[ReplayRecord] = []
        self._lock = threading.Lock()

    @classmethod
    def from_artifacts(
        cls,
        data_dir: str,
        checkpoint_path: str,
        state_path: Optional[str] = None,
        infer_cfg: Optional[InferenceConfig] = None,
    ) -> "EngineRuntime":
        """Load a prepared dataset and checkpoint; the state snapshot is
        optional and defaults to replaying every canonical event."""
        log, vocab = load_canonical(data_dir)
        params, _meta = persist.load_checkpoint(
            checkpoint_path, expected_vocab_digest=vocab.digest())
        if state_path:
            state = persist.load_state(state_path, expected_vocab_digest=vocab.digest())
        else:
            state = build_state(log)
        return cls(state, params, vocab, infer_cfg or InferenceConfig())

    def _user_idx(self, user_key: str) -> int:
        try:
            return self.vocab.user_index[user_key]
        except KeyError:
            raise UnknownKeyError(f"unknown user key {user_key!r}") from None

    def _item_idx(self, item_key: str) -> int:
        try:
            return self.vocab.item_index[item_key]
        except KeyError:
            raise UnknownKeyError(f"unknown item key {item_key!r}") from None

    def health(self) -> dict:
        return {
            "status": "ok",
            "users": self.state.num_users,
            "items": self.state.num_items,
            "hidden": self.params.hidden,
            "applied_events": self.state.applied_count,
        }

    def recommend(self, user_key: str, k: int) -> dict:
        u = self._user_idx(user_key)
        with self._lock:
            scores, fallback = predict_next(u, self.state, self.cache, self.params, self.cfg)
        items = [
            {"rank": pos, "item": self.vocab.items[int(idx)], "score": float(scores[int(idx)])}
            for pos, idx in enumerate(top_k(scores, min(k, len(scores))), start=1)
        ]
        return {"user": user_key, "fallback": fallback, "items": items}

    def apply_event(self, user_key: str, item_key: str) -> dict:
        """Fold one observed interaction into the state without scoring it."""
        u = self._user_idx(user_key)
        i = self._item_idx(item_key)
        with self._lock:
            t0 = time.perf_counter_ns()
            touched = apply_interaction(self.state, u, i)
            refresh_rows(self.cache, self.state, self.params, touched)
            latency_us = (time.perf_counter_ns() - t0) / 1e3
            applied = self.state.applied_count
        return {
            "applied_events": applied,
            "touched_user_row": touched.user_row,
            "touched_source_row": touched.source_row,
            "touched_target_row": touched.target_row,
            "latency_us": latency_us,
        }

    def step_event(self, user_key: str, item_key: str) -> dict:
        """Score the user, record the true item's rank, then apply the event."""
        u = self._user_idx(user_key)
        i = self._item_idx(item_key)
        with self._lock:
            record, _scores = step(
                self.state, self.cache, u, i, self.params, self.cfg,
                index=len(self.records),
            )
            self.records.append(record)
        return {
            "user": user_key,
            "item": item_key,
            "rank": record.rank,
            "reciprocal_rank": record.reciprocal_rank,
            "in_top_k": record.hit,
            "fallback": record.fallback,
            "latency_us": record.latency_us,
        }

    def metrics(self) -> dict:
        """Replay-style summary over all events scored through ``step_event``."""
        from ..incremental import replay_report

        with self._lock:
            records = list(self.records)
        return replay_report(records, self.cfg)
