"""Interaction and transition matrices with single-event incremental updates.

Holds the binary user-item interaction matrix, the item-to-item transition
count matrix, and per-user last-item/count state. ``build_state`` is a batch
constructor; ``apply_interaction`` folds one event into an existing state and
reports which rows changed so embedding caches can refresh just those rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ingest import InteractionLog


@dataclass(frozen=True)
class TouchedRows:
    """Rows invalidated by one event: the user's interaction row, the changed
    transition row (previous item) and transition column (new item)."""

    user_row: int
    source_row: Optional[int]
    target_row: Optional[int]


@dataclass
class MatrixState:
    """Matrices plus per-user sequence state after ``applied_count`` events.

    ``interactions`` is binary (stored float64 so rows feed the encoder
    directly); ``transitions`` keeps raw integer counts so incremental updates
    stay exact. ``last_item`` is -1 for users with no events yet.
    """

    interactions: np.ndarray
    transitions: np.ndarray
    last_item: np.ndarray
    event_counts: np.ndarray
    applied_count: int = 0
    self_transitions: bool = True

    @property
    def num_users(self) -> int:
        return self.interactions.shape[0]

    @property
    def num_items(self) -> int:
        return self.interactions.shape[1]

    def copy(self) -> "MatrixState":
        return MatrixState(
            interactions=self.interactions.copy(),
            transitions=self.transitions.copy(),
            last_item=self.last_item.copy(),
            event_counts=self.event_counts.copy(),
            applied_count=self.applied_count,
            self_transitions=self.self_transitions,
        )


def empty_state(num_users: int, num_items: int, self_transitions: bool = True) -> MatrixState:
    return MatrixState(
        interactions=np.zeros((num_users, num_items), dtype=np.float64),
        transitions=np.zeros((num_items, num_items), dtype=np.int64),
        last_item=np.full(num_users, -1, dtype=np.int64),
        event_counts=np.zeros(num_users, dtype=np.int64),
        applied_count=0,
        self_transitions=self_transitions,
    )


def build_state(log: InteractionLog, self_transitions: bool = True) -> MatrixState:
    """Batch-build the state for a log; equivalent to folding ``apply_interaction``."""
    m, n = log.num_users, log.num_items
    if len(log) and (log.users.max() >= m or log.items.max() >= n):
        raise IndexError("log contains indices outside the declared matrix dimensions")
    state = empty_state(m, n, self_transitions=self_transitions)
    if not len(log):
        return state
    state.interactions[log.users, log.items] = 1.0
    # Stable sort by user keeps each user's events in stream order, so adjacent
    # rows within a user group are exactly the consecutive pairs.
    order = np.argsort(log.users, kind="stable")
    u_sorted = log.users[order]
    i_sorted = log.items[order]
    same_user = u_sorted[1:] == u_sorted[:-1]
    src = i_sorted[:-1][same_user]
    dst = i_sorted[1:][same_user]
    if not self_transitions:
        keep = src != dst
        src, dst = src[keep], dst[keep]
    np.add.at(state.transitions, (src, dst), 1)
    state.event_counts = np.bincount(log.users, minlength=m).astype(np.int64)
    group_end = np.flatnonzero(np.r_[u_sorted[1:] != u_sorted[:-1], True])
    state.last_item[u_sorted[group_end]] = i_sorted[group_end]
    state.applied_count = len(log)
    return state


def apply_interaction(state: MatrixState, u: int, i: int) -> TouchedRows:
    """Fold one (user, item) event into the state in place.

    Marks the interaction, counts the transition from the user's previous item
    (when one exists), and advances the per-user sequence state. Returns the
    rows a downstream embedding cache must refresh.
    """
    if not (0 <= u < state.num_users and 0 <= i < state.num_items):
        raise IndexError(f"event ({u}, {i}) outside matrix dimensions "
                         f"({state.num_users}, {state.num_items})")
    prev = int(state.last_item[u])
    source_row: Optional[int] = None
    target_row: Optional[int] = None
    state.interactions[u, i] = 1.0
    if prev >= 0 and (state.self_transitions or prev != i):
        state.transitions[prev, i] += 1
        source_row = prev
        target_row = i
    state.last_item[u] = i
    state.event_counts[u] += 1
    state.applied_count += 1
    return TouchedRows(user_row=u, source_row=source_row, target_row=target_row)


def user_sequence(log: InteractionLog, u: int) -> np.ndarray:
    """Items of user ``u`` in the log's chronological order (empty if inactive)."""
    if not (0 <= u < log.num_users):
        raise IndexError(f"user {u} outside [0, {log.num_users})")
    return log.items[log.users == u].copy()
