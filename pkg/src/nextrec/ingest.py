"""Dataset ingestion: parse raw rating files, filter, index, and split chronologically.

The output of this stage is a canonical event stream: dense user/item indices,
sorted by (timestamp, original file order), written as a TSV plus two vocabulary
files so downstream stages never touch the raw formats again.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FORMATS = ("ml100k", "ml1m", "amazon-csv")

_SEPARATORS = {"ml100k": "\t", "ml1m": "::", "amazon-csv": ","}

EVENTS_FILE = "events.tsv"
USER_VOCAB_FILE = "users.txt"
ITEM_VOCAB_FILE = "items.txt"


@dataclass(frozen=True)
class RawEvent:
    """One line of a raw dataset: external keys, rating, unix timestamp, line index."""

    user_key: str
    item_key: str
    rating: float
    timestamp: int
    file_order: int


@dataclass
class Vocabulary:
    """External key -> dense index maps, index = position in the key list."""

    users: list[str]
    items: list[str]
    user_index: dict[str, int] = field(init=False, repr=False)
    item_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.user_index = {key: idx for idx, key in enumerate(self.users)}
        self.item_index = {key: idx for idx, key in enumerate(self.items)}

    def digest(self) -> str:
        """Hash binding artifacts to this exact vocabulary (same bytes as the files on disk)."""
        h = hashlib.sha256()
        h.update(_vocab_bytes(self.users))
        h.update(_vocab_bytes(self.items))
        return h.hexdigest()


@dataclass
class InteractionLog:
    """Chronologically ordered events with dense indices.

    ``num_users``/``num_items`` come from the full vocabulary, so a split of the
    log keeps the full matrix dimensions even when some users or items only
    appear in later splits.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int

    def __len__(self) -> int:
        return len(self.users)

    def events(self):
        """Iterate (user_idx, item_idx, timestamp) in stream order."""
        return zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist())

    def slice(self, start: int, stop: int) -> "InteractionLog":
        return InteractionLog(
            users=self.users[start:stop],
            items=self.items[start:stop],
            timestamps=self.timestamps[start:stop],
            num_users=self.num_users,
            num_items=self.num_items,
        )


@dataclass
class SplitLog:
    """Chronological train/validation/test partition of one log."""

    train: InteractionLog
    validation: InteractionLog
    test: InteractionLog


def _vocab_bytes(keys: list[str]) -> bytes:
    return ("\n".join(keys) + "\n").encode("utf-8") if keys else b""


def parse_dataset(path: str | Path, fmt: str) -> tuple[list[RawEvent], int]:
    """Parse a raw ratings file into events.

    Returns ``(events, malformed_count)`` where malformed lines (wrong field
    count, unparseable rating/timestamp, negative timestamp) are skipped and
    counted. Raises ``ValueError`` for an unknown format tag or a file with no
    parseable lines.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown dataset format {fmt!r}; expected one of {FORMATS}")
    sep = _SEPARATORS[fmt]
    events: list[RawEvent] = []
    malformed = 0
    with open(path, "r", encoding="utf-8") as handle:
        for order, line in enumerate(handle):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                malformed += 1
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                malformed += 1
                continue
            user_key, item_key, rating_s, ts_s = (p.strip() for p in parts)
            try:
                rating = float(rating_s)
                timestamp = int(float(ts_s))
            except ValueError:
                malformed += 1
                continue
            if not user_key or not item_key or timestamp < 0:
                malformed += 1
                continue
            events.append(RawEvent(user_key, item_key, rating, timestamp, order))
    if not events:
        raise ValueError(f"no parseable lines in {path} (format {fmt}, {malformed} malformed)")
    if malformed:
        logger.warning("skipped %d malformed lines in %s", malformed, path)
    return events, malformed


def filter_min_count(
    events: list[RawEvent], min_count: int = 5, iterative: bool = False
) -> list[RawEvent]:
    """Drop events of users/items with fewer than ``min_count`` interactions.

    Counts are taken over the input in a single pass by default: a surviving
    user/item is guaranteed ``min_count`` appearances in the ORIGINAL list, not
    necessarily in the output. ``iterative=True`` re-filters until stable
    (k-core style) instead.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    kept = events
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for ev in kept:
            user_counts[ev.user_key] = user_counts.get(ev.user_key, 0) + 1
            item_counts[ev.item_key] = item_counts.get(ev.item_key, 0) + 1
        survivors = [
            ev
            for ev in kept
            if user_counts[ev.user_key] >= min_count and item_counts[ev.item_key] >= min_count
        ]
        if not iterative or len(survivors) == len(kept):
            kept = survivors
            break
        kept = survivors
        if not kept:
            break
    if not kept:
        raise ValueError(f"min_count={min_count} filtering removed every event")
    return kept


def index_and_sort(events: list[RawEvent]) -> tuple[InteractionLog, Vocabulary]:
    """Sort events by (timestamp, file_order) and assign dense indices by first appearance."""
    if not events:
        raise ValueError("cannot index an empty event list")
    ordered = sorted(events, key=lambda ev: (ev.timestamp, ev.file_order))
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    users = np.empty(len(ordered), dtype=np.int64)
    items = np.empty(len(ordered), dtype=np.int64)
    timestamps = np.empty(len(ordered), dtype=np.int64)
    for pos, ev in enumerate(ordered):
        if ev.user_key not in user_index:
            user_index[ev.user_key] = len(user_index)
        if ev.item_key not in item_index:
            item_index[ev.item_key] = len(item_index)
        users[pos] = user_index[ev.user_key]
        items[pos] = item_index[ev.item_key]
        timestamps[pos] = ev.timestamp
    vocab = Vocabulary(users=list(user_index), items=list(item_index))
    log = InteractionLog(
        users=users,
        items=items,
        timestamps=timestamps,
        num_users=len(vocab.users),
        num_items=len(vocab.items),
    )
    return log, vocab


def chronological_split(
    log: InteractionLog, train_frac: float = 0.8, val_frac: float = 0.1
) -> SplitLog:
    """Split the sorted log into a train prefix, validation middle, and test suffix.

    Sizes are ``floor(train_frac*N)`` and ``floor(val_frac*N)``; the test split
    takes the remainder. A split that would be empty while its fraction is
    positive is an error.
    """
    if train_frac <= 0 or val_frac < 0 or train_frac + val_frac >= 1:
        raise ValueError("need train_frac > 0, val_frac >= 0, train_frac + val_frac < 1")
    n_total = len(log)
    n_train = int(np.floor(train_frac * n_total))
    n_val = int(np.floor(val_frac * n_total))
    n_test = n_total - n_train - n_val
    if n_train == 0 or n_test == 0 or (val_frac > 0 and n_val == 0):
        raise ValueError(
            f"log of {n_total} events is too small for fractions "
            f"({train_frac}, {val_frac}): sizes ({n_train}, {n_val}, {n_test})"
        )
    return SplitLog(
        train=log.slice(0, n_train),
        validation=log.slice(n_train, n_train + n_val),
        test=log.slice(n_train + n_val, n_total),
    )


def write_canonical(log: InteractionLog, vocab: Vocabulary, out_dir: str | Path) -> None:
    """Write the canonical events TSV plus user/item vocabulary files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{u}\t{i}\t{t}\n"
        for u, i, t in zip(log.users.tolist(), log.items.tolist(), log.timestamps.tolist())
    ]
    (out / EVENTS_FILE).write_bytes("".join(lines).encode("utf-8"))
    (out / USER_VOCAB_FILE).write_bytes(_vocab_bytes(vocab.users))
    (out / ITEM_VOCAB_FILE).write_bytes(_vocab_bytes(vocab.items))


def load_canonical(data_dir: str | Path) -> tuple[InteractionLog, Vocabulary]:
    """Load a directory produced by :func:`write_canonical`."""
    data = Path(data_dir)
    users = (data / USER_VOCAB_FILE).read_text(encoding="utf-8").splitlines()
    items = (data / ITEM_VOCAB_FILE).read_text(encoding="utf-8").splitlines()
    vocab = Vocabulary(users=users, items=items)
    raw = np.loadtxt(data / EVENTS_FILE, dtype=np.int64, delimiter="\t", ndmin=2)
    if raw.size == 0:
        raise ValueError(f"empty canonical event file in {data_dir}")
    log = InteractionLog(
        users=raw[:, 0].copy(),
        items=raw[:, 1].copy(),
        timestamps=raw[:, 2].copy(),
        num_users=len(vocab.users),
        num_items=len(vocab.items),
    )
    bad_u = int(log.users.max()) if len(log) else -1
    bad_i = int(log.items.max()) if len(log) else -1
    if bad_u >= log.num_users or bad_i >= log.num_items:
        raise ValueError(f"canonical events in {data_dir} reference indices outside the vocabulary")
    return log, vocab


def prepare_dataset(
    path: str | Path,
    fmt: str,
    out_dir: str | Path,
    min_count: int = 5,
    iterative: bool = False,
) -> dict:
    """Full ingest pipeline: parse, filter, index, write canonical files.

    Returns summary stats (users/items/events/malformed).
    """
    events, malformed = parse_dataset(path, fmt)
    kept = filter_min_count(events, min_count=min_count, iterative=iterative)
    log, vocab = index_and_sort(kept)
    write_canonical(log, vocab, out_dir)
    return {
        "users": log.num_users,
        "items": log.num_items,
        "events": len(log),
        "malformed": malformed,
        "vocab_digest": vocab.digest(),
    }
