"""Versioned binary container for model checkpoints and matrix-state snapshots.

Layout: 6 magic bytes, an 8-byte little-endian length, a UTF-8 JSON header
terminated by a newline, then raw little-endian sections at the offsets the
header declares. Weights are stored as float32; the matrix state stores the
interaction matrix as packed row bitsets and transition counts as uint32.
A vocabulary digest in the header binds every file to the prepared dataset it
was computed from.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .matrices import MatrixState
from .model import ModelParams

MAGIC = b"ASRQ1\n"
FORMAT_VERSION = 1

_PARAM_SECTIONS = (
    "enc_w", "enc_b",
    "collab_w", "collab_b",
    "source_w", "source_b",
    "target_w", "target_b",
)


class CheckpointError(Exception):
    """Raised for unreadable, mismatched, or truncated container files."""


def _dtype(tag: str) -> np.dtype:
    return np.dtype(tag)  # tags are explicit little-endian, e.g. "<f4"


def _write_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Serialize header + sections atomically (temp file, fsync, rename)."""
    sections = []
    payload = bytearray()
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr).tobytes()
        sections.append(
            {
                "name": name,
                "offset": len(payload),
                "length": len(data),
                "dtype": arr.dtype.newbyteorder("<").str,
                "shape": list(arr.shape),
            }
        )
        payload.extend(data)
    header = dict(header, sections=sections)
    header_bytes = (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")

    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(MAGIC)
            handle.write(struct.pack("<Q", len(header_bytes)))
            handle.write(header_bytes)
            handle.write(bytes(payload))
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _read_container(path: str | Path, expected_kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a container file")
    header_len = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])[0]
    header_end = len(MAGIC) + 8 + header_len
    if header_end > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC) + 8 : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} "
            f"unsupported (expected {FORMAT_VERSION})"
        )
    if header.get("kind") != expected_kind:
        raise CheckpointError(f"{path}: contains a {header.get('kind')!r}, expected {expected_kind!r}")
    arrays: dict[str, np.ndarray] = {}
    payload = raw[header_end:]
    for section in header["sections"]:
        name = section["name"]
        start, length = section["offset"], section["length"]
        if start + length > len(payload):
            raise CheckpointError(f"{path}: truncated section {name!r}")
        dtype = _dtype(section["dtype"])
        count = length // dtype.itemsize
        if count * dtype.itemsize != length or count != int(np.prod(section["shape"], dtype=np.int64)):
            raise CheckpointError(f"{path}: section {name!r} length inconsistent with its shape")
        arrays[name] = (
            np.frombuffer(payload, dtype=dtype, count=count, offset=start)
            .reshape(section["shape"])
            .copy()
        )
    return header, arrays


def _check_digest(path: str | Path, header: dict, expected: str | None) -> None:
    if expected is not None and header.get("vocab_digest") != expected:
        raise CheckpointError(
            f"{path}: vocabulary digest mismatch "
            f"(file {header.get('vocab_digest')!r}, expected {expected!r}); "
            "the artifact was built from a different prepared dataset"
        )


def save_checkpoint(
    params: ModelParams,
    path: str | Path,
    vocab_digest: str,
    seed: int,
    num_users: int,
    extra: dict | None = None,
) -> None:
    """Write model weights as float32 sections with identifying metadata."""
    header = {
        "kind": "model",
        "format_version": FORMAT_VERSION,
        "m": num_users,
        "n": params.num_items,
        "k": params.hidden,
        "encoder_activation": "sigmoid",
        "decoder_activation": params.decoder_activation,
        "transition_transform": params.transition_transform,
        "seed": seed,
        "vocab_digest": vocab_digest,
    }
    if extra:
        header.update(extra)
    arrays = {
        name: params.tensors()[name].astype("<f4") for name in _PARAM_SECTIONS
    }
    _write_container(path, header, arrays)


def load_checkpoint(
    path: str | Path, expected_vocab_digest: str | None = None
) -> tuple[ModelParams, dict]:
    """Load a checkpoint; validates magic, version, digest, and section sizes."""
    header, arrays = _read_container(path, expected_kind="model")
    _check_digest(path, header, expected_vocab_digest)
    missing = [name for name in _PARAM_SECTIONS if name not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing sections {missing}")
    n, k = header["n"], header["k"]
    expected_shapes = {
        "enc_w": (n, k), "enc_b": (k,),
        "collab_w": (k, n), "collab_b": (n,),
        "source_w": (k, n), "source_b": (n,),
        "target_w": (k, n), "target_b": (n,),
    }
    for name, shape in expected_shapes.items():
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"{path}: section {name!r} has shape {arrays[name].shape}, expected {shape}"
            )
    params = ModelParams(
        **{name: arrays[name].astype(np.float64) for name in _PARAM_SECTIONS},
        decoder_activation=header["decoder_activation"],
        transition_transform=header["transition_transform"],
    )
    return params, header


def save_state(state: MatrixState, path: str | Path, vocab_digest: str) -> None:
    """Snapshot the matrix state: bitset interaction rows, uint32 transition counts."""
    if state.transitions.max(initial=0) >= 2**32:
        raise CheckpointError("transition counts exceed uint32 range")
    header = {
        "kind": "state",
        "format_version": FORMAT_VERSION,
        "m": state.num_users,
        "n": state.num_items,
        "self_transitions": state.self_transitions,
        "vocab_digest": vocab_digest,
    }
    arrays = {
        "interactions_bits": np.packbits(state.interactions.astype(bool), axis=1),
        "transitions": state.transitions.astype("<u4"),
        "last_item": state.last_item.astype("<i4"),
        "event_counts": state.event_counts.astype("<u4"),
        "applied_count": np.array([state.applied_count], dtype="<u8"),
    }
    _write_container(path, header, arrays)


def load_state(path: str | Path, expected_vocab_digest: str | None = None) -> MatrixState:
    """Load a matrix-state snapshot written by :func:`save_state`."""
    header, arrays = _read_container(path, expected_kind="state")
    _check_digest(path, header, expected_vocab_digest)
    m, n = header["m"], header["n"]
    bits = arrays["interactions_bits"]
    interactions = np.unpackbits(bits.astype(np.uint8), axis=1, count=n).astype(np.float64)
    if interactions.shape != (m, n):
        raise CheckpointError(f"{path}: interaction section inconsistent with (m={m}, n={n})")
    return MatrixState(
        interactions=interactions,
        transitions=arrays["transitions"].astype(np.int64),
        last_item=arrays["last_item"].astype(np.int64),
        event_counts=arrays["event_counts"].astype(np.int64),
        applied_count=int(arrays["applied_count"][0]),
        self_transitions=bool(header["self_transitions"]),
    )
