"""Shared-encoder, three-decoder reconstruction model and its trainer.

One sigmoid encoder maps length-n rows to k dimensions; three linear (or
sigmoid) decoder heads map back to n dimensions to reconstruct, respectively,
user interaction rows ("collab"), transition-matrix rows ("source"), and
transition-matrix columns ("target"). Training minimizes the summed squared
reconstruction error of the three heads with a hand-rolled Adam step; batches
are whole rows drawn from one source matrix at a time, with the union of all
batches shuffled every epoch.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .matrices import MatrixState

logger = logging.getLogger(__name__)

HEADS = ("collab", "source", "target")
DECODER_ACTIVATIONS = ("identity", "sigmoid")
TRANSITION_TRANSFORMS = ("log1p", "raw")


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ModelParams:
    """Encoder weights/bias plus one (weights, bias) pair per decoder head."""

    enc_w: np.ndarray
    enc_b: np.ndarray
    collab_w: np.ndarray
    collab_b: np.ndarray
    source_w: np.ndarray
    source_b: np.ndarray
    target_w: np.ndarray
    target_b: np.ndarray
    decoder_activation: str = "identity"
    transition_transform: str = "log1p"

    @property
    def num_items(self) -> int:
        return self.enc_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.enc_w.shape[1]

    def head_weights(self, head: str) -> tuple[np.ndarray, np.ndarray]:
        if head == "collab":
            return self.collab_w, self.collab_b
        if head == "source":
            return self.source_w, self.source_b
        if head == "target":
            return self.target_w, self.target_b
        raise ValueError(f"unknown decoder head {head!r}; expected one of {HEADS}")

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "enc_w": self.enc_w,
            "enc_b": self.enc_b,
            "collab_w": self.collab_w,
            "collab_b": self.collab_b,
            "source_w": self.source_w,
            "source_b": self.source_b,
            "target_w": self.target_w,
            "target_b": self.target_b,
        }

    def copy(self) -> "ModelParams":
        return ModelParams(
            **{name: arr.copy() for name, arr in self.tensors().items()},
            decoder_activation=self.decoder_activation,
            transition_transform=self.transition_transform,
        )

    def checksum(self) -> str:
        """Digest of all parameter bytes; frozen weights keep this constant."""
        h = hashlib.sha256()
        for name in sorted(self.tensors()):
            h.update(np.ascontiguousarray(self.tensors()[name]).tobytes())
        return h.hexdigest()


@dataclass
class TrainConfig:
    hidden: int = 128
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decoder_activation: str = "identity"
    transition_transform: str = "log1p"
    patience: Optional[int] = None

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("hidden and batch_size must be >= 1, epochs >= 0")
        if self.decoder_activation not in DECODER_ACTIVATIONS:
            raise ValueError(f"decoder_activation must be one of {DECODER_ACTIVATIONS}")
        if self.transition_transform not in TRANSITION_TRANSFORMS:
            raise ValueError(f"transition_transform must be one of {TRANSITION_TRANSFORMS}")


def init_params(
    n: int,
    k: int,
    seed: int | np.random.Generator,
    decoder_activation: str = "identity",
    transition_transform: str = "log1p",
) -> ModelParams:
    """Seeded uniform init: encoder in [-1/sqrt(n), 1/sqrt(n)], decoders in
    [-1/sqrt(k), 1/sqrt(k)], biases zero."""
    if n < 1 or k < 1:
        raise ValueError("n and k must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    enc_bound = 1.0 / np.sqrt(n)
    dec_bound = 1.0 / np.sqrt(k)
    return ModelParams(
        enc_w=rng.uniform(-enc_bound, enc_bound, size=(n, k)),
        enc_b=np.zeros(k),
        collab_w=rng.uniform(-dec_bound, dec_bound, size=(k, n)),
        collab_b=np.zeros(n),
        source_w=rng.uniform(-dec_bound, dec_bound, size=(k, n)),
        source_b=np.zeros(n),
        target_w=rng.uniform(-dec_bound, dec_bound, size=(k, n)),
        target_b=np.zeros(n),
        decoder_activation=decoder_activation,
        transition_transform=transition_transform,
    )


def transform_transitions(transitions: np.ndarray, mode: str) -> np.ndarray:
    """Map raw transition counts to the training/inference view of the matrix."""
    if mode == "log1p":
        return np.log1p(transitions.astype(np.float64))
    if mode == "raw":
        return transitions.astype(np.float64)
    raise ValueError(f"unknown transition transform {mode!r}")


def encode(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Sigmoid encoder: rows of width n -> rows of width k. Accepts a single row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.num_items:
        raise ValueError(f"input width {x.shape[-1]} != model width {params.num_items}")
    return sigmoid(x @ params.enc_w + params.enc_b)


def decode(embedding: np.ndarray, head: str, params: ModelParams) -> np.ndarray:
    """Head decoder: rows of width k -> rows of width n. Accepts a single row."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape[-1] != params.hidden:
        raise ValueError(f"embedding width {embedding.shape[-1]} != hidden {params.hidden}")
    w, b = params.head_weights(head)
    y = embedding @ w + b
    if params.decoder_activation == "sigmoid":
        return sigmoid(y)
    return y


def head_loss_and_grads(
    x: np.ndarray, head: str, params: ModelParams
) -> tuple[float, dict[str, np.ndarray]]:
    """Squared-error reconstruction loss of one head over a row batch, plus
    gradients for the encoder and that head's decoder."""
    w, b = params.head_weights(head)
    hidden = sigmoid(x @ params.enc_w + params.enc_b)
    y = hidden @ w + b
    out = sigmoid(y) if params.decoder_activation == "sigmoid" else y
    residual = out - x
    loss = float(np.sum(residual * residual))
    d_out = 2.0 * residual
    d_y = d_out * out * (1.0 - out) if params.decoder_activation == "sigmoid" else d_out
    d_hidden = d_y @ w.T
    d_z = d_hidden * hidden * (1.0 - hidden)
    grads = {
        f"{head}_w": hidden.T @ d_y,
        f"{head}_b": d_y.sum(axis=0),
        "enc_w": x.T @ d_z,
        "enc_b": d_z.sum(axis=0),
    }
    return loss, grads


def reconstruction_loss(
    state: MatrixState, params: ModelParams
) -> tuple[float, float, float, float]:
    """Full-matrix squared Frobenius reconstruction errors (collab, source, target, total)."""
    r = state.interactions
    s = transform_transitions(state.transitions, params.transition_transform)
    g = s.T
    loss_c = float(np.sum((decode(encode(r, params), "collab", params) - r) ** 2))
    loss_s = float(np.sum((decode(encode(s, params), "source", params) - s) ** 2))
    loss_t = float(np.sum((decode(encode(g, params), "target", params) - g) ** 2))
    return loss_c, loss_s, loss_t, loss_c + loss_s + loss_t


class Adam:
    """Adaptive-moment optimizer with an independent step count per tensor,
    since decoder heads only see their own batches."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            param = tensors[name]
            if name not in self._m:
                self._m[name] = np.zeros_like(param)
                self._v[name] = np.zeros_like(param)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochStats:
    epoch: int
    loss_collab: float
    loss_source: float
    loss_target: float
    loss_total: float
    millis: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochStats] = field(default_factory=list)
    stopped_early: bool = False


def train(
    state: MatrixState,
    cfg: TrainConfig,
    validation_score: Optional[Callable[[ModelParams], float]] = None,
) -> TrainResult:
    """Train by mini-batch-union gradient descent.

    Every epoch, rows of the interaction matrix, the transformed transition
    matrix, and its transpose are shuffled and partitioned into per-source
    batches; the union of all batches is then shuffled and each batch takes one
    Adam step on the encoder plus the matching head. Deterministic for a fixed
    seed and thread count.

    ``validation_score`` (higher is better) enables early stopping: training
    stops after ``cfg.patience`` epochs without improvement and the best
    parameters are returned.
    """
    rng = np.random.default_rng(cfg.seed)
    params = init_params(
        state.num_items,
        cfg.hidden,
        rng,
        decoder_activation=cfg.decoder_activation,
        transition_transform=cfg.transition_transform,
    )
    source_view = transform_transitions(state.transitions, cfg.transition_transform)
    matrices = {
        "collab": state.interactions,
        "source": source_view,
        "target": np.ascontiguousarray(source_view.T),
    }
    optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    tensors = params.tensors()
    history: list[EpochStats] = []
    best_score = -np.inf
    best_params = params
    epochs_since_best = 0
    stopped_early = False

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        batches: list[tuple[str, np.ndarray]] = []
        for head in HEADS:
            row_order = rng.permutation(matrices[head].shape[0])
            for start in range(0, len(row_order), cfg.batch_size):
                batches.append((head, row_order[start : start + cfg.batch_size]))
        rng.shuffle(batches)
        epoch_loss = {head: 0.0 for head in HEADS}
        for head, rows in batches:
            loss, grads = head_loss_and_grads(matrices[head][rows], head, params)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} on a {head} batch; "
                    f"lower the learning rate (current {cfg.learning_rate})"
                )
            epoch_loss[head] += loss
            optimizer.step(tensors, grads)
        millis = (time.perf_counter() - t0) * 1e3
        stats = EpochStats(
            epoch=epoch,
            loss_collab=epoch_loss["collab"],
            loss_source=epoch_loss["source"],
            loss_target=epoch_loss["target"],
            loss_total=sum(epoch_loss.values()),
            millis=millis,
        )
        history.append(stats)
        logger.info(
            "epoch=%d loss_collab=%.6f loss_source=%.6f loss_target=%.6f "
            "loss_total=%.6f ms=%.1f",
            stats.epoch, stats.loss_collab, stats.loss_source, stats.loss_target,
            stats.loss_total, stats.millis,
        )
        if validation_score is not None and cfg.patience is not None:
            score = validation_score(params)
            if score > best_score:
                best_score = score
                best_params = params.copy()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= cfg.patience:
                    stopped_early = True
                    break

    track_best = validation_score is not None and cfg.patience is not None
    final = best_params if track_best else params
    return TrainResult(params=final, history=history, stopped_early=stopped_early)
