"""Per-item score vectors, their weighted combination, and deterministic ranking.

Three signals score a user's next item: the decoded interaction row (long-term
collaborative preference), the decoded transition row of the last item (one-hop
follow-up statistics), and an embedding-space product approximating two-hop
transitions. Ties always break toward the smaller item index so rankings are
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelParams, decode

COMPONENTS = ("collab", "one_hop", "two_hop")
NORMALIZATIONS = ("none", "minmax")
TWO_HOP_FACTORS = ("ab", "a", "b")


@dataclass(frozen=True)
class InferenceConfig:
    """Weights and switches for assembling the final score vector.

    ``lambda1`` weights the collaborative component, ``lambda2`` the one-hop
    component; the two-hop component takes the remaining ``1 - λ1 - λ2``.
    Disabled components contribute nothing and the remaining weights are
    renormalized to sum to one. ``two_hop_factors`` selects which embeddings
    enter the two-hop product: "ab" multiplies the user and last-item
    embeddings elementwise, "a"/"b" use just one of them.
    """

    lambda1: float = 1.0 / 3.0
    lambda2: float = 1.0 / 3.0
    hops: int = 2
    normalization: str = "minmax"
    components: frozenset = field(default_factory=lambda: frozenset(COMPONENTS))
    filter_seen: bool = False
    top_k: int = 10
    two_hop_factors: str = "ab"

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.lambda1 + self.lambda2 > 1.0 + 1e-12:
            raise ValueError("lambda1 + lambda2 must be <= 1")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.two_hop_factors not in TWO_HOP_FACTORS:
            raise ValueError(f"two_hop_factors must be one of {TWO_HOP_FACTORS}")
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown components {sorted(unknown)}")
        if not self.components:
            raise ValueError("at least one component must be enabled")
        object.__setattr__(self, "components", frozenset(self.components))

    def with_lambdas(self, lambda1: float, lambda2: float) -> "InferenceConfig":
        return replace(self, lambda1=lambda1, lambda2=lambda2)


def collaborative_scores(u: int, cache, params: ModelParams) -> np.ndarray:
    """Decoded interaction row of user ``u``: long-term preference scores."""
    return decode(cache.user_emb[u], "collab", params)


def one_hop_scores(i: int, cache, params: ModelParams) -> np.ndarray:
    """Decoded transition row of item ``i``: what tends to follow it."""
    return decode(cache.source_emb[i], "source", params)


def _transition_factor(u: int, i: int, cache, factors: str) -> np.ndarray:
    if factors == "ab":
        return cache.source_emb[i] * cache.user_emb[u]
    if factors == "a":
        return cache.user_emb[u]
    if factors == "b":
        return cache.source_emb[i]
    raise ValueError(f"two_hop_factors must be one of {TWO_HOP_FACTORS}")


def two_hop_scores(u: int, i: int, cache, factors: str = "ab") -> np.ndarray:
    """Two-hop transition scores from embeddings, skipping the n x n product.

    The user embedding personalizes the last item's outgoing-transition
    embedding (elementwise product), and the result is matched against every
    item's incoming-transition embedding.
    """
    return _transition_factor(u, i, cache, factors) @ cache.target_emb.T


def multi_hop_scores(u: int, i: int, hops: int, cache, factors: str = "ab") -> np.ndarray:
    """Generalize the two-hop score to ``hops`` >= 2 by re-projecting through
    the incoming-transition embedding table between hops."""
    if hops < 2:
        raise ValueError("hops must be >= 2")
    v = _transition_factor(u, i, cache, factors)
    scores = v @ cache.target_emb.T
    for _ in range(hops - 2):
        v = scores @ cache.target_emb
        scores = v @ cache.target_emb.T
    return scores


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Map a vector onto [0, 1]; constant vectors map to all zeros."""
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def component_weights(cfg: InferenceConfig) -> dict[str, float]:
    """Per-component weights with disabled components dropped and the rest
    renormalized to sum to one."""
    raw = {
        "collab": cfg.lambda1,
        "one_hop": cfg.lambda2,
        "two_hop": 1.0 - cfg.lambda1 - cfg.lambda2,
    }
    enabled = {name: raw[name] for name in COMPONENTS if name in cfg.components}
    total = sum(enabled.values())
    if total <= 0:
        raise ValueError(
            f"enabled components {sorted(enabled)} have zero total weight "
            f"(lambda1={cfg.lambda1}, lambda2={cfg.lambda2})"
        )
    return {name: w / total for name, w in enabled.items()}


def combine(
    p_collab: np.ndarray | None,
    p_one_hop: np.ndarray | None,
    p_two_hop: np.ndarray | None,
    cfg: InferenceConfig,
) -> np.ndarray:
    """Weighted sum of the enabled components, each optionally min-max
    normalized over its n entries first."""
    vectors = {"collab": p_collab, "one_hop": p_one_hop, "two_hop": p_two_hop}
    weights = component_weights(cfg)
    out: np.ndarray | None = None
    for name, weight in weights.items():
        v = vectors[name]
        if v is None:
            raise ValueError(f"component {name!r} is enabled but no scores were given")
        if cfg.normalization == "minmax":
            v = minmax_normalize(v)
        out = weight * v if out is None else out + weight * v
    assert out is not None
    return out


def rank_of(p: np.ndarray, target: int) -> int:
    """1-based rank of ``target`` under descending score, ties broken by
    ascending item index."""
    if not (0 <= target < len(p)):
        raise IndexError(f"target {target} outside [0, {len(p)})")
    score = p[target]
    higher = int(np.count_nonzero(p > score))
    tied_before = int(np.count_nonzero(p[:target] == score))
    return 1 + higher + tied_before


def top_k(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores, descending, ties toward smaller index."""
    if not (1 <= k <= len(p)):
        raise ValueError(f"k={k} outside [1, {len(p)}]")
    return np.argsort(-p, kind="stable")[:k]
