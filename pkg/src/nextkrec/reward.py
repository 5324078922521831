"""List-effectiveness rewards and their per-position decompositions.

Every objective decomposes the list metric R(h, g) into immediate rewards
r_1..r_K with sum(r) == R exactly, so the RL stage can hand out credit per
position. The three objectives:

    ndcg:                r_i = y_i / log2(i+1)
    ndcg_plus_diversity: r_i = ndcg_i + lam * (1/(K(K-1))) * sum_{j<i} CosDist(g_i, g_j)
    ndcg_minus_pcount:   r_i = ndcg_i - lam * freq(g_i)

Under leave-one-out a list has at most one relevant item and IDCG = 1, so
the ndcg totals are NDCG@K directly. CosDist of an all-zero genre vector
against anything is defined as 1. The delayed mode moves the whole reward
to the last position (same total).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Catalog

KINDS = ("ndcg", "ndcg_plus_diversity", "ndcg_minus_pcount")


@dataclass
class RewardSpec:
    kind: str = "ndcg"
    lam: float = 0.0
    K: int = 10
    delayed: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")


@dataclass
class StepRewards:
    r: np.ndarray  # (K,)
    total: float


def validate_spec(spec: RewardSpec, catalog: Catalog) -> None:
    if spec.kind == "ndcg_plus_diversity" and not catalog.has_genres:
        raise ValueError("diversity objective requires genre vectors in the catalog")


def relevance_labels(held_out: int, g: list[int] | np.ndarray) -> np.ndarray:
    g = np.asarray(g)
    return (g == held_out).astype(np.float64)


def ndcg_immediate(y: np.ndarray, i: int) -> float:
    """Position i is 1-based; discount log2(i+1) makes IDCG 1 at rank 1."""
    return float(y[i - 1] / np.log2(i + 1))


def cos_dist(catalog: Catalog, a: int, b: int) -> float:
    if catalog.zero_genre_rows[a] or catalog.zero_genre_rows[b]:
        return 1.0
    return float(1.0 - catalog.unit_genres[a] @ catalog.unit_genres[b])


def diversity_immediate(
    y: np.ndarray, g, i: int, catalog: Catalog, K: int, lam: float
) -> float:
    pair_sum = sum(cos_dist(catalog, g[i - 1], g[j]) for j in range(i - 1))
    return ndcg_immediate(y, i) + lam * pair_sum / (K * (K - 1))


def pcount_immediate(y: np.ndarray, g, i: int, catalog: Catalog, lam: float) -> float:
    return ndcg_immediate(y, i) - lam * float(catalog.freq[g[i - 1]])


def episode_rewards(
    spec: RewardSpec, held_out: int, g: list[int] | np.ndarray, catalog: Catalog
) -> StepRewards:
    g = list(g)
    if len(g) != spec.K:
        raise ValueError(f"list length {len(g)} != K={spec.K}")
    y = relevance_labels(held_out, g)
    r = np.empty(spec.K)
    for i in range(1, spec.K + 1):
        if spec.kind == "ndcg":
            r[i - 1] = ndcg_immediate(y, i)
        elif spec.kind == "ndcg_plus_diversity":
            r[i - 1] = diversity_immediate(y, g, i, catalog, spec.K, spec.lam)
        else:
            r[i - 1] = pcount_immediate(y, g, i, catalog, spec.lam)
    total = float(r.sum())
    if spec.delayed:
        r = np.zeros(spec.K)
        r[-1] = total
    return StepRewards(r=r, total=total)


def episode_rewards_batch(
    spec: RewardSpec, held_outs: np.ndarray, lists: np.ndarray, catalog: Catalog
) -> np.ndarray:
    """(U, K) immediate-reward matrix, vectorized over users."""
    U, K = lists.shape
    if K != spec.K:
        raise ValueError(f"list length {K} != K={spec.K}")
    y = lists == np.asarray(held_outs)[:, None]
    r = y / np.log2(np.arange(2, K + 2))[None, :]
    if spec.kind == "ndcg_plus_diversity":
        unit = catalog.unit_genres
        zero = catalog.zero_genre_rows
        for i in range(1, K):
            gi = lists[:, i]
            dots = np.einsum("uf,ujf->uj", unit[gi], unit[lists[:, :i]])
            d = np.where(zero[gi][:, None] | zero[lists[:, :i]], 1.0, 1.0 - dots)
            r[:, i] += spec.lam * d.sum(axis=1) / (K * (K - 1))
    elif spec.kind == "ndcg_minus_pcount":
        r -= spec.lam * catalog.freq[lists]
    if spec.delayed:
        totals = r.sum(axis=1)
        r = np.zeros_like(r)
        r[:, -1] = totals
    return r
