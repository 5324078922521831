"""Inference strategies (Top-K, Next-K), evaluation metrics, greedy
re-ranking baselines, and the cutoff/tradeoff sweep experiments.

A scorer is anything with
    candidate_scores(histories) -> (U, num_items)
    step_scores(histories, generated) -> (U, num_items)
where step_scores conditions on the partially generated lists (Next-K).
ModelScorer wraps a trained decoder in either layout; MarkovTeacher
satisfies the protocol natively.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels, nnet, seqcodec
from .data import Catalog

DEFAULT_ILD_GRID = (0.0, 0.2, 1.0, 3.0)
DEFAULT_PCOUNT_GRID = (0.0, 3.0, 6.0)


class ModelScorer:
    """Next-item scores from a trained decoder checkpoint."""

    def __init__(self, params: nnet.ModelParams, cfg: nnet.ModelConfig, batch_size: int = 128):
        self.params = params
        self.cfg = cfg
        self.batch_size = batch_size

    def step_scores(self, histories: list[list[int]], generated: list[list[int]]) -> np.ndarray:
        cfg = self.cfg
        out = np.empty((len(histories), cfg.num_items))
        for lo in range(0, len(histories), self.batch_size):
            hi = lo + self.batch_size
            if cfg.layout == "shifting":
                # the shifting model has no generation slots: feed generated
                # items as if they were history
                merged = [h + list(g) for h, g in zip(histories[lo:hi], generated[lo:hi])]
                toks, pos, mask = seqcodec.encode_history_batch(merged, cfg.n_max, cfg.num_items)
                logits = nnet.forward_full(self.params, cfg, toks, pos, mask).logits
                out[lo:hi] = logits[:, -1, :]
            else:
                toks, pos, mask = seqcodec.encode_batch(
                    histories[lo:hi], generated[lo:hi], cfg.n_max, cfg.K, cfg.num_items
                )
                logits = nnet.forward_full(self.params, cfg, toks, pos, mask).logits
                slots = [cfg.n_max + len(g) for g in generated[lo:hi]]
                out[lo:hi] = logits[np.arange(len(slots)), slots, :]
        return out

    def candidate_scores(self, histories: list[list[int]]) -> np.ndarray:
        return self.step_scores(histories, [[] for _ in histories])


def topk_from_scores(scores: np.ndarray, K: int) -> np.ndarray:
    """Row-wise top-K by descending score, ties by ascending item id."""
    if K > scores.shape[-1]:
        raise ValueError(f"K={K} exceeds catalog size {scores.shape[-1]}")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :K]


def _apply_history_exclusion(scores: np.ndarray, histories) -> np.ndarray:
    scores = scores.copy()
    for u, h in enumerate(histories):
        scores[u, list(set(h))] = -np.inf
    return scores


def recommend_topk(
    scorer, histories: list[list[int]], K: int, exclude_history: bool = False
) -> np.ndarray:
    """Score once, return the K best items per history."""
    scores = scorer.candidate_scores(histories)
    if exclude_history:
        scores = _apply_history_exclusion(scores, histories)
    return topk_from_scores(scores, K)


def recommend_nextk(
    scorer, histories: list[list[int]], K: int, exclude_history: bool = False
) -> np.ndarray:
    """K greedy autoregressive steps, masking already-generated items."""
    U = len(histories)
    lists = np.zeros((U, K), dtype=np.int64)
    generated: list[list[int]] = [[] for _ in range(U)]
    for i in range(K):
        scores = scorer.step_scores(histories, generated)
        if exclude_history:
            scores = _apply_history_exclusion(scores, histories)
        if i:
            scores[np.arange(U)[:, None], lists[:, :i]] = -np.inf
        picks = np.argmax(scores, axis=1)  # first max -> lowest item id on ties
        lists[:, i] = picks
        for u in range(U):
            generated[u].append(int(picks[u]))
    return lists


# --- metrics -------------------------------------------------------------------


@dataclass
class MetricReport:
    K: int
    user_ids: list[str]
    ndcg: np.ndarray
    recall: np.ndarray
    ild: np.ndarray
    pcount: np.ndarray

    def aggregate(self) -> dict:
        out = {"K": self.K, "n_users": len(self.user_ids)}
        n = max(len(self.user_ids), 1)
        for name in ("ndcg", "recall", "ild", "pcount"):
            vals = getattr(self, name)
            out[name] = float(vals.mean())
            out[name + "_se"] = float(vals.std(ddof=0) / np.sqrt(n))
        return out

    def write_csv(self, path: str) -> None:
        k = self.K
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"user_id,ndcg@{k},recall@{k},ild@{k},pcount@{k}\n")
            for i, u in enumerate(self.user_ids):
                fh.write(
                    f"{u},{self.ndcg[i]:.10f},{self.recall[i]:.0f},"
                    f"{self.ild[i]:.10f},{self.pcount[i]:.10f}\n"
                )

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.aggregate(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def ndcg_per_user(lists: np.ndarray, holdouts: np.ndarray, K: int | None = None) -> np.ndarray:
    """Leave-one-out NDCG: 1/log2(rank+1) when the holdout appears, else 0."""
    if K is not None:
        lists = lists[:, :K]
    hits = lists == np.asarray(holdouts)[:, None]
    ranks = hits.argmax(axis=1) + 1
    return np.where(hits.any(axis=1), 1.0 / np.log2(ranks + 1), 0.0)


def metrics(
    lists: np.ndarray,
    holdouts: np.ndarray,
    catalog: Catalog,
    K: int,
    user_ids: list[str] | None = None,
) -> MetricReport:
    lists = np.asarray(lists)[:, :K]
    holdouts = np.asarray(holdouts)
    ndcg = ndcg_per_user(lists, holdouts)
    recall = (lists == holdouts[:, None]).any(axis=1).astype(np.float64)
    if K >= 2:
        sums = kernels.pairdist_sums(lists, catalog.unit_genres, catalog.zero_genre_rows)
        ild = sums * (2.0 / (K * (K - 1)))
    else:
        ild = np.zeros(len(lists))
    pcount = catalog.freq[lists].mean(axis=1)
    if user_ids is None:
        user_ids = [str(i) for i in range(len(lists))]
    return MetricReport(K, list(user_ids), ndcg, recall, ild, pcount)


def npcount(report: MetricReport, popularity_report: MetricReport) -> float:
    """PCOUNT ratio against the popularity baseline; lower = less biased."""
    if report.K != popularity_report.K:
        raise ValueError(f"cutoff mismatch: {report.K} vs {popularity_report.K}")
    base = popularity_report.pcount.mean()
    if base == 0.0:
        raise ValueError("baseline PCOUNT is zero")
    return float(report.pcount.mean() / base)


def popularity_baseline(catalog: Catalog, K: int) -> np.ndarray:
    """The K most frequent training items (one list for every user)."""
    return topk_from_scores(catalog.freq, K)


# --- greedy re-ranking baselines ---------------------------------------------------


def mmr_rerank(base_scores: np.ndarray, catalog: Catalog, K: int, lam_mmr: float) -> np.ndarray:
    """Greedy MMR: first pick the top score, then repeatedly the item with
    the best score + lam * (min genre distance to the already-selected)."""
    if lam_mmr < 0:
        raise ValueError("lam_mmr must be >= 0")
    scores = np.atleast_2d(np.asarray(base_scores, dtype=np.float64))
    out = kernels.mmr_select(scores, catalog.unit_genres, catalog.zero_genre_rows, lam_mmr, K)
    return out[0] if np.asarray(base_scores).ndim == 1 else out


def popularity_penalty_rerank(
    base_scores: np.ndarray, catalog: Catalog, K: int, lam_pop: float
) -> np.ndarray:
    """Rank by score(x) - lam * freq(x)."""
    return topk_from_scores(np.asarray(base_scores) - lam_pop * catalog.freq, K)


# --- sweeps ----------------------------------------------------------------------


def cutoff_sweep(
    scorer, histories: list[list[int]], holdouts: np.ndarray, k_max: int
) -> list[dict]:
    """NDCG@K for K = 1..k_max under both strategies.

    Both strategies are prefix-consistent in K (greedy picks never look at
    later slots), so each is generated once at k_max and truncated.
    """
    rows = []
    lists = {
        "topk": recommend_topk(scorer, histories, k_max),
        "nextk": recommend_nextk(scorer, histories, k_max),
    }
    for k in range(1, k_max + 1):
        for strategy in ("topk", "nextk"):
            nd = ndcg_per_user(lists[strategy], holdouts, K=k)
            rows.append(
                {
                    "K": k,
                    "strategy": strategy,
                    "ndcg": float(nd.mean()),
                    "ndcg_se": float(nd.std(ddof=0) / np.sqrt(max(len(nd), 1))),
                }
            )
    return rows


def tradeoff_rows(
    lists_by_lambda: dict[float, np.ndarray],
    holdouts: np.ndarray,
    catalog: Catalog,
    K: int,
) -> list[dict]:
    """Per-lambda accuracy and beyond-accuracy aggregates with standard errors."""
    pop_report = metrics(
        np.repeat(popularity_baseline(catalog, K)[None, :], len(holdouts), axis=0),
        holdouts,
        catalog,
        K,
    )
    rows = []
    for lam in sorted(lists_by_lambda):
        rep = metrics(lists_by_lambda[lam], holdouts, catalog, K)
        agg = rep.aggregate()
        rows.append(
            {
                "lambda": lam,
                "ndcg": agg["ndcg"],
                "ndcg_se": agg["ndcg_se"],
                "ild": agg["ild"],
                "ild_se": agg["ild_se"],
                "pcount": agg["pcount"],
                "pcount_se": agg["pcount_se"],
                "npcount": npcount(rep, pop_report),
            }
        )
    return rows


def rerank_tradeoff_sweep(
    base_scores: np.ndarray,
    catalog: Catalog,
    holdouts: np.ndarray,
    K: int,
    lambdas,
    mode: str,
) -> list[dict]:
    if mode not in ("mmr", "pop-rerank"):
        raise ValueError(f"unknown rerank mode {mode!r}")
    lists_by_lambda = {}
    for lam in lambdas:
        if mode == "mmr":
            lists_by_lambda[float(lam)] = mmr_rerank(base_scores, catalog, K, float(lam))
        else:
            lists_by_lambda[float(lam)] = popularity_penalty_rerank(
                base_scores, catalog, K, float(lam)
            )
    return tradeoff_rows(lists_by_lambda, holdouts, catalog, K)


def write_rows_csv(rows: list[dict], path: str) -> None:
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)
