"""Teachers for Stage-1 distillation: the decayed Markov-chain scorer and a
shifting-trained decoder, plus Top-K teacher list generation and caching.

Markov scoring: s(g) = sum_{j=1..n} beta^j * ln p(g | h_{n-j+1}) where
p(b|a) is the empirical probability of b appearing anywhere after a within a
training sequence. Terms with p = 0 contribute -inf; candidates whose score
is -inf rank below every finite-scored candidate, ordered among themselves
by descending training frequency.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import checkpoint, kernels, nnet, seqcodec

log = logging.getLogger(__name__)

# composite-score floor for -inf candidates: finite scores are bounded well
# above this (ln p >= -ln(total pairs) per term, geometric beta weighting),
# and adding freq in [0, 1] orders the fallback bucket by popularity
FALLBACK_FLOOR = -1e12


@dataclass
class MarkovTeacher:
    logp: np.ndarray  # (I, I); ln p(col | row), -inf where unseen
    freq: np.ndarray  # (I,) training frequency for the fallback ordering
    beta: float

    @property
    def num_items(self) -> int:
        return self.logp.shape[0]

    def raw_scores(self, histories: list[list[int]]) -> np.ndarray:
        """(U, I) decayed log-probability sums; -inf where any term is -inf."""
        flat, offsets = kernels.flatten_sequences(histories)
        return kernels.markov_scores(flat, offsets, self.logp, self.beta)

    def candidate_scores(self, histories: list[list[int]]) -> np.ndarray:
        """Rankable (U, I) scores with the frequency fallback applied."""
        raw = self.raw_scores(histories)
        return np.where(np.isfinite(raw), raw, FALLBACK_FLOOR + self.freq[None, :])

    def step_scores(self, histories: list[list[int]], generated: list[list[int]]) -> np.ndarray:
        # context-independent: the Markov score never conditions on the
        # partially generated list, so Next-K coincides with Top-K
        return self.candidate_scores(histories)


def fit_markov_teacher(
    train_sequences: dict[str, list[int]] | list[list[int]],
    num_items: int,
    beta: float = 0.6,
) -> MarkovTeacher:
    if not 0 < beta < 1:
        raise ValueError("beta must be in (0, 1)")
    seqs = list(train_sequences.values()) if isinstance(train_sequences, dict) else list(train_sequences)
    seqs = [s for s in seqs if len(s) > 0]
    if not seqs:
        raise ValueError("empty training set")
    flat, offsets = kernels.flatten_sequences(seqs)
    counts = kernels.cooccur_counts(flat, offsets, num_items)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(totals > 0, counts / np.maximum(totals, 1.0), 0.0)
        logp = np.log(p)
    item_counts = np.bincount(flat, minlength=num_items).astype(np.float64)
    freq = item_counts / item_counts.sum()
    return MarkovTeacher(logp=logp, freq=freq, beta=beta)


def markov_score(teacher: MarkovTeacher, history: list[int], candidate: int) -> float:
    """Single-candidate score, the formula evaluated directly."""
    if len(history) == 0:
        raise ValueError("empty history")
    return float(teacher.raw_scores([history])[0, candidate])


def save_markov_teacher(teacher: MarkovTeacher, path: str) -> None:
    """npz archive; the -inf entries in logp survive the round trip."""
    with open(path, "wb") as fh:  # np.savez would append .npz to a bare path
        np.savez(fh, logp=teacher.logp, freq=teacher.freq, beta=np.float64(teacher.beta))


def load_markov_teacher(path: str) -> MarkovTeacher:
    with np.load(path) as z:
        return MarkovTeacher(logp=z["logp"], freq=z["freq"], beta=float(z["beta"]))


def load_teacher(path: str):
    """Load either teacher kind from disk, sniffing the file format.

    Markov teachers are npz archives; shifting teachers are model
    checkpoints (returned as the (params, cfg) pair teacher_topk accepts).
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(checkpoint.MAGIC))
    if magic == checkpoint.MAGIC:
        return checkpoint.load_checkpoint(path)
    return load_markov_teacher(path)


# --- top-k list generation ----------------------------------------------------


def topk_from_scores(scores: np.ndarray, K: int) -> np.ndarray:
    """Row-wise top-K by descending score, ties by ascending item id."""
    if K > scores.shape[-1]:
        raise ValueError(f"K={K} exceeds catalog size {scores.shape[-1]}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :K]


def teacher_topk(teacher, histories: list[list[int]], K: int) -> np.ndarray:
    """(U, K) ranked lists from either teacher kind.

    `teacher` is a MarkovTeacher or a (ModelParams, ModelConfig) pair for the
    shifting-trained decoder. History items are not excluded (raw
    score-and-rank); exclusion, when wanted, is an evaluation-side flag.
    """
    if isinstance(teacher, MarkovTeacher):
        return topk_from_scores(teacher.candidate_scores(histories), K)
    params, cfg = teacher
    return topk_from_scores(shifting_next_scores(params, cfg, histories), K)


def shifting_next_scores(
    params: nnet.ModelParams, cfg: nnet.ModelConfig, histories: list[list[int]]
) -> np.ndarray:
    """(U, I) next-item logits of the shifting model at the last history slot."""
    scores = np.empty((len(histories), cfg.num_items))
    bs = 128
    for lo in range(0, len(histories), bs):
        toks, pos, mask = seqcodec.encode_history_batch(
            histories[lo : lo + bs], cfg.n_max, cfg.num_items
        )
        logits = nnet.forward_full(params, cfg, toks, pos, mask).logits
        scores[lo : lo + bs] = logits[:, -1, :]  # layout right-aligns history
    return scores


# --- shifting-trained decoder ----------------------------------------------------


@dataclass
class ShiftingTrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0


def _shift_targets(toks: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Slot j predicts slot j+1's item when both are real; -1 elsewhere."""
    targets = np.full_like(toks, -1)
    targets[:, :-1] = np.where((mask[:, :-1] == 1) & (mask[:, 1:] == 1), toks[:, 1:], -1)
    return targets


def _ndcg_at_k(lists: np.ndarray, holdouts: np.ndarray) -> float:
    hits = lists == holdouts[:, None]
    ranks = hits.argmax(axis=1) + 1
    return float(np.where(hits.any(axis=1), 1.0 / np.log2(ranks + 1), 0.0).mean())


def fit_shifting_teacher(
    split,
    cfg: nnet.ModelConfig,
    train_cfg: ShiftingTrainConfig,
    log_path: str | None = None,
) -> nnet.ModelParams:
    """Train the decoder so every history position predicts its successor.

    Early-stops on validation NDCG@10 (Top-K over the validation holdout)
    with the configured patience; returns the best-validation parameters.
    """
    assert cfg.layout == "shifting"
    seqs = [s for s in split.train_sequences.values() if len(s) >= 2]
    if not seqs:
        raise ValueError("no training sequences of length >= 2")
    val_hists = [split.train_sequences[u] for u in split.validation_user_ids]
    val_targets = np.array([split.validation_holdout[u] for u in split.validation_user_ids])

    params = nnet.init_params(cfg, train_cfg.seed)
    state = nnet.init_adam(params)
    rng = np.random.default_rng(train_cfg.seed)
    best_ndcg = -1.0
    best = params.copy()
    stale = 0
    rows = []
    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(len(seqs))
        total = 0.0
        nb = 0
        for lo in range(0, len(seqs), train_cfg.batch_size):
            batch = [seqs[i] for i in order[lo : lo + train_cfg.batch_size]]
            toks, pos, mask = seqcodec.encode_history_batch(batch, cfg.n_max, cfg.num_items)
            spec = nnet.ShiftingCELoss(targets=_shift_targets(toks, mask))
            try:
                loss, grads, _ = nnet.backward(params, cfg, toks, pos, mask, spec)
            except FloatingPointError as e:
                raise RuntimeError(f"shifting training diverged at epoch {epoch}: {e}") from e
            nnet.optimizer_step(params, grads, state, train_cfg.lr)
            total += loss
            nb += 1
        val_ndcg = 0.0
        if len(val_hists):
            lists = teacher_topk((params, cfg), val_hists, 10)
            val_ndcg = _ndcg_at_k(lists, val_targets)
        rows.append((epoch, total / nb, val_ndcg))
        log.info("shifting epoch %d loss %.4f val_ndcg10 %.4f", epoch, total / nb, val_ndcg)
        if val_ndcg > best_ndcg:
            best_ndcg = val_ndcg
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    if log_path:
        with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,train_loss,val_ndcg10\n")
            for r in rows:
                fh.write(f"{r[0]},{r[1]:.6f},{r[2]:.6f}\n")
    return best


# --- teacher list cache ---------------------------------------------------------


def generate_teacher_lists(
    teacher, train_sequences: dict[str, list[int]], K: int
) -> dict[str, list[int]]:
    users = [u for u, s in train_sequences.items() if len(s) >= 1]
    lists = teacher_topk(teacher, [train_sequences[u] for u in users], K)
    return {u: lists[i].tolist() for i, u in enumerate(users)}


def save_teacher_lists(lists: dict[str, list[int]], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id,rank,item_id\n")
        for u in sorted(lists):
            for rank, item in enumerate(lists[u], start=1):
                fh.write(f"{u},{rank},{item}\n")


def load_teacher_lists(path: str) -> dict[str, list[int]]:
    out: dict[str, list[tuple[int, int]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["user_id", "rank", "item_id"]:
            raise ValueError(f"{path}: not a teacher-list file")
        for row in reader:
            if not row:
                continue
            out.setdefault(row[0], []).append((int(row[1]), int(row[2])))
    return {u: [item for _, item in sorted(pairs)] for u, pairs in out.items()}
