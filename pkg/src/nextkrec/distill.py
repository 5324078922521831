"""Stage-1 supervised pre-training: teach the decoder to reproduce cached
teacher lists with the language-modelling loss.

The per-list loss is L = -sum_{i=1..K} log pi(g_hat_i | g_hat^{(i-1)}, h),
computed in one full-sequence forward (teacher items occupy the generation
slots; causal masking makes each slot condition only on history and earlier
teacher items). Batches average the per-list sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import evalkit, nnet, seqcodec

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 5  # paper scale uses 200
    seed: int = 0


def lm_loss(policy_logits: np.ndarray, teacher_list: list[int], n_max: int) -> float:
    """Sum over list positions of -log pi(teacher item); one sequence."""
    num_items = policy_logits.shape[-1]
    K = len(teacher_list)
    targets = np.asarray(teacher_list)
    if targets.min() < 0 or targets.max() >= num_items:
        raise ValueError("teacher item outside the catalog")
    slots = seqcodec.decision_slots(n_max, K)
    ls = policy_logits[slots, :]
    m = ls.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(ls - m).sum(axis=-1)) + m[:, 0]
    return float((logz - ls[np.arange(K), targets]).sum())


def pretrain_student(
    init_params: nnet.ModelParams,
    cfg: nnet.ModelConfig,
    teacher_lists: dict[str, list[int]],
    split,
    train_cfg: DistillConfig,
    log_path: str | None = None,
) -> tuple[nnet.ModelParams, list[tuple[int, float, float]]]:
    """Minimize the LM loss over teacher lists; keep the checkpoint with the
    best validation Next-K NDCG@10; stop after `patience` epochs without
    improvement. Returns (best params, per-epoch log rows)."""
    users = sorted(u for u, s in split.train_sequences.items() if len(s) >= 1)
    missing = [u for u in users if u not in teacher_lists]
    if missing:
        raise ValueError(f"no teacher list for users {missing[:5]} (+{max(len(missing) - 5, 0)} more)")
    hists = [split.train_sequences[u] for u in users]
    lists = np.array([teacher_lists[u] for u in users])
    if lists.shape[1] != cfg.K:
        raise ValueError(f"teacher lists have K={lists.shape[1]} but model K={cfg.K}")
    if lists.min() < 0 or lists.max() >= cfg.num_items:
        raise ValueError("teacher item outside the catalog")

    val_hists = [split.train_sequences[u] for u in split.validation_user_ids]
    val_targets = np.array(
        [split.validation_holdout[u] for u in split.validation_user_ids]
    )

    params = init_params.copy()
    state = nnet.init_adam(params)
    rng = np.random.default_rng(train_cfg.seed)
    best = params.copy()
    best_ndcg = -1.0
    stale = 0
    rows: list[tuple[int, float, float]] = []
    for epoch in range(train_cfg.max_epochs):
        order = rng.permutation(len(users))
        total = 0.0
        nb = 0
        for lo in range(0, len(users), train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            toks, pos, mask = seqcodec.encode_batch(
                [hists[i] for i in idx], [lists[i].tolist() for i in idx],
                cfg.n_max, cfg.K, cfg.num_items,
            )
            spec = nnet.LMLoss(targets=lists[idx])
            try:
                loss, grads, _ = nnet.backward(params, cfg, toks, pos, mask, spec)
            except FloatingPointError as e:
                raise RuntimeError(f"distillation diverged at epoch {epoch}: {e}") from e
            nnet.optimizer_step(params, grads, state, train_cfg.lr)
            total += loss
            nb += 1
        val_ndcg = 0.0
        if len(val_hists):
            scorer = evalkit.ModelScorer(params, cfg)
            gen = evalkit.recommend_nextk(scorer, val_hists, min(10, cfg.K))
            val_ndcg = float(evalkit.ndcg_per_user(gen, val_targets).mean())
        rows.append((epoch, total / nb, val_ndcg))
        log.info("distill epoch %d loss %.4f val_ndcg10 %.4f", epoch, total / nb, val_ndcg)
        if val_ndcg > best_ndcg:
            best_ndcg = val_ndcg
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    if log_path:
        write_training_log(rows, log_path)
    return best, rows


def write_training_log(rows: list[tuple[int, float, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_ndcg10\n")
        for epoch, loss, ndcg in rows:
            fh.write(f"{epoch},{loss:.6f},{ndcg:.6f}\n")
