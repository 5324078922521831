"""Stage-2 alignment: trajectory sampling, GAE, the clipped surrogate and
value losses, and the PPO update.

Episodes are K-step recommendation lists. At step i the policy distribution
is masked to exclude items generated earlier in the episode and
renormalized; sampling, stored log-probabilities, and update-time ratios all
use that masked distribution. The advantage estimator uses TD residuals
delta_i = r_{i+1} + gamma V_{i+1} - V_i with the terminal bootstrap
V_{K+1} = 0, and A_i = sum_l (gamma lam)^l delta_{i+l}. There is no entropy
bonus.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nnet, reward, seqcodec
from .data import Catalog

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    history: list[int]
    g: np.ndarray  # (K,) generated items, all distinct
    old_logprobs: np.ndarray  # (K,) under the masked sampling distribution
    rewards: reward.StepRewards
    values: np.ndarray  # (K,) V(h, g^{(i-1)}) before each action
    policy_version: int = 0


@dataclass
class PPOConfig:
    gamma: float = 1.0
    lam_gae: float = 0.95
    epsilon: float = 0.2
    epochs_per_batch: int = 4
    minibatch_size: int = 16
    lr_policy: float = 1e-4
    lr_value: float = 1e-3
    total_steps: int = 64000

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.lam_gae <= 1:
            raise ValueError("lam_gae must be in [0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


def finetune_pairs(split) -> tuple[list[str], list[list[int]], np.ndarray]:
    """(users, histories, relevance targets) for RL fine-tuning.

    The last item of each training sequence is held out as the episode's
    ground-truth label; the history is everything before it. Mirrors the
    evaluation protocol without touching test or validation holdouts.
    """
    users = sorted(u for u, s in split.train_sequences.items() if len(s) >= 2)
    hists = [split.train_sequences[u][:-1] for u in users]
    targets = np.array([split.train_sequences[u][-1] for u in users])
    return users, hists, targets


def sample_trajectories(
    policy: nnet.ModelParams,
    value: nnet.ModelParams,
    cfg: nnet.ModelConfig,
    spec: reward.RewardSpec,
    histories: list[list[int]],
    held_outs: np.ndarray,
    catalog: Catalog,
    rng: np.random.Generator,
    policy_version: int = 0,
) -> list[Trajectory]:
    """Sample one episode per history, batched over users."""
    U = len(histories)
    K = spec.K
    if K > cfg.num_items:
        raise ValueError(f"K={K} exceeds catalog size {cfg.num_items}")
    g = np.zeros((U, K), dtype=np.int64)
    old_lp = np.zeros((U, K))
    values = np.zeros((U, K))
    generated: list[list[int]] = [[] for _ in range(U)]
    for i in range(K):
        toks, pos, mask = seqcodec.encode_batch(histories, generated, cfg.n_max, cfg.K, cfg.num_items)
        slot = cfg.n_max + i
        logits = nnet.forward_full(policy, cfg, toks, pos, mask).logits[:, slot, :]
        values[:, i] = nnet.forward_full(value, cfg, toks, pos, mask).values[:, slot]
        masked = logits.copy()
        if i:
            masked[np.arange(U)[:, None], g[:, :i]] = -np.inf
        m = masked.max(axis=1, keepdims=True)
        e = np.exp(masked - m)
        probs = e / e.sum(axis=1, keepdims=True)
        # Gumbel-max sampling: exact categorical draw, banned items (-inf
        # log-prob) can never win
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        picks = np.argmax(logp + rng.gumbel(size=logp.shape), axis=1)
        g[:, i] = picks
        old_lp[:, i] = logp[np.arange(U), picks]
        for u in range(U):
            generated[u].append(int(picks[u]))
    rewards = reward.episode_rewards_batch(spec, held_outs, g, catalog)
    return [
        Trajectory(
            history=list(histories[u]),
            g=g[u].copy(),
            old_logprobs=old_lp[u].copy(),
            rewards=reward.StepRewards(r=rewards[u].copy(), total=float(rewards[u].sum())),
            values=values[u].copy(),
            policy_version=policy_version,
        )
        for u in range(U)
    ]


def sample_trajectory(policy, value, cfg, spec, history, held_out, catalog, rng, policy_version=0):
    return sample_trajectories(
        policy, value, cfg, spec, [history], np.array([held_out]), catalog, rng, policy_version
    )[0]


# --- advantage estimation ----------------------------------------------------------


def compute_gae(
    rewards: np.ndarray, values: np.ndarray, gamma: float, lam_gae: float
) -> tuple[np.ndarray, np.ndarray]:
    """(advantages, value targets) for one episode; V_{K+1} = 0."""
    r = np.atleast_2d(rewards)
    v = np.atleast_2d(values)
    K = r.shape[1]
    v_next = np.concatenate([v[:, 1:], np.zeros((v.shape[0], 1))], axis=1)
    delta = r + gamma * v_next - v
    adv = np.zeros_like(delta)
    running = np.zeros(r.shape[0])
    for i in range(K - 1, -1, -1):
        running = delta[:, i] + gamma * lam_gae * running
        adv[:, i] = running
    targets = adv + v
    if np.asarray(rewards).ndim == 1:
        return adv[0], targets[0]
    return adv, targets


def clip_loss(
    new_logprobs: np.ndarray, old_logprobs: np.ndarray, advantages: np.ndarray, epsilon: float
) -> float:
    """Reference scalar form of the clipped surrogate (one episode)."""
    rho = np.exp(np.asarray(new_logprobs) - np.asarray(old_logprobs))
    if not np.isfinite(rho).all():
        raise FloatingPointError("non-finite probability ratio")
    a = np.asarray(advantages)
    return float(-np.minimum(rho * a, np.clip(rho, 1 - epsilon, 1 + epsilon) * a).sum())


def value_mse_loss(predicted: np.ndarray, targets: np.ndarray) -> float:
    p = np.asarray(predicted)
    t = np.asarray(targets)
    return float(((p - t) ** 2).sum())


# --- PPO update ---------------------------------------------------------------------


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    clip_fraction: float
    ratio_mean: float
    mean_total_reward: float
    skipped_minibatches: int = 0
    extras: dict = field(default_factory=dict)


def ppo_update(
    policy: nnet.ModelParams,
    policy_opt: nnet.AdamState,
    value: nnet.ModelParams,
    value_opt: nnet.AdamState,
    cfg: nnet.ModelConfig,
    trajectories: list[Trajectory],
    ppo_cfg: PPOConfig,
    update_seed: int | tuple[int, ...] = 0,
) -> UpdateStats:
    """One PPO optimization round over a trajectory batch.

    Advantages are normalized over the whole batch (mean 0, std 1, floor
    1e-8); value targets A + V are fixed before normalization and reused
    across epochs. New log-probs/values come from a single full-sequence
    forward per trajectory. Non-finite minibatch losses are skipped and
    logged; repeated failures abort.
    """
    U = len(trajectories)
    K = trajectories[0].g.shape[0]
    rewards = np.stack([t.rewards.r for t in trajectories])
    values = np.stack([t.values for t in trajectories])
    adv_raw, v_targets = compute_gae(rewards, values, ppo_cfg.gamma, ppo_cfg.lam_gae)
    adv = (adv_raw - adv_raw.mean()) / max(adv_raw.std(ddof=0), 1e-8)

    actions = np.stack([t.g for t in trajectories])
    old_lp = np.stack([t.old_logprobs for t in trajectories])
    toks, pos, mask = seqcodec.encode_batch(
        [t.history for t in trajectories],
        [t.g.tolist() for t in trajectories],
        cfg.n_max,
        cfg.K,
        cfg.num_items,
    )

    seed_seq = update_seed if isinstance(update_seed, tuple) else (update_seed,)
    rng = np.random.default_rng((*seed_seq, 0xC0FFEE))
    p_losses, v_losses, clip_fracs, ratio_means = [], [], [], []
    skipped = 0
    consecutive = 0
    for _ in range(ppo_cfg.epochs_per_batch):
        order = rng.permutation(U)
        for lo in range(0, U, ppo_cfg.minibatch_size):
            idx = order[lo : lo + ppo_cfg.minibatch_size]
            mb = (toks[idx], pos[idx], mask[idx])
            p_spec = nnet.PPOClipLoss(
                actions=actions[idx],
                old_logprobs=old_lp[idx],
                advantages=adv[idx],
                epsilon=ppo_cfg.epsilon,
            )
            v_spec = nnet.ValueMSELoss(targets=v_targets[idx])
            try:
                p_loss, p_grads, p_stats = nnet.backward(policy, cfg, *mb, p_spec)
                v_loss, v_grads, _ = nnet.backward(value, cfg, *mb, v_spec)
            except FloatingPointError as e:
                skipped += 1
                consecutive += 1
                log.warning("skipping minibatch with non-finite loss: %s", e)
                if consecutive >= 5:
                    raise RuntimeError("repeated non-finite PPO losses") from e
                continue
            consecutive = 0
            nnet.optimizer_step(policy, p_grads, policy_opt, ppo_cfg.lr_policy)
            nnet.optimizer_step(value, v_grads, value_opt, ppo_cfg.lr_value)
            p_losses.append(p_loss)
            v_losses.append(v_loss)
            clip_fracs.append(p_stats["clip_fraction"])
            ratio_means.append(p_stats["ratio_mean"])

    return UpdateStats(
        policy_loss=float(np.mean(p_losses)) if p_losses else float("nan"),
        value_loss=float(np.mean(v_losses)) if v_losses else float("nan"),
        clip_fraction=float(np.mean(clip_fracs)) if clip_fracs else float("nan"),
        ratio_mean=float(np.mean(ratio_means)) if ratio_means else float("nan"),
        mean_total_reward=float(np.mean([t.rewards.total for t in trajectories])),
        skipped_minibatches=skipped,
    )
