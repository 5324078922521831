"""Generative Next-K sequential recommender toolkit.

Two-stage training: a decoder is first distilled from a teacher's top-K
lists (language-modelling loss over generation slots), then aligned with
PPO against a composable reward (NDCG, NDCG + diversity, NDCG - popularity).
Evaluation compares Top-K and Next-K inference and greedy re-ranking
baselines (MMR, popularity penalty) on accuracy / diversity / popularity
tradeoffs.

Module map:
    data      loaders, leave-one-out split, catalog, synthetic generator
    seqcodec  token / position / attention-mask encoding of sequences
    kernels   numba-jitted hot loops with numpy fallbacks (NEXTKREC_NUMBA)
    nnet      the decoder, losses, backward pass, Adam
    teacher   Markov-chain and shifting-trained teachers, list caching
    distill   stage 1: supervised pre-training on teacher lists
    reward    per-step decomposed list rewards (Table-style objectives)
    ppo       stage 2: trajectory sampling, GAE, clipped-surrogate update
    pipeline  async generator / optimizer / validator orchestration
    evalkit   metrics, inference strategies, re-rankers, sweep experiments
    cli       command-line entry point (python -m nextkrec)
"""

from . import (
    checkpoint,
    cli,
    data,
    distill,
    evalkit,
    kernels,
    nnet,
    pipeline,
    ppo,
    reward,
    seqcodec,
    teacher,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    Catalog,
    SplitDataset,
    SyntheticConfig,
    generate_synthetic,
    holdout_pairs,
    leave_one_out_split,
    load_dataset_dir,
)
from .distill import DistillConfig, pretrain_student
from .evalkit import (
    MetricReport,
    ModelScorer,
    cutoff_sweep,
    metrics,
    mmr_rerank,
    popularity_penalty_rerank,
    recommend_nextk,
    recommend_topk,
)
from .nnet import ModelConfig, ModelParams, init_params, init_value_from_policy
from .pipeline import CheckpointStore, RecommendationCache, RunConfig, run_finetune
from .ppo import PPOConfig, compute_gae, ppo_update, sample_trajectories
from .reward import RewardSpec, episode_rewards, episode_rewards_batch
from .teacher import (
    MarkovTeacher,
    fit_markov_teacher,
    fit_shifting_teacher,
    generate_teacher_lists,
)

__version__ = "0.1.0"

__all__ = [
    "Catalog",
    "CheckpointError",
    "CheckpointStore",
    "DistillConfig",
    "MarkovTeacher",
    "MetricReport",
    "ModelConfig",
    "ModelParams",
    "ModelScorer",
    "PPOConfig",
    "RecommendationCache",
    "RewardSpec",
    "RunConfig",
    "SplitDataset",
    "SyntheticConfig",
    "checkpoint",
    "cli",
    "compute_gae",
    "cutoff_sweep",
    "data",
    "distill",
    "episode_rewards",
    "episode_rewards_batch",
    "evalkit",
    "fit_markov_teacher",
    "fit_shifting_teacher",
    "generate_synthetic",
    "generate_teacher_lists",
    "holdout_pairs",
    "init_params",
    "init_value_from_policy",
    "kernels",
    "leave_one_out_split",
    "load_checkpoint",
    "load_dataset_dir",
    "metrics",
    "mmr_rerank",
    "nnet",
    "pipeline",
    "popularity_penalty_rerank",
    "ppo",
    "ppo_update",
    "pretrain_student",
    "recommend_nextk",
    "recommend_topk",
    "reward",
    "run_finetune",
    "sample_trajectories",
    "save_checkpoint",
    "seqcodec",
    "teacher",
]
