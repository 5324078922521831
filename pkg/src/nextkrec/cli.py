"""Command-line entry point wiring the stages into reproducible experiments.

Every command takes --seed, is deterministic given its flags (finetune in
--sync mode), and writes a run.json provenance record next to its outputs:
the resolved configuration, a sha256 of it, the seed, and any checkpoint
versions produced or consumed. Model and training hyperparameters can come
from a JSON config file (--config); explicit flags win over file values.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint, data, distill, evalkit, nnet, pipeline, ppo, reward, teacher

log = logging.getLogger(__name__)

OBJECTIVE_KINDS = {
    "ndcg": "ndcg",
    "diversity": "ndcg_plus_diversity",
    "pcount": "ndcg_minus_pcount",
}


class UsageError(Exception):
    """Bad flag combination or config file; exits 2 with usage text."""


# --- provenance ---------------------------------------------------------------------


def _resolved_config(args: argparse.Namespace) -> dict:
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in ("func", "command", "verbose") or callable(v):
            continue
        cfg[k] = v
    return cfg


def write_run_json(path: str, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    config = _resolved_config(args)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    record = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": config.get("seed"),
    }
    if extra:
        record.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- shared plumbing ---------------------------------------------------------------


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return cfg


def _merged_section(file_cfg: dict, section: str, overrides: dict) -> dict:
    merged = dict(file_cfg.get(section, {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _model_config(num_items: int, file_cfg: dict, args: argparse.Namespace, layout: str) -> nnet.ModelConfig:
    overrides = {
        "embed_dim": args.embed_dim,
        "num_blocks": args.blocks,
        "num_heads": args.heads,
        "n_max": args.n_max,
        "K": args.k,
    }
    merged = _merged_section(file_cfg, "model", overrides)
    merged["num_items"] = num_items
    merged["layout"] = layout
    try:
        return nnet.ModelConfig(**merged)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad model config: {e}") from e


def _train_section(file_cfg: dict, args: argparse.Namespace) -> dict:
    overrides = {
        "batch_size": args.batch_size,
        "lr": args.lr,
        "max_epochs": args.epochs,
        "patience": args.patience,
    }
    return _merged_section(file_cfg, "train", overrides)


def _load_split(args: argparse.Namespace):
    return data.load_dataset_dir(args.data, args.val_users, args.seed)


def _checkpoint_path(path: str) -> str:
    return os.path.join(path, "checkpoint.ckpt") if os.path.isdir(path) else path


def _load_model(path: str) -> tuple[nnet.ModelParams, nnet.ModelConfig]:
    return checkpoint.load_checkpoint(_checkpoint_path(path))


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as e:
        raise UsageError(f"bad float list {text!r}: {e}") from e


def _check_nextk_cutoff(k: int, cfg: nnet.ModelConfig) -> None:
    if cfg.layout == "gptrec" and k > cfg.K:
        raise UsageError(f"cutoff {k} exceeds the checkpoint's K={cfg.K} generation slots")


# --- commands -----------------------------------------------------------------------


def cmd_synth_data(args: argparse.Namespace) -> None:
    cfg = data.SyntheticConfig(
        num_users=args.users,
        num_items=args.items,
        num_genres=args.genres,
        seed=args.seed,
        min_len=args.min_len,
        max_len=args.max_len,
    )
    data.generate_synthetic(cfg, args.out)
    write_run_json(os.path.join(args.out, "run.json"), "synth-data", args)
    print(f"wrote synthetic dataset ({args.users} users, {args.items} items) to {args.out}")


def cmd_fit_teacher(args: argparse.Namespace) -> None:
    split, catalog = _load_split(args)
    if args.kind == "markov":
        t = teacher.fit_markov_teacher(split.train_sequences, split.num_items, beta=args.beta)
        teacher.save_markov_teacher(t, args.out)
    else:
        file_cfg = _load_config_file(args.config)
        cfg = _model_config(split.num_items, file_cfg, args, layout="shifting")
        train = _train_section(file_cfg, args)
        train.setdefault("seed", args.seed)
        try:
            train_cfg = teacher.ShiftingTrainConfig(**train)
        except TypeError as e:
            raise UsageError(f"bad train config: {e}") from e
        params = teacher.fit_shifting_teacher(split, cfg, train_cfg, log_path=args.log)
        checkpoint.save_checkpoint(params, cfg, args.out)
    write_run_json(args.out + ".run.json", "fit-teacher", args)
    print(f"wrote {args.kind} teacher to {args.out}")


def cmd_gen_teacher_lists(args: argparse.Namespace) -> None:
    split, _ = _load_split(args)
    t = teacher.load_teacher(args.teacher)
    lists = teacher.generate_teacher_lists(t, split.train_sequences, args.k)
    teacher.save_teacher_lists(lists, args.out)
    write_run_json(args.out + ".run.json", "gen-teacher-lists", args)
    print(f"wrote {len(lists)} teacher lists (K={args.k}) to {args.out}")


def cmd_distill(args: argparse.Namespace) -> None:
    split, catalog = _load_split(args)
    lists = teacher.load_teacher_lists(args.teacher_lists)
    file_cfg = _load_config_file(args.config)
    cfg = _model_config(split.num_items, file_cfg, args, layout="gptrec")
    train = _train_section(file_cfg, args)
    train.setdefault("seed", args.seed)
    try:
        train_cfg = distill.DistillConfig(**train)
    except TypeError as e:
        raise UsageError(f"bad train config: {e}") from e

    os.makedirs(args.out, exist_ok=True)
    init = nnet.init_params(cfg, args.seed)
    best, rows = distill.pretrain_student(
        init, cfg, lists, split, train_cfg,
        log_path=os.path.join(args.out, "training_log.csv"),
    )
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    checkpoint.save_checkpoint(best, cfg, ckpt)
    write_run_json(os.path.join(args.out, "run.json"), "distill", args)
    best_val = max(r[2] for r in rows)
    print(f"distilled student for {len(rows)} epochs (best val ndcg@10 {best_val:.4f}); wrote {ckpt}")


def cmd_finetune(args: argparse.Namespace) -> None:
    split, catalog = _load_split(args)
    policy, cfg = _load_model(args.init)
    if cfg.layout != "gptrec":
        raise UsageError("--init must point at a distilled (generation-slot) checkpoint")
    if args.objective == "diversity" and not catalog.has_genres:
        raise UsageError("the diversity objective needs a genre file in the data directory")
    value = nnet.init_value_from_policy(policy, args.seed + 1)
    spec = reward.RewardSpec(kind=OBJECTIVE_KINDS[args.objective], lam=args.lam, K=cfg.K)
    ppo_cfg = ppo.PPOConfig(
        gamma=args.gamma,
        lam_gae=args.lam_gae,
        epsilon=args.clip_eps,
        epochs_per_batch=args.epochs_per_batch,
        minibatch_size=args.minibatch,
        lr_policy=args.lr_policy,
        lr_value=args.lr_value,
        total_steps=args.steps,
    )
    run_cfg = pipeline.RunConfig(
        run_seed=args.seed,
        num_generators=args.generators,
        cache_capacity=args.cache_m,
        publish_every=args.publish_every,
        batch_size=args.batch_size,
        threaded=not args.sync,
    )
    os.makedirs(args.out, exist_ok=True)
    store_dir = os.path.join(args.out, "store")
    result = pipeline.run_finetune(
        policy, value, cfg, split, catalog, spec, ppo_cfg, run_cfg, store_dir
    )
    pipeline.write_finetune_log(result.optimizer_log, os.path.join(args.out, "finetune_log.csv"))
    pipeline.write_validator_log(result.validation, os.path.join(args.out, "validation_log.csv"))
    store = pipeline.CheckpointStore(store_dir)
    best_policy, _, best_cfg = store.load(result.best_version)
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    checkpoint.save_checkpoint(best_policy, best_cfg, ckpt)
    write_run_json(
        os.path.join(args.out, "run.json"), "finetune", args,
        extra={
            "checkpoint_versions": {
                "final": result.final_version,
                "best": result.best_version,
            }
        },
    )
    print(
        f"fine-tuned for {args.steps} updates ({result.final_version} versions, "
        f"best v{result.best_version:04d}); wrote {ckpt}"
    )


def _holdout(split, which="test"):
    return data.holdout_pairs(split, which)


def cmd_evaluate(args: argparse.Namespace) -> None:
    split, catalog = _load_split(args)
    params, cfg = _load_model(args.checkpoint)
    users, hists, targets = _holdout(split)
    scorer = evalkit.ModelScorer(params, cfg)
    if args.strategy == "nextk":
        _check_nextk_cutoff(args.k, cfg)
        lists = evalkit.recommend_nextk(scorer, hists, args.k, exclude_history=args.exclude_history)
    else:
        lists = evalkit.recommend_topk(scorer, hists, args.k, exclude_history=args.exclude_history)
    rep = evalkit.metrics(lists, targets, catalog, args.k, user_ids=users)
    os.makedirs(args.out, exist_ok=True)
    rep.write_csv(os.path.join(args.out, "metrics.csv"))
    pop_rep = evalkit.metrics(
        np.repeat(evalkit.popularity_baseline(catalog, args.k)[None, :], len(targets), axis=0),
        targets, catalog, args.k,
    )
    summary = rep.aggregate()
    summary["npcount"] = evalkit.npcount(rep, pop_rep)
    summary["strategy"] = args.strategy
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_json(
        os.path.join(args.out, "run.json"), "evaluate", args,
        extra={"checkpoint": _checkpoint_path(args.checkpoint)},
    )
    print(
        f"{args.strategy} @{args.k} on {len(users)} users: "
        f"ndcg {summary['ndcg']:.4f} recall {summary['recall']:.4f} "
        f"ild {summary['ild']:.4f} npcount {summary['npcount']:.4f}"
    )


def cmd_sweep_cutoff(args: argparse.Namespace) -> None:
    split, _ = _load_split(args)
    params, cfg = _load_model(args.checkpoint)
    _check_nextk_cutoff(args.kmax, cfg)
    _, hists, targets = _holdout(split)
    rows = evalkit.cutoff_sweep(evalkit.ModelScorer(params, cfg), hists, targets, args.kmax)
    evalkit.write_rows_csv(rows, args.out)
    write_run_json(args.out + ".run.json", "sweep-cutoff", args)
    print(f"wrote {len(rows)} cutoff rows (K=1..{args.kmax}, both strategies) to {args.out}")


def cmd_sweep_tradeoff(args: argparse.Namespace) -> None:
    if args.mode in ("mmr", "pop-rerank"):
        if args.checkpoint is None:
            raise UsageError(f"--mode {args.mode} needs --checkpoint for the base scorer")
    else:
        if args.checkpoints is None or args.lambdas is None:
            raise UsageError("--mode rl needs --checkpoints and --lambdas (same length)")
    split, catalog = _load_split(args)
    _, hists, targets = _holdout(split)
    if args.mode in ("mmr", "pop-rerank"):
        params, cfg = _load_model(args.checkpoint)
        if args.lambdas is not None:
            lambdas = _parse_floats(args.lambdas)
        elif args.mode == "mmr":
            lambdas = list(evalkit.DEFAULT_ILD_GRID)
        else:
            lambdas = list(evalkit.DEFAULT_PCOUNT_GRID)
        base = evalkit.ModelScorer(params, cfg).candidate_scores(hists)
        rows = evalkit.rerank_tradeoff_sweep(base, catalog, targets, args.k, lambdas, args.mode)
    else:  # one fine-tuned checkpoint per lambda
        paths = [p for p in args.checkpoints.split(",") if p]
        lambdas = _parse_floats(args.lambdas)
        if len(paths) != len(lambdas):
            raise UsageError(
                f"{len(paths)} checkpoints but {len(lambdas)} lambdas; they pair up one-to-one"
            )
        lists_by_lambda = {}
        for lam, path in zip(lambdas, paths):
            params, cfg = _load_model(path)
            _check_nextk_cutoff(args.k, cfg)
            lists_by_lambda[lam] = evalkit.recommend_nextk(
                evalkit.ModelScorer(params, cfg), hists, args.k
            )
        rows = evalkit.tradeoff_rows(lists_by_lambda, targets, catalog, args.k)
    evalkit.write_rows_csv(rows, args.out)
    write_run_json(args.out + ".run.json", "sweep-tradeoff", args)
    print(f"wrote {len(rows)} tradeoff rows ({args.mode}) to {args.out}")


# --- parser -------------------------------------------------------------------------


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--val-users", type=int, default=100, metavar="N",
                   help="users held out for validation (default 100)")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file ({model: ..., train: ...}); flags win")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--n-max", type=int)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nextkrec",
        description="Train and evaluate a generative Next-K sequential recommender.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", help="generate a seeded synthetic interaction log")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=50)
    p.add_argument("--genres", type=int, default=2)
    p.add_argument("--min-len", type=int, default=12)
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("fit-teacher", help="fit the markov or shifting-trained teacher")
    p.add_argument("--kind", choices=("markov", "shifting"), required=True)
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="teacher file to write")
    p.add_argument("--beta", type=float, default=0.6, help="markov recency decay")
    p.add_argument("--log", help="shifting: per-epoch training log CSV")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--k", type=int, help="shifting model generation slots")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_teacher)

    p = sub.add_parser("gen-teacher-lists", help="cache top-K teacher lists for every train user")
    p.add_argument("--teacher", required=True, help="teacher file from fit-teacher")
    _add_data_flags(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_teacher_lists)

    p = sub.add_parser("distill", help="stage 1: supervised pre-training on teacher lists")
    _add_data_flags(p)
    p.add_argument("--teacher-lists", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--k", type=int, help="generation slots (must match the teacher lists)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("finetune", help="stage 2: PPO alignment against a reward objective")
    _add_data_flags(p)
    p.add_argument("--init", required=True, help="distilled checkpoint (directory or file)")
    p.add_argument("--objective", choices=tuple(OBJECTIVE_KINDS), required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="secondary-metric weight in the reward")
    p.add_argument("--steps", type=int, default=64000, help="PPO updates")
    p.add_argument("--generators", type=int, default=2)
    p.add_argument("--cache-m", type=int, default=16, help="recommendation cache capacity")
    p.add_argument("--publish-every", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=32, help="trajectories per generated batch")
    p.add_argument("--minibatch", type=int, default=16)
    p.add_argument("--epochs-per-batch", type=int, default=4)
    p.add_argument("--lr-policy", type=float, default=1e-4)
    p.add_argument("--lr-value", type=float, default=1e-3)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lam-gae", type=float, default=0.95)
    p.add_argument("--clip-eps", type=float, default=0.2)
    p.add_argument("--sync", action="store_true",
                   help="single-threaded mode (deterministic batch order)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="holdout metrics for one checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory or file")
    _add_data_flags(p)
    p.add_argument("--strategy", choices=("topk", "nextk"), default="nextk")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--exclude-history", action="store_true",
                   help="ban a user's own history items from the list")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-cutoff", help="NDCG@K for K=1..kmax under both strategies")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--kmax", type=int, default=10)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep_cutoff)

    p = sub.add_parser("sweep-tradeoff", help="accuracy vs diversity/popularity tradeoff rows")
    p.add_argument("--mode", choices=("rl", "mmr", "pop-rerank"), required=True)
    _add_data_flags(p)
    p.add_argument("--checkpoint", help="base scorer for mmr/pop-rerank")
    p.add_argument("--checkpoints", help="rl: comma-separated checkpoints, one per lambda")
    p.add_argument("--lambdas", help="comma-separated floats (defaults per mode)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep_tradeoff)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args.func(args)
    except UsageError as e:
        print(parser.format_usage(), end="", file=sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
