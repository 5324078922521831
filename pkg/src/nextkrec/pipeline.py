"""Asynchronous fine-tuning loop: generators, one optimizer, one validator.

The three roles share two pieces of state. A bounded in-memory cache holds
the last M trajectory batches; generators push into it and the optimizer
samples from it. A versioned on-disk checkpoint store carries policy/value
snapshots from the optimizer out to the generators (which refresh to the
newest version before sampling) and to the validator (which scores each
published version on held-out users and picks the best one).

Every generator batch is seeded by (run_seed, generator_id, seq_no) and
tagged with the checkpoint version that produced it, so a finished run can
be replayed single-threaded: rebuild each consumed batch from its recorded
descriptor and reapply the updates in order. Replay losses match the async
run's because updates are deterministic given the batch and step seed.
"""

from __future__ import annotations

import csv
import logging
import os
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, evalkit, nnet, ppo, reward
from .data import Catalog, SplitDataset, holdout_pairs

log = logging.getLogger(__name__)

LATEST_FILE = "LATEST"
POLICY_FILE = "policy.ckpt"
VALUE_FILE = "value.ckpt"


# --- shared state: trajectory cache and checkpoint store -----------------------------


@dataclass(frozen=True)
class BatchDescriptor:
    """Identity of one generated batch; enough to rebuild it exactly."""

    generator_id: int
    seq_no: int
    policy_version: int


@dataclass
class TrajectoryBatch:
    descriptor: BatchDescriptor
    trajectories: list[ppo.Trajectory]


class RecommendationCache:
    """Bounded FIFO of trajectory batches shared between threads.

    Holds at most `capacity` batches; pushing beyond capacity evicts the
    oldest. Sampling is a uniform draw over the batches currently held and
    does not remove anything, so a batch can be consumed more than once.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._batches: deque[TrajectoryBatch] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self._peak = 0
        self._pushes = 0

    def push(self, batch: TrajectoryBatch) -> None:
        with self._lock:
            self._batches.append(batch)
            self._pushes += 1
            self._peak = max(self._peak, len(self._batches))

    def __len__(self) -> int:
        with self._lock:
            return len(self._batches)

    @property
    def peak_size(self) -> int:
        with self._lock:
            return self._peak

    @property
    def total_pushes(self) -> int:
        with self._lock:
            return self._pushes

    def snapshot(self) -> list[TrajectoryBatch]:
        with self._lock:
            return list(self._batches)

    def sample(self, rng: np.random.Generator, timeout: float = 30.0) -> TrajectoryBatch:
        """Uniform draw over held batches; blocks while the cache is empty.

        Warns once after `timeout` seconds without data, and gives up with
        RuntimeError after 10x timeout so a wedged run fails instead of
        hanging forever.
        """
        start = time.monotonic()
        warned = False
        while True:
            with self._lock:
                if self._batches:
                    return self._batches[int(rng.integers(len(self._batches)))]
            waited = time.monotonic() - start
            if waited > timeout and not warned:
                log.warning("trajectory cache empty for %.1fs; optimizer waiting", waited)
                warned = True
            if waited > 10 * timeout:
                raise RuntimeError("trajectory cache starved: no batches arrived")
            time.sleep(0.002)


class CheckpointStore:
    """Versioned policy/value checkpoint pairs under one directory.

    Layout: `<root>/v0001/policy.ckpt`, `<root>/v0001/value.ckpt`, ...,
    plus a `LATEST` text file naming the newest complete version. A
    version directory is fully written before LATEST moves, and LATEST is
    replaced atomically, so a reader following the pointer always sees a
    complete pair. All versions are retained; replay reloads old ones.
    """

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self._version = self.latest() or 0  # counter only moves forward

    def _version_dir(self, version: int) -> str:
        return os.path.join(self.root, f"v{version:04d}")

    def publish(self, policy: nnet.ModelParams, value: nnet.ModelParams, cfg) -> int:
        version = self._version + 1
        vdir = self._version_dir(version)
        os.makedirs(vdir, exist_ok=True)
        checkpoint.save_checkpoint(policy, cfg, os.path.join(vdir, POLICY_FILE))
        checkpoint.save_checkpoint(value, cfg, os.path.join(vdir, VALUE_FILE))
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".LATEST-")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(f"{version}\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, os.path.join(self.root, LATEST_FILE))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self._version = version
        return version

    def latest(self) -> int | None:
        try:
            with open(os.path.join(self.root, LATEST_FILE)) as fh:
                return int(fh.read().strip())
        except FileNotFoundError:
            return None

    def load(self, version: int) -> tuple[nnet.ModelParams, nnet.ModelParams, nnet.ModelConfig]:
        vdir = self._version_dir(version)
        policy, cfg = checkpoint.load_checkpoint(os.path.join(vdir, POLICY_FILE))
        value, _ = checkpoint.load_checkpoint(os.path.join(vdir, VALUE_FILE))
        return policy, value, cfg

    def versions(self) -> list[int]:
        out = []
        for name in os.listdir(self.root):
            if name.startswith("v") and name[1:].isdigit():
                out.append(int(name[1:]))
        return sorted(out)


# --- generator -----------------------------------------------------------------------


@dataclass
class GeneratorStats:
    generator_id: int
    batches: int = 0
    refreshes: int = 0
    read_failures: int = 0


def _generate_batch(
    policy, value, cfg, spec, histories, targets, catalog, run_seed, generator_id, seq_no, batch_size
):
    """One seeded batch: user subsample + sampled trajectories.

    Everything downstream of (run_seed, generator_id, seq_no) and the
    checkpoint version is deterministic; replay relies on this.
    """
    rng = np.random.default_rng((run_seed, generator_id, seq_no))
    n = len(histories)
    idx = rng.choice(n, size=min(batch_size, n), replace=False)
    trajs = ppo.sample_trajectories(
        policy,
        value,
        cfg,
        spec,
        [histories[i] for i in idx],
        np.asarray(targets)[idx],
        catalog,
        rng,
    )
    return trajs


def run_generator(
    cache: RecommendationCache,
    store: CheckpointStore,
    histories: list[list[int]],
    targets: np.ndarray,
    spec: reward.RewardSpec,
    catalog: Catalog,
    run_seed: int,
    generator_id: int,
    stop_signal: threading.Event,
    batch_size: int = 32,
    max_batches: int | None = None,
    retry_backoff: float = 0.05,
) -> GeneratorStats:
    """Sample trajectory batches from the freshest published policy.

    Loops until `stop_signal` (or `max_batches`): refresh to the latest
    checkpoint if it moved, draw a seeded batch of users, sample their
    episodes, push the batch. Checkpoint read failures are retried with
    backoff and never crash the loop.
    """
    stats = GeneratorStats(generator_id)
    version: int | None = None
    policy = value = cfg = None
    seq_no = 0
    while not stop_signal.is_set():
        if max_batches is not None and seq_no >= max_batches:
            break
        latest = store.latest()
        if latest is None:
            time.sleep(retry_backoff)
            continue
        if latest != version:
            try:
                policy, value, cfg = store.load(latest)
            except (checkpoint.CheckpointError, OSError, ValueError) as exc:
                stats.read_failures += 1
                log.warning("generator %d: checkpoint v%04d read failed (%s); retrying",
                            generator_id, latest, exc)
                time.sleep(retry_backoff)
                continue
            version = latest
            stats.refreshes += 1
        trajs = _generate_batch(
            policy, value, cfg, spec, histories, targets, catalog,
            run_seed, generator_id, seq_no, batch_size,
        )
        cache.push(TrajectoryBatch(BatchDescriptor(generator_id, seq_no, version), trajs))
        stats.batches += 1
        seq_no += 1
    return stats


# --- optimizer -----------------------------------------------------------------------


@dataclass
class OptimizerLogRow:
    step: int
    generator_id: int
    seq_no: int
    policy_version: int
    current_version: int
    policy_loss: float
    value_loss: float
    clip_fraction: float
    ratio_mean: float
    mean_total_reward: float
    skipped_minibatches: int
    val_metric: float = float("nan")

    @property
    def staleness(self) -> int:
        return self.current_version - self.policy_version


def run_optimizer(
    cache: RecommendationCache,
    store: CheckpointStore,
    policy: nnet.ModelParams,
    value: nnet.ModelParams,
    cfg: nnet.ModelConfig,
    ppo_cfg: ppo.PPOConfig,
    run_seed: int,
    stop_after_steps: int,
    publish_every: int = 16,
    log_rows: list[OptimizerLogRow] | None = None,
    val_metric_fn=None,
    sample_timeout: float = 30.0,
) -> int:
    """PPO updates on cached batches; returns the final published version.

    Publishes the starting params as the initial version when the store is
    empty, then round-trips them through the store so the in-memory state
    starts bit-identical to what a replay would load. Each consumed batch
    descriptor and its losses are appended to `log_rows`.
    """
    version = store.latest()
    if version is None:
        version = store.publish(policy, value, cfg)
    if stop_after_steps == 0:
        return version
    start_p, start_v, _ = store.load(version)
    for name, t in policy.tensors.items():
        t[...] = start_p.tensors[name]
    for name, t in value.tensors.items():
        t[...] = start_v.tensors[name]

    policy_opt = nnet.init_adam(policy)
    value_opt = nnet.init_adam(value)
    pick_rng = np.random.default_rng((run_seed, 0x0B7A1))
    for step in range(stop_after_steps):
        batch = cache.sample(pick_rng, timeout=sample_timeout)
        stats = ppo.ppo_update(
            policy, policy_opt, value, value_opt, cfg,
            batch.trajectories, ppo_cfg, update_seed=(run_seed, step),
        )
        if log_rows is not None:
            d = batch.descriptor
            log_rows.append(OptimizerLogRow(
                step=step,
                generator_id=d.generator_id,
                seq_no=d.seq_no,
                policy_version=d.policy_version,
                current_version=version,
                policy_loss=stats.policy_loss,
                value_loss=stats.value_loss,
                clip_fraction=stats.clip_fraction,
                ratio_mean=stats.ratio_mean,
                mean_total_reward=stats.mean_total_reward,
                skipped_minibatches=stats.skipped_minibatches,
                val_metric=val_metric_fn() if val_metric_fn is not None else float("nan"),
            ))
        if (step + 1) % publish_every == 0:
            version = store.publish(policy, value, cfg)
    if stop_after_steps % publish_every != 0:
        version = store.publish(policy, value, cfg)
    return version


def write_finetune_log(rows: list[OptimizerLogRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean_total_reward", "clip_fraction", "value_loss",
                    "policy_loss", "val_metric"])
        for r in rows:
            val = "" if np.isnan(r.val_metric) else f"{r.val_metric:.6f}"
            w.writerow([r.step, f"{r.mean_total_reward:.6f}", f"{r.clip_fraction:.6f}",
                        f"{r.value_loss:.6f}", f"{r.policy_loss:.6f}", val])


# --- validator -----------------------------------------------------------------------


@dataclass
class ValidationRecord:
    version: int
    metric_r: float
    ndcg10: float
    secondary: float


def evaluate_checkpoint(
    policy: nnet.ModelParams,
    cfg: nnet.ModelConfig,
    histories: list[list[int]],
    targets: np.ndarray,
    spec: reward.RewardSpec,
    catalog: Catalog,
) -> tuple[float, float, float]:
    """(mean total reward R, NDCG@10, secondary metric) under Next-K inference.

    The secondary column is ILD@K for the diversity objective, PCOUNT@K for
    the popularity objective, and 0 for plain NDCG.
    """
    scorer = evalkit.ModelScorer(policy, cfg)
    lists = evalkit.recommend_nextk(scorer, histories, spec.K)
    r = reward.episode_rewards_batch(spec, np.asarray(targets), lists, catalog)
    metric_r = float(r.sum(axis=1).mean())
    rep = evalkit.metrics(lists, targets, catalog, min(10, spec.K))
    ndcg10 = float(rep.ndcg.mean())
    if spec.kind == "ndcg_plus_diversity":
        secondary = float(evalkit.metrics(lists, targets, catalog, spec.K).ild.mean())
    elif spec.kind == "ndcg_minus_pcount":
        secondary = float(evalkit.metrics(lists, targets, catalog, spec.K).pcount.mean())
    else:
        secondary = 0.0
    return metric_r, ndcg10, secondary


def best_version(records: list[ValidationRecord]) -> int | None:
    """Version with the highest metric R; ties go to the lower version."""
    best: ValidationRecord | None = None
    for rec in sorted(records, key=lambda r: r.version):
        if best is None or rec.metric_r > best.metric_r:
            best = rec
    return None if best is None else best.version


def run_validator(
    store: CheckpointStore,
    histories: list[list[int]],
    targets: np.ndarray,
    spec: reward.RewardSpec,
    catalog: Catalog,
    stop_signal: threading.Event,
    poll_interval: float = 0.1,
    records: list[ValidationRecord] | None = None,
    shared_metric: dict | None = None,
) -> int | None:
    """Poll for new versions, score each on validation users, pick the best.

    Read-only with respect to the store. A version whose evaluation fails
    is logged and skipped. Returns the best version seen (None if none).
    """
    if records is None:
        records = []
    seen: set[int] = set()

    def poll_once() -> None:
        latest = store.latest()
        if latest is None or latest in seen:
            return
        # catch up on any versions published between polls
        for v in range(max(seen, default=0) + 1, latest + 1):
            seen.add(v)
            try:
                policy, _value, cfg = store.load(v)
                metric_r, ndcg10, secondary = evaluate_checkpoint(
                    policy, cfg, histories, targets, spec, catalog
                )
            except Exception as exc:
                log.warning("validator: evaluation of v%04d failed (%s); skipped", v, exc)
                continue
            records.append(ValidationRecord(v, metric_r, ndcg10, secondary))
            if shared_metric is not None:
                shared_metric["val_metric"] = metric_r

    while not stop_signal.is_set():
        poll_once()
        time.sleep(poll_interval)
    poll_once()  # pick up the final publish
    return best_version(records)


def write_validator_log(records: list[ValidationRecord], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["version", "metric_R", "ndcg10", "secondary_metric"])
        for r in records:
            w.writerow([r.version, f"{r.metric_r:.6f}", f"{r.ndcg10:.6f}", f"{r.secondary:.6f}"])


# --- orchestration -------------------------------------------------------------------


@dataclass
class RunConfig:
    run_seed: int = 0
    num_generators: int = 1
    cache_capacity: int = 16
    publish_every: int = 16
    batch_size: int = 32
    poll_interval: float = 0.1
    threaded: bool = True


@dataclass
class FinetuneResult:
    final_version: int
    best_version: int
    validation: list[ValidationRecord]
    optimizer_log: list[OptimizerLogRow]
    generator_stats: list[GeneratorStats]
    cache_peak: int


def run_finetune(
    policy: nnet.ModelParams,
    value: nnet.ModelParams,
    cfg: nnet.ModelConfig,
    split: SplitDataset,
    catalog: Catalog,
    spec: reward.RewardSpec,
    ppo_cfg: ppo.PPOConfig,
    run_cfg: RunConfig,
    store_dir: str,
) -> FinetuneResult:
    """Fine-tune `policy` with PPO; mutates policy/value in place.

    Threaded mode runs generators and the validator on their own threads
    with the optimizer in the calling thread. Single-threaded mode
    interleaves one generator batch before each optimizer step and
    validates at the end; it exists for fully reproducible runs.
    """
    reward.validate_spec(spec, catalog)
    if spec.K != cfg.K:
        raise ValueError(f"reward K={spec.K} != model K={cfg.K}")
    _, hists, targets = ppo.finetune_pairs(split)
    if not hists:
        raise ValueError("no training sequences with >= 2 items")
    _, val_hists, val_targets = holdout_pairs(split, "validation")
    if len(val_hists) == 0:
        raise ValueError("validation holdout is empty")

    store = CheckpointStore(store_dir)
    cache = RecommendationCache(run_cfg.cache_capacity)
    steps = ppo_cfg.total_steps
    opt_log: list[OptimizerLogRow] = []
    val_records: list[ValidationRecord] = []

    if run_cfg.threaded:
        stop = threading.Event()
        shared: dict = {}
        if store.latest() is None:
            store.publish(policy, value, cfg)
        gen_stats: list[GeneratorStats] = []
        gen_threads = []
        for gid in range(run_cfg.num_generators):
            t = threading.Thread(
                target=lambda g=gid: gen_stats.append(run_generator(
                    cache, store, hists, targets, spec, catalog,
                    run_cfg.run_seed, g, stop, batch_size=run_cfg.batch_size,
                )),
                name=f"generator-{gid}",
                daemon=True,
            )
            gen_threads.append(t)
            t.start()
        val_out: dict = {}
        val_thread = threading.Thread(
            target=lambda: val_out.update(best=run_validator(
                store, val_hists, val_targets, spec, catalog, stop,
                poll_interval=run_cfg.poll_interval, records=val_records,
                shared_metric=shared,
            )),
            name="validator",
            daemon=True,
        )
        val_thread.start()
        try:
            final = run_optimizer(
                cache, store, policy, value, cfg, ppo_cfg,
                run_cfg.run_seed, steps, publish_every=run_cfg.publish_every,
                log_rows=opt_log,
                val_metric_fn=lambda: shared.get("val_metric", float("nan")),
            )
        finally:
            stop.set()
            for t in gen_threads:
                t.join(timeout=60.0)
            val_thread.join(timeout=60.0)
        best = val_out.get("best")
    else:
        final, gen_stats = _run_sync(
            policy, value, cfg, store, cache, hists, targets, spec, catalog,
            ppo_cfg, run_cfg, steps, opt_log,
        )
        stop = threading.Event()
        stop.set()
        best = run_validator(
            store, val_hists, val_targets, spec, catalog, stop,
            poll_interval=0.0, records=val_records,
        )

    if best is None:
        best = final
    return FinetuneResult(
        final_version=final,
        best_version=best,
        validation=val_records,
        optimizer_log=opt_log,
        generator_stats=gen_stats,
        cache_peak=cache.peak_size,
    )


def _run_sync(policy, value, cfg, store, cache, hists, targets, spec, catalog,
              ppo_cfg, run_cfg, steps, opt_log) -> tuple[int, list[GeneratorStats]]:
    """One generator batch before every optimizer step, one thread."""
    stats = GeneratorStats(0)
    if store.latest() is None:
        store.publish(policy, value, cfg)
    seq_no = 0

    def feed() -> None:
        nonlocal seq_no
        version = store.latest()
        p, v, c = store.load(version)
        stats.refreshes += 1
        trajs = _generate_batch(
            p, v, c, spec, hists, targets, catalog,
            run_cfg.run_seed, 0, seq_no, run_cfg.batch_size,
        )
        cache.push(TrajectoryBatch(BatchDescriptor(0, seq_no, version), trajs))
        stats.batches += 1
        seq_no += 1

    # prime the cache, then interleave: the optimizer's cache.sample call
    # never blocks because a fresh batch always precedes the step
    class _InterleavedCache:
        def sample(self, rng, timeout=None):
            feed()
            return cache.sample(rng, timeout=1.0)

        def __getattr__(self, name):
            return getattr(cache, name)

    final = run_optimizer(
        _InterleavedCache(), store, policy, value, cfg, ppo_cfg,
        run_cfg.run_seed, steps, publish_every=run_cfg.publish_every,
        log_rows=opt_log,
    )
    return final, [stats]


# --- deterministic replay ------------------------------------------------------------


def replay_losses(
    store: CheckpointStore,
    opt_log: list[OptimizerLogRow],
    split: SplitDataset,
    catalog: Catalog,
    spec: reward.RewardSpec,
    ppo_cfg: ppo.PPOConfig,
    run_seed: int,
    batch_size: int = 32,
    start_version: int = 1,
) -> list[ppo.UpdateStats]:
    """Re-run a finished run's updates single-threaded from its log.

    Rebuilds each consumed batch from its recorded descriptor (seed +
    checkpoint version) and reapplies the PPO updates in step order,
    starting from `start_version`. Returns per-step stats; losses match
    the original run's because every piece is deterministic.
    """
    _, hists, targets = ppo.finetune_pairs(split)
    policy, value, cfg = store.load(start_version)
    policy_opt = nnet.init_adam(policy)
    value_opt = nnet.init_adam(value)
    cache: dict[int, tuple] = {}  # version -> loaded checkpoint triple
    batches: dict[tuple, list] = {}  # descriptor -> rebuilt batch; the async
    # optimizer may consume one cached batch many times, so rebuild once
    out: list[ppo.UpdateStats] = []
    for row in opt_log:
        v = row.policy_version
        if v not in cache:
            cache[v] = store.load(v)
        key = (row.generator_id, row.seq_no, v)
        if key not in batches:
            p, val_p, c = cache[v]
            batches[key] = _generate_batch(
                p, val_p, c, spec, hists, targets, catalog,
                run_seed, row.generator_id, row.seq_no, batch_size,
            )
        trajs = batches[key]
        out.append(ppo.ppo_update(
            policy, policy_opt, value, value_opt, cfg,
            trajs, ppo_cfg, update_seed=(run_seed, row.step),
        ))
    return out
