"""Interaction-log ingestion, leave-one-out splitting, catalog construction,
and a seeded synthetic dataset generator.

File formats (UTF-8, LF):
  interactions, csv-with-header: ``user_id,item_id,timestamp``
  interactions, sasrec-pairs:    ``user item`` per line, row order = time order
  genres: csv ``item_id,genre_0,...,genre_{G-1}`` with 0/1 entries
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

INTERACTIONS_FILE = "interactions.csv"
GENRES_FILE = "genres.csv"


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: int
    timestamp: int


@dataclass
class Catalog:
    num_items: int
    freq: np.ndarray  # fraction of training interactions, sums to 1
    genres: np.ndarray  # (num_items, G) non-negative
    has_genres: bool
    unit_genres: np.ndarray = field(init=False)
    zero_genre_rows: np.ndarray = field(init=False)

    def __post_init__(self):
        self.unit_genres, self.zero_genre_rows = kernels.unit_rows(
            np.asarray(self.genres, dtype=np.float64)
        )


@dataclass
class SplitDataset:
    train_sequences: dict[str, list[int]]
    test_holdout: dict[str, int]
    validation_holdout: dict[str, int]
    validation_user_ids: list[str]
    num_items: int
    dropped_users: int


def load_interactions(path: str, format: str = "csv-with-header") -> list[Interaction]:
    """Parse an interaction log; rows come back grouped per user in time order.

    Item IDs are densified to [0, num_items) in first-appearance order. The
    original item labels are not retained; downstream code works on dense ids.
    """
    if format not in ("csv-with-header", "sasrec-pairs"):
        raise ValueError(f"unknown interactions format: {format!r}")
    rows: list[tuple[str, str, int]] = []
    with open(path, encoding="utf-8", newline="") as fh:
        if format == "csv-with-header":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: empty interactions file")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
                user, item, ts = row
                try:
                    rows.append((user, item, int(ts)))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad timestamp {ts!r}") from None
        else:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 2:
                    raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(parts)}")
                # implicit timestamps: row order is time order
                rows.append((parts[0], parts[1], lineno))
    if not rows:
        raise ValueError(f"{path}: empty interactions file")

    item_ids: dict[str, int] = {}
    for _, item, _ in rows:
        if item not in item_ids:
            item_ids[item] = len(item_ids)

    by_user: dict[str, list[tuple[int, int, int]]] = {}
    for order, (user, item, ts) in enumerate(rows):
        by_user.setdefault(user, []).append((ts, order, item_ids[item]))

    out: list[Interaction] = []
    for user in by_user:
        # timestamp ties break by file order
        for ts, _, item in sorted(by_user[user], key=lambda r: (r[0], r[1])):
            out.append(Interaction(user, item, ts))
    return out


def num_items_of(interactions: list[Interaction]) -> int:
    return max(i.item_id for i in interactions) + 1


def user_sequences(interactions: list[Interaction]) -> dict[str, list[int]]:
    """Per-user chronological item sequences (insertion order = user order)."""
    seqs: dict[str, list[int]] = {}
    for it in interactions:
        seqs.setdefault(it.user_id, []).append(it.item_id)
    return seqs


def leave_one_out_split(
    interactions: list[Interaction], n_validation_users: int, seed: int
) -> SplitDataset:
    """Hold out each user's last item for test; for a seeded sample of
    n_validation_users users (needing >= 3 interactions) also hold out the
    second-to-last item for validation."""
    seqs = user_sequences(interactions)
    num_items = num_items_of(interactions)

    dropped = sum(1 for s in seqs.values() if len(s) < 2)
    if dropped:
        log.warning("dropped %d users with fewer than 2 interactions", dropped)
    kept = {u: s for u, s in seqs.items() if len(s) >= 2}

    eligible = sorted(u for u, s in kept.items() if len(s) >= 3)
    if n_validation_users > len(eligible):
        raise ValueError(
            f"n_validation_users={n_validation_users} exceeds the "
            f"{len(eligible)} users with >= 3 interactions"
        )
    rng = np.random.default_rng(seed)
    val_users = sorted(rng.choice(eligible, size=n_validation_users, replace=False).tolist())
    val_set = set(val_users)

    train: dict[str, list[int]] = {}
    test: dict[str, int] = {}
    val: dict[str, int] = {}
    for u, s in kept.items():
        test[u] = s[-1]
        if u in val_set:
            val[u] = s[-2]
            train[u] = s[:-2]
        else:
            train[u] = s[:-1]
    return SplitDataset(train, test, val, val_users, num_items, dropped)


def holdout_pairs(
    split: SplitDataset, which: str = "test"
) -> tuple[list[str], list[list[int]], np.ndarray]:
    """(users, histories, targets) for holdout evaluation.

    "validation": history is the train sequence, target the validation
    item. "test": history is everything before the test item, i.e. train
    plus the validation item where one was held out.
    """
    if which == "validation":
        users = sorted(split.validation_holdout)
        hists = [list(split.train_sequences[u]) for u in users]
        targets = np.array([split.validation_holdout[u] for u in users])
    elif which == "test":
        users = sorted(split.test_holdout)
        hists = []
        for u in users:
            h = list(split.train_sequences[u])
            if u in split.validation_holdout:
                h.append(split.validation_holdout[u])
            hists.append(h)
        targets = np.array([split.test_holdout[u] for u in users])
    else:
        raise ValueError(f"unknown holdout kind {which!r}")
    return users, hists, targets


def build_catalog(
    train_sequences: dict[str, list[int]],
    num_items: int,
    genre_path: str | None = None,
) -> Catalog:
    """Catalog with training-frequency vector and genre matrix.

    freq uses training interactions only; items absent from training keep
    freq 0. Without a genre file, genre vectors are all-zero and diversity
    objectives must be rejected downstream (has_genres=False).
    """
    counts = np.zeros(num_items, dtype=np.float64)
    total = 0
    for s in train_sequences.values():
        for item in s:
            counts[item] += 1
            total += 1
    if total == 0:
        raise ValueError("no training interactions")
    freq = counts / total

    if genre_path is None:
        return Catalog(num_items, freq, np.zeros((num_items, 1)), has_genres=False)

    with open(genre_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise ValueError(f"{genre_path}: missing genre header")
        g_dim = len(header) - 1
        genres = np.full((num_items, g_dim), np.nan)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != g_dim + 1:
                raise ValueError(f"{genre_path}:{lineno}: expected {g_dim + 1} fields")
            item = int(row[0])
            if not 0 <= item < num_items:
                raise ValueError(f"{genre_path}:{lineno}: unknown item {item}")
            genres[item] = [float(x) for x in row[1:]]
    missing = np.flatnonzero(np.isnan(genres).any(axis=1))
    if len(missing):
        raise ValueError(f"{genre_path}: no genre row for items {missing[:10].tolist()}")
    if (genres < 0).any():
        raise ValueError(f"{genre_path}: negative genre entries")
    return Catalog(num_items, freq, genres, has_genres=True)


def load_dataset_dir(
    data_dir: str, n_validation_users: int, seed: int
) -> tuple[SplitDataset, Catalog]:
    """Load the conventional data-directory layout and split it."""
    inter = load_interactions(os.path.join(data_dir, INTERACTIONS_FILE))
    split = leave_one_out_split(inter, n_validation_users, seed)
    genre_path = os.path.join(data_dir, GENRES_FILE)
    catalog = build_catalog(
        split.train_sequences,
        split.num_items,
        genre_path if os.path.exists(genre_path) else None,
    )
    return split, catalog


@dataclass
class SyntheticConfig:
    num_users: int = 2000
    num_items: int = 50
    num_genres: int = 2
    markov_order: int = 1
    seed: int = 0
    min_len: int = 12
    max_len: int = 30
    # transition-matrix block weights (per row, before normalization):
    # ring jumps within the item's genre cluster, uniform in-cluster mass,
    # and uniform catalog-wide mass
    ring_weight: float = 6.0
    in_cluster_weight: float = 2.0
    uniform_weight: float = 0.5
    # multi-peak rows: in-cluster ring offsets and their weights; the default
    # single offset is the plain successor ring with ring_weight
    jump_offsets: tuple[int, ...] = (1,)
    jump_weights: tuple[float, ...] | None = None
    # popularity skew: max/min column-attractiveness ratio within a cluster
    # (1.0 = uniform item frequencies); the profile repeats per cluster so
    # popularity stays uncorrelated with genre
    popularity_skew: float = 1.0


def synthetic_transition_matrix(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """Block-structured row-stochastic transition matrix plus cluster ids.

    Items are partitioned into num_genres contiguous clusters. Each row puts
    most mass on the item's ring jumps inside its cluster (offset +1 by
    default; several decaying peaks if configured), some on the rest of the
    cluster, and a little everywhere, then normalizes to sum 1.
    """
    n = cfg.num_items
    weights = cfg.jump_weights if cfg.jump_weights is not None else (cfg.ring_weight,)
    if len(weights) != len(cfg.jump_offsets):
        raise ValueError("jump_weights and jump_offsets must pair up")
    if cfg.popularity_skew < 1.0:
        raise ValueError("popularity_skew must be >= 1.0")
    clusters = np.arange(n) * cfg.num_genres // n
    trans = np.full((n, n), cfg.uniform_weight / n)
    for c in range(cfg.num_genres):
        members = np.flatnonzero(clusters == c)
        trans[np.ix_(members, members)] += cfg.in_cluster_weight / len(members)
        for off, w in zip(cfg.jump_offsets, weights):
            trans[members, np.roll(members, -off)] += w
    if cfg.popularity_skew > 1.0:
        attract = np.empty(n)
        for c in range(cfg.num_genres):
            members = np.flatnonzero(clusters == c)
            rank = np.arange(len(members)) / max(len(members) - 1, 1)
            attract[members] = cfg.popularity_skew ** (1.0 - rank)
        trans *= attract[None, :]
    trans /= trans.sum(axis=1, keepdims=True)
    return trans, clusters


def generate_synthetic(cfg: SyntheticConfig, out_dir: str) -> None:
    """Write a seeded first-order-Markov interaction log plus one-hot genres.

    Output is byte-identical for a given config (determinism contract).
    """
    if cfg.num_items < 10:
        raise ValueError("num_items must be >= 10")
    if cfg.markov_order != 1:
        raise ValueError("only markov_order=1 is supported")
    if cfg.num_genres < 1 or cfg.num_genres > cfg.num_items:
        raise ValueError("num_genres must be in [1, num_items]")

    trans, clusters = synthetic_transition_matrix(cfg)
    assert np.allclose(trans.sum(axis=1), 1.0, atol=1e-12)

    rng = np.random.default_rng(cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    inter_path = os.path.join(out_dir, INTERACTIONS_FILE)
    with open(inter_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id,item_id,timestamp\n")
        for u in range(cfg.num_users):
            length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            item = int(rng.integers(0, cfg.num_items))
            fh.write(f"u{u},{item},0\n")
            for t in range(1, length):
                item = int(rng.choice(cfg.num_items, p=trans[item]))
                fh.write(f"u{u},{item},{t}\n")

    with open(os.path.join(out_dir, GENRES_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("item_id," + ",".join(f"genre_{g}" for g in range(cfg.num_genres)) + "\n")
        for i in range(cfg.num_items):
            onehot = ["1" if g == clusters[i] else "0" for g in range(cfg.num_genres)]
            fh.write(f"{i}," + ",".join(onehot) + "\n")
