"""Time each hot kernel on both dispatch paths (numba jit vs pure numpy).

Run from the repo root:

    python3 benchmarks/bench_kernels.py [--users 20000] [--items 500] [--repeat 5]

Dispatch is flipped per timing via the NEXTKREC_NUMBA environment variable,
which the kernels consult on every call. The first jitted call is excluded
from timing (compilation warmup). Outputs one row per kernel with both times
and the speedup factor.
"""

from __future__ import annotations

import argparse
import os
import time

import numpy as np

from nextkrec import kernels


def synth_workload(num_users: int, num_items: int, num_genres: int, seed: int):
    rng = np.random.default_rng(seed)
    seqs = [
        rng.integers(0, num_items, size=rng.integers(10, 40)).tolist()
        for _ in range(num_users)
    ]
    flat, offsets = kernels.flatten_sequences(seqs)
    genres = (rng.random((num_items, num_genres)) < 0.25).astype(np.float64)
    genres[genres.sum(axis=1) == 0, 0] = 1.0
    unit, zero = kernels.unit_rows(genres)
    probs = rng.random((num_items, num_items))
    probs[rng.random((num_items, num_items)) < 0.6] = 0.0  # sparse like real counts
    with np.errstate(divide="ignore"):
        logp = np.log(probs / np.maximum(probs.sum(axis=1, keepdims=True), 1e-12))
    scores = rng.normal(size=(num_users, num_items))
    lists = np.stack([
        rng.choice(num_items, size=10, replace=False) for _ in range(num_users)
    ])
    return flat, offsets, logp, unit, zero, scores, lists


def timed(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--users", type=int, default=20000)
    ap.add_argument("--items", type=int, default=500)
    ap.add_argument("--genres", type=int, default=18)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    flat, offsets, logp, unit, zero, scores, lists = synth_workload(
        args.users, args.items, args.genres, args.seed
    )
    num_items = args.items

    cases = {
        "cooccur_counts": lambda: kernels.cooccur_counts(flat, offsets, num_items),
        "markov_scores": lambda: kernels.markov_scores(flat, offsets, logp, 0.6),
        "mmr_select": lambda: kernels.mmr_select(scores[:2000], unit, zero, 1.0, 10),
        "pairdist_sums": lambda: kernels.pairdist_sums(lists, unit, zero),
    }

    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"workload: {args.users} users, {num_items} items, {args.genres} genres")
    print(f"{'kernel':<16} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, fn in cases.items():
        os.environ["NEXTKREC_NUMBA"] = "1"
        fn()  # jit warmup
        t_nb = timed(fn, args.repeat)
        os.environ["NEXTKREC_NUMBA"] = "0"
        res_np = fn()
        t_np = timed(fn, args.repeat)
        os.environ["NEXTKREC_NUMBA"] = "1"
        res_nb = fn()
        match = np.allclose(np.asarray(res_np, dtype=np.float64),
                            np.asarray(res_nb, dtype=np.float64), equal_nan=True)
        flag = "" if match else "  RESULTS DIFFER"
        print(f"{name:<16} {t_np*1e3:>8.1f}ms {t_nb*1e3:>8.1f}ms {t_np/t_nb:>7.1f}x{flag}")
    os.environ.pop("NEXTKREC_NUMBA", None)


if __name__ == "__main__":
    main()
