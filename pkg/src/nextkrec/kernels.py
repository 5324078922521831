"""Hot numeric kernels with numba-jitted fast paths and pure-numpy fallbacks.

Every public function dispatches between a numba ``@njit`` implementation and
a vectorized numpy one. Selection is controlled by the ``NEXTKREC_NUMBA``
environment variable: ``"0"`` forces the numpy path, ``"1"`` requires numba
(raising if it is unavailable), and unset/anything else auto-detects.

The kernels cover the loop-heavy parts of the toolkit: co-occurrence counting
for the Markov teacher, decayed log-probability scoring of all candidate items
over full histories, greedy MMR re-ranking, and pairwise genre-distance sums.
The transformer itself is not here: its cost is BLAS matmuls, which numba does
not improve.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        raise RuntimeError("numba is not installed")

    prange = range  # type: ignore[assignment]


def numba_enabled() -> bool:
    """Whether the jitted path is active for the current environment."""
    flag = os.environ.get("NEXTKREC_NUMBA", "").strip()
    if flag == "0":
        return False
    if flag == "1":
        if not HAVE_NUMBA:
            raise RuntimeError("NEXTKREC_NUMBA=1 but numba is not importable")
        return True
    return HAVE_NUMBA


def flatten_sequences(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Pack ragged item sequences into (flat values, offsets) arrays.

    ``offsets`` has len(sequences)+1 entries; sequence i occupies
    ``flat[offsets[i]:offsets[i+1]]``.
    """
    offsets = np.zeros(len(sequences) + 1, dtype=np.int64)
    for i, seq in enumerate(sequences):
        offsets[i + 1] = offsets[i] + len(seq)
    flat = np.empty(offsets[-1], dtype=np.int64)
    for i, seq in enumerate(sequences):
        flat[offsets[i] : offsets[i + 1]] = seq
    return flat, offsets


# --- co-occurrence counting ------------------------------------------------
# c[a, b] = number of position pairs (i < j) within one sequence with
# items (a, b). Quadratic in sequence length; the dominant cost of fitting
# the Markov teacher on real datasets.


def _cooccur_loop(flat, offsets, counts):
    for s in range(len(offsets) - 1):
        start = offsets[s]
        end = offsets[s + 1]
        for i in range(start, end):
            a = flat[i]
            for j in range(i + 1, end):
                counts[a, flat[j]] += 1.0


if HAVE_NUMBA:
    _cooccur_nb = njit(cache=True)(_cooccur_loop)


def _cooccur_np(flat, offsets, counts):
    for s in range(len(offsets) - 1):
        seq = flat[offsets[s] : offsets[s + 1]]
        for i in range(len(seq) - 1):
            np.add.at(counts[seq[i]], seq[i + 1 :], 1.0)


def cooccur_counts(flat: np.ndarray, offsets: np.ndarray, num_items: int) -> np.ndarray:
    """Dense (num_items, num_items) matrix of after-within-sequence counts."""
    counts = np.zeros((num_items, num_items), dtype=np.float64)
    if numba_enabled():
        _cooccur_nb(flat, offsets, counts)
    else:
        _cooccur_np(flat, offsets, counts)
    return counts


# --- decayed Markov candidate scoring ---------------------------------------
# score[u, g] = sum over lookback j=1..n of beta^j * logp[h_{n-j+1}, g],
# where h is user u's history (most recent item gets weight beta^1).
# -inf entries in logp propagate to -inf scores; weights that underflow to
# exactly 0.0 are skipped (0 * -inf would poison the sum with NaN).


def _markov_scores_loop(flat, offsets, logp, beta, out):
    num_items = logp.shape[1]
    for u in prange(len(offsets) - 1):
        start = offsets[u]
        end = offsets[u + 1]
        w = beta
        for j in range(end - start):
            if w == 0.0:
                break
            row = logp[flat[end - 1 - j]]
            for g in range(num_items):
                out[u, g] += w * row[g]
            w *= beta


if HAVE_NUMBA:
    _markov_scores_nb = njit(cache=True, parallel=True)(_markov_scores_loop)


def _markov_scores_np(flat, offsets, logp, beta, out):
    for u in range(len(offsets) - 1):
        hist = flat[offsets[u] : offsets[u + 1]][::-1]
        weights = beta ** np.arange(1, len(hist) + 1, dtype=np.float64)
        live = weights > 0.0
        rows = logp[hist[live]]
        out[u] = (weights[live, None] * rows).sum(axis=0)


def markov_scores(
    flat: np.ndarray, offsets: np.ndarray, logp: np.ndarray, beta: float
) -> np.ndarray:
    """Per-history candidate score matrix (num_histories, num_items)."""
    out = np.zeros((len(offsets) - 1, logp.shape[1]), dtype=np.float64)
    if numba_enabled():
        _markov_scores_nb(flat, offsets, np.ascontiguousarray(logp), beta, out)
    else:
        _markov_scores_np(flat, offsets, logp, beta, out)
    return out


# --- cosine genre distance ---------------------------------------------------
# unit_genres holds L2-normalized genre vectors (zero rows stay zero);
# zero_row flags items with all-zero genre vectors, whose distance to
# anything is defined as 1.


def unit_rows(genres: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize rows to unit length; return (unit matrix, zero-row mask)."""
    norms = np.linalg.norm(genres, axis=1)
    zero = norms == 0.0
    unit = np.zeros_like(genres, dtype=np.float64)
    nonzero = ~zero
    unit[nonzero] = genres[nonzero] / norms[nonzero, None]
    return unit, zero


def _cosdist_pair(unit, zero, a, b):
    if zero[a] or zero[b]:
        return 1.0
    d = 0.0
    for f in range(unit.shape[1]):
        d += unit[a, f] * unit[b, f]
    return 1.0 - d


if HAVE_NUMBA:
    _cosdist_pair_nb = njit(cache=True, inline="always")(_cosdist_pair)


# --- greedy MMR selection -----------------------------------------------------
# Step 1 picks the highest base score; each later step picks
# argmax_x score[x] + lam * min_{s in selected} CosDist(x, s).
# Ties resolve to the lowest item id (argmax returns the first maximum).


def _mmr_select_loop(scores, unit, zero, lam, k, out):
    num_items = scores.shape[1]
    for u in prange(scores.shape[0]):
        mindist = np.empty(num_items, dtype=np.float64)
        adjusted = scores[u].copy()
        best = 0
        for step in range(k):
            best = np.argmax(adjusted)
            out[u, step] = best
            adjusted[best] = -np.inf
            if step == k - 1:
                break
            for x in range(num_items):
                if adjusted[x] == -np.inf:
                    continue
                d = _cosdist_pair_nb(unit, zero, x, best)
                if step == 0 or d < mindist[x]:
                    mindist[x] = d
                adjusted[x] = scores[u, x] + lam * mindist[x]


if HAVE_NUMBA:
    _mmr_select_nb = njit(cache=True, parallel=True)(_mmr_select_loop)


def _mmr_select_np(scores, unit, zero, lam, k, out):
    num_items = scores.shape[1]
    for u in range(scores.shape[0]):
        taken = np.zeros(num_items, dtype=bool)
        mindist = np.full(num_items, np.inf)
        adjusted = scores[u].astype(np.float64, copy=True)
        for step in range(k):
            best = int(np.argmax(np.where(taken, -np.inf, adjusted)))
            out[u, step] = best
            taken[best] = True
            if step == k - 1:
                break
            d = np.where(zero[best] | zero, 1.0, 1.0 - unit @ unit[best])
            mindist = np.minimum(mindist, d)
            adjusted = scores[u] + lam * mindist


def mmr_select(
    scores: np.ndarray,
    unit_genres: np.ndarray,
    zero_row: np.ndarray,
    lam: float,
    k: int,
) -> np.ndarray:
    """Greedy MMR-selected item ids, shape (num_histories, k)."""
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds catalog size {scores.shape[1]}")
    out = np.zeros((scores.shape[0], k), dtype=np.int64)
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if numba_enabled():
        _mmr_select_nb(scores, unit_genres, zero_row, lam, k, out)
    else:
        _mmr_select_np(scores, unit_genres, zero_row, lam, k, out)
    return out


# --- pairwise distance sums ---------------------------------------------------


def _pairdist_sums_loop(lists, unit, zero, out):
    k = lists.shape[1]
    for u in prange(lists.shape[0]):
        total = 0.0
        for i in range(k):
            for j in range(i + 1, k):
                total += _cosdist_pair_nb(unit, zero, lists[u, i], lists[u, j])
        out[u] = total


if HAVE_NUMBA:
    _pairdist_sums_nb = njit(cache=True, parallel=True)(_pairdist_sums_loop)


def _pairdist_sums_np(lists, unit, zero, out):
    k = lists.shape[1]
    out[:] = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            a = lists[:, i]
            b = lists[:, j]
            dots = np.einsum("uf,uf->u", unit[a], unit[b])
            out += np.where(zero[a] | zero[b], 1.0, 1.0 - dots)


def pairdist_sums(
    lists: np.ndarray, unit_genres: np.ndarray, zero_row: np.ndarray
) -> np.ndarray:
    """Sum of CosDist over unordered item pairs of each list, shape (num_lists,)."""
    lists = np.ascontiguousarray(lists, dtype=np.int64)
    out = np.zeros(lists.shape[0], dtype=np.float64)
    if numba_enabled():
        _pairdist_sums_nb(lists, unit_genres, zero_row, out)
    else:
        _pairdist_sums_np(lists, unit_genres, zero_row, out)
    return out
