"""Input sequence structure for the decoder: token ids, position ids,
attention mask.

Generation layout, window length n_max+1+K:

    [PAD x (n_max-n), h_1..h_n, SEP, g_1..g_i, PAD x (K-i)]

The separator sits at index n_max with position id 0. History position ids
run reverse-chronologically (most recent interaction -> 1). A generated item
at rank r sits at index n_max+r and carries position id n_max+r, so the
(token, position) pair of every placed item is invariant as the list grows;
each generation step only turns one trailing PAD slot into the new item.

The shifting-trained model uses a history-only layout of length n_max with
no separator or generation slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SequenceEncoding:
    token_ids: np.ndarray  # (T,) int64
    position_ids: np.ndarray  # (T,) int64
    attention_mask: np.ndarray  # (T,) 0/1, 0 exactly at PAD
    history_len: int
    generated_len: int
    n_max: int
    K: int


def pad_id(num_items: int) -> int:
    return num_items


def sep_id(num_items: int) -> int:
    return num_items + 1


def encode_state(
    history: list[int],
    generated: list[int],
    n_max: int,
    K: int,
    num_items: int,
) -> SequenceEncoding:
    """Encode (history, partially generated list) for the generative model."""
    if len(history) == 0:
        raise ValueError("empty history")
    if len(generated) > K:
        raise ValueError(f"generated list length {len(generated)} exceeds K={K}")
    hist = history[-n_max:]
    n = len(hist)
    i = len(generated)
    T = n_max + 1 + K
    PAD = pad_id(num_items)

    tokens = np.full(T, PAD, dtype=np.int64)
    positions = np.zeros(T, dtype=np.int64)
    mask = np.zeros(T, dtype=np.int64)

    tokens[n_max - n : n_max] = hist
    positions[n_max - n : n_max] = np.arange(n, 0, -1)
    mask[n_max - n : n_max] = 1

    tokens[n_max] = sep_id(num_items)
    positions[n_max] = 0
    mask[n_max] = 1

    if i:
        tokens[n_max + 1 : n_max + 1 + i] = generated
        positions[n_max + 1 : n_max + 1 + i] = np.arange(n_max + 1, n_max + 1 + i)
        mask[n_max + 1 : n_max + 1 + i] = 1
    return SequenceEncoding(tokens, positions, mask, n, i, n_max, K)


def decode_next_position(encoding: SequenceEncoding) -> int:
    """Index of the slot whose output distribution predicts the next item."""
    if encoding.generated_len >= encoding.K:
        raise ValueError("episode complete: all K items generated")
    return encoding.n_max + encoding.generated_len


def decision_slots(n_max: int, K: int) -> np.ndarray:
    """Indices of the K slots that predict g_1..g_K (SEP first)."""
    return np.arange(n_max, n_max + K, dtype=np.int64)


def encode_history_only(history: list[int], n_max: int, num_items: int) -> SequenceEncoding:
    """History-only layout for the shifting-trained model (length n_max)."""
    if len(history) == 0:
        raise ValueError("empty history")
    hist = history[-n_max:]
    n = len(hist)
    PAD = pad_id(num_items)
    tokens = np.full(n_max, PAD, dtype=np.int64)
    positions = np.zeros(n_max, dtype=np.int64)
    mask = np.zeros(n_max, dtype=np.int64)
    tokens[n_max - n :] = hist
    positions[n_max - n :] = np.arange(n, 0, -1)
    mask[n_max - n :] = 1
    return SequenceEncoding(tokens, positions, mask, n, 0, n_max, 0)


def stack_encodings(encodings: list[SequenceEncoding]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch (tokens, positions, mask) arrays of shape (B, T)."""
    tokens = np.stack([e.token_ids for e in encodings])
    positions = np.stack([e.position_ids for e in encodings])
    mask = np.stack([e.attention_mask for e in encodings])
    return tokens, positions, mask


def encode_batch(
    histories: list[list[int]],
    generated: list[list[int]],
    n_max: int,
    K: int,
    num_items: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch encode_state over parallel (history, generated) pairs."""
    encs = [
        encode_state(h, g, n_max, K, num_items) for h, g in zip(histories, generated)
    ]
    return stack_encodings(encs)


def encode_history_batch(
    histories: list[list[int]], n_max: int, num_items: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    encs = [encode_history_only(h, n_max, num_items) for h in histories]
    return stack_encodings(encs)
