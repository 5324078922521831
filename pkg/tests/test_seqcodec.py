"""Sequence layout tests: token/position/mask structure and its invariants."""

import numpy as np
import pytest

from nextkrec import seqcodec

NUM_ITEMS = 10
PAD = seqcodec.pad_id(NUM_ITEMS)
SEP = seqcodec.sep_id(NUM_ITEMS)


def test_layout_hand_example():
    enc = seqcodec.encode_state([5, 9], [], n_max=4, K=2, num_items=NUM_ITEMS)
    assert enc.token_ids.tolist() == [PAD, PAD, 5, 9, SEP, PAD, PAD]
    # most recent interaction (9) has position 1, SEP has position 0
    assert enc.position_ids.tolist() == [0, 0, 2, 1, 0, 0, 0]
    assert enc.attention_mask.tolist() == [0, 0, 1, 1, 1, 0, 0]
    assert enc.history_len == 2 and enc.generated_len == 0


def test_generated_item_position():
    enc = seqcodec.encode_state([5, 9], [3], n_max=4, K=2, num_items=NUM_ITEMS)
    assert enc.token_ids[5] == 3
    assert enc.position_ids[5] == 5  # n_max + rank = 4 + 1
    assert enc.attention_mask[5] == 1
    assert enc.token_ids[6] == PAD and enc.attention_mask[6] == 0


def test_history_truncated_to_n_max():
    hist = list(range(1, 8))  # items 1..7
    enc = seqcodec.encode_state([h % NUM_ITEMS for h in hist], [], n_max=4, K=1, num_items=NUM_ITEMS)
    assert enc.history_len == 4
    assert enc.token_ids[:4].tolist() == [4, 5, 6, 7]
    assert enc.position_ids[:4].tolist() == [4, 3, 2, 1]


def test_encode_errors():
    with pytest.raises(ValueError, match="empty history"):
        seqcodec.encode_state([], [], 4, 2, NUM_ITEMS)
    with pytest.raises(ValueError, match="exceeds K"):
        seqcodec.encode_state([1], [2, 3, 4], 4, 2, NUM_ITEMS)


def test_decode_next_position():
    enc0 = seqcodec.encode_state([1], [], 4, 2, NUM_ITEMS)
    assert seqcodec.decode_next_position(enc0) == 4  # the SEP slot
    enc1 = seqcodec.encode_state([1], [3], 4, 2, NUM_ITEMS)
    assert seqcodec.decode_next_position(enc1) == 5  # the slot holding item 3
    enc2 = seqcodec.encode_state([1], [3, 2], 4, 2, NUM_ITEMS)
    with pytest.raises(ValueError, match="complete"):
        seqcodec.decode_next_position(enc2)


def test_reencoding_changes_exactly_one_slot():
    rng = np.random.default_rng(0)
    hist = rng.integers(0, NUM_ITEMS, size=6).tolist()
    g = rng.choice(NUM_ITEMS, size=3, replace=False).tolist()
    for i in range(3):
        a = seqcodec.encode_state(hist, g[:i], 8, 3, NUM_ITEMS)
        b = seqcodec.encode_state(hist, g[: i + 1], 8, 3, NUM_ITEMS)
        diff = np.nonzero(a.token_ids != b.token_ids)[0]
        assert len(diff) == 1
        assert b.token_ids[diff[0]] == g[i]
        # previously assigned (token, position) pairs are untouched
        keep = a.attention_mask == 1
        np.testing.assert_array_equal(a.token_ids[keep], b.token_ids[keep])
        np.testing.assert_array_equal(a.position_ids[keep], b.position_ids[keep])


def test_position_multiset_invariant():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        i = int(rng.integers(0, 4))
        hist = rng.integers(0, NUM_ITEMS, size=n).tolist()
        gen = rng.choice(NUM_ITEMS, size=i, replace=False).tolist()
        enc = seqcodec.encode_state(hist, gen, 6, 3, NUM_ITEMS)
        got = sorted(enc.position_ids[enc.attention_mask == 1].tolist())
        expected = sorted([0] + list(range(1, n + 1)) + list(range(7, 7 + i)))
        assert got == expected


def test_decision_slots():
    assert seqcodec.decision_slots(4, 3).tolist() == [4, 5, 6]


def test_history_only_layout():
    enc = seqcodec.encode_history_only([5, 9, 3], n_max=5, num_items=NUM_ITEMS)
    assert enc.token_ids.tolist() == [PAD, PAD, 5, 9, 3]
    assert enc.position_ids.tolist() == [0, 0, 3, 2, 1]
    assert enc.attention_mask.tolist() == [0, 0, 1, 1, 1]
    with pytest.raises(ValueError, match="empty history"):
        seqcodec.encode_history_only([], 5, NUM_ITEMS)


def test_batch_helpers():
    toks, pos, mask = seqcodec.encode_batch(
        [[1, 2], [3]], [[4], []], n_max=3, K=2, num_items=NUM_ITEMS
    )
    assert toks.shape == (2, 6)
    assert mask[0].sum() == 4 and mask[1].sum() == 2
    toks_h, _, mask_h = seqcodec.encode_history_batch([[1], [2, 3]], 4, NUM_ITEMS)
    assert toks_h.shape == (2, 4)
    assert mask_h.sum() == 3
