import math

import numpy as np
import pytest

from nextkrec import distill, evalkit, nnet, seqcodec, teacher
from nextkrec.data import SplitDataset


def tiny_cfg(**kw):
    base = dict(num_items=10, embed_dim=16, num_blocks=1, num_heads=2, n_max=8, K=4)
    base.update(kw)
    return nnet.ModelConfig(**base)


def ring_split(num_items=10, num_users=40, length=8, n_val=6, seed=0):
    rng = np.random.default_rng(seed)
    train, test, val = {}, {}, {}
    val_users = []
    for u in range(num_users):
        start = int(rng.integers(num_items))
        seq = [(start + j) % num_items for j in range(length)]
        uid = f"u{u}"
        test[uid] = seq[-1]
        if u < n_val:
            val[uid] = seq[-2]
            train[uid] = seq[:-2]
            val_users.append(uid)
        else:
            train[uid] = seq[:-1]
    return SplitDataset(train, test, val, val_users, num_items, 0)


def test_lm_loss_uniform_closed_form():
    # uniform logits, K=10, |I|=1000 -> 10 * ln(1000) ~ 69.078
    logits = np.zeros((61, 1000))
    loss = distill.lm_loss(logits, list(range(10)), n_max=50)
    assert loss == pytest.approx(10 * math.log(1000), rel=1e-9)


def test_lm_loss_perfect_student_near_zero():
    n_max, K, I = 5, 3, 12
    logits = np.zeros((n_max + 1 + K, I))
    tl = [4, 7, 1]
    for i, slot in enumerate(seqcodec.decision_slots(n_max, K)):
        logits[slot, tl[i]] = 60.0
    assert distill.lm_loss(logits, tl, n_max) < 1e-8


def test_lm_loss_out_of_catalog():
    logits = np.zeros((10, 6))
    with pytest.raises(ValueError, match="catalog"):
        distill.lm_loss(logits, [0, 6], n_max=5)


def test_lm_loss_matches_batched_training_loss():
    cfg = tiny_cfg()
    params = nnet.init_params(cfg, 1)
    rng = np.random.default_rng(2)
    hists = [rng.integers(cfg.num_items, size=5).tolist() for _ in range(4)]
    lists = np.stack([rng.choice(cfg.num_items, size=cfg.K, replace=False) for _ in range(4)])
    toks, pos, mask = seqcodec.encode_batch(
        hists, [l.tolist() for l in lists], cfg.n_max, cfg.K, cfg.num_items
    )
    loss, _, _ = nnet.backward(params, cfg, toks, pos, mask, nnet.LMLoss(targets=lists))
    logits = nnet.forward_full(params, cfg, toks, pos, mask).logits
    per_seq = [distill.lm_loss(logits[u], lists[u].tolist(), cfg.n_max) for u in range(4)]
    assert loss == pytest.approx(float(np.mean(per_seq)), rel=1e-12)


def test_single_pass_equals_per_prefix_reencoding():
    # the full-list encoding reads slot i under a causal mask, so it must
    # equal K separate encodings that stop at each prefix
    cfg = tiny_cfg()
    params = nnet.init_params(cfg, 3)
    history = [1, 4, 2]
    tl = [7, 0, 5, 9]

    toks, pos, mask = seqcodec.encode_batch([history], [tl], cfg.n_max, cfg.K, cfg.num_items)
    single = distill.lm_loss(
        nnet.forward_full(params, cfg, toks, pos, mask).logits[0], tl, cfg.n_max
    )

    total = 0.0
    for i in range(len(tl)):
        enc = seqcodec.encode_state(history, tl[:i], cfg.n_max, cfg.K, cfg.num_items)
        slot = seqcodec.decode_next_position(enc)
        logits = nnet.forward_full(
            params, cfg, enc.token_ids[None, :], enc.position_ids[None, :],
            enc.attention_mask[None, :],
        ).logits[0, slot]
        m = logits.max()
        total += float(m + np.log(np.exp(logits - m).sum()) - logits[tl[i]])
    assert single == pytest.approx(total, abs=1e-9)


def test_pretrain_student_learns_teacher_lists():
    split = ring_split(num_users=60)
    cfg = tiny_cfg()
    t = teacher.fit_markov_teacher(split.train_sequences, cfg.num_items)
    lists = teacher.generate_teacher_lists(t, split.train_sequences, cfg.K)
    init = nnet.init_params(cfg, 0)
    train_cfg = distill.DistillConfig(batch_size=16, lr=3e-3, max_epochs=40, patience=40, seed=0)
    best, rows = distill.pretrain_student(init, cfg, lists, split, train_cfg)
    losses = [r[1] for r in rows]
    assert losses[-1] < losses[0] * 0.5  # the LM loss actually drops
    ndcgs = [r[2] for r in rows]
    assert max(ndcgs) > ndcgs[0]  # validation ranking improves

    # returned params are the best-validation snapshot, not the last epoch
    val_hists = [split.train_sequences[u] for u in split.validation_user_ids]
    val_targets = np.array([split.validation_holdout[u] for u in split.validation_user_ids])
    gen = evalkit.recommend_nextk(evalkit.ModelScorer(best, cfg), val_hists, min(10, cfg.K))
    assert float(evalkit.ndcg_per_user(gen, val_targets).mean()) == pytest.approx(max(ndcgs))

    # init params must not be mutated by training
    reinit = nnet.init_params(cfg, 0)
    for name in init.tensors:
        np.testing.assert_array_equal(init.tensors[name], reinit.tensors[name])


def test_pretrain_student_validation_errors():
    split = ring_split()
    cfg = tiny_cfg()
    init = nnet.init_params(cfg, 0)
    lists = {u: list(range(cfg.K)) for u in split.train_sequences}
    incomplete = dict(lists)
    incomplete.pop(next(iter(incomplete)))
    with pytest.raises(ValueError, match="no teacher list"):
        distill.pretrain_student(init, cfg, incomplete, split, distill.DistillConfig())
    wrong_k = {u: list(range(cfg.K + 1)) for u in split.train_sequences}
    with pytest.raises(ValueError, match="K="):
        distill.pretrain_student(init, cfg, wrong_k, split, distill.DistillConfig())
    bad_item = {u: [0, 1, 2, cfg.num_items] for u in split.train_sequences}
    with pytest.raises(ValueError, match="catalog"):
        distill.pretrain_student(init, cfg, bad_item, split, distill.DistillConfig())


def test_training_log_file(tmp_path):
    rows = [(0, 2.5, 0.1), (1, 1.25, 0.2)]
    path = tmp_path / "log.csv"
    distill.write_training_log(rows, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_ndcg10"
    assert lines[1] == "0,2.500000,0.100000"
    assert len(lines) == 3
