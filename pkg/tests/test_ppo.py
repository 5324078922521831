import numpy as np
import pytest

from nextkrec import evalkit, nnet, ppo, reward, seqcodec
from nextkrec.data import Catalog, SplitDataset
from nextkrec.reward import RewardSpec


def plain_catalog(num_items):
    return Catalog(num_items, np.full(num_items, 1.0 / num_items), np.zeros((num_items, 1)), False)


def tiny_models(num_items=7, K=4, n_max=4, seed=0):
    cfg = nnet.ModelConfig(
        num_items=num_items, embed_dim=16, num_blocks=1, num_heads=2, n_max=n_max, K=K
    )
    policy = nnet.init_params(cfg, seed)
    value = nnet.init_value_from_policy(policy, seed + 1)
    return policy, value, cfg


# --- GAE ----------------------------------------------------------------------------


def test_gae_spec_example():
    adv, targets = ppo.compute_gae(np.array([0.0, 1.0]), np.array([0.5, 0.2]), 1.0, 1.0)
    np.testing.assert_allclose(adv, [0.5, 0.8], atol=1e-12)
    np.testing.assert_allclose(targets, [1.0, 1.0], atol=1e-12)


def test_gae_telescoping_lambda_one():
    # A_i + V_i equals the empirical discounted return from step i
    rng = np.random.default_rng(0)
    for gamma in (1.0, 0.9):
        r = rng.normal(size=6)
        v = rng.normal(size=6)
        adv, targets = ppo.compute_gae(r, v, gamma, 1.0)
        for i in range(6):
            ret = sum(gamma**j * r[i + j] for j in range(6 - i))
            assert adv[i] + v[i] == pytest.approx(ret, abs=1e-10)
            assert targets[i] == pytest.approx(ret, abs=1e-10)


def test_gae_lambda_zero_is_one_step_delta():
    rng = np.random.default_rng(1)
    r = rng.normal(size=5)
    v = rng.normal(size=5)
    adv, _ = ppo.compute_gae(r, v, 0.95, 0.0)
    v_next = np.append(v[1:], 0.0)
    np.testing.assert_allclose(adv, r + 0.95 * v_next - v, atol=1e-12)


def test_gae_perfect_critic_zero_advantage():
    rng = np.random.default_rng(2)
    r = rng.normal(size=5)
    v = np.array([r[i:].sum() for i in range(5)])  # true returns at gamma=1
    for lam in (0.0, 0.5, 1.0):
        adv, _ = ppo.compute_gae(r, v, 1.0, lam)
        np.testing.assert_allclose(adv, np.zeros(5), atol=1e-12)


def test_gae_batched_matches_rows():
    rng = np.random.default_rng(3)
    r = rng.normal(size=(4, 6))
    v = rng.normal(size=(4, 6))
    adv, targets = ppo.compute_gae(r, v, 0.97, 0.9)
    for u in range(4):
        a_u, t_u = ppo.compute_gae(r[u], v[u], 0.97, 0.9)
        np.testing.assert_allclose(adv[u], a_u, atol=1e-14)
        np.testing.assert_allclose(targets[u], t_u, atol=1e-14)


# --- reference scalar losses ----------------------------------------------------------


def test_clip_loss_unit_ratio():
    lp = np.log([0.2, 0.5, 0.1])
    a = np.array([1.0, -2.0, 0.5])
    assert ppo.clip_loss(lp, lp, a, 0.2) == pytest.approx(-a.sum())


def test_clip_loss_clip_arithmetic():
    # rho=2 with A>0 clips at 1.2: contribution -1.2*A
    old = np.array([np.log(0.25)])
    new = np.array([np.log(0.5)])
    assert ppo.clip_loss(new, old, np.array([1.0]), 0.2) == pytest.approx(-1.2)
    # rho=0.5 with A>0 keeps the unclipped branch (min)
    assert ppo.clip_loss(old, new, np.array([1.0]), 0.2) == pytest.approx(-0.5)


def test_clip_loss_zero_advantage_and_nonfinite():
    lp = np.log([0.3, 0.4])
    assert ppo.clip_loss(lp, lp, np.zeros(2), 0.2) == 0.0
    with pytest.raises(FloatingPointError):
        ppo.clip_loss(np.array([1e3]), np.array([-1e3]), np.ones(1), 0.2)


def test_value_mse_loss():
    assert ppo.value_mse_loss(np.array([0.0]), np.array([1.0])) == 1.0
    p = np.array([1.0, 2.0])
    assert ppo.value_mse_loss(p, p) == 0.0
    assert ppo.value_mse_loss(3 * p, 3 * p + 3) == pytest.approx(9 * ppo.value_mse_loss(p, p + 1))


# --- trajectory sampling ---------------------------------------------------------------


def test_sample_trajectory_deterministic_and_distinct():
    policy, value, cfg = tiny_models()
    cat = plain_catalog(cfg.num_items)
    spec = RewardSpec(kind="ndcg", K=cfg.K)
    t1 = ppo.sample_trajectory(policy, value, cfg, spec, [1, 2], 3, cat, np.random.default_rng(7))
    t2 = ppo.sample_trajectory(policy, value, cfg, spec, [1, 2], 3, cat, np.random.default_rng(7))
    np.testing.assert_array_equal(t1.g, t2.g)
    np.testing.assert_allclose(t1.old_logprobs, t2.old_logprobs)
    np.testing.assert_allclose(t1.values, t2.values)
    t3 = ppo.sample_trajectory(policy, value, cfg, spec, [1, 2], 3, cat, np.random.default_rng(8))
    assert not np.array_equal(t1.g, t3.g)
    assert len(set(t1.g.tolist())) == cfg.K
    assert (t1.old_logprobs <= 0).all()


def test_sampled_rewards_match_reward_module():
    policy, value, cfg = tiny_models(seed=4)
    cat = plain_catalog(cfg.num_items)
    spec = RewardSpec(kind="ndcg_minus_pcount", lam=2.0, K=cfg.K)
    traj = ppo.sample_trajectory(policy, value, cfg, spec, [0, 5], 2, cat, np.random.default_rng(9))
    want = reward.episode_rewards(spec, 2, traj.g, cat)
    np.testing.assert_allclose(traj.rewards.r, want.r, atol=1e-12)
    assert traj.rewards.total == pytest.approx(want.total)


def test_recomputed_logprobs_match_stored():
    # the single-pass update path must agree with the stepwise sampling path
    policy, value, cfg = tiny_models(seed=5)
    cat = plain_catalog(cfg.num_items)
    spec = RewardSpec(kind="ndcg", K=cfg.K)
    rng = np.random.default_rng(10)
    hists = [[0], [1, 2, 3], [4, 4]]
    trajs = ppo.sample_trajectories(
        policy, value, cfg, spec, hists, np.array([1, 2, 3]), cat, rng
    )
    toks, pos, mask = seqcodec.encode_batch(
        hists, [t.g.tolist() for t in trajs], cfg.n_max, cfg.K, cfg.num_items
    )
    logits = nnet.forward_full(policy, cfg, toks, pos, mask).logits
    slots = seqcodec.decision_slots(cfg.n_max, cfg.K)
    actions = np.stack([t.g for t in trajs])
    lp, probs = nnet.masked_item_logprobs(logits[:, slots, :], actions)
    stored = np.stack([t.old_logprobs for t in trajs])
    for u in range(len(trajs)):  # banned items carry exactly zero probability
        for i in range(1, cfg.K):
            assert probs[u, i, actions[u, :i]].sum() == 0.0
    np.testing.assert_allclose(lp, stored, atol=1e-5)

    vals = nnet.forward_full(value, cfg, toks, pos, mask).values[:, slots]
    np.testing.assert_allclose(vals, np.stack([t.values for t in trajs]), atol=1e-10)


def test_sharpened_policy_matches_greedy_list():
    policy, value, cfg = tiny_models(seed=6)
    sharp = policy.copy()
    sharp.tensors["w_pol"] *= 1000.0
    sharp.tensors["b_pol"] *= 1000.0
    cat = plain_catalog(cfg.num_items)
    spec = RewardSpec(kind="ndcg", K=cfg.K)
    traj = ppo.sample_trajectory(sharp, value, cfg, spec, [3, 1], 0, cat, np.random.default_rng(11))
    greedy = evalkit.recommend_nextk(evalkit.ModelScorer(sharp, cfg), [[3, 1]], cfg.K)[0]
    np.testing.assert_array_equal(traj.g, greedy)
    assert (traj.old_logprobs > -0.05).all()  # each step's pick has prob ~1


def test_sample_rejects_k_larger_than_catalog():
    policy, value, cfg = tiny_models(num_items=3, K=4, seed=0)
    cat = plain_catalog(3)
    spec = RewardSpec(kind="ndcg", K=4)
    with pytest.raises(ValueError, match="exceeds"):
        ppo.sample_trajectory(policy, value, cfg, spec, [0], 1, cat, np.random.default_rng(0))


def test_finetune_pairs():
    split = SplitDataset(
        {"a": [3, 4, 5], "b": [7], "c": [1, 2]},
        {"a": 9, "b": 9, "c": 9},
        {},
        [],
        10,
        0,
    )
    users, hists, targets = ppo.finetune_pairs(split)
    assert users == ["a", "c"]  # single-item user dropped
    assert hists[0] == [3, 4] and hists[1] == [1]
    assert targets.tolist() == [5, 2]


# --- ppo_update ------------------------------------------------------------------------


def make_trajectories(policy, value, cfg, spec, cat, n, seed):
    rng = np.random.default_rng(seed)
    hists = [[int(rng.integers(cfg.num_items))] for _ in range(n)]
    held = rng.integers(cfg.num_items, size=n)
    return ppo.sample_trajectories(policy, value, cfg, spec, hists, held, cat, rng)


def test_update_zero_advantage_leaves_policy_unchanged():
    policy, value, cfg = tiny_models(seed=7)
    cat = plain_catalog(cfg.num_items)
    spec = RewardSpec(kind="ndcg", K=cfg.K)
    trajs = make_trajectories(policy, value, cfg, spec, cat, 6, 12)
    for t in trajs:  # zero rewards + zero critic values -> GAE identically 0
        t.rewards.r[:] = 0.0
        t.values[:] = 0.0
    before_p = policy.copy()
    before_v = value.copy()
    stats = ppo.ppo_update(
        policy, nnet.init_adam(policy), value, nnet.init_adam(value), cfg,
        trajs, ppo.PPOConfig(epochs_per_batch=2, minibatch_size=3),
    )
    for name in policy.tensors:
        np.testing.assert_array_equal(policy.tensors[name], before_p.tensors[name])
    changed = any(
        not np.array_equal(value.tensors[n], before_v.tensors[n]) for n in nnet.VALUE_HEAD_NAMES
    )
    assert changed  # value regression still runs
    assert stats.policy_loss == pytest.approx(0.0, abs=1e-12)


def test_update_first_pass_ratio_one_clip_zero():
    policy, value, cfg = tiny_models(seed=8)
    cat = plain_catalog(cfg.num_items)
    spec = RewardSpec(kind="ndcg", K=cfg.K)
    trajs = make_trajectories(policy, value, cfg, spec, cat, 8, 13)
    stats = ppo.ppo_update(
        policy, nnet.init_adam(policy), value, nnet.init_adam(value), cfg,
        trajs, ppo.PPOConfig(epochs_per_batch=1, minibatch_size=8),
    )
    assert stats.ratio_mean == pytest.approx(1.0, abs=1e-6)
    assert stats.clip_fraction == 0.0
    assert 0.0 <= stats.clip_fraction <= 1.0
    assert stats.mean_total_reward == pytest.approx(
        float(np.mean([t.rewards.total for t in trajs]))
    )


def test_update_is_deterministic_given_seed():
    spec = RewardSpec(kind="ndcg", K=4)
    results = []
    for _ in range(2):
        policy, value, cfg = tiny_models(seed=9)
        cat = plain_catalog(cfg.num_items)
        trajs = make_trajectories(policy, value, cfg, spec, cat, 8, 14)
        ppo.ppo_update(
            policy, nnet.init_adam(policy), value, nnet.init_adam(value), cfg,
            trajs, ppo.PPOConfig(epochs_per_batch=2, minibatch_size=4), update_seed=(3, 5),
        )
        results.append(policy.copy())
    for name in results[0].tensors:
        np.testing.assert_array_equal(results[0].tensors[name], results[1].tensors[name])


def test_positive_advantage_increases_action_logprob():
    # bypasses batch normalization: explicit positive advantages, one step
    policy, _, cfg = tiny_models(seed=10)
    cat = plain_catalog(cfg.num_items)
    spec = RewardSpec(kind="ndcg", K=cfg.K)
    traj = ppo.sample_trajectory(policy, policy, cfg, spec, [2], 1, cat,
                                 np.random.default_rng(15))
    toks, pos, mask = seqcodec.encode_batch(
        [[2]], [traj.g.tolist()], cfg.n_max, cfg.K, cfg.num_items
    )
    slots = seqcodec.decision_slots(cfg.n_max, cfg.K)
    actions = traj.g[None, :]

    def action_logprobs(params):
        logits = nnet.forward_full(params, cfg, toks, pos, mask).logits
        return nnet.masked_item_logprobs(logits[:, slots, :], actions)[0]

    before = action_logprobs(policy)
    spec_loss = nnet.PPOClipLoss(
        actions=actions,
        old_logprobs=traj.old_logprobs[None, :],
        advantages=np.ones((1, cfg.K)),
        epsilon=0.2,
    )
    _, grads, _ = nnet.backward(policy, cfg, toks, pos, mask, spec_loss)
    nnet.optimizer_step(policy, grads, nnet.init_adam(policy), 1e-4)
    after = action_logprobs(policy)
    assert (after > before).all()


def test_update_skips_nonfinite_minibatches():
    policy, value, cfg = tiny_models(seed=11)
    cat = plain_catalog(cfg.num_items)
    spec = RewardSpec(kind="ndcg", K=cfg.K)
    trajs = make_trajectories(policy, value, cfg, spec, cat, 4, 16)
    trajs[0].old_logprobs[0] = np.nan
    stats = ppo.ppo_update(
        policy, nnet.init_adam(policy), value, nnet.init_adam(value), cfg,
        trajs, ppo.PPOConfig(epochs_per_batch=2, minibatch_size=4),
    )
    assert stats.skipped_minibatches == 2  # the whole batch is one minibatch

    with pytest.raises(RuntimeError, match="non-finite"):
        ppo.ppo_update(
            policy, nnet.init_adam(policy), value, nnet.init_adam(value), cfg,
            trajs, ppo.PPOConfig(epochs_per_batch=8, minibatch_size=4),
        )


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        ppo.PPOConfig(gamma=0.0)
    with pytest.raises(ValueError):
        ppo.PPOConfig(lam_gae=1.5)
    with pytest.raises(ValueError):
        ppo.PPOConfig(epsilon=0.0)


def test_bandit_converges_to_rewarded_item():
    # |I|=5, K=1, reward 1 for item 3: the policy should concentrate there
    policy, value, cfg = tiny_models(num_items=5, K=1, n_max=2, seed=12)
    cat = plain_catalog(5)
    spec = RewardSpec(kind="ndcg", K=1)
    p_opt, v_opt = nnet.init_adam(policy), nnet.init_adam(value)
    ppo_cfg = ppo.PPOConfig(
        epochs_per_batch=2, minibatch_size=16, lr_policy=3e-3, lr_value=1e-2
    )
    hists = [[0]] * 32
    held = np.full(32, 3)

    def prob_of_item_3():
        toks, pos, mask = seqcodec.encode_batch([[0]], [[]], cfg.n_max, cfg.K, cfg.num_items)
        logits = nnet.forward_full(policy, cfg, toks, pos, mask).logits[0, cfg.n_max]
        p = np.exp(logits - logits.max())
        return float(p[3] / p.sum())

    start = prob_of_item_3()
    prob = start
    for step in range(400):
        rng = np.random.default_rng((17, step))
        trajs = ppo.sample_trajectories(policy, value, cfg, spec, hists, held, cat, rng)
        ppo.ppo_update(policy, p_opt, value, v_opt, cfg, trajs, ppo_cfg, update_seed=step)
        if step % 20 == 19:
            prob = prob_of_item_3()
            if prob > 0.99:
                break
    assert prob > 0.99, f"p(item 3) only reached {prob:.3f} from {start:.3f}"
