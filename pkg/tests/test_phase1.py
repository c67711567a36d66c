import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rma2 import tasks as T
from rma2.env import Privileged, TaskEnv
from rma2.neural import gradcheck
from rma2.phase1 import (
    ActorCritic,
    PolicyConfig,
    PPOConfig,
    gae,
    gaussian_entropy,
    gaussian_log_prob,
    make_adam,
    normalize_advantages,
    ppo_losses,
    train_policy,
)

OBS, GOAL, ACT = 17, 6, 5


def _priv(b, rng, instances=10, categories=6):
    return Privileged(
        e_phys=rng.standard_normal((b, 8)),
        instance_id=rng.integers(instances, size=b),
        category_id=rng.integers(categories, size=b),
        rotation=rng.standard_normal((b, 2)),
        contacts=rng.integers(2, size=(b, 2)).astype(float),
    )


def _model(cfg=PolicyConfig(), seed=0, **kw):
    return ActorCritic(cfg, OBS, GOAL, ACT, 10, 6, np.random.default_rng(seed), **kw)


def _gae_oracle(r, v, d, gamma, lam):
    """Direct discounted sum of TD residuals, truncated at episode ends."""
    steps = len(r)
    adv = np.zeros(steps)
    for t in range(steps):
        acc, coef = 0.0, 1.0
        for k in range(t, steps):
            live = 1.0 - d[k]
            delta = r[k] + gamma * v[k + 1] * live - v[k]
            acc += coef * delta
            if d[k]:
                break
            coef *= gamma * lam
        adv[t] = acc
    return adv


def test_gae_three_step_hand_case():
    r = np.array([[1.0], [0.0], [2.0]])
    v = np.array([[0.5], [0.2], [0.1], [0.4]])
    d = np.zeros((3, 1))
    adv, ret = gae(r, v, d, 0.9, 0.8)
    # hand-computed residuals: 0.68, -0.11, 2.26
    delta = np.array([1 + 0.9 * 0.2 - 0.5, 0 + 0.9 * 0.1 - 0.2, 2 + 0.9 * 0.4 - 0.1])
    expect = [delta[0] + 0.72 * delta[1] + 0.72**2 * delta[2], delta[1] + 0.72 * delta[2], delta[2]]
    np.testing.assert_allclose(adv[:, 0], expect, atol=1e-12)
    np.testing.assert_allclose(ret[:, 0], adv[:, 0] + v[:3, 0], atol=1e-12)


def test_gae_constant_value_case():
    r = np.array([[1.0], [0.0], [1.0]])
    v = np.array([[0.5], [0.5], [0.5], [0.0]])
    adv, _ = gae(r, v, np.zeros((3, 1)))
    np.testing.assert_allclose(adv[:, 0], _gae_oracle(r[:, 0], v[:, 0], np.zeros(3), 0.95, 0.95), atol=1e-12)
    # unrolled by hand: deltas 0.975, -0.025, 0.5
    assert adv[2, 0] == pytest.approx(0.5)
    assert adv[1, 0] == pytest.approx(-0.025 + 0.9025 * 0.5)
    assert adv[0, 0] == pytest.approx(0.975 + 0.9025 * (-0.025 + 0.9025 * 0.5))


def test_gae_single_terminal_step():
    adv, ret = gae(np.array([[1.0]]), np.array([[0.0], [3.0]]), np.array([[1.0]]))
    assert adv[0, 0] == 1.0 and ret[0, 0] == 1.0


def test_gae_zero_inputs_give_zero():
    adv, ret = gae(np.zeros((5, 3)), np.zeros((6, 3)), np.zeros((5, 3)))
    assert np.all(adv == 0) and np.all(ret == 0)


def test_gae_done_cuts_bootstrap():
    r = np.array([[1.0], [1.0]])
    v = np.array([[0.0], [5.0], [7.0]])
    adv, _ = gae(r, v, np.array([[1.0], [0.0]]), 0.9, 0.9)
    assert adv[0, 0] == pytest.approx(1.0)


@given(st.integers(1, 12), st.integers(0, 1000), st.floats(0.5, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_gae_matches_direct_sum(steps, seed, gamma, lam):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(steps)
    v = rng.standard_normal(steps + 1)
    d = (rng.random(steps) < 0.2).astype(float)
    adv, _ = gae(r[:, None], v[:, None], d[:, None], gamma, lam)
    np.testing.assert_allclose(adv[:, 0], _gae_oracle(r, v, d, gamma, lam), atol=1e-10)


def test_advantage_normalization():
    a = normalize_advantages(np.random.default_rng(0).standard_normal(1000) * 5 + 3)
    assert abs(a.mean()) < 1e-12 and a.std() == pytest.approx(1.0, abs=1e-6)


def test_gaussian_log_prob_and_entropy():
    ls = np.array([-0.5, 0.3])
    u, m = np.array([[0.2, -1.0]]), np.array([[0.0, 0.5]])
    std = np.exp(ls)
    expect = sum(-0.5 * ((u[0, i] - m[0, i]) / std[i]) ** 2 - ls[i] - 0.5 * np.log(2 * np.pi) for i in range(2))
    assert gaussian_log_prob(u, m, ls)[0] == pytest.approx(expect)
    assert gaussian_entropy(ls) == pytest.approx(np.sum(ls) + np.log(2 * np.pi * np.e))


def test_encoder_input_layout():
    m = _model()
    rng = np.random.default_rng(1)
    p = _priv(4, rng)
    inp = m.encoder_input(p)
    assert inp.shape == (4, 44)
    np.testing.assert_allclose(inp[:, :8], p.e_phys, rtol=1e-6)
    np.testing.assert_allclose(inp[:, 8:24], m.dicts.instance_table.weight[p.instance_id])
    np.testing.assert_allclose(inp[:, 24:40], m.dicts.category_table.weight[p.category_id])
    np.testing.assert_allclose(inp[:, 40:42], p.rotation, rtol=1e-6)
    np.testing.assert_allclose(inp[:, 42:44], p.contacts)


def test_noid_variant_zeroes_identity_slots_and_keeps_param_count():
    full, noid = _model(), _model(PolicyConfig(use_ids=False))
    p = _priv(3, np.random.default_rng(2))
    inp = noid.encoder_input(p)
    assert np.all(inp[:, 8:40] == 0)
    np.testing.assert_allclose(inp[:, :8], full.encoder_input(p)[:, :8])
    count = lambda m: sum(v.size for v in m.named_arrays().values())  # noqa: E731
    assert count(full) == count(noid)


def test_act_deterministic_squash_and_zero_std():
    m = _model()
    rng = np.random.default_rng(3)
    x, g = rng.standard_normal((6, OBS)), rng.standard_normal((6, GOAL))
    z = m.encode_env(_priv(6, rng))
    a1, u1, _, v1 = m.act(x, z, g, deterministic=True)
    a2, u2, _, v2 = m.act(x, z, g, deterministic=True)
    assert a1.tobytes() == a2.tobytes() and v1.tobytes() == v2.tobytes()
    np.testing.assert_allclose(a1, np.tanh(u1))
    a3, u3, _, _ = m.act(x, z, g, rng, noise_std=1e-30)
    np.testing.assert_allclose(u3, u1, atol=1e-20)
    big, _, _, _ = m.act(x * 1e3, z, g, rng)
    assert np.all(np.abs(big) <= 1.0)


def test_policy_input_width_mismatch_faults():
    m = _model()
    with pytest.raises(Exception):
        m.policy_input(np.zeros((2, OBS + 1)), np.zeros((2, 16)), np.zeros((2, GOAL)))


def _ppo_inputs(m, rng, n=32):
    x, g = rng.standard_normal((n, OBS)), rng.standard_normal((n, GOAL))
    p = _priv(n, rng)
    z = m.encode_env(p)
    _, u, logp, _ = m.act(x, z, g, rng)
    return x, g, u, logp, rng.standard_normal(n), rng.standard_normal(n), p


def test_ratio_one_surrogate_equals_minus_mean_advantage():
    m = _model()
    x, g, u, logp, adv, ret, p = _ppo_inputs(m, np.random.default_rng(4))
    stats = ppo_losses(m, PPOConfig(), x, g, u, logp, adv, ret, p, backward=False)
    assert stats["pg_loss"] == pytest.approx(-adv.mean(), abs=1e-5)
    assert stats["kl"] == pytest.approx(0.0, abs=1e-6)
    assert stats["clip_frac"] == 0.0


@pytest.mark.parametrize("cfg", [PolicyConfig(), PolicyConfig(use_ids=False), PolicyConfig(use_env=False),
                                 PolicyConfig(use_env=False, use_depth=True)])
def test_ppo_gradients_match_finite_differences(cfg):
    m = _model(cfg, seed=5).astype(np.float64)
    rng = np.random.default_rng(6)
    n = 16
    x, g = rng.standard_normal((n, OBS)), rng.standard_normal((n, GOAL))
    p = _priv(n, rng) if cfg.use_env else None
    scans = rng.random((n, 64)) if cfg.use_depth else None
    z = m.encode_env(p) if p is not None else None
    _, u, logp, _ = m.act(x, z, g, rng, scan=scans)
    logp = logp + 0.05 * rng.standard_normal(n)  # move ratios off 1, still inside the clip band mostly
    adv, ret = rng.standard_normal(n), rng.standard_normal(n)
    ppo = PPOConfig()

    def loss():
        return ppo_losses(m, ppo, x, g, u, logp, adv, ret, p, scans, backward=False)["loss"]

    m.zero_grad()
    ppo_losses(m, ppo, x, g, u, logp, adv, ret, p, scans)
    err = gradcheck(loss, m.named_arrays(), m.named_grads(), rng, probes=40, h=1e-6)
    assert err < 1e-4


def test_unread_dictionary_rows_untouched_by_update():
    m = _model()
    rng = np.random.default_rng(7)
    x, g, u, logp, adv, ret, p = _ppo_inputs(m, rng)
    p.instance_id[:] = 2
    p.category_id[:] = 1
    before_i = m.dicts.instance_table.weight.copy()
    before_c = m.dicts.category_table.weight.copy()
    adam = make_adam(m, 1e-2)
    m.zero_grad()
    ppo_losses(m, PPOConfig(), x, g, u, logp, adv, ret, p)
    adam.step(m.named_grads())
    changed_i = np.any(m.dicts.instance_table.weight != before_i, axis=1)
    changed_c = np.any(m.dicts.category_table.weight != before_c, axis=1)
    assert changed_i.tolist() == [i == 2 for i in range(10)]
    assert changed_c.tolist() == [i == 1 for i in range(6)]


def test_normalizer_matches_batch_statistics():
    m = _model()
    rng = np.random.default_rng(8)
    x1, g1 = rng.normal(3.0, 2.0, (40, OBS)), rng.normal(-1.0, 0.1, (40, GOAL))
    x2, g2 = rng.normal(3.0, 2.0, (25, OBS)), rng.normal(-1.0, 0.1, (25, GOAL))
    m.update_normalizer(x1, g1)
    m.update_normalizer(x2, g2)
    data = np.concatenate([np.concatenate([x1, x2]), np.concatenate([g1, g2])], -1)
    np.testing.assert_allclose(m.norm_mean, data.mean(0), rtol=1e-5)
    np.testing.assert_allclose(m.norm_var, data.var(0), rtol=1e-4)
    assert m.norm_count[0] == 65
    xn, gn = m.normalize(x1, g1)
    assert abs(gn.mean()) < 0.3 and 0.5 < gn.std() < 1.5
    # statistics are checkpoint state, not trainable parameters
    assert "norm.mean" in m.state_arrays() and "norm.mean" not in m.named_arrays()


def test_fresh_model_passes_inputs_unnormalized():
    m = _model()
    x, g = np.ones((2, OBS)), np.ones((2, GOAL))
    xn, gn = m.normalize(x, g)
    assert np.array_equal(xn, x) and np.array_equal(gn, g)


def test_learning_rate_decays_linearly_to_zero():
    env = TaskEnv(T.TaskConfig("reach"), None, horizon=4)
    m = ActorCritic(PolicyConfig(use_env=False, hidden=16), env.obs_dim, env.goal_dim, env.action_dim, 1, 1,
                    np.random.default_rng(0))
    res = train_policy(env, m, PPOConfig(num_envs=4, minibatch=8, epochs=1, lr=1e-3), 4, 0)
    assert [r["lr"] for r in res.metrics] == pytest.approx([1e-3, 7.5e-4, 5e-4, 2.5e-4])


def test_reach_return_improves_over_first_50_updates():
    improved = 0
    for seed in range(3):
        env = TaskEnv(T.TaskConfig("reach"), None, horizon=50)
        m = ActorCritic(PolicyConfig(use_env=False), env.obs_dim, env.goal_dim, env.action_dim, 1, 1,
                        np.random.default_rng(seed))
        ret = [r["mean_return"] for r in train_policy(env, m, PPOConfig(), 50, seed).metrics]
        # single updates are noisy; compare the opening and closing ten
        improved += np.mean(ret[-10:]) > np.mean(ret[:10])
    assert improved >= 2
