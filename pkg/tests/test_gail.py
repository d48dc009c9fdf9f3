import json
import math

import numpy as np
import pytest

from tppcluster import gail, nn
from tppcluster import policy as pol
from tppcluster.metrics import empirical_intensity
from tppcluster.sim import EventSequence, IntensitySpec, simulate_many


def poisson(rate, n, T=10.0, seed=0):
    return simulate_many(IntensitySpec.hawkes(rate, 0.0), T, n, seed=seed)


def frozen_policy(rate, d=4):
    p = pol.PolicyModel(d=d, dist="exponential", rng=0)
    p.set_constant_rate(rate)
    return p


def test_zero_head_scores_one_half():
    disc = gail.DiscriminatorModel(d=5, rng=1)
    disc.zero_head()
    seq = EventSequence([0.5, 3.0, 3.1], 10.0)
    np.testing.assert_array_equal(gail.discriminate(disc, seq, terminal=True), [0.5] * 4)
    assert gail.discriminate(disc, EventSequence([], 10.0)).size == 0


def test_scores_in_open_unit_interval():
    rng = np.random.default_rng(0)
    for seed in range(10):
        disc = gail.DiscriminatorModel(d=6, rng=seed)
        for p in disc.parameters():
            p.data[...] += rng.normal(size=p.data.shape) * 0.5
        s = gail.discriminate(disc, poisson(1.0, 1, seed=seed)[0], terminal=True)
        assert np.all((s > 0) & (s < 1))


@pytest.mark.parametrize("cell", ["tanh", "lstm"])
def test_disc_objective_gradient_matches_finite_differences(cell):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 9))
        disc = gail.DiscriminatorModel(d=d, cell=cell, input_scale=0.5, rng=rng)
        a = poisson(0.5, 3, seed=seed)
        b = poisson(0.3, 2, seed=100 + seed)
        err = nn.finite_difference_check(lambda: gail.disc_objective(disc, a, b), disc.parameters())
        assert err < 1e-4, (cell, seed, err)


def test_surrogate_gradient_matches_finite_differences():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 9))
        model = pol.PolicyModel(d=d, dist=("rayleigh", "exponential")[seed % 2], input_scale=0.5, rng=rng)
        batch = pol.rollout_batch(model, 10.0, 3, rng)
        adv = rng.normal(size=batch.values.shape) * batch.step_mask

        def loss():
            lp = pol.trajectory_log_probs(model, batch.values, batch.event_mask, batch.term_mask)
            return nn.reduce_sum(lp * nn.Tensor(adv))

        assert nn.finite_difference_check(loss, model.parameters()) < 1e-4


def test_irl_step_zero_learning_rate():
    disc = gail.DiscriminatorModel(d=4, rng=0)
    before = [p.data.copy() for p in disc.parameters()]
    opt = nn.Adam(disc.parameters(), nn.OptimizerConfig(lr=0.0))
    loss = gail.irl_step(disc, opt, poisson(2.0, 4), poisson(0.1, 4, seed=1))
    assert math.isfinite(loss)
    for p, b in zip(disc.parameters(), before):
        np.testing.assert_array_equal(p.data, b)


def test_irl_step_rejects_empty():
    disc = gail.DiscriminatorModel(d=4, rng=0)
    opt = nn.Adam(disc.parameters())
    with pytest.raises(ValueError):
        gail.irl_step(disc, opt, [], poisson(1.0, 2))


def test_irl_separates_easy_toy():
    policy_data = poisson(0.1, 400, seed=1)
    expert_data = poisson(2.0, 400, seed=2)
    disc = gail.DiscriminatorModel(d=8, input_scale=0.5, rng=0)
    opt = nn.Adam(disc.parameters(), nn.OptimizerConfig(lr=1e-2))
    rng = np.random.default_rng(3)
    for _ in range(500):
        i, j = rng.integers(0, 400, 32), rng.integers(0, 400, 32)
        gail.irl_step(disc, opt, [policy_data[k] for k in i], [expert_data[k] for k in j])
    # scored over every padded step; a short first gap alone is ambiguous between the two rates
    width = gail._width(policy_data + expert_data)
    assert gail.mean_scores(disc, policy_data[:200], width, absorbing=True) > 0.9
    assert gail.mean_scores(disc, expert_data[:200], width, absorbing=True) < 0.1


def test_irl_matched_streams_stay_near_half():
    a, b = poisson(0.5, 2000, seed=4), poisson(0.5, 2000, seed=5)
    disc = gail.DiscriminatorModel(d=8, input_scale=0.5, rng=1)
    opt = nn.Adam(disc.parameters(), nn.OptimizerConfig(lr=1e-3))
    rng = np.random.default_rng(6)
    for _ in range(300):
        i, j = rng.integers(0, 2000, 32), rng.integers(0, 2000, 32)
        gail.irl_step(disc, opt, [a[k] for k in i], [b[k] for k in j])
    for s in (a, b):
        assert abs(gail.mean_scores(disc, s[:500]) - 0.5) < 0.05


def test_reward_to_go_examples():
    np.testing.assert_array_equal(gail.reward_to_go([-1.0, -1.0, -1.0], 1.0), [-3.0, -2.0, -1.0])
    np.testing.assert_array_equal(gail.reward_to_go([-0.7], 0.99), [-0.7])
    c = np.array([[0.3, -1.2, 4.0]])
    np.testing.assert_array_equal(gail.reward_to_go(c, 0.0), c)
    np.testing.assert_allclose(gail.reward_to_go([1.0, 1.0], 0.5, mask=[True, False]), [1.0, 0.0])


def test_step_costs():
    z = np.array([-30.0, 0.0, 2.0])
    np.testing.assert_allclose(gail.step_costs(z, "log_d"), np.log(1 / (1 + np.exp(-z))))
    np.testing.assert_array_equal(gail.step_costs(z, "logit"), z)


def test_position_baseline():
    q = np.array([[1.0, 2.0, 9.0], [3.0, 9.0, 9.0]])
    act = np.array([[True, True, False], [True, False, False]])
    np.testing.assert_array_equal(gail.position_baseline(q, act), [2.0, 2.0, 0.0])


def _sgd(params):
    return nn.Adam(params, nn.OptimizerConfig(lr=1.0, mode="sgd", clip_norm=None))


def test_frozen_half_discriminator_gives_zero_gradient():
    policy = pol.PolicyModel(d=6, dist="exponential", input_scale=0.5, rng=2)
    disc = gail.DiscriminatorModel(d=6, rng=3)
    disc.zero_head()
    before = [p.data.copy() for p in policy.parameters()]
    opt = _sgd(policy.parameters())
    cfg = gail.GailConfig(entropy_coef=0.0, batch_size=64)
    gail.rl_step(policy, disc, opt, cfg, np.random.default_rng(0), 20.0)
    moved = math.sqrt(sum(((p.data - b) ** 2).sum() for p, b in zip(policy.parameters(), before)))
    assert moved < 0.05


def test_rl_step_zero_learning_rate_and_errors():
    policy = pol.PolicyModel(d=4, rng=0)
    disc = gail.DiscriminatorModel(d=4, rng=1)
    before = [p.data.copy() for p in policy.parameters()]
    opt = nn.Adam(policy.parameters(), nn.OptimizerConfig(lr=0.0))
    gail.rl_step(policy, disc, opt, gail.GailConfig(batch_size=8), np.random.default_rng(0), 10.0)
    for p, b in zip(policy.parameters(), before):
        np.testing.assert_array_equal(p.data, b)
    with pytest.raises(ValueError):
        gail.rl_step(policy, disc, opt, gail.GailConfig())


def test_policy_gradient_estimator_matches_analytic_expectation():
    # cost c * u on every event step, zero elsewhere: the trajectory cost is
    # c * s * t_n, with E[t_n] = T - (1 - exp(-theta T)) / theta for a Poisson policy
    theta, T, c, s = 0.2, 20.0, 1.0, 1.0
    disc = gail.DiscriminatorModel(d=4, input_scale=s, rng=0)
    disc.zero_head()
    disc.action_W.data[0, 0] = c
    cfg = gail.GailConfig(entropy_coef=0.0, gamma=1.0, batch_size=250, cost="logit")

    def expected(b):
        th = math.log1p(math.exp(b))
        return c * s * (T - (1 - math.exp(-th * T)) / th)

    policy = frozen_policy(theta)
    b0 = policy.head.b.data[0]
    h = 1e-5
    fd = (expected(b0 + h) - expected(b0 - h)) / (2 * h)

    rng = np.random.default_rng(11)
    grads = []
    for _ in range(40):  # 10^4 rollouts
        policy.set_constant_rate(theta)
        gail.rl_step(policy, disc, _sgd(policy.parameters()), cfg, rng, T)
        grads.append(b0 - policy.head.b.data[0])
    assert abs(np.mean(grads) - fd) < 0.1 * abs(fd)


def test_entropy_gradient_estimator():
    # single exponential step: H = 1 - ln theta, dH/dtheta = -1/theta
    theta = 0.7
    a = np.random.default_rng(0).exponential(1 / theta, size=100_000)
    th = nn.Parameter(np.array(theta))
    neg_lp = -pol.log_density("exponential", theta, a)
    weight = neg_lp - neg_lp.mean()
    surrogate = nn.reduce_mean(pol._log_density("exponential", th, a) * nn.Tensor(weight))
    nn.backward(surrogate)
    assert th.grad.item() == pytest.approx(-1 / theta, rel=0.05)


def test_zero_rounds_leave_models_unchanged():
    policy, disc = pol.PolicyModel(d=4, rng=0), gail.DiscriminatorModel(d=4, rng=1)
    snap = [p.data.copy() for p in policy.parameters() + disc.parameters()]
    hist = gail.gail_tpp(policy, disc, poisson(1.0, 5), gail.GailConfig(rounds=0), rng=0)
    assert hist == []
    for p, b in zip(policy.parameters() + disc.parameters(), snap):
        np.testing.assert_array_equal(p.data, b)


def test_gail_rejects_empty_cluster():
    with pytest.raises(ValueError):
        gail.gail_tpp(pol.PolicyModel(d=2), gail.DiscriminatorModel(d=2), [], gail.GailConfig(rounds=1), 0)


def test_gail_is_deterministic_and_logs(tmp_path):
    data = poisson(1.0, 20)

    def run(log):
        policy, disc = pol.PolicyModel(d=4, rng=0), gail.DiscriminatorModel(d=4, rng=1)
        hist = gail.gail_tpp(policy, disc, data, gail.GailConfig(rounds=5, batch_size=4), rng=7, log_path=log)
        return hist, policy, disc

    h1, p1, d1 = run(tmp_path / "log.jsonl")
    h2, p2, d2 = run(None)
    assert h1 == h2
    for a, b in zip(p1.parameters() + d1.parameters(), p2.parameters() + d2.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 5
    assert set(json.loads(lines[0])) == {"round", "cluster", "disc_loss", "surrogate_loss", "mean_len"}


def test_trajectories_end_with_terminal_step():
    policy = frozen_policy(0.5)
    batch = pol.rollout_batch(policy, 10.0, 6, np.random.default_rng(0))
    trajs = gail.trajectories(batch, gail.DiscriminatorModel(d=4, rng=0), gail.GailConfig())
    for t, s in zip(trajs, batch.sequences):
        assert t.actions.size == len(s) + 1
        assert t.actions[-1] == pytest.approx(10.0 - (s.timestamps[-1] if len(s) else 0.0))
        assert np.all((t.scores > 0) & (t.scores < 1))


def test_disc_checkpoint_round_trip(tmp_path):
    disc = gail.DiscriminatorModel(d=3, cell="tanh", input_scale=0.2, rng=5)
    nn.save_checkpoint(disc, tmp_path / "d.json", gail.disc_header(disc))
    back = gail.disc_from_checkpoint(nn.read_checkpoint(tmp_path / "d.json"))
    assert back.config() == disc.config()
    for a, b in zip(disc.parameters(), back.parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_config_validation():
    for bad in ({"batch_size": 0}, {"gamma": 1.5}, {"entropy_coef": -1.0}, {"cost": "hinge"}):
        with pytest.raises(ValueError):
            gail.GailConfig(**bad)


def test_imitates_constant_process():
    expert = simulate_many(IntensitySpec("constant"), 100.0, 200, seed=0)
    policy = pol.PolicyModel(d=16, dist="exponential", input_scale=0.1, rng=1)
    disc = gail.DiscriminatorModel(d=16, input_scale=0.1, rng=2)
    gail.gail_tpp(policy, disc, expert, gail.GailConfig(rounds=3000), rng=3)
    gen = pol.rollout_batch(policy, 100.0, 400, np.random.default_rng(4)).sequences
    gap = np.abs(empirical_intensity(expert, 5.0).rates - empirical_intensity(gen, 5.0).rates)
    assert gap.mean() < 0.05
