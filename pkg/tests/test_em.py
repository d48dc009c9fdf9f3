import math

import numpy as np
import pytest

from tppcluster import em, nn
from tppcluster.gail import GailConfig
from tppcluster.metrics import ClusteringResult, purity
from tppcluster.sim import EventSequence, IntensitySpec, generate_dataset, simulate_many


def poisson_mix(rates, n, seed=0, T=50.0):
    return generate_dataset([IntensitySpec.hawkes(r, 0.0) for r in rates], n, T, seed=seed)


def tiny_config(**kw):
    base = dict(
        n_clusters=2,
        m=16,
        max_iter=2,
        classifier_epochs=2,
        classifier_batch=8,
        d=4,
        dist="exponential",
        warmup_rounds=3,
        gail=GailConfig(rounds=2, batch_size=4),
    )
    base.update(kw)
    return em.EmConfig(**base)


def test_zero_weight_classifier_is_uniform():
    clf = em.ClassifierModel(3, d=4, rng=0)
    for p in clf.parameters():
        p.data[...] = 0.0
    post = em.classify(clf, [EventSequence([1.0, 2.0], 5.0), EventSequence([], 5.0)])
    np.testing.assert_allclose(post, np.full((2, 3), 1 / 3), atol=1e-15)
    assert em.hard_labels(post).tolist() == [0, 0]


def test_posterior_rows_sum_to_one():
    clf = em.ClassifierModel(4, d=5, rng=1)
    post = em.classify(clf, simulate_many(IntensitySpec("sine"), 100.0, 30, seed=0), batch=7)
    assert post.shape == (30, 4)
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-9)
    assert em.classify(clf, []).shape == (0, 4)


@pytest.mark.parametrize("cell", ["tanh", "lstm"])
def test_classifier_gradient_matches_finite_differences(cell):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 9))
        clf = em.ClassifierModel(3, d=d, cell=cell, input_scale=0.5, rng=rng)
        seqs = simulate_many(IntensitySpec.hawkes(0.5, 0.0), 8.0, 3, seed=seed)
        labels = rng.integers(0, 3, size=3)
        w = rng.uniform(0.5, 2.0, size=3)
        err = nn.finite_difference_check(lambda: em.classifier_loss(clf, seqs, labels, w), clf.parameters())
        assert err < 1e-4, (cell, seed, err)


def test_balanced_weights():
    w = em.balanced_weights(np.array([0, 0, 0, 1]))
    np.testing.assert_allclose(w, [2 / 3, 2 / 3, 2 / 3, 2.0])
    assert w.mean() == pytest.approx(1.0)


def test_classifier_separates_toy_rates():
    train = poisson_mix([0.05, 0.5], 200, seed=0)
    test = poisson_mix([0.05, 0.5], 200, seed=1)
    clf = em.ClassifierModel(2, d=8, input_scale=0.2, rng=0)
    em.train_classifier(clf, train, np.array([s.label for s in train]), 20, 32, 3e-3, np.random.default_rng(0))
    pred = em.hard_labels(em.classify(clf, test))
    assert np.mean(pred == np.array([s.label for s in test])) > 0.95


def _frozen_state(rates, config, dataset):
    state = em.init_state(dataset, config, seed=0)
    for p, r in zip(state.policies, rates):
        p.set_constant_rate(r)
    return state


def test_e_step_on_separable_toy():
    data = poisson_mix([0.05, 0.5], 200, seed=2)
    cfg = em.EmConfig(n_clusters=2, d=8, dist="exponential", input_scale=0.2)
    state = _frozen_state([0.05, 0.5], cfg, data)
    state.iteration = 1
    labels, post, loss = em.e_step(state, data, cfg, seed=0, T=50.0)
    assert purity(ClusteringResult(labels, [s.label for s in data])) > 0.95
    assert math.isfinite(loss)


def test_e_step_degenerate_sizes_sample_one_policy(monkeypatch):
    data = poisson_mix([0.1, 0.3], 20, seed=3)
    cfg = tiny_config()
    state = _frozen_state([0.1, 0.3], cfg, data)
    state.labels[:] = 0
    seen = []

    def spy(model, seqs, labels, *args, **kw):
        seen.append(np.asarray(labels).copy())
        return 0.0

    monkeypatch.setattr(em, "train_classifier", spy)
    em.e_step(state, data, cfg, seed=0, T=50.0)
    assert seen[0].size == cfg.m and set(seen[0].tolist()) == {0}


def test_e_step_is_deterministic():
    data = poisson_mix([0.1, 0.3], 20, seed=4)
    cfg = tiny_config()
    out = []
    for _ in range(2):
        state = em.init_state(data, cfg, seed=5)
        state.iteration = 1
        out.append(em.e_step(state, data, cfg, seed=5, T=50.0))
    assert out[0][0].tolist() == out[1][0].tolist()
    assert out[0][1].tobytes() == out[1][1].tobytes()


def test_augment_examples():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=400)
    post = rng.dirichlet([1, 1], size=400)
    none = em.augment(labels, post, 0.0)
    for i in range(2):
        assert none[i].tolist() == np.flatnonzero(labels == i).tolist()
    sets = em.augment(labels, post, 0.1)
    for i in range(2):
        own = np.flatnonzero(labels == i)
        assert set(own) <= set(sets[i])
        extra = np.setdiff1d(sets[i], own)
        assert extra.size <= 40
        assert extra.size == math.floor(0.1 * (400 - own.size))
        # borrowed outsiders are the highest-posterior ones
        outside = np.setdiff1d(np.arange(400), own)
        rest = np.setdiff1d(outside, extra)
        assert post[extra, i].min() >= post[rest, i].max()


def test_augment_rescues_empty_cluster():
    labels = np.zeros(50, dtype=int)
    post = np.tile([0.9, 0.1], (50, 1))
    post[:5, 1] = 0.6
    sets = em.augment(labels, post, 0.0, floor=8)
    assert sets[0].size == 50
    assert sets[1].size == 8 and set(range(5)) <= set(sets[1])


def test_augmentation_schedule():
    cfg = em.EmConfig(aug_f0=0.2, aug_decay=0.5)
    assert [em.augmentation_fraction(cfg, k) for k in range(3)] == [0.2, 0.1, 0.05]


def test_config_validation():
    for bad in ({"n_clusters": 1}, {"m": 1}, {"aug_f0": 1.5}, {"lr_decay": 0.0}):
        with pytest.raises(ValueError):
            em.EmConfig(**bad)
    cfg = em.EmConfig(gail={"rounds": 7})
    assert cfg.gail.rounds == 7
    decayed = em.EmConfig(lr_decay=0.5).gail_for(3)
    assert decayed.policy_lr == pytest.approx(0.25e-3)


def test_m_step_zero_rounds_is_identity():
    data = poisson_mix([0.1, 0.3], 10, seed=5)
    cfg = tiny_config()
    state = em.init_state(data, cfg, seed=0)
    snap = [p.data.copy() for m in state.policies + state.discriminators for p in m.parameters()]
    keys = np.array([em.sequence_key(s) for s in data], dtype=np.uint64)
    em.m_step(state, data, state.partition(), GailConfig(rounds=0), 0, keys)
    after = [p.data for m in state.policies + state.discriminators for p in m.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(snap, after))


def test_m_step_parallel_matches_serial():
    data = poisson_mix([0.1, 0.3], 10, seed=6)
    cfg = tiny_config()
    keys = np.array([em.sequence_key(s) for s in data], dtype=np.uint64)
    out = []
    for workers in (1, 2):
        state = em.init_state(data, cfg, seed=1)
        em.m_step(state, data, state.partition(), GailConfig(rounds=3, batch_size=4), 1, keys, workers)
        out.append([p.data.tobytes() for m in state.policies + state.discriminators for p in m.parameters()])
    assert out[0] == out[1]


def test_sequence_key_depends_on_content_only():
    a = EventSequence([1.0, 2.0], 10.0, label=0)
    b = EventSequence([1.0, 2.0], 10.0, label=1)
    assert em.sequence_key(a) == em.sequence_key(b)
    assert em.sequence_key(a) != em.sequence_key(EventSequence([1.0, 2.5], 10.0))


def test_max_iter_zero_returns_warm_start():
    data = poisson_mix([0.1, 0.3], 10, seed=7)
    state, hist = em.rlpmm(data, tiny_config(max_iter=0), seed=0)
    assert len(hist) == 1 and hist[0].iteration == 0
    assert state.iteration == 0


def test_rlpmm_partition_valid_and_order_independent():
    data = poisson_mix([0.1, 0.3], 15, seed=8)
    cfg = tiny_config()
    records = []
    s1, h1 = em.rlpmm(data, cfg, seed=3, callback=lambda st, r: records.append(r))
    assert len(records) == len(h1)
    for r in h1:
        assert sum(r.sizes) == len(data)
    perm = np.random.default_rng(0).permutation(len(data))
    s2, h2 = em.rlpmm([data[i] for i in perm], cfg, seed=3)
    np.testing.assert_array_equal(s1.labels[perm], s2.labels)
    assert [(r.purity, r.rand_index, r.sizes) for r in h1] == [(r.purity, r.rand_index, r.sizes) for r in h2]
    for a, b in zip(h1, h2):
        assert a.loglik == pytest.approx(b.loglik, abs=1e-9)


def test_rlpmm_is_deterministic():
    data = poisson_mix([0.1, 0.3], 10, seed=9)
    runs = [em.rlpmm(data, tiny_config(), seed=4) for _ in range(2)]
    assert runs[0][0].labels.tolist() == runs[1][0].labels.tolist()
    assert [r.loglik for r in runs[0][1]] == [r.loglik for r in runs[1][1]]


def test_rlpmm_rejects_empty():
    with pytest.raises(ValueError):
        em.rlpmm([], tiny_config())
