import math

import numpy as np
import pytest

from causald.synth import ScmConfig, generate, interventional_oracle, mixture


def small(**kw):
    base = dict(n_users=300, n_items=80, latent_dim=2, history_length=8, impressions_per_user=10, seed=4)
    base.update(kw)
    return ScmConfig(**base)


def test_degenerate_configs_rejected():
    with pytest.raises(ValueError):
        generate(small(n_users=0))
    with pytest.raises(ValueError):
        generate(small(confounder_prior=1.5))
    with pytest.raises(ValueError):
        generate(small(confounder_strength=np.inf))


def test_regeneration_bit_identical():
    a = generate(small())
    b = generate(small())
    for k, v in a.truth_arrays().items():
        assert v.tobytes() == b.truth_arrays()[k].tobytes(), k


def test_labels_follow_stored_probabilities():
    ds = generate(small(n_users=2000))
    actual = np.where(ds.u[ds.imp_user] == 1, ds.imp_prob1, ds.imp_prob0)
    n = len(actual)
    se = np.sqrt(np.sum(actual * (1 - actual))) / n
    assert abs(ds.imp_label.mean() - actual.mean()) < 4 * se


def test_zero_strength_cohorts_click_alike():
    ds = generate(small(n_users=4000, confounder_strength=0.0))
    np.testing.assert_array_equal(ds.imp_prob0, ds.imp_prob1)
    y = ds.imp_label
    c = ds.u[ds.imp_user]
    p0, p1 = y[c == 0].mean(), y[c == 1].mean()
    se = math.sqrt(p0 * (1 - p0) / (c == 0).sum() + p1 * (1 - p1) / (c == 1).sum())
    assert abs(p0 - p1) < 3 * se


def test_full_prior_makes_everyone_confounded():
    ds = generate(small(confounder_prior=1.0))
    assert ds.u.all()
    for user in range(5):
        item = int(ds.imp_item[user * 10])
        obs = ds.observational(user, item)
        orc = interventional_oracle(ds, ds.histories.sequence(user), item)
        assert obs == pytest.approx(orc, abs=1e-15)


def test_confounded_histories_are_more_popular():
    ds = generate(small(n_users=10_000, n_items=200, confounder_strength=2.0, confounder_prior=0.5, impressions_per_user=1))
    lengths = ds.histories.lengths()
    mean_pop = np.add.reduceat(ds.popularity[ds.histories.flat], ds.histories.offsets[:-1]) / lengths
    assert mean_pop[ds.u == 1].mean() > mean_pop[ds.u == 0].mean()


def test_marginalisation_example():
    assert mixture(0.2, 0.6, 0.5) == pytest.approx(0.4, abs=1e-15)


def test_oracle_is_prior_mixture():
    ds = generate(small())
    hist = ds.histories.sequence(3)
    item = 7
    mask = np.ones((1, len(hist)), bool)
    p0 = ds.click_probability(hist[None], mask, np.array([item]), 0)[0]
    p1 = ds.click_probability(hist[None], mask, np.array([item]), 1)[0]
    assert interventional_oracle(ds, hist, item) == pytest.approx(0.5 * p0 + 0.5 * p1, abs=1e-15)


def test_zero_strength_oracle_equals_observational():
    ds = generate(small(confounder_strength=0.0))
    for user in range(5):
        item = int(ds.imp_item[user * 10])
        assert ds.observational(user, item) == pytest.approx(
            interventional_oracle(ds, ds.histories.sequence(user), item), abs=1e-15
        )


def test_posterior_shift_difference():
    ds = generate(small())
    user, item = 0, int(ds.imp_item[0])
    hist = ds.histories.sequence(user)
    mask = np.ones((1, len(hist)), bool)
    p0 = ds.click_probability(hist[None], mask, np.array([item]), 0)[0]
    p1 = ds.click_probability(hist[None], mask, np.array([item]), 1)[0]
    obs = ds.observational(user, item, posterior=0.9)
    orc = interventional_oracle(ds, hist, item)
    assert obs - orc == pytest.approx(0.4 * (p1 - p0), abs=1e-14)


def test_oracle_ignores_sampled_confounders():
    ds = generate(small())
    hist = ds.histories.sequence(1)
    before = interventional_oracle(ds, hist, 5)
    ds.u[:] = 1
    assert interventional_oracle(ds, hist, 5) == before


def _brute_posterior(ds, user):
    cfg = ds.config
    hist = ds.histories.sequence(user)
    lik = []
    for u in (0, 1):
        logits = cfg.interest_scale * ds.item_latent @ ds.user_latent[user] + cfg.confounder_strength * u * ds.popularity
        w = np.exp(logits - logits.max())
        remaining = list(range(cfg.n_items))
        log_l = 0.0
        for h in hist:
            log_l += math.log(w[h] / sum(w[i] for i in remaining))
            remaining.remove(h)
        lik.append(log_l)
    p = cfg.confounder_prior
    return p * math.exp(lik[1]) / (p * math.exp(lik[1]) + (1 - p) * math.exp(lik[0]))


def test_posterior_matches_sequential_likelihood():
    ds = generate(small(n_items=40))
    for user in range(4):
        assert ds.history_posterior(user) == pytest.approx(_brute_posterior(ds, user), abs=1e-10)


def test_observational_differs_when_confounded():
    ds = generate(small())
    diffs = []
    for user in range(10):
        item = int(ds.imp_item[user * 10])
        diffs.append(abs(ds.observational(user, item) - interventional_oracle(ds, ds.histories.sequence(user), item)))
    assert max(diffs) > 1e-3


def test_test_split_fraction():
    ds = generate(small())
    assert ds.imp_test.reshape(300, 10).sum(axis=1).tolist() == [round(0.25 * 10)] * 300
    train = ds.prepared()
    assert len(train.positives) == len(ds.imp_user) - ds.imp_test.sum()


def test_impressions_exclude_history_items():
    ds = generate(small())
    for k in range(0, len(ds.imp_user), 97):
        assert ds.imp_item[k] not in ds.histories.sequence(ds.imp_user[k])
