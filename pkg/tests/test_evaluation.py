import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from causald.data import InteractionLog, prepare_sequences, random_groups
from causald.distill import DistillConfig, train_base
from causald.evaluation import (
    METRICS,
    EvaluationError,
    MetricsReport,
    auc_single,
    binary_auc,
    evaluate_ranking,
    group_table,
    groupwise_protocol,
    heterogeneity,
    heterogeneity_block,
    heterogeneity_report,
    instance_metrics,
    oracle_gap,
    pessimistic_rank,
    rank_metrics,
    score_eval_set,
    t_test_two_sided,
)
from causald.models import ModelConfig
from causald.synth import ScmConfig, generate

scores = st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30)


def pair_count_auc(pos, negs):
    wins = 0.0
    for n in negs:
        wins += 1.0 if pos > n else 0.5 if pos == n else 0.0
    return wins / len(negs)


# ---------------------------------------------------------------- auc / ranks


def test_auc_examples():
    assert auc_single(1.0, [0.1, 0.2]) == 1.0
    assert auc_single(0.0, [0.1, 0.2]) == 0.0
    assert auc_single(0.5, [0.4, 0.6, 0.6]) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(EvaluationError):
        auc_single(0.5, [])


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), scores)
def test_auc_matches_pair_counting(pos, negs):
    assert abs(auc_single(pos, negs) - pair_count_auc(pos, negs)) < 1e-6


grid = st.integers(-500, 500).map(lambda n: n / 100)


@settings(max_examples=60, deadline=None)
@given(grid, st.lists(grid, min_size=1, max_size=30))
def test_auc_monotone_invariant(pos, negs):
    # a 0.01 grid keeps distinct scores distinct after rounding
    f = lambda x: np.tanh(np.asarray(x) / 7.0) * 3 + 1  # noqa: E731
    assert auc_single(f(pos), f(negs)) == auc_single(pos, negs)


def test_rank_examples():
    assert rank_metrics(1.0, [0.1] * 100, 10) == (1.0, 1.0)
    r, n = rank_metrics(0.5, [0.9, 0.8] + [0.1] * 98, 5)
    assert r == 1.0 and n == pytest.approx(0.5, abs=1e-15)
    assert rank_metrics(0.5, [0.9] * 10 + [0.1] * 90, 10) == (0.0, 0.0)
    assert pessimistic_rank(0.5, [0.5, 0.1]) == 2
    with pytest.raises(EvaluationError):
        rank_metrics(0.5, [0.1], 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12))
def test_rank_hand(r, k):
    negs = [1.0] * (r - 1) + [-1.0] * 5
    rec, ndcg = rank_metrics(0.0, negs, k)
    assert rec == float(r <= k)
    assert abs(ndcg - ((1 / math.log2(r + 1)) if r <= k else 0.0)) < 1e-12
    assert ndcg <= rec


def test_instance_metrics_match_scalar():
    rng = np.random.default_rng(0)
    pos = rng.normal(size=40)
    neg = np.round(rng.normal(size=(40, 100)), 1)
    pos[:5] = neg[:5, 0]
    out = instance_metrics(pos, neg)
    for n in range(40):
        assert out["auc"][n] == auc_single(pos[n], neg[n])
        for k in (5, 10):
            rec, ndcg = rank_metrics(pos[n], neg[n], k)
            assert out[f"recall@{k}"][n] == rec and out[f"ndcg@{k}"][n] == ndcg


def test_binary_auc_matches_pairs():
    rng = np.random.default_rng(1)
    s = np.round(rng.normal(size=60), 1)
    y = rng.integers(0, 2, size=60)
    pos, neg = s[y == 1], s[y == 0]
    want = np.mean([pair_count_auc(p, neg) for p in pos])
    assert binary_auc(s, y) == pytest.approx(want, abs=1e-12)
    with pytest.raises(EvaluationError):
        binary_auc(s, np.ones(60))


# ---------------------------------------------------------------- heterogeneity


def test_heterogeneity_examples():
    assert heterogeneity([0.5, 0.5, 0.5], [0.1, 0.2, 0.3])[0] == 0.0
    s, _, _ = heterogeneity([0.7, 0.9], [0.7, 0.9])
    assert abs(s - math.sqrt(0.02)) < 1e-6
    assert abs(s - 0.141421) < 1e-6
    a = [0.0, 1.0]
    b = [0.0, 0.6]
    s, s_star, c = heterogeneity(a, b)
    assert c == s - s_star
    with pytest.raises(EvaluationError):
        heterogeneity([0.5], [0.5])
    with pytest.raises(EvaluationError):
        heterogeneity([0.5, 0.6], [0.5, 0.6, 0.7])


def test_heterogeneity_report_examples():
    assert heterogeneity_report({m: 0.1 for m in METRICS}) == pytest.approx(0.1, abs=1e-15)
    assert heterogeneity_report(dict(zip(METRICS, [0.1, 0.2, 0.3, 0.4, 0.5]))) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(EvaluationError):
        heterogeneity_report({"auc": 0.1})


def test_heterogeneity_block_recomputation():
    rng = np.random.default_rng(2)
    uni = {m: rng.uniform(size=5) for m in METRICS}
    gw = {m: rng.uniform(size=5) for m in METRICS}
    block = heterogeneity_block(uni, gw)
    hand = []
    for m in METRICS:
        mu = sum(uni[m]) / 5
        s = math.sqrt(sum((x - mu) ** 2 for x in uni[m]) / 4)
        mu_s = sum(gw[m]) / 5
        s_star = math.sqrt(sum((x - mu_s) ** 2 for x in gw[m]) / 4)
        hand.append(s - s_star)
        pm = block["per_metric"][m]
        assert pm["S_h"] >= 0 and pm["S_h_star"] >= 0
        assert pm["S_h_circ"] == pm["S_h"] - pm["S_h_star"]
    assert abs(block["heterogeneity"] - sum(hand) / 5) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.floats(0.01, 100))
def test_heterogeneity_scale_equivariant(xs, c):
    s = heterogeneity(xs, xs)[0]
    sc = heterogeneity([c * x for x in xs], xs)[0]
    assert abs(sc - c * s) <= 1e-9 * max(1.0, c * s)


# ---------------------------------------------------------------- significance


def test_welch_matches_reference():
    a, b = [0.1, 0.2, 0.3], [0.2, 0.3, 0.4]
    ref = stats.ttest_ind(a, b, equal_var=False).pvalue
    assert abs(t_test_two_sided(a, b) - ref) < 1e-6


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(-10_000, 10_000).map(lambda n: n / 1000), min_size=2, max_size=10, unique=True),
    st.lists(st.integers(-10_000, 10_000).map(lambda n: n / 1000), min_size=2, max_size=10, unique=True),
)
def test_welch_matches_reference_random(a, b):
    ref = stats.ttest_ind(a, b, equal_var=False).pvalue
    assert abs(t_test_two_sided(a, b) - ref) < 1e-6


def test_welch_examples():
    assert t_test_two_sided([0.1, 0.2, 0.4], [0.1, 0.2, 0.4]) == 1.0
    jitter = np.array([0.0, 1e-9, -1e-9])
    assert t_test_two_sided(np.zeros(3) + jitter, np.ones(3) + jitter) < 1e-6
    with pytest.raises(EvaluationError):
        t_test_two_sided([1.0], [1.0, 2.0])
    with pytest.raises(EvaluationError):
        t_test_two_sided([1.0, 1.0], [2.0, 2.0])


def test_oracle_gap():
    assert oracle_gap(np.array([0.2, 0.6]), np.array([0.3, 0.3])) == pytest.approx(0.2, abs=1e-15)


# ---------------------------------------------------------------- protocol


def sequence_data(n_users=600, seed=5):
    ds = generate(ScmConfig(n_users=n_users, n_items=200, latent_dim=2, history_length=20, impressions_per_user=1, seed=seed))
    lengths = ds.histories.lengths()
    users = np.repeat(np.arange(len(lengths)), lengths)
    ts = np.concatenate([np.arange(n) for n in lengths])
    return prepare_sequences(InteractionLog.from_raw(users, ds.histories.flat, ts), seed=1)


@pytest.fixture(scope="module")
def seq_setup():
    data = sequence_data()
    mc = ModelConfig(arch="din", n_users=data.n_users, n_items=data.n_items, max_history=20)
    cfg = DistillConfig(batch_size=128, epochs=3, learning_rate=0.05, seed=3)
    return data, mc, cfg


def test_random_split_control(seq_setup):
    data, mc, cfg = seq_setup
    asg = random_groups(data.n_users, 2, 7)
    model, _ = train_base(data, mc, cfg)
    pos, neg = score_eval_set(model, data.evalset)
    unified = group_table(instance_metrics(pos, neg), asg.group[data.evalset.users], 2)
    grouped = groupwise_protocol(data, asg, mc, cfg)
    assert np.abs(unified["auc"] - grouped["auc"]).mean() < 0.02


def test_groupwise_disjoint_and_single_group(seq_setup, monkeypatch):
    import causald.distill as distill

    data, mc, cfg = seq_setup
    small = DistillConfig(**{**cfg.__dict__, "epochs": 1})
    seen = []
    real = distill.train_base

    def spy(sub, *a, **kw):
        seen.append(set(np.unique(sub.positives.users).tolist()))
        return real(sub, *a, **kw)

    monkeypatch.setattr(distill, "train_base", spy)
    asg = random_groups(data.n_users, 3, 1)
    groupwise_protocol(data, asg, mc, small)
    for g, users in enumerate(seen):
        assert users <= set(asg.members(g).tolist())
    for a, b in itertools.combinations(seen, 2):
        assert not a & b


def test_groupwise_single_group_equals_subset_training(seq_setup):
    from causald.seeds import derive_seed

    data, mc, cfg = seq_setup
    small = DistillConfig(**{**cfg.__dict__, "epochs": 1})
    asg = random_groups(data.n_users, 1, 1)
    table = groupwise_protocol(data, asg, mc, small)
    model, _ = train_base(data.restrict(asg.members(0)), mc, small, derive_seed(small.seed, "groupwise", 0))
    pos, neg = score_eval_set(model, data.evalset)
    assert table["auc"][0] == instance_metrics(pos, neg)["auc"].mean()


def test_groupwise_empty_group_named(seq_setup):
    data, mc, cfg = seq_setup
    asg = random_groups(data.n_users, 2, 1)
    asg.group[:] = 0
    with pytest.raises(EvaluationError, match="group 1"):
        groupwise_protocol(data, asg, mc, cfg)


def test_evaluation_is_pure(seq_setup, tmp_path):
    data, mc, cfg = seq_setup
    model, _ = train_base(data, mc, DistillConfig(**{**cfg.__dict__, "epochs": 1}))
    asg = random_groups(data.n_users, 2, 1)
    r1, _ = evaluate_ranking(model, data.evalset, "base", 0, asg)
    r2, _ = evaluate_ranking(model, data.evalset, "base", 0, asg)
    a = r1.write(tmp_path / "a")
    b = r2.write(tmp_path / "b")
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    for v in r1.metrics.values():
        assert 0.0 <= v <= 1.0
    back = MetricsReport.from_dict(json.loads(a[0].read_text()))
    assert back.to_dict() == r1.to_dict()
    assert a[1].read_text().splitlines()[0] == "model,metric,group,value"
