import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causald import autodiff as ad
from causald.artifacts import load_model, save_model
from causald.models import (
    EncoderPredictor,
    ModelConfig,
    TrainBatch,
    din_encode,
    fm_pairwise,
    predict,
    rec_loss,
)


def model(arch="din", seed=0, **kw):
    cfg = ModelConfig(arch=arch, n_users=7, n_items=20, max_history=6, **kw)
    return EncoderPredictor.create(cfg, np.random.default_rng(seed))


def batch(seed=0, n=6, L=6):
    rng = np.random.default_rng(seed)
    lens = rng.integers(1, L + 1, size=n)
    mask = np.arange(L)[None, :] < lens[:, None]
    hist = np.where(mask, rng.integers(0, 20, size=(n, L)), 0)
    return TrainBatch(
        rng.integers(0, 7, size=n), hist, mask, rng.integers(0, 20, size=n), rng.integers(0, 2, size=n).astype(float)
    )


def test_single_item_history_is_its_embedding():
    m = model()
    out = din_encode(m, np.array([[4]]), np.array([[True]]), np.array([9]))
    np.testing.assert_array_equal(out.data[0], m.params["item_emb"].data[4])


def test_identical_items_equal_weights():
    m = model()
    out = din_encode(m, np.array([[4, 4]]), np.ones((1, 2), bool), np.array([9]))
    np.testing.assert_allclose(out.data[0], m.params["item_emb"].data[4], rtol=0, atol=1e-15)


def test_empty_history_gives_zero_mediator():
    m = model()
    out = din_encode(m, np.zeros((1, 3), np.int64), np.zeros((1, 3), bool), np.array([2]))
    np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("arch", ["din", "deepfm"])
def test_padding_does_not_change_mediator(arch):
    m = model(arch)
    b = batch(1)
    short = m.encode(b).data
    pad = 4
    wide = TrainBatch(
        b.users,
        np.concatenate([b.hist, np.full((len(b), pad), 13)], axis=1),
        np.concatenate([b.mask, np.zeros((len(b), pad), bool)], axis=1),
        b.targets,
        b.labels,
    )
    assert m.encode(wide).data.tobytes() == short.tobytes()


def test_deepfm_mediator_dimension():
    m = model("deepfm", embedding_dim=5)
    assert m.encode(batch()).shape == (6, 10)


def test_fm_orthogonal_is_zero():
    e1 = ad.tensor([[1.0, 0.0]])
    e2 = ad.tensor([[0.0, 3.0]])
    assert fm_pairwise([e1, e2]).data[0] == 0.0


def test_fm_matches_pair_loop():
    rng = np.random.default_rng(2)
    fields = [rng.normal(size=(5, 4)) for _ in range(3)]
    got = fm_pairwise([ad.tensor(f) for f in fields]).data
    want = np.array([sum(fields[i][n] @ fields[j][n] for i, j in itertools.combinations(range(3), 2)) for n in range(5)])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_zero_predictor_gives_half():
    m = model()
    for k, t in m.params.items():
        if k.startswith("pred."):
            t.data[...] = 0.0
    m_hat = ad.tensor(np.random.default_rng(0).normal(size=(3, 8)))
    np.testing.assert_array_equal(predict(m, m_hat, np.array([0, 1, 2])).data, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.integers(0, 19))
def test_prediction_strictly_inside_unit_interval(scale, target):
    m = model()
    m_hat = ad.tensor(np.full((1, 8), scale))
    p = predict(m, m_hat, np.array([target])).data[0]
    assert 0.0 < p < 1.0


def test_rec_loss_examples():
    assert rec_loss(ad.tensor([0.5, 0.5]), np.array([1, 0]), l2=0).item() == pytest.approx(np.log(2), abs=1e-15)
    assert rec_loss(ad.tensor([1.0]), np.array([1]), l2=0).item() == pytest.approx(0.0, abs=1e-11)
    assert rec_loss(ad.tensor([0.8]), np.array([0]), l2=0).item() == pytest.approx(-np.log(0.2), abs=1e-12)


def test_rec_loss_adds_embedding_penalty():
    m = model("deepfm")
    base = rec_loss(ad.tensor([0.5]), np.array([1]), l2=0).item()
    pen = sum((t.data**2).sum() for t in m.embeddings())
    assert rec_loss(ad.tensor([0.5]), np.array([1]), m, l2=1e-3).item() == pytest.approx(base + 1e-3 * pen, rel=1e-12)


@pytest.mark.parametrize("arch", ["din", "deepfm"])
def test_batch_order_independent(arch):
    m = model(arch)
    b = batch(3)
    full = m.forward(b)[1].data
    for n in range(len(b)):
        one = TrainBatch(b.users[n : n + 1], b.hist[n : n + 1], b.mask[n : n + 1], b.targets[n : n + 1], b.labels[n : n + 1])
        assert abs(m.forward(one)[1].data[0] - full[n]) <= 1e-12


@pytest.mark.parametrize("arch", ["din", "deepfm"])
def test_full_model_grad_check(arch):
    m = model(arch, seed=5)
    b = batch(4)

    def loss():
        return rec_loss(m.forward(b)[1], b.labels, m, l2=1e-3)

    # a 1e-4 step can straddle a ReLU kink; 1e-6 keeps both sides on one linear piece
    rng = np.random.default_rng(0)
    checked = 0
    for name, t in m.params.items():
        n = min(t.data.size, 20)
        assert ad.grad_check(loss, t, epsilon=1e-6, max_entries=n, rng=rng) < 1e-4, name
        checked += n
    assert checked >= 100


def test_checkpoint_roundtrip(tmp_path):
    m = model("deepfm", seed=3)
    save_model(tmp_path / "m", m)
    back, header = load_model(tmp_path / "m")
    assert header["model"]["arch"] == "deepfm"
    for k, v in m.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()


def test_frozen_copy_has_no_gradients():
    m = model()
    f = m.frozen()
    assert not any(t.requires_grad for t in f.parameters())
    f.params["item_emb"].data[0, 0] += 1.0
    assert m.params["item_emb"].data[0, 0] != f.params["item_emb"].data[0, 0]


def test_mediator_dimension_checked():
    m = model()
    with pytest.raises(ad.ShapeError):
        predict(m, ad.tensor(np.zeros((1, 3))), np.array([0]))
