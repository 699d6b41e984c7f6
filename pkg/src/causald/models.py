"""Encoder-predictor recommenders: DIN-lite and DeepFM-lite.

The encoder output is the mediator feature consumed by distillation; the
predictor maps ``[mediator, target embedding]`` to a click probability.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MAX_HISTORY, TrainPairs


@dataclass
class ModelConfig:
    arch: str = "din"
    n_users: int = 0
    n_items: int = 0
    embedding_dim: int = 8
    predictor_hidden: tuple[int, ...] = (32, 16)
    attention_hidden: tuple[int, ...] = (16,)
    max_history: int = MAX_HISTORY

    def __post_init__(self):
        if self.arch not in ("din", "deepfm"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.predictor_hidden = tuple(self.predictor_hidden)
        self.attention_hidden = tuple(self.attention_hidden)

    @property
    def mediator_dim(self) -> int:
        return self.embedding_dim if self.arch == "din" else 2 * self.embedding_dim


@dataclass
class TrainBatch:
    users: np.ndarray
    hist: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.targets)


def make_batch(pairs: TrainPairs, idx: np.ndarray | None = None, max_history: int = MAX_HISTORY) -> TrainBatch:
    p = pairs if idx is None else pairs.take(idx)
    hist, mask = p.store.histories(p.users, p.ends, max_history)
    return TrainBatch(p.users, hist, mask, p.targets, p.labels, p.weights)


def _mlp_params(prefix: str, sizes: list[int], rng) -> dict[str, Tensor]:
    out = {}
    for n, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        out[f"{prefix}.w{n}"] = ad.parameter((a, b), rng, name=f"{prefix}.w{n}")
        out[f"{prefix}.b{n}"] = ad.zeros_parameter((b,), name=f"{prefix}.b{n}")
    return out


def mlp(params: dict[str, Tensor], prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """Dense stack, ReLU between layers, linear output."""
    for n in range(n_layers):
        x = ad.add(ad.matmul(x, params[f"{prefix}.w{n}"]), params[f"{prefix}.b{n}"])
        if n < n_layers - 1:
            x = ad.relu(x)
    return x


@dataclass
class EncoderPredictor:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "EncoderPredictor":
        d = config.embedding_dim
        params = {"item_emb": ad.parameter((config.n_items, d), rng, name="item_emb")}
        if config.arch == "din":
            params.update(_mlp_params("att", [3 * d, *config.attention_hidden, 1], rng))
        else:
            params["user_emb"] = ad.parameter((config.n_users, d), rng, name="user_emb")
        params.update(_mlp_params("pred", [config.mediator_dim + d, *config.predictor_hidden, 1], rng))
        return cls(config, params)

    @property
    def arch(self) -> str:
        return self.config.arch

    @property
    def mediator_dim(self) -> int:
        return self.config.mediator_dim

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def embeddings(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.endswith("_emb")]

    def encode(self, batch: TrainBatch) -> Tensor:
        if self.arch == "din":
            return din_encode(self, batch.hist, batch.mask, batch.targets)
        return deepfm_encode(self, batch.users, batch.hist, batch.mask, batch.targets)

    def forward(self, batch: TrainBatch) -> tuple[Tensor, Tensor]:
        m = self.encode(batch)
        return m, predict(self, m, batch.targets)

    def frozen(self) -> "EncoderPredictor":
        """Deep copy with gradients disabled."""
        params = {k: Tensor(v.data.copy(), requires_grad=False, name=k) for k, v in self.params.items()}
        return EncoderPredictor(copy.deepcopy(self.config), params)

    def copy(self) -> "EncoderPredictor":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return EncoderPredictor(copy.deepcopy(self.config), params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def header(self) -> dict:
        return asdict(self.config)

    @classmethod
    def from_header(cls, header: dict, state: dict[str, np.ndarray]) -> "EncoderPredictor":
        model = cls.create(ModelConfig(**header), np.random.default_rng(0))
        model.load_state_dict(state)
        return model


def din_encode(model: EncoderPredictor, hist: np.ndarray, mask: np.ndarray, targets: np.ndarray) -> Tensor:
    """Target-aware attention pooling of history embeddings.

    Attention logits come from a small feed-forward unit on ``[h, t, h*t]``;
    padded positions are excluded from the softmax. An empty history gives
    the zero vector.
    """
    p = model.params
    d = model.config.embedding_dim
    L = hist.shape[1]
    h = ad.gather(p["item_emb"], hist)
    t = ad.expand(ad.gather(p["item_emb"], targets), 1, L)
    unit_in = ad.concat([h, t, ad.mul(h, t)], axis=-1)
    logits = mlp(p, "att", unit_in, len(model.config.attention_hidden) + 1)
    weights = ad.softmax(ad.reshape(logits, (len(targets), L)), mask=mask)
    return ad.sum(ad.mul(ad.expand(weights, -1, d), h), axis=1)


def deepfm_encode(model: EncoderPredictor, users: np.ndarray, hist: np.ndarray, mask: np.ndarray, targets=None) -> Tensor:
    """``[user embedding, mean-pooled history embedding]``; does not look at the target."""
    p = model.params
    d = model.config.embedding_dim
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    pool = ad.tensor(mask / counts)
    h = ad.gather(p["item_emb"], hist)
    pooled = ad.sum(ad.mul(ad.expand(pool, -1, d), h), axis=1)
    return ad.concat([ad.gather(p["user_emb"], users), pooled], axis=-1)


def fm_pairwise(fields: list[Tensor]) -> Tensor:
    """Sum over field pairs i<j of <e_i, e_j>, via 0.5 * ((sum e)^2 - sum e^2)."""
    total = fields[0]
    for f in fields[1:]:
        total = ad.add(total, f)
    sq = ad.sum(ad.mul(fields[0], fields[0]), axis=-1)
    for f in fields[1:]:
        sq = ad.add(sq, ad.sum(ad.mul(f, f), axis=-1))
    return ad.scale(ad.sub(ad.sum(ad.mul(total, total), axis=-1), sq), 0.5)


def predict_logit(model: EncoderPredictor, mediator: Tensor, targets: np.ndarray) -> Tensor:
    p = model.params
    if mediator.shape[-1] != model.mediator_dim:
        raise ad.ShapeError("predict", None, f"mediator dim {mediator.shape[-1]} != {model.mediator_dim}")
    t = ad.gather(p["item_emb"], targets)
    deep = mlp(p, "pred", ad.concat([mediator, t], axis=-1), len(model.config.predictor_hidden) + 1)
    logit = ad.reshape(deep, (len(targets),))
    if model.arch == "deepfm":
        d = model.config.embedding_dim
        fields = [ad.slice_axis(mediator, 0, d, axis=-1), ad.slice_axis(mediator, d, 2 * d, axis=-1), t]
        logit = ad.add(logit, fm_pairwise(fields))
    return logit


def predict(model: EncoderPredictor, mediator: Tensor, targets: np.ndarray) -> Tensor:
    """Click probability ``sigmoid(psi([m, y]))`` (plus the FM term for DeepFM)."""
    return ad.sigmoid(predict_logit(model, mediator, targets))


def rec_loss(
    probs: Tensor,
    labels: np.ndarray,
    model: EncoderPredictor | None = None,
    l2: float = 1e-6,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Mean binary cross-entropy plus ``l2 * ||embeddings||^2``."""
    loss = ad.binary_cross_entropy(probs, np.asarray(labels, dtype=float), weights)
    if model is not None and l2 > 0:
        for e in model.embeddings():
            loss = ad.add(loss, ad.scale(ad.sum_squares(e), l2))
    return loss


def score(model: EncoderPredictor, pairs: TrainPairs, batch_size: int = 8192) -> np.ndarray:
    """Probabilities for every pair, computed without recording gradients."""
    frozen = model if not any(t.requires_grad for t in model.parameters()) else model.frozen()
    out = np.empty(len(pairs))
    for start in range(0, len(pairs), batch_size):
        idx = np.arange(start, min(start + batch_size, len(pairs)))
        batch = make_batch(pairs, idx, frozen.config.max_history)
        out[idx] = frozen.forward(batch)[1].data
    return out
