"""Interaction data from a structural causal model with a hidden binary confounder.

Each user has a latent taste vector and a hidden ``u ~ Bernoulli(p)``. The
confounder pushes both the history (``X``) and the next click (``Y``) toward
popular items::

    history  ~ Plackett-Luce(interest(user, item) + beta * u * pop(item))
    click    ~ Bernoulli(sigmoid(bias + gamma * <mean history latent, item latent> + beta * u * pop(item)))

Because ``u`` enters both mechanisms, ``P(Y | X)`` differs from
``P(Y | do(X)) = sum_u P(u) P(Y | X, u)``, which is available in closed form.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .data import InteractionLog, PreparedData, SequenceStore, TrainPairs


@dataclass
class ScmConfig:
    n_users: int = 2000
    n_items: int = 500
    latent_dim: int = 8
    confounder_prior: float = 0.5
    confounder_strength: float = 2.0
    popularity_scores: np.ndarray | None = None
    history_length: int = 20
    impressions_per_user: int = 20
    test_fraction: float = 0.25
    interest_scale: float = 1.0
    match_scale: float = 10.0
    click_bias: float = -1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_users < 1 or self.n_items < 1:
            raise ValueError("synthetic config needs at least one user and one item")
        if not 0.0 <= self.confounder_prior <= 1.0:
            raise ValueError("confounder_prior must lie in [0, 1]")
        if not np.isfinite(self.confounder_strength) or self.confounder_strength < 0:
            raise ValueError("confounder_strength must be finite and >= 0")
        if self.history_length < 1 or self.history_length >= self.n_items:
            raise ValueError("history_length must be in [1, n_items)")
        if self.popularity_scores is not None:
            pop = np.asarray(self.popularity_scores, dtype=float)
            if pop.shape != (self.n_items,) or not np.all(np.isfinite(pop)):
                raise ValueError("popularity_scores must be n_items finite floats")

    def public_dict(self) -> dict:
        d = asdict(self)
        d.pop("popularity_scores")
        return d


@dataclass
class ScmDataset:
    config: ScmConfig
    log: InteractionLog
    u: np.ndarray
    user_latent: np.ndarray
    item_latent: np.ndarray
    popularity: np.ndarray
    histories: SequenceStore
    imp_user: np.ndarray
    imp_item: np.ndarray
    imp_label: np.ndarray
    imp_prob0: np.ndarray
    imp_prob1: np.ndarray
    imp_test: np.ndarray
    extras: dict = field(default_factory=dict)

    # -- ground truth -------------------------------------------------

    def match_logit(self, histories: np.ndarray, mask: np.ndarray, items: np.ndarray) -> np.ndarray:
        cfg = self.config
        lat = self.item_latent[histories] * mask[..., None]
        centre = lat.sum(axis=1) / np.maximum(mask.sum(axis=1), 1)[:, None]
        return cfg.click_bias + cfg.match_scale * np.einsum("nd,nd->n", centre, self.item_latent[items])

    def click_probability(self, histories, mask, items, u) -> np.ndarray:
        s = self.match_logit(histories, mask, items)
        return expit(s + self.config.confounder_strength * np.asarray(u) * self.popularity[items])

    def oracle(self, histories, mask, items) -> np.ndarray:
        """P(Y | do(X)): the confounder marginalised at its prior."""
        p = self.config.confounder_prior
        s = self.match_logit(histories, mask, items)
        return (1 - p) * expit(s) + p * expit(s + self.config.confounder_strength * self.popularity[items])

    def history_posterior(self, user: int, history: np.ndarray | None = None) -> float:
        """P(u = 1 | history, user taste) under the Plackett-Luce history mechanism."""
        cfg = self.config
        hist = self.histories.sequence(user) if history is None else np.asarray(history)
        base = cfg.interest_scale * self.item_latent @ self.user_latent[user]
        ll = []
        for u in (0, 1):
            logits = base + cfg.confounder_strength * u * self.popularity
            avail = np.ones(len(logits), bool)
            total = 0.0
            for h in hist:
                total += logits[h] - logsumexp(logits[avail])
                avail[h] = False
            ll.append(total)
        p = cfg.confounder_prior
        if p in (0.0, 1.0):
            return p
        log_odds = np.log(p) - np.log1p(-p) + ll[1] - ll[0]
        return float(expit(log_odds))

    def observational(self, user: int, item: int, posterior: float | None = None) -> float:
        """P(Y | X) for this user's history: the confounder at its posterior."""
        hist = self.histories.sequence(user)[None, :]
        mask = np.ones_like(hist, bool)
        post = self.history_posterior(user) if posterior is None else posterior
        items = np.array([item])
        p0 = self.click_probability(hist, mask, items, 0)[0]
        p1 = self.click_probability(hist, mask, items, 1)[0]
        return float((1 - post) * p0 + post * p1)

    # -- model-facing views -------------------------------------------

    def prepared(self) -> PreparedData:
        train = ~self.imp_test
        return PreparedData(
            self.pairs(train),
            None,
            self.config.n_users,
            self.config.n_items,
            explicit=True,
        )

    def pairs(self, which: np.ndarray) -> TrainPairs:
        users = self.imp_user[which]
        return TrainPairs(
            self.histories,
            users,
            self.histories.offsets[users + 1],
            self.imp_item[which],
            self.imp_label[which].astype(float),
        )

    def test_pairs(self) -> TrainPairs:
        return self.pairs(self.imp_test)

    def test_oracle(self) -> np.ndarray:
        pairs = self.test_pairs()
        hist, mask = pairs.store.histories(pairs.users, pairs.ends, self.config.history_length)
        return self.oracle(hist, mask, pairs.targets)

    def truth_arrays(self) -> dict[str, np.ndarray]:
        return {
            "u": self.u,
            "user_latent": self.user_latent,
            "item_latent": self.item_latent,
            "popularity": self.popularity,
            "hist_flat": self.histories.flat,
            "hist_offsets": self.histories.offsets,
            "imp_user": self.imp_user,
            "imp_item": self.imp_item,
            "imp_label": self.imp_label,
            "imp_prob0": self.imp_prob0,
            "imp_prob1": self.imp_prob1,
            "imp_test": self.imp_test.astype(float),
        }

    def truth_sidecar(self) -> dict:
        return {
            "u": [int(x) for x in self.u],
            "beta": self.config.confounder_strength,
            "p": self.config.confounder_prior,
            "config": self.config.public_dict(),
        }

    @classmethod
    def from_arrays(cls, config: ScmConfig, log: InteractionLog, a: dict[str, np.ndarray]) -> "ScmDataset":
        return cls(
            config,
            log,
            a["u"].astype(np.int64),
            a["user_latent"],
            a["item_latent"],
            a["popularity"],
            SequenceStore(a["hist_flat"].astype(np.int64), a["hist_offsets"].astype(np.int64)),
            a["imp_user"].astype(np.int64),
            a["imp_item"].astype(np.int64),
            a["imp_label"].astype(np.int64),
            a["imp_prob0"],
            a["imp_prob1"],
            a["imp_test"].astype(bool),
        )


def default_popularity(n_items: int, rng: np.random.Generator) -> np.ndarray:
    """Standardised log-normal popularity: a long tail of niche items."""
    raw = rng.lognormal(0.0, 1.0, size=n_items)
    z = np.log(raw)
    return (z - z.mean()) / z.std()


def _plackett_luce(logits: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # Gumbel top-k is an exact sequential Plackett-Luce draw without replacement.
    keys = logits + rng.gumbel(size=logits.shape)
    return np.argsort(-keys, kind="stable")[:k]


def generate(config: ScmConfig) -> ScmDataset:
    config.validate()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    item_latent = rng.normal(0.0, 1.0 / np.sqrt(cfg.latent_dim), size=(cfg.n_items, cfg.latent_dim))
    pop = (
        np.asarray(cfg.popularity_scores, dtype=float)
        if cfg.popularity_scores is not None
        else default_popularity(cfg.n_items, rng)
    )
    user_latent = rng.normal(0.0, 1.0, size=(cfg.n_users, cfg.latent_dim))
    u = (rng.random(cfg.n_users) < cfg.confounder_prior).astype(np.int64)
    beta = cfg.confounder_strength

    hist_rows = []
    for n in range(cfg.n_users):
        logits = cfg.interest_scale * item_latent @ user_latent[n] + beta * u[n] * pop
        hist_rows.append(_plackett_luce(logits, cfg.history_length, rng))
    histories = SequenceStore.from_lists(hist_rows)
    hist = np.array(hist_rows)

    n_imp = cfg.impressions_per_user
    imp_user = np.repeat(np.arange(cfg.n_users), n_imp)
    imp_item = rng.integers(0, cfg.n_items, size=len(imp_user))
    seen = (hist[imp_user] == imp_item[:, None]).any(axis=1)
    while seen.any():
        imp_item[seen] = rng.integers(0, cfg.n_items, size=int(seen.sum()))
        seen[seen] = (hist[imp_user[seen]] == imp_item[seen, None]).any(axis=1)

    ds = ScmDataset(
        cfg, None, u, user_latent, item_latent, pop, histories,
        imp_user, imp_item, np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, bool),
    )
    mask = np.ones((len(imp_user), cfg.history_length), bool)
    ds.imp_prob0 = ds.click_probability(hist[imp_user], mask, imp_item, 0)
    ds.imp_prob1 = ds.click_probability(hist[imp_user], mask, imp_item, 1)
    actual = np.where(u[imp_user] == 1, ds.imp_prob1, ds.imp_prob0)
    ds.imp_label = (rng.random(len(imp_user)) < actual).astype(np.int64)
    n_test = int(round(cfg.test_fraction * n_imp))
    ds.imp_test = np.tile(np.arange(n_imp) >= n_imp - n_test, cfg.n_users)

    L = cfg.history_length
    users = np.concatenate([np.repeat(np.arange(cfg.n_users), L), imp_user])
    items = np.concatenate([hist.reshape(-1), imp_item])
    ts = np.concatenate([np.tile(np.arange(L), cfg.n_users), L + np.tile(np.arange(n_imp), cfg.n_users)])
    labels = np.concatenate([np.ones(cfg.n_users * L, np.int8), ds.imp_label.astype(np.int8)])
    ds.log = InteractionLog(users, items, ts, labels, np.arange(cfg.n_users), np.arange(cfg.n_items))
    return ds


def interventional_oracle(dataset: ScmDataset, history, item: int) -> float:
    """P(Y = item | do(X = history)) using stored SCM parameters and the prior P(u)."""
    hist = np.asarray(history, dtype=np.int64)[None, :]
    return float(dataset.oracle(hist, np.ones_like(hist, bool), np.array([item]))[0])


def mixture(p_y_given_u0: float, p_y_given_u1: float, weight_u1: float) -> float:
    return (1 - weight_u1) * p_y_given_u0 + weight_u1 * p_y_given_u1
