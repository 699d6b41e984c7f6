"""Interaction logs, filtering, leave-last-out splitting, negatives and user groupings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

_log = logging.getLogger(__name__)

MAX_HISTORY = 50
N_EVAL_NEGATIVES = 100


class DataError(ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class EmptyDatasetError(DataError):
    pass


@dataclass
class InteractionLog:
    """Records with dense user/item ids; ``user_ids``/``item_ids`` map back to raw ids."""

    user: np.ndarray
    item: np.ndarray
    timestamp: np.ndarray
    label: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray

    @classmethod
    def from_raw(cls, users, items, timestamps, labels=None) -> "InteractionLog":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        labels = np.ones(len(users), dtype=np.int8) if labels is None else np.asarray(labels, dtype=np.int8)
        user_ids, u = np.unique(users, return_inverse=True)
        item_ids, i = np.unique(items, return_inverse=True)
        return cls(u.astype(np.int64), i.astype(np.int64), np.asarray(timestamps, dtype=np.int64), labels, user_ids, item_ids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.user)

    def select(self, mask: np.ndarray) -> "InteractionLog":
        """Record subset keeping the id space unchanged."""
        return InteractionLog(
            self.user[mask], self.item[mask], self.timestamp[mask], self.label[mask], self.user_ids, self.item_ids
        )

    def densify(self) -> "InteractionLog":
        """Drop ids with no records and renumber densely (order of raw ids kept)."""
        log = InteractionLog.from_raw(self.user_ids[self.user], self.item_ids[self.item], self.timestamp, self.label)
        return log

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "user": self.user,
            "item": self.item,
            "timestamp": self.timestamp,
            "label": self.label,
            "user_ids": self.user_ids,
            "item_ids": self.item_ids,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "InteractionLog":
        return cls(
            arrays["user"].astype(np.int64),
            arrays["item"].astype(np.int64),
            arrays["timestamp"].astype(np.int64),
            arrays["label"].astype(np.int8),
            arrays["user_ids"].astype(np.int64),
            arrays["item_ids"].astype(np.int64),
        )


# ---------------------------------------------------------------- parsing


def _parse_lines(path, sep: str, min_fields: int, max_fields: int):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    cols: list[list[int]] = [[] for _ in range(max_fields)]
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split(sep)
            if not min_fields <= len(parts) <= max_fields:
                raise ParseError(path, n, f"expected {min_fields}-{max_fields} fields, got {len(parts)}")
            try:
                vals = [int(p) for p in parts]
            except ValueError:
                raise ParseError(path, n, f"non-integer field in {line!r}") from None
            for c, v in zip(cols, vals):
                c.append(v)
            for c in cols[len(vals) :]:
                c.append(1)
    return cols


def parse_movielens(path) -> InteractionLog:
    """``UserID::MovieID::Rating::Timestamp``; every rating is an implicit positive."""
    users, items, _ratings, ts = _parse_lines(path, "::", 4, 4)
    return InteractionLog.from_raw(users, items, ts)


def parse_tsv(path) -> InteractionLog:
    """``user<TAB>item<TAB>timestamp[<TAB>label]``."""
    users, items, ts, labels = _parse_lines(path, "\t", 3, 4)
    return InteractionLog.from_raw(users, items, ts, labels)


# ---------------------------------------------------------------- filtering


def k_core_filter(log: InteractionLog, k: int = 16) -> InteractionLog:
    """Iteratively drop users/items with fewer than ``k`` positive records."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = log.label > 0
    while True:
        ucount = np.bincount(log.user[keep], minlength=log.n_users)
        icount = np.bincount(log.item[keep], minlength=log.n_items)
        bad = keep & ((ucount[log.user] < k) | (icount[log.item] < k))
        if not bad.any():
            break
        keep &= ~bad
    # negatives survive only for surviving users/items
    alive_u = np.bincount(log.user[keep], minlength=log.n_users) > 0
    alive_i = np.bincount(log.item[keep], minlength=log.n_items) > 0
    keep = keep | ((log.label == 0) & alive_u[log.user] & alive_i[log.item])
    if not keep.any():
        raise EmptyDatasetError(f"{k}-core filtering removed every record")
    return log.select(keep).densify()


# ---------------------------------------------------------------- sequences


@dataclass
class UserSequence:
    user_id: int
    items: np.ndarray
    timestamps: np.ndarray


def build_sequences(log: InteractionLog) -> list[UserSequence]:
    """Positive records per user in time order; ties keep file order."""
    pos = np.flatnonzero(log.label > 0)
    order = pos[np.lexsort((log.timestamp[pos], log.user[pos]))]
    bounds = np.searchsorted(log.user[order], np.arange(log.n_users + 1))
    return [
        UserSequence(u, log.item[order[bounds[u] : bounds[u + 1]]], log.timestamp[order[bounds[u] : bounds[u + 1]]])
        for u in range(log.n_users)
    ]


@dataclass
class SequenceStore:
    """Per-user item sequences packed into one flat array."""

    flat: np.ndarray
    offsets: np.ndarray

    @classmethod
    def from_lists(cls, seqs: Sequence[np.ndarray]) -> "SequenceStore":
        lens = np.array([len(s) for s in seqs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        flat = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs]) if len(seqs) else np.zeros(0, np.int64)
        return cls(flat, offsets)

    @property
    def n_users(self) -> int:
        return len(self.offsets) - 1

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def sequence(self, user: int) -> np.ndarray:
        return self.flat[self.offsets[user] : self.offsets[user + 1]]

    def histories(self, users: np.ndarray, ends: np.ndarray, max_len: int = MAX_HISTORY):
        """Left-aligned padded histories ``flat[max(start, end-max_len):end]`` and their mask."""
        users = np.asarray(users)
        ends = np.asarray(ends)
        starts = np.maximum(self.offsets[users], ends - max_len)
        lens = ends - starts
        pos = starts[:, None] + np.arange(max_len)[None, :]
        mask = np.arange(max_len)[None, :] < lens[:, None]
        hist = np.where(mask, self.flat[np.minimum(pos, max(len(self.flat) - 1, 0))], 0)
        return hist, mask


@dataclass
class EvalInstance:
    user_id: int
    history: np.ndarray
    target_item: int
    negatives: np.ndarray


@dataclass
class EvalSet:
    """Test targets; each history is the user's training sequence (last ``max_len``)."""

    store: SequenceStore
    users: np.ndarray
    targets: np.ndarray
    negatives: np.ndarray
    max_len: int = MAX_HISTORY

    def __len__(self) -> int:
        return len(self.users)

    def ends(self) -> np.ndarray:
        return self.store.offsets[self.users + 1]

    def instances(self) -> Iterator[EvalInstance]:
        for k, u in enumerate(self.users):
            seq = self.store.sequence(u)
            yield EvalInstance(int(u), seq[-self.max_len :], int(self.targets[k]), self.negatives[k])

    def restrict(self, users: np.ndarray) -> "EvalSet":
        keep = np.isin(self.users, users)
        return EvalSet(self.store, self.users[keep], self.targets[keep], self.negatives[keep], self.max_len)


@dataclass
class TrainPairs:
    """Labeled (history, target) pairs; histories are views into ``store``."""

    store: SequenceStore
    users: np.ndarray
    ends: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx: np.ndarray) -> "TrainPairs":
        w = None if self.weights is None else self.weights[idx]
        return TrainPairs(self.store, self.users[idx], self.ends[idx], self.targets[idx], self.labels[idx], w)

    def restrict(self, users: np.ndarray) -> "TrainPairs":
        return self.take(np.flatnonzero(np.isin(self.users, users)))

    def with_weights(self, weights: np.ndarray) -> "TrainPairs":
        return TrainPairs(self.store, self.users, self.ends, self.targets, self.labels, np.asarray(weights, float))


def positive_pairs(store: SequenceStore) -> TrainPairs:
    """Every prefix -> next pair with a non-empty prefix."""
    lens = store.lengths()
    users = np.repeat(np.arange(store.n_users), np.maximum(lens - 1, 0))
    within = np.concatenate([np.arange(1, n) for n in lens]) if len(lens) else np.zeros(0, np.int64)
    ends = store.offsets[users] + within
    return TrainPairs(store, users, ends, store.flat[ends], np.ones(len(users)))


def leave_last_out(
    sequences: Sequence[UserSequence],
    n_items: int,
    rng_seed: int,
    n_negatives: int = N_EVAL_NEGATIVES,
    max_len: int = MAX_HISTORY,
) -> tuple[SequenceStore, EvalSet]:
    """Hold out each user's last item, paired with ``n_negatives`` never-consumed items."""
    train, users, targets, negs = [], [], [], []
    for s in sequences:
        if len(s.items) < 2:
            raise DataError(f"user {s.user_id} has fewer than 2 interactions")
        train.append(s.items[:-1])
        candidates = np.setdiff1d(np.arange(n_items), s.items)
        if len(candidates) < n_negatives:
            raise DataError(f"user {s.user_id} has only {len(candidates)} candidate negatives")
        rng = np.random.default_rng([rng_seed, s.user_id])
        users.append(s.user_id)
        targets.append(s.items[-1])
        negs.append(rng.choice(candidates, size=n_negatives, replace=False))
    store = SequenceStore.from_lists(train)
    negatives = np.array(negs, dtype=np.int64).reshape(len(negs), n_negatives)
    return store, EvalSet(store, np.array(users, np.int64), np.array(targets, np.int64), negatives, max_len)


@dataclass
class ConsumedIndex:
    """Sorted ``user * n_items + item`` codes for fast membership tests."""

    codes: np.ndarray
    n_items: int
    per_user: np.ndarray

    @classmethod
    def from_sequences(cls, sequences: Sequence[UserSequence], n_items: int) -> "ConsumedIndex":
        parts = [s.user_id * n_items + np.unique(s.items) for s in sequences]
        codes = np.concatenate(parts) if parts else np.zeros(0, np.int64)
        codes.sort()
        per_user = np.zeros(len(sequences), dtype=np.int64)
        for s in sequences:
            per_user[s.user_id] = len(np.unique(s.items))
        return cls(codes, n_items, per_user)

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        q = users * self.n_items + items
        pos = np.searchsorted(self.codes, q)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == q if len(self.codes) else np.zeros(len(q), bool)


def sample_train_negatives(
    positives: TrainPairs, consumed: ConsumedIndex, n_neg: int = 1, rng_seed: int = 0
) -> TrainPairs:
    """Append ``n_neg`` uniform never-consumed items per positive, sharing its history."""
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    full = np.flatnonzero(consumed.per_user[np.unique(positives.users)] >= consumed.n_items)
    if len(full):
        raise DataError(f"user {np.unique(positives.users)[full[0]]} has consumed every item; no negatives left")
    rng = np.random.default_rng(rng_seed)
    users = np.tile(positives.users, n_neg)
    items = rng.integers(0, consumed.n_items, size=len(users))
    bad = consumed.contains(users, items)
    while bad.any():
        items[bad] = rng.integers(0, consumed.n_items, size=int(bad.sum()))
        bad[bad] = consumed.contains(users[bad], items[bad])
    w = None if positives.weights is None else np.concatenate([positives.weights] * (n_neg + 1))
    return TrainPairs(
        positives.store,
        np.concatenate([positives.users, users]),
        np.concatenate([positives.ends] + [positives.ends] * n_neg),
        np.concatenate([positives.targets, items]),
        np.concatenate([positives.labels, np.zeros(len(users))]),
        w,
    )


# ---------------------------------------------------------------- groupings


@dataclass
class GroupAssignment:
    attribute: str
    group: np.ndarray
    n_groups: int
    sizes: np.ndarray = field(init=False)

    def __post_init__(self):
        self.group = np.asarray(self.group, dtype=np.int64)
        self.sizes = np.bincount(self.group, minlength=self.n_groups)

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group == g)

    def rows(self, user_ids: np.ndarray | None = None) -> list[dict]:
        raw = np.arange(len(self.group)) if user_ids is None else user_ids
        return [{"user": int(raw[u]), "attribute": self.attribute, "group": int(g)} for u, g in enumerate(self.group)]


def quantile_groups(scores: np.ndarray, n_groups: int, attribute: str) -> GroupAssignment:
    """Sort users by (score, id) and cut into contiguous blocks differing in size by <= 1."""
    scores = np.asarray(scores)
    if n_groups < 1 or n_groups > len(scores):
        raise ValueError(f"cannot split {len(scores)} users into {n_groups} groups")
    order = np.lexsort((np.arange(len(scores)), scores))
    group = np.empty(len(scores), dtype=np.int64)
    for g, block in enumerate(np.array_split(order, n_groups)):
        group[block] = g
    return GroupAssignment(attribute, group, n_groups)


def activeness_groups(counts: np.ndarray, n_groups: int) -> GroupAssignment:
    """Quantile groups by training-interaction count; group 0 is least active."""
    if n_groups < 2:
        raise ValueError("n_groups must be >= 2")
    return quantile_groups(counts, n_groups, "activeness")


def random_groups(n_users: int, n_groups: int, rng_seed: int) -> GroupAssignment:
    """IID split used for homogeneous teachers."""
    if n_groups > n_users:
        raise ValueError(f"cannot split {n_users} users into {n_groups} groups")
    perm = np.random.default_rng(rng_seed).permutation(n_users)
    group = np.empty(n_users, dtype=np.int64)
    for g, block in enumerate(np.array_split(perm, n_groups)):
        group[block] = g
    return GroupAssignment("random", group, n_groups)


def popularity_clusters(item_counts: np.ndarray, n_clusters: int = 18) -> np.ndarray:
    """Equal-count clusters by popularity rank; cluster 0 holds the most popular items."""
    order = np.lexsort((np.arange(len(item_counts)), -np.asarray(item_counts)))
    cluster = np.empty(len(item_counts), dtype=np.int64)
    for c, block in enumerate(np.array_split(order, n_clusters)):
        cluster[block] = c
    return cluster


def smoothed_kl(past_counts: np.ndarray, now_counts: np.ndarray, epsilon: float = 1e-6) -> float:
    p = past_counts / past_counts.sum()
    q = now_counts / now_counts.sum()
    p = (p + epsilon) / (1 + len(p) * epsilon)
    q = (q + epsilon) / (1 + len(q) * epsilon)
    return float(np.sum(p * np.log(p / q)))


def behavior_consistency(
    sequences: Sequence[np.ndarray], n_items: int, n_pop_clusters: int = 18, epsilon: float = 1e-6
) -> np.ndarray:
    """Per-user KL(past half || recent half) over popularity-cluster distributions."""
    counts = np.bincount(np.concatenate(sequences), minlength=n_items) if len(sequences) else np.zeros(n_items)
    cluster = popularity_clusters(counts, n_pop_clusters)
    out = np.empty(len(sequences))
    for u, seq in enumerate(sequences):
        half = len(seq) // 2
        past = np.bincount(cluster[seq[:half]], minlength=n_pop_clusters).astype(float)
        now = np.bincount(cluster[seq[half:]], minlength=n_pop_clusters).astype(float)
        out[u] = smoothed_kl(past, now, epsilon)
    return out


def split_non_iid(log: InteractionLog, assignment: GroupAssignment) -> list[InteractionLog]:
    """One record- and user-disjoint sub-log per group (id space preserved)."""
    g = assignment.group[log.user]
    return [log.select(g == k) for k in range(assignment.n_groups)]


# ---------------------------------------------------------------- bundle


@dataclass
class PreparedData:
    """Everything a trainer needs: training pairs, their negatives policy, and test set."""

    positives: TrainPairs
    evalset: EvalSet | None
    n_users: int
    n_items: int
    consumed: ConsumedIndex | None = None
    explicit: bool = False
    n_neg: int = 1

    @property
    def store(self) -> SequenceStore:
        return self.positives.store

    def epoch_pairs(self, seed: int) -> TrainPairs:
        if self.explicit:
            return self.positives
        return sample_train_negatives(self.positives, self.consumed, self.n_neg, seed)

    def restrict(self, users: np.ndarray) -> "PreparedData":
        return PreparedData(
            self.positives.restrict(users),
            None if self.evalset is None else self.evalset.restrict(users),
            self.n_users,
            self.n_items,
            self.consumed,
            self.explicit,
            self.n_neg,
        )

    def train_counts(self) -> np.ndarray:
        return np.bincount(self.positives.users[self.positives.labels > 0], minlength=self.n_users)


def prepare_sequences(log: InteractionLog, seed: int, n_neg: int = 1) -> PreparedData:
    """Sequences -> leave-last-out split -> prefix pairs; negatives drawn per epoch."""
    seqs = build_sequences(log)
    store, evalset = leave_last_out(seqs, log.n_items, seed)
    return PreparedData(
        positive_pairs(store),
        evalset,
        log.n_users,
        log.n_items,
        ConsumedIndex.from_sequences(seqs, log.n_items),
        explicit=False,
        n_neg=n_neg,
    )


def history_popularity(store: SequenceStore, n_items: int) -> np.ndarray:
    """Mean global interaction count of the items in each user's sequence."""
    counts = np.bincount(store.flat, minlength=n_items).astype(float)
    lens = store.lengths()
    owner = np.repeat(np.arange(len(lens)), lens)
    sums = np.bincount(owner, weights=counts[store.flat], minlength=len(lens))
    return np.where(lens > 0, sums / np.maximum(lens, 1), 0.0)


def user_groups(data: PreparedData, attribute: str, n_groups: int, rng_seed: int = 0) -> GroupAssignment:
    """Group assignment of all users by a named attribute of their training data."""
    store = data.store
    if attribute == "activeness":
        return quantile_groups(data.train_counts(), n_groups, "activeness")
    if attribute == "consistency":
        seqs = [store.sequence(u) for u in range(store.n_users)]
        return quantile_groups(behavior_consistency(seqs, data.n_items), n_groups, "consistency")
    if attribute == "popularity":
        return quantile_groups(history_popularity(store, data.n_items), n_groups, "popularity")
    if attribute == "random":
        return random_groups(data.n_users, n_groups, rng_seed)
    raise ValueError(f"unknown group attribute {attribute!r}")
