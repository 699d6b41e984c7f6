"""Ranking metrics, per-group tables, heterogeneity statistics and significance tests."""

from __future__ import annotations

import csv
import io as _io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data import EvalSet, GroupAssignment, PreparedData, TrainPairs
from .models import EncoderPredictor, ModelConfig, make_batch

METRICS = ("auc", "recall@5", "recall@10", "ndcg@5", "ndcg@10")


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- per instance


def auc_single(pos_score: float, neg_scores) -> float:
    """Fraction of negatives ranked below the positive, ties counting one half."""
    neg = np.asarray(neg_scores, dtype=float)
    if neg.size == 0:
        raise EvaluationError("auc needs at least one negative")
    return float(((neg < pos_score).sum() + 0.5 * (neg == pos_score).sum()) / neg.size)


def pessimistic_rank(pos_score: float, neg_scores) -> int:
    return 1 + int((np.asarray(neg_scores) >= pos_score).sum())


def rank_metrics(pos_score: float, neg_scores, k: int) -> tuple[float, float]:
    """(recall@k, ndcg@k) for a single positive; ties count against it."""
    if k < 1:
        raise EvaluationError("k must be >= 1")
    r = pessimistic_rank(pos_score, neg_scores)
    if r > k:
        return 0.0, 0.0
    return 1.0, float(1.0 / np.log2(r + 1))


def instance_metrics(pos: np.ndarray, neg: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorised per-instance values of every metric in ``METRICS``."""
    pos = np.asarray(pos, dtype=float)[:, None]
    neg = np.asarray(neg, dtype=float)
    if neg.shape[1] == 0:
        raise EvaluationError("auc needs at least one negative")
    auc = ((neg < pos).sum(1) + 0.5 * (neg == pos).sum(1)) / neg.shape[1]
    rank = 1 + (neg >= pos).sum(1)
    out = {"auc": auc}
    for k in (5, 10):
        hit = rank <= k
        out[f"recall@{k}"] = hit.astype(float)
        out[f"ndcg@{k}"] = np.where(hit, 1.0 / np.log2(rank + 1), 0.0)
    return out


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Pooled ROC AUC over labeled impressions (Mann-Whitney with average ranks)."""
    labels = np.asarray(labels) > 0
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise EvaluationError("auc needs both classes")
    r = stats.rankdata(scores)
    return float((r[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


# ---------------------------------------------------------------- scoring


def score_eval_set(model: EncoderPredictor, evalset: EvalSet, batch_size: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Scores for each instance's target and its negatives, shape (N,) and (N, n_neg)."""
    n, n_neg = evalset.negatives.shape
    users = np.repeat(evalset.users, 1 + n_neg)
    ends = np.repeat(evalset.ends(), 1 + n_neg)
    items = np.concatenate([evalset.targets[:, None], evalset.negatives], axis=1).reshape(-1)
    pairs = TrainPairs(evalset.store, users, ends, items, np.zeros(len(items)))
    frozen = model.frozen()
    out = np.empty(len(items))
    for start in range(0, len(items), batch_size):
        idx = np.arange(start, min(start + batch_size, len(items)))
        out[idx] = frozen.forward(make_batch(pairs, idx, evalset.max_len))[1].data
    out = out.reshape(n, 1 + n_neg)
    return out[:, 0], out[:, 1:]


# ---------------------------------------------------------------- groups


def group_means(values: np.ndarray, group: np.ndarray, n_groups: int) -> np.ndarray:
    counts = np.bincount(group, minlength=n_groups)
    if np.any(counts == 0):
        raise EvaluationError(f"empty evaluation group(s): {np.flatnonzero(counts == 0).tolist()}")
    return np.bincount(group, weights=values, minlength=n_groups) / counts


def group_table(per_instance: dict[str, np.ndarray], group: np.ndarray, n_groups: int) -> dict[str, np.ndarray]:
    return {m: group_means(v, group, n_groups) for m, v in per_instance.items()}


def heterogeneity(unified, groupwise) -> tuple[float, float, float]:
    """(S_h, S_h*, S_h - S_h*) from per-group scores under the two training regimes."""
    a = np.asarray(unified, dtype=float)
    b = np.asarray(groupwise, dtype=float)
    if a.size < 2 or a.shape != b.shape:
        raise EvaluationError("heterogeneity needs >= 2 groups, identically partitioned")
    s = float(np.std(a, ddof=1))
    s_star = float(np.std(b, ddof=1))
    return s, s_star, s - s_star


def heterogeneity_report(circ: dict[str, float]) -> float:
    """Unweighted mean of the bias-amplified heterogeneity of the five metrics."""
    missing = [m for m in METRICS if m not in circ]
    if missing:
        raise EvaluationError(f"missing metrics: {missing}")
    return float(np.mean([circ[m] for m in METRICS]))


def heterogeneity_block(unified: dict[str, np.ndarray], groupwise: dict[str, np.ndarray]) -> dict:
    per_metric = {}
    for m in METRICS:
        s, s_star, c = heterogeneity(unified[m], groupwise[m])
        scale = float(np.mean(unified[m]))
        per_metric[m] = {"S_h": s, "S_h_star": s_star, "S_h_circ": c, "S_h_circ_normalized": c / scale if scale else 0.0}
    return {
        "per_metric": per_metric,
        "heterogeneity": heterogeneity_report({m: v["S_h_circ"] for m, v in per_metric.items()}),
        "heterogeneity_normalized": float(np.mean([v["S_h_circ_normalized"] for v in per_metric.values()])),
    }


def groupwise_protocol(
    data: PreparedData,
    assignment: GroupAssignment,
    model_cfg: ModelConfig,
    cfg,
    seed: int | None = None,
) -> dict[str, np.ndarray]:
    """Train one base model per group on that group alone and score it on its own users."""
    from .distill import train_base
    from .seeds import derive_seed

    seed = cfg.seed if seed is None else seed
    table = {m: np.empty(assignment.n_groups) for m in METRICS}
    for g in range(assignment.n_groups):
        members = assignment.members(g)
        sub = data.restrict(members)
        if len(sub.positives) == 0 or sub.evalset is None or len(sub.evalset) == 0:
            raise EvaluationError(f"group {g} is too small to train and evaluate")
        model, _ = train_base(sub, model_cfg, cfg, derive_seed(seed, "groupwise", g))
        pos, neg = score_eval_set(model, sub.evalset)
        for m, v in instance_metrics(pos, neg).items():
            table[m][g] = float(v.mean())
    return table


# ---------------------------------------------------------------- statistics


def t_test_two_sided(sample_a, sample_b) -> float:
    """Welch's unequal-variance t-test; returns the two-sided p-value."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise EvaluationError("each sample needs at least 2 values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va + vb == 0:
        raise EvaluationError("both samples have zero variance")
    t = (a.mean() - b.mean()) / np.sqrt(va + vb)
    dof = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), dof)))


def oracle_gap(predictions: np.ndarray, oracle: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(predictions) - np.asarray(oracle))))


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    model: str
    seed: int
    metrics: dict[str, float]
    groups: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    heterogeneity: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "seed": self.seed,
            "metrics": self.metrics,
            "groups": self.groups,
            "heterogeneity": self.heterogeneity,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["model"], d["seed"], d["metrics"], d.get("groups", {}), d.get("heterogeneity", {}), d.get("extra", {}))

    def csv_rows(self) -> list[tuple]:
        rows = [(self.model, m, "all", v) for m, v in self.metrics.items()]
        for attr, table in self.groups.items():
            for m, values in table.items():
                rows += [(self.model, m, f"{attr}:{g}", v) for g, v in enumerate(values)]
        for m, block in self.heterogeneity.get("per_metric", {}).items():
            rows += [(self.model, m, k, v) for k, v in block.items()]
        if "heterogeneity" in self.heterogeneity:
            rows.append((self.model, "heterogeneity", "all", self.heterogeneity["heterogeneity"]))
            rows.append((self.model, "heterogeneity_normalized", "all", self.heterogeneity["heterogeneity_normalized"]))
        rows += [(self.model, k, "all", v) for k, v in self.extra.items() if isinstance(v, (int, float))]
        return rows

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("model", "metric", "group", "value"))
        for model, metric, group, value in self.csv_rows():
            w.writerow((model, metric, group, repr(float(value))))
        return buf.getvalue()

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        j = out / f"{stem}.json"
        c = out / f"{stem}.csv"
        j.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        c.write_text(self.to_csv())
        return j, c


def group_scores_csv(per_instance: dict[str, np.ndarray], users: np.ndarray, assignment: GroupAssignment) -> str:
    """One row per evaluated user: the raw values behind per-group plots."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("user", "attribute", "group", *METRICS))
    for n, u in enumerate(users):
        w.writerow((int(u), assignment.attribute, int(assignment.group[u]), *(repr(float(per_instance[m][n])) for m in METRICS)))
    return buf.getvalue()


def evaluate_ranking(
    model: EncoderPredictor,
    evalset: EvalSet,
    tag: str,
    seed: int,
    assignment: GroupAssignment | None = None,
) -> tuple[MetricsReport, dict[str, np.ndarray]]:
    """Leave-last-out report, with a per-group table when an assignment is given."""
    pos, neg = score_eval_set(model, evalset)
    per = instance_metrics(pos, neg)
    report = MetricsReport(tag, seed, {m: float(v.mean()) for m, v in per.items()})
    if assignment is not None:
        table = group_table(per, assignment.group[evalset.users], assignment.n_groups)
        report.groups[assignment.attribute] = {m: v.tolist() for m, v in table.items()}
    return report, per


def evaluate_synthetic(model: EncoderPredictor, dataset, tag: str, seed: int) -> MetricsReport:
    """Impression AUC overall and per hidden-confounder cohort, plus the interventional gap."""
    from .models import score

    pairs = dataset.test_pairs()
    p = score(model, pairs)
    u = dataset.u[pairs.users]
    y = pairs.labels
    cohort = [binary_auc(p[u == c], y[u == c]) for c in (0, 1)]
    report = MetricsReport(tag, seed, {"auc": binary_auc(p, y)})
    report.groups["confounder"] = {"auc": cohort}
    report.extra["oracle_gap"] = oracle_gap(p, dataset.test_oracle())
    report.extra["auc_spread"] = float(abs(cohort[1] - cohort[0]))
    return report
