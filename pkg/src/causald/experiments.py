"""Reusable experiment drivers behind the scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import PreparedData, k_core_filter, parse_movielens, prepare_sequences, user_groups
from .distill import (
    DistillConfig,
    TeacherEnsemble,
    train_base,
    train_causald,
    train_ips,
    train_kd_baseline,
    train_teachers,
)
from .evaluation import MetricsReport, evaluate_ranking, evaluate_synthetic, groupwise_protocol, heterogeneity_block
from .models import EncoderPredictor, ModelConfig, make_batch
from .seeds import derive_seed
from .synth import ScmConfig, generate


def build_teachers(
    data: PreparedData, model_cfg: ModelConfig, cfg: DistillConfig, attribute: str, seed: int
) -> TeacherEnsemble:
    """K teachers on the user groups of ``attribute`` (``random`` gives homogeneous teachers)."""
    groups = user_groups(data, attribute, cfg.n_teachers, derive_seed(seed, "split"))
    subsets = [data.restrict(groups.members(k)) for k in range(cfg.n_teachers)]
    return train_teachers(subsets, model_cfg, cfg, groups.sizes, attribute)


def train_method(
    method: str,
    data: PreparedData,
    model_cfg: ModelConfig,
    cfg: DistillConfig,
    seed: int,
    ips_attribute: str = "activeness",
    n_ips_groups: int = 5,
) -> tuple[EncoderPredictor, list[dict], dict]:
    """Dispatch one training method; returns (model, per-epoch log, side artifacts)."""
    if method == "base":
        model, log = train_base(data, model_cfg, cfg, seed)
        return model, log, {}
    if method == "kd":
        student, teacher, log = train_kd_baseline(data, model_cfg, cfg, seed)
        return student, log, {"teacher": teacher}
    if method == "ips":
        groups = user_groups(data, ips_attribute, n_ips_groups, derive_seed(seed, "split"))
        model, log = train_ips(data, groups, model_cfg, cfg, seed)
        return model, log, {}
    if method in ("causald", "causald-no-fda"):
        if method == "causald-no-fda":
            cfg = dataclasses.replace(cfg, lambda_fda=0.0)
        ens = build_teachers(data, model_cfg, cfg, cfg.split_attribute, seed)
        res = train_causald(data, ens, model_cfg, cfg, seed)
        return res.student, res.log, {"ensemble": ens, "head": res.head}
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSettings:
    """Desk-scale settings for the deconfounding experiment."""

    scm: dict = field(
        default_factory=lambda: dict(
            n_users=2000,
            n_items=500,
            latent_dim=2,
            confounder_prior=0.5,
            confounder_strength=2.0,
            history_length=20,
            impressions_per_user=80,
            match_scale=4.0,
        )
    )
    arch: str = "din"
    n_teachers: int = 4
    split_attribute: str = "popularity"
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.05
    lambda_bda: float = 1.0
    lambda_fda: float = 1.0


def synthetic_run(seed: int, settings: SyntheticSettings | None = None) -> dict[str, MetricsReport]:
    """Base and CausalD on one synthetic draw; reports carry oracle gap and per-cohort AUC."""
    s = settings or SyntheticSettings()
    ds = generate(ScmConfig(**s.scm, seed=seed))
    data = ds.prepared()
    mc = ModelConfig(arch=s.arch, n_users=ds.config.n_users, n_items=ds.config.n_items, max_history=ds.config.history_length)
    cfg = DistillConfig(
        n_teachers=s.n_teachers,
        lambda_bda=s.lambda_bda,
        lambda_fda=s.lambda_fda,
        batch_size=s.batch_size,
        epochs=s.epochs,
        learning_rate=s.learning_rate,
        split_attribute=s.split_attribute,
        seed=seed,
    )
    out = {}
    t0 = time.perf_counter()
    base, _ = train_base(data, mc, cfg, seed)
    out["base"] = evaluate_synthetic(base, ds, "base", seed)
    out["base"].extra["train_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ens = build_teachers(data, mc, cfg, s.split_attribute, seed)
    res = train_causald(data, ens, mc, cfg, seed)
    out["causald"] = evaluate_synthetic(res.student, ds, "causald", seed)
    out["causald"].extra["train_seconds"] = time.perf_counter() - t0
    return out


# ---------------------------------------------------------------- movielens

MOVIELENS_ENV = "CAUSALD_ML1M"


def find_movielens(default: str = "data/ml-1m/ratings.dat") -> str | None:
    """Path to MovieLens-1M ``ratings.dat`` from the environment or the default location."""
    for path in (os.environ.get(MOVIELENS_ENV), default):
        if path and os.path.isfile(path):
            return path
    return None


@dataclass
class MovieLensSettings:
    arch: str = "din"
    k_core: int = 16
    n_teachers: int = 4
    split_attribute: str = "activeness"
    eval_attribute: str = "activeness"
    eval_groups: int = 5
    epochs: int = 10
    batch_size: int = 4096
    learning_rate: float = 0.01
    lambda_bda: float = 1.0
    lambda_fda: float = 1.0
    methods: tuple[str, ...] = ("base", "causald", "causald-no-fda", "causald-ho")


def movielens_data(path: str, seed: int, k_core: int = 16) -> PreparedData:
    return prepare_sequences(k_core_filter(parse_movielens(path), k_core), derive_seed(seed, "split"))


def movielens_run(data: PreparedData, seed: int, settings: MovieLensSettings | None = None) -> dict[str, MetricsReport]:
    """Leave-last-out reports with heterogeneity for each method in ``settings.methods``.

    ``causald-ho`` is CausalD whose teachers come from a random (homogeneous) user split.
    """
    s = settings or MovieLensSettings()
    mc = ModelConfig(arch=s.arch, n_users=data.n_users, n_items=data.n_items)
    cfg = DistillConfig(
        n_teachers=s.n_teachers,
        lambda_bda=s.lambda_bda,
        lambda_fda=s.lambda_fda,
        batch_size=s.batch_size,
        epochs=s.epochs,
        learning_rate=s.learning_rate,
        split_attribute=s.split_attribute,
        seed=seed,
    )
    assignment = user_groups(data, s.eval_attribute, s.eval_groups, derive_seed(seed, "split"))
    grouped = groupwise_protocol(data, assignment, mc, cfg, seed)
    out = {}
    for method in s.methods:
        t0 = time.perf_counter()
        if method == "causald-ho":
            ens = build_teachers(data, mc, cfg, "random", seed)
            model = train_causald(data, ens, mc, cfg, seed).student
        else:
            model, _, _ = train_method(method, data, mc, cfg, seed)
        report, _ = evaluate_ranking(model, data.evalset, method, seed, assignment)
        unified = {m: np.array(v) for m, v in report.groups[s.eval_attribute].items()}
        report.heterogeneity = heterogeneity_block(unified, grouped)
        report.extra["train_seconds"] = time.perf_counter() - t0
        out[method] = report
    return out


# ---------------------------------------------------------------- latency


def _batches(model: EncoderPredictor, pairs, batch_size: int):
    frozen = model.frozen()
    return frozen, [
        make_batch(pairs, np.arange(a, min(a + batch_size, len(pairs))), frozen.config.max_history)
        for a in range(0, len(pairs), batch_size)
    ]


def _score_once(frozen: EncoderPredictor, batches, clock) -> float:
    t0 = clock()
    for b in batches:
        frozen.forward(b)
    return clock() - t0


def inference_latency(model: EncoderPredictor, pairs, batch_size: int = 4096, repeats: int = 7) -> float:
    """Median wall seconds to score ``pairs`` once (inputs pre-batched)."""
    frozen, batches = _batches(model, pairs, batch_size)
    return float(np.median([_score_once(frozen, batches, time.perf_counter) for _ in range(repeats)]))


def paired_latency(
    a: EncoderPredictor, b: EncoderPredictor, pairs, samples: int = 150, batch_size: int = 4096
) -> tuple[float, float]:
    """Median CPU seconds per scoring pass for two models, alternating pass by pass.

    Process CPU time excludes intervals where a shared host deschedules us, and
    alternating A/B/B/A spreads any remaining drift evenly over both models.
    """
    fa, ba = _batches(a, pairs, batch_size)
    fb, bb = _batches(b, pairs, batch_size)
    ta, tb = [], []
    for r in range(samples):
        if r % 2 == 0:
            ta.append(_score_once(fa, ba, time.process_time))
            tb.append(_score_once(fb, bb, time.process_time))
        else:
            tb.append(_score_once(fb, bb, time.process_time))
            ta.append(_score_once(fa, ba, time.process_time))
    return float(np.median(ta)), float(np.median(tb))
