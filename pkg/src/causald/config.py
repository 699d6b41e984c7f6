"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .distill import DistillConfig
from .models import ModelConfig
from .seeds import derive_seed
from .synth import ScmConfig


class ConfigError(ValueError):
    pass


DATASETS = ("movielens", "tsv", "synth")
METHODS = ("base", "kd", "ips", "causald", "causald-no-fda")
ATTRIBUTES = ("activeness", "consistency", "popularity", "random")


@dataclass
class RunConfig:
    dataset: str = "synth"
    data_path: str = ""
    output_dir: str = "runs"
    arch: str = "din"
    method: str = "causald"
    seed: int = 0
    seeds: int = 1
    jobs: int = 1

    k_core: int = 16
    n_neg: int = 1
    embedding_dim: int = 8
    max_history: int = 50

    teachers: int = 4
    lambda_bda: float = 1.0
    lambda_fda: float = 1.0
    lambda_kd: float = 1.0
    batch_size: int = 4096
    epochs: int = 10
    learning_rate: float = 0.01
    l2: float = 1e-6
    feature_mode: str = "bda"
    split_attribute: str = "activeness"
    fda_hidden: int = 16
    kd_temperature: float = 1.0
    ips_clip: float = 0.1
    ips_attribute: str = "activeness"
    teacher_init: str = "shared"

    eval_attribute: str = "activeness"
    eval_groups: int = 5

    synth_users: int = 2000
    synth_items: int = 500
    synth_latent_dim: int = 2
    synth_prior: float = 0.5
    synth_strength: float = 2.0
    synth_history: int = 20
    synth_impressions: int = 80
    synth_match_scale: float = 4.0
    synth_click_bias: float = -1.0

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset != "synth" and not self.data_path:
            raise ConfigError(f"dataset {self.dataset} needs data_path")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.arch not in ("din", "deepfm"):
            raise ConfigError(f"arch must be din or deepfm, got {self.arch!r}")
        for key in ("split_attribute", "eval_attribute", "ips_attribute"):
            if getattr(self, key) not in ATTRIBUTES:
                raise ConfigError(f"{key} must be one of {ATTRIBUTES}")
        if self.seeds < 1 or self.jobs < 1 or self.eval_groups < 2 or self.k_core < 1:
            raise ConfigError("seeds, jobs, k_core must be >= 1 and eval_groups >= 2")
        try:
            self.distill_config().validate()
            self.scm_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    # -- derived configs -------------------------------------------------

    def distill_config(self, seed: int | None = None) -> DistillConfig:
        cfg = DistillConfig(
            n_teachers=self.teachers,
            lambda_bda=self.lambda_bda,
            lambda_fda=0.0 if self.method == "causald-no-fda" else self.lambda_fda,
            lambda_kd=self.lambda_kd,
            batch_size=self.batch_size,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            l2=self.l2,
            feature_mode=self.feature_mode,
            split_attribute=self.split_attribute,
            fda_hidden=self.fda_hidden,
            kd_temperature=self.kd_temperature,
            ips_clip=self.ips_clip,
            teacher_init=self.teacher_init,
            seed=self.seed if seed is None else seed,
            jobs=self.jobs,
        )
        return cfg

    def model_config(self, n_users: int, n_items: int) -> ModelConfig:
        history = self.synth_history if self.dataset == "synth" else self.max_history
        return ModelConfig(
            arch=self.arch,
            n_users=n_users,
            n_items=n_items,
            embedding_dim=self.embedding_dim,
            max_history=min(self.max_history, history),
        )

    def scm_config(self) -> ScmConfig:
        return ScmConfig(
            n_users=self.synth_users,
            n_items=self.synth_items,
            latent_dim=self.synth_latent_dim,
            confounder_prior=self.synth_prior,
            confounder_strength=self.synth_strength,
            history_length=self.synth_history,
            impressions_per_user=self.synth_impressions,
            match_scale=self.synth_match_scale,
            click_bias=self.synth_click_bias,
            seed=derive_seed(self.seed, "synth"),
        )

    def run_seeds(self) -> list[int]:
        """Per-run seeds of a sweep, all derived from the master seed."""
        return [derive_seed(self.seed, "run", i) for i in range(self.seeds)]

    def data_key(self) -> dict:
        """Settings that determine the prepared dataset."""
        keys = ["dataset", "data_path", "k_core", "seed"]
        if self.dataset == "synth":
            keys += [f.name for f in fields(self) if f.name.startswith("synth_")]
        return {k: getattr(self, k) for k in keys}

    # -- text form ----------------------------------------------------

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def write_snapshot(self, directory) -> Path:
        path = Path(directory) / "config.resolved"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from e
    return raw


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = coerce(key, raw)
    return values


def load(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_text(p.read_text(encoding="utf-8"), str(p)))
    for k, v in (overrides or {}).items():
        values[k] = coerce(k, str(v)) if isinstance(v, str) else v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
