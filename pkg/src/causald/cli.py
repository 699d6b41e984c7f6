"""``causald`` command line: prepare, train, evaluate, groupwise, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import artifacts
from .config import ConfigError, RunConfig, load
from .data import DataError, k_core_filter, parse_movielens, parse_tsv, prepare_sequences, user_groups
from .distill import DivergenceError
from .evaluation import (
    METRICS,
    EvaluationError,
    MetricsReport,
    evaluate_ranking,
    evaluate_synthetic,
    group_scores_csv,
    groupwise_protocol,
    heterogeneity_block,
    t_test_two_sided,
)
from .experiments import train_method
from .io import ContainerError, read_json, save_tensors, write_json, write_jsonl
from .seeds import derive_seed
from .synth import generate

_log = logging.getLogger("causald")

LOG_COLUMNS = ("epoch", "L_Rec", "L_BDA", "L_FDA_distill", "L_FDA_consistency", "wall_seconds")


# ---------------------------------------------------------------- paths


def data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def run_dir(cfg: RunConfig, method: str, seed: int) -> Path:
    return Path(cfg.output_dir) / method / f"seed-{seed}"


def load_prepared(cfg: RunConfig):
    """(PreparedData, synthetic dataset or None, raw user ids)."""
    d = data_dir(cfg)
    if not (d / artifacts.DATASET_FILE).is_file():
        raise DataError(f"no prepared dataset under {d}; run `causald prepare` first")
    if cfg.dataset == "synth":
        ds = artifacts.load_synth(d)
        return ds.prepared(), ds, ds.log.user_ids
    log, data = artifacts.load_dataset(d)
    return data, None, log.user_ids


# ---------------------------------------------------------------- prepare


def _manifest_key(cfg: RunConfig) -> dict:
    key = {"config": cfg.data_key()}
    if cfg.dataset != "synth":
        path = Path(cfg.data_path)
        if not path.is_file():
            raise DataError(f"data file not found: {path}")
        key["input_sha256"] = artifacts.sha256_file(path)
    return key


def _up_to_date(d: Path, key: dict) -> bool:
    manifest = d / "manifest.json"
    if not manifest.is_file():
        return False
    m = read_json(manifest)
    if m.get("key") != key:
        return False
    return all((d / name).is_file() and artifacts.sha256_file(d / name) == digest for name, digest in m["files"].items())


def cmd_prepare(cfg: RunConfig, args) -> int:
    d = data_dir(cfg)
    key = _manifest_key(cfg)
    if _up_to_date(d, key):
        print(f"prepare: {d} up to date")
        return 0
    d.mkdir(parents=True, exist_ok=True)
    if cfg.dataset == "synth":
        ds = generate(cfg.scm_config())
        files = artifacts.save_synth(d, ds)
        data = ds.prepared()
        user_ids = ds.log.user_ids
        print(
            f"stats: users={ds.config.n_users} items={ds.config.n_items} records={len(ds.log)} "
            f"impressions={len(ds.imp_user)} click_rate={ds.imp_label.mean():.4f}"
        )
    else:
        raw = parse_movielens(cfg.data_path) if cfg.dataset == "movielens" else parse_tsv(cfg.data_path)
        log = k_core_filter(raw, cfg.k_core)
        data = prepare_sequences(log, derive_seed(cfg.seed, "split"), cfg.n_neg)
        files = [artifacts.save_dataset(d, log, data)]
        user_ids = log.user_ids
        print(
            f"stats: users={raw.n_users} items={raw.n_items} records={len(raw)} | "
            f"{cfg.k_core}-core users={log.n_users} items={log.n_items} records={len(log)} "
            f"eval_instances={len(data.evalset)}"
        )
    rows = []
    for attribute in sorted({cfg.eval_attribute, "activeness", "consistency"}):
        rows += user_groups(data, attribute, cfg.eval_groups, derive_seed(cfg.seed, "split")).rows(user_ids)
    write_jsonl(d / "groups.jsonl", rows)
    files.append(d / "groups.jsonl")
    cfg.write_snapshot(d)
    write_json(d / "manifest.json", {"key": key, "files": {Path(f).name: artifacts.sha256_file(f) for f in files}})
    print(f"prepare: wrote {d}")
    return 0


# ---------------------------------------------------------------- train


def write_log_csv(path: Path, rows: list[dict]) -> None:
    extras = sorted({k for r in rows for k in r} - set(LOG_COLUMNS))
    cols = [*LOG_COLUMNS, *extras]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, 0.0) for c in cols])


def cmd_train(cfg: RunConfig, args) -> int:
    data, ds, _ = load_prepared(cfg)
    model_cfg = cfg.model_config(data.n_users, data.n_items)
    for seed in cfg.run_seeds():
        out = run_dir(cfg, cfg.method, seed)
        out.mkdir(parents=True, exist_ok=True)
        dcfg = cfg.distill_config(seed)
        model, log, side = train_method(cfg.method, data, model_cfg, dcfg, seed, cfg.ips_attribute, cfg.eval_groups)
        artifacts.save_model(out / "student", model, {"method": cfg.method, "seed": seed})
        if "ensemble" in side:
            artifacts.save_ensemble(out / "teachers", side["ensemble"])
            save_tensors(out / "head.cdtn", side["head"].state_dict())
        if "teacher" in side:
            artifacts.save_model(out / "kd-teacher", side["teacher"])
        write_log_csv(out / "log.csv", log)
        cfg.write_snapshot(out)
        total = sum(r["wall_seconds"] for r in log)
        print(f"train: {cfg.method} seed={seed} epochs={len(log)} wall_seconds={total:.2f} -> {out}")
    return 0


# ---------------------------------------------------------------- evaluate


def _checkpoints(cfg: RunConfig, method: str, explicit) -> list[Path]:
    if explicit:
        return [Path(p) for p in explicit]
    paths = [run_dir(cfg, method, s) / "student" for s in cfg.run_seeds()]
    missing = [p for p in paths if not p.with_suffix(".cdtn").is_file()]
    if missing:
        raise DataError(f"missing checkpoints: {', '.join(map(str, missing))}")
    return paths


def _groupwise_table(cfg: RunConfig, data, seed: int) -> dict[str, np.ndarray]:
    path = Path(cfg.output_dir) / "groupwise" / f"{cfg.eval_attribute}-{cfg.eval_groups}" / f"seed-{seed}.json"
    if path.is_file():
        return {m: np.array(v) for m, v in read_json(path).items()}
    assignment = user_groups(data, cfg.eval_attribute, cfg.eval_groups, derive_seed(cfg.seed, "split"))
    model_cfg = cfg.model_config(data.n_users, data.n_items)
    table = groupwise_protocol(data, assignment, model_cfg, cfg.distill_config(seed), seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_json(path, {m: v.tolist() for m, v in table.items()})
    return table


def evaluate_checkpoint(cfg: RunConfig, stem: Path, data, ds, user_ids, groupwise: bool) -> MetricsReport:
    model, header = artifacts.load_model(stem)
    if model.config.n_items != data.n_items or model.config.n_users != data.n_users:
        raise ConfigError(
            f"{stem}: checkpoint built for {model.config.n_users} users / {model.config.n_items} items, "
            f"dataset has {data.n_users} / {data.n_items}"
        )
    tag = header.get("method", stem.parent.name)
    seed = int(header.get("seed", cfg.seed))
    out = Path(stem).parent
    if ds is not None:
        if groupwise:
            raise ConfigError("the group-wise protocol needs a leave-last-out dataset")
        report = evaluate_synthetic(model, ds, tag, seed)
    else:
        assignment = user_groups(data, cfg.eval_attribute, cfg.eval_groups, derive_seed(cfg.seed, "split"))
        report, per = evaluate_ranking(model, data.evalset, tag, seed, assignment)
        (out / "groups.csv").write_text(group_scores_csv(per, data.evalset.users, assignment))
        if groupwise:
            unified = {m: np.array(v) for m, v in report.groups[cfg.eval_attribute].items()}
            report.heterogeneity = heterogeneity_block(unified, _groupwise_table(cfg, data, seed))
    report.write(out)
    return report


def compare_reports(a: list[MetricsReport], b: list[MetricsReport]) -> dict:
    out = {}
    keys = [k for k in (*METRICS, "heterogeneity", "oracle_gap", "auc_spread") if _value(a[0], k) is not None]
    for k in keys:
        xa = [_value(r, k) for r in a]
        xb = [_value(r, k) for r in b]
        if any(v is None for v in xa + xb):
            continue
        try:
            p = t_test_two_sided(xa, xb)
        except EvaluationError as e:
            p = None
            _log.warning("compare %s: %s", k, e)
        out[k] = {"mean_a": float(np.mean(xa)), "mean_b": float(np.mean(xb)), "p_value": p}
    return out


def _value(report: MetricsReport, key: str):
    if key in report.metrics:
        return report.metrics[key]
    if key == "heterogeneity":
        return report.heterogeneity.get("heterogeneity")
    return report.extra.get(key)


def cmd_evaluate(cfg: RunConfig, args) -> int:
    data, ds, user_ids = load_prepared(cfg)
    reports = []
    for stem in _checkpoints(cfg, cfg.method, args.checkpoint):
        r = evaluate_checkpoint(cfg, stem, data, ds, user_ids, args.groupwise)
        reports.append(r)
        line = " ".join(f"{k}={v:.4f}" for k, v in r.metrics.items())
        extra = " ".join(f"{k}={v:.4f}" for k, v in r.extra.items())
        het = r.heterogeneity.get("heterogeneity")
        het = f" heterogeneity={het:.4f}" if het is not None else ""
        print(f"evaluate: {r.model} seed={r.seed} {line} {extra}{het}".rstrip())
    if args.compare:
        other = []
        for stem in _checkpoints(cfg, args.compare, None):
            other.append(evaluate_checkpoint(cfg, stem, data, ds, user_ids, args.groupwise))
        result = compare_reports(reports, other)
        path = Path(cfg.output_dir) / f"compare-{cfg.method}-vs-{args.compare}.json"
        write_json(path, result)
        for k, v in result.items():
            p = "n/a" if v["p_value"] is None else f"{v['p_value']:.6g}"
            print(f"compare: {k} {cfg.method}={v['mean_a']:.4f} {args.compare}={v['mean_b']:.4f} p={p}")
    return 0


# ---------------------------------------------------------------- groupwise / report


def cmd_groupwise(cfg: RunConfig, args) -> int:
    data, ds, _ = load_prepared(cfg)
    if ds is not None:
        raise ConfigError("the group-wise protocol needs a leave-last-out dataset")
    for seed in cfg.run_seeds():
        table = _groupwise_table(cfg, data, seed)
        print(f"groupwise: seed={seed} " + " ".join(f"{m}={np.round(v, 4).tolist()}" for m, v in table.items()))
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    root = Path(cfg.output_dir)
    by_method: dict[str, list[MetricsReport]] = {}
    for path in sorted(root.glob("*/seed-*/report.json")):
        r = MetricsReport.from_dict(read_json(path))
        by_method.setdefault(r.model, []).append(r)
    if not by_method:
        raise DataError(f"no reports under {root}; run `causald evaluate` first")
    summary = {}
    for method, reports in sorted(by_method.items()):
        keys = sorted({*reports[0].metrics, *[k for k, v in reports[0].extra.items() if isinstance(v, (int, float))]})
        if reports[0].heterogeneity:
            keys.append("heterogeneity")
        row = {}
        for k in keys:
            vals = [v for v in (_value(r, k) for r in reports) if v is not None]
            row[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, "n": len(vals)}
        summary[method] = row
    write_json(root / "summary.json", summary)
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "metric", "mean", "std", "n"))
        for method, row in summary.items():
            for k, v in row.items():
                w.writerow((method, k, repr(v["mean"]), repr(v["std"]), v["n"]))
    for method, row in summary.items():
        print(f"report: {method} " + " ".join(f"{k}={v['mean']:.4f}±{v['std']:.4f}" for k, v in row.items()))
    return 0


# ---------------------------------------------------------------- entry


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "groupwise": cmd_groupwise,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causald", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            p.add_argument("--" + f.name.replace("_", "-"), dest=f"opt_{f.name}", default=None, metavar=f.name.upper())
        if name == "evaluate":
            p.add_argument("--checkpoint", action="append", help="checkpoint stem (repeatable)")
            p.add_argument("--groupwise", action="store_true", help="add heterogeneity via the group-wise protocol")
            p.add_argument("--compare", metavar="METHOD", help="two-sided test against another method's runs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr
    )
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_") and v is not None}
    try:
        cfg = load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, ContainerError, EvaluationError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
