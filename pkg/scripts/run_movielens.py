"""MovieLens-1M leave-last-out comparison of base, CausalD and its ablations.

    python scripts/run_movielens.py --ratings data/ml-1m/ratings.dat --seeds 0 1 2

``causald-ho`` trains CausalD with teachers from a random (homogeneous) user split.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from causald.experiments import MovieLensSettings, find_movielens, movielens_data, movielens_run
from causald.evaluation import t_test_two_sided


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ratings", default=None, help="path to ratings.dat")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--out", type=Path, default=Path("runs/movielens"))
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--teachers", type=int, default=None)
    parser.add_argument("--lambda-fda", type=float, default=None)
    parser.add_argument("--lambda-bda", type=float, default=None)
    parser.add_argument("--methods", nargs="+", default=None)
    args = parser.parse_args()

    path = args.ratings or find_movielens()
    if path is None:
        sys.exit("ratings.dat not found; pass --ratings or set CAUSALD_ML1M")

    settings = MovieLensSettings()
    for key in ("epochs", "teachers", "lambda_fda", "lambda_bda", "methods"):
        v = getattr(args, key)
        if v is not None:
            setattr(settings, "n_teachers" if key == "teachers" else key, tuple(v) if key == "methods" else v)

    per_method: dict[str, list] = {m: [] for m in settings.methods}
    for seed in args.seeds:
        t0 = time.perf_counter()
        data = movielens_data(path, seed, settings.k_core)
        print(f"seed={seed} users={data.n_users} items={data.n_items} eval={len(data.evalset)}")
        for method, r in movielens_run(data, seed, settings).items():
            r.write(args.out / method, f"seed-{seed}")
            per_method[method].append(r)
            het = r.heterogeneity["heterogeneity"]
            line = " ".join(f"{k}={v:.4f}" for k, v in r.metrics.items())
            print(f"seed={seed} {method:15s} {line} heterogeneity={het:.4f} ({r.extra['train_seconds']:.0f}s)")
        print(f"seed={seed} done in {time.perf_counter() - t0:.0f}s")

    summary = {}
    for method, reports in per_method.items():
        row = {k: float(np.mean([r.metrics[k] for r in reports])) for k in reports[0].metrics}
        row["heterogeneity"] = float(np.mean([r.heterogeneity["heterogeneity"] for r in reports]))
        if method != "base" and len(reports) > 1:
            a = [r.metrics["auc"] for r in reports]
            b = [r.metrics["auc"] for r in per_method["base"]]
            row["auc_p_vs_base"] = t_test_two_sided(a, b) if np.var(a) + np.var(b) > 0 else None
        summary[method] = row
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for method, row in summary.items():
        print(f"mean {method:15s} " + " ".join(f"{k}={v:.4f}" for k, v in row.items() if v is not None))


if __name__ == "__main__":
    main()
