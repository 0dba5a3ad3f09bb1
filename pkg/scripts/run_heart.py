#!/usr/bin/env python3
"""Pooled vs distributed boosting on the heart-disease sites.

Default mode runs both fits for a fixed number of iterations without early
stopping and checks that they agree. ``--long`` runs with early stopping on
a large iteration budget and compares the two training-risk traces at every
checkpoint. Without ``--heart-dir`` the synthetic stand-in files are used.
"""
import argparse
import tempfile
import time

import numpy as np

from dcwb.config import FitConfig, heart_config, specs_for_data
from dcwb.dataio import load_heart_sites, partition_horizontal
from dcwb.model import compare_models
from dcwb.pooled import fit_pooled_sites
from dcwb.synthetic import write_heart_files
from dcwb.transport import fit_distributed


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--heart-dir", help="directory with the four processed files")
    ap.add_argument("--max-iters", type=int, default=1000)
    ap.add_argument("--long", action="store_true", help="early stopping on a 100000-iteration budget")
    ap.add_argument("--patience", type=int, default=5)
    ap.add_argument("--checkpoint", type=int, default=500, help="risk comparison stride in --long mode")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    heart_dir = args.heart_dir
    if heart_dir is None:
        heart_dir = tempfile.mkdtemp(prefix="heart-")
        write_heart_files(heart_dir)
        print(f"synthetic files in {heart_dir} (results say nothing about the real data)")

    if args.long:
        cfg = FitConfig(max_iters=100_000, patience=args.patience, seed=args.seed)
    else:
        cfg = FitConfig(max_iters=args.max_iters, patience=None, seed=args.seed)
    cfg = heart_config(cfg)
    data = load_heart_sites(heart_dir)
    parts = partition_horizontal(data, scheme="by-site-tag")
    print("site rows:", {p.name: p.n_rows for p in parts})
    specs = specs_for_data(cfg, data, len(parts))
    st = cfg.host_settings()

    t0 = time.perf_counter()
    pooled = fit_pooled_sites(parts, specs, st)
    t1 = time.perf_counter()
    dist, ledger, _ = fit_distributed(parts, specs, st)
    t2 = time.perf_counter()
    print(f"pooled {t1 - t0:.1f}s, distributed {t2 - t1:.1f}s")

    report = compare_models(dist, pooled)
    print(f"iterations run {dist.n_iterations}, best {dist.best_iteration}, final train risk {dist.final_risk:.6f}")
    print(f"selection logs equal: {report['selection_logs_equal']}, overall agreement: {report['pass']}")

    if args.long:
        a = np.array([r["train_risk"] for r in dist.risk_trace])
        b = np.array([r["train_risk"] for r in pooled.risk_trace])
        n = min(len(a), len(b))
        idx = list(range(0, n, args.checkpoint)) + [n - 1]
        worst = max(abs(a[i] - b[i]) for i in idx)
        print(f"checkpoints {len(idx)}, worst |risk difference| {worst:.3g}")
        val = [r["validation_risk"] for r in dist.risk_trace]
        print(f"validation risk at stop: {val[dist.best_iteration]:.6f}")

    imp = dist.importance()
    print("importance (share of training-risk reduction):")
    for k, v in sorted(imp.items(), key=lambda kv: -kv[1])[:8]:
        print(f"  {dist.specs[k].label:32s} {v:.3f}")


if __name__ == "__main__":
    main()
