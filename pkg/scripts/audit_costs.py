#!/usr/bin/env python3
"""Count the values exchanged in audit runs and check them against the closed forms.

Each (M, |B|, d) triple runs |B| shared P-splines of dimension d, each with a
site-specific twin, over simulated sites with early stopping off.
"""
import argparse

import numpy as np

from dcwb.basis import BaseLearnerSpec
from dcwb.dataio import Dataset, partition_horizontal
from dcwb.host import HostSettings, audit_costs, expected_costs
from dcwb.transport import fit_distributed

DEFAULT_RUNS = ((3, 2, 5), (10, 4, 12), (50, 6, 10))


def make_data(n_features: int, n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, n_features))
    y = np.sin(2 * X[:, 0]) + 0.3 * X.sum(axis=1) + rng.normal(0, 0.3, n)
    cols = {f"x{j + 1}": X[:, j] for j in range(n_features)}
    cols["y"] = y
    return Dataset(cols, {c: "numeric" for c in cols}, "y")


def learners(n_learners: int, d: int):
    shared = [dict(kind="pspline", features=(f"x{j + 1}",), n_basis=d, df_target=2.5) for j in range(n_learners)]
    return [BaseLearnerSpec(id=i, **r) for i, r in enumerate(shared + [dict(r, site_specific=True) for r in shared])]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sites", type=int, default=3)
    ap.add_argument("--rows", type=int, default=300)
    args = ap.parse_args()
    for M, B, d in DEFAULT_RUNS:
        parts = partition_horizontal(make_data(B, args.rows, seed=M), args.sites, "contiguous")
        st = HostSettings(max_iters=M, patience=None, validation_fraction=0.2, seed=1)
        _, ledger, _ = fit_distributed(parts, learners(B, d), st)
        audit_costs(ledger, M, B, d)
        want = expected_costs(M, B, d)
        print(f"M={M:3d} |B|={B} d={d:2d}  site init {want['site_init']:6d}  site fitting {want['site_fitting']:6d}  "
              f"host fitting {want['host_fitting']:6d}  ledger matches")


if __name__ == "__main__":
    main()
