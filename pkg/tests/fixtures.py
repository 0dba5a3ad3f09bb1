"""Synthetic multi-site data and learner sets shared by the tests."""

from __future__ import annotations

import json

import numpy as np
from scipy.special import expit

from dcwb.basis import BaseLearnerSpec
from dcwb.dataio import Dataset, partition_horizontal
from dcwb.host import HostSettings

LEVELS = ("a", "b", "c")


def make_sites(family="gaussian", S=3, n=300, p=4, seed=0, categorical=True, sizes=None) -> Dataset:
    """Pooled dataset with a string site column ``site`` holding 1..S.

    Shared signal in x1, x2 (nonlinear) and the category, plus a per-site
    intercept and a per-site slope on x1.
    """
    rng = np.random.default_rng(seed)
    sizes = sizes or [n // S + (1 if k < n % S else 0) for k in range(S)]
    site = np.repeat(np.arange(1, S + 1), sizes)
    N = len(site)
    X = rng.uniform(-2, 2, size=(N, p))
    shift = rng.normal(0, 0.6, S)[site - 1]
    slope = rng.normal(0, 0.3, S)[site - 1]
    eta = np.sin(1.3 * X[:, 0]) + (1 + slope) * 0.5 * X[:, 0] + 0.4 * X[:, 1] ** 2 - 0.6 + shift
    cols = {f"x{j + 1}": X[:, j] for j in range(p)}
    schema = {f"x{j + 1}": "numeric" for j in range(p)}
    if categorical:
        g = rng.choice(LEVELS, N)
        eta = eta + np.where(g == "b", 0.7, 0.0) - np.where(g == "c", 0.4, 0.0)
        cols["g"] = np.array(g, dtype=object)
        schema["g"] = "categorical"
    if family == "gaussian":
        y = eta + rng.normal(0, 0.5, N)
    else:
        y = (rng.random(N) < expit(eta)).astype(float)
    cols["y"] = y
    schema["y"] = "numeric"
    cols["site"] = np.array([str(s) for s in site], dtype=object)
    schema["site"] = "categorical"
    return Dataset(cols, schema, "y", "site", name=f"{family}-S{S}")


def split_by_site(data: Dataset):
    return partition_horizontal(data, scheme="by-site-tag")


def dense_learners(p=4, categorical=True, df=2.2, n_basis=8, S=3):
    rows = [dict(kind="pspline", features=(f"x{j + 1}",), n_basis=n_basis, df_target=df) for j in range(p)]
    if categorical:
        rows.append(dict(kind="categorical", features=("g",), df_target=df))
    rows.append(dict(kind="linear", features=("x1", "x2"), df_target=df))
    shared = list(rows)
    rows += [dict(r, site_specific=True) for r in shared]
    rows.append(dict(kind="linear", features=(), df_target=min(3.0, S), site_specific=True))
    return [BaseLearnerSpec(id=i, **r) for i, r in enumerate(rows)]


def sparse_learners(df=2.2):
    rows = [
        dict(kind="pspline", features=("x1",), n_basis=8, df_target=df),
        dict(kind="linear", features=("x2",)),
        dict(kind="pspline", features=("x1",), n_basis=8, df_target=df, site_specific=True),
        dict(kind="linear", features=(), df_target=1.0, site_specific=True),
    ]
    return [BaseLearnerSpec(id=i, **r) for i, r in enumerate(rows)]


def cost_learners(n_learners, d):
    """``n_learners`` shared P-splines of dimension d, each with a site twin."""
    shared = [dict(kind="pspline", features=(f"x{j + 1}",), n_basis=d, df_target=2.5) for j in range(n_learners)]
    rows = shared + [dict(r, site_specific=True) for r in shared]
    return [BaseLearnerSpec(id=i, **r) for i, r in enumerate(rows)]


def settings(family="gaussian", M=200, **kw) -> HostSettings:
    base = dict(loss=family, learning_rate=0.1, max_iters=M, validation_fraction=0.2, seed=7,
                stratify=family == "binomial")
    base.update(kw)
    return HostSettings(**base)


def site_frames(transcript):
    for line in transcript:
        doc = json.loads(line)
        if doc["sender"] != "host":
            yield int(doc["sender"].split(":")[1]), doc


def _numeric_lists(obj):
    if isinstance(obj, list):
        if obj and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj):
            yield obj
        for v in obj:
            yield from _numeric_lists(v)
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _numeric_lists(v)


def scan_transcript(transcript, parts, n_val):
    """Problems found in site-sent frames: row-length vectors, raw responses, aborts."""
    problems = []
    rows = {int(p.columns[p.site_column][0]): p for p in parts}
    for sid, doc in site_frames(transcript):
        p = rows[sid]
        forbidden = {p.n_rows, p.n_rows - n_val[sid], n_val[sid]} - {0}
        if doc["tag"] == "Abort":
            problems.append(f"site {sid} aborted")
        for lst in _numeric_lists(doc["body"]):
            if len(lst) in forbidden:
                problems.append(f"site {sid} {doc['tag']}: vector of length {len(lst)}")
            y = p.y
            if len(lst) >= 5 and any(np.array_equal(lst, y[i : i + len(lst)]) for i in range(len(y) - len(lst) + 1)):
                problems.append(f"site {sid} {doc['tag']}: run of raw responses")
    return problems
