"""Synthetic stand-in for the four processed UCI heart-disease files.

The real files are not shipped. This generator writes files with the same
header-less 14-column layout, '?' missing cells and raw row counts
(303/294/123/200), with missingness placed so that complete-case cleaning on
the default retained covariates leaves 303/292/116/140 rows. Values are drawn
from rough per-site marginals; the response follows a logistic model with a
shared oldpeak/thalach/cp signal and site-specific intercepts. Numbers fitted
on it say nothing about the real data.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.special import expit

from .dataio import heart_schema

# rows, disease prevalence shift, male share, thalach mean
SITES = {
    "cleveland": dict(n=303, shift=-1.6, male=0.68, thalach=150.0, seed=11),
    "hungarian": dict(n=294, shift=-2.1, male=0.72, thalach=139.0, seed=12),
    "switzerland": dict(n=123, shift=1.8, male=0.92, thalach=122.0, seed=13),
    "va": dict(n=200, shift=0.1, male=0.97, thalach=122.0, seed=14),
}


def _missing(rng, n, k, exclude=()):
    pool = np.setdiff1d(np.arange(n), np.asarray(exclude, dtype=int))
    return np.sort(rng.choice(pool, size=k, replace=False))


def generate_site(name: str) -> list[list[str]]:
    cfg = SITES[name]
    n = cfg["n"]
    rng = np.random.default_rng(cfg["seed"])
    age = np.clip(np.round(rng.normal(54, 9, n)), 28, 77)
    sex = (rng.random(n) < cfg["male"]).astype(int)
    cp = rng.choice([1, 2, 3, 4], size=n, p=[0.08, 0.17, 0.28, 0.47])
    trestbps = np.clip(np.round(rng.normal(132, 18, n)), 80, 200)
    chol = np.clip(np.round(rng.normal(246, 50, n)), 100, 560)
    fbs = (rng.random(n) < 0.15).astype(int)
    restecg = rng.choice([0, 1, 2], size=n, p=[0.55, 0.2, 0.25])
    thalach = np.clip(np.round(rng.normal(cfg["thalach"], 23, n)), 60, 202)
    exang = (rng.random(n) < 0.35).astype(int)
    oldpeak = np.clip(np.round(rng.gamma(1.2, 0.9, n), 1), 0, 6.2)
    if name == "switzerland":
        oldpeak = np.round(oldpeak - rng.random(n) * 0.6 * (rng.random(n) < 0.1), 1)
    slope = rng.choice([1, 2, 3], size=n)
    ca = rng.choice([0, 1, 2, 3], size=n, p=[0.58, 0.22, 0.13, 0.07])
    thal = rng.choice([3, 6, 7], size=n, p=[0.55, 0.06, 0.39])

    eta = (
        cfg["shift"]
        + 0.9 * (oldpeak - 1.0)
        - 0.03 * (thalach - 140)
        + 1.1 * (cp == 4)
        + 0.8 * sex
        + 0.9 * exang
        + 0.02 * (age - 54)
    )
    disease = rng.random(n) < expit(eta)
    num = np.where(disease, rng.integers(1, 5, n), 0)

    cols = dict(
        age=age, sex=sex, cp=cp, trestbps=trestbps, chol=chol, fbs=fbs, restecg=restecg,
        thalach=thalach, exang=exang, oldpeak=oldpeak, slope=slope, ca=ca, thal=thal, num=num,
    )
    cells = {c: [_fmt(v) for v in vals] for c, vals in cols.items()}
    miss = _missingness(name, n, rng)
    for c, rows in miss.items():
        for i in rows:
            cells[c][i] = "?"
    if name == "switzerland":
        cells["chol"] = ["0"] * n
    order = heart_schema()["raw_columns"]
    return [[cells[c][i] for c in order] for i in range(n)]


def _fmt(v) -> str:
    v = float(v)
    return repr(v)


def _missingness(name, n, rng) -> dict[str, np.ndarray]:
    """Missing cells per column; retained-covariate gaps hit the stated number of rows."""
    m = {}
    if name == "cleveland":
        m["ca"] = _missing(rng, n, 4)
        m["thal"] = _missing(rng, n, 2)
    elif name == "hungarian":
        # one row misses trestbps, thalach and exang together, another restecg
        a, b = _missing(rng, n, 2)
        m.update(trestbps=[a], thalach=[a], exang=[a], restecg=[b])
        m["chol"] = _missing(rng, n, 23)
        m["fbs"] = _missing(rng, n, 8)
        m["slope"] = _missing(rng, n, 190)
        m["ca"] = _missing(rng, n, 291)
        m["thal"] = _missing(rng, n, 266)
    elif name == "switzerland":
        rows = _missing(rng, n, 7)
        m.update(trestbps=rows[:2], restecg=rows[2:3], thalach=rows[3:4], exang=rows[3:4])
        # six oldpeak gaps, three of them on rows already incomplete
        m["oldpeak"] = np.sort(np.concatenate([rows[4:], rows[:3]]))
        m["fbs"] = _missing(rng, n, 75)
        m["slope"] = _missing(rng, n, 17)
        m["ca"] = _missing(rng, n, 118)
        m["thal"] = _missing(rng, n, 52)
    elif name == "va":
        core = _missing(rng, n, 60)
        m["trestbps"] = core[:56]
        m["oldpeak"] = core[4:]
        m["thalach"] = core[:53]
        m["exang"] = core[:53]
        m["chol"] = _missing(rng, n, 7)
        m["fbs"] = _missing(rng, n, 7)
        m["slope"] = _missing(rng, n, 102)
        m["ca"] = _missing(rng, n, 198)
        m["thal"] = _missing(rng, n, 166)
    return m


def write_heart_files(directory) -> dict[str, Path]:
    """Write the four synthetic site files; returns their paths by site."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = {}
    for site, fname in heart_schema()["site_files"].items():
        path = directory / fname
        path.write_text("".join(",".join(r) + "\n" for r in generate_site(site)), encoding="utf-8")
        out[site] = path
    return out
