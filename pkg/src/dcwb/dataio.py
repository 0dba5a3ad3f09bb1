"""Typed CSV ingestion, the heart-disease schema, splitting and partitioning."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

MISSING_TOKENS = ("?", "")
COLUMN_TYPES = ("numeric", "categorical")


def _normalize_level(v: str) -> str:
    # "1.0" and "1" must name the same level across sites
    try:
        x = float(v)
    except ValueError:
        return v
    if math.isfinite(x) and x == int(x):
        return str(int(x))
    return repr(x)


@dataclass
class Dataset:
    """Column store. Numeric columns are float arrays with NaN for missing,
    categorical columns are object arrays of str with None for missing."""

    columns: dict[str, np.ndarray]
    schema: dict[str, str]
    response: str | None = None
    site_column: str | None = None
    name: str = ""

    def __post_init__(self):
        if set(self.columns) != set(self.schema):
            raise InputError(
                f"columns {sorted(self.columns)} do not match schema {sorted(self.schema)}"
            )
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise InputError(f"ragged columns: lengths {sorted(lengths)}")
        for c, t in self.schema.items():
            if t not in COLUMN_TYPES:
                raise InputError(f"column {c!r}: unknown type {t!r}")

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def __len__(self):
        return self.n_rows

    @property
    def y(self) -> np.ndarray:
        if self.response is None:
            raise InputError("dataset has no response column")
        return np.asarray(self.columns[self.response], dtype=float)

    def site_ids(self) -> np.ndarray:
        if self.site_column is None:
            raise InputError("dataset has no site column")
        return np.array([int(v) for v in self.columns[self.site_column]], dtype=int)

    def missing_mask(self, column: str) -> np.ndarray:
        v = self.columns[column]
        if self.schema[column] == "numeric":
            return np.isnan(v)
        return np.array([x is None for x in v], dtype=bool)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, columns={c: v[idx] for c, v in self.columns.items()})

    def with_column(self, name: str, values, kind: str) -> "Dataset":
        cols = dict(self.columns)
        schema = dict(self.schema)
        cols[name] = _coerce_array(values, kind)
        schema[name] = kind
        return replace(self, columns=cols, schema=schema)

    def rows(self):
        names = list(self.columns)
        for i in range(self.n_rows):
            yield {c: self.columns[c][i] for c in names}


def _coerce_array(values, kind):
    if kind == "numeric":
        return np.asarray(values, dtype=float)
    out = np.empty(len(values), dtype=object)
    out[:] = [None if v is None else str(v) for v in values]
    return out


def concat(datasets: Sequence[Dataset]) -> Dataset:
    first = datasets[0]
    for d in datasets[1:]:
        if d.schema != first.schema:
            raise InputError("cannot concatenate datasets with different schemas")
    cols = {c: np.concatenate([d.columns[c] for d in datasets]) for c in first.columns}
    return replace(first, columns=cols, name="")


def load_csv(
    path,
    schema: Mapping[str, str],
    response: str | None = None,
    site_column: str | None = None,
    names: Sequence[str] | None = None,
) -> Dataset:
    """Read a CSV into a typed Dataset; '?' and empty cells become missing.

    ``names`` supplies column names for header-less files (the UCI format).
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = list(names) if names is not None else next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if set(header) != set(schema) or len(header) != len(schema):
            raise InputError(f"{path}: columns {header} do not match schema {sorted(schema)}")
        raw = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            for h, cell in zip(header, row):
                raw[h].append(cell.strip())
    cols = {}
    for h in header:
        kind = schema[h]
        vals = raw[h]
        if kind == "numeric":
            arr = np.empty(len(vals))
            for i, v in enumerate(vals):
                if v in MISSING_TOKENS:
                    arr[i] = np.nan
                    continue
                try:
                    arr[i] = float(v)
                except ValueError:
                    raise InputError(f"{path}: row {i + 1}, column {h!r}: cannot read {v!r} as numeric") from None
            cols[h] = arr
        else:
            cols[h] = _coerce_array([None if v in MISSING_TOKENS else _normalize_level(v) for v in vals], kind)
    return Dataset(cols, dict(schema), response, site_column, name=path.stem)


def _cell(v, kind):
    if kind == "numeric":
        return "?" if np.isnan(v) else repr(float(v))
    return "?" if v is None else v


def write_csv(dataset: Dataset, path) -> None:
    names = list(dataset.columns)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(dataset.n_rows):
            w.writerow([_cell(dataset.columns[c][i], dataset.schema[c]) for c in names])


def write_rows_csv(rows: Sequence[Mapping], path, header: Sequence[str]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def dump_json(obj, path) -> None:
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# Heart disease data
# ---------------------------------------------------------------------------


def heart_schema() -> dict:
    text = resources.files("dcwb").joinpath("data/heart_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_heart_file(path, schema: dict | None = None) -> Dataset:
    schema = schema or heart_schema()
    cols = schema["raw_columns"]
    types = {c: schema["types"][c] for c in cols}
    return load_csv(path, types, names=cols)


def clean_heart(dataset: Dataset, retained: Sequence[str] | None = None, schema: dict | None = None) -> Dataset:
    """Binary response from ``num`` (> 0 means disease), retained covariates only,
    complete cases on the retained set."""
    schema = schema or heart_schema()
    raw = schema["raw_columns"]
    extra = {dataset.site_column} if dataset.site_column else set()
    if set(dataset.columns) - extra != set(raw):
        raise InputError(f"unexpected heart schema: {sorted(dataset.columns)}")
    retained = list(retained or schema["retained"])
    unknown = [c for c in retained if c not in raw]
    if unknown:
        raise InputError(f"retained covariates not in raw schema: {unknown}")
    resp = schema["response"]
    num = dataset.columns["num"]
    keep = ~np.isnan(num)
    for c in retained:
        keep &= ~dataset.missing_mask(c)
    idx = np.flatnonzero(keep)
    cols = {c: dataset.columns[c][idx] for c in retained}
    cols[resp] = (num[idx] > 0).astype(float)
    types = {c: dataset.schema[c] for c in retained}
    types[resp] = "numeric"
    if dataset.site_column:
        cols[dataset.site_column] = dataset.columns[dataset.site_column][idx]
        types[dataset.site_column] = "categorical"
    log.info("clean_heart %s: %d -> %d rows (%d dropped)", dataset.name, dataset.n_rows, len(idx), dataset.n_rows - len(idx))
    return Dataset(cols, types, resp, dataset.site_column, name=dataset.name)


def load_heart_sites(directory, schema: dict | None = None) -> Dataset:
    """Load the four per-site files from ``directory`` and tag rows with the site name."""
    schema = schema or heart_schema()
    parts = []
    for site, fname in schema["site_files"].items():
        d = load_heart_file(Path(directory) / fname, schema)
        d = d.with_column("site", [site] * d.n_rows, "categorical")
        d.site_column = "site"
        d.name = site
        parts.append(clean_heart(d, schema=schema))
    return concat(parts)


# ---------------------------------------------------------------------------
# Splitting and partitioning
# ---------------------------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-12))


def split_validation(dataset: Dataset, fraction: float, seed, stratify: bool = False):
    """Seeded train/validation split with ``round_half_up(n * fraction)`` validation rows.

    Stratified splits allocate validation rows to classes by largest remainder.
    """
    if not 0.0 < fraction < 1.0:
        raise InputError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = dataset.n_rows
    n_val = round_half_up(n * fraction)
    rng = np.random.default_rng(seed)
    if stratify:
        y = dataset.y
        classes = np.unique(y)
        if len(classes) < 2:
            warnings.warn("only one response class present; falling back to an unstratified split")
            stratify = False
    if not stratify:
        perm = rng.permutation(n)
        val = np.sort(perm[:n_val])
    else:
        groups = [np.flatnonzero(y == c) for c in classes]
        quotas = np.array([len(g) * n_val / n for g in groups])
        alloc = np.floor(quotas).astype(int)
        for j in np.argsort(-(quotas - alloc), kind="stable")[: n_val - alloc.sum()]:
            alloc[j] += 1
        picked = [g[rng.permutation(len(g))[:k]] for g, k in zip(groups, alloc)]
        val = np.sort(np.concatenate(picked))
    mask = np.zeros(n, dtype=bool)
    mask[val] = True
    return dataset.take(np.flatnonzero(~mask)), dataset.take(np.flatnonzero(mask))


def site_seed(seed: int, site_id: int):
    return [int(seed), int(site_id)]


def partition_horizontal(dataset: Dataset, S: int | None = None, scheme: str = "by-site-tag", seed: int = 0, site_column: str = "site"):
    """Split into mutually exclusive, exhaustive partitions.

    Returns a list of Datasets whose site column holds the integer site id
    (1..S); for ``by-site-tag`` the partitions follow the sorted tag values and
    each partition's ``name`` keeps its tag.
    """
    n = dataset.n_rows
    if scheme == "by-site-tag":
        col = dataset.site_column or site_column
        if col not in dataset.columns:
            raise InputError(f"dataset has no site tag column {col!r}")
        tags = dataset.columns[col]
        uniq = sorted({t for t in tags if t is not None}, key=_tag_key)
        if S is not None and S != len(uniq):
            raise InputError(f"requested {S} partitions but data has {len(uniq)} site tags")
        groups = [(str(t), np.flatnonzero(tags == t)) for t in uniq]
    else:
        if S is None or S < 1:
            raise InputError("partition count must be >= 1")
        if S > n:
            raise InputError(f"cannot split {n} rows into {S} partitions")
        if scheme == "random":
            order = np.random.default_rng(seed).permutation(n)
            chunks = [np.sort(c) for c in np.array_split(order, S)]
        elif scheme == "contiguous":
            chunks = np.array_split(np.arange(n), S)
        else:
            raise InputError(f"unknown partition scheme {scheme!r}")
        groups = [(str(k + 1), c) for k, c in enumerate(chunks)]
    out = []
    for k, (tag, idx) in enumerate(groups, start=1):
        if len(idx) == 0:
            raise InputError(f"partition {k} is empty")
        part = dataset.take(idx)
        part = part.with_column(site_column, [str(k)] * len(idx), "categorical")
        part.site_column = site_column
        part.name = tag
        out.append(part)
    return out


def _tag_key(t):
    try:
        return (0, float(t), "")
    except ValueError:
        return (1, 0.0, t)


def split_sites(parts: Sequence[Dataset], fraction: float, seed: int, stratify: bool):
    """Per-site validation splits with seeds derived from (seed, site id)."""
    out = []
    for p in parts:
        sid = int(p.columns[p.site_column][0])
        if fraction > 0:
            tr, va = split_validation(p, fraction, site_seed(seed, sid), stratify)
        else:
            tr, va = p, p.take(np.array([], dtype=int))
        out.append((sid, tr, va))
    return out


# ---------------------------------------------------------------------------
# Global feature statistics
# ---------------------------------------------------------------------------


def feature_stats(dataset: Dataset, features: Sequence[str]) -> dict:
    """min/max of numeric features and level sets of categorical ones."""
    ranges, levels = {}, {}
    for f in features:
        if dataset.schema[f] == "numeric":
            x = dataset.columns[f]
            x = x[~np.isnan(x)]
            if x.size:
                ranges[f] = [float(x.min()), float(x.max())]
        else:
            levels[f] = sorted({v for v in dataset.columns[f] if v is not None}, key=_tag_key)
    return {"ranges": ranges, "levels": levels}


def merge_feature_stats(stats: Sequence[dict]) -> dict:
    ranges, levels = {}, {}
    for s in stats:
        for f, (lo, hi) in s["ranges"].items():
            if f in ranges:
                ranges[f] = [min(ranges[f][0], lo), max(ranges[f][1], hi)]
            else:
                ranges[f] = [lo, hi]
        for f, lv in s["levels"].items():
            levels.setdefault(f, set()).update(lv)
    return {
        "ranges": {f: ranges[f] for f in sorted(ranges)},
        "levels": {f: sorted(v, key=_tag_key) for f, v in sorted(levels.items())},
    }


# ---------------------------------------------------------------------------
# Partial effects
# ---------------------------------------------------------------------------


def export_partial_effects(model, resolution: int = 100) -> list[dict]:
    """Univariate effect curves for every feature with a single-feature learner.

    Rows carry the shared effect, each site's deviation and their sum. Learners
    over two features (row tensors, multi-feature linear) are not decomposed.
    """
    from .model import univariate_effect

    rows = []
    features = []
    for s in model.specs:
        if len(s.features) == 1 and s.features[0] not in features:
            features.append(s.features[0])
    for f in features:
        spec = next(s for s in model.specs if s.features == (f,))
        if spec.kind == "categorical" or f in spec.levels:
            grid = list(spec.levels[f])
        elif spec.kind == "pspline":
            lo, hi = spec.knots[f]
            grid = list(np.linspace(lo, hi, resolution))
        else:
            lo, hi = model.feature_ranges.get(f, (0.0, 1.0))
            grid = list(np.linspace(lo, hi, resolution))
        shared, per_site = univariate_effect(model, f, grid)
        sites = model.sites or [None]
        for j, x in enumerate(grid):
            for sid in sites:
                site_part = float(per_site[sid][j]) if sid is not None else 0.0
                rows.append(
                    {
                        "feature": f,
                        "x": x if isinstance(x, str) else float(x),
                        "site": "" if sid is None else str(sid),
                        "shared": float(shared[j]),
                        "site_effect": site_part,
                        "total": float(shared[j]) + site_part,
                    }
                )
    return rows


EFFECT_COLUMNS = ("feature", "x", "site", "shared", "site_effect", "total")
