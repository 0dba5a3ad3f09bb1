"""Base-learner specifications, basis transformations and penalty matrices.

Four learner kinds are supported: linear, P-spline, categorical (one-hot with a
ridge penalty) and the row-wise tensor product of two marginal bases.  A spec
flagged ``site_specific`` stands for the tensor product of the one-hot site
indicator with its own basis; sites only ever evaluate the inner basis, the
pooled reference evaluates the full tensor.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.interpolate import BSpline

from .errors import InputError

log = logging.getLogger(__name__)

KINDS = ("linear", "pspline", "categorical", "row_tensor")
PENALTY_KINDS = ("zero", "ridge", "difference", "kronecker_sum")


@dataclass(frozen=True)
class BaseLearnerSpec:
    id: int
    kind: str
    features: tuple[str, ...]
    degree: int = 3
    n_basis: int = 10
    diff_order: int = 2
    df_target: float | None = None
    site_specific: bool = False
    intercept: bool = True
    # Filled in once global feature statistics are known.
    knots: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    levels: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"learner {self.id}: unknown kind {self.kind!r}")
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(
            self, "knots", {k: (float(v[0]), float(v[1])) for k, v in dict(self.knots).items()}
        )
        object.__setattr__(
            self, "levels", {k: tuple(str(x) for x in v) for k, v in dict(self.levels).items()}
        )
        if self.kind == "pspline" or (self.kind == "row_tensor"):
            if self.n_basis < self.degree + 1:
                raise InputError(
                    f"learner {self.id}: n_basis {self.n_basis} < degree + 1 = {self.degree + 1}"
                )
            if not 1 <= self.diff_order < self.n_basis:
                raise InputError(
                    f"learner {self.id}: difference order {self.diff_order} must lie in [1, n_basis)"
                )
        if self.kind in ("pspline", "categorical") and len(self.features) != 1:
            raise InputError(f"learner {self.id}: {self.kind} takes exactly one feature")
        if self.kind == "row_tensor" and len(self.features) != 2:
            raise InputError(f"learner {self.id}: row_tensor takes exactly two features")
        if self.kind == "linear" and not self.features and not self.intercept:
            raise InputError(f"learner {self.id}: linear learner without features needs an intercept")
        if self.df_target is not None and self.df_target <= 0:
            raise InputError(f"learner {self.id}: df_target must be positive")

    # -- identity -----------------------------------------------------------

    @property
    def signature(self) -> tuple:
        """Key identifying the inner basis g_l (shared learner and its site twin agree)."""
        if self.kind == "pspline":
            hyper = (self.degree, self.n_basis, self.diff_order)
        elif self.kind == "linear":
            hyper = (self.intercept,)
        elif self.kind == "row_tensor":
            hyper = (self.degree, self.n_basis, self.diff_order)
        else:
            hyper = ()
        return (self.kind, self.features, hyper)

    @property
    def label(self) -> str:
        feats = ",".join(self.features) if self.features else "1"
        base = f"{self.kind}({feats})"
        return f"site x {base}" if self.site_specific else base

    def is_categorical(self, feature: str) -> bool:
        if self.kind == "categorical":
            return True
        return feature in self.levels

    @property
    def dim(self) -> int:
        """Dimension of the inner basis g_l."""
        if self.kind == "linear":
            return len(self.features) + int(self.intercept)
        if self.kind == "pspline":
            return self.n_basis
        if self.kind == "categorical":
            return len(self._levels_of(self.features[0]))
        return self._marginal_dim(self.features[0]) * self._marginal_dim(self.features[1])

    def _marginal_dim(self, feature):
        if self.is_categorical(feature):
            return len(self._levels_of(feature))
        return self.n_basis

    def _levels_of(self, feature):
        try:
            return self.levels[feature]
        except KeyError:
            raise InputError(f"learner {self.id}: levels of {feature!r} not resolved") from None

    def _range_of(self, feature):
        try:
            return self.knots[feature]
        except KeyError:
            raise InputError(f"learner {self.id}: knot range of {feature!r} not resolved") from None

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        spline = self.kind in ("pspline", "row_tensor")
        return {
            "id": self.id,
            "kind": self.kind,
            "features": list(self.features),
            "degree": self.degree if spline else None,
            "n_basis": self.n_basis if spline else None,
            "diff_order": self.diff_order if spline else None,
            "df_target": self.df_target,
            "site_specific": self.site_specific,
            "intercept": self.intercept if self.kind == "linear" else None,
            "knots": {k: list(v) for k, v in sorted(self.knots.items())},
            "levels": {k: list(v) for k, v in sorted(self.levels.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BaseLearnerSpec":
        kw = dict(id=int(d["id"]), kind=d["kind"], features=tuple(d.get("features") or ()))
        for name in ("degree", "n_basis", "diff_order"):
            if d.get(name) is not None:
                kw[name] = int(d[name])
        if d.get("df_target") is not None:
            kw["df_target"] = float(d["df_target"])
        kw["site_specific"] = bool(d.get("site_specific", False))
        if d.get("intercept") is not None:
            kw["intercept"] = bool(d["intercept"])
        kw["knots"] = {k: tuple(v) for k, v in (d.get("knots") or {}).items()}
        kw["levels"] = {k: tuple(v) for k, v in (d.get("levels") or {}).items()}
        return cls(**kw)


def specs_to_json(specs: Sequence[BaseLearnerSpec]) -> str:
    """Canonical JSON document for a spec list (ordered array, sorted keys)."""
    return json.dumps([s.to_dict() for s in specs], sort_keys=True, separators=(",", ":"))


def specs_from_json(text: str) -> list[BaseLearnerSpec]:
    specs = [BaseLearnerSpec.from_dict(d) for d in json.loads(text)]
    check_spec_ids(specs)
    return specs


def check_spec_ids(specs: Sequence[BaseLearnerSpec]) -> None:
    ids = [s.id for s in specs]
    if ids != list(range(len(specs))):
        raise InputError(f"learner ids must be dense and ordered 0..{len(specs) - 1}, got {ids}")


def resolve_specs(specs, ranges: Mapping[str, tuple[float, float]], levels: Mapping[str, Sequence[str]]):
    """Attach global knot ranges and level sets to every spec that needs them."""
    out = []
    for s in specs:
        kn, lv = {}, {}
        for f in s.features:
            if f in levels:
                lv[f] = tuple(levels[f])
            elif s.kind == "categorical":
                raise InputError(f"learner {s.id}: feature {f!r} has no level set")
            elif s.kind in ("pspline", "row_tensor"):
                if f not in ranges:
                    raise InputError(f"learner {s.id}: feature {f!r} has no range")
                kn[f] = tuple(ranges[f])
        out.append(replace(s, knots=kn, levels=lv))
    return out


def cap_dummy_df(specs, n_sites: int):
    """Cap df targets of dummy-coded learners at their column count.

    A categorical learner can reach at most as many df as it has levels and
    the random intercept at most the number of sites. Targets above that are
    lowered with a warning instead of failing calibration.
    """
    out = []
    for s in specs:
        top = None
        if s.kind == "categorical":
            top = float(len(s.levels[s.features[0]]))
        elif s.kind == "linear" and not s.features and s.site_specific:
            top = float(n_sites)
        if top is not None and s.df_target is not None and s.df_target > top:
            log.warning("learner %d: df target %g capped at %g", s.id, s.df_target, top)
            s = replace(s, df_target=top)
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# Basis transformations
# ---------------------------------------------------------------------------


def build_linear_basis(x, include_intercept: bool = True) -> np.ndarray:
    """Rows ``(1, x)`` or ``(x)``; ``x`` may be a vector or an n x p matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    bad = np.argwhere(~np.isfinite(x))
    if bad.size:
        raise InputError(f"non-finite value in linear basis input at row {int(bad[0, 0])}")
    if include_intercept:
        return np.hstack([np.ones((x.shape[0], 1)), x])
    return x.copy()


def equidistant_knots(lo: float, hi: float, degree: int, n_basis: int) -> np.ndarray:
    """Knot vector with ``n_basis - degree`` equal intervals on [lo, hi] and
    ``degree`` equally spaced extension knots beyond each boundary."""
    if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
        raise InputError(f"degenerate knot range ({lo}, {hi})")
    n_int = n_basis - degree
    h = (hi - lo) / n_int
    return lo + h * np.arange(-degree, n_int + degree + 1, dtype=float)


def build_bspline_basis(x, degree: int, n_basis: int, knot_range: tuple[float, float]) -> np.ndarray:
    """B-spline design rows on equidistant knots; inputs outside the range are clamped."""
    if n_basis < degree + 1:
        raise InputError(f"n_basis {n_basis} < degree + 1")
    lo, hi = float(knot_range[0]), float(knot_range[1])
    t = equidistant_knots(lo, hi, degree, n_basis)
    x = np.asarray(x, dtype=float)
    bad = np.argwhere(~np.isfinite(x))
    if bad.size:
        raise InputError(f"non-finite value in spline basis input at row {int(bad[0, 0])}")
    if x.size == 0:
        return np.zeros((0, n_basis))
    xc = np.clip(x, lo, hi)
    # knots are pinned so t[degree] == lo and t[n_basis] == hi exactly
    t[degree], t[n_basis] = lo, hi
    return BSpline.design_matrix(xc, t, degree).toarray()


def build_categorical_basis(x, levels: Sequence[str]) -> np.ndarray:
    lookup = {lv: j for j, lv in enumerate(levels)}
    out = np.zeros((len(x), len(levels)))
    for i, v in enumerate(x):
        try:
            out[i, lookup[v]] = 1.0
        except KeyError:
            raise InputError(f"level {v!r} at row {i} not in the global level set") from None
    return out


def build_row_tensor(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product, left-major: row i is ``kron(left[i], right[i])``."""
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if left.shape[0] != right.shape[0]:
        raise InputError(f"row count mismatch in row tensor: {left.shape[0]} vs {right.shape[0]}")
    n = left.shape[0]
    return (left[:, :, None] * right[:, None, :]).reshape(n, left.shape[1] * right.shape[1])


def design_matrix(spec: BaseLearnerSpec, columns: Mapping[str, np.ndarray]) -> np.ndarray:
    """Inner design Z_l of a resolved spec over a column mapping."""
    if spec.kind == "linear":
        if not spec.features:
            n = len(next(iter(columns.values())))
            return np.ones((n, 1))
        x = np.column_stack([np.asarray(columns[f], dtype=float) for f in spec.features])
        return build_linear_basis(x, spec.intercept)
    if spec.kind == "pspline":
        f = spec.features[0]
        return build_bspline_basis(columns[f], spec.degree, spec.n_basis, spec._range_of(f))
    if spec.kind == "categorical":
        f = spec.features[0]
        return build_categorical_basis(columns[f], spec._levels_of(f))
    return build_row_tensor(*(_marginal_design(spec, f, columns[f]) for f in spec.features))


def _marginal_design(spec, feature, x):
    if spec.is_categorical(feature):
        return build_categorical_basis(x, spec._levels_of(feature))
    return build_bspline_basis(x, spec.degree, spec.n_basis, spec._range_of(feature))


def site_indicator(site_of_row: Sequence[int], sites: Sequence[int]) -> np.ndarray:
    """One-hot site design Z_0 over the ordered roster."""
    return build_categorical_basis([str(s) for s in site_of_row], [str(s) for s in sites])


# ---------------------------------------------------------------------------
# Penalties
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PenaltyMatrix:
    matrix: np.ndarray
    kind: str = "zero"

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise InputError(f"unknown penalty kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def scaled(self, lam: float) -> np.ndarray:
        return lam * self.matrix

    @classmethod
    def zero(cls, d: int) -> "PenaltyMatrix":
        return cls(np.zeros((d, d)), "zero")

    @classmethod
    def ridge(cls, d: int, lam: float = 1.0) -> "PenaltyMatrix":
        return cls(lam * np.eye(d), "ridge")

    @classmethod
    def difference(cls, d: int, v: int, lam: float = 1.0) -> "PenaltyMatrix":
        D = build_difference_penalty(d, v)
        return cls(lam * (D.T @ D), "difference")


def build_difference_penalty(d: int, v: int) -> np.ndarray:
    """(d - v) x d matrix of v-th order differences."""
    if not 1 <= v < d:
        raise InputError(f"difference order {v} must satisfy 1 <= v < d = {d}")
    return np.diff(np.eye(d), n=v, axis=0)


def build_kronecker_sum_penalty(K0, lam0: float, Kl, lam_l: float, S: int, d: int) -> PenaltyMatrix:
    """``lam0 * K0 (x) I_d + I_S (x) lam_l * Kl`` for the site tensor learner."""
    K0 = np.asarray(getattr(K0, "matrix", K0), dtype=float)
    Kl = np.asarray(getattr(Kl, "matrix", Kl), dtype=float)
    if K0.shape != (S, S):
        raise InputError(f"site penalty must be {S}x{S}, got {K0.shape}")
    if Kl.shape != (d, d):
        raise InputError(f"learner penalty must be {d}x{d}, got {Kl.shape}")
    K = lam0 * np.kron(K0, np.eye(d)) + np.kron(np.eye(S), lam_l * Kl)
    return PenaltyMatrix(K, "kronecker_sum")


def unit_penalty(spec: BaseLearnerSpec) -> PenaltyMatrix:
    """Unscaled penalty of the inner basis (lambda = 1)."""
    d = spec.dim
    if spec.kind == "linear":
        return PenaltyMatrix.ridge(d) if spec.df_target is not None else PenaltyMatrix.zero(d)
    if spec.kind == "pspline":
        return PenaltyMatrix.difference(d, spec.diff_order)
    if spec.kind == "categorical":
        return PenaltyMatrix.ridge(d)
    ka, kb = (_marginal_penalty(spec, f) for f in spec.features)
    K = np.kron(ka, np.eye(kb.shape[0])) + np.kron(np.eye(ka.shape[0]), kb)
    return PenaltyMatrix(K, "kronecker_sum")


def _marginal_penalty(spec, feature):
    if spec.is_categorical(feature):
        return np.eye(len(spec._levels_of(feature)))
    D = build_difference_penalty(spec.n_basis, spec.diff_order)
    return D.T @ D


def is_penalized(spec: BaseLearnerSpec) -> bool:
    return unit_penalty(spec).kind != "zero"


@dataclass
class DesignBlock:
    """Realized design of one learner on one data partition, with its cached Gram."""

    spec_id: int
    Z: np.ndarray
    K: PenaltyMatrix
    gram: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.Z.shape[1] != self.K.dim:
            raise InputError(
                f"learner {self.spec_id}: design has {self.Z.shape[1]} columns, penalty is {self.K.dim}"
            )
        self.gram = self.Z.T @ self.Z


def gram_sources(specs: Sequence[BaseLearnerSpec]) -> dict[int, int]:
    """Map every learner id to the id whose Gram matrix it uses.

    A site-specific learner with a shared twin reuses the twin's per-site
    Gram; everything else sources its own.
    """
    twins = {}
    for s in specs:
        if not s.site_specific:
            twins.setdefault(s.signature, s.id)
    return {s.id: twins.get(s.signature, s.id) if s.site_specific else s.id for s in specs}
