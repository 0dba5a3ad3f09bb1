"""The fitted additive model shared by the pooled reference and the host."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .basis import BaseLearnerSpec, design_matrix
from .dataio import canonical_json
from .errors import InputError
from .loss import LossSpec

MODEL_FORMAT = "dcwb-model/1"


@dataclass(frozen=True)
class SelectionRecord:
    iteration: int
    spec_id: int
    sse: tuple[float, ...]


@dataclass
class AdditiveModel:
    """Intercept plus accumulated, learning-rate-scaled coefficients per learner.

    Shared learners hold a vector of length d_l; site-specific learners hold
    the stitched vector of length S * d_l, one contiguous slice per site in
    roster order.
    """

    specs: list[BaseLearnerSpec]
    loss: LossSpec
    learning_rate: float
    intercept: float
    sites: list[int] = field(default_factory=list)
    contributions: dict[int, np.ndarray] = field(default_factory=dict)
    lambdas: dict[int, dict] = field(default_factory=dict)
    selection_log: list[SelectionRecord] = field(default_factory=list)
    risk_trace: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    feature_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for s in self.specs:
            if s.id not in self.contributions:
                self.contributions[s.id] = np.zeros(self.coef_dim(s))

    def spec(self, spec_id: int) -> BaseLearnerSpec:
        return self.specs[spec_id]

    def coef_dim(self, spec: BaseLearnerSpec) -> int:
        return spec.dim * len(self.sites) if spec.site_specific else spec.dim

    def site_index(self, site_id: int) -> int:
        try:
            return self.sites.index(int(site_id))
        except ValueError:
            raise InputError(f"unknown site id {site_id}; roster is {self.sites}") from None

    def site_slice(self, spec_id: int, site_id: int) -> np.ndarray:
        spec = self.specs[spec_id]
        d = spec.dim
        k = self.site_index(site_id)
        return self.contributions[spec_id][k * d : (k + 1) * d]

    @property
    def n_iterations(self) -> int:
        return len(self.selection_log)

    def selected_ids(self, upto: int | None = None) -> list[int]:
        upto = self.best_iteration if upto is None else upto
        return sorted({r.spec_id for r in self.selection_log[:upto]})

    def has_site_terms(self) -> bool:
        return any(
            self.specs[i].site_specific and np.any(self.contributions[i] != 0.0) for i in self.contributions
        )

    @property
    def final_risk(self) -> float | None:
        for r in self.risk_trace:
            if r["iteration"] == self.best_iteration:
                return r["train_risk"]
        return None

    # -- prediction ---------------------------------------------------------

    def predict(self, data, site: int | None = None, shared_only: bool = False, response: bool = False) -> np.ndarray:
        """Additive predictor on ``data``.

        Site-specific terms use ``site`` when given, otherwise the per-row site
        column of ``data``; ``shared_only`` drops them altogether.
        """
        cols = data.columns if hasattr(data, "columns") else data
        n = len(next(iter(cols.values())))
        f = np.full(n, self.intercept, dtype=float)
        need_site = not shared_only and self.has_site_terms()
        row_sites = None
        if need_site:
            if site is not None:
                idx = np.full(n, self.site_index(site))
            else:
                sc = getattr(data, "site_column", None)
                if sc is None or sc not in cols:
                    raise InputError("site-specific terms are selected: a site id is required")
                idx = np.array([self.site_index(int(v)) for v in cols[sc]], dtype=int)
            row_sites = idx
        for spec in self.specs:
            theta = self.contributions[spec.id]
            if not np.any(theta != 0.0):
                continue
            if spec.site_specific:
                if row_sites is None:
                    continue
                Z = design_matrix(spec, cols)
                Theta = theta.reshape(len(self.sites), spec.dim)
                f += np.einsum("ij,ij->i", Z, Theta[row_sites])
            else:
                f += design_matrix(spec, cols) @ theta
        return self.loss.response(f) if response else f

    # -- diagnostics --------------------------------------------------------

    def importance(self) -> dict[int, float]:
        """Share of the cumulative training-risk reduction attributed to each learner."""
        risk = {r["iteration"]: r["train_risk"] for r in self.risk_trace}
        gain: dict[int, float] = {}
        for rec in self.selection_log[: self.best_iteration]:
            m = rec.iteration
            if m in risk and (m - 1) in risk:
                gain[rec.spec_id] = gain.get(rec.spec_id, 0.0) + (risk[m - 1] - risk[m])
        total = sum(gain.values())
        if total == 0:
            return {k: 0.0 for k in gain}
        return {k: v / total for k, v in sorted(gain.items())}

    def selection_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for rec in self.selection_log[: self.best_iteration]:
            out[rec.spec_id] = out.get(rec.spec_id, 0) + 1
        return out

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "specs": [s.to_dict() for s in self.specs],
            "loss": self.loss.family,
            "learning_rate": self.learning_rate,
            "intercept": self.intercept,
            "sites": list(self.sites),
            "contributions": {str(k): self.contributions[k].tolist() for k in sorted(self.contributions)},
            "lambdas": {str(k): dict(v) for k, v in sorted(self.lambdas.items())},
            "selection_log": [
                {"iteration": r.iteration, "spec_id": r.spec_id, "sse": list(r.sse)} for r in self.selection_log
            ],
            "risk_trace": list(self.risk_trace),
            "best_iteration": self.best_iteration,
            "feature_ranges": {k: list(v) for k, v in sorted(self.feature_ranges.items())},
            "metadata": dict(self.metadata),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdditiveModel":
        if d.get("format") != MODEL_FORMAT:
            raise InputError(f"not a model document (format {d.get('format')!r})")
        specs = [BaseLearnerSpec.from_dict(s) for s in d["specs"]]
        return cls(
            specs=specs,
            loss=LossSpec(d["loss"]),
            learning_rate=float(d["learning_rate"]),
            intercept=float(d["intercept"]),
            sites=[int(s) for s in d["sites"]],
            contributions={int(k): np.asarray(v, dtype=float) for k, v in d["contributions"].items()},
            lambdas={int(k): dict(v) for k, v in d["lambdas"].items()},
            selection_log=[
                SelectionRecord(int(r["iteration"]), int(r["spec_id"]), tuple(float(x) for x in r["sse"]))
                for r in d["selection_log"]
            ],
            risk_trace=[dict(r) for r in d["risk_trace"]],
            best_iteration=int(d["best_iteration"]),
            feature_ranges={k: tuple(v) for k, v in d.get("feature_ranges", {}).items()},
            metadata=dict(d.get("metadata", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "AdditiveModel":
        return cls.from_dict(json.loads(text))


def accumulate(dims: Mapping[int, int], updates: Sequence[tuple[int, np.ndarray]], nu: float) -> dict[int, np.ndarray]:
    """Replay ``(spec_id, theta)`` updates in order; used for early-stopping truncation."""
    out = {k: np.zeros(d) for k, d in dims.items()}
    for k, theta in updates:
        out[k] = out[k] + nu * theta
    return out


def early_stop_check(risks: Sequence[float], patience: int | None) -> tuple[bool, int]:
    """``(stop, best)`` for validation risks of iterations 1..m.

    ``best`` is the first iteration attaining the minimum; stop once
    ``m - best >= patience``.
    """
    m = len(risks)
    if m == 0:
        return False, 0
    best = int(np.argmin(risks)) + 1
    if patience is None:
        return False, best
    return (m - best) >= patience, best


def univariate_effect(model: AdditiveModel, feature: str, grid):
    """Shared effect and per-site deviations of all single-feature learners on ``grid``."""
    cols = {feature: np.asarray(grid, dtype=object if grid and isinstance(grid[0], str) else float)}
    shared = np.zeros(len(grid))
    per_site = {sid: np.zeros(len(grid)) for sid in model.sites}
    for spec in model.specs:
        if spec.features != (feature,):
            continue
        theta = model.contributions[spec.id]
        if not np.any(theta != 0.0):
            continue
        Z = design_matrix(spec, cols)
        if spec.site_specific:
            for sid in model.sites:
                per_site[sid] = per_site[sid] + Z @ model.site_slice(spec.id, sid)
        else:
            shared = shared + Z @ theta
    return shared, per_site


def compare_models(a: AdditiveModel, b: AdditiveModel, rtol: float = 1e-8, risk_tol: float = 1e-9) -> dict:
    """Parameter-level comparison of two fits of the same learner list.

    Coefficient differences are relative to the larger magnitude of the two
    vectors per learner; selection logs must agree as id sequences.
    """
    if [s.signature for s in a.specs] != [s.signature for s in b.specs]:
        raise InputError("models were fitted with different learner lists")
    worst, where = 0.0, None
    for s in a.specs:
        x, y = a.contributions[s.id], b.contributions[s.id]
        if x.shape != y.shape:
            raise InputError(f"learner {s.id}: coefficient shapes differ {x.shape} vs {y.shape}")
        scale = max(np.max(np.abs(x), initial=0.0), np.max(np.abs(y), initial=0.0))
        if scale == 0.0:
            continue
        j = int(np.argmax(np.abs(x - y)))
        rel = float(abs(x[j] - y[j]) / scale)
        if rel > worst:
            worst, where = rel, {"spec_id": s.id, "index": j, "a": float(x[j]), "b": float(y[j])}
    ia = abs(a.intercept - b.intercept) / max(abs(a.intercept), abs(b.intercept), 1e-300)
    if ia > worst:
        worst, where = float(ia), {"spec_id": "intercept", "index": 0, "a": a.intercept, "b": b.intercept}
    log_a = [r.spec_id for r in a.selection_log]
    log_b = [r.spec_id for r in b.selection_log]
    first_diff = next((i + 1 for i, (p, q) in enumerate(zip(log_a, log_b)) if p != q), None)
    if first_diff is None and len(log_a) != len(log_b):
        first_diff = min(len(log_a), len(log_b)) + 1
    ra, rb = a.final_risk, b.final_risk
    risk_diff = abs(ra - rb) if ra is not None and rb is not None else float("inf")
    out = {
        "max_relative_coefficient_diff": worst,
        "worst_coefficient": where,
        "selection_logs_equal": first_diff is None,
        "first_selection_mismatch": first_diff,
        "best_iteration": [a.best_iteration, b.best_iteration],
        "final_risk_diff": risk_diff,
        "tolerances": {"coefficients": rtol, "risk": risk_tol},
    }
    out["pass"] = bool(
        worst <= rtol and first_diff is None and risk_diff <= risk_tol and a.best_iteration == b.best_iteration
    )
    return out
