"""Site-side state machine.

A site holds its rows, residuals and site model. It only ever sends
aggregates over its training rows (Gram matrices, score vectors, SSE values,
loss sums) and, once at the end, its own slices of the site-specific learners.
"""

from __future__ import annotations

import logging

import numpy as np

from .basis import design_matrix, gram_sources, specs_from_json
from .dataio import Dataset, feature_stats, site_seed, split_validation
from .errors import DcwbError, InputError, PrivacyRefusal, ProtocolError
from .loss import LossSpec, loss_sum, pseudo_residuals
from .penls import FactorCache, learner_penalty
from .protocol import (
    Abort,
    BeginIteration,
    CalibratedLambdas,
    FeatureStats,
    FinalSiteParams,
    Hello,
    InitGram,
    InterceptBroadcast,
    Message,
    PrivacyPolicy,
    ScoreVector,
    Selection,
    Setup,
    SharedTheta,
    SpecList,
    SseReport,
    StopAndFinalize,
    ValidationRisk,
    guard_aggregate,
    guard_parameter_broadcast,
    mat,
    vec,
)

log = logging.getLogger(__name__)


class SiteState:
    """Processes one host message at a time and returns the replies.

    ``data`` holds all local rows; the validation split happens when the
    Setup message arrives, seeded by ``(seed, site_id)``. ``privacy_level`` is
    the site's own floor: the effective level is the larger of it and the
    host's, so a host cannot weaken the guard.
    """

    def __init__(self, site_id: int, data: Dataset, privacy_level: int = 5):
        self.site_id = int(site_id)
        self.data = data
        self.own_level = int(privacy_level)
        self.policy = PrivacyPolicy(self.own_level)
        self.phase = "new"
        self.abort_code = 0
        self.iteration = 0
        self.train: Dataset | None = None
        self.validation: Dataset | None = None
        self.specs = []
        self.sites: list[int] = []
        self.loss = LossSpec()
        self.nu = 0.1
        self.Z: dict[int, np.ndarray] = {}
        self.Zv: dict[int, np.ndarray] = {}
        self.lambdas: dict = {}
        self.cache = FactorCache()
        self.intercept = 0.0
        self.f = None
        self.fv = None
        self.residuals = None
        self.contributions: dict[int, np.ndarray] = {}
        self.updates: list[tuple[int, np.ndarray]] = []
        self._pending_theta: dict[int, np.ndarray] = {}
        self._site_theta: dict[int, np.ndarray] = {}

    # -- helpers ------------------------------------------------------------

    @property
    def n_train(self) -> int:
        return 0 if self.train is None else self.train.n_rows

    @property
    def n_val(self) -> int:
        return 0 if self.validation is None else self.validation.n_rows

    def _guard(self, kind: str, n: int | None = None):
        guard_aggregate(self.policy, self.n_train if n is None else n, kind, self.site_id)

    def _expect(self, *phases):
        if self.phase not in phases:
            raise ProtocolError(f"site {self.site_id}: unexpected message in phase {self.phase!r}")

    @property
    def shared_ids(self) -> list[int]:
        return [s.id for s in self.specs if not s.site_specific]

    @property
    def site_ids_local(self) -> list[int]:
        return [s.id for s in self.specs if s.site_specific]

    # -- entry points -------------------------------------------------------

    def hello(self) -> Message:
        try:
            guard_aggregate(self.policy, self.data.n_rows, "Hello", self.site_id)
        except PrivacyRefusal as exc:
            self.phase = "dead"
            self.abort_code = exc.exit_code
            return Abort(str(exc), exc.exit_code, self.site_id)
        self.phase = "hello"
        return Hello(self.site_id, self.data.n_rows)

    def handle(self, msg: Message) -> list[Message]:
        """Dispatch a host message; failures become a single Abort reply."""
        try:
            return self._dispatch(msg)
        except DcwbError as exc:
            self.phase = "dead"
            self.abort_code = exc.exit_code
            log.warning("site %d aborting: %s", self.site_id, exc)
            return [Abort(str(exc), exc.exit_code, self.site_id)]

    def _dispatch(self, msg):
        if isinstance(msg, Abort):
            self.phase = "dead"
            return []
        handler = {
            Setup: self.on_setup,
            SpecList: self.on_spec_list,
            CalibratedLambdas: self.on_lambdas,
            InterceptBroadcast: self.on_intercept,
            BeginIteration: self.on_begin,
            SharedTheta: self.on_shared_theta,
            Selection: self.apply_selection,
            StopAndFinalize: self.finalize,
        }.get(type(msg))
        if handler is None:
            raise ProtocolError(f"site {self.site_id}: unexpected message {msg.tag}")
        return handler(msg)

    # -- initialization -----------------------------------------------------

    def on_setup(self, msg: Setup):
        self._expect("hello")
        self.policy = PrivacyPolicy(max(self.own_level, int(msg.privacy_level)))
        self.loss = LossSpec(msg.loss)
        self.nu = float(msg.learning_rate)
        self.cache = FactorCache(msg.ridge_jitter)
        self.specs = specs_from_json(msg.specs)
        if msg.validation_fraction > 0:
            self.train, self.validation = split_validation(
                self.data, msg.validation_fraction, site_seed(msg.seed, self.site_id), msg.stratify
            )
        else:
            self.train, self.validation = self.data, self.data.take(np.array([], dtype=int))
        y = self.loss.check_response(self.train.y)
        if self.n_val:
            guard_aggregate(self.policy, self.n_val, "FeatureStats", self.site_id)
        self._guard("FeatureStats")
        features = sorted({f for s in self.specs for f in s.features})
        stats = feature_stats(self.data, features)
        self.phase = "stats"
        return [FeatureStats(stats["ranges"], stats["levels"], float(np.sum(y)), self.n_train, self.n_val)]

    def compute_init_stats(self) -> list[InitGram]:
        """Gram matrices of every learner that sources its own Gram."""
        out = []
        sources = gram_sources(self.specs)
        for s in self.specs:
            if sources[s.id] == s.id:
                self._guard("InitGram")
                Z = self.Z[s.id]
                out.append(InitGram(s.id, mat(Z.T @ Z)))
        return out

    def on_spec_list(self, msg: SpecList):
        self._expect("stats")
        specs = specs_from_json(msg.specs)
        if [s.signature for s in specs] != [s.signature for s in self.specs]:
            raise ProtocolError(f"site {self.site_id}: resolved learner list does not match setup")
        self.specs = specs
        self.sites = [int(s) for s in msg.sites]
        if self.site_id not in self.sites:
            raise ProtocolError(f"site {self.site_id} missing from roster {self.sites}")
        sources = gram_sources(specs)
        for s in specs:
            src = sources[s.id]
            if src in self.Z:
                self.Z[s.id], self.Zv[s.id] = self.Z[src], self.Zv[src]
            else:
                self.Z[s.id] = design_matrix(s, self.train.columns)
                self.Zv[s.id] = design_matrix(s, self.validation.columns)
        self.contributions = {s.id: np.zeros(s.dim) for s in specs}
        self.phase = "grams"
        return self.compute_init_stats()

    def on_lambdas(self, msg: CalibratedLambdas):
        self._expect("grams")
        self.lambdas = {int(k): dict(v) for k, v in msg.lambdas.items()}
        for s in self.specs:
            if s.site_specific:
                Z = self.Z[s.id]
                self.cache.put(s.id, Z.T @ Z, learner_penalty(s, self.lambdas))
        self.phase = "calibrated"
        return []

    def on_intercept(self, msg: InterceptBroadcast):
        self._expect("calibrated")
        self.intercept = float(msg.intercept)
        self.f = np.full(self.n_train, self.intercept)
        self.fv = np.full(self.n_val, self.intercept)
        self._refresh_residuals()
        self.phase = "ready"
        return [self._risk_message()]

    # -- fitting ------------------------------------------------------------

    def _refresh_residuals(self):
        self.residuals = pseudo_residuals(self.loss, self.train.y, self.f)

    def _risk_message(self) -> ValidationRisk:
        self._guard("ValidationRisk")
        if self.n_val:
            guard_aggregate(self.policy, self.n_val, "ValidationRisk", self.site_id)
        val = loss_sum(self.loss, self.validation.y, self.fv) if self.n_val else 0.0
        return ValidationRisk(self.iteration, loss_sum(self.loss, self.train.y, self.f), self.n_train, val, self.n_val)

    def score_vector(self, spec_id: int) -> ScoreVector:
        self._guard("ScoreVector")
        return ScoreVector(self.iteration + 1, spec_id, vec(self.Z[spec_id].T @ self.residuals))

    def on_begin(self, msg: BeginIteration):
        self._expect("ready")
        if msg.iteration != self.iteration + 1:
            raise ProtocolError(f"site {self.site_id}: iteration {msg.iteration} after {self.iteration}")
        self._pending_theta = {}
        self._site_theta = {}
        if not self.shared_ids:
            self.phase = "sse"
            return [self._sse_report()]
        self.phase = "scoring"
        return [self.score_vector(k) for k in self.shared_ids]

    def on_shared_theta(self, msg: SharedTheta):
        self._expect("scoring")
        if msg.iteration != self.iteration + 1 or msg.spec_id not in self.shared_ids:
            raise ProtocolError(f"site {self.site_id}: unexpected shared theta {msg.spec_id}@{msg.iteration}")
        self._pending_theta[msg.spec_id] = np.asarray(msg.theta, dtype=float)
        if len(self._pending_theta) < len(self.shared_ids):
            return []
        self.phase = "sse"
        return [self._sse_report()]

    def fit_site_specific(self, spec_id: int) -> tuple[np.ndarray, float]:
        """Local penalized fit of this site's block of a site-specific learner."""
        Z = self.Z[spec_id]
        theta = self.cache.solve(spec_id, Z.T @ self.residuals).coefficients
        e = self.residuals - Z @ theta
        return theta, float(e @ e)

    def _sse_report(self) -> SseReport:
        self._guard("SseReport")
        entries = []
        for s in self.specs:
            if s.site_specific:
                theta, value = self.fit_site_specific(s.id)
                self._site_theta[s.id] = theta
            else:
                e = self.residuals - self.Z[s.id] @ self._pending_theta[s.id]
                value = float(e @ e)
            entries.append((s.id, value))
        return SseReport(self.iteration + 1, entries)

    def apply_selection(self, msg: Selection):
        self._expect("sse")
        if msg.iteration != self.iteration + 1:
            raise ProtocolError(f"site {self.site_id}: selection for {msg.iteration} in iteration {self.iteration + 1}")
        k = int(msg.spec_id)
        if not 0 <= k < len(self.specs):
            raise ProtocolError(f"site {self.site_id}: unknown learner {k}")
        theta = self._site_theta[k] if self.specs[k].site_specific else self._pending_theta[k]
        self.contributions[k] = self.contributions[k] + self.nu * theta
        self.updates.append((k, theta))
        self.f = self.f + self.nu * (self.Z[k] @ theta)
        if self.n_val:
            self.fv = self.fv + self.nu * (self.Zv[k] @ theta)
        self.iteration += 1
        self._refresh_residuals()
        self.phase = "ready"
        return [self._risk_message()]

    # -- finalization -------------------------------------------------------

    def site_model(self, upto: int | None = None) -> dict[int, np.ndarray]:
        """Coefficients of the site model after the first ``upto`` selections."""
        upto = len(self.updates) if upto is None else upto
        out = {s.id: np.zeros(s.dim) for s in self.specs}
        for k, theta in self.updates[:upto]:
            out[k] = out[k] + self.nu * theta
        return out

    def predictor(self, data: Dataset, upto: int | None = None) -> np.ndarray:
        coefs = self.site_model(upto)
        f = np.full(data.n_rows, self.intercept)
        for s in self.specs:
            if np.any(coefs[s.id] != 0.0):
                f = f + design_matrix(s, data.columns) @ coefs[s.id]
        return f

    def finalize(self, msg: StopAndFinalize):
        self._expect("ready")
        best = int(msg.best_iteration)
        if not 0 <= best <= self.iteration:
            raise ProtocolError(f"site {self.site_id}: best iteration {best} outside 0..{self.iteration}")
        coefs = self.site_model(best)
        params, withheld = {}, []
        for s in self.specs:
            if not s.site_specific or not np.any(coefs[s.id] != 0.0):
                continue
            try:
                guard_parameter_broadcast(s.dim, self.n_train, s.id, self.site_id)
            except PrivacyRefusal as exc:
                log.warning("%s", exc)
                withheld.append(s.id)
                continue
            params[s.id] = vec(coefs[s.id])
        self.phase = "done"
        return [FinalSiteParams(params, tuple(withheld))]


def load_site_data(data: Dataset, site_id: int) -> Dataset:
    """Restrict to rows tagged with ``site_id`` when the data carry a site column."""
    if data.site_column is None:
        return data
    ids = data.site_ids()
    if np.all(ids == site_id):
        return data
    rows = np.flatnonzero(ids == site_id)
    if rows.size == 0:
        raise InputError(f"no rows for site {site_id}")
    return data.take(rows)
