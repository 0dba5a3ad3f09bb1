"""Host-side coordinator and the communication-cost ledger.

The host sees Gram matrices, score vectors, SSE values and loss sums, never
rows or residuals. It solves the shared learners, selects the winner, decides
when to stop and stitches the final model together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .basis import cap_dummy_df, check_spec_ids, gram_sources, resolve_specs, specs_to_json
from .dataio import merge_feature_stats
from .errors import InputError, ProtocolError, SiteAbort
from .loss import LossSpec, init_constant
from .model import AdditiveModel, SelectionRecord, accumulate, early_stop_check
from .penls import FactorCache, calibrate_learners, learner_penalty
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
    ScoreVector,
    Selection,
    Setup,
    SharedTheta,
    SpecList,
    SseReport,
    StopAndFinalize,
    ValidationRisk,
    guard_parameter_broadcast,
    vec,
)

log = logging.getLogger(__name__)

# Message kinds that enter the closed-form cost, by phase.
SITE_INIT = ("InitGram",)
SITE_FITTING = ("ScoreVector", "SseReport")
HOST_FITTING = ("SharedTheta", "Selection")


# ---------------------------------------------------------------------------
# Cost ledger
# ---------------------------------------------------------------------------


def _counter():
    return {"init": 0, "fitting": 0, "auxiliary": 0, "messages": 0}


@dataclass
class CostLedger:
    """Value counters per site (outbound) and per recipient site (host outbound)."""

    site: dict = field(default_factory=dict)
    host: dict = field(default_factory=dict)

    def record(self, site_id: int, outbound_from_site: bool, message: Message) -> None:
        book = self.site if outbound_from_site else self.host
        c = book.setdefault(int(site_id), _counter())
        c["messages"] += 1
        n = message.value_count()
        if outbound_from_site and message.tag in SITE_INIT:
            c["init"] += n
        elif message.tag in (SITE_FITTING if outbound_from_site else HOST_FITTING):
            c["fitting"] += n
        else:
            c["auxiliary"] += n

    def report(self) -> dict:
        return {
            "site": {str(k): dict(v) for k, v in sorted(self.site.items())},
            "host_per_recipient": {str(k): dict(v) for k, v in sorted(self.host.items())},
        }


def expected_costs(M: int, n_learners: int, d: int) -> dict:
    """Closed-form value counts for M iterations over ``n_learners`` shared
    learners of dimension d, each with a site-specific twin."""
    return {
        "site_init": d * d * n_learners,
        "site_fitting": M * n_learners * (d + 2),
        "host_fitting": d * M * n_learners + M,
    }


def expected_costs_for(specs, M: int) -> dict:
    """Value counts for an arbitrary learner set.

    Every distinct Gram is sent once, every shared learner sends its score
    vector and every learner one SSE value per iteration, and the host sends
    every shared solution plus the selection. With ``n_learners`` shared
    learners of dimension d and a twin each this equals ``expected_costs``.
    """
    sources = gram_sources(specs)
    shared = [s for s in specs if not s.site_specific]
    d_shared = sum(s.dim for s in shared)
    return {
        "site_init": sum(s.dim**2 for s in specs if sources[s.id] == s.id),
        "site_fitting": M * (d_shared + len(specs)),
        "host_fitting": M * d_shared + M,
    }


def audit_costs(ledger: CostLedger, M: int, n_learners: int | None = None, d: int | None = None, specs=None) -> dict:
    """Compare the ledger with the closed forms; raise naming the first mismatching counter.

    Pass either ``n_learners`` and ``d`` or the full ``specs`` list.
    """
    want = expected_costs_for(specs, M) if specs is not None else expected_costs(M, n_learners, d)
    rows = []
    for sid, c in sorted(ledger.site.items()):
        rows.append((f"site {sid} init", c["init"], want["site_init"]))
        rows.append((f"site {sid} fitting", c["fitting"], want["site_fitting"]))
    for sid, c in sorted(ledger.host.items()):
        rows.append((f"host -> site {sid} fitting", c["fitting"], want["host_fitting"]))
    for name, got, exp in rows:
        if got != exp:
            raise AssertionError(f"cost counter {name}: ledger {got} != closed form {exp}")
    return {
        "expected": want,
        "observed": ledger.report(),
        "checks": [{"counter": n, "ledger": g, "closed_form": e} for n, g, e in rows],
    }


# ---------------------------------------------------------------------------
# Coordinator
# ---------------------------------------------------------------------------


@dataclass
class HostSettings:
    loss: str = "gaussian"
    learning_rate: float = 0.1
    max_iters: int = 100
    patience: int | None = None
    privacy_level: int = 5
    validation_fraction: float = 0.0
    seed: int = 0
    stratify: bool = False
    df_definition: str = "trace"
    ridge_jitter: float = 0.0


class HostState:
    """Aggregates and the shared model, driven through an endpoint with
    ``open() -> {site_id: Hello}``, ``send(site_id, msg)`` and ``recv(site_id)``."""

    def __init__(self, endpoint, specs, settings: HostSettings):
        if not specs:
            raise InputError("at least one learner is required")
        check_spec_ids(specs)
        if not 0.0 < settings.learning_rate <= 1.0:
            raise InputError(f"learning rate must lie in (0, 1], got {settings.learning_rate}")
        if settings.max_iters < 1:
            raise InputError("max_iters must be >= 1")
        self.endpoint = endpoint
        self.specs = list(specs)
        self.settings = settings
        self.loss = LossSpec(settings.loss)
        self.sites: list[int] = []
        self.n_obs: dict[int, int] = {}
        self.n_train: dict[int, int] = {}
        self.gram: dict[int, np.ndarray] = {}
        self.site_gram: dict[int, dict[int, np.ndarray]] = {}
        self.lambdas: dict = {}
        self.cache = FactorCache(settings.ridge_jitter)
        self.n_calibrations = 0
        self.intercept = 0.0
        self.updates: list[tuple[int, np.ndarray | None]] = []
        self.selection_log: list[SelectionRecord] = []
        self.risk_trace: list[dict] = []
        self.val_risks: list[float] = []
        self.stats: dict = {}
        self.ledger = CostLedger()

    # -- messaging ----------------------------------------------------------

    def send(self, sid: int, msg: Message) -> None:
        self.ledger.record(sid, False, msg)
        self.endpoint.send(sid, msg)

    def broadcast(self, msg: Message) -> None:
        for sid in self.sites:
            self.send(sid, msg)

    def recv(self, sid: int, kind: type) -> Message:
        msg = self.endpoint.recv(sid)
        self.ledger.record(sid, True, msg)
        if isinstance(msg, Abort):
            raise SiteAbort(sid, msg.reason, msg.exit_code)
        if not isinstance(msg, kind):
            raise ProtocolError(f"expected {kind.__name__} from site {sid}, got {msg.tag}")
        return msg

    def gather(self, kind: type) -> dict[int, Message]:
        """Barrier: one message of ``kind`` from every site, ascending site id."""
        return {sid: self.recv(sid, kind) for sid in self.sites}

    def abort(self, reason: str, exit_code: int = 1) -> None:
        for sid in self.sites:
            try:
                self.endpoint.send(sid, Abort(reason, exit_code, 0))
            except Exception:  # best effort, the session is over anyway
                pass

    # -- phases -------------------------------------------------------------

    @property
    def shared(self):
        return [s for s in self.specs if not s.site_specific]

    def open_session(self):
        hellos = self.endpoint.open()
        for sid in sorted(hellos):
            msg = hellos[sid]
            self.ledger.record(sid, True, msg)
            if isinstance(msg, Abort):
                raise SiteAbort(sid, msg.reason, msg.exit_code)
            if not isinstance(msg, Hello) or msg.site_id != sid:
                raise ProtocolError(f"bad greeting from site {sid}")
            self.n_obs[sid] = msg.n_obs
        if not hellos:
            raise InputError("no sites")
        self.sites = sorted(hellos)

    def initialize(self):
        st = self.settings
        self.broadcast(
            Setup(
                specs_to_json(self.specs),
                st.loss,
                st.learning_rate,
                st.privacy_level,
                st.validation_fraction,
                st.seed,
                st.stratify,
                st.ridge_jitter,
            )
        )
        stats = self.gather(FeatureStats)
        self.n_train = {sid: m.n for sid, m in stats.items()}
        self.n_val = {sid: m.n_val for sid, m in stats.items()}
        self.stats = merge_feature_stats([{"ranges": m.ranges, "levels": m.levels} for m in stats.values()])
        self.specs = resolve_specs(self.specs, self.stats["ranges"], self.stats["levels"])
        self.specs = cap_dummy_df(self.specs, len(self.sites))
        self.broadcast(SpecList(specs_to_json(self.specs), tuple(self.sites)))

        sources = gram_sources(self.specs)
        own = [s.id for s in self.specs if sources[s.id] == s.id]
        for sid in self.sites:
            per = {}
            for k in own:
                msg = self.recv(sid, InitGram)
                if msg.spec_id != k:
                    raise ProtocolError(f"site {sid}: expected Gram of learner {k}, got {msg.spec_id}")
                per[k] = np.asarray(msg.gram, dtype=float)
            self.site_gram[sid] = per
        for k in own:
            total = np.zeros_like(self.site_gram[self.sites[0]][k])
            for sid in self.sites:
                total = total + self.site_gram[sid][k]
            self.gram[k] = total

        def shared_gram(s):
            return self.gram[sources[s.id]]

        def tensor_gram(s):
            return block_diag(*(self.site_gram[sid][sources[s.id]] for sid in self.sites))

        self.lambdas = calibrate_learners(self.specs, shared_gram, tensor_gram, len(self.sites), st.df_definition)
        self.n_calibrations += 1
        min_n = min(self.n_train.values())
        for s in self.shared:
            guard_parameter_broadcast(s.dim, min_n, s.id)
            self.cache.put(s.id, self.gram[s.id], learner_penalty(s, self.lambdas))
        self.broadcast(CalibratedLambdas({k: v for k, v in self.lambdas.items()}))

        self.intercept = init_constant(self.loss, [(stats[sid].sum_y, stats[sid].n) for sid in self.sites])
        self.broadcast(InterceptBroadcast(self.intercept))
        self._record_risk(0, self.gather(ValidationRisk))

    def _record_risk(self, m: int, reports: dict[int, ValidationRisk]) -> dict:
        for sid, r in reports.items():
            if r.iteration != m:
                raise ProtocolError(f"site {sid}: risk for iteration {r.iteration}, expected {m}")
        tl = sum(reports[s].train_loss for s in self.sites)
        tn = sum(reports[s].n_train for s in self.sites)
        vl = sum(reports[s].val_loss for s in self.sites)
        vn = sum(reports[s].n_val for s in self.sites)
        row = {"iteration": m, "train_risk": tl / tn, "validation_risk": vl / vn if vn else None}
        self.risk_trace.append(row)
        return row

    def dist_fit_shared(self, spec_id: int, scores: dict[int, np.ndarray]) -> np.ndarray:
        """Sum the site score vectors (ascending site id) and solve with the cached factor."""
        u = np.zeros(self.specs[spec_id].dim)
        for sid in self.sites:
            u = u + scores[sid]
        return self.cache.solve(spec_id, u).coefficients

    def select(self, m: int, reports: dict[int, SseReport]) -> tuple[int, list[float]]:
        """Aggregate SSE per learner over sites; argmin with the smallest id on ties."""
        table = np.zeros(len(self.specs))
        for sid in self.sites:
            rep = reports[sid]
            ids = [int(k) for k, _ in rep.entries]
            if rep.iteration != m or ids != list(range(len(self.specs))):
                raise ProtocolError(f"site {sid}: malformed SSE report for iteration {m}")
            table = table + np.array([v for _, v in rep.entries], dtype=float)
        return int(np.argmin(table)), [float(v) for v in table]

    def iterate(self, m: int) -> dict:
        self.broadcast(BeginIteration(m))
        thetas = {}
        if self.shared:
            scores = {sid: {} for sid in self.sites}
            for sid in self.sites:
                for s in self.shared:
                    msg = self.recv(sid, ScoreVector)
                    if msg.spec_id != s.id or msg.iteration != m:
                        raise ProtocolError(f"site {sid}: unexpected score vector {msg.spec_id}@{msg.iteration}")
                    scores[sid][s.id] = np.asarray(msg.score, dtype=float)
            for s in self.shared:
                thetas[s.id] = self.dist_fit_shared(s.id, {sid: scores[sid][s.id] for sid in self.sites})
                self.broadcast(SharedTheta(m, s.id, vec(thetas[s.id])))
        win, table = self.select(m, self.gather(SseReport))
        self.selection_log.append(SelectionRecord(m, win, tuple(table)))
        self.updates.append((win, thetas.get(win)))
        self.broadcast(Selection(m, win))
        return self._record_risk(m, self.gather(ValidationRisk))

    def run(self) -> AdditiveModel:
        try:
            self.open_session()
            self.initialize()
            best = 0
            patience = self.settings.patience
            for m in range(1, self.settings.max_iters + 1):
                row = self.iterate(m)
                best = m
                if row["validation_risk"] is not None:
                    self.val_risks.append(row["validation_risk"])
                if patience is not None:
                    stop, best = early_stop_check(self.val_risks, patience)
                    if stop:
                        break
            self.broadcast(StopAndFinalize(best))
            finals = self.gather(FinalSiteParams)
            return self.assemble_final_model(best, finals)
        except SiteAbort:
            self.abort("peer aborted")
            raise
        except Exception as exc:
            self.abort(str(exc), getattr(exc, "exit_code", 1))
            raise

    def assemble_final_model(self, best: int, finals: dict[int, FinalSiteParams]) -> AdditiveModel:
        S = len(self.sites)
        dims = {s.id: s.dim for s in self.shared}
        shared_updates = [(k, t) for k, t in self.updates[:best] if t is not None]
        contributions = accumulate(dims, shared_updates, self.settings.learning_rate)
        partial = []
        for s in self.specs:
            if not s.site_specific:
                continue
            full = np.zeros(S * s.dim)
            for i, sid in enumerate(self.sites):
                fin = finals[sid]
                if str(s.id) in fin.params:
                    full[i * s.dim : (i + 1) * s.dim] = np.asarray(fin.params[str(s.id)], dtype=float)
                elif s.id in fin.withheld:
                    partial.append({"spec_id": s.id, "site_id": sid})
            contributions[s.id] = full
        st = self.settings
        return AdditiveModel(
            specs=list(self.specs),
            loss=self.loss,
            learning_rate=st.learning_rate,
            intercept=self.intercept,
            sites=list(self.sites),
            contributions=contributions,
            lambdas=self.lambdas,
            selection_log=list(self.selection_log),
            risk_trace=list(self.risk_trace),
            best_iteration=best,
            feature_ranges={k: tuple(v) for k, v in self.stats["ranges"].items()},
            metadata={
                "fit": "distributed",
                "df_definition": st.df_definition,
                "ridge_jitter": st.ridge_jitter,
                "patience": st.patience,
                "privacy_level": st.privacy_level,
                "partial": bool(partial),
                "withheld": partial,
                "site_rows": {str(k): self.n_train[k] for k in self.sites},
            },
        )
