"""Component-wise boosting on pooled data.

This is the reference the distributed run must reproduce. Site-specific
learners are realized explicitly as the row-wise tensor product of the one-hot
site column with the inner basis, and solved as one full system.
"""

from __future__ import annotations

import numpy as np

from .basis import build_row_tensor, check_spec_ids, design_matrix, resolve_specs, site_indicator
from .dataio import Dataset, concat, feature_stats, split_sites
from .errors import InputError, SingularSystemError
from .loss import LossSpec, empirical_risk, init_constant, pseudo_residuals
from .model import AdditiveModel, SelectionRecord, accumulate, early_stop_check
from .penls import FactorCache, calibrate_learners, learner_penalty, site_block_penalty


def sse(residuals, Z, theta) -> float:
    """Sum of squared errors of a learner fit against the residuals."""
    e = np.asarray(residuals, dtype=float) - np.asarray(Z) @ np.asarray(theta)
    return float(e @ e)


def _site_aggregates(data: Dataset, sites):
    if data.site_column is None or not sites:
        y = data.y
        return [(float(np.sum(y)), len(y))]
    sid = data.site_ids()
    y = data.y
    return [(float(np.sum(y[sid == s])), int(np.sum(sid == s))) for s in sites]


def fit_pooled(
    train: Dataset,
    specs,
    loss: LossSpec,
    learning_rate: float,
    max_iters: int,
    validation: Dataset | None = None,
    patience: int | None = None,
    sites=None,
    df_definition: str = "trace",
    ridge_jitter: float = 0.0,
) -> AdditiveModel:
    """Run vanilla component-wise boosting on ``train``.

    Parameters
    ----------
    train, validation : Dataset
        Training rows and (optional) validation rows. When site-specific
        learners are present both need a site column.
    specs : list of BaseLearnerSpec
        Learner set, ids dense and ordered. Unresolved specs are resolved
        against the global feature statistics of train and validation rows.
    patience : int, optional
        Early stopping on validation risk. The returned model is truncated to
        the iteration with the lowest validation risk.
    """
    if not specs:
        raise InputError("at least one learner is required")
    if not 0.0 < learning_rate <= 1.0:
        raise InputError(f"learning rate must lie in (0, 1], got {learning_rate}")
    if max_iters < 1:
        raise InputError("max_iters must be >= 1")
    check_spec_ids(specs)
    y = loss.check_response(train.y)
    has_val = validation is not None and validation.n_rows > 0
    if patience is not None and not has_val:
        raise InputError("early stopping needs validation rows")

    any_site = any(s.site_specific for s in specs)
    if any_site:
        if sites is None:
            parts = [train] + ([validation] if has_val else [])
            sites = sorted({int(v) for p in parts for v in p.site_ids()})
        sites = [int(s) for s in sites]
    else:
        sites = [int(s) for s in sites] if sites else []
    S = len(sites)

    everything = concat([train, validation]) if has_val else train
    features = sorted({f for s in specs for f in s.features})
    stats = feature_stats(everything, features)
    specs = resolve_specs(specs, stats["ranges"], stats["levels"])

    def designs(data):
        out = {}
        onehot = site_indicator(data.site_ids(), sites) if any_site else None
        for s in specs:
            Z = design_matrix(s, data.columns)
            out[s.id] = build_row_tensor(onehot, Z) if s.site_specific else Z
        return out

    Z = designs(train)
    Zv = designs(validation) if has_val else None
    gram = {k: z.T @ z for k, z in Z.items()}

    inner = {}
    for s in specs:
        if not s.site_specific:
            inner[s.signature] = gram[s.id]

    def shared_gram(s):
        if s.signature in inner:
            return inner[s.signature]
        z = design_matrix(s, train.columns)
        return z.T @ z

    lambdas = calibrate_learners(specs, shared_gram, lambda s: gram[s.id], S, df_definition)
    cache = FactorCache(ridge_jitter)
    for s in specs:
        K = site_block_penalty(s, lambdas, S) if s.site_specific else learner_penalty(s, lambdas)
        try:
            cache.put(s.id, gram[s.id], K)
        except SingularSystemError as exc:
            raise SingularSystemError(s.id, "", iteration=0) from exc

    intercept = init_constant(loss, _site_aggregates(train, sites))
    f = np.full(train.n_rows, intercept)
    fv = np.full(validation.n_rows, intercept) if has_val else None
    yv = loss.check_response(validation.y) if has_val else None

    def risk_row(m):
        return {
            "iteration": m,
            "train_risk": empirical_risk(loss, y, f),
            "validation_risk": empirical_risk(loss, yv, fv) if has_val else None,
        }

    trace = [risk_row(0)]
    log: list[SelectionRecord] = []
    updates = []
    val_risks = []
    best = 0
    for m in range(1, max_iters + 1):
        r = pseudo_residuals(loss, y, f)
        thetas, table = [], []
        for s in specs:
            theta = cache.solve(s.id, Z[s.id].T @ r).coefficients
            thetas.append(theta)
            table.append(sse(r, Z[s.id], theta))
        win = int(np.argmin(table))
        theta = thetas[win]
        f = f + learning_rate * (Z[win] @ theta)
        if has_val:
            fv = fv + learning_rate * (Zv[win] @ theta)
        updates.append((win, theta))
        log.append(SelectionRecord(m, win, tuple(table)))
        row = risk_row(m)
        trace.append(row)
        best = m
        if patience is not None:
            val_risks.append(row["validation_risk"])
            stop, best = early_stop_check(val_risks, patience)
            if stop:
                break
        elif has_val:
            val_risks.append(row["validation_risk"])

    dims = {s.id: Z[s.id].shape[1] for s in specs}
    contributions = accumulate(dims, updates[:best], learning_rate)
    return AdditiveModel(
        specs=list(specs),
        loss=loss,
        learning_rate=learning_rate,
        intercept=intercept,
        sites=sites,
        contributions=contributions,
        lambdas=lambdas,
        selection_log=log,
        risk_trace=trace,
        best_iteration=best,
        feature_ranges={k: tuple(v) for k, v in stats["ranges"].items()},
        metadata={
            "fit": "pooled",
            "df_definition": df_definition,
            "ridge_jitter": ridge_jitter,
            "patience": patience,
            "factorizations": cache.n_factorizations,
        },
    )


def fit_pooled_sites(parts, specs, settings) -> AdditiveModel:
    """Pooled reference over site partitions.

    Uses the same per-site validation splits a distributed run draws, so the
    two fits see identical training and validation rows. ``settings`` is a
    ``HostSettings``.
    """
    splits = split_sites(parts, settings.validation_fraction, settings.seed, settings.stratify)
    train = concat([t for _, t, _ in splits])
    val = concat([v for _, _, v in splits])
    return fit_pooled(
        train,
        specs,
        LossSpec(settings.loss),
        settings.learning_rate,
        settings.max_iters,
        validation=val if val.n_rows else None,
        patience=settings.patience,
        sites=[sid for sid, _, _ in splits],
        df_definition=settings.df_definition,
        ridge_jitter=settings.ridge_jitter,
    )
