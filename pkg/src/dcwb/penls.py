"""Penalized least squares, cached Cholesky factors and df -> lambda calibration."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import CalibrationError, InputError, SingularSystemError

LAMBDA_BOUNDS = (1e-10, 1e10)
DF_TOL = 1e-6
DF_DEFINITIONS = ("trace", "mboost")


@dataclass(frozen=True)
class PenalizedFit:
    spec_id: object
    coefficients: np.ndarray
    factor_reused: bool


def _as_matrix(K):
    return np.asarray(getattr(K, "matrix", K), dtype=float)


def factorize(A: np.ndarray, spec_id=None):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"system matrix for learner {spec_id} is not square: {A.shape}")
    if not np.all(np.isfinite(A)):
        raise SingularSystemError(spec_id, "(non-finite entries)")
    try:
        return cho_factor(A, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise SingularSystemError(spec_id, f"({exc})") from None


class FactorCache:
    """Cholesky factors of ``gram + K`` keyed by learner.

    Inserts happen during initialization; afterwards the cache is read-only, so
    concurrent readers need no locking. The insert path takes a lock anyway.
    """

    def __init__(self, ridge_jitter: float = 0.0):
        self.ridge_jitter = float(ridge_jitter)
        self._factors: dict = {}
        self._lock = threading.Lock()
        self.n_factorizations = 0
        self.n_hits = 0

    def __contains__(self, key):
        return key in self._factors

    def __len__(self):
        return len(self._factors)

    def system(self, gram, K) -> np.ndarray:
        A = np.asarray(gram, dtype=float) + _as_matrix(K)
        if self.ridge_jitter:
            A = A + self.ridge_jitter * np.eye(A.shape[0])
        return A

    def put(self, key, gram, K):
        with self._lock:
            if key not in self._factors:
                self._factors[key] = factorize(self.system(gram, K), key)
                self.n_factorizations += 1
            return self._factors[key]

    def solve(self, key, score, gram=None, K=None) -> PenalizedFit:
        factor = self._factors.get(key)
        reused = factor is not None
        if reused:
            self.n_hits += 1
        else:
            if gram is None:
                raise KeyError(f"no cached factor for learner {key}")
            factor = self.put(key, gram, K)
        theta = cho_solve(factor, np.asarray(score, dtype=float), check_finite=False)
        return PenalizedFit(key, theta, reused)


def solve_penalized(gram_sum, K, score, spec_id=None, cache: FactorCache | None = None) -> PenalizedFit:
    """Solve ``(gram_sum + K) theta = score`` by Cholesky.

    With a cache, the factor is stored under ``spec_id`` on first use and reused
    on every later call; without one, a fresh factor is computed.
    """
    if cache is not None:
        return cache.solve(spec_id, score, gram_sum, K)
    A = np.asarray(gram_sum, dtype=float) + _as_matrix(K)
    theta = cho_solve(factorize(A, spec_id), np.asarray(score, dtype=float), check_finite=False)
    return PenalizedFit(spec_id, theta, False)


def effective_df(gram_sum, K, definition: str = "trace") -> float:
    """Effective degrees of freedom of the penalized hat matrix.

    ``trace`` gives tr(S) = tr((F + K)^-1 F); ``mboost`` gives tr(2S - S'S).
    Both only need the Gram matrix F, never the design itself.
    """
    F = np.asarray(gram_sum, dtype=float)
    A = F + _as_matrix(K)
    try:
        c = cho_factor(A, lower=True, check_finite=False)
    except LinAlgError:
        raise SingularSystemError(None, "(effective df)") from None
    H = cho_solve(c, F, check_finite=False)
    if definition == "trace":
        return float(np.trace(H))
    if definition == "mboost":
        return float(2.0 * np.trace(H) - np.sum(H * H.T))
    raise InputError(f"unknown df definition {definition!r}")


def calibrate_lambda(
    gram_sum,
    K_unit,
    df_target: float,
    fixed=None,
    definition: str = "trace",
    spec_id=None,
) -> float:
    """Find lambda with ``df(gram_sum, fixed + lambda * K_unit) == df_target``.

    Bisection on log10(lambda) over ``LAMBDA_BOUNDS``; df is monotonically
    decreasing in lambda.  ``fixed`` is an additional penalty held constant,
    used when only one part of a Kronecker-sum penalty is being calibrated.
    A target at (or within tolerance above) the unpenalized df returns the
    lower bound.
    """
    F = np.asarray(gram_sum, dtype=float)
    U = _as_matrix(K_unit)
    P = np.zeros_like(F) if fixed is None else _as_matrix(fixed)

    def df(log_lam):
        return effective_df(F, P + 10.0**log_lam * U, definition)

    lo, hi = np.log10(LAMBDA_BOUNDS[0]), np.log10(LAMBDA_BOUNDS[1])
    df_max, df_min = df(lo), df(hi)
    if df_target > df_max + DF_TOL or df_target < df_min - DF_TOL:
        raise CalibrationError(df_target, df_min, df_max, spec_id)
    if df_target >= df_max:
        return LAMBDA_BOUNDS[0]
    if df_target <= df_min:
        return LAMBDA_BOUNDS[1]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = df(mid)
        if abs(val - df_target) < 1e-10:
            break
        if val > df_target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14:
            break
    return float(10.0**mid)


def calibrate_learners(specs, shared_gram, site_gram, n_sites: int, definition: str = "trace") -> dict[int, dict]:
    """Penalty strengths for every learner.

    ``shared_gram(spec)`` returns the aggregated Gram of the inner basis,
    ``site_gram(spec)`` the Gram of the full site tensor design (block
    diagonal, one block per site).  Shared learners get ``lam`` from their df
    target.  A site-specific learner reuses the ``lam`` of its shared twin for
    the inner penalty and calibrates the site ridge ``lam0`` so that the whole
    tensor learner meets its own df target.  Without a twin the inner penalty
    is calibrated on its own, or left at zero when the target exceeds what the
    inner basis can attain (a random intercept with df 3 over one column).
    """
    from .basis import unit_penalty

    out: dict[int, dict] = {}
    twins = {s.signature: s for s in specs if not s.site_specific}
    for s in specs:
        if s.site_specific:
            continue
        K = unit_penalty(s)
        lam = 0.0
        if K.kind != "zero" and s.df_target is not None:
            lam = calibrate_lambda(shared_gram(s), K, s.df_target, definition=definition, spec_id=s.id)
        out[s.id] = {"lam": lam}
    for s in specs:
        if not s.site_specific:
            continue
        K = unit_penalty(s)
        twin = twins.get(s.signature)
        if K.kind == "zero":
            lam_x = 0.0
        elif twin is not None:
            lam_x = out[twin.id]["lam"]
        elif s.df_target is not None and s.df_target < effective_df(shared_gram(s), LAMBDA_BOUNDS[0] * K.matrix, definition):
            lam_x = calibrate_lambda(shared_gram(s), K, s.df_target, definition=definition, spec_id=s.id)
        else:
            lam_x = 0.0
        lam0 = 0.0
        if s.df_target is not None:
            G = site_gram(s)
            fixed = np.kron(np.eye(n_sites), lam_x * K.matrix)
            lam0 = calibrate_lambda(G, np.eye(G.shape[0]), s.df_target, fixed=fixed, definition=definition, spec_id=s.id)
        out[s.id] = {"lam": lam_x, "lam0": lam0}
    return {k: out[k] for k in sorted(out)}


def learner_penalty(spec, lambdas: dict, n_sites: int = 1) -> np.ndarray:
    """Penalty matrix actually used in the solve.

    For a site-specific learner this is one diagonal block
    ``lam0 * I + lam * K``; use ``site_block_penalty`` for the full tensor.
    """
    from .basis import unit_penalty

    K = unit_penalty(spec).matrix
    lam = lambdas[spec.id]["lam"]
    if not spec.site_specific:
        return lam * K
    return lambdas[spec.id]["lam0"] * np.eye(spec.dim) + lam * K


def site_block_penalty(spec, lambdas: dict, n_sites: int) -> np.ndarray:
    from .basis import build_kronecker_sum_penalty, unit_penalty

    K = unit_penalty(spec).matrix
    lam = lambdas[spec.id]
    return build_kronecker_sum_penalty(np.eye(n_sites), lam["lam0"], K, lam["lam"], n_sites, spec.dim).matrix
