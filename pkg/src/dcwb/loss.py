"""Loss families: pseudo residuals, empirical risk and the optimal constant."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import expit

from .errors import DegenerateResponseError, InputError

FAMILIES = ("gaussian", "binomial")


@dataclass(frozen=True)
class LossSpec:
    family: str = "gaussian"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown loss family {self.family!r}; expected one of {FAMILIES}")

    def check_response(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise InputError("response contains non-finite values")
        if self.family == "binomial" and not np.all((y == 0.0) | (y == 1.0)):
            raise InputError("binomial response must be coded 0/1")
        return y

    def response(self, f):
        """Inverse link h applied to the additive predictor."""
        f = np.asarray(f, dtype=float)
        return expit(f) if self.family == "binomial" else f


def _pair(loss, y, f):
    y = loss.check_response(y)
    f = np.asarray(f, dtype=float)
    if y.shape != f.shape:
        raise InputError(f"length mismatch: y {y.shape} vs f {f.shape}")
    return y, f


def pseudo_residuals(loss: LossSpec, y, f) -> np.ndarray:
    y, f = _pair(loss, y, f)
    if loss.family == "gaussian":
        return y - f
    return y - expit(f)


def pointwise_loss(loss: LossSpec, y, f) -> np.ndarray:
    y, f = _pair(loss, y, f)
    if loss.family == "gaussian":
        return 0.5 * (y - f) ** 2
    # log(1 + exp(f)) - y f, stable for large |f|
    return np.logaddexp(0.0, f) - y * f


def empirical_risk(loss: LossSpec, y, f) -> float:
    y = np.asarray(y)
    if y.size == 0:
        return float("nan")
    return float(np.mean(pointwise_loss(loss, y, f)))


def loss_sum(loss: LossSpec, y, f) -> float:
    return float(np.sum(pointwise_loss(loss, y, f)))


def init_constant(loss: LossSpec, aggregates: Iterable[tuple[float, int]]) -> float:
    """Loss-optimal constant from per-site ``(sum_y, n)`` pairs, summed in the given order."""
    total, n = 0.0, 0
    for s, k in aggregates:
        total += float(s)
        n += int(k)
    if n < 1:
        raise InputError("no observations for the intercept")
    mean = total / n
    if loss.family == "gaussian":
        return mean
    if not 0.0 < mean < 1.0:
        raise DegenerateResponseError(f"binomial response is constant (mean {mean})")
    return float(np.log(mean / (1.0 - mean)))
