"""Uncertainty quantification from a single subsample.

The subsampled estimator's conditional covariance has sandwich form
``J^{-1} V J^{-1}``: the bread is the loss curvature, the meat collects
inverse-probability-weighted residual-gradient outer products.  Both pieces
are estimable from the retained points alone, so intervals never require a
second pass over the full data.

Also provided are the asymptotic mean-squared-error formulas used to rank
probability designs, both for exact score probabilities and for the pilot
mixture used by the two-step procedure.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.stats import norm

from .calibrate import WeightedSample, wls_hess
from .errors import InferenceError
from .sampling import Pilot, SamplingConfig, SubsampleSet, _pilot_scores, threshold


@dataclass(frozen=True)
class CovarianceReport:
    """Sandwich covariance and its factors."""

    cov: np.ndarray
    curvature: np.ndarray
    meat: np.ndarray
    n: int
    realized_size: int
    expected_size: float


def _recomputed_probs(sub: SubsampleSet, pilot: Pilot, em, cfg: SamplingConfig) -> np.ndarray:
    """Mixture probabilities re-estimated from the retained points themselves.

    The pilot normalizer is replaced by the subsample average of the same
    scores, which is what a single-subsample implementation can actually
    compute; the scores still use the pilot parameter and curvature.
    """
    scores = _pilot_scores(em, sub.x, sub.y, pilot.theta0, pilot.criterion, pilot.curvature0)
    score_mean = float(scores.mean())
    if score_mean <= 0.0:
        return np.minimum(np.full(sub.realized_size, cfg.r / sub.n), 1.0)
    pi = (1.0 - cfg.rho) * cfg.r * scores / (sub.n * score_mean) + cfg.rho * cfg.r / sub.n
    return np.minimum(pi, 1.0)


def estimate_variance(
    sub: SubsampleSet,
    pilot: Optional[Pilot],
    theta,
    em,
    cfg: SamplingConfig,
) -> CovarianceReport:
    """Sandwich covariance of the subsampled estimator at ``theta``.

    For the weighted criteria the inclusion probabilities are recomputed from
    the subsample's own score average (``pilot`` required); for the uniform
    criterion the stored draw probabilities are used directly.
    """
    if sub.realized_size == 0:
        raise InferenceError("cannot estimate variance from an empty subsample")
    theta = np.asarray(getattr(theta, "theta", theta), dtype=float).reshape(-1)
    if cfg.criterion == "uniform":
        pi = np.minimum(sub.pi, 1.0)
    else:
        if pilot is None:
            raise InferenceError(f"criterion '{cfg.criterion}' needs the pilot for probabilities")
        pi = _recomputed_probs(sub, pilot, em, cfg)
    if np.any(pi <= 0.0):
        raise InferenceError("recomputed probabilities must be positive")

    n = sub.n
    sample = WeightedSample(x=sub.x, y=sub.y, w=1.0 / pi, n_ref=n)
    curvature = wls_hess(sample, em, theta)

    resid = sub.y - em.predict(sub.x, theta)
    grads = em.grad_theta(sub.x, theta)
    c = (1.0 - pi) / (pi * pi) * resid * resid
    meat = (4.0 / n**2) * (grads.T @ (c[:, None] * grads))
    meat = 0.5 * (meat + meat.T)

    try:
        inv_c = sla.solve(curvature, np.eye(curvature.shape[0]), assume_a="sym")
    except sla.LinAlgError:
        raise InferenceError("loss curvature is singular; variance is not identified") from None
    cov = inv_c @ meat @ inv_c
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    floor = -1e-10 * max(eigvals.max(), 1.0)
    if eigvals.min() < floor:
        warnings.warn("covariance has a materially negative eigenvalue; clipping to zero")
    cov = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
    cov = 0.5 * (cov + cov.T)
    return CovarianceReport(
        cov=cov,
        curvature=curvature,
        meat=meat,
        n=n,
        realized_size=sub.realized_size,
        expected_size=sub.expected_size,
    )


def confidence_intervals(theta, cov, level: float = 0.95) -> np.ndarray:
    """Per-coordinate normal intervals; returns a (q, 2) array of endpoints."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly between 0 and 1")
    theta = np.asarray(getattr(theta, "theta", theta), dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    z = norm.ppf(0.5 + level / 2.0)
    return np.column_stack([theta - z * se, theta + z * se])


# ---------------------------------------------------------------------------
# Asymptotic MSE of probability designs
# ---------------------------------------------------------------------------


def amse_of_probs(h_mv, pi, n: Optional[int] = None) -> float:
    """Conditional asymptotic MSE ``(4/n^2) sum (1-pi)/pi * h_mv^2`` of any design."""
    h_mv = np.asarray(h_mv, dtype=float).reshape(-1)
    pi = np.asarray(pi, dtype=float).reshape(-1)
    n = n if n is not None else h_mv.shape[0]
    active = h_mv > 0.0
    if np.any(active & (pi <= 0.0)):
        raise ValueError("points with positive score need positive probability")
    contrib = np.zeros_like(h_mv)
    contrib[active] = (1.0 - pi[active]) / pi[active] * h_mv[active] ** 2
    return float(4.0 / n**2 * contrib.sum())


def amse_single(h_mv, h_used, r: float, n: Optional[int] = None) -> float:
    """Asymptotic MSE of exact score probabilities built from ``h_used``.

    ``h_mv`` are the trace-optimal scores entering the MSE itself; the sums
    run over the ``n - k`` points left uncapped by the threshold rule.
    Minimized over ``h_used`` at ``h_used = h_mv`` (Cauchy-Schwarz).
    """
    h_mv = np.asarray(h_mv, dtype=float).reshape(-1)
    h_used = np.asarray(h_used, dtype=float).reshape(-1)
    if h_mv.shape != h_used.shape:
        raise ValueError("score vectors must have equal length")
    n = n if n is not None else h_mv.shape[0]
    _, k = threshold(h_used, r)
    order = np.argsort(h_used, kind="stable")
    keep = order[: h_used.shape[0] - k]
    hu = h_used[keep]
    hm = h_mv[keep]
    if np.any(hu <= 0.0):
        active = hm > 0.0
        if np.any(hu[active] <= 0.0):
            raise ValueError("uncapped points with positive h_mv need positive h_used")
        ratio = np.zeros_like(hm)
        ratio[active] = hm[active] ** 2 / hu[active]
    else:
        ratio = hm * hm / hu
    term1 = 4.0 / (n**2 * (r - k)) * hu.sum() * ratio.sum()
    term2 = 4.0 / n**2 * (hm * hm).sum()
    return float(term1 - term2)


def amse_two_step(h_mv, h_crit, rho: float, r: float, n: Optional[int] = None) -> float:
    """Asymptotic MSE of the uncapped pilot mixture built from ``h_crit``.

    At ``rho = 1`` this is the uniform design's ``(4/r) mean(h_mv^2) -
    (4/n^2) sum(h_mv^2)``; at ``rho = 0`` with ``h_crit = h_mv`` it collapses
    to ``(4/r) mean(h_mv)^2 - (4/n^2) sum(h_mv^2)``.
    """
    h_mv = np.asarray(h_mv, dtype=float).reshape(-1)
    h_crit = np.asarray(h_crit, dtype=float).reshape(-1)
    if h_mv.shape != h_crit.shape:
        raise ValueError("score vectors must have equal length")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    n = n if n is not None else h_mv.shape[0]
    hbar = float(h_crit.mean())
    denom = (1.0 - rho) * h_crit + rho * hbar
    active = h_mv > 0.0
    if np.any(active & (denom <= 0.0)):
        raise ValueError("points with positive h_mv need a positive mixture denominator")
    ratio = np.zeros_like(h_mv)
    ratio[active] = h_mv[active] ** 2 / denom[active]
    term1 = 4.0 / (n * r) * hbar * ratio.sum()
    term2 = 4.0 / n**2 * (h_mv * h_mv).sum()
    return float(term1 - term2)
