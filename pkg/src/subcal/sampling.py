"""Poisson subsampling and sampling-probability construction.

Points are retained independently: point ``i`` enters the subsample with its
own probability ``pi_i``, so a draw needs one streaming pass and no global
coupling.  Inverse-probability weighting then makes the subsample loss
conditionally unbiased for the full-data loss.

Probabilities come in two flavors:

* exact score-based probabilities (:func:`optimal_probs`): proportional to a
  nonnegative score, with the proportionality capped at 1 by a water-filling
  threshold so the expected size stays ``r``;
* pilot-based probabilities (:func:`weighted_prob`): a defensive mixture of
  score-proportional and uniform components computed from a small uniform
  pilot fit, used by the practical two-step procedure (:func:`two_step`).

Scores target the trace of the asymptotic covariance (:func:`mv_score`) or a
cheaper gradient-norm proxy (:func:`mvc_score`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .calibrate import Estimate, FitOptions, WeightedSample, fit_ipwls, minimize_loss, wls_hess
from .errors import (
    DegenerateScoresError,
    EstimationError,
    PilotError,
    ProbabilityError,
)
from .util import make_rng

_CHUNK = 8192


@dataclass(frozen=True)
class SubsampleSet:
    """Retained points with their inclusion probabilities.

    ``n`` is the population size the draw came from; ``expected_size`` is the
    sum of (capped) inclusion probabilities over the whole population.
    """

    x: np.ndarray
    y: np.ndarray
    pi: np.ndarray
    n: int
    expected_size: float

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        pi = np.asarray(self.pi, dtype=float).reshape(-1)
        if not (x.shape[0] == y.shape[0] == pi.shape[0]):
            raise ValueError("x, y, pi must have matching first dimensions")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "pi", pi)

    @property
    def realized_size(self) -> int:
        return self.x.shape[0]

    def merge(self, other: "SubsampleSet") -> "SubsampleSet":
        if other.n != self.n:
            raise ValueError("cannot merge subsamples from different populations")
        return SubsampleSet(
            x=np.vstack([self.x, other.x]),
            y=np.concatenate([self.y, other.y]),
            pi=np.concatenate([self.pi, other.pi]),
            n=self.n,
            expected_size=self.expected_size + other.expected_size,
        )


@dataclass(frozen=True)
class UniformRule:
    """Constant inclusion probability."""

    p: float

    def __call__(self, X, y, start):
        return np.full(X.shape[0], self.p)


@dataclass(frozen=True)
class FixedProbs:
    """Precomputed probabilities aligned with the population's row order."""

    pi: np.ndarray

    def __call__(self, X, y, start):
        return self.pi[start : start + X.shape[0]]


def uniform_probs(n: int, size: float) -> UniformRule:
    """Uniform rule with expected subsample size ``size`` (capped at ``n``)."""
    if n <= 0 or size <= 0:
        raise ValueError("population and expected size must be positive")
    if size > n:
        warnings.warn(
            f"requested expected size {size} exceeds population {n}; "
            "probabilities clamped to 1",
            stacklevel=2,
        )
    return UniformRule(p=min(float(size) / n, 1.0))


def poisson_sample(data, prob_rule, rng, chunk: int = _CHUNK) -> SubsampleSet:
    """One streaming Bernoulli pass over ``data``.

    ``prob_rule(X_block, y_block, start_index)`` returns the block's inclusion
    probabilities; values above 1 are capped, negative or non-finite values
    raise :class:`~subcal.errors.ProbabilityError`.  Memory stays bounded by
    the block size plus the retained points.
    """
    rng = make_rng(rng)
    n = data.n
    kept_x, kept_y, kept_pi = [], [], []
    expected = 0.0
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        xb = data.x[start:stop]
        yb = data.y[start:stop]
        pi = np.asarray(prob_rule(xb, yb, start), dtype=float).reshape(-1)
        if pi.shape[0] != stop - start:
            raise ProbabilityError(
                f"rule returned {pi.shape[0]} probabilities for a block of {stop - start}"
            )
        bad = ~np.isfinite(pi) | (pi < 0.0)
        if bad.any():
            i = int(np.argmax(bad))
            raise ProbabilityError(f"invalid probability pi[{start + i}]={pi[i]!r}")
        pi = np.minimum(pi, 1.0)
        expected += float(pi.sum())
        keep = rng.random(stop - start) < pi
        if keep.any():
            kept_x.append(xb[keep])
            kept_y.append(yb[keep])
            kept_pi.append(pi[keep])
    d = data.x.shape[1]
    if kept_x:
        x = np.vstack(kept_x)
        y = np.concatenate(kept_y)
        pi = np.concatenate(kept_pi)
    else:
        x = np.empty((0, d))
        y = np.empty(0)
        pi = np.empty(0)
    return SubsampleSet(x=x, y=y, pi=pi, n=n, expected_size=expected)


# ---------------------------------------------------------------------------
# Scores and exact probabilities
# ---------------------------------------------------------------------------


def mvc_score(resid, grads) -> np.ndarray:
    """|residual| times the parameter-gradient norm (trace-proxy score)."""
    resid = np.asarray(resid, dtype=float).reshape(-1)
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    return np.abs(resid) * np.linalg.norm(grads, axis=1)


def _solve_spd_with_ridge(mat, rhs, context):
    sym = 0.5 * (mat + mat.T)
    q = sym.shape[0]
    try:
        chol = sla.cholesky(sym, lower=True)
        return sla.cho_solve((chol, True), rhs)
    except sla.LinAlgError:
        ridge = 1e-8 * abs(np.trace(sym)) / q
        if ridge <= 0.0:
            raise EstimationError(
                f"{context} is singular with zero trace; "
                "consider the mvc criterion, which does not invert it"
            ) from None
        try:
            chol = sla.cholesky(sym + ridge * np.eye(q), lower=True)
            return sla.cho_solve((chol, True), rhs)
        except sla.LinAlgError:
            raise EstimationError(
                f"{context} is singular even after ridging; "
                "consider the mvc criterion, which does not invert it"
            ) from None


def mv_score(resid, grads, curvature) -> np.ndarray:
    """|residual| times ``||J^{-1} g||`` for loss curvature ``J`` (trace-optimal score)."""
    resid = np.asarray(resid, dtype=float).reshape(-1)
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    solved = _solve_spd_with_ridge(np.asarray(curvature, dtype=float), grads.T, "loss curvature")
    return np.abs(resid) * np.linalg.norm(solved, axis=0)


def threshold(h, r: float):
    """Water-filling cap for score-proportional probabilities.

    Returns ``(M, k)`` where ``k`` scores exceed the cap ``M`` (those points
    get probability 1) and the remaining probabilities are ``r * h / (r*M)``.
    ``k`` is the smallest count for which capping the top ``k`` leaves the
    rest proportional without exceeding 1.
    """
    h = np.asarray(h, dtype=float).reshape(-1)
    n = h.shape[0]
    if not np.all(np.isfinite(h)) or (h < 0).any():
        raise DegenerateScoresError("scores must be finite and nonnegative")
    if not 0 < r < n:
        raise ValueError(f"expected size r={r} must satisfy 0 < r < n={n}")
    order = np.sort(h)
    guard = order[max(n - int(np.floor(r)) - 1, 0)]
    if guard <= 0.0:
        raise DegenerateScoresError(
            f"too many zero scores: the {n - int(np.floor(r))}-th smallest score must be positive"
        )
    prefix = np.cumsum(order)
    for s in range(0, int(np.floor(r)) + 1):
        if s >= n:
            break
        top = order[n - s - 1]
        total = prefix[n - s - 1]
        if (r - s) * top < total:
            return float(total / (r - s)), s
    raise DegenerateScoresError("no feasible cap exists for these scores")


def optimal_probs(h, r: float) -> np.ndarray:
    """Score-proportional inclusion probabilities with expected size ``r``."""
    h = np.asarray(h, dtype=float).reshape(-1)
    cap, _ = threshold(h, r)
    capped = np.minimum(h, cap)
    pi = r * capped / capped.sum()
    return np.clip(pi, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Pilot stage and the two-step procedure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingConfig:
    """Settings for subsampled calibration.

    ``criterion`` is one of ``uniform``, ``mv``, ``mvc``; ``r`` is the
    expected second-step size; ``r0`` defaults to ``2 q + 10 d``; ``rho`` is
    the uniform-mixture weight of the defensive probabilities.

    ``include_pilot=True`` additionally merges the pilot points (at their
    uniform inclusion probabilities) into the final fit.  The default keeps
    the final fit on the second-step draw alone: with ``r0`` much smaller
    than ``r`` the merged objective gives the noisy pilot block the same
    total weight as the second step, which inflates the estimator variance
    far beyond what ``estimate_variance`` reports.
    """

    criterion: str
    r: float
    r0: Optional[int] = None
    rho: float = 0.2
    include_pilot: bool = False
    fit: FitOptions = field(default_factory=FitOptions)
    chunk: int = _CHUNK

    def __post_init__(self):
        if self.criterion not in ("uniform", "mv", "mvc"):
            raise ValueError(f"unknown criterion '{self.criterion}'")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie strictly in (0, 1)")
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.r0 is not None and self.r0 < 1:
            raise ValueError("r0 must be at least 1")

    def pilot_size(self, em) -> int:
        return self.r0 if self.r0 is not None else 2 * em.q + 10 * em.d


@dataclass(frozen=True)
class Pilot:
    """Output of the uniform pilot stage."""

    theta0: np.ndarray
    curvature0: Optional[np.ndarray]
    score_mean0: float
    criterion: str
    r0: int
    pilot_set: SubsampleSet
    n: int
    fit: Estimate


def _pilot_scores(em, x, y, theta0, criterion, curvature0):
    resid = y - em.predict(x, theta0)
    grads = em.grad_theta(x, theta0)
    if criterion == "mv":
        return mv_score(resid, grads, curvature0)
    return mvc_score(resid, grads)


def pilot_stage(data, em, cfg: SamplingConfig, rng) -> Pilot:
    """Uniform pilot draw and fit; estimates everything the weighted rule needs.

    The pilot curvature matrix is only computed for the ``mv`` criterion;
    ``mvc`` exists precisely to avoid it.
    """
    if cfg.criterion == "uniform":
        raise ValueError("the uniform criterion has no pilot stage")
    r0 = cfg.pilot_size(em)
    if not 0 < r0 < data.n:
        raise PilotError(f"pilot size {r0} must lie strictly between 0 and n={data.n}")
    sub = poisson_sample(data, uniform_probs(data.n, r0), rng, chunk=cfg.chunk)
    if sub.realized_size < em.q + 1:
        raise PilotError(
            f"pilot draw returned {sub.realized_size} points, need more than q={em.q}"
        )
    sample = WeightedSample.unweighted(sub.x, sub.y)
    est = minimize_loss(sample, em, opts=cfg.fit)
    curvature0 = None
    if cfg.criterion == "mv":
        curvature0 = wls_hess(sample, em, est.theta)
    scores = _pilot_scores(em, sub.x, sub.y, est.theta, cfg.criterion, curvature0)
    return Pilot(
        theta0=est.theta,
        curvature0=curvature0,
        score_mean0=float(scores.mean()),
        criterion=cfg.criterion,
        r0=r0,
        pilot_set=sub,
        n=data.n,
        fit=est,
    )


@dataclass(frozen=True)
class WeightedRule:
    """Pilot-based defensive mixture probabilities, computable point by point."""

    em: object
    theta0: np.ndarray
    curvature0: Optional[np.ndarray]
    score_mean0: float
    criterion: str
    r: float
    rho: float
    n: int

    def __call__(self, X, y, start):
        base = self.rho * self.r / self.n
        if self.score_mean0 <= 0.0:
            # Degenerate pilot (all residuals zero): fall back to uniform.
            return np.full(X.shape[0], self.r / self.n)
        scores = _pilot_scores(self.em, X, y, self.theta0, self.criterion, self.curvature0)
        return (1.0 - self.rho) * self.r * scores / (self.n * self.score_mean0) + base


def weighted_prob(pilot: Pilot, em, r: float, rho: float) -> WeightedRule:
    """Build the defensive mixture rule from a pilot."""
    return WeightedRule(
        em=em,
        theta0=pilot.theta0,
        curvature0=pilot.curvature0,
        score_mean0=pilot.score_mean0,
        criterion=pilot.criterion,
        r=float(r),
        rho=float(rho),
        n=pilot.n,
    )


@dataclass(frozen=True)
class TwoStepResult:
    """Estimate plus everything needed for variance estimation.

    ``subsample`` is the second-step draw; ``fit_set`` is what the final fit
    actually used (second step plus the pilot points when ``include_pilot``).
    """

    estimate: Estimate
    pilot: Pilot
    subsample: SubsampleSet
    fit_set: SubsampleSet


def two_step(data, em, cfg: SamplingConfig, seed) -> TwoStepResult:
    """Pilot, score-weighted Poisson draw, and inverse-probability refit."""
    if cfg.criterion not in ("mv", "mvc"):
        raise ValueError("two_step requires the mv or mvc criterion")
    pilot = pilot_stage(data, em, cfg, make_rng(seed, 0))
    rule = weighted_prob(pilot, em, cfg.r, cfg.rho)
    sub = poisson_sample(data, rule, make_rng(seed, 1), chunk=cfg.chunk)
    fit_set = pilot.pilot_set.merge(sub) if cfg.include_pilot else sub
    if fit_set.realized_size == 0:
        raise EstimationError("second-step draw is empty")
    est = fit_ipwls(fit_set, em, opts=cfg.fit, theta_init=pilot.theta0)
    return TwoStepResult(estimate=est, pilot=pilot, subsample=sub, fit_set=fit_set)


def uniform_fit(data, em, cfg: SamplingConfig, seed):
    """Uniform-criterion baseline at expected size ``r + r0``.

    The pilot budget is granted to the uniform draw so comparisons against the
    two-step procedure use equal expected simulator effort.
    """
    size = cfg.r + cfg.pilot_size(em)
    sub = poisson_sample(data, uniform_probs(data.n, size), make_rng(seed, 1), chunk=cfg.chunk)
    if sub.realized_size == 0:
        raise EstimationError("uniform draw is empty")
    est = fit_ipwls(sub, em, opts=cfg.fit)
    return est, sub
