"""Weighted least-squares calibration.

The full-data estimator minimizes ``(1/n) sum_i (y_i - em(x_i, theta))^2``
over the parameter box.  Subsample estimators minimize the same loss with
inverse-probability weights, which keeps the subsample objective conditionally
unbiased for the full-data one.  All losses share one quasi-Newton minimizer:
damped Newton steps projected onto the box with a backtracking line search,
restarted from a handful of space-filling points.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import EstimationError, FitError, NonConvergenceError, ProbabilityError
from .util import make_rng


@dataclass(frozen=True)
class WeightedSample:
    """Observations with per-point weights and a fixed loss normalizer.

    ``n_ref`` is the denominator of the mean loss; for inverse-probability
    weighting it is the population size, not the number of rows held.
    """

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    n_ref: int

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if not (x.shape[0] == y.shape[0] == w.shape[0]):
            raise ValueError("x, y, w must have matching first dimensions")
        if self.n_ref <= 0:
            raise ValueError("n_ref must be positive")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    @classmethod
    def unweighted(cls, x, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        return cls(x=x, y=y, w=np.ones(y.shape[0]), n_ref=y.shape[0])

    @classmethod
    def from_subsample(cls, sub):
        """Inverse-probability weights normalized by the population size."""
        pi = np.asarray(sub.pi, dtype=float)
        if pi.size and (not np.all(np.isfinite(pi)) or pi.min() <= 0.0 or pi.max() > 1.0 + 1e-12):
            bad = int(np.argmax(~(np.isfinite(pi) & (pi > 0.0) & (pi <= 1.0 + 1e-12))))
            raise ProbabilityError(f"invalid inclusion probability pi[{bad}]={pi[bad]!r}")
        return cls(x=sub.x, y=sub.y, w=1.0 / np.minimum(pi, 1.0), n_ref=sub.n)


@dataclass(frozen=True)
class Estimate:
    """Result of a calibration fit."""

    theta: np.ndarray
    loss: float
    converged: bool
    iterations: int
    grad_norm: float


def wls_loss(sample: WeightedSample, em, theta) -> float:
    resid = sample.y - em.predict(sample.x, theta)
    return float(sample.w @ (resid * resid)) / sample.n_ref


def wls_grad(sample: WeightedSample, em, theta) -> np.ndarray:
    resid = sample.y - em.predict(sample.x, theta)
    grads = em.grad_theta(sample.x, theta)
    return (-2.0 / sample.n_ref) * ((sample.w * resid) @ grads)


def wls_hess(sample: WeightedSample, em, theta, gauss_newton: bool = False) -> np.ndarray:
    """Hessian of the weighted mean squared loss.

    The exact form is ``(2/n_ref) sum w [g g' - resid * H]``; with
    ``gauss_newton=True`` the residual-curvature term is dropped.
    """
    resid = sample.y - em.predict(sample.x, theta)
    grads = em.grad_theta(sample.x, theta)
    out = (2.0 / sample.n_ref) * (grads.T @ (sample.w[:, None] * grads))
    if not gauss_newton:
        hess = em.hess_theta(sample.x, theta)
        out = out - (2.0 / sample.n_ref) * np.einsum("i,ijk->jk", sample.w * resid, hess)
    return 0.5 * (out + out.T)


def loss_curvature(sample: WeightedSample, em, theta) -> np.ndarray:
    """Weighted estimate of the full-data loss Hessian at ``theta``."""
    return wls_hess(sample, em, theta)


@dataclass(frozen=True)
class FitOptions:
    """Knobs for :func:`minimize_loss`."""

    gtol: float = 1e-8
    xtol: float = 1e-10
    max_iters: int = 500
    n_starts: int = 5
    gauss_newton: bool = False
    seed: int = 0


def _projected_grad(theta, grad, box):
    pg = grad.copy()
    at_lo = theta <= box[:, 0]
    at_hi = theta >= box[:, 1]
    pg[at_lo & (pg > 0)] = 0.0
    pg[at_hi & (pg < 0)] = 0.0
    return pg


def _damped_solve(hess, grad):
    """Newton direction with a tenfold ridge escalation; None if hopeless."""
    scale = max(float(np.abs(np.diag(hess)).mean()), 1e-12)
    lam = 0.0
    while True:
        try:
            chol = sla.cholesky(hess + lam * np.eye(hess.shape[0]), lower=True)
            return sla.cho_solve((chol, True), -grad)
        except sla.LinAlgError:
            lam = 1e-8 * scale if lam == 0.0 else lam * 10.0
            if lam > 1e8 * scale:
                return None


def _local_minimize(sample, em, theta0, box, opts):
    theta = np.clip(theta0, box[:, 0], box[:, 1])
    f = wls_loss(sample, em, theta)
    if not np.isfinite(f):
        raise FitError(f"loss is not finite at starting point {theta0}")
    iterations = 0
    converged = False
    grad = wls_grad(sample, em, theta)
    for _ in range(opts.max_iters):
        pg = _projected_grad(theta, grad, box)
        gnorm = float(np.linalg.norm(pg))
        if gnorm <= opts.gtol * (1.0 + abs(f)):
            converged = True
            break
        hess = wls_hess(sample, em, theta, gauss_newton=opts.gauss_newton)
        step = _damped_solve(hess, grad)
        if step is None or float(step @ grad) >= 0.0:
            step = -pg
        t = 1.0
        improved = False
        while t >= 2.0**-30:
            cand = np.clip(theta + t * step, box[:, 0], box[:, 1])
            move = cand - theta
            f_cand = wls_loss(sample, em, cand)
            if np.isfinite(f_cand) and f_cand <= f + 1e-4 * float(grad @ move):
                improved = True
                break
            t *= 0.5
        iterations += 1
        if not improved:
            break
        step_norm = float(np.linalg.norm(cand - theta))
        theta, f = cand, f_cand
        grad = wls_grad(sample, em, theta)
        if step_norm <= opts.xtol * (1.0 + float(np.linalg.norm(theta))):
            converged = True
            break
    pg = _projected_grad(theta, grad, box)
    return Estimate(
        theta=theta,
        loss=f,
        converged=converged,
        iterations=iterations,
        grad_norm=float(np.linalg.norm(pg)),
    )


def minimize_loss(sample: WeightedSample, em, theta_init=None, opts: Optional[FitOptions] = None):
    """Minimize the weighted loss over the parameter box with multiple starts.

    Runs a damped-Newton local search from ``theta_init`` (default: box
    center) and from ``n_starts`` Latin hypercube points, returning the lowest
    loss found; exact ties go to the lexicographically smallest parameter.
    The result never exceeds the loss at the starting point.  If no start
    converges and none improves on ``theta_init``, a
    :class:`~subcal.errors.NonConvergenceError` carrying the best estimate is
    raised.
    """
    opts = opts or FitOptions()
    box = np.asarray(em.theta_box, dtype=float)
    if theta_init is None:
        theta_init = 0.5 * (box[:, 0] + box[:, 1])
    theta_init = np.clip(np.asarray(theta_init, dtype=float).reshape(-1), box[:, 0], box[:, 1])
    f_init = wls_loss(sample, em, theta_init)

    starts = [theta_init]
    if opts.n_starts > 0:
        rng = make_rng(opts.seed)
        q = box.shape[0]
        unit = np.empty((opts.n_starts, q))
        for c in range(q):
            unit[:, c] = (rng.permutation(opts.n_starts) + rng.random(opts.n_starts)) / opts.n_starts
        starts.extend(box[:, 0] + unit * (box[:, 1] - box[:, 0]))

    best = None
    total_iter = 0
    for s in starts:
        est = _local_minimize(sample, em, s, box, opts)
        total_iter += est.iterations
        if (
            best is None
            or est.loss < best.loss
            or (est.loss == best.loss and tuple(est.theta) < tuple(best.theta))
        ):
            best = est
    best = replace(best, iterations=total_iter)
    if not best.converged and best.loss >= f_init:
        raise NonConvergenceError(
            f"no start improved the loss (best {best.loss!r} vs initial {f_init!r})", best=best
        )
    return best


def fit_ols(data, em, opts: Optional[FitOptions] = None, theta_init=None) -> Estimate:
    """Full-data calibration: minimize the unweighted mean squared residual."""
    if data.n == 0:
        raise EstimationError("cannot fit on an empty dataset")
    sample = WeightedSample.unweighted(data.x, data.y)
    return minimize_loss(sample, em, theta_init=theta_init, opts=opts)


def fit_ipwls(sub, em, opts: Optional[FitOptions] = None, theta_init=None) -> Estimate:
    """Subsample calibration with inverse-probability weights."""
    if sub.x.shape[0] == 0:
        raise EstimationError("cannot fit on an empty subsample")
    sample = WeightedSample.from_subsample(sub)
    return minimize_loss(sample, em, theta_init=theta_init, opts=opts)
