"""Independent solvers for auditing the probability optimizer.

Both functions minimize ``sum_i h_i^2 / pi_i`` subject to ``sum pi = r`` and
``0 < pi <= 1`` without using the closed-form threshold rule, so they can
serve as cross-checks for :func:`subcal.sampling.optimal_probs`.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from .util import make_rng


def enumerate_probs(h, r: float) -> np.ndarray:
    """Exact solution by enumerating how many points are capped at 1.

    For each candidate cap count ``s`` the remaining mass is spread
    proportionally to the scores; the best feasible candidate wins.
    """
    h = np.asarray(h, dtype=float).reshape(-1)
    n = h.shape[0]
    if not 0 < r < n:
        raise ValueError("need 0 < r < n")
    order = np.argsort(h, kind="stable")
    best = None
    best_val = np.inf
    for s in range(0, int(np.floor(r)) + 1):
        pi = np.zeros(n)
        capped = order[n - s :] if s > 0 else np.array([], dtype=int)
        free = order[: n - s]
        mass = h[free].sum()
        if mass <= 0.0:
            continue
        pi[capped] = 1.0
        pi[free] = (r - s) * h[free] / mass
        if pi.max() > 1.0 + 1e-12:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(h > 0.0, h * h / np.where(pi > 0.0, pi, 1.0), 0.0)
            if np.any((h > 0.0) & (pi <= 0.0)):
                continue
        val = float(terms.sum())
        if val < best_val:
            best_val = val
            best = np.clip(pi, 0.0, 1.0)
    if best is None:
        raise ValueError("no feasible cap count found")
    return best


def bruteforce_probs(h, r: float, tol: float = 1e-12) -> np.ndarray:
    """Numerical solution with a general-purpose constrained optimizer."""
    h = np.asarray(h, dtype=float).reshape(-1)
    n = h.shape[0]
    if not 0 < r < n:
        raise ValueError("need 0 < r < n")
    floor = 1e-9

    def objective(pi):
        return float(np.sum(h * h / pi))

    def gradient(pi):
        return -(h * h) / (pi * pi)

    x0 = np.full(n, r / n)
    res = _scipy_minimize(
        objective,
        x0,
        jac=gradient,
        method="SLSQP",
        bounds=[(floor, 1.0)] * n,
        constraints=[{"type": "eq", "fun": lambda pi: pi.sum() - r, "jac": lambda pi: np.ones(n)}],
        options={"maxiter": 1000, "ftol": tol},
    )
    if not res.success:
        raise RuntimeError(f"constrained solve failed: {res.message}")
    return np.clip(res.x, 0.0, 1.0)


def random_scores(n: int, seed, spread: float = 10.0) -> np.ndarray:
    """Positive score vectors with occasional large outliers, for audits."""
    rng = make_rng(seed)
    h = rng.uniform(0.05, 3.0, size=n)
    boost = rng.random(n) < 0.15
    h[boost] *= spread
    return h
