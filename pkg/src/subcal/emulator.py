"""Surrogates for the computer model.

The calibration estimators only ever query a predictor ``em.predict(X, theta)``
and its parameter derivatives.  Two implementations are provided:

* :class:`PassThrough` wraps a :class:`~subcal.models.ComputerModel` directly
  (cheap simulators, unit tests).
* :class:`GpEmulator` is a Gaussian-process interpolator with an anisotropic
  squared-exponential kernel and a constant mean, fitted to simulator runs at
  a maximin Latin hypercube design over the joint input/parameter box.

The GP mean is differentiated analytically, so score computations do not pay
for finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize as _scipy_minimize

from .errors import FitError
from .models import ComputerModel, _check_box
from .util import as_matrix, as_vector, make_rng

# Exchange optimization is meant for emulator-sized designs; beyond this many
# points the plain Latin hypercube is returned unchanged.
_EXCHANGE_LIMIT = 256

# Batch predictions are evaluated in blocks of this many rows.
_PREDICT_CHUNK = 2048


@dataclass(frozen=True)
class Design:
    """Design points for computer experiments, one row per run."""

    points: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", pts)
        object.__setattr__(
            self, "bounds", np.asarray(self.bounds, dtype=float).reshape(pts.shape[1], 2)
        )

    @property
    def m(self) -> int:
        return self.points.shape[0]


def _min_sqdist(pts: np.ndarray) -> float:
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    return float(d2.min())


def maximin_lhd(m: int, bounds, seed=0, proposals: Optional[int] = None) -> Design:
    """Latin hypercube design improved by pairwise-swap exchange.

    Starts from a jittered Latin hypercube on the unit cube, then proposes
    ``proposals`` (default ``10*m``) random within-column swaps per column,
    keeping a swap only when it strictly increases the minimum pairwise
    distance.  The Latin property is preserved exactly because swaps permute
    stratum assignments.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    dims = bounds.shape[0]
    if m < 1:
        raise ValueError("design size must be at least 1")
    if proposals is None:
        proposals = 10 * m
    rng = make_rng(seed)
    unit = np.empty((m, dims))
    for c in range(dims):
        unit[:, c] = (rng.permutation(m) + rng.random(m)) / m
    if 2 <= m <= _EXCHANGE_LIMIT and proposals > 0:
        best = _min_sqdist(unit)
        for c in range(dims):
            for _ in range(proposals):
                i, j = rng.choice(m, size=2, replace=False)
                unit[i, c], unit[j, c] = unit[j, c], unit[i, c]
                cand = _min_sqdist(unit)
                if cand > best:
                    best = cand
                else:
                    unit[i, c], unit[j, c] = unit[j, c], unit[i, c]
    lo = bounds[:, 0]
    hi = bounds[:, 1]
    return Design(points=lo + unit * (hi - lo), bounds=bounds)


def model_design(model: ComputerModel, m: int, seed=0) -> Design:
    """Maximin design over the joint input/parameter box of a model."""
    bounds = np.vstack([model.x_box, model.theta_box])
    return maximin_lhd(m, bounds, seed)


@dataclass(frozen=True)
class PassThrough:
    """Expose a computer model through the emulator interface."""

    model: ComputerModel

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def q(self) -> int:
        return self.model.q

    @property
    def x_box(self) -> np.ndarray:
        return self.model.x_box

    @property
    def theta_box(self) -> np.ndarray:
        return self.model.theta_box

    def predict(self, x, theta):
        return self.model.evaluate(x, theta)

    def grad_theta(self, x, theta):
        return self.model.grad_theta(x, theta)

    def hess_theta(self, x, theta):
        return self.model.hess_theta(x, theta)


@dataclass(frozen=True)
class GpOptions:
    """Hyperparameter search settings for :func:`fit_gp`."""

    n_starts: int = 8
    max_iter: int = 200
    nugget: float = 1e-8
    lengthscales: Optional[np.ndarray] = None
    seed: int = 0


def _chol_with_escalation(corr: np.ndarray, nugget: float):
    """Cholesky of corr + nugget*I, escalating the nugget tenfold up to 1e-2."""
    level = nugget
    while level <= 1e-2:
        try:
            return sla.cholesky(corr + level * np.eye(corr.shape[0]), lower=True), level
        except sla.LinAlgError:
            level *= 10.0
    raise FitError("correlation matrix is not positive definite even at nugget 1e-2")


def _profiled_fit(corr_chol, y):
    """Constant mean and signal variance maximizing the likelihood at fixed correlation."""
    m = y.shape[0]
    ones = np.ones(m)
    ri_y = sla.cho_solve((corr_chol, True), y)
    ri_1 = sla.cho_solve((corr_chol, True), ones)
    mu = float(ones @ ri_y) / float(ones @ ri_1)
    resid = y - mu
    tau2 = float(resid @ sla.cho_solve((corr_chol, True), resid)) / m
    return mu, tau2, resid


@dataclass(frozen=True)
class GpEmulator:
    """Fitted GP mean over the joint (x, theta) box.

    Predictions are ``mu + r(z)' alpha`` where ``r`` is the correlation vector
    against the training runs on unit-cube coordinates.  ``alpha`` is cached so
    serialized emulators predict bit-identically after a round trip.
    """

    d: int
    q: int
    bounds: np.ndarray
    train_unit: np.ndarray
    train_y: np.ndarray
    lengthscales: np.ndarray
    mu: float
    tau2: float
    nugget: float
    alpha: np.ndarray

    @property
    def x_box(self) -> np.ndarray:
        return self.bounds[: self.d]

    @property
    def theta_box(self) -> np.ndarray:
        return self.bounds[self.d :]

    @property
    def m(self) -> int:
        return self.train_unit.shape[0]

    def _unit(self, X, theta):
        Z = np.hstack([X, np.broadcast_to(theta, (X.shape[0], self.q))])
        lo = self.bounds[:, 0]
        width = self.bounds[:, 1] - lo
        return (Z - lo) / width

    def _corr_to_train(self, Zu):
        diff = Zu[:, None, :] - self.train_unit[None, :, :]
        d2 = np.einsum("nmk,nmk,k->nm", diff, diff, 0.5 / self.lengthscales**2)
        return np.exp(-d2), diff

    def _prep(self, x, theta, single):
        X = as_matrix(x, self.d)
        th = as_vector(theta, self.q)
        _check_box(X, self.x_box, "x", "gp emulator")
        _check_box(th.reshape(1, -1), self.theta_box, "theta", "gp emulator")
        return X, th, single and X.shape[0] == 1 and np.asarray(x).ndim <= 1

    def predict(self, x, theta):
        X, th, single = self._prep(x, theta, True)
        out = np.empty(X.shape[0])
        # Blockwise so the (n, m, dims) scratch stays cache-sized.
        for s in range(0, X.shape[0], _PREDICT_CHUNK):
            corr, _ = self._corr_to_train(self._unit(X[s : s + _PREDICT_CHUNK], th))
            out[s : s + _PREDICT_CHUNK] = self.mu + corr @ self.alpha
        return float(out[0]) if single else out

    def grad_theta(self, x, theta):
        X, th, single = self._prep(x, theta, True)
        width = self.bounds[:, 1] - self.bounds[:, 0]
        out = np.empty((X.shape[0], self.q))
        for s in range(0, X.shape[0], _PREDICT_CHUNK):
            corr, diff = self._corr_to_train(self._unit(X[s : s + _PREDICT_CHUNK], th))
            for j in range(self.q):
                c = self.d + j
                # d corr / d z_c = -(z_c - x_c)/l_c^2 * corr, chained through scaling.
                dcorr = -(diff[:, :, c] / self.lengthscales[c] ** 2) * corr
                out[s : s + _PREDICT_CHUNK, j] = (dcorr @ self.alpha) / width[c]
        return out[0] if single else out

    def hess_theta(self, x, theta):
        X, th, single = self._prep(x, theta, True)
        width = self.bounds[:, 1] - self.bounds[:, 0]
        out = np.empty((X.shape[0], self.q, self.q))
        for s in range(0, X.shape[0], _PREDICT_CHUNK):
            corr, diff = self._corr_to_train(self._unit(X[s : s + _PREDICT_CHUNK], th))
            u = [
                -(diff[:, :, self.d + j] / self.lengthscales[self.d + j] ** 2)
                for j in range(self.q)
            ]
            for j in range(self.q):
                cj = self.d + j
                for k in range(j, self.q):
                    ck = self.d + k
                    term = u[j] * u[k]
                    if j == k:
                        term = term - 1.0 / self.lengthscales[cj] ** 2
                    val = ((term * corr) @ self.alpha) / (width[cj] * width[ck])
                    out[s : s + _PREDICT_CHUNK, j, k] = val
                    out[s : s + _PREDICT_CHUNK, k, j] = val
        return out[0] if single else out

    def to_json(self) -> str:
        payload = {
            "kind": "gp-emulator",
            "version": 1,
            "d": self.d,
            "q": self.q,
            "bounds": self.bounds.tolist(),
            "train_unit": self.train_unit.tolist(),
            "train_y": self.train_y.tolist(),
            "lengthscales": self.lengthscales.tolist(),
            "mu": self.mu,
            "tau2": self.tau2,
            "nugget": self.nugget,
            "alpha": self.alpha.tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GpEmulator":
        payload = json.loads(text)
        if payload.get("kind") != "gp-emulator":
            raise FitError("not a serialized gp emulator")
        if payload.get("version") != 1:
            raise FitError(f"unsupported emulator version {payload.get('version')!r}")
        return cls(
            d=int(payload["d"]),
            q=int(payload["q"]),
            bounds=np.asarray(payload["bounds"], dtype=float),
            train_unit=np.asarray(payload["train_unit"], dtype=float),
            train_y=np.asarray(payload["train_y"], dtype=float),
            lengthscales=np.asarray(payload["lengthscales"], dtype=float),
            mu=float(payload["mu"]),
            tau2=float(payload["tau2"]),
            nugget=float(payload["nugget"]),
            alpha=np.asarray(payload["alpha"], dtype=float),
        )


def _concentrated_nll(log_l, sqdists, y, nugget):
    m = y.shape[0]
    inv_l2 = 0.5 * np.exp(-2.0 * log_l)
    corr = np.exp(-np.tensordot(sqdists, inv_l2, axes=(0, 0)))
    try:
        chol = sla.cholesky(corr + nugget * np.eye(m), lower=True)
    except sla.LinAlgError:
        return 1e12
    _, tau2, _ = _profiled_fit(chol, y)
    if not np.isfinite(tau2) or tau2 <= 0.0:
        return 1e12
    return 0.5 * m * np.log(tau2) + np.log(np.diag(chol)).sum()


def fit_gp(model: ComputerModel, design: Optional[Design] = None, opts: Optional[GpOptions] = None,
           m: Optional[int] = None, seed=0) -> GpEmulator:
    """Run the simulator at a design and fit the GP surrogate.

    Lengthscales are found by multi-start L-BFGS-B on the concentrated
    negative log likelihood in log-lengthscale space; the constant mean and
    signal variance have closed forms at fixed correlation.  When ``design``
    is omitted a maximin Latin hypercube with ``m`` runs (default
    ``10 * (d + q)``) is generated from ``seed``.
    """
    opts = opts or GpOptions()
    if design is None:
        m = m if m is not None else 10 * (model.d + model.q)
        design = model_design(model, m, seed=seed)
    pts = design.points
    dims = model.d + model.q
    if pts.shape[1] != dims:
        raise FitError(f"design has {pts.shape[1]} columns, model needs {dims}")
    y = np.array([model.evaluate(row[: model.d], row[model.d :]) for row in pts], dtype=float)

    bounds = np.asarray(design.bounds, dtype=float)
    lo = bounds[:, 0]
    width = bounds[:, 1] - lo
    if np.any(width <= 0):
        raise FitError("design bounds must have positive width")
    unit = (pts - lo) / width
    diff = unit[:, None, :] - unit[None, :, :]
    sqdists = np.transpose(diff * diff, (2, 0, 1))  # (dims, m, m)

    if opts.lengthscales is not None:
        best_log_l = np.log(np.asarray(opts.lengthscales, dtype=float))
    else:
        rng = make_rng(opts.seed)
        starts = np.log(0.05) + (np.log(3.0) - np.log(0.05)) * rng.random((opts.n_starts, dims))
        starts[0] = np.log(0.5)
        best_log_l = None
        best_val = np.inf
        box = [(np.log(1e-2), np.log(3e1))] * dims
        for s in starts:
            res = _scipy_minimize(
                _concentrated_nll,
                s,
                args=(sqdists, y, opts.nugget),
                method="L-BFGS-B",
                bounds=box,
                options={"maxiter": opts.max_iter},
            )
            if res.fun < best_val:
                best_val = res.fun
                best_log_l = res.x
        if best_log_l is None:
            raise FitError("hyperparameter search failed to produce a candidate")

    lengthscales = np.exp(best_log_l)
    inv_l2 = 0.5 / lengthscales**2
    corr = np.exp(-np.tensordot(sqdists, inv_l2, axes=(0, 0)))
    chol, nugget_used = _chol_with_escalation(corr, opts.nugget)
    mu, tau2, resid = _profiled_fit(chol, y)
    alpha = sla.cho_solve((chol, True), resid)
    return GpEmulator(
        d=model.d,
        q=model.q,
        bounds=bounds,
        train_unit=unit,
        train_y=y,
        lengthscales=lengthscales,
        mu=mu,
        tau2=tau2,
        nugget=nugget_used,
        alpha=alpha,
    )
