"""Computer models and synthetic physical data.

A physical observation is ``y = zeta(x) + e`` where ``zeta`` is the real
process and ``e`` is mean-zero noise.  A computer model ``ys(x, theta)`` is a
deterministic simulator of that process; calibration searches for the
parameter ``theta`` whose simulator output is closest to the process in mean
square over the input distribution.

This module defines the :class:`ComputerModel` container, parameter-derivative
machinery with finite-difference fallbacks, a registry of built-in models
(``example1``, ``example2``, ``greenshields``), and synthetic data generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError
from .util import as_matrix, as_vector, make_rng

_EPS = np.finfo(float).eps
GRAD_STEP = _EPS ** (1.0 / 3.0)
HESS_STEP = _EPS ** 0.25
# Slack for box membership checks: float round-trips only, not real violations.
_BOX_SLACK = 1e-12


def _check_box(values: np.ndarray, box: np.ndarray, label: str, context: str) -> None:
    """Raise DomainError naming the first coordinate outside its interval."""
    lo = box[:, 0]
    hi = box[:, 1]
    slack = _BOX_SLACK * (1.0 + np.abs(hi - lo))
    bad = (values < lo - slack) | (values > hi + slack) | ~np.isfinite(values)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise DomainError(
            f"{label}[{col}]={values[row, col]!r} outside "
            f"[{lo[col]!r}, {hi[col]!r}] for {context}"
        )


@dataclass(frozen=True)
class ComputerModel:
    """A deterministic simulator with box-constrained inputs and parameters.

    Attributes
    ----------
    name : str
        Registry name.
    d, q : int
        Input and parameter dimension.
    x_box : (d, 2) array
        Input domain, one ``[lo, hi]`` row per coordinate.
    theta_box : (q, 2) array
        Parameter domain.
    eval_fn : callable
        ``eval_fn(X, theta) -> (N,)`` with ``X`` of shape ``(N, d)``.
    grad_fn, hess_fn : callable, optional
        Analytic parameter derivatives; ``grad_fn(X, theta) -> (N, q)`` and
        ``hess_fn(X, theta) -> (N, q, q)``.  Omitted entries fall back to
        finite differences.
    theta_star : tuple, optional
        Reference best-fit parameter used by the bundled experiments.
    """

    name: str
    d: int
    q: int
    x_box: np.ndarray
    theta_box: np.ndarray
    eval_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    hess_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    theta_star: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "x_box", np.asarray(self.x_box, dtype=float).reshape(self.d, 2))
        object.__setattr__(
            self, "theta_box", np.asarray(self.theta_box, dtype=float).reshape(self.q, 2)
        )

    def _prep(self, x, theta, single):
        X = as_matrix(x, self.d)
        th = as_vector(theta, self.q)
        _check_box(X, self.x_box, "x", f"model '{self.name}'")
        _check_box(th.reshape(1, -1), self.theta_box, "theta", f"model '{self.name}'")
        return X, th, single and X.shape[0] == 1 and np.asarray(x).ndim <= 1

    def evaluate(self, x, theta):
        """Simulator output at ``x``; scalar for a single point, (N,) for a batch."""
        X, th, single = self._prep(x, theta, True)
        out = np.asarray(self.eval_fn(X, th), dtype=float).reshape(X.shape[0])
        return float(out[0]) if single else out

    def grad_theta(self, x, theta):
        """Parameter gradient of the output; (q,) for a single point, (N, q) for a batch."""
        X, th, single = self._prep(x, theta, True)
        if self.grad_fn is not None:
            out = np.asarray(self.grad_fn(X, th), dtype=float).reshape(X.shape[0], self.q)
        else:
            out = fd_grad_theta(self.eval_fn, X, th, self.theta_box)
        return out[0] if single else out

    def hess_theta(self, x, theta):
        """Parameter Hessian of the output; (q, q) or (N, q, q).  Always symmetric."""
        X, th, single = self._prep(x, theta, True)
        if self.hess_fn is not None:
            out = np.asarray(self.hess_fn(X, th), dtype=float).reshape(X.shape[0], self.q, self.q)
        elif self.grad_fn is not None:
            out = fd_hess_from_grad(self.grad_fn, X, th, self.theta_box)
        else:
            out = fd_hess_from_eval(self.eval_fn, X, th, self.theta_box)
        out = 0.5 * (out + np.swapaxes(out, 1, 2))
        return out[0] if single else out


def _stencil_bounds(theta, box, step):
    h = step * np.maximum(1.0, np.abs(theta))
    lo = np.maximum(theta - h, box[:, 0])
    hi = np.minimum(theta + h, box[:, 1])
    return lo, hi


def fd_grad_theta(eval_fn, X, theta, box):
    """Central-difference parameter gradient, one-sided against box edges."""
    q = theta.shape[0]
    lo, hi = _stencil_bounds(theta, box, GRAD_STEP)
    out = np.empty((X.shape[0], q))
    for j in range(q):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] = hi[j]
        tm[j] = lo[j]
        out[:, j] = (eval_fn(X, tp) - eval_fn(X, tm)) / (hi[j] - lo[j])
    return out


def fd_hess_from_grad(grad_fn, X, theta, box):
    """Central difference of an analytic gradient."""
    q = theta.shape[0]
    lo, hi = _stencil_bounds(theta, box, GRAD_STEP)
    out = np.empty((X.shape[0], q, q))
    for j in range(q):
        tp = theta.copy()
        tm = theta.copy()
        tp[j] = hi[j]
        tm[j] = lo[j]
        out[:, :, j] = (grad_fn(X, tp) - grad_fn(X, tm)) / (hi[j] - lo[j])
    return out


def fd_hess_from_eval(eval_fn, X, theta, box):
    """Second differences of the output with a wider step.

    The stencil center is shifted just inside the box when ``theta`` sits on
    an edge, trading a small O(h) bias for staying inside the domain.
    """
    q = theta.shape[0]
    h = HESS_STEP * np.maximum(1.0, np.abs(theta))
    center = np.clip(theta, box[:, 0] + h, box[:, 1] - h)
    out = np.empty((X.shape[0], q, q))
    f0 = eval_fn(X, center)
    for j in range(q):
        tp = center.copy()
        tm = center.copy()
        tp[j] += h[j]
        tm[j] -= h[j]
        out[:, j, j] = (eval_fn(X, tp) - 2.0 * f0 + eval_fn(X, tm)) / h[j] ** 2
        for k in range(j + 1, q):
            tpp = tp.copy()
            tpm = tp.copy()
            tmp = tm.copy()
            tmm = tm.copy()
            tpp[k] += h[k]
            tpm[k] -= h[k]
            tmp[k] += h[k]
            tmm[k] -= h[k]
            mixed = (eval_fn(X, tpp) - eval_fn(X, tpm) - eval_fn(X, tmp) + eval_fn(X, tmm)) / (
                4.0 * h[j] * h[k]
            )
            out[:, j, k] = mixed
            out[:, k, j] = mixed
    return out


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------


def _example1_eval(X, theta):
    x = X[:, 0]
    a = np.sin(2.0 * np.pi * theta[0] - np.pi)
    b = 2.0 * np.pi * theta[1] - np.pi
    return 7.0 * a * a + 2.0 * b * b * np.sin(2.0 * np.pi * x - np.pi)


def _example1_grad(X, theta):
    x = X[:, 0]
    out = np.empty((X.shape[0], 2))
    out[:, 0] = 14.0 * np.pi * np.sin(4.0 * np.pi * theta[0] - 2.0 * np.pi)
    out[:, 1] = 8.0 * np.pi * (2.0 * np.pi * theta[1] - np.pi) * np.sin(2.0 * np.pi * x - np.pi)
    return out


def _example1_hess(X, theta):
    x = X[:, 0]
    out = np.zeros((X.shape[0], 2, 2))
    out[:, 0, 0] = 56.0 * np.pi**2 * np.cos(4.0 * np.pi * theta[0] - 2.0 * np.pi)
    out[:, 1, 1] = 16.0 * np.pi**2 * np.sin(2.0 * np.pi * x - np.pi)
    return out


def example2_process(X):
    """The real process behind ``example2`` (borehole-style smooth surface)."""
    x1, x3, x4 = X[:, 0], X[:, 2], X[:, 3]
    # (x1/2)*(sqrt(1 + (x1+x3^2)*x4/x1^2) - 1), rewritten to stay finite at x1=0.
    term1 = 0.5 * (np.sqrt(x1 * x1 + (x1 + x3 * x3) * x4) - x1)
    term2 = (x1 + 3.0 * x4) * np.exp(1.0 + np.sin(x3))
    return term1 + term2


def _example2_basis(X):
    return -2.0 * X[:, 0] + X[:, 1] ** 2 + X[:, 2] ** 2


def _example2_eval(X, theta):
    return (theta[0] + np.sin(X[:, 0]) / 10.0) * example2_process(X) + theta[1] * _example2_basis(
        X
    ) + 0.5


def _example2_grad(X, theta):
    out = np.empty((X.shape[0], 2))
    out[:, 0] = example2_process(X)
    out[:, 1] = _example2_basis(X)
    return out


def _example2_hess(X, theta):
    # Linear in theta.
    return np.zeros((X.shape[0], 2, 2))


def _greenshields_eval(X, theta):
    k = X[:, 0]
    k_bp, u_f, v_f, v0, k_jam, alpha = theta
    frac = np.clip(1.0 - k / k_jam, 0.0, None)
    congested = v0 + (v_f - v0) * frac**alpha
    # The kink point itself belongs to the congested regime.
    return np.where(k < k_bp, u_f, congested)


def _greenshields_grad(X, theta):
    k = X[:, 0]
    k_bp, u_f, v_f, v0, k_jam, alpha = theta
    n = X.shape[0]
    out = np.zeros((n, 6))
    free = k < k_bp
    frac = np.clip(1.0 - k / k_jam, 0.0, None)
    pos = frac > 0.0
    frac_safe = np.where(pos, frac, 1.0)
    fa = frac**alpha
    # d/d(alpha) and d/d(k_jam) vanish on the frac == 0 corner (k == k_jam).
    log_frac = np.where(pos, np.log(frac_safe), 0.0)
    fam1 = np.where(pos, frac_safe ** (alpha - 1.0), 0.0)
    out[:, 1] = np.where(free, 1.0, 0.0)
    out[:, 2] = np.where(free, 0.0, fa)
    out[:, 3] = np.where(free, 0.0, 1.0 - fa)
    out[:, 4] = np.where(free, 0.0, (v_f - v0) * alpha * fam1 * k / k_jam**2)
    out[:, 5] = np.where(free, 0.0, (v_f - v0) * fa * log_frac)
    return out


def _builtin_example1():
    return ComputerModel(
        name="example1",
        d=1,
        q=2,
        x_box=[[0.0, 1.0]],
        theta_box=[[0.0, 0.25], [0.0, 0.5]],
        eval_fn=_example1_eval,
        grad_fn=_example1_grad,
        hess_fn=_example1_hess,
        theta_star=(0.2, 0.3),
    )


def _builtin_example2():
    return ComputerModel(
        name="example2",
        d=4,
        q=2,
        x_box=[[0.0, 1.0]] * 4,
        theta_box=[[-5.0, 5.0], [-5.0, 5.0]],
        eval_fn=_example2_eval,
        grad_fn=_example2_grad,
        hess_fn=_example2_hess,
        theta_star=(0.895, 0.267),
    )


def _builtin_greenshields():
    # theta = (k_bp, u_f, v_f, v0, k_jam, alpha); speeds km/h, densities veh/km.
    return ComputerModel(
        name="greenshields",
        d=1,
        q=6,
        x_box=[[0.0, 200.0]],
        theta_box=[
            [0.0, 20.0],
            [100.0, 120.0],
            [150.0, 220.0],
            [0.0, 10.0],
            [200.0, 250.0],
            [0.0, 10.0],
        ],
        eval_fn=_greenshields_eval,
        grad_fn=_greenshields_grad,
    )


_REGISTRY: dict = {}


def register_model(model: ComputerModel, overwrite: bool = False) -> None:
    """Add a model to the registry so the CLI and harness can address it by name."""
    if model.name in _REGISTRY and not overwrite:
        raise ValueError(f"model '{model.name}' already registered")
    _REGISTRY[model.name] = model


def get_model(name: str) -> ComputerModel:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model '{name}'; available: {sorted(_REGISTRY)}") from None


def list_models() -> list:
    return sorted(_REGISTRY)


for _m in (_builtin_example1(), _builtin_example2(), _builtin_greenshields()):
    register_model(_m)


# ---------------------------------------------------------------------------
# Physical data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhysicalData:
    """Physical observations: inputs ``x`` of shape (n, d) and outputs ``y`` of shape (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"x has {x.shape[0]} rows but y has {y.shape[0]} entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class _ProcessAt:
    """Picklable wrapper evaluating a computer model at a fixed parameter."""

    model: ComputerModel
    theta: tuple

    def __call__(self, X):
        return self.model.evaluate(X, np.asarray(self.theta))


@dataclass(frozen=True)
class GenConfig:
    """Recipe for synthetic physical data.

    ``zeta`` maps an (n, d) input matrix to (n,) process values; ``design`` is
    either the string ``"uniform"`` (iid uniform on ``omega``) or an explicit
    (n, d) point list.  ``omega`` may be omitted when ``design`` is explicit.
    """

    zeta: Callable[[np.ndarray], np.ndarray]
    sigma: float
    seed: object
    design: object = "uniform"
    omega: Optional[np.ndarray] = None

    @classmethod
    def from_model(cls, model: ComputerModel, theta_star, sigma: float, seed, design="uniform"):
        """Use a computer model at a fixed parameter as the real process."""
        return cls(
            zeta=_ProcessAt(model, tuple(np.asarray(theta_star, dtype=float))),
            sigma=float(sigma),
            seed=seed,
            design=design,
            omega=model.x_box.copy(),
        )


def generate_physical_data(cfg: GenConfig, n: int) -> PhysicalData:
    """Draw ``n`` observations ``y = zeta(x) + sigma * e`` with ``e`` iid standard normal."""
    if cfg.sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = make_rng(cfg.seed)
    if isinstance(cfg.design, str):
        if cfg.design != "uniform":
            raise ValueError(f"unknown design '{cfg.design}'")
        if cfg.omega is None:
            raise ValueError("uniform design requires omega")
        omega = np.asarray(cfg.omega, dtype=float)
        lo = omega[:, 0]
        hi = omega[:, 1]
        X = lo + rng.random((n, omega.shape[0])) * (hi - lo)
    else:
        X = np.asarray(cfg.design, dtype=float)
        X = np.atleast_2d(X) if X.ndim > 1 else X.reshape(-1, 1)
        if X.shape[0] != n:
            raise ValueError(f"explicit design has {X.shape[0]} rows, expected n={n}")
    noise = rng.standard_normal(n)
    y = np.asarray(cfg.zeta(X), dtype=float).reshape(-1) + cfg.sigma * noise
    return PhysicalData(x=X, y=y)
