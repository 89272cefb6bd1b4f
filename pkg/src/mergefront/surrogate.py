"""Gaussian-process regression, one independent model per objective.

Matern-5/2 kernel with per-dimension length-scales, constant mean, and
homoscedastic Gaussian noise. Hyperparameters maximize the log marginal
likelihood via multi-start L-BFGS-B in log space, with analytic gradients.
Targets are standardized internally; posteriors are reported in the
original units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import ArityError, DomainError, NumericalError

NOISE_FLOOR = 1e-6
LENGTH_SCALE_BOUNDS = (1e-3, 1e3)
SIGNAL_VARIANCE_BOUNDS = (1e-4, 1e4)
NOISE_VARIANCE_BOUNDS = (NOISE_FLOOR, 10.0)
MEAN_BOUNDS = (-10.0, 10.0)

SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class GPHyperparams:
    """Constant mean, signal/noise variances, per-dimension length-scales."""

    mean: float
    signal_variance: float
    noise_variance: float
    length_scales: np.ndarray

    def __post_init__(self):
        ls = np.asarray(self.length_scales, dtype=float).ravel()
        object.__setattr__(self, "length_scales", ls)
        if self.signal_variance <= 0:
            raise DomainError(f"signal variance must be positive, got {self.signal_variance}")
        if self.noise_variance < NOISE_FLOOR:
            raise DomainError(f"noise variance must be >= {NOISE_FLOOR}")
        if np.any(ls <= 0):
            raise DomainError("length scales must be positive")

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "signal_variance": self.signal_variance,
            "noise_variance": self.noise_variance,
            "length_scales": [float(v) for v in self.length_scales],
        }


def default_init(dim: int) -> GPHyperparams:
    """Standard starting point: zero mean, unit signal, small noise."""
    return GPHyperparams(
        mean=0.0,
        signal_variance=1.0,
        noise_variance=1e-2,
        length_scales=np.full(dim, 0.5 * np.sqrt(dim)),
    )


def matern52_ard(x, x2, hyper: GPHyperparams) -> float:
    """Matern-5/2 covariance between two points under ARD length-scales."""
    a = np.asarray(x, dtype=float).ravel()
    b = np.asarray(x2, dtype=float).ravel()
    if a.shape != b.shape or a.size != hyper.length_scales.size:
        raise DomainError("point dimensions must match the length-scale count")
    d = np.sqrt(np.sum(((a - b) / hyper.length_scales) ** 2))
    return float(
        hyper.signal_variance * (1.0 + SQRT5 * d + 5.0 * d * d / 3.0) * np.exp(-SQRT5 * d)
    )


def _matern52_gram(X1: np.ndarray, X2: np.ndarray, signal_variance: float, length_scales) -> np.ndarray:
    A = X1 / length_scales
    B = X2 / length_scales
    sq = np.maximum(
        np.sum(A * A, axis=1)[:, None] - 2.0 * A @ B.T + np.sum(B * B, axis=1)[None, :],
        0.0,
    )
    d = np.sqrt(sq)
    return signal_variance * (1.0 + SQRT5 * d + (5.0 / 3.0) * sq) * np.exp(-SQRT5 * d)


def _pack(hyper: GPHyperparams) -> np.ndarray:
    return np.concatenate(
        (
            [hyper.mean, np.log(hyper.signal_variance), np.log(hyper.noise_variance)],
            np.log(hyper.length_scales),
        )
    )


def _unpack(theta: np.ndarray) -> GPHyperparams:
    return GPHyperparams(
        mean=float(theta[0]),
        signal_variance=float(np.exp(theta[1])),
        noise_variance=float(max(np.exp(theta[2]), NOISE_FLOOR)),
        length_scales=np.exp(theta[3:]),
    )


def mll_and_grad(X: np.ndarray, y: np.ndarray, theta: np.ndarray):
    """Log marginal likelihood and its gradient in packed log-space.

    theta = [mean, log signal_variance, log noise_variance, log ls_1..D].
    Returns (-inf, zeros) when the kernel matrix is numerically indefinite.
    """
    n, dim = X.shape
    mean = theta[0]
    sv = np.exp(theta[1])
    nv = np.exp(theta[2])
    ls = np.exp(theta[3:])

    scaled = X / ls
    sq_parts = (scaled[:, None, :] - scaled[None, :, :]) ** 2  # (n, n, D)
    sq = sq_parts.sum(axis=2)
    d = np.sqrt(np.maximum(sq, 0.0))
    decay = np.exp(-SQRT5 * d)
    kf = sv * (1.0 + SQRT5 * d + (5.0 / 3.0) * sq) * decay
    k_noisy = kf + nv * np.eye(n)

    try:
        chol = cholesky(k_noisy, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros_like(theta)

    z = y - mean
    alpha = cho_solve((chol, True), z)
    mll = (
        -0.5 * float(z @ alpha)
        - float(np.log(np.diag(chol)).sum())
        - 0.5 * n * np.log(2.0 * np.pi)
    )

    k_inv = cho_solve((chol, True), np.eye(n))
    w = np.outer(alpha, alpha) - k_inv  # dMLL/dK = w / 2

    grad = np.empty_like(theta)
    grad[0] = float(alpha.sum())
    grad[1] = 0.5 * float(np.sum(w * kf))
    grad[2] = 0.5 * nv * float(np.trace(w))
    # dK/d(log ls_i) = (5/3) sv (1 + sqrt5 d) decay * (dx_i / ls_i)^2
    g = (5.0 / 3.0) * sv * (1.0 + SQRT5 * d) * decay
    wg = w * g
    for i in range(dim):
        grad[3 + i] = 0.5 * float(np.sum(wg * sq_parts[:, :, i]))
    return mll, grad


def log_marginal_likelihood(X, y, hyper: GPHyperparams) -> float:
    """MLL of the given hyperparameters on raw (unstandardized) targets."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    value, _ = mll_and_grad(X, y, _pack(hyper))
    return value


@dataclass
class GPModel:
    """Fitted surrogate with cached Cholesky factor for posterior queries."""

    hyper: GPHyperparams
    train_X: np.ndarray
    train_y: np.ndarray  # standardized targets
    y_shift: float
    y_scale: float
    chol: np.ndarray
    alpha: np.ndarray
    mll: float = np.nan
    init_mll: float = np.nan

    @classmethod
    def from_hyperparams(cls, X, y, hyper: GPHyperparams, standardize: bool = True) -> "GPModel":
        """Condition on data with fixed hyperparameters (no fitting)."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if standardize:
            shift = float(y.mean())
            scale = float(y.std())
            if scale == 0.0:
                scale = 1.0
        else:
            shift, scale = 0.0, 1.0
        yz = (y - shift) / scale
        kf = _matern52_gram(X, X, hyper.signal_variance, hyper.length_scales)
        chol = _robust_cholesky(kf + hyper.noise_variance * np.eye(len(X)))
        alpha = cho_solve((chol, True), yz - hyper.mean)
        mll, _ = mll_and_grad(X, yz, _pack(hyper))
        return cls(hyper, X, yz, shift, scale, chol, alpha, mll=mll, init_mll=mll)


def _robust_cholesky(mat: np.ndarray) -> np.ndarray:
    jitter = 0.0
    scale = float(np.mean(np.diag(mat))) or 1.0
    for _ in range(8):
        try:
            return cholesky(mat + jitter * np.eye(len(mat)), lower=True)
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12 * scale)
    raise NumericalError("Cholesky factorization failed despite jitter escalation")


def fit_gp(X, y, n_restarts: int = 8, max_iter: int = 200, seed: int = 0) -> GPModel:
    """Fit by multi-start L-BFGS-B ascent of the marginal likelihood.

    The first start is the fixed default initialization; the remainder are
    seeded log-uniform draws within the bounds. The returned model's MLL is
    never below the default initialization's (both are recorded on the
    model for auditing).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise ArityError("X must be (N, D) with one target per row")
    n, dim = X.shape
    if n < 2:
        raise ArityError(f"need at least 2 observations, got {n}")

    y_shift = float(y.mean())
    y_scale = float(y.std())
    if y_scale == 0.0:
        y_scale = 1.0
    yz = (y - y_shift) / y_scale

    bounds = (
        [MEAN_BOUNDS, tuple(np.log(SIGNAL_VARIANCE_BOUNDS)), tuple(np.log(NOISE_VARIANCE_BOUNDS))]
        + [tuple(np.log(LENGTH_SCALE_BOUNDS))] * dim
    )

    theta0 = _pack(default_init(dim))
    init_mll, _ = mll_and_grad(X, yz, theta0)

    rng = np.random.default_rng(seed)
    starts = [theta0]
    for _ in range(max(n_restarts - 1, 0)):
        draw = np.array([rng.uniform(lo, hi) for lo, hi in bounds])
        draw[0] = rng.normal(0.0, 1.0)
        starts.append(draw)

    def negative(theta):
        value, grad = mll_and_grad(X, yz, theta)
        if not np.isfinite(value):
            return 1e12, np.zeros_like(theta)
        return -value, -grad

    best_theta, best_mll = theta0, init_mll
    for start in starts:
        res = minimize(
            negative,
            start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_iter},
        )
        value, _ = mll_and_grad(X, yz, res.x)
        if value > best_mll:
            best_theta, best_mll = res.x, value

    hyper = _unpack(best_theta)
    kf = _matern52_gram(X, X, hyper.signal_variance, hyper.length_scales)
    chol = _robust_cholesky(kf + hyper.noise_variance * np.eye(n))
    alpha = cho_solve((chol, True), yz - hyper.mean)
    return GPModel(
        hyper, X, yz, y_shift, y_scale, chol, alpha, mll=best_mll, init_mll=init_mll
    )


def _posterior_standardized(model: GPModel, Xq: np.ndarray):
    """Latent posterior mean/cov in standardized-target units."""
    k_star = _matern52_gram(
        model.train_X, Xq, model.hyper.signal_variance, model.hyper.length_scales
    )
    mean = model.hyper.mean + k_star.T @ model.alpha
    v = solve_triangular(model.chol, k_star, lower=True)
    prior = _matern52_gram(Xq, Xq, model.hyper.signal_variance, model.hyper.length_scales)
    cov = prior - v.T @ v
    return mean, cov


def gp_posterior(model: GPModel, Xq) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance at query rows, in original y units.

    The covariance is symmetrized and eigenvalue-clamped so it is positive
    semidefinite up to roundoff.
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    if Xq.shape[1] != model.train_X.shape[1]:
        raise DomainError(
            f"query dimension {Xq.shape[1]} != training dimension {model.train_X.shape[1]}"
        )
    mean_z, cov_z = _posterior_standardized(model, Xq)
    mean = model.y_shift + model.y_scale * mean_z
    cov = (model.y_scale**2) * cov_z
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    cov = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
    return mean, 0.5 * (cov + cov.T)
