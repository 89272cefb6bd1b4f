"""Multi-objective machinery: dominance, hypervolume, Sobol, qEHVI.

Everything operates in maximization form. Hypervolume is exact for 2 and 3
objectives (sweep line / slicing) and Monte-Carlo estimated above that. The
batch acquisition value is a Monte-Carlo estimate of the joint hypervolume
improvement, reparameterized through fixed Sobol-normal base samples so it
is deterministic in the candidate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm, qmc

from .errors import (
    ArityError,
    DimensionError,
    DomainError,
    NumericalError,
    ReferencePointError,
)
from .surrogate import GPModel, _matern52_gram

MAX_SOBOL_DIM = 21201


@dataclass(frozen=True)
class ParetoFront:
    """Non-dominated objective vectors and their archive positions."""

    points: np.ndarray  # (m, K)
    indices: np.ndarray  # (m,)

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def n_objectives(self) -> int:
        return self.points.shape[1] if self.points.size else 0


@dataclass(frozen=True)
class ReferencePoint:
    r: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).ravel())


def _as_ref(ref) -> np.ndarray:
    if isinstance(ref, ReferencePoint):
        return ref.r
    return np.asarray(ref, dtype=float).ravel()


def _as_points(front) -> np.ndarray:
    if isinstance(front, ParetoFront):
        return front.points
    return np.atleast_2d(np.asarray(front, dtype=float))


def dominates(a, b) -> bool:
    """True when a is at least as good everywhere and better somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(a >= b) and np.any(a > b))


def pareto_filter(Y) -> ParetoFront:
    """Maximal non-dominated subset, duplicates collapsed to lowest index.

    Output is ordered by first objective descending, ties broken by the
    following objectives.
    """
    arr = np.atleast_2d(np.asarray(Y, dtype=float))
    if arr.size == 0:
        return ParetoFront(np.empty((0, 0)), np.empty(0, dtype=int))
    if not np.all(np.isfinite(arr)):
        raise DomainError("objective vectors must be finite")

    first_of: dict[tuple, int] = {}
    for i, row in enumerate(arr):
        first_of.setdefault(tuple(row), i)
    candidates = sorted(first_of.values())
    pts = arr[candidates]

    keep = []
    for i, p in enumerate(pts):
        others = np.delete(pts, i, axis=0)
        if others.size and np.any(
            np.all(others >= p, axis=1) & np.any(others > p, axis=1)
        ):
            continue
        keep.append(i)
    pts = pts[keep]
    idx = np.asarray(candidates, dtype=int)[keep]
    order = np.lexsort(tuple(-pts[:, k] for k in reversed(range(pts.shape[1]))))
    return ParetoFront(pts[order], idx[order])


def _hv_2d_batch(points: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Exact 2-D hypervolume of each point set in a (B, M, 2) stack.

    Sweep over the first objective in descending order, accumulating each
    point's rectangle above the running second-objective maximum. Points at
    or below the reference are clamped and contribute nothing.
    """
    p = np.maximum(points, ref)
    order = np.argsort(-p[..., 0], axis=-1, kind="stable")
    f1 = np.take_along_axis(p[..., 0], order, axis=-1)
    f2 = np.take_along_axis(p[..., 1], order, axis=-1)
    running = np.maximum.accumulate(f2, axis=-1)
    prev = np.concatenate(
        [np.full(f2.shape[:-1] + (1,), ref[1]), running[..., :-1]], axis=-1
    )
    contrib = (f1 - ref[0]) * np.clip(f2 - prev, 0.0, None)
    return contrib.sum(axis=-1)


def _hv_3d(points: np.ndarray, ref: np.ndarray) -> float:
    """Exact 3-D hypervolume by slicing along the third objective."""
    p = np.maximum(points, ref)
    order = np.argsort(-p[:, 2], kind="stable")
    p = p[order]
    hv = 0.0
    for i in range(len(p)):
        z_hi = p[i, 2]
        z_lo = p[i + 1, 2] if i + 1 < len(p) else ref[2]
        thickness = z_hi - z_lo
        if thickness <= 0.0:
            continue
        active = p[: i + 1, :2]
        hv += float(_hv_2d_batch(active[None], ref[:2])[0]) * thickness
    return hv


def hypervolume_mc(points, ref, n_samples: int = 200_000, seed: int = 0):
    """Monte-Carlo dominated-volume estimate, returns (estimate, stderr)."""
    pts = _as_points(points)
    r = _as_ref(ref)
    upper = pts.max(axis=0)
    box = np.prod(upper - r)
    if box <= 0.0:
        return 0.0, 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 100_000
    remaining = n_samples
    while remaining > 0:
        m = min(chunk, remaining)
        u = rng.uniform(r, upper, size=(m, len(r)))
        dominated = np.any(np.all(pts[None, :, :] >= u[:, None, :], axis=2), axis=1)
        hits += int(dominated.sum())
        remaining -= m
    p_hat = hits / n_samples
    est = box * p_hat
    stderr = box * np.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n_samples)
    return float(est), float(stderr)


def hypervolume(front, ref, mc_samples: int = 200_000, seed: int = 0) -> float:
    """Dominated volume above ``ref``: exact for K <= 3, MC estimate beyond.

    The reference must be strictly dominated by every front point.
    """
    pts = _as_points(front)
    r = _as_ref(ref)
    if pts.size == 0:
        return 0.0
    if pts.shape[1] != r.size:
        raise ReferencePointError(
            f"reference has {r.size} objectives, front has {pts.shape[1]}"
        )
    if not np.all(pts > r):
        raise ReferencePointError("reference point must be strictly below every front point")
    k = pts.shape[1]
    if k == 1:
        return float(pts.max() - r[0])
    if k == 2:
        return float(_hv_2d_batch(pts[None], r)[0])
    if k == 3:
        return _hv_3d(pts, r)
    est, _ = hypervolume_mc(pts, r, n_samples=mc_samples, seed=seed)
    return est


def sobol(n: int, d: int, seed: int | None = None) -> np.ndarray:
    """First n points of a d-dimensional Sobol sequence in [0, 1)^d.

    With ``seed`` the sequence is Owen-scrambled (deterministic per seed);
    without it the plain sequence starts at the all-zeros point.
    """
    if d < 1 or d > MAX_SOBOL_DIM:
        raise DimensionError(f"Sobol dimension must be in [1, {MAX_SOBOL_DIM}], got {d}")
    if n < 0:
        raise DomainError(f"sample count must be non-negative, got {n}")
    if n == 0:
        return np.empty((0, d))
    engine = qmc.Sobol(d=d, scramble=seed is not None, seed=seed)
    m = 1 << max(int(np.ceil(np.log2(n))), 0)
    return engine.random(m)[:n]


@dataclass(frozen=True)
class BaseSamples:
    """Fixed standard-normal draws shared by one acquisition optimization."""

    eps: np.ndarray  # (S, q * n_objectives)
    seed: int
    q: int
    n_objectives: int


def draw_base_samples(n_samples: int, q: int, n_objectives: int, seed: int) -> BaseSamples:
    """Sobol-scrambled uniforms pushed through the normal inverse CDF."""
    u = sobol(n_samples, q * n_objectives, seed=seed)
    tiny = np.finfo(float).tiny
    eps = norm.ppf(np.clip(u, tiny, 1.0 - 1e-12))
    return BaseSamples(eps=eps, seed=seed, q=q, n_objectives=n_objectives)


def _posterior_blocks(model: GPModel, Xb: np.ndarray):
    """Per-batch posterior mean (R, q) and covariance (R, q, q), in y units."""
    r_batches, q, dim = Xb.shape
    flat = Xb.reshape(r_batches * q, dim)
    k_star = _matern52_gram(
        model.train_X, flat, model.hyper.signal_variance, model.hyper.length_scales
    )
    mean_z = model.hyper.mean + k_star.T @ model.alpha
    v = solve_triangular(model.chol, k_star, lower=True)
    v = v.reshape(len(model.train_X), r_batches, q)
    explained = np.einsum("nrq,nrp->rqp", v, v)
    scaled = Xb / model.hyper.length_scales
    sq = np.maximum(
        np.einsum("rqd,rpd->rqp", scaled, scaled) * -2.0
        + np.sum(scaled**2, axis=2)[:, :, None]
        + np.sum(scaled**2, axis=2)[:, None, :],
        0.0,
    )
    d = np.sqrt(sq)
    prior = (
        model.hyper.signal_variance
        * (1.0 + np.sqrt(5.0) * d + (5.0 / 3.0) * sq)
        * np.exp(-np.sqrt(5.0) * d)
    )
    cov_z = prior - explained
    mean = model.y_shift + model.y_scale * mean_z.reshape(r_batches, q)
    cov = (model.y_scale**2) * cov_z
    return mean, cov


def _batched_cholesky(cov: np.ndarray) -> np.ndarray:
    scale = float(np.mean(np.trace(cov, axis1=1, axis2=2)) / cov.shape[1]) or 1.0
    jitter = 0.0
    eye = np.eye(cov.shape[1])
    for _ in range(10):
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-12 * abs(scale))
    raise NumericalError("posterior covariance is not factorizable despite jitter")


def _qehvi_many(models, front, ref, Xbatches: np.ndarray, base: BaseSamples, chunk: int = 128):
    """Vectorized qEHVI over R candidate batches; returns (R,) values."""
    n_obj = len(models)
    front_pts = _as_points(front)
    r = _as_ref(ref)
    Xbatches = np.asarray(Xbatches, dtype=float)
    r_total, q, dim = Xbatches.shape
    if base.eps.shape[1] != q * n_obj:
        raise ArityError(
            f"base samples cover {base.eps.shape[1]} columns, need q*K = {q * n_obj}"
        )
    if n_obj not in (2, 3):
        raise DimensionError("batch acquisition needs exact hypervolume, so 2 or 3 objectives")
    if front_pts.size == 0:
        front_pts = np.empty((0, n_obj))

    # canonical candidate order makes the estimate permutation-invariant
    canon = np.empty_like(Xbatches)
    for i in range(r_total):
        order = np.lexsort(Xbatches[i].T[::-1])
        canon[i] = Xbatches[i][order]

    if n_obj == 2:
        hv_base = float(_hv_2d_batch(front_pts[None], r)[0]) if len(front_pts) else 0.0
    else:
        hv_base = _hv_3d(front_pts, r) if len(front_pts) else 0.0
    s_total = base.eps.shape[0]
    values = np.empty(r_total)
    for start in range(0, r_total, chunk):
        xb = canon[start : start + chunk]
        rb = len(xb)
        ys = []
        for k, model in enumerate(models):
            mean, cov = _posterior_blocks(model, xb)
            chol = _batched_cholesky(cov)
            eps_k = base.eps[:, k * q : (k + 1) * q]
            ys.append(mean[:, None, :] + np.einsum("rab,sb->rsa", chol, eps_k))
        samples = np.stack(ys, axis=-1)  # (rb, S, q, K)
        if len(front_pts):
            front_rep = np.broadcast_to(
                front_pts, (rb, s_total) + front_pts.shape
            )
            pts = np.concatenate([front_rep, samples], axis=2)
        else:
            pts = samples
        flat = pts.reshape(rb * s_total, pts.shape[2], n_obj)
        if n_obj == 2:
            hv_union = _hv_2d_batch(flat, r).reshape(rb, s_total)
        else:
            hv_union = np.array([_hv_3d(rows, r) for rows in flat]).reshape(rb, s_total)
        improvement = hv_union - hv_base
        if improvement.min() < -1e-9:
            raise NumericalError(
                f"hypervolume improvement {improvement.min()} below -1e-9"
            )
        values[start : start + rb] = np.clip(improvement, 0.0, None).mean(axis=1)
    return values


def qehvi(models, front, ref, Xcand, base: BaseSamples) -> float:
    """Expected joint hypervolume improvement of one candidate batch.

    Posterior samples are mean + Cholesky * eps per objective (objectives
    independent), the improvement over the current front is clamped at zero
    per sample, and the mean over base samples is returned.
    """
    Xcand = np.atleast_2d(np.asarray(Xcand, dtype=float))
    if Xcand.shape[0] != base.q:
        raise ArityError(f"candidate batch has {Xcand.shape[0]} rows, base samples expect {base.q}")
    return float(_qehvi_many(models, front, ref, Xcand[None], base)[0])


def sobol_candidate_batches(n: int, q: int, dim: int, seed: int) -> np.ndarray:
    """Seeded Sobol sample of n candidate batches in [0,1]^(q*dim)."""
    return sobol(n, q * dim, seed=seed).reshape(n, q, dim)


@dataclass(frozen=True)
class AcquisitionBudget:
    sobol_batches: int = 1024
    perturbation_batches: int = 64
    restarts: int = 2
    max_steps: int = 20
    grad_step: float = 1e-3
    init_step: float = 0.25


def optimize_acquisition(
    models,
    front,
    ref,
    q: int,
    budget: AcquisitionBudget | None = None,
    seed: int = 0,
    base: BaseSamples | None = None,
    mc_samples: int = 128,
) -> np.ndarray:
    """Multi-start ascent of the batch acquisition over [0,1]^(q x D).

    Starting points are the best Sobol-screened batches plus perturbations
    of the current Pareto-optimal inputs; ascent uses central-difference
    gradients with a backtracking step and only ever accepts improvements,
    so the returned batch scores at least as well as the best screened
    Sobol batch under the same base samples.
    """
    if q < 1:
        raise ArityError(f"batch size must be >= 1, got {q}")
    budget = budget or AcquisitionBudget()
    dim = models[0].train_X.shape[1]
    n_obj = len(models)
    if base is None:
        base = draw_base_samples(mc_samples, q, n_obj, seed)

    candidates = [sobol_candidate_batches(budget.sobol_batches, q, dim, seed)]
    front_obj = front if isinstance(front, ParetoFront) else None
    if budget.perturbation_batches > 0 and front_obj is not None and front_obj.size:
        train_x = models[0].train_X
        valid = front_obj.indices[front_obj.indices < len(train_x)]
        if len(valid):
            pool = train_x[valid]
            rng = np.random.default_rng([seed, 1])
            picks = rng.integers(0, len(pool), size=(budget.perturbation_batches, q))
            perturbed = pool[picks] + rng.normal(0.0, 0.05, size=(budget.perturbation_batches, q, dim))
            candidates.append(np.clip(perturbed, 0.0, 1.0))
    screened = np.concatenate(candidates, axis=0)
    scores = _qehvi_many(models, front, ref, screened, base)

    order = np.argsort(-scores, kind="stable")
    best_x = screened[order[0]].copy()
    best_score = float(scores[order[0]])

    for start_idx in order[: budget.restarts]:
        x, s = _ascend(
            models, front, ref, screened[start_idx].copy(), float(scores[start_idx]), base, budget
        )
        if s > best_score:
            best_x, best_score = x, s
    return np.clip(best_x, 0.0, 1.0)


def _ascend(models, front, ref, x0, score0, base, budget: AcquisitionBudget):
    """Projected gradient ascent with backtracking; accepts improvements only."""
    q, dim = x0.shape
    n = q * dim
    z = x0.ravel().copy()
    score = score0
    step = budget.init_step
    h = budget.grad_step
    for _ in range(budget.max_steps):
        probes = np.repeat(z[None], 2 * n, axis=0)
        for j in range(n):
            probes[2 * j, j] = min(z[j] + h, 1.0)
            probes[2 * j + 1, j] = max(z[j] - h, 0.0)
        vals = _qehvi_many(models, front, ref, probes.reshape(-1, q, dim), base)
        denom = probes[0::2, np.arange(n)] - probes[1::2, np.arange(n)]
        denom = np.where(denom == 0.0, 1.0, denom)
        grad = (vals[0::2] - vals[1::2]) / denom
        gnorm = float(np.linalg.norm(grad))
        if gnorm == 0.0:
            break
        direction = grad / gnorm
        trial_steps = step * np.array([1.0, 0.5, 0.25, 0.125])
        trials = np.clip(z[None] + trial_steps[:, None] * direction[None], 0.0, 1.0)
        trial_vals = _qehvi_many(models, front, ref, trials.reshape(-1, q, dim), base)
        best = int(np.argmax(trial_vals))
        if trial_vals[best] > score + 1e-15:
            z = trials[best]
            score = float(trial_vals[best])
            step = min(trial_steps[best] * 2.0, 0.5)
        else:
            step *= 0.25
            if step < 1e-3:
                break
    return z.reshape(q, dim), score


def nadir_reference(Y, offset_frac: float = 0.01) -> np.ndarray:
    """Reference just below the per-objective worst observed values."""
    arr = np.atleast_2d(np.asarray(Y, dtype=float))
    lows = arr.min(axis=0)
    spans = arr.max(axis=0) - lows
    offsets = np.where(spans > 0, offset_frac * spans, 1e-6)
    return lows - offsets
