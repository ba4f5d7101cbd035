"""Equal-weight sigma points matching the raw moments of U(0, 1).

Points live in the unit box; each coordinate is solved independently and
the solved sets are mapped onto a uniform preference ``[mu, sigma]`` by an
affine map.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .pmomdp import Preference

SQRT3 = math.sqrt(3.0)


class SigmaPointWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray      # [n, d], coordinates in [0, 1]
    weights: np.ndarray     # [n], all 1/n
    moment_order: int
    residual: float
    converged: bool = True

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def uniform_moment(k: int, a: float = 0.0, b: float = 1.0) -> float:
    if a == b:
        raise ValueError("degenerate interval a == b")
    if k < 0:
        raise ValueError("moment order must be >= 0")
    return (b ** (k + 1) - a ** (k + 1)) / ((k + 1) * (b - a))


def default_order(d: int) -> int:
    return max(10, d)


def moment_residual(points, moment_order: int) -> float:
    """Max over coordinates and ``k = 1..moment_order`` of the raw-moment error."""
    X = np.asarray(points.points if isinstance(points, SigmaPointSet) else points, float)
    if X.ndim == 1:
        X = X[:, None]
    k = np.arange(1, moment_order + 1)
    emp = np.mean(X[:, :, None] ** k, axis=0)
    return float(np.max(np.abs(emp - 1.0 / (k + 1))))


def _moment_fns(n: int, order: int):
    k = np.arange(1, order + 1)
    target = 1.0 / (k + 1)

    def resid(z):
        x = 1.0 / (1.0 + np.exp(-z))
        return (x[:, None] ** k).mean(axis=0) - target

    def jac(z):
        x = 1.0 / (1.0 + np.exp(-z))
        return (k * x[:, None] ** (k - 1) * (x * (1 - x))[:, None]).T / n

    return resid, jac


def _mirror_descent(z: np.ndarray, resid, jac, lr: float, iters: int) -> np.ndarray:
    # entropic mirror map on [0, 1]: a gradient step on the logits
    for _ in range(iters):
        z = z - lr * jac(z).T @ resid(z)
    return z


def _solve_coordinate(n: int, order: int, rng: np.random.Generator, lr: float,
                      md_iter: int, restarts: int) -> tuple[np.ndarray, float]:
    resid, jac = _moment_fns(n, order)
    method = "lm" if order >= n else "trf"
    best_x, best_r = None, np.inf
    for _ in range(restarts):
        z = _mirror_descent(rng.normal(0.0, 1.5, n), resid, jac, lr, md_iter)
        fit = least_squares(resid, z, jac=jac, method=method, xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=20_000)
        r = float(np.max(np.abs(fit.fun)))
        if r < best_r:
            best_r, best_x = r, np.sort(1.0 / (1.0 + np.exp(-fit.x)))
    return best_x, best_r


def solve_sigma_points(d: int, moment_order: int | None = None, tolerance: float = 1e-6,
                       rng: np.random.Generator | int | None = 0, lr: float = 0.05,
                       md_iter: int = 2_000, restarts: int = 8) -> SigmaPointSet:
    """Solve for ``n = 2d + 1`` equal-weight points per coordinate.

    Each coordinate is warm-started by mirror descent on the squared moment
    residual and polished by Gauss-Newton in the same logit coordinates,
    keeping the best of ``restarts`` seeded starts.  Coordinates are then
    paired by a seeded permutation.  If the residual stays above
    ``tolerance`` the best iterate is returned with ``converged=False`` and
    a :class:`SigmaPointWarning`.
    """
    if d < 1:
        raise ValueError("dimension must be >= 1")
    order = default_order(d) if moment_order is None else int(moment_order)
    if order < 1:
        raise ValueError("moment_order must be >= 1")
    rng = np.random.default_rng(rng)
    n = 2 * d + 1
    cols = [_solve_coordinate(n, order, rng, lr, md_iter, restarts)[0] for _ in range(d)]
    pts = _pair(np.column_stack(cols), rng)
    resid = moment_residual(pts, order)
    converged = resid <= tolerance
    if not converged:
        warnings.warn(f"sigma-point solve for d={d}, order={order} stopped at residual "
                      f"{resid:.3e} > {tolerance:.1e}", SigmaPointWarning, stacklevel=2)
    w = np.full(n, 1.0 / n)
    w.setflags(write=False)
    return SigmaPointSet(_frozen(pts), w, order, resid, converged)


def _pair(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = points.copy()
    for j in range(1, out.shape[1]):
        out[:, j] = out[rng.permutation(len(out)), j]
    return out


def solve_train_eval_pair(d: int, moment_order: int | None = None, tolerance: float = 1e-6,
                          seed: int = 0, **kw) -> tuple[SigmaPointSet, SigmaPointSet]:
    """Two solved sets for training and held-out scoring.

    For ``d >= 2`` the evaluation pairing of coordinates is re-drawn until
    no evaluation point coincides with a training point; marginal moments do
    not depend on the pairing.  In one dimension, where both solves usually
    land on the same optimum, the held-out set is the mirror image ``1 - S``
    of the training set, which has the same centered moments.
    """
    train = solve_sigma_points(d, moment_order, tolerance, np.random.default_rng([seed, 0]), **kw)
    evals = solve_sigma_points(d, moment_order, tolerance, np.random.default_rng([seed, 1]), **kw)
    if d == 1:
        if np.allclose(np.sort(evals.points, axis=0), np.sort(train.points, axis=0), atol=1e-3):
            mirrored = np.sort(1.0 - np.asarray(train.points), axis=0)
            evals = SigmaPointSet(_frozen(mirrored), train.weights, train.moment_order,
                                  moment_residual(mirrored, train.moment_order), train.converged)
        return train, evals
    rng = np.random.default_rng([seed, 2])
    base = np.array(evals.points)
    ep = base
    for _ in range(1000):
        gap = np.abs(ep[:, None, :] - np.asarray(train.points)[None]).max(axis=-1).min()
        if gap > 1e-3:
            break
        ep = _pair(base, rng)
    evals = SigmaPointSet(_frozen(ep), evals.weights, evals.moment_order, evals.residual,
                          evals.converged)
    return train, evals


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, float)
    a.setflags(write=False)
    return a


def map_sigma_points(sp: SigmaPointSet, pref: Preference) -> np.ndarray:
    """Points of ``U(0,1)^d`` mapped onto the uniform box ``pref``.

    The map is ``mu + 2 sqrt(3) sigma (S - 1/2)``, sending ``[0, 1]`` onto
    ``[mu - sqrt(3) sigma, mu + sqrt(3) sigma]``.
    """
    if pref.kind != "uniform-box":
        raise ValueError("sigma points map onto uniform-box preferences only")
    if pref.mu.shape[0] != sp.dim:
        raise ValueError(f"preference dimension {pref.mu.shape[0]} != point dimension {sp.dim}")
    return pref.mu + 2.0 * SQRT3 * pref.sigma * (np.asarray(sp.points) - 0.5)


def write_sigma_csv(sp: SigmaPointSet, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([f"x{j}" for j in range(sp.dim)] + ["weight"])
        for p, w in zip(sp.points, sp.weights):
            out.writerow([f"{x:.8f}" for x in p] + [f"{w:.8f}"])


# Reference training/evaluation points for d = 2 (U(0,1) coordinates).
REFERENCE_2D_TRAIN = np.array([
    [0.68726563, 0.3149943],
    [0.31273094, 0.68499416],
    [0.0837525, 0.08276018],
    [0.91625065, 0.9172508],
    [0.5, 0.5],
])
REFERENCE_2D_EVAL = np.array([
    [0.31483606, 0.08374587],
    [0.49997485, 0.49999967],
    [0.08281405, 0.6872253],
    [0.9171803, 0.31277505],
    [0.68519473, 0.91625404],
])
