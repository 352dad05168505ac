"""Box-constrained limited-memory quasi-Newton minimization.

The minimizer keeps a short history of curvature pairs, identifies the
active bounds from the projected gradient, and runs the two-loop
recursion on the free variables. Steps are chosen by a strong-Wolfe line
search on the unconstrained ray, capped at the first bound crossing;
when that fails, a projected backtracking (Armijo) search takes over.
Every accepted iterate satisfies the bounds exactly.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SolverConfig:
    memory: int = 10
    grad_tol: float = 1e-6
    max_iter: int = 500
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_linesearch_steps: int = 25

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.memory < 1:
            raise ValueError("memory must be at least 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")


@dataclass
class MinimizeResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool


def _projected_gradient(x, g, lower, upper):
    pg = g.copy()
    pg[(x <= lower) & (g > 0)] = 0.0
    pg[(x >= upper) & (g < 0)] = 0.0
    return pg


def _two_loop(g, pairs, free):
    """L-BFGS two-loop recursion restricted to the free variables."""
    q = np.where(free, g, 0.0)
    if not pairs:
        return -q
    alphas = []
    for s, y, rho in reversed(pairs):
        s_f = np.where(free, s, 0.0)
        y_f = np.where(free, y, 0.0)
        a = rho * (s_f @ q)
        q = q - a * y_f
        alphas.append((a, s_f, y_f, rho))
    s_last, y_last, _ = pairs[-1]
    ys = y_last @ s_last
    yy = y_last @ y_last
    gamma = ys / yy if yy > 0 else 1.0
    r = gamma * q
    for a, s_f, y_f, rho in reversed(alphas):
        b = rho * (y_f @ r)
        r = r + (a - b) * s_f
    return np.where(free, -r, 0.0)


def _cubic_min(a, fa, dfa, b, fb, c, fc):
    """Minimizer of the cubic through (a,fa),(b,fb),(c,fc) with slope dfa at a."""
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            db, dc = b - a, c - a
            denom = (db * dc) ** 2 * (db - dc)
            t1 = fb - fa - dfa * db
            t2 = fc - fa - dfa * dc
            A = (dc**2 * t1 - db**2 * t2) / denom
            B = (-(dc**3) * t1 + db**3 * t2) / denom
            radical = B * B - 3 * A * dfa
            xmin = a + (-B + np.sqrt(radical)) / (3 * A)
        except (ArithmeticError, FloatingPointError):
            return None
    return xmin if np.isfinite(xmin) else None


def _quad_min(a, fa, dfa, b, fb):
    with np.errstate(divide="raise", over="raise", invalid="raise"):
        try:
            db = b - a
            B = (fb - fa - dfa * db) / (db * db)
            xmin = a - dfa / (2.0 * B)
        except (ArithmeticError, FloatingPointError):
            return None
    return xmin if np.isfinite(xmin) else None


def _zoom(phi, dphi, lo, f_lo, d_lo, hi, f_hi, f0, d0, c1, c2, max_steps):
    """Refine a bracketing interval until the strong Wolfe conditions hold."""
    f_rec, a_rec = f0, 0.0
    for _ in range(max_steps):
        lo_hi = sorted((lo, hi))
        width = lo_hi[1] - lo_hi[0]
        candidate = _cubic_min(lo, f_lo, d_lo, hi, f_hi, a_rec, f_rec)
        margin = 0.2 * width
        if (candidate is None or candidate < lo_hi[0] + margin
                or candidate > lo_hi[1] - margin):
            candidate = _quad_min(lo, f_lo, d_lo, hi, f_hi)
            margin = 0.1 * width
            if (candidate is None or candidate < lo_hi[0] + margin
                    or candidate > lo_hi[1] - margin):
                candidate = 0.5 * (lo + hi)
        f_c = phi(candidate)
        if f_c > f0 + c1 * candidate * d0 or f_c >= f_lo:
            f_rec, a_rec = f_hi, hi
            hi, f_hi = candidate, f_c
        else:
            d_c = dphi(candidate)
            if abs(d_c) <= -c2 * d0:
                return candidate, f_c
            if d_c * (hi - lo) >= 0:
                f_rec, a_rec = f_hi, hi
                hi, f_hi = lo, f_lo
            else:
                f_rec, a_rec = f_lo, lo
            lo, f_lo, d_lo = candidate, f_c, d_c
        if width < 1e-16:
            break
    return None, None


def strong_wolfe_search(phi, dphi, f0, d0, c1=1e-4, c2=0.9, alpha0=1.0,
                        alpha_max=None, max_steps=25):
    """Scalar search for a step satisfying the strong Wolfe conditions.

    Returns (alpha, f_alpha) or (None, None) when no admissible step was
    found. `phi` and `dphi` evaluate the objective and its directional
    derivative along the ray; `d0` must be negative.
    """
    if d0 >= 0:
        return None, None
    alpha_prev, f_prev, d_prev = 0.0, f0, d0
    alpha = alpha0 if alpha_max is None else min(alpha0, alpha_max)
    for i in range(max_steps):
        f_a = phi(alpha)
        if f_a > f0 + c1 * alpha * d0 or (f_a >= f_prev and i > 0):
            return _zoom(phi, dphi, alpha_prev, f_prev, d_prev, alpha, f_a,
                         f0, d0, c1, c2, max_steps)
        d_a = dphi(alpha)
        if abs(d_a) <= -c2 * d0:
            return alpha, f_a
        if d_a >= 0:
            return _zoom(phi, dphi, alpha, f_a, d_a, alpha_prev, f_prev,
                         f0, d0, c1, c2, max_steps)
        if alpha_max is not None and alpha >= alpha_max:
            # the cap is a bound crossing; accept it on sufficient decrease
            return alpha, f_a
        alpha_prev, f_prev, d_prev = alpha, f_a, d_a
        alpha = 2.0 * alpha if alpha_max is None else min(2.0 * alpha, alpha_max)
    return None, None


def lbfgs_box_minimize(objective_with_gradient, x0, lower=None, upper=None,
                       config: SolverConfig | None = None,
                       callback=None) -> MinimizeResult:
    """Minimize f subject to elementwise bounds lower <= x <= upper.

    `objective_with_gradient(x)` returns (value, gradient). Bounds may be
    None or contain +-inf. Convergence is declared when the projected
    gradient infinity norm drops below `config.grad_tol`.
    """
    config = config or SolverConfig()
    x = np.asarray(x0, dtype=float).copy()
    dim = x.size
    lower = np.full(dim, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(dim, np.inf) if upper is None else np.asarray(upper, dtype=float)
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    x = np.clip(x, lower, upper)

    f, g = objective_with_gradient(x)
    best_x, best_f = x.copy(), f
    pairs: deque = deque(maxlen=config.memory)
    converged = False
    iteration = 0

    for iteration in range(1, config.max_iter + 1):
        pg = _projected_gradient(x, g, lower, upper)
        if np.abs(pg).max() <= config.grad_tol:
            converged = True
            iteration -= 1
            break

        free = ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))
        direction = _two_loop(g, list(pairs), free)
        if direction @ g >= 0:
            direction = -pg

        step = _line_search(objective_with_gradient, x, f, g, direction,
                            lower, upper, config)
        if step is None and not np.array_equal(direction, -pg):
            direction = -pg
            step = _line_search(objective_with_gradient, x, f, g, direction,
                                lower, upper, config)
        if step is None:
            break

        x_new, f_new, g_new = step
        s = x_new - x
        y = g_new - g
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_x, best_f = x.copy(), f
        if callback is not None:
            callback(x, f)

    if not converged:
        pg = _projected_gradient(x, g, lower, upper)
        converged = bool(np.abs(pg).max() <= config.grad_tol)
    if f > best_f:
        x, f = best_x, best_f
    return MinimizeResult(x, f, iteration, converged)


def _line_search(objective_with_gradient, x, f, g, direction, lower, upper,
                 config):
    """Wolfe search on the ray, then projected backtracking as fallback."""
    d0 = g @ direction
    if d0 >= 0:
        return None

    moving = direction != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        to_upper = np.where(moving & (direction > 0),
                            (upper - x) / direction, np.inf)
        to_lower = np.where(moving & (direction < 0),
                            (lower - x) / direction, np.inf)
    alpha_cap = float(min(np.min(to_upper), np.min(to_lower)))
    alpha_max = None if np.isinf(alpha_cap) else alpha_cap

    cache = {}

    def evaluate(alpha):
        if alpha not in cache:
            point = np.clip(x + alpha * direction, lower, upper)
            cache[alpha] = (point,) + tuple(objective_with_gradient(point))
        return cache[alpha]

    def phi(alpha):
        return evaluate(alpha)[1]

    def dphi(alpha):
        return evaluate(alpha)[2] @ direction

    if alpha_max is None or alpha_max > 1e-14:
        alpha, f_a = strong_wolfe_search(
            phi, dphi, f, d0, config.wolfe_c1, config.wolfe_c2,
            alpha0=1.0, alpha_max=alpha_max,
            max_steps=config.max_linesearch_steps,
        )
        if alpha is not None and f_a <= f + config.wolfe_c1 * alpha * d0:
            point, f_a, g_a = evaluate(alpha)
            return point, f_a, g_a

    # projected backtracking along the projection arc
    alpha = 1.0
    for _ in range(config.max_linesearch_steps * 2):
        point = np.clip(x + alpha * direction, lower, upper)
        delta = point - x
        slope = g @ delta
        if slope < 0:
            f_a, g_a = objective_with_gradient(point)
            if f_a <= f + config.wolfe_c1 * slope:
                return point, f_a, g_a
        alpha *= 0.5
        if alpha < 1e-20:
            break
    return None


def qr_reduce(X: np.ndarray, Z: np.ndarray | None, y: np.ndarray):
    """Orthogonal reduction of a tall least-squares system.

    Computes the thin QR factorization of [X Z] and returns the rotated
    system plus the constant 0.5*||residual orthogonal part||^2, so that
    any quadratic objective evaluated on the reduced system equals the
    original objective minus that constant. On rank deficiency the system
    is returned unchanged with a warning.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if Z is None or Z.size == 0:
        Z = np.empty((X.shape[0], 0))
    stacked = np.hstack([X, Z])
    n, p = stacked.shape
    if n <= p:
        raise ValueError("system must have more rows than columns to reduce")
    q, r = np.linalg.qr(stacked)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        warnings.warn("rank-deficient system, skipping orthogonal reduction",
                      RuntimeWarning)
        return X, Z, y, 0.0
    y_rot = q.T @ y
    offset = 0.5 * max(float(y @ y - y_rot @ y_rot), 0.0)
    d = X.shape[1]
    return r[:, :d], r[:, d:], y_rot, offset


def check_gradient(objective_with_gradient, x, step=1e-6) -> float:
    """Worst normalized disagreement between analytic and central-difference
    gradients, coordinate by coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    _, g = objective_with_gradient(x)
    g = np.asarray(g, dtype=float)
    fd = np.empty_like(g)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        f_plus, _ = objective_with_gradient(x + e)
        f_minus, _ = objective_with_gradient(x - e)
        fd[i] = (f_plus - f_minus) / (2.0 * step)
    scale = max(np.abs(g).max(), np.abs(fd).max(), 1e-8)
    return float(np.abs(fd - g).max() / scale)
