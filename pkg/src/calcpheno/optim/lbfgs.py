"""Limited-memory BFGS with a backtracking Armijo line search."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    """Non-finite objective or gradient during minimisation."""


@dataclass
class LbfgsConfig:
    history_m: int = 10
    max_iters: int = 500
    grad_tol: float = 1e-6
    c1: float = 1e-4
    backtrack: float = 0.5
    max_trials: int = 30

    def __post_init__(self):
        if self.history_m < 1:
            raise ValueError("history_m must be >= 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not 0 < self.backtrack < 1 or not 0 < self.c1 < 1:
            raise ValueError("line-search parameters out of range")


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    trace: list = field(default_factory=list)
    n_iter: int = 0
    n_evals: int = 0
    stalled: bool = False
    stopped_early: bool = False
    message: str = ""

    @property
    def converged(self):
        return self.message == "gradient tolerance reached"


def _two_loop(g, pairs):
    """H_k @ g from the stored (s, y, rho) pairs, oldest first."""
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * s.dot(q)
        q -= a * y
        alphas.append(a)
    s, y, _ = pairs[-1]
    q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return q


def _checked(f, g):
    # +inf is a legitimate failed trial for the line search; NaN never is
    if np.isnan(f):
        raise TrainingError("objective returned NaN")
    if np.isfinite(f) and not np.all(np.isfinite(g)):
        raise TrainingError("objective returned a non-finite gradient")
    return float(f), np.asarray(g, dtype=np.float64).ravel()


def lbfgs_minimize(objective, x0, cfg=None, callback=None):
    """Minimise ``objective`` starting from ``x0``.

    Parameters
    ----------
    objective : callable
        ``objective(x) -> (value, gradient)``; must be deterministic.
    x0 : array_like
        Starting point (flattened internally).
    cfg : LbfgsConfig, optional
    callback : callable, optional
        ``callback(iteration, x, value)`` after every accepted step. A truthy
        return stops the run (used for validation-based early stopping).

    Returns
    -------
    LbfgsResult
        Best iterate, its value and gradient, and the value trace starting at
        ``f(x0)``. The trace is non-increasing.
    """
    cfg = cfg or LbfgsConfig()
    x = np.array(x0, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    f, g = _checked(*objective(x))
    if not np.isfinite(f):
        raise TrainingError("objective is infinite at the starting point")
    res = LbfgsResult(x=x, fun=f, grad=g, trace=[f], n_evals=1)
    pairs = deque(maxlen=cfg.history_m)

    it = 0
    while True:
        if np.max(np.abs(g), initial=0.0) <= cfg.grad_tol:
            res.message = "gradient tolerance reached"
            break
        if it >= cfg.max_iters:
            res.message = "iteration limit"
            break
        if pairs:
            d = -_two_loop(g, pairs)
            step = 1.0
        else:
            d = -g
            step = min(1.0, 1.0 / np.sum(np.abs(g)))
        slope = g.dot(d)
        if slope >= 0:
            # curvature pairs produced an ascent direction; restart from steepest descent
            pairs.clear()
            d = -g
            slope = g.dot(d)
            step = min(1.0, 1.0 / np.sum(np.abs(g)))

        accepted = False
        for _ in range(cfg.max_trials):
            x_new = x + step * d
            f_new, g_new = _checked(*objective(x_new))
            res.n_evals += 1
            if np.isfinite(f_new) and f_new <= f + cfg.c1 * step * slope:
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            res.stalled = True
            res.message = "line search failed"
            break

        s = x_new - x
        y = g_new - g
        sy = s.dot(y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        it += 1
        res.x, res.fun, res.grad, res.n_iter = x, f, g, it
        res.trace.append(f)
        if callback is not None and callback(it, x, f):
            res.stopped_early = True
            res.message = "stopped by callback"
            break
    return res
