"""Limited-memory BFGS with a strong-Wolfe line search.

The two-loop recursion and the stopping logic live here; the line search
itself is scipy's implementation of the Wright & Nocedal zoom procedure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    stop_reason: str
    trace: list = field(default_factory=list)

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


@dataclass
class FitReport:
    """What happened during one optimisation run."""

    objective_trace: list = field(default_factory=list)
    validation_trace: list = field(default_factory=list)
    stop_reason: str = "max_iters"
    wall_time: float = 0.0
    grad_norm: float = float("nan")
    n_iter: int = 0
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "objective_trace": [float(v) for v in self.objective_trace],
            "validation_trace": [float(v) for v in self.validation_trace],
            "stop_reason": self.stop_reason,
            "wall_time": float(self.wall_time),
            "grad_norm": float(self.grad_norm),
            "n_iter": int(self.n_iter),
            "seed": self.seed,
            "extra": self.extra,
        }


class _Cached:
    """Evaluate f and grad together once per point; scipy asks for them separately."""

    def __init__(self, fun_and_grad):
        self.fun_and_grad = fun_and_grad
        self.x = None
        self.f = None
        self.g = None
        self.n_eval = 0

    def _eval(self, x):
        if self.x is None or not np.array_equal(x, self.x):
            f, g = self.fun_and_grad(x)
            self.n_eval += 1
            if not math.isfinite(f):
                f = math.inf
            self.x = np.array(x, copy=True)
            self.f, self.g = float(f), np.asarray(g, dtype=float)

    def f_(self, x):
        self._eval(x)
        return self.f

    def g_(self, x):
        self._eval(x)
        return self.g


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    rhos = [1.0 / float(y @ s) for s, y in zip(s_hist, y_hist)]
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def _backtrack(cache, x, d, f, g, shrink=0.5, max_halvings=100):
    slope = float(g @ d)
    alpha = min(1.0, 1.0 / max(float(np.linalg.norm(d)), 1e-300))
    for _ in range(max_halvings):
        f_new = cache.f_(x + alpha * d)
        if f_new <= f + 1e-4 * alpha * slope:
            return alpha, f_new
        alpha *= shrink
    return None, None


def lbfgs(
    fun_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    *,
    max_iters: int = 500,
    memory: int = 10,
    grad_tol: float = 1e-6,
    rel_obj_tol: float = 1e-10,
    callback: Callable[[int, np.ndarray, float], bool] | None = None,
) -> OptimResult:
    """Minimise ``fun_and_grad`` starting from ``x0``.

    ``grad_tol`` bounds the max-norm of the gradient; ``rel_obj_tol`` bounds
    the relative decrease of the objective between accepted steps. If
    ``callback(iteration, x, f)`` returns True the run stops with reason
    ``"early_stopped"``. A failed line search is retried once along steepest
    descent with the curvature memory cleared (falling back to Armijo
    backtracking there) before giving up with reason ``"line_search_failed"``.
    """
    cache = _Cached(fun_and_grad)
    x = np.array(x0, dtype=float, copy=True)
    f = cache.f_(x)
    g = cache.g_(x).copy()
    if not math.isfinite(f):
        raise FloatingPointError("objective is not finite at the starting point")
    trace = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    old_f = f + np.linalg.norm(g) / 2.0
    reason = "max_iters"
    it = 0

    if np.max(np.abs(g), initial=0.0) <= grad_tol:
        return OptimResult(x, f, g, 0, cache.n_eval, "converged", trace)

    while it < max_iters:
        d = _two_loop(g, s_hist, y_hist)
        if float(d @ g) >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        alpha = None
        for attempt in range(2):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", LineSearchWarning)
                warnings.simplefilter("ignore", RuntimeWarning)
                alpha, _, _, f_new, _, _ = line_search(
                    cache.f_, cache.g_, x, d, gfk=g, old_fval=f, old_old_fval=old_f,
                    c1=1e-4, c2=0.9, maxiter=40,
                )
            if alpha is not None and f_new is not None and math.isfinite(f_new):
                break
            alpha = None
            if attempt == 1:
                alpha, f_new = _backtrack(cache, x, d, f, g)
            else:
                # restart along steepest descent with a fresh memory
                s_hist.clear()
                y_hist.clear()
                d = -g
                old_f = f + np.linalg.norm(g) / 2.0
        if alpha is None:
            reason = "line_search_failed"
            break

        x_new = x + alpha * d
        f_new = cache.f_(x_new)
        g_new = cache.g_(x_new).copy()
        s, y = x_new - x, g_new - g
        if float(s @ y) > 1e-12 * float(y @ y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        old_f, f = f, f_new
        x, g = x_new, g_new
        trace.append(f)
        it += 1

        if callback is not None and callback(it, x, f):
            reason = "early_stopped"
            break
        if np.max(np.abs(g)) <= grad_tol:
            reason = "converged"
            break
        if abs(old_f - f) <= rel_obj_tol * max(abs(f), 1.0):
            reason = "converged"
            break

    return OptimResult(x, f, g, it, cache.n_eval, reason, trace)
