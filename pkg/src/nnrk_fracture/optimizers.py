"""First- and quasi-second-order optimizers over flat float64 vectors.

Objectives are callables ``fun(x) -> (loss, grad)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import OptimizerAbort

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    success: bool = True
    message: str = ""
    history: list[float] = field(default_factory=list)


def _check_finite(f: float, g: np.ndarray, where: str) -> None:
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizerAbort(f"{where}: non-finite loss or gradient (loss={f!r})")


class Adam:
    """Adaptive moment estimation on a flat parameter vector."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        denom = np.sqrt(self.v / bc2) + self.epsilon
        x -= (self.lr / bc1) * self.m / denom


def adam(fun: Objective, x0: np.ndarray, epochs: int = 200, lr: float = 1e-3, beta1: float = 0.9,
         beta2: float = 0.999, epsilon: float = 1e-8, tol_grad: float = 0.0) -> OptimizeResult:
    """Run Adam for ``epochs`` steps and return the best point seen."""
    opt = Adam(lr, beta1, beta2, epsilon)
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    _check_finite(f, g, "adam")
    best = (f, x.copy(), g.copy())
    history = [f]
    it = 0
    for it in range(1, epochs + 1):
        if np.max(np.abs(g), initial=0.0) <= tol_grad:
            it -= 1
            break
        opt.step(x, g)
        f, g = fun(x)
        _check_finite(f, g, "adam")
        history.append(f)
        if f < best[0]:
            best = (f, x.copy(), g.copy())
        logger.debug("adam epoch %d loss %.12e", it, f)
    return OptimizeResult(best[1], best[0], best[2], it, len(history), True, "epoch budget reached", history)


def _cubic_interpolate(x1, f1, g1, x2, f2, g2, bounds=None) -> float:
    """Minimizer of the cubic through two points with slopes, clipped to ``bounds``."""
    if bounds is not None:
        xmin_bound, xmax_bound = bounds
    else:
        xmin_bound, xmax_bound = (x1, x2) if x1 <= x2 else (x2, x1)
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    d2_square = d1**2 - g1 * g2
    if d2_square >= 0:
        d2 = np.sqrt(d2_square)
        if x1 <= x2:
            min_pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2))
        else:
            min_pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2))
        return float(min(max(min_pos, xmin_bound), xmax_bound))
    return (xmin_bound + xmax_bound) / 2.0


def strong_wolfe(fun: Objective, x: np.ndarray, t: float, d: np.ndarray, f: float, g: np.ndarray, gtd: float,
                 c1: float = 1e-4, c2: float = 0.9, tolerance_change: float = 1e-12, max_ls: int = 25):
    """Bracketing line search with cubic zoom.

    Returns (f_new, g_new, t, evaluations); t is the accepted step.
    """
    d_norm = np.max(np.abs(d))
    f_new, g_new = fun(x + t * d)
    evals = 1
    gtd_new = float(g_new @ d)

    t_prev, f_prev, g_prev, gtd_prev = 0.0, f, g, gtd
    done = False
    ls_iter = 0
    while ls_iter < max_ls:
        if not np.isfinite(f_new) or f_new > f + c1 * t * gtd or (ls_iter > 1 and f_new >= f_prev):
            bracket, bracket_f = [t_prev, t], [f_prev, f_new]
            bracket_g, bracket_gtd = [g_prev, g_new.copy()], [gtd_prev, gtd_new]
            break
        if abs(gtd_new) <= -c2 * gtd:
            bracket, bracket_f, bracket_g = [t], [f_new], [g_new]
            done = True
            break
        if gtd_new >= 0:
            bracket, bracket_f = [t_prev, t], [f_prev, f_new]
            bracket_g, bracket_gtd = [g_prev, g_new.copy()], [gtd_prev, gtd_new]
            break
        min_step = t + 0.01 * (t - t_prev)
        max_step = t * 10
        tmp = t
        t = _cubic_interpolate(t_prev, f_prev, gtd_prev, t, f_new, gtd_new, bounds=(min_step, max_step))
        t_prev, f_prev, g_prev, gtd_prev = tmp, f_new, g_new.copy(), gtd_new
        f_new, g_new = fun(x + t * d)
        evals += 1
        gtd_new = float(g_new @ d)
        ls_iter += 1

    if ls_iter == max_ls:
        bracket, bracket_f = [0.0, t], [f, f_new]
        bracket_g, bracket_gtd = [g, g_new], [gtd, gtd_new]

    if not np.isfinite(bracket_f[-1]):
        # overshoot into a non-finite region: bisect towards the start
        bracket_f[-1] = np.inf
        bracket_gtd[-1] = np.inf

    insuf_progress = False
    low_pos, high_pos = (0, 1) if bracket_f[0] <= bracket_f[-1] else (1, 0)
    while not done and ls_iter < max_ls:
        if abs(bracket[1] - bracket[0]) * d_norm < tolerance_change:
            break
        if np.all(np.isfinite(bracket_f)) and np.all(np.isfinite(bracket_gtd)):
            t = _cubic_interpolate(bracket[0], bracket_f[0], bracket_gtd[0], bracket[1], bracket_f[1], bracket_gtd[1])
        else:
            t = 0.5 * (bracket[0] + bracket[1])
        eps = 0.1 * (max(bracket) - min(bracket))
        if min(max(bracket) - t, t - min(bracket)) < eps:
            if insuf_progress or t >= max(bracket) or t <= min(bracket):
                t = max(bracket) - eps if abs(t - max(bracket)) < abs(t - min(bracket)) else min(bracket) + eps
                insuf_progress = False
            else:
                insuf_progress = True
        else:
            insuf_progress = False
        f_new, g_new = fun(x + t * d)
        evals += 1
        gtd_new = float(g_new @ d)
        ls_iter += 1

        if not np.isfinite(f_new) or f_new > f + c1 * t * gtd or f_new >= bracket_f[low_pos]:
            bracket[high_pos] = t
            bracket_f[high_pos] = f_new if np.isfinite(f_new) else np.inf
            bracket_g[high_pos] = g_new.copy()
            bracket_gtd[high_pos] = gtd_new if np.isfinite(f_new) else np.inf
            low_pos, high_pos = (0, 1) if bracket_f[0] <= bracket_f[1] else (1, 0)
        else:
            if abs(gtd_new) <= -c2 * gtd:
                done = True
            elif gtd_new * (bracket[high_pos] - bracket[low_pos]) >= 0:
                bracket[high_pos] = bracket[low_pos]
                bracket_f[high_pos] = bracket_f[low_pos]
                bracket_g[high_pos] = bracket_g[low_pos]
                bracket_gtd[high_pos] = bracket_gtd[low_pos]
            bracket[low_pos] = t
            bracket_f[low_pos] = f_new
            bracket_g[low_pos] = g_new.copy()
            bracket_gtd[low_pos] = gtd_new

    return bracket_f[low_pos], bracket_g[low_pos], bracket[low_pos], evals


def _two_loop(g: np.ndarray, s_hist: list, y_hist: list, rho_hist: list) -> np.ndarray:
    q = -g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
    for s, y, rho, a in zip(s_hist, y_hist, rho_hist, reversed(alphas)):
        b = rho * (y @ q)
        q += s * (a - b)
    return q


def lbfgs(fun: Objective, x0: np.ndarray, max_iter: int = 500, memory: int = 10, tol_grad: float | None = None,
          c1: float = 1e-4, c2: float = 0.9, max_ls: int = 25) -> OptimizeResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    On a line-search failure one steepest-descent step is attempted with a
    cleared memory; a second consecutive failure stops with ``success=False``.
    A failure whose predicted decrease is below the rounding of the loss
    counts as converged.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    _check_finite(f, g, "lbfgs")
    evals = 1
    if tol_grad is None:
        tol_grad = 1e-8 * max(1.0, abs(f))
    history = [f]
    if np.max(np.abs(g), initial=0.0) <= tol_grad:
        return OptimizeResult(x, f, g, 0, evals, True, "gradient below tolerance", history)

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    fallback = False
    message = "iteration budget reached"
    success = True
    it = 0
    while it < max_iter:
        d = _two_loop(g, s_hist, y_hist, rho_hist)
        gtd = float(g @ d)
        if gtd > -1e-300:
            s_hist, y_hist, rho_hist = [], [], []
            d = -g
            gtd = float(g @ d)
        t = 1.0 if s_hist else min(1.0, 1.0 / np.abs(g).sum())
        f_new, g_new, t, n = strong_wolfe(fun, x, t, d, f, g, gtd, c1, c2, max_ls=max_ls)
        evals += n
        if t == 0.0 or not np.isfinite(f_new) or f_new > f:
            if -gtd <= 4.0 * np.finfo(float).eps * max(1.0, abs(f)):
                message = "loss converged to working precision"
                break
            if fallback:
                success, message = False, "line search failed twice"
                logger.warning("L-BFGS line search failed after steepest-descent fallback; stopping")
                break
            logger.warning("L-BFGS line search failed at iteration %d; trying steepest descent", it)
            fallback = True
            s_hist, y_hist, rho_hist = [], [], []
            continue
        fallback = False
        it += 1
        s = t * d
        y = g_new - g
        ys = float(y @ s)
        if ys > 1e-10 * max(float(s @ s), 1e-300):
            if len(s_hist) == memory:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / ys)
        x = x + s
        f_old, f, g = f, f_new, g_new
        _check_finite(f, g, "lbfgs")
        history.append(f)
        logger.debug("lbfgs iteration %d loss %.12e |g| %.3e", it, f, np.max(np.abs(g)))
        if np.max(np.abs(g)) <= tol_grad:
            message = "gradient below tolerance"
            break
        if np.max(np.abs(s)) <= 1e-14 * max(1.0, np.max(np.abs(x))) and abs(f - f_old) <= 1e-15 * max(1.0, abs(f)):
            message = "no further progress"
            break
    # leave the objective evaluated at the returned point
    f, g = fun(x)
    evals += 1
    return OptimizeResult(x, f, g, it, evals, success, message, history)
