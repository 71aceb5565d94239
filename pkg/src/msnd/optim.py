"""Limited-memory BFGS with a strong-Wolfe line search, plus a plain
gradient-descent fallback.

Both minimisers only ever accept steps that lower the objective, so the
sequence of accepted losses is non-increasing.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import line_search

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class LbfgsConfig:
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-10


@dataclass
class GradientDescentConfig:
    step: float = 1.0
    shrink: float = 0.5
    c1: float = 1e-4
    max_backtracks: int = 40


@dataclass
class OptimizerState:
    """Curvature pairs kept between calls so that a run can be resumed."""

    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    step: float | None = None

    def to_arrays(self) -> dict:
        dim = len(self.s[0]) if self.s else 0
        return {"s": np.reshape(self.s, (len(self.s), dim)), "y": np.reshape(self.y, (len(self.y), dim)),
                "step": np.array([np.nan if self.step is None else self.step])}

    @classmethod
    def from_arrays(cls, d) -> "OptimizerState":
        step = float(d["step"][0])
        return cls(list(d["s"]), list(d["y"]), None if np.isnan(step) else step)


def _two_loop(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append((rho, a))
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += s * (a - b)
    return -q


def _backtrack(fun, x, f, g, d, step, shrink=0.5, c1=1e-4, max_backtracks=40):
    slope = np.dot(g, d)
    for _ in range(max_backtracks):
        xn = x + step * d
        fn, gn = fun(xn)
        if np.isfinite(fn) and fn <= f + c1 * step * slope:
            return step, xn, fn, gn
        step *= shrink
    return None


def _check_finite(f, g):
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise DivergenceError(f"objective became non-finite (loss={f})")


def lbfgs(fun, x0, max_iter: int, config: LbfgsConfig | None = None,
          state: OptimizerState | None = None, callback=None):
    """Minimise ``fun`` (returning ``(value, gradient)``) from ``x0``.

    ``callback(iteration, x, value, gradient)`` is called once for the
    starting point (iteration 0) and after every accepted step.  Returns
    ``(x, value, state)``.
    """
    config = config or LbfgsConfig()
    state = state or OptimizerState()
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    _check_finite(f, g)
    if callback:
        callback(0, x, f, g)
    for it in range(1, max_iter + 1):
        gnorm = np.linalg.norm(g)
        if gnorm <= config.gtol:
            break
        d = _two_loop(g, state.s, state.y)
        if np.dot(d, g) >= 0:
            state.s.clear()
            state.y.clear()
            d = -g
        cache = {}

        def fval(xx):
            key = xx.tobytes()
            if key not in cache:
                cache[key] = fun(xx)
            return cache[key][0]

        def fgrad(xx):
            fval(xx)
            return cache[xx.tobytes()][1]

        # first step: unit-length move along -g; afterwards the scaled
        # two-loop direction makes alpha = 1 the natural trial
        old_old = f + gnorm / 2 if not state.s else None
        with warnings.catch_warnings():
            # a failed search is handled below by backtracking
            warnings.filterwarnings("ignore", message="The line search algorithm")
            alpha, *_ = line_search(fval, fgrad, x, d, gfk=g, old_fval=f, old_old_fval=old_old,
                                    c1=config.c1, c2=config.c2, maxiter=20)
        if alpha is not None:
            xn = x + alpha * d
            fn, gn = fun(xn) if xn.tobytes() not in cache else cache[xn.tobytes()]
            if not (np.isfinite(fn) and fn <= f):
                alpha = None
        if alpha is None:
            log.debug("strong-Wolfe search failed at iteration %d, backtracking", it)
            init = state.step if state.step else 1.0 / max(gnorm, 1e-300)
            res = _backtrack(fun, x, f, g, d, min(1.0, 4 * init) if state.s else init)
            if res is None:
                state.s.clear()
                state.y.clear()
                res = _backtrack(fun, x, f, g, -g, 1.0 / max(gnorm, 1e-300))
                if res is None:
                    log.info("no descent step found at iteration %d; stopping", it)
                    break
            alpha, xn, fn, gn = res
        _check_finite(fn, gn)
        s, y = xn - x, gn - g
        if np.dot(s, y) > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            state.s.append(s)
            state.y.append(y)
            if len(state.s) > config.history:
                state.s.pop(0)
                state.y.pop(0)
        state.step = float(alpha)
        x, f, g = xn, fn, gn
        if callback:
            callback(it, x, f, g)
    return x, f, state


def gradient_descent(fun, x0, max_iter: int, config: GradientDescentConfig | None = None,
                     state: OptimizerState | None = None, callback=None):
    """Steepest descent with Armijo backtracking; same contract as :func:`lbfgs`."""
    config = config or GradientDescentConfig()
    state = state or OptimizerState()
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    _check_finite(f, g)
    if callback:
        callback(0, x, f, g)
    step = state.step or config.step / max(np.linalg.norm(g), 1e-300)
    for it in range(1, max_iter + 1):
        res = _backtrack(fun, x, f, g, -g, 2.0 * step, config.shrink, config.c1, config.max_backtracks)
        if res is None:
            break
        step, x, f, g = res
        _check_finite(f, g)
        state.step = step
        if callback:
            callback(it, x, f, g)
    return x, f, state
