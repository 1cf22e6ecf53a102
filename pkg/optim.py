"""Optimizers and numerical derivative oracles.

Optimizers minimize; likelihood callers pass the negated log-likelihood.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import HessianError, LineSearchError, NumericalError
from models import LbfgsSettings

logger = logging.getLogger("workloc.optim")

ObjectiveAndGradient = Callable[[np.ndarray], Tuple[float, np.ndarray]]
MAX_EXTRAPOLATION = 1e6


class LbfgsResult(NamedTuple):
    x: np.ndarray
    fun: float
    converged: bool
    iterations: int


def _two_loop(grad: np.ndarray, s_hist: deque, y_hist: deque) -> np.ndarray:
    """Apply the limited-memory inverse Hessian to -grad."""
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    s_last, y_last = s_hist[-1], y_hist[-1]
    q *= (s_last @ y_last) / (y_last @ y_last)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _steepest(grad: np.ndarray) -> np.ndarray:
    return -grad / max(1.0, float(np.linalg.norm(grad)))


def _secant_step(
    objective_and_gradient: ObjectiveAndGradient,
    x: np.ndarray,
    d: np.ndarray,
    f: float,
    slope: float,
    accepted: Tuple[float, np.ndarray, float, np.ndarray],
    c1: float,
) -> Tuple[float, np.ndarray, float, np.ndarray]:
    """Move an Armijo point to the zero of the secant on the directional derivative.

    Exact along d for a quadratic. The refined point is kept only if it is
    finite, satisfies Armijo and lowers f.
    """
    step, x_new, f_new, g_new = accepted
    slope_new = float(np.asarray(g_new, dtype=np.float64) @ d)
    if not (math.isfinite(slope_new) and slope_new > slope):
        return accepted
    t = step * slope / (slope - slope_new)
    if not (math.isfinite(t) and 0 < t <= MAX_EXTRAPOLATION * step) or abs(t - step) <= 1e-12 * step:
        return accepted
    x_t = x + t * d
    f_t, g_t = objective_and_gradient(x_t)
    if math.isfinite(f_t) and np.all(np.isfinite(g_t)) and f_t < f_new and f_t <= f + c1 * t * slope:
        return t, x_t, f_t, g_t
    return accepted



def lbfgs_minimize(
    objective_and_gradient: ObjectiveAndGradient,
    x0,
    settings: Optional[LbfgsSettings] = None,
) -> LbfgsResult:
    """Two-loop L-BFGS with Armijo backtracking; converged iff max|grad| < tol.

    Each accepted step gets one secant refinement along the search direction,
    so the line search is exact on quadratics.
    """
    settings = settings or LbfgsSettings()
    x = np.array(x0, dtype=np.float64)
    f, g = objective_and_gradient(x)
    g = np.asarray(g, dtype=np.float64)
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise NumericalError(f"objective is not finite at the starting point (f={f})")

    s_hist: deque = deque(maxlen=settings.memory)
    y_hist: deque = deque(maxlen=settings.memory)

    for iteration in range(settings.max_iter):
        grad_max = float(np.max(np.abs(g)))
        if grad_max < settings.tol:
            return LbfgsResult(x, f, True, iteration)

        d = _two_loop(g, s_hist, y_hist) if s_hist else _steepest(g)
        slope = float(g @ d)
        if not slope < 0:
            # Lost descent; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = _steepest(g)
            slope = float(g @ d)

        step = 1.0
        for _ in range(settings.max_line_search):
            x_new = x + step * d
            f_new, g_new = objective_and_gradient(x_new)
            if math.isfinite(f_new) and f_new <= f + settings.c1 * step * slope:
                break
            step *= settings.shrink
        else:
            raise LineSearchError(
                f"line search step underflow at iteration {iteration} (max|grad|={grad_max:.3e})",
                x=x, fun=f, iterations=iteration,
            )
        step, x_new, f_new, g_new = _secant_step(
            objective_and_gradient, x, d, f, slope, (step, x_new, f_new, g_new), settings.c1
        )

        g_new = np.asarray(g_new, dtype=np.float64)
        if not np.all(np.isfinite(g_new)):
            raise NumericalError(f"non-finite gradient at iteration {iteration}")
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
        else:
            logger.debug(f"Skipping curvature pair at iteration {iteration} (s.y={sy:.3e})")

        x, f, g = x_new, f_new, g_new
        logger.debug(f"L-BFGS iteration {iteration + 1}: f={f:.12g} max|grad|={np.max(np.abs(g)):.3e} step={step:.3g}")

    converged = bool(np.max(np.abs(g)) < settings.tol)
    return LbfgsResult(x, f, converged, settings.max_iter)


@dataclass
class AdamState:
    """First/second moment estimates shaped like the parameter list."""

    m: List[np.ndarray]
    v: List[np.ndarray]
    timestep: int = 0
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            **hyper,
        )


def adam_step(
    state: AdamState, params: Sequence[np.ndarray], gradients: Sequence[np.ndarray]
) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameters and the advanced state."""
    if len(params) != len(gradients) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    t = state.timestep + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, gradients, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(
        m=new_m, v=new_v, timestep=t, learning_rate=state.learning_rate,
        beta1=b1, beta2=b2, epsilon=state.epsilon,
    )
    return new_params, new_state


def finite_diff_gradient(objective: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        f_plus = objective(x + e)
        f_minus = objective(x - e)
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericalError(f"objective not finite within h={h} of coordinate {i}")
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def hessian_from_gradient(gradient: Callable[[np.ndarray], np.ndarray], x, rel_step: float = 1e-5) -> np.ndarray:
    """Symmetrized Hessian by central differences of an analytic gradient."""
    x = np.array(x, dtype=np.float64)
    n = x.size
    hess = np.empty((n, n))
    for i in range(n):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        hess[:, i] = (np.asarray(gradient(x + e)) - np.asarray(gradient(x - e))) / (2.0 * h)
    if not np.all(np.isfinite(hess)):
        raise NumericalError("non-finite Hessian entries")
    return 0.5 * (hess + hess.T)


def std_errors_from_hessian(loglik_hessian: np.ndarray) -> np.ndarray:
    """sqrt(diag(inv(-H))) for the Hessian H of a maximized log-likelihood."""
    information = -np.asarray(loglik_hessian, dtype=np.float64)
    try:
        np.linalg.cholesky(information)
    except np.linalg.LinAlgError as e:
        raise HessianError("log-likelihood Hessian is not negative definite") from e
    covariance = np.linalg.inv(information)
    return np.sqrt(np.diag(covariance))
