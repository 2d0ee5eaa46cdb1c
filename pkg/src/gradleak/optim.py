"""L-BFGS with a strong-Wolfe line search, and Adam.

Both work on a list of arrays that is flattened into one vector internally,
so the caller can optimise an image and a label logit vector together.  The
objective is a callable ``f(xs) -> (value, grads)`` with ``grads`` shaped
like ``xs``.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import NonFiniteError

Objective = Callable[[list], tuple]


@dataclass(frozen=True)
class LbfgsConfig:
    history_size: int = 10
    max_iterations: int = 300
    c1: float = 1e-4
    c2: float = 0.9
    grad_tol: float = 1e-7
    max_line_search: int = 25
    objective_tol: float | None = None  # stop once the objective drops below this
    curvature_eps: float = 1e-10
    # after a Wolfe step, try the interpolated line minimiser once; this
    # makes the search exact on quadratics at the cost of extra evaluations
    refine_step: bool = True
    # plateau stop: give up ("stalled") when the objective fell by less than
    # stall_rtol (relative) over the last stall_window iterations; 0 disables
    stall_window: int = 0
    stall_rtol: float = 1e-3

    def __post_init__(self):
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")
        if self.max_iterations < 1 or self.max_line_search < 1:
            raise ValueError("iteration limits must be >= 1")
        if not (0 < self.c1 < self.c2 < 1):
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iterations: int = 1000

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("eps and lr must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class LineStep:
    """Directional data for one accepted step, for Wolfe checks."""

    alpha: float
    f0: float
    slope0: float
    f1: float
    slope1: float


@dataclass
class OptimizeResult:
    x: list  # best iterate by objective value
    fun: float
    trace: list = field(default_factory=list)  # f(x0) then one value per iteration
    status: str = "max_iterations"
    iterations: int = 0
    evaluations: int = 0
    steps: list = field(default_factory=list)
    last_x: list | None = None

    @property
    def success(self) -> bool:
        return self.status in ("converged", "objective_tol", "max_iterations", "stalled")


class _Flat:
    def __init__(self, xs: Sequence[np.ndarray]):
        self.shapes = [np.shape(x) for x in xs]
        self.sizes = [int(np.prod(s)) for s in self.shapes]

    def pack(self, xs) -> np.ndarray:
        return np.concatenate([np.asarray(x, dtype=np.float64).reshape(-1) for x in xs])

    def unpack(self, v: np.ndarray) -> list:
        out, pos = [], 0
        for shape, n in zip(self.shapes, self.sizes):
            out.append(v[pos:pos + n].reshape(shape).copy())
            pos += n
        return out


def _evaluate(objective, flat: _Flat, v: np.ndarray):
    try:
        f, g = objective(flat.unpack(v))
    except NonFiniteError:
        return math.inf, None
    f = float(f)
    if not math.isfinite(f):
        return math.inf, None
    g = flat.pack(g)
    if not np.all(np.isfinite(g)):
        return math.inf, None
    return f, g


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    """Minimiser of the cubic interpolating two points, clamped to [lo, hi]."""
    if not all(map(math.isfinite, (f1, g1, f2, g2))):
        return 0.5 * (lo + hi)
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    d2sq = d1 * d1 - g1 * g2
    if d2sq < 0:
        return 0.5 * (lo + hi)
    d2 = math.copysign(math.sqrt(d2sq), x2 - x1)
    denom = g2 - g1 + 2 * d2
    if denom == 0:
        return 0.5 * (lo + hi)
    t = x2 - (x2 - x1) * (g2 + d2 - d1) / denom
    return min(max(t, lo), hi)


def strong_wolfe(phi, f0: float, slope0: float, alpha: float, c1: float, c2: float,
                 max_evals: int):
    """Find a step satisfying the strong Wolfe conditions.

    ``phi(a)`` returns ``(f, g, slope)`` at ``x + a*d``.  Returns
    ``(alpha, f, g, slope, evals)``; ``alpha`` is None on failure.
    """
    evals = 0
    a_prev, f_prev, s_prev = 0.0, f0, slope0
    lo = hi = None
    a = alpha
    while evals < max_evals:
        f, g, s = phi(a)
        evals += 1
        if f > f0 + c1 * a * slope0 or (evals > 1 and f >= f_prev):
            lo, hi = (a_prev, f_prev, s_prev), (a, f, s)
            break
        if abs(s) <= -c2 * slope0:
            return a, f, g, s, evals
        if s >= 0:
            lo, hi = (a, f, s), (a_prev, f_prev, s_prev)
            break
        a_next = _cubic_min(a_prev, f_prev, s_prev, a, f, s, a + 0.01 * (a - a_prev), 10 * a)
        a_prev, f_prev, s_prev = a, f, s
        a = a_next
    else:
        return None, None, None, None, evals

    while evals < max_evals:
        (al, fl, sl), (ah, fh, sh) = lo, hi
        width = abs(ah - al)
        if width < 1e-14 * max(1.0, abs(al)):
            break
        left, right = min(al, ah), max(al, ah)
        a = _cubic_min(al, fl, sl, ah, fh, sh, left + 0.1 * width, right - 0.1 * width)
        f, g, s = phi(a)
        evals += 1
        if f > f0 + c1 * a * slope0 or f >= fl:
            hi = (a, f, s)
        else:
            if abs(s) <= -c2 * slope0:
                return a, f, g, s, evals
            if s * (ah - al) >= 0:
                hi = lo
            lo = (a, f, s)
    return None, None, None, None, evals


def lbfgs_minimize(objective: Objective, x0: Sequence[np.ndarray],
                   cfg: LbfgsConfig = LbfgsConfig(), callback=None) -> OptimizeResult:
    """Minimise ``objective`` from ``x0`` with limited-memory BFGS.

    Stops on ``max_iterations``, gradient max-norm below ``grad_tol``,
    objective below ``objective_tol`` or a failed line search; ``status``
    says which.  ``callback(iteration, xs, f)`` runs after every accepted step.
    """
    flat = _Flat(x0)
    x = flat.pack(x0)
    f, g = _evaluate(objective, flat, x)
    if g is None:
        raise NonFiniteError("objective is not finite at the starting point")
    res = OptimizeResult(x=flat.unpack(x), fun=f, trace=[f], evaluations=1)
    if cfg.objective_tol is not None and f < cfg.objective_tol:
        res.status = "objective_tol"
        res.last_x = res.x
        return res
    if np.max(np.abs(g)) <= cfg.grad_tol:
        res.status = "converged"
        res.last_x = res.x
        return res

    mem: deque = deque(maxlen=cfg.history_size)
    for it in range(1, cfg.max_iterations + 1):
        d = _two_loop(g, mem)
        slope = float(g @ d)
        if slope >= 0:
            mem.clear()
            d = -g
            slope = float(g @ d)
        alpha0 = min(1.0, 1.0 / np.sum(np.abs(g))) if not mem else 1.0

        def phi(a, x=x, d=d):
            fa, ga = _evaluate(objective, flat, x + a * d)
            return fa, ga, (float(ga @ d) if ga is not None else math.nan)

        a, f_new, g_new, slope_new, n = strong_wolfe(
            phi, f, slope, alpha0, cfg.c1, cfg.c2, cfg.max_line_search)
        res.evaluations += n
        if a is None:
            res.status = "line_search_failed"
            break
        if cfg.refine_step:
            t = _cubic_min(0.0, f, slope, a, f_new, slope_new, 0.0, 20.0 * a)
            if 0 < t and t != a and abs(slope_new) > 1e-10 * abs(slope):
                ft, gt, st = phi(t)
                res.evaluations += 1
                if (gt is not None and ft <= f_new and ft <= f + cfg.c1 * t * slope
                        and abs(st) <= -cfg.c2 * slope):
                    a, f_new, g_new, slope_new = t, ft, gt, st
        s = a * d
        y = g_new - g
        sy = float(s @ y)
        if sy > cfg.curvature_eps:
            mem.append((s, y, 1.0 / sy))
        res.steps.append(LineStep(a, f, slope, f_new, slope_new))
        x, f, g = x + s, f_new, g_new
        res.iterations = it
        res.trace.append(f)
        res.x, res.fun = flat.unpack(x), f
        if callback is not None:
            callback(it, res.x, f)
        if cfg.objective_tol is not None and f < cfg.objective_tol:
            res.status = "objective_tol"
            break
        if np.max(np.abs(g)) <= cfg.grad_tol:
            res.status = "converged"
            break
        if np.max(np.abs(s)) <= 1e-16 * max(1.0, np.max(np.abs(x))):
            res.status = "converged"
            break
        w = cfg.stall_window
        if w and it >= w and res.trace[-1 - w] - f <= cfg.stall_rtol * abs(f):
            res.status = "stalled"
            break
    res.last_x = flat.unpack(x)
    return res


def _two_loop(g: np.ndarray, mem) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if mem:
        s, y, _ = mem[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q


def adam_minimize(objective: Objective, x0: Sequence[np.ndarray],
                  cfg: AdamConfig = AdamConfig(), callback=None) -> OptimizeResult:
    """Adam with bias correction; keeps the best iterate seen."""
    flat = _Flat(x0)
    x = flat.pack(x0)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    res = OptimizeResult(x=flat.unpack(x), fun=math.inf)
    b1, b2 = cfg.beta1, cfg.beta2
    for it in range(cfg.max_iterations + 1):
        f, g = _evaluate(objective, flat, x)
        res.evaluations += 1
        if g is None:
            if it == 0:
                raise NonFiniteError("objective is not finite at the starting point")
            res.status = "non_finite"
            break
        res.trace.append(f)
        if f < res.fun:
            res.x, res.fun = flat.unpack(x), f
        if it == cfg.max_iterations:
            break
        if callback is not None and it:
            callback(it, flat.unpack(x), f)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        x = x - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        res.iterations = it + 1
    res.last_x = flat.unpack(x)
    return res
