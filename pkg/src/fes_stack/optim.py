"""Deterministic smooth minimization: limited-memory BFGS with a strong
Wolfe line search, plus the stacker's constant parameter initialization.

The implementation is full-batch and allocation-light: episode-scale
objectives are cheap, so the two-loop recursion and line search dominate
only trivially. Everything is plain float64 with a fixed evaluation order,
so repeated runs produce bitwise-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NonFiniteError(RuntimeError):
    """The objective returned a non-finite loss or gradient."""


@dataclass(frozen=True)
class OptimConfig:
    memory_depth: int = 10
    max_iterations: int = 200
    grad_tol: float = 1e-8
    loss_rel_tol: float = 1e-9
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9

    def __post_init__(self):
        if not (0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0):
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.grad_tol <= 0 or self.loss_rel_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.memory_depth < 1 or self.max_iterations < 1:
            raise ValueError("memory_depth and max_iterations must be >= 1")


@dataclass(frozen=True)
class OptimResult:
    params: np.ndarray
    loss: float
    grad: np.ndarray
    grad_inf_norm: float
    n_iterations: int
    n_evals: int
    status: str  # gtol | ftol | max_iterations | line_search_failed


def init_params(levels: int, shape) -> np.ndarray:
    """Constant initialization (1e-3)^(1/levels) for a stacker with the given
    number of kernel levels, so the product of weights across levels starts
    near 1e-3 regardless of hierarchy depth."""
    if levels not in (1, 2):
        raise ValueError(f"levels must be 1 or 2, got {levels}")
    return np.full(shape, (1e-3) ** (1.0 / levels), dtype=np.float64)


def _checked(objective, x, n_evals):
    f, g = objective(x)
    g = np.asarray(g, dtype=np.float64)
    # Non-finite entries poison the sum, so one reduction checks them all.
    if not (math.isfinite(f) and math.isfinite(float(g.sum()))):
        raise NonFiniteError(
            f"objective returned non-finite values at evaluation {n_evals + 1} "
            f"(loss={f!r})"
        )
    return float(f), g


def _interpolate(lo, f_lo, d_lo, hi, f_hi):
    """Quadratic-fit trial point inside (lo, hi), safeguarded toward bisection."""
    span = hi - lo
    denom = 2.0 * (f_hi - f_lo - d_lo * span)
    if abs(denom) > 1e-300:
        trial = lo - d_lo * span * span / denom
        margin = 0.1 * abs(span)
        if min(lo, hi) + margin <= trial <= max(lo, hi) - margin:
            return trial
    return lo + 0.5 * span


class _LineSearch:
    """Strong Wolfe line search (bracket then zoom).

    Returns (alpha, f, g) satisfying both Wolfe conditions when possible.
    If the zoom interval collapses first, returns the best point found that
    satisfies sufficient decrease, so accepted steps never increase the
    objective. Returns None only when no decreasing step was found at all.
    """

    def __init__(self, objective, x, f0, g0, direction, c1, c2):
        self.objective = objective
        self.x = x
        self.d = direction
        self.f0 = f0
        self.dphi0 = float(g0 @ direction)
        self.c1 = c1
        self.c2 = c2
        self.n_evals = 0
        self._trial = np.empty_like(x)

    def _phi(self, alpha):
        self.n_evals += 1
        # Trial point in a scratch buffer; objectives do not retain it.
        trial = np.multiply(self.d, alpha, out=self._trial)
        trial += self.x
        f, g = _checked(self.objective, trial, self.n_evals)
        return f, g, float(g @ self.d)

    def _sufficient(self, alpha, f):
        return f <= self.f0 + self.c1 * alpha * self.dphi0

    def search(self, alpha0, max_evals=60, alpha_max=1e12):
        prev_alpha, prev_f, prev_dphi = 0.0, self.f0, self.dphi0
        prev_g = None
        alpha = alpha0
        first = True
        while self.n_evals < max_evals:
            f, g, dphi = self._phi(alpha)
            if not self._sufficient(alpha, f) or (not first and f >= prev_f):
                return self._zoom(
                    prev_alpha, prev_f, prev_dphi, alpha, f, prev_g, max_evals
                )
            if abs(dphi) <= -self.c2 * self.dphi0:
                return alpha, f, g
            if dphi >= 0:
                return self._zoom(alpha, f, dphi, prev_alpha, prev_f, g, max_evals)
            if alpha >= alpha_max:
                return alpha, f, g  # decreasing all the way out; accept
            prev_alpha, prev_f, prev_dphi, prev_g = alpha, f, dphi, g
            alpha = min(2.0 * alpha, alpha_max)
            first = False
        return None

    def _zoom(self, lo, f_lo, d_lo, hi, f_hi, g_lo, max_evals):
        # Invariant: lo satisfies sufficient decrease (or is 0), and the
        # interval brackets a strong Wolfe point.
        while self.n_evals < max_evals:
            if abs(hi - lo) <= 1e-14 * max(1.0, abs(lo)):
                break
            alpha = _interpolate(lo, f_lo, d_lo, hi, f_hi)
            f, g, dphi = self._phi(alpha)
            if not self._sufficient(alpha, f) or f >= f_lo:
                hi, f_hi = alpha, f
            else:
                if abs(dphi) <= -self.c2 * self.dphi0:
                    return alpha, f, g
                if dphi * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, d_lo, g_lo = alpha, f, dphi, g
        if lo > 0.0 and g_lo is not None and self._sufficient(lo, f_lo):
            return lo, f_lo, g_lo
        return None


def minimize(objective, init, config: OptimConfig | None = None) -> OptimResult:
    """Minimize a smooth objective given as params -> (loss, gradient).

    Limited-memory BFGS two-loop recursion with strong Wolfe line search;
    the direction resets to steepest descent whenever the quasi-Newton
    direction fails to point downhill, and curvature pairs that would break
    positive definiteness are skipped. Stops when the gradient infinity norm
    reaches grad_tol, when the relative loss decrease falls to loss_rel_tol,
    or after max_iterations. The loss sequence is non-increasing and the
    whole procedure is deterministic.
    """
    cfg = config if config is not None else OptimConfig()
    x = np.array(init, dtype=np.float64).ravel()
    n_evals = 1
    f, g = _checked(objective, x, 0)

    dim = x.size
    mem = cfg.memory_depth
    s_mem = np.empty((mem, dim))
    y_mem = np.empty((mem, dim))
    rho_mem = np.empty(mem)
    alphas = np.empty(mem)
    n_pairs = 0  # pairs stored, most recent last
    gamma = 1.0
    n_iter = 0
    status = "max_iterations"

    while True:
        gnorm = float(np.abs(g).max()) if g.size else 0.0
        if gnorm <= cfg.grad_tol:
            status = "gtol"
            break
        if n_iter >= cfg.max_iterations:
            status = "max_iterations"
            break

        # Two-loop recursion for the search direction.
        q = -g
        for i in range(n_pairs - 1, -1, -1):
            a = rho_mem[i] * float(s_mem[i] @ q)
            alphas[i] = a
            q -= a * y_mem[i]
        q *= gamma
        for i in range(n_pairs):
            b = rho_mem[i] * float(y_mem[i] @ q)
            q += (alphas[i] - b) * s_mem[i]
        d = q

        if float(d @ g) >= 0.0:
            # Quasi-Newton direction is uphill; fall back to steepest descent.
            n_pairs = 0
            gamma = 1.0
            d = -g

        alpha0 = min(1.0, 1.0 / max(float(np.abs(g).sum()), 1e-12)) if n_iter == 0 else 1.0
        ls = _LineSearch(objective, x, f, g, d, cfg.wolfe_c1, cfg.wolfe_c2)
        hit = ls.search(alpha0)
        n_evals += ls.n_evals
        if hit is None and n_pairs:
            # Retry once along the raw gradient.
            n_pairs = 0
            gamma = 1.0
            d = -g
            ls = _LineSearch(objective, x, f, g, d, cfg.wolfe_c1, cfg.wolfe_c2)
            hit = ls.search(min(1.0, 1.0 / max(float(np.abs(g).sum()), 1e-12)))
            n_evals += ls.n_evals
        if hit is None:
            status = "line_search_failed"
            break

        alpha, f_new, g_new = hit
        n_iter += 1
        s = alpha * d
        y = g_new - g
        f_prev = f
        x = x + s
        f, g = f_new, g_new

        sy = float(s @ y)
        if sy > 1e-10 * math.sqrt(float(s @ s) * float(y @ y)):
            if n_pairs == mem:
                s_mem[:-1] = s_mem[1:]
                y_mem[:-1] = y_mem[1:]
                rho_mem[:-1] = rho_mem[1:]
                n_pairs -= 1
            s_mem[n_pairs] = s
            y_mem[n_pairs] = y
            rho_mem[n_pairs] = 1.0 / sy
            n_pairs += 1
            gamma = sy / float(y @ y)

        rel_decrease = (f_prev - f) / max(abs(f_prev), abs(f), 1e-12)
        if rel_decrease <= cfg.loss_rel_tol:
            gnorm = float(np.abs(g).max())
            status = "gtol" if gnorm <= cfg.grad_tol else "ftol"
            break

    return OptimResult(
        params=x,
        loss=f,
        grad=g,
        grad_inf_norm=float(np.abs(g).max()) if g.size else 0.0,
        n_iterations=n_iter,
        n_evals=n_evals,
        status=status,
    )
