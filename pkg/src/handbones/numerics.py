"""Dense numerical kernels shared across the toolkit.

L-BFGS with Armijo backtracking, PCA via thin SVD on centered data,
ridge-regularized linear least squares, and a central-difference gradient
checker. Everything works on plain float64 numpy arrays; objectives are
callables returning a value and a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

__all__ = [
    "ObjectiveEvaluation",
    "LineSearchConfig",
    "OptimizerConfig",
    "OptimizeResult",
    "PcaResult",
    "SingularSystemError",
    "lbfgs_minimize",
    "pca",
    "ridge_least_squares",
    "check_gradient",
]


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when an unregularized least-squares system is rank deficient."""


@dataclass(frozen=True)
class ObjectiveEvaluation:
    """Value and gradient of an objective at one point."""

    value: float
    gradient: np.ndarray


Objective = Callable[[np.ndarray], Union[ObjectiveEvaluation, tuple]]


@dataclass(frozen=True)
class LineSearchConfig:
    """Backtracking Armijo parameters (sufficient-decrease c1, step shrink)."""

    armijo_c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 60


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    history_size: int = 10
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    # Optional stall detector: stop after two consecutive accepted steps whose
    # relative decrease falls below this (0 disables it).
    value_rel_tol: float = 0.0

    def __post_init__(self):
        if self.max_iterations <= 0 or self.history_size <= 0:
            raise ValueError("max_iterations and history_size must be positive")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.value_rel_tol < 0:
            raise ValueError("value_rel_tol must be non-negative")


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool
    line_search_failed: bool = False
    history: list = field(default_factory=list)  # accepted objective values


def _evaluate(objective: Objective, x: np.ndarray) -> tuple[float, np.ndarray]:
    out = objective(x)
    if isinstance(out, ObjectiveEvaluation):
        value, gradient = out.value, out.gradient
    else:
        value, gradient = out
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != x.shape:
        raise ValueError(
            f"gradient shape {gradient.shape} does not match parameters {x.shape}"
        )
    return float(value), gradient


def lbfgs_minimize(
    objective: Objective,
    x0: np.ndarray,
    config: OptimizerConfig | None = None,
) -> OptimizeResult:
    """Minimize ``objective`` starting from ``x0`` with two-loop L-BFGS.

    The objective must return a finite value and gradient at ``x0``. Steps
    are accepted only when the Armijo condition holds, so the sequence of
    accepted objective values is non-increasing. Terminates when the gradient
    infinity-norm drops below the tolerance or the iteration budget runs out;
    if the line search cannot find a decrease the best iterate is returned
    with ``line_search_failed`` set.
    """
    cfg = config or OptimizerConfig()
    ls = cfg.line_search
    x = np.array(x0, dtype=float).ravel()
    f, g = _evaluate(objective, x)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise ValueError("objective is not finite at the starting point")

    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []
    history = [f]

    iterations = 0
    stalled = 0
    for _ in range(cfg.max_iterations):
        if np.max(np.abs(g)) < cfg.gradient_tolerance:
            return OptimizeResult(x, f, iterations, converged=True, history=history)

        d = _two_loop_direction(g, s_hist, y_hist, rho_hist)
        descent = float(np.dot(g, d))
        if descent >= 0.0:
            # History produced an ascent direction; fall back to steepest descent.
            s_hist.clear(), y_hist.clear(), rho_hist.clear()
            d = -g
            descent = -float(np.dot(g, g))

        step = 1.0
        accepted = False
        f_new, g_new = f, g
        for _ in range(ls.max_backtracks):
            trial = x + step * d
            f_new, g_new = _evaluate(objective, trial)
            if (
                np.isfinite(f_new)
                and np.all(np.isfinite(g_new))
                and f_new <= f + ls.armijo_c1 * step * descent
            ):
                accepted = True
                break
            step *= ls.shrink
        if not accepted:
            return OptimizeResult(
                x,
                f,
                iterations,
                converged=False,
                line_search_failed=True,
                history=history,
            )

        s = step * d
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.history_size:
                s_hist.pop(0), y_hist.pop(0), rho_hist.pop(0)
        else:
            # Armijo alone cannot guarantee positive curvature; restart the
            # quasi-Newton memory rather than keep a poisoned model.
            s_hist.clear(), y_hist.clear(), rho_hist.clear()

        decrease = f - f_new
        x = x + s
        f, g = f_new, g_new
        history.append(f)
        iterations += 1
        if cfg.value_rel_tol > 0 and decrease <= cfg.value_rel_tol * max(abs(f), 1e-12):
            stalled += 1
            if stalled >= 2:
                return OptimizeResult(x, f, iterations, converged=True, history=history)
        else:
            stalled = 0

    converged = bool(np.max(np.abs(g)) < cfg.gradient_tolerance)
    return OptimizeResult(x, f, iterations, converged=converged, history=history)


def _two_loop_direction(g, s_hist, y_hist, rho_hist):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    if s_hist:
        gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
        q *= gamma
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


@dataclass(frozen=True)
class PcaResult:
    """Mean, orthonormal components (columns) and singular values.

    ``singular_values`` are the raw singular values of the centered sample
    matrix; per-direction standard deviations are ``s / sqrt(M - 1)``.
    """

    mean: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray


def pca(samples: np.ndarray) -> PcaResult:
    """Thin-SVD principal component analysis of row-stacked samples.

    Retains ``r = min(M - 1, D)`` components ordered by non-increasing
    singular value. Component signs are fixed so the largest-magnitude entry
    of each column is positive.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("pca needs a non-empty (M, D) sample matrix")
    m, d = samples.shape
    mean = samples.mean(axis=0)
    centered = samples - mean
    r = min(m - 1, d)
    if r == 0:
        return PcaResult(mean, np.zeros((d, 0)), np.zeros(0))
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:r].T.copy()
    svals = svals[:r].copy()
    flip = np.sign(components[np.argmax(np.abs(components), axis=0), np.arange(r)])
    flip[flip == 0] = 1.0
    components *= flip
    return PcaResult(mean, components, svals)


def ridge_least_squares(A: np.ndarray, B: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Solve ``min_X ||A X - B||^2 + ridge ||X||^2`` by normal equations.

    With ``ridge == 0`` a rank-deficient system raises
    :class:`SingularSystemError` instead of silently picking one minimizer.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if A.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError(f"incompatible shapes {A.shape} vs {B.shape}")
    if ridge == 0.0:
        x, _, rank, _ = np.linalg.lstsq(A, B, rcond=None)
        if rank < A.shape[1]:
            raise SingularSystemError(
                f"system is rank deficient (rank {rank} < {A.shape[1]}); "
                "pass ridge > 0"
            )
        return x
    gram = A.T @ A + ridge * np.eye(A.shape[1])
    return np.linalg.solve(gram, A.T @ B)


def check_gradient(
    objective: Objective,
    x: np.ndarray,
    step: float = 1e-5,
    floor: float = 1e-7,
) -> float:
    """Worst relative mismatch between analytic and central-difference gradient.

    Per coordinate: ``|g_analytic - g_fd| / max(|g_fd|, floor)``.
    """
    x = np.array(x, dtype=float).ravel()
    _, g = _evaluate(objective, x)
    worst = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        f_plus, _ = _evaluate(objective, x + e)
        f_minus, _ = _evaluate(objective, x - e)
        fd = (f_plus - f_minus) / (2.0 * step)
        err = abs(g[i] - fd) / max(abs(fd), floor)
        worst = max(worst, err)
    return worst
