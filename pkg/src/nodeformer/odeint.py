"""Differentiable ODE solvers: adaptive RKF45 and fixed-step schemes.

The adaptive solver is the Runge-Kutta-Fehlberg 4(5) embedded pair: six
stages, a 4th-order solution that is propagated, and a 5th-order companion
used only for the local error estimate. Step control uses the usual mixed
absolute/relative RMS norm with acceptance at err <= 1 and the step factor
safety * err**(-1/5), clamped to [0.2, 5.0].

Every accepted step is built from tape primitives, so reverse-mode autodiff
unrolls straight through the integration (discretize-then-differentiate).
Rejected attempts are erased from the tape; step sizes are constants to the
gradient. An optional scalar integrand is accumulated with the trapezoid rule
on the accepted time grid, which keeps the quadrature out of the error
controller's step selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RhsFn = Callable[[Tensor, float], Tensor]
# Integrand receives the state, the time and the already-computed state
# derivative at that point, so it never has to re-evaluate the RHS.
DensityFn = Callable[[Tensor, float, Tensor], Tensor]


@dataclass
class SolverConfig:
    atol: float = 1e-5
    rtol: float = 1e-5
    h_init: float = 0.1
    h_min: float = 1e-6
    h_max: float = 1.0
    safety: float = 0.9
    max_steps: int = 10_000

    def __post_init__(self):
        if not (0.0 < self.h_min <= self.h_init <= self.h_max):
            raise ValueError(
                f"need 0 < h_min <= h_init <= h_max, got {self.h_min}, {self.h_init}, {self.h_max}"
            )
        if self.atol <= 0.0 or self.rtol <= 0.0:
            raise ValueError("tolerances must be positive")
        if not (0.0 < self.safety < 1.0):
            raise ValueError("safety factor must lie in (0, 1)")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass
class SolveStats:
    """Telemetry of one solve; accepted step count is the depth observable."""

    accepted_steps: int = 0
    rejected_steps: int = 0
    rhs_evals: int = 0
    min_h: float = math.inf
    max_h: float = 0.0
    step_times: list[float] = field(default_factory=list)


class SolverError(RuntimeError):
    def __init__(self, message: str, stats: SolveStats | None = None):
        super().__init__(message)
        self.stats = stats


class DivergenceError(SolverError):
    """Step budget exhausted before reaching the final time."""


class StiffnessError(SolverError):
    """Error control pushed the step size below h_min."""


# Fehlberg 4(5) tableau. b4 propagates; (b5 - b4) weights the error estimate.
_C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)
_ERR = (1 / 360, 0.0, -128 / 4275, -2197 / 75240, 1 / 50, 2 / 55)

_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_ORDER_EXP = -1.0 / 5.0


def error_norm(x_err: np.ndarray, x_old: np.ndarray, x_new: np.ndarray,
               cfg: SolverConfig) -> float:
    """Mixed-tolerance RMS norm of a local error estimate; accept iff <= 1."""
    tol = cfg.atol + cfg.rtol * np.maximum(np.abs(x_old), np.abs(x_new))
    return float(np.sqrt(np.mean((x_err / tol) ** 2)))


def _step_factor(err: float, safety: float) -> float:
    if err == 0.0:
        return _MAX_FACTOR
    return min(_MAX_FACTOR, max(_MIN_FACTOR, safety * err ** _ORDER_EXP))


def _rkf45_step(rhs: RhsFn, x: Tensor, t: float, h: float) -> tuple[Tensor, np.ndarray, Tensor]:
    """One embedded step. Returns (4th-order x_new, error array, k1)."""
    ks = []
    for i in range(6):
        if i == 0:
            xi = x
        else:
            row = _A[i]
            xi = ad.lincomb([x] + ks[: len(row)], [1.0] + [h * a for a in row])
        ks.append(rhs(xi, t + _C[i] * h))
    x_new = ad.lincomb(
        [x] + [k for k, b in zip(ks, _B4) if b != 0.0],
        [1.0] + [h * b for b in _B4 if b != 0.0],
    )
    err = sum((h * e) * k.data for k, e in zip(ks, _ERR) if e != 0.0)
    return x_new, err, ks[0]


def _trapezoid(rhos: list[Tensor], hs: list[float]) -> Tensor:
    weights = [0.0] * len(rhos)
    for i, h in enumerate(hs):
        weights[i] += 0.5 * h
        weights[i + 1] += 0.5 * h
    return ad.lincomb(rhos, weights)


def solve_adaptive(rhs: RhsFn, x0: Tensor, t0: float, tf: float, cfg: SolverConfig,
                   density: DensityFn | None = None) -> tuple[Tensor, Tensor, SolveStats]:
    """Integrate x' = rhs(x, t) from t0 to tf with embedded error control.

    Returns the terminal state, the trapezoid integral of `density` over the
    accepted grid (a constant zero tensor when no density is given), and the
    solve telemetry. Both returned tensors live on the active tape, so a loss
    built from them differentiates through every accepted step.
    """
    if tf <= t0:
        raise ad.ContractError(f"solve_adaptive: need tf > t0, got [{t0}, {tf}]")
    stats = SolveStats(step_times=[t0])
    span = tf - t0
    tape = ad.Tape.active
    x, t = x0, t0
    h = min(cfg.h_init, cfg.h_max, span)
    rhos: list[Tensor] = []
    hs: list[float] = []

    while t < tf - 1e-13 * max(1.0, abs(tf)):
        if stats.accepted_steps + stats.rejected_steps >= cfg.max_steps:
            raise DivergenceError(
                f"no convergence within {cfg.max_steps} step attempts (t = {t:.6g})", stats
            )
        h = min(h, tf - t)
        mark = tape.mark() if tape is not None else 0
        try:
            x_new, err_arr, k1 = _rkf45_step(rhs, x, t, h)
        except ad.NumericError as e:
            raise ad.NumericError(f"{e} (during step attempt at t = {t:.6g})") from e
        stats.rhs_evals += 6
        err = error_norm(err_arr, x.data, x_new.data, cfg)
        if err <= 1.0:
            if density is not None:
                rhos.append(density(x, t, k1))
            stats.accepted_steps += 1
            stats.min_h = min(stats.min_h, h)
            stats.max_h = max(stats.max_h, h)
            hs.append(h)
            t = tf if tf - (t + h) <= 1e-13 * max(1.0, abs(tf)) else t + h
            stats.step_times.append(t)
            x = x_new
            h = min(cfg.h_max, max(cfg.h_min, h * _step_factor(err, cfg.safety)))
        else:
            if tape is not None:
                tape.truncate(mark)
            stats.rejected_steps += 1
            h = h * _step_factor(err, cfg.safety)
            if h < cfg.h_min:
                raise StiffnessError(
                    f"step size underflow: {h:.3e} < h_min = {cfg.h_min:.3e} at t = {t:.6g}",
                    stats,
                )

    if density is not None:
        stats.rhs_evals += 1
        rhos.append(density(x, tf, rhs(x, tf)))
        reg = _trapezoid(rhos, hs)
    else:
        reg = Tensor([[0.0]])
    return x, reg, stats


def solve_fixed_sequence(rhs: RhsFn, x0: Tensor, t0: float, hs: Sequence[float],
                         density: DensityFn | None = None) -> tuple[Tensor, Tensor, SolveStats]:
    """Replay RKF45 steps over a prescribed step-size sequence (no control).

    Used to freeze the step grid of a previous adaptive solve, e.g. when
    validating gradients against finite differences without the acceptance
    logic shifting under perturbation.
    """
    stats = SolveStats(step_times=[t0])
    x, t = x0, t0
    rhos: list[Tensor] = []
    for h in hs:
        if density is not None:
            k1 = rhs(x, t)
            stats.rhs_evals += 1
            rhos.append(density(x, t, k1))
        x, _, _ = _rkf45_step(rhs, x, t, h)
        stats.rhs_evals += 6
        stats.accepted_steps += 1
        stats.min_h = min(stats.min_h, h)
        stats.max_h = max(stats.max_h, h)
        t += h
        stats.step_times.append(t)
    if density is not None:
        stats.rhs_evals += 1
        rhos.append(density(x, t, rhs(x, t)))
        reg = _trapezoid(rhos, list(hs))
    else:
        reg = Tensor([[0.0]])
    return x, reg, stats


def solve_rkf45_fixed(rhs: RhsFn, x0: Tensor, t0: float, tf: float, n_steps: int) -> Tensor:
    """Fixed-step integration with the pair's propagated 4th-order formula."""
    if n_steps < 1:
        raise ad.ContractError("solve_rkf45_fixed: n_steps must be >= 1")
    h = (tf - t0) / n_steps
    x, _, _ = solve_fixed_sequence(rhs, x0, t0, [h] * n_steps)
    return x


def solve_euler_fixed(rhs: RhsFn, x0: Tensor, t0: float, tf: float,
                      n_steps: int) -> tuple[Tensor, list[float]]:
    """Forward Euler with uniform steps: x_{n+1} = x_n + h * rhs(x_n, t_n).

    Also returns the Frobenius norm of every increment h * rhs(x_n, t_n),
    i.e. the per-"layer" residuals of the discretized model.
    """
    if n_steps < 1:
        raise ad.ContractError("solve_euler_fixed: n_steps must be >= 1")
    h = (tf - t0) / n_steps
    x = x0
    residual_norms: list[float] = []
    for n in range(n_steps):
        k = rhs(x, t0 + n * h)
        residual_norms.append(float(np.linalg.norm(h * k.data)))
        x = ad.lincomb([x, k], [1.0, h])
    return x, residual_norms


@dataclass
class ProbeResult:
    slope: float | None
    errors: list[float]
    step_sizes: list[float]
    degenerate: bool = False


def convergence_order_probe(rhs: RhsFn, exact: Callable[[float], np.ndarray],
                            step_counts: Sequence[int], x0: Tensor,
                            t0: float = 0.0, tf: float = 1.0,
                            method: str = "rkf45") -> ProbeResult:
    """Fit the empirical convergence order of a fixed-step scheme.

    Integrates with each step count, measures the terminal error against the
    known solution and returns the least-squares slope of log(error) versus
    log(h). When every error sits at rounding level the fit is meaningless
    and the result is flagged degenerate with slope None.
    """
    errors = []
    step_sizes = []
    with ad.no_grad():
        for n in step_counts:
            if method == "rkf45":
                xf = solve_rkf45_fixed(rhs, x0, t0, tf, n)
            elif method == "euler":
                xf, _ = solve_euler_fixed(rhs, x0, t0, tf, n)
            else:
                raise ValueError(f"unknown method {method!r}")
            errors.append(float(np.linalg.norm(xf.data - np.asarray(exact(tf), dtype=float))))
            step_sizes.append((tf - t0) / n)
    if all(e < 1e-13 for e in errors):
        return ProbeResult(slope=None, errors=errors, step_sizes=step_sizes, degenerate=True)
    slope = float(np.polyfit(np.log(step_sizes), np.log(np.maximum(errors, 1e-300)), 1)[0])
    return ProbeResult(slope=slope, errors=errors, step_sizes=step_sizes)
