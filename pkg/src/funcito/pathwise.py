"""Pathwise solution of additive-noise SDEs with a convolution drift.

For a fixed noise sample the solution is the fixed point of

    psi(t, x, y) = x stopped at t + int_t^{t v .} b_hat(s, y) ds + (W^B_{t v .} - W^B_t)

found by Picard iteration in the weighted norm ``sup_t exp(-lam t)|y(t)|``.
Operators act on node values; the density part of the convolution uses the
continuous (linear) mid-cell convention regardless of the path kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .exceptions import ConvergenceError, DomainError, GridError, NumericalError
from .measures import RadonMeasure, total_variation
from .paths import CONTINUOUS, Path, TimeGrid, format_float, lambda_norm_values, stop_path
from .sde import integrate_constant_noise


@dataclass(frozen=True, eq=False)
class ConvolutionDrift:
    """``b_hat(t, y) = outer(t, int y~(t - s) mu(ds))`` bound to a grid.

    ``outer(t, c)`` maps ``(..., N)`` to ``(..., N)``; ``jacobian`` returns
    ``(..., N, N)`` and ``hessian`` returns ``(..., N, N, N)`` with
    ``hessian[..., i, j, l] = d^2 outer_i / dc_j dc_l``. ``t`` is a scalar or an
    array broadcastable against ``c[..., :1]``.
    """

    outer: Callable
    measure: RadonMeasure
    grid: TimeGrid
    jacobian: Callable | None = None
    hessian: Callable | None = None
    lipschitz: float = 1.0
    d1: float | None = None
    d2: float | None = None
    name: str = "drift"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.measure.check_aligned(self.grid)

    @property
    def plan(self):
        return self.measure.plan(self.grid, CONTINUOUS)

    @property
    def total_variation(self) -> float:
        return total_variation(self.measure)

    @property
    def derivative_bound(self) -> float:
        return self.lipschitz if self.d1 is None else self.d1

    def on(self, grid: TimeGrid) -> "ConvolutionDrift":
        """The same drift bound to another grid."""
        if grid == self.grid:
            return self
        return ConvolutionDrift(
            self.outer, self.measure, grid, self.jacobian, self.hessian,
            self.lipschitz, self.d1, self.d2, self.name, self.params,
        )

    def __call__(self, t, history):
        """Drift at node ``k = len(history) - 1``, usable as an SDE coefficient."""
        k = history.shape[-2] - 1
        return self.outer(t, self.plan.at(k, history))

    def convolve(self, values: np.ndarray) -> np.ndarray:
        return self.plan.all(values)

    def along(self, values: np.ndarray) -> np.ndarray:
        """``b_hat(t_k, y)`` at every node."""
        return self.outer(self.grid.nodes[:, None], self.convolve(values))


@dataclass(frozen=True, eq=False)
class PsiContext:
    """Start time, anchor path, drift and one noise path ``W^B`` (or a batch)."""

    start: float
    anchor: Path
    drift: ConvolutionDrift
    noise_path: Path | None = None

    def __post_init__(self):
        grid = self.anchor.grid
        if self.drift.grid != grid:
            raise GridError("drift and anchor live on different grids")
        if self.noise_path is not None and self.noise_path.grid != grid:
            raise GridError("noise path and anchor live on different grids")

    @property
    def grid(self) -> TimeGrid:
        return self.anchor.grid

    @property
    def start_index(self) -> int:
        return self.grid.index(self.start)


def integrate_from(start_index: int, rates: np.ndarray, dt: float) -> np.ndarray:
    """Left-endpoint ``k -> sum_{start <= j < k} rates_j dt``, zero up to ``start``."""
    incr = np.array(rates, dtype=float) * dt
    incr[..., :start_index, :] = 0.0
    out = np.zeros(incr.shape)
    out[..., 1:, :] = np.cumsum(incr[..., :-1, :], axis=-2)
    return out


def psi_apply(ctx: PsiContext, y: Path) -> Path:
    """One application of the fixed-point map to ``y``."""
    return Path(ctx.grid, _psi_values(ctx, y.values))


def _psi_values(ctx: PsiContext, y: np.ndarray) -> np.ndarray:
    k0 = ctx.start_index
    base = stop_path(ctx.anchor, ctx.start).values
    out = base + integrate_from(k0, ctx.drift.along(y), ctx.grid.dt)
    if ctx.noise_path is not None:
        w = ctx.noise_path.values
        shift = np.zeros(w.shape)
        shift[..., k0 + 1 :, :] = w[..., k0 + 1 :, :] - w[..., k0 : k0 + 1, :]
        out = out + shift
    if not np.all(np.isfinite(out)):
        raise NumericalError("psi produced a non-finite value")
    return out


def contraction_factor(lam: float, lipschitz: float, tv: float, horizon: float) -> float:
    """``(1 - exp(-lam T)) / lam * N * |mu|_1``."""
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam!r}")
    return -np.expm1(-lam * horizon) / lam * lipschitz * tv


def lambda_for_contraction(target: float, lipschitz: float, tv: float, horizon: float) -> float:
    """Smallest ``lam`` with contraction factor ``<= target`` (found by bisection)."""
    if not 0 < target < 1:
        raise DomainError("target contraction must lie in (0, 1)")
    if lipschitz * tv * horizon <= target:
        return 1.0 / horizon
    hi = 1.0
    while contraction_factor(hi, lipschitz, tv, horizon) > target:
        hi *= 2.0
    return brentq(lambda lam: contraction_factor(lam, lipschitz, tv, horizon) - target, 1e-12, hi, xtol=1e-12)


@dataclass
class PicardResult:
    solution: Path
    iterations: int
    error: float
    lam: float
    alpha: float
    trace: list

    def ratios(self, floor: float = 1e-11) -> np.ndarray:
        """Successive error ratios while the error stays above ``floor``."""
        errs = np.array([e for e, _ in self.trace])
        keep = errs[1:] > floor
        return (errs[1:] / errs[:-1])[keep]

    def diagnostics_csv(self) -> str:
        lines = ["iteration,lambda_error,sup_error"]
        for i, (lam_err, sup_err) in enumerate(self.trace, start=1):
            lines.append(f"{i},{format_float(lam_err)},{format_float(sup_err)}")
        return "\n".join(lines) + "\n"


def picard_solve(ctx: PsiContext, lam: float | None = None, tol: float = 1e-12, max_iter: int = 500, target: float = 0.5) -> PicardResult:
    """Banach iteration ``y <- psi(y)`` from the stopped anchor.

    Stops once successive iterates differ by at most ``tol`` in the weighted
    norm (the maximum over a batch).
    """
    drift = ctx.drift
    horizon = ctx.grid.horizon
    if lam is None:
        lam = lambda_for_contraction(target, drift.lipschitz, drift.total_variation, horizon)
    alpha = contraction_factor(lam, drift.lipschitz, drift.total_variation, horizon)
    if alpha >= 1:
        raise DomainError(f"lambda={lam!r} gives contraction factor {alpha!r} >= 1")
    if not tol > 0:
        raise DomainError("tol must be positive")
    y = stop_path(ctx.anchor, ctx.start).values
    trace = []
    for it in range(1, max_iter + 1):
        nxt = _psi_values(ctx, y)
        diff = nxt - y
        lam_err = float(np.max(lambda_norm_values(diff, ctx.grid, lam)))
        sup_err = float(np.max(np.abs(diff)))
        trace.append((lam_err, sup_err))
        y = nxt
        if lam_err <= tol:
            return PicardResult(Path(ctx.grid, y), it, lam_err, lam, alpha, trace)
    raise ConvergenceError(
        f"Picard iteration did not reach tol={tol!r} in {max_iter} iterations (last error {trace[-1][0]!r})",
        trace=trace,
    )


def solve_sde_pathwise(t: float, x: Path, drift: ConvolutionDrift, B, noise, **picard_kw) -> Path:
    """Strong solution sample(s) for the noise bundle, via the fixed point."""
    ctx = PsiContext(t, x, drift, integrate_constant_noise(B, noise))
    return picard_solve(ctx, **picard_kw).solution


def measured_contraction(ctx: PsiContext, lam: float, n_pairs: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """``|psi(y) - psi(y')|_lam / |y - y'|_lam`` over random Gaussian node values."""
    rng = np.random.default_rng(seed)
    shape = (ctx.grid.n_steps + 1, ctx.anchor.dim)
    out = np.empty(n_pairs)
    for i in range(n_pairs):
        y = scale * rng.standard_normal(shape)
        z = scale * rng.standard_normal(shape)
        num = np.max(lambda_norm_values(_psi_values(ctx, y) - _psi_values(ctx, z), ctx.grid, lam))
        den = np.max(lambda_norm_values(y - z, ctx.grid, lam))
        out[i] = num / den
    return out
