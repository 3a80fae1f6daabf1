"""First and second derivatives of the solution map ``x -> Lambda^{t,x}``.

The linearised fixed-point map ``d3psi`` is a strict Volterra operator, so
``I - d3psi`` is inverted by its Neumann series. The series is truncated
once the geometric tail bound drops below the tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, DomainError
from .pathwise import PsiContext, contraction_factor, integrate_from, lambda_for_contraction, picard_solve
from .paths import Path, format_float, lambda_norm_values, stop_path


@dataclass(frozen=True, eq=False)
class DerivativeContext:
    ctx: PsiContext
    solution: Path
    lam: float
    alpha: float
    conv_solution: np.ndarray
    jacobians: np.ndarray

    @classmethod
    def build(cls, ctx: PsiContext, solution: Path | None = None, lam: float | None = None, target: float = 0.5, tol: float = 1e-13):
        drift = ctx.drift
        if drift.jacobian is None:
            raise DomainError(f"drift {drift.name!r} has no jacobian callback")
        bound = drift.derivative_bound
        horizon = ctx.grid.horizon
        if lam is None:
            lam = lambda_for_contraction(target, max(bound, drift.lipschitz), drift.total_variation, horizon)
        if solution is None:
            solution = picard_solve(ctx, lam=lam, tol=tol).solution
        alpha = contraction_factor(lam, bound, drift.total_variation, horizon)
        if alpha >= 1:
            raise DomainError(f"lambda={lam!r} gives contraction factor {alpha!r} >= 1")
        conv = drift.convolve(solution.values)
        jac = drift.jacobian(ctx.grid.nodes[:, None], conv)
        conv.flags.writeable = False
        jac = np.asarray(jac)
        jac.flags.writeable = False
        return cls(ctx, solution, lam, alpha, conv, jac)

    @property
    def grid(self):
        return self.ctx.grid

    def lambda_norm(self, values: np.ndarray) -> float:
        return float(np.max(lambda_norm_values(values, self.grid, self.lam)))


def d2_psi_apply(t: float, v: Path) -> Path:
    """Derivative of psi in the anchor: the stopped direction."""
    return stop_path(v, t)


def _d3_values(dctx: DerivativeContext, v: np.ndarray) -> np.ndarray:
    cv = dctx.ctx.drift.convolve(v)
    rates = np.einsum("...kij,...kj->...ki", dctx.jacobians, cv)
    return integrate_from(dctx.ctx.start_index, rates, dctx.grid.dt)


def d3_psi_apply(dctx: DerivativeContext, v: Path) -> Path:
    """``k -> sum_{t <= t_j < t_k} grad b(t_j, conv Lambda) conv v (t_j) dt``."""
    return Path(dctx.grid, _d3_values(dctx, v.values))


def neumann_terms_needed(alpha: float, norm: float, tol: float) -> int:
    """Smallest ``K`` with ``alpha^(K+1) / (1 - alpha) * norm <= tol``."""
    if norm == 0 or alpha == 0:
        return 0
    k = math.log(tol * (1 - alpha) / norm) / math.log(alpha) - 1
    return max(0, math.ceil(k))


def _neumann_values(dctx: DerivativeContext, v: np.ndarray, tol: float, max_terms: int) -> np.ndarray:
    needed = neumann_terms_needed(dctx.alpha, dctx.lambda_norm(v), tol)
    if needed > max_terms:
        raise ConvergenceError(f"Neumann series needs {needed} terms, more than max_terms={max_terms}")
    total = np.array(v, dtype=float)
    term = total
    for _ in range(needed):
        term = _d3_values(dctx, term)
        if not np.any(term):
            break
        total = total + term
    return total


def neumann_apply(dctx: DerivativeContext, v: Path, tol: float = 1e-13, max_terms: int = 1000) -> Path:
    """``(I - d3psi)^{-1} v`` by the truncated Neumann series."""
    return Path(dctx.grid, _neumann_values(dctx, v.values, tol, max_terms))


def first_derivative(dctx: DerivativeContext, v: Path, tol: float = 1e-13) -> Path:
    """Derivative of ``x -> Lambda^{t,x}`` along ``v``."""
    return neumann_apply(dctx, d2_psi_apply(dctx.ctx.start, v), tol)


def d3_psi_second(dctx: DerivativeContext, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Second derivative of psi in ``y`` at the solution, along ``(p, q)``."""
    drift = dctx.ctx.drift
    if drift.hessian is None:
        raise DomainError(f"drift {drift.name!r} has no hessian callback")
    hess = drift.hessian(dctx.grid.nodes[:, None], dctx.conv_solution)
    cp = drift.convolve(p)
    cq = drift.convolve(q)
    rates = np.einsum("...kijl,...kj,...kl->...ki", hess, cp, cq)
    return integrate_from(dctx.ctx.start_index, rates, dctx.grid.dt)


def second_derivative(dctx: DerivativeContext, v: Path, w: Path, tol: float = 1e-13) -> Path:
    """Second derivative of ``x -> Lambda^{t,x}`` along ``(v, w)``."""
    p = first_derivative(dctx, v, tol).values
    q = p if w is v else first_derivative(dctx, w, tol).values
    return Path(dctx.grid, _neumann_values(dctx, d3_psi_second(dctx, p, q), tol, 1000))


def sensitivity_csv(rows) -> str:
    """Rows of ``(direction_id, t, node, neumann_value, fd_value)`` as report CSV."""
    lines = ["direction_id,t,node,neumann_value,fd_value,rel_err"]
    for direction, t, node, neumann, fd in rows:
        rel = abs(neumann - fd) / max(abs(fd), 1e-300)
        lines.append(
            f"{direction},{format_float(t)},{node},{format_float(neumann)},{format_float(fd)},{format_float(rel)}"
        )
    return "\n".join(lines) + "\n"


def _solve_from(dctx: DerivativeContext, anchor_values: np.ndarray, tol: float) -> np.ndarray:
    ctx = dctx.ctx
    shifted = PsiContext(ctx.start, Path(dctx.grid, anchor_values, ctx.anchor.kind), ctx.drift, ctx.noise_path)
    return picard_solve(shifted, lam=dctx.lam, tol=tol).solution.values


def fd_first_derivative(dctx: DerivativeContext, v: Path, eps: float = 1e-5, tol: float = 1e-14) -> Path:
    """Central difference of the solution map along ``v`` with the noise held fixed."""
    x = dctx.ctx.anchor.values
    up = _solve_from(dctx, x + eps * v.values, tol)
    down = _solve_from(dctx, x - eps * v.values, tol)
    return Path(dctx.grid, (up - down) / (2 * eps))


def fd_second_derivative(dctx: DerivativeContext, v: Path, w: Path, eps: float = 1e-3, tol: float = 1e-14) -> Path:
    """Four-point stencil of the solution map along ``(v, w)`` with the noise held fixed."""
    x = dctx.ctx.anchor.values

    def at(a, b):
        return _solve_from(dctx, x + eps * (a * v.values + b * w.values), tol)

    return Path(dctx.grid, (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * eps * eps))


def dense_first_derivative(dctx: DerivativeContext, v: Path) -> Path:
    """``(I - d3psi)^{-1} v_{t^.}`` by a dense LU solve, for one unbatched path."""
    grid = dctx.grid
    n1, dim = grid.n_steps + 1, dctx.solution.dim
    if dctx.jacobians.ndim != 3:
        raise DomainError("the dense oracle takes an unbatched solution")
    size = n1 * dim
    operator = np.empty((size, size))
    basis = np.eye(size).reshape(size, n1, dim)
    for col in range(size):
        operator[:, col] = _d3_values(dctx, basis[col]).ravel()
    rhs = d2_psi_apply(dctx.ctx.start, v).values.ravel()
    return Path(grid, np.linalg.solve(np.eye(size) - operator, rhs).reshape(n1, dim))
