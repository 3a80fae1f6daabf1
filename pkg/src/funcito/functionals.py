"""Non-anticipative functionals and their numerical functional derivatives.

A functional ``u(t, x)`` is any callable taking a grid time and a
:class:`~funcito.paths.Path` and returning a scalar (or one scalar per
trajectory for batched paths, or one sample per Monte Carlo path for
sampled functionals). Every derivative below is a linear combination of
evaluations, so array-valued functionals flow through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import DomainError, NumericalError
from .paths import STEP, BasisSpec, Path, bump_direction, stop_path


@dataclass(frozen=True)
class Functional:
    """An evaluable non-anticipative map with optional analytic derivatives.

    Callback signatures:

    - ``vertical(t, x, v)``: derivative along ``1_[t,T] v``
    - ``second_vertical(t, x, v, w)``: second derivative along the bumps of ``v`` and ``w``
    - ``left_time(t, x)``: the left-sided time derivative
    - ``directional(t, x, v_path)``: Gateaux derivative along an arbitrary path
    """

    evaluate: Callable
    name: str = "functional"
    vertical: Callable | None = None
    second_vertical: Callable | None = None
    left_time: Callable | None = None
    directional: Callable | None = None
    bounds: tuple | None = None
    params: dict = field(default_factory=dict, compare=False)

    def __call__(self, t, x):
        return self.evaluate(t, x)


@dataclass(frozen=True)
class FDScheme:
    """Finite-difference settings.

    ``eps=None`` means ``1e-4 * (1 + |x|_inf)``; ``h=None`` means one grid
    step. ``h`` may go down to ``dt / 8``; sub-grid values are handled by
    refining the path.
    """

    eps: float | None = None
    h: float | None = None
    order: str = "richardson"
    use_callbacks: bool = True

    def __post_init__(self):
        if self.eps is not None and not self.eps > 0:
            raise DomainError(f"bump size must be positive, got {self.eps!r}")
        if self.h is not None and not self.h > 0:
            raise DomainError(f"time step must be positive, got {self.h!r}")
        if self.order not in ("first", "richardson"):
            raise DomainError(f"unknown order {self.order!r}")

    def bump_size(self, x: Path) -> float:
        if self.eps is not None:
            return self.eps
        return 1e-4 * (1.0 + float(np.max(x.sup_norm())))


DEFAULT_SCHEME = FDScheme()
NO_CALLBACKS = FDScheme(use_callbacks=False)


def _finite(value, what, **inputs):
    if not np.all(np.isfinite(value)):
        echo = ", ".join(f"{k}={v!r}" for k, v in inputs.items())
        raise NumericalError(f"{what} produced a non-finite value ({echo})")
    return value


def _shift(x: Path, direction: Path, scale) -> Path:
    return Path(x.grid, x.values + scale * direction.values, STEP)


def check_nonanticipativity(u, samples: int, seed: int, grid, dim: int = 1) -> float:
    """Largest ``|u(t, x) - u(t, x stopped at t)|`` over random Brownian-like paths."""
    if samples < 1:
        raise DomainError("samples must be at least 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        steps = rng.standard_normal((grid.n_steps, dim)) * np.sqrt(grid.dt)
        values = np.concatenate([rng.standard_normal((1, dim)), steps]).cumsum(axis=0)
        x = Path(grid, values)
        t = grid.time(int(rng.integers(0, grid.n_steps)))
        gap = np.max(np.abs(np.asarray(u(t, x)) - np.asarray(u(t, stop_path(x, t)))))
        worst = max(worst, float(gap))
    return worst


def vertical_derivative(u, t, x: Path, v, scheme: FDScheme = DEFAULT_SCHEME):
    """Derivative of ``u(t, .)`` at ``x`` along ``1_[t,T] v``."""
    if scheme.use_callbacks and getattr(u, "vertical", None) is not None:
        return u.vertical(t, x, np.asarray(v, dtype=float))
    return _fd_vertical(u, t, x, v, scheme)


def _fd_vertical(u, t, x, v, scheme):
    eps = scheme.bump_size(x)
    bump = bump_direction(t, v, x.grid)
    up = u(t, _shift(x, bump, eps))
    down = u(t, _shift(x, bump, -eps))
    return _finite((np.asarray(up) - np.asarray(down)) / (2 * eps), "vertical derivative", t=t, v=v)


def second_vertical_derivative(u, t, x: Path, v, w, scheme: FDScheme = DEFAULT_SCHEME):
    """Second derivative of ``u(t, .)`` along ``(1_[t,T] v, 1_[t,T] w)``."""
    if scheme.use_callbacks and getattr(u, "second_vertical", None) is not None:
        return u.second_vertical(t, x, np.asarray(v, dtype=float), np.asarray(w, dtype=float))
    return _fd_second_vertical(u, t, x, v, w, scheme)


def _fd_second_vertical(u, t, x, v, w, scheme):
    eps = scheme.bump_size(x)
    bv = bump_direction(t, v, x.grid).values
    bw = bump_direction(t, w, x.grid).values

    def at(a, b):
        return np.asarray(u(t, Path(x.grid, x.values + eps * (a * bv + b * bw), STEP)))

    value = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * eps * eps)
    return _finite(value, "second vertical derivative", t=t, v=v, w=w)


def _refinement_for(h: float, dt: float) -> int:
    for r in (1, 2, 4, 8):
        m = h * r / dt
        if abs(m - round(m)) <= 1e-9 * max(1.0, m) and round(m) >= 1:
            return r
    raise DomainError(f"time step {h!r} must be a multiple of dt/8 (dt={dt!r})")


def left_quotient(u, t, x: Path, h: float):
    """``[u(t, x stopped at t-h) - u(t-h, x)] / h``."""
    if not t > 0:
        raise DomainError(f"left time derivative needs t > 0, got {t!r}")
    if h > t * (1 + 1e-12):
        raise DomainError(f"time step {h!r} exceeds t={t!r}")
    r = _refinement_for(h, x.grid.dt)
    xr = x.refine(r)
    t = xr.grid.time(xr.grid.index(t))
    m = int(round(h * r / x.grid.dt))
    k = xr.grid.index(t)
    s = xr.grid.time(k - m)
    value = (np.asarray(u(t, stop_path(xr, s))) - np.asarray(u(s, xr))) / h
    return _finite(value, "left time derivative", t=t, h=h)


def left_time_derivative(u, t, x: Path, scheme: FDScheme = DEFAULT_SCHEME):
    """Left-sided time derivative of a non-anticipative functional."""
    if not t > 0:
        raise DomainError(f"left time derivative needs t > 0, got {t!r}")
    if scheme.use_callbacks and getattr(u, "left_time", None) is not None:
        return u.left_time(t, x)
    h = x.grid.dt if scheme.h is None else scheme.h
    if scheme.order == "first":
        return left_quotient(u, t, x, h)
    return 2.0 * left_quotient(u, t, x, h / 2) - left_quotient(u, t, x, h)


def trace_term(u, t, x: Path, phi, basis: BasisSpec | None = None, scheme: FDScheme = DEFAULT_SCHEME):
    """Sum over the noise basis of the second vertical derivative along ``phi e'_m``."""
    phi = np.asarray(phi, dtype=float)
    m_dim = phi.shape[-1]
    u_basis = np.eye(m_dim) if basis is None else basis.u_basis
    total = 0.0
    for m in range(m_dim):
        column = phi @ u_basis[:, m]
        total = total + second_vertical_derivative(u, t, x, column, column, scheme)
    return total


def generator(u, t, x: Path, coeffs, scheme: FDScheme = DEFAULT_SCHEME, basis: BasisSpec | None = None):
    """``du.(1 b) + 1/2 T[d^2 u, 1 Phi]`` with coefficients frozen at ``(t, x)``."""
    k = x.grid.index(t)
    history = x.values[..., : k + 1, :]
    t = x.grid.time(k)
    if hasattr(coeffs, "on"):
        coeffs = coeffs.on(x.grid)
    drift = coeffs.drift(t, history)
    diffusion = coeffs.diffusion(t, history)
    return vertical_derivative(u, t, x, drift, scheme) + 0.5 * trace_term(u, t, x, diffusion, basis, scheme)


def cross_check(u, t, x: Path, v, w=None, scheme: FDScheme = DEFAULT_SCHEME) -> dict:
    """Callback values next to finite-difference values, for diagnostics."""
    out = {}
    if getattr(u, "vertical", None) is not None:
        out["vertical"] = (u.vertical(t, x, np.asarray(v, float)), _fd_vertical(u, t, x, v, scheme))
    if getattr(u, "second_vertical", None) is not None:
        w = v if w is None else w
        out["second_vertical"] = (
            u.second_vertical(t, x, np.asarray(v, float), np.asarray(w, float)),
            _fd_second_vertical(u, t, x, v, w, scheme),
        )
    if getattr(u, "left_time", None) is not None and t > 0:
        h = x.grid.dt if scheme.h is None else scheme.h
        fd = 2.0 * left_quotient(u, t, x, h / 2) - left_quotient(u, t, x, h)
        out["left_time"] = (u.left_time(t, x), fd)
    return out


def ramp_probe(u, t, x: Path, v, widths, scheme: FDScheme = NO_CALLBACKS) -> list:
    """Vertical derivative along continuous ramps approaching ``1_[t,T] v``.

    Each ramp rises linearly from 0 at ``t - width`` to ``v`` at ``t``.
    Returns ``(width, |ramp derivative - bump derivative|)`` pairs; a
    sequentially continuous extension shows gaps shrinking with the width.
    """
    eps = scheme.bump_size(x)
    v = np.asarray(v, dtype=float)
    target = _fd_vertical(u, t, x, v, scheme)
    nodes = x.grid.nodes
    out = []
    for width in widths:
        profile = np.clip((nodes - (t - width)) / width, 0.0, 1.0)
        ramp = profile[:, None] * v
        up = u(t, Path(x.grid, x.values + eps * ramp))
        down = u(t, Path(x.grid, x.values - eps * ramp))
        gap = np.max(np.abs((np.asarray(up) - np.asarray(down)) / (2 * eps) - target))
        out.append((float(width), float(gap)))
    return out
