"""Named functionals and drifts with analytic derivative callbacks.

Every functional evaluates batched paths ``(..., n+1, N)`` to arrays of
shape ``(...)``. Path integrals use the left-point rule on the grid, so the
callbacks are the exact derivatives of the discretized functionals.
"""

from __future__ import annotations

import math

import numpy as np

from .exceptions import ConfigError
from .functionals import Functional
from .measures import RadonMeasure
from .pathwise import ConvolutionDrift


def _vec(a, dim):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.shape == (1,) and dim > 1:
        a = np.repeat(a, dim)
    if a.shape != (dim,):
        raise ConfigError(f"coefficient vector has length {a.shape[0]}, expected {dim}")
    return a


def _dot(a, v):
    return np.sum(np.asarray(v, dtype=float) * a, axis=-1)


def _current(t, x):
    return x.values[..., x.grid.index(t), :]


# scalar outer maps g with first and second derivatives
_SCALAR_MAPS = {
    "identity": (lambda s: s, lambda s: np.ones_like(s), lambda s: np.zeros_like(s)),
    "square": (lambda s: s * s, lambda s: 2 * s, lambda s: 2 * np.ones_like(s)),
    "sin": (np.sin, np.cos, lambda s: -np.sin(s)),
}


def _scalar_map(name):
    try:
        return _SCALAR_MAPS[name]
    except KeyError:
        raise ConfigError(f"unknown map {name!r}; choose from {sorted(_SCALAR_MAPS)}") from None


def cylinder(form: str = "linear", dim: int = 1, a=1.0, rate: float = 0.0, kappa: float = 0.0, horizon: float = 1.0) -> Functional:
    """``u(t, x) = g(t, x(t))`` for a few smooth ``g``.

    Forms: ``linear`` <a, y>; ``square_norm`` |y|^2; ``sin_decay``
    sin(<a, y>) exp(-rate t); ``ou_phi`` <a, y> exp(-kappa (T - t)).
    """
    a = _vec(a, dim)
    params = {"form": form, "dim": dim, "a": a.tolist(), "rate": rate, "kappa": kappa, "horizon": horizon}

    if form == "linear":
        return Functional(
            lambda t, x: _dot(a, _current(t, x)), "cylinder",
            vertical=lambda t, x, v: np.broadcast_to(_dot(a, v), x.batch_shape) + 0.0,
            second_vertical=lambda t, x, v, w: np.zeros(x.batch_shape),
            left_time=lambda t, x: np.zeros(x.batch_shape),
            bounds=(float(np.linalg.norm(a)), 0.0), params=params,
        )
    if form == "square_norm":
        return Functional(
            lambda t, x: np.sum(_current(t, x) ** 2, axis=-1), "cylinder",
            vertical=lambda t, x, v: 2 * np.sum(_current(t, x) * v, axis=-1),
            second_vertical=lambda t, x, v, w: np.broadcast_to(2 * np.sum(v * w, axis=-1), x.batch_shape) + 0.0,
            left_time=lambda t, x: np.zeros(x.batch_shape),
            params=params,
        )
    if form == "sin_decay":
        def decay(t):
            return math.exp(-rate * t)

        return Functional(
            lambda t, x: np.sin(_dot(a, _current(t, x))) * decay(t), "cylinder",
            vertical=lambda t, x, v: np.cos(_dot(a, _current(t, x))) * decay(t) * _dot(a, v),
            second_vertical=lambda t, x, v, w: -np.sin(_dot(a, _current(t, x))) * decay(t) * _dot(a, v) * _dot(a, w),
            left_time=lambda t, x: -rate * np.sin(_dot(a, _current(t, x))) * decay(t),
            bounds=(float(np.linalg.norm(a)), float(a @ a)), params=params,
        )
    if form == "ou_phi":
        def scale(t):
            return math.exp(-kappa * (horizon - t))

        return Functional(
            lambda t, x: _dot(a, _current(t, x)) * scale(t), "cylinder",
            vertical=lambda t, x, v: np.broadcast_to(_dot(a, v) * scale(t), x.batch_shape) + 0.0,
            second_vertical=lambda t, x, v, w: np.zeros(x.batch_shape),
            left_time=lambda t, x: kappa * _dot(a, _current(t, x)) * scale(t),
            params=params,
        )
    raise ConfigError(f"unknown cylinder form {form!r}")


def running_integral(integrand: str = "linear", dim: int = 1, a=1.0, decay: float = 0.0) -> Functional:
    """``u(t, x) = sum_{t_j < t} h(x(t_j)) exp(-decay (t - t_j)) dt``.

    ``h`` is ``<a, y>`` (``linear``) or ``|y|^2`` (``square``).
    """
    a = _vec(a, dim)
    if integrand == "linear":
        def h(y):
            return _dot(a, y)
    elif integrand == "square":
        def h(y):
            return np.sum(y * y, axis=-1)
    else:
        raise ConfigError(f"unknown integrand {integrand!r}")

    def weighted(t, x, kernel):
        k = x.grid.index(t)
        lags = t - x.grid.nodes[:k]
        vals = h(x.values[..., :k, :])
        return np.sum(vals * kernel(lags), axis=-1) * x.grid.dt

    def evaluate(t, x):
        return weighted(t, x, lambda r: np.exp(-decay * r))

    def left_time(t, x):
        return h(_current(t, x)) + weighted(t, x, lambda r: -decay * np.exp(-decay * r))

    return Functional(
        evaluate, "running_integral",
        vertical=lambda t, x, v: np.zeros(x.batch_shape),
        second_vertical=lambda t, x, v, w: np.zeros(x.batch_shape),
        left_time=left_time,
        params={"integrand": integrand, "dim": dim, "a": a.tolist(), "decay": decay},
    )


def terminal(form: str = "identity", dim: int = 1, a=1.0) -> Functional:
    """``f(x) = g(<a, x(T)>)``."""
    a = _vec(a, dim)
    g, dg, d2g = _scalar_map(form)

    def final(x):
        return _dot(a, x.values[..., -1, :])

    return Functional(
        lambda t, x: g(final(x)), "terminal",
        vertical=lambda t, x, v: dg(final(x)) * _dot(a, v),
        second_vertical=lambda t, x, v, w: d2g(final(x)) * _dot(a, v) * _dot(a, w),
        directional=lambda t, x, path: dg(final(x)) * _dot(a, path.values[..., -1, :]),
        params={"form": form, "dim": dim, "a": a.tolist()},
    )


def average(form: str = "identity", dim: int = 1, a=1.0) -> Functional:
    """``f(x) = g(sum_{j < n} <a, x(t_j)> dt)``."""
    a = _vec(a, dim)
    g, dg, d2g = _scalar_map(form)

    def mean(values, dt):
        return np.sum(_dot(a, values[..., :-1, :]), axis=-1) * dt

    def remaining(t, x):
        return x.grid.horizon - x.grid.time(x.grid.index(t))

    return Functional(
        lambda t, x: g(mean(x.values, x.grid.dt)), "average",
        vertical=lambda t, x, v: dg(mean(x.values, x.grid.dt)) * _dot(a, v) * remaining(t, x),
        second_vertical=lambda t, x, v, w: d2g(mean(x.values, x.grid.dt)) * _dot(a, v) * _dot(a, w) * remaining(t, x) ** 2,
        directional=lambda t, x, path: dg(mean(x.values, x.grid.dt)) * mean(path.values, x.grid.dt),
        params={"form": form, "dim": dim, "a": a.tolist()},
    )


def ou_terminal_phi(kappa: float, horizon: float, dim: int = 1, a=1.0, scheme_exact: bool = False) -> Functional:
    """Conditional mean ``<a, x(t)> exp(-rate (T - t))`` of ``<a, X(T)>`` for ``dX = -kappa X dt + B dW``.

    The rate is ``kappa``, or with ``scheme_exact`` the rate
    ``-log(1 - kappa dt) / dt`` that gives the Euler scheme's own mean
    ``(1 - kappa dt)^((T - t) / dt)`` on the grid of the path.
    """
    a = _vec(a, dim)

    def rate(grid):
        if not scheme_exact or kappa == 0:
            return kappa
        if not kappa * grid.dt < 1:
            raise ConfigError(f"kappa * dt = {kappa * grid.dt!r} must be below 1")
        return -math.log1p(-kappa * grid.dt) / grid.dt

    def scale(t, x):
        return math.exp(-rate(x.grid) * (horizon - t))

    return Functional(
        lambda t, x: _dot(a, _current(t, x)) * scale(t, x), "ou_terminal_phi",
        vertical=lambda t, x, v: np.broadcast_to(_dot(a, v) * scale(t, x), x.batch_shape) + 0.0,
        second_vertical=lambda t, x, v, w: np.zeros(x.batch_shape),
        left_time=lambda t, x: rate(x.grid) * _dot(a, _current(t, x)) * scale(t, x),
        params={"kappa": kappa, "horizon": horizon, "dim": dim, "a": a.tolist(), "scheme_exact": scheme_exact},
    )


def zero_drift_average_phi(dim: int = 1, a=1.0) -> Functional:
    """Conditional mean of the left-point average for driftless noise."""
    a = _vec(a, dim)

    def evaluate(t, x):
        k = x.grid.index(t)
        past = np.sum(_dot(a, x.values[..., :k, :]), axis=-1) * x.grid.dt
        return past + _dot(a, x.values[..., k, :]) * (x.grid.horizon - x.grid.time(k))

    def remaining(t, x):
        return x.grid.horizon - x.grid.time(x.grid.index(t))

    return Functional(
        evaluate, "zero_drift_average_phi",
        vertical=lambda t, x, v: np.broadcast_to(_dot(a, v) * remaining(t, x), x.batch_shape) + 0.0,
        second_vertical=lambda t, x, v, w: np.zeros(x.batch_shape),
        left_time=lambda t, x: np.zeros(x.batch_shape),
        params={"dim": dim, "a": a.tolist()},
    )


def _is_markovian(measure) -> bool:
    return measure.density is None and len(measure.atoms) == 1 and measure.atoms[0] == (0.0, 1.0)


def closed_form_phi(drift: ConvolutionDrift, f: Functional, scheme_exact: bool = False) -> Functional | None:
    """``phi = E f(X^{t,x})`` in closed form when the catalog knows it.

    Covered: ``terminal`` identity under a Markovian linear (or zero) drift,
    and ``average`` identity under the zero drift. ``scheme_exact`` returns
    the conditional mean of the Euler scheme rather than of the SDE.
    """
    form = f.params.get("form")
    dim, a = f.params.get("dim", 1), f.params.get("a", 1.0)
    if f.name == "terminal" and form == "identity":
        if drift.name == "zero":
            return ou_terminal_phi(0.0, drift.grid.horizon, dim, a)
        if drift.name == "linear" and _is_markovian(drift.measure):
            return ou_terminal_phi(drift.params["kappa"], drift.grid.horizon, dim, a, scheme_exact)
    if f.name == "average" and form == "identity" and drift.name == "zero":
        return zero_drift_average_phi(dim, a)
    return None


FUNCTIONALS = {
    "cylinder": (cylinder, "form=linear|square_norm|sin_decay|ou_phi, dim, a, rate, kappa, horizon"),
    "running_integral": (running_integral, "integrand=linear|square, dim, a, decay"),
    "terminal": (terminal, "form=identity|square|sin, dim, a"),
    "average": (average, "form=identity|square|sin, dim, a"),
}


def _diag(values):
    out = np.zeros(values.shape + values.shape[-1:])
    idx = np.arange(values.shape[-1])
    out[..., idx, idx] = values
    return out


def _diag3(values):
    out = np.zeros(values.shape + values.shape[-1:] * 2)
    idx = np.arange(values.shape[-1])
    out[..., idx, idx, idx] = values
    return out


def zero_drift(grid, measure=None, dim: int = 1) -> ConvolutionDrift:
    measure = RadonMeasure.dirac(grid.horizon) if measure is None else measure
    return ConvolutionDrift(
        lambda t, c: np.zeros(np.shape(c)), measure, grid,
        jacobian=lambda t, c: np.zeros(np.shape(c) + np.shape(c)[-1:]),
        hessian=lambda t, c: np.zeros(np.shape(c) + np.shape(c)[-1:] * 2),
        lipschitz=0.0, d1=0.0, d2=0.0, name="zero", params={"dim": dim},
    )


def linear_drift(grid, measure=None, kappa: float = 1.0, dim: int = 1) -> ConvolutionDrift:
    """``b(t, c) = -kappa c``; Markovian with the default measure."""
    measure = RadonMeasure.dirac(grid.horizon) if measure is None else measure
    k = abs(kappa)
    return ConvolutionDrift(
        lambda t, c: -kappa * c, measure, grid,
        jacobian=lambda t, c: _diag(np.full(np.shape(c), -kappa)),
        hessian=lambda t, c: np.zeros(np.shape(c) + np.shape(c)[-1:] * 2),
        lipschitz=k, d1=k, d2=0.0, name="linear", params={"kappa": kappa, "dim": dim},
    )


def delay_linear_drift(grid, measure=None, kappa: float = 1.0, delay: float | None = None, dim: int = 1) -> ConvolutionDrift:
    """``b(t, c) = -kappa c`` against a point delay (default ``T / 4``)."""
    if measure is None:
        delay = grid.horizon / 4 if delay is None else delay
        measure = RadonMeasure.dirac(grid.horizon, delay)
    drift = linear_drift(grid, measure, kappa, dim)
    return ConvolutionDrift(
        drift.outer, measure, grid, drift.jacobian, drift.hessian,
        drift.lipschitz, drift.d1, drift.d2, "delay_linear", {"kappa": kappa, "delay": delay, "dim": dim},
    )


def smooth_nonlinear_drift(grid, measure=None, kappa: float = 1.0, dim: int = 1) -> ConvolutionDrift:
    """``b(t, c) = kappa tanh(c)`` componentwise."""
    measure = RadonMeasure.dirac(grid.horizon) if measure is None else measure
    k = abs(kappa)

    def jac(t, c):
        th = np.tanh(c)
        return _diag(kappa * (1 - th * th))

    def hess(t, c):
        th = np.tanh(c)
        return _diag3(-2 * kappa * th * (1 - th * th))

    return ConvolutionDrift(
        lambda t, c: kappa * np.tanh(c), measure, grid, jac, hess,
        lipschitz=k, d1=k, d2=k * 4 / (3 * math.sqrt(3)), name="smooth_nonlinear",
        params={"kappa": kappa, "dim": dim},
    )


DRIFTS = {
    "zero": (zero_drift, "no parameters"),
    "linear": (linear_drift, "kappa; b = -kappa * conv(y)"),
    "delay_linear": (delay_linear_drift, "kappa, delay (default T/4); b = -kappa * y(t - delay)"),
    "smooth_nonlinear": (smooth_nonlinear_drift, "kappa; b = kappa * tanh(conv(y))"),
}

CHECKS = {
    "clark_ocone": "martingale representation residual (mean, RMS, integrand)",
    "contraction": "measured contraction ratios of psi against the factor",
    "feynman_kac": "Monte Carlo value of f against a closed form when available",
    "flow": "restart of the scheme at a later time reproduces the solution",
    "ito": "path-dependent Ito formula residual along simulated paths",
    "ito_convergence": "decay of the terminal Ito residual under grid refinement",
    "kolmogorov": "left time derivative plus generator of phi vanishes",
    "phi_suite": "gradient of phi by chain rule and finite differences, Kolmogorov and martingale checks",
    "sensitivities": "Neumann derivative of the solution map against finite differences",
    "tower": "phi(t', x) = E phi(t, X) by nested Monte Carlo",
}


def make_functional(name: str, params: dict | None = None) -> Functional:
    try:
        factory = FUNCTIONALS[name][0]
    except KeyError:
        raise ConfigError(f"unknown functional {name!r}; choose from {sorted(FUNCTIONALS)}") from None
    try:
        return factory(**(params or {}))
    except TypeError as err:
        raise ConfigError(f"functional {name!r}: {err}") from None


def make_drift(name: str, grid, measure=None, params: dict | None = None) -> ConvolutionDrift:
    try:
        factory = DRIFTS[name][0]
    except KeyError:
        raise ConfigError(f"unknown drift {name!r}; choose from {sorted(DRIFTS)}") from None
    try:
        return factory(grid, measure, **(params or {}))
    except TypeError as err:
        raise ConfigError(f"drift {name!r}: {err}") from None


def list_catalog() -> str:
    lines = ["drifts:"]
    lines += [f"  {name}: {DRIFTS[name][1]}" for name in sorted(DRIFTS)]
    lines.append("functionals:")
    lines += [f"  {name}: {FUNCTIONALS[name][1]}" for name in sorted(FUNCTIONALS)]
    lines.append("checks:")
    lines += [f"  {name}: {CHECKS[name]}" for name in sorted(CHECKS)]
    return "\n".join(lines) + "\n"
