"""Monte Carlo certificates for the path-dependent Ito formula, the Kolmogorov
equation, the tower identity and the martingale representation of ``phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError, GridError
from .functionals import (
    DEFAULT_SCHEME,
    FDScheme,
    generator,
    left_time_derivative,
    trace_term,
    vertical_derivative,
)
from .pathwise import PsiContext, picard_solve
from .paths import Path, TimeGrid, bump_direction, format_float, stop_path
from .sde import (
    CoefficientSet,
    ItoProcessSpec,
    NoiseBundle,
    derive_seed,
    euler_maruyama,
    integrate_constant_noise,
    map_ensemble,
    sample_ensemble_noise,
    simulate,
)
from .sensitivities import DerivativeContext, first_derivative

MARTINGALE_ATOL = 1e-10


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error; the sum is exactly rounded so
    the value does not depend on the order of the trajectories."""

    value: float
    stderr: float
    n_paths: int
    seed: int | None = None
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_samples(cls, samples, seed=None) -> "MCEstimate":
        s = np.asarray(samples, dtype=float).ravel()
        n = s.size
        if n == 0:
            raise DomainError("no samples")
        mean = math.fsum(s) / n
        var = math.fsum((s - mean) ** 2) / (n - 1) if n > 1 else 0.0
        return cls(mean, math.sqrt(var / n), n, seed, s)


@dataclass
class ResidualReport:
    """Outcome of one check: a summary ``value`` compared against ``budget``.

    ``comparison`` is ``"le"`` (pass when value <= budget) or ``"ge"``.
    ``table`` holds equal-length columns for the per-check CSV.
    """

    check: str
    value: float
    budget: float
    residual: np.ndarray | float = 0.0
    params: dict = field(default_factory=dict)
    table: dict = field(default_factory=dict)
    comparison: str = "le"
    summary: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if not (math.isfinite(self.value) and math.isfinite(self.budget)):
            return False
        return self.value <= self.budget if self.comparison == "le" else self.value >= self.budget

    @property
    def maximum(self) -> float:
        return float(np.max(np.abs(self.residual)))

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.residual))))

    def verdict(self) -> dict:
        return {
            "check": self.check,
            "params": self.params,
            "value": float(self.value),
            "budget": float(self.budget),
            "pass": self.passed,
        }

    def to_csv(self) -> str:
        if not self.table:
            return "value,budget,pass\n" + f"{format_float(self.value)},{format_float(self.budget)},{self.passed}\n"
        names = list(self.table)
        cols = [np.asarray(self.table[c]).ravel() for c in names]
        lines = [",".join(names)]
        for row in zip(*cols):
            lines.append(",".join(_cell(v) for v in row))
        return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format_float(v)


def _terminal_samples(f):
    def reduce(X):
        return np.broadcast_to(np.asarray(f(X.grid.horizon, X), dtype=float), X.batch_shape).copy()

    return reduce


def feynman_kac(t: float, x: Path, f, coeffs: CoefficientSet, n_paths: int, seed: int, chunk: int = 8192) -> MCEstimate:
    """Monte Carlo ``E f(X^{t,x})`` with one noise stream per trajectory."""
    samples = map_ensemble(t, x, coeffs, seed, n_paths, _terminal_samples(f), chunk)
    return MCEstimate.from_samples(samples, seed)


class SampledPhi:
    """``phi(t, x)`` returned as one sample of ``f(X^{t,x})`` per Monte Carlo path.

    All evaluations share the same Brownian increments (common random
    numbers), held on a grid ``refine`` times finer than ``grid`` and summed
    down to whatever coarser grid the path lives on. Finite differences of
    this functional therefore produce per-path derivative samples.
    """

    vertical = None
    second_vertical = None
    left_time = None
    directional = None

    def __init__(self, f, coeffs: CoefficientSet, grid: TimeGrid, n_paths: int, seed: int, refine: int = 2):
        self.f = f
        self.coeffs = coeffs
        self.n_paths = n_paths
        self.seed = seed
        self.noise_grid = grid.refine(refine)
        self._noise = {self.noise_grid: sample_ensemble_noise(self.noise_grid, coeffs.dim_u, seed, n_paths)}
        factor = refine
        while factor > 1:
            factor //= 2
            g = grid.refine(factor) if factor > 1 else grid
            self._noise[g] = self._noise[self.noise_grid].coarsen(g)

    def noise_for(self, grid: TimeGrid) -> NoiseBundle:
        try:
            return self._noise[grid]
        except KeyError:
            return self._noise[self.noise_grid].coarsen(grid)

    def __call__(self, t, x: Path) -> np.ndarray:
        if x.batch_shape:
            raise DomainError("a sampled phi takes a single path")
        X = simulate(t, x, self.coeffs, self.noise_for(x.grid))
        return np.broadcast_to(np.asarray(self.f(x.grid.horizon, X), dtype=float), (self.n_paths,)).copy()

    def estimate(self, t, x: Path) -> MCEstimate:
        return MCEstimate.from_samples(self(t, x), self.seed)


def ito_residual(u, t_hat: float, Y: Path, coeffs: CoefficientSet, noise: NoiseBundle, mode: str = "quotient", scheme: FDScheme = DEFAULT_SCHEME, basis=None, tol: float = 1e-10) -> ResidualReport:
    """``u(t_k, X) - u(t_hat, Y) - sum_{j<k}`` of the Ito expansion terms along the scheme.

    Space terms (drift, trace, stochastic integral) are evaluated at the left
    point ``(t_j, X)``. The time term over ``[t_j, t_{j+1}]`` is the
    first-order left quotient with ``h = dt`` at ``t_{j+1}`` when ``mode`` is
    ``"quotient"``, or the left time derivative at ``t_{j+1}`` of the path
    frozen at ``t_j`` when ``mode`` is ``"derivative"`` (callbacks or
    Richardson per ``scheme``).
    """
    if mode not in ("quotient", "derivative"):
        raise DomainError(f"unknown mode {mode!r}")
    X = euler_maruyama(ItoProcessSpec(t_hat, Y), coeffs, noise)
    grid = X.grid
    coeffs = coeffs.on(grid)
    dt, n, k0 = grid.dt, grid.n_steps, grid.index(t_hat)
    batch = X.batch_shape
    residual = np.zeros(batch + (n + 1,))
    start = np.broadcast_to(np.asarray(u(grid.time(k0), Y), dtype=float), batch)
    acc = np.zeros(batch)
    dW = noise.increments
    quotient = FDScheme(eps=scheme.eps, h=dt, order="first", use_callbacks=False)
    for j in range(k0, n):
        tj, tn = grid.time(j), grid.time(j + 1)
        history = X.values[..., : j + 1, :]
        b = coeffs.drift(tj, history)
        phi = coeffs.diffusion(tj, history)
        if mode == "quotient":
            time_term = left_time_derivative(u, tn, X, quotient)
        else:
            time_term = left_time_derivative(u, tn, stop_path(X, tj), scheme)
        step = (time_term + vertical_derivative(u, tj, X, b, scheme)) * dt
        step = step + 0.5 * trace_term(u, tj, X, phi, basis, scheme) * dt
        step = step + vertical_derivative(u, tj, X, np.einsum("...nm,...m->...n", phi, dW[..., j, :]), scheme)
        acc = acc + step
        residual[..., j + 1] = np.asarray(u(tn, X), dtype=float) - start - acc
    value = float(np.max(np.abs(residual)))
    terminal = residual[..., -1]
    table = {"node": np.arange(n + 1), "t": grid.nodes, "max_abs_residual": np.max(np.abs(residual.reshape(-1, n + 1)), axis=0)}
    report = ResidualReport(
        "ito", value, tol, residual, {"mode": mode, "dt": dt, "n_paths": int(np.prod(batch, dtype=int))}, table,
    )
    report.summary["terminal_rms"] = float(np.sqrt(np.mean(terminal**2)))
    return report


def loglog_slope(steps, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(steps)``."""
    return float(np.polyfit(np.log(steps), np.log(values), 1)[0])


def ito_convergence(u, t_hat: float, Y: Path, coeffs: CoefficientSet, fine_noise: NoiseBundle, factors=(8, 4, 2, 1), min_slope: float = 0.4, **kw) -> ResidualReport:
    """Terminal RMS Ito residual on coarsenings of one Brownian ensemble."""
    dts, rms = [], []
    for r in factors:
        grid = TimeGrid(fine_noise.grid.horizon, fine_noise.grid.n_steps // r)
        report = ito_residual(u, t_hat, Y.coarsen(grid) if Y.grid != grid else Y, coeffs, fine_noise.coarsen(grid), **kw)
        dts.append(grid.dt)
        rms.append(report.summary["terminal_rms"])
    slope = loglog_slope(dts, rms)
    return ResidualReport(
        "ito_convergence", slope, min_slope, np.array(rms), {"factors": list(factors)},
        {"dt": np.array(dts), "terminal_rms": np.array(rms)}, comparison="ge",
    )


def kolmogorov_residual_exact(phi, coeffs: CoefficientSet, t: float, x: Path, scheme: FDScheme = DEFAULT_SCHEME, tol: float = 1e-6) -> ResidualReport:
    """``D^- phi + L phi`` at ``(t, x)`` for a deterministic ``phi``."""
    left = np.asarray(left_time_derivative(phi, t, x, scheme), dtype=float)
    gen = np.asarray(generator(phi, t, x, coeffs, scheme), dtype=float)
    value = float(np.max(np.abs(left + gen)))
    return ResidualReport(
        "kolmogorov_analytic", value, tol, left + gen, {"t": t, "mode": "analytic"},
        {"left_time": np.atleast_1d(left), "generator": np.atleast_1d(gen)},
    )


def kolmogorov_residual(f, coeffs: CoefficientSet, t: float, x: Path, fd_scheme: FDScheme = DEFAULT_SCHEME, n_paths: int = 10_000, seed: int = 0) -> ResidualReport:
    """``D^- phi + L phi`` for the Monte Carlo ``phi`` with budget ``3 se + C dt``.

    ``C dt`` is estimated as twice the coupled difference between the
    residuals on the grid of ``x`` and on its two-fold refinement.
    """
    phi = SampledPhi(f, coeffs, x.grid, n_paths, seed, refine=4)

    def samples(path):
        return np.asarray(left_time_derivative(phi, t, path, fd_scheme) + generator(phi, t, path, coeffs, fd_scheme), dtype=float)

    coarse = samples(x)
    fine = samples(x.refine(2))
    est = MCEstimate.from_samples(coarse, seed)
    gap = MCEstimate.from_samples(coarse - fine, seed)
    bias = 2.0 * abs(gap.value)
    value = abs(est.value)
    return ResidualReport(
        "kolmogorov_monte_carlo", value, 3.0 * est.stderr + bias, coarse,
        {"t": t, "mode": "monte_carlo", "n_paths": n_paths, "seed": seed, "dt": x.grid.dt},
        {"mean": [est.value], "stderr": [est.stderr], "refinement_gap": [gap.value]},
    )


def clark_ocone_residual(phi, coeffs: CoefficientSet, t_hat: float, Y: Path, noise: NoiseBundle, scheme: FDScheme = DEFAULT_SCHEME) -> ResidualReport:
    """``R(t_k) = phi(t_k, X) - phi(t_hat, Y) - sum_{j<k} d phi(t_j, X).(Phi_j dW_j)`` per trajectory.

    The verdict value is the worst normalised deviation of the ensemble mean
    of ``R(t_k)`` from zero, ``|mean| / (3 se + atol)``; it passes at 1.
    """
    X = euler_maruyama(ItoProcessSpec(t_hat, Y), coeffs, noise)
    grid = X.grid
    coeffs = coeffs.on(grid)
    n, k0 = grid.n_steps, grid.index(t_hat)
    batch = X.batch_shape
    residual = np.zeros(batch + (n + 1,))
    start = np.broadcast_to(np.asarray(phi(grid.time(k0), Y), dtype=float), batch)
    acc = np.zeros(batch)
    for j in range(k0, n):
        tj = grid.time(j)
        diffusion = coeffs.diffusion(tj, X.values[..., : j + 1, :])
        direction = np.einsum("...nm,...m->...n", diffusion, noise.increments[..., j, :])
        acc = acc + vertical_derivative(phi, tj, X, direction, scheme)
        residual[..., j + 1] = np.asarray(phi(grid.time(j + 1), X), dtype=float) - start - acc
    return _martingale_report(residual, grid, {"t_hat": t_hat, "dt": grid.dt, "n_paths": int(np.prod(batch, dtype=int))})


def _martingale_report(residual, grid, params) -> ResidualReport:
    flat = residual.reshape(-1, residual.shape[-1])
    means, errs = [], []
    for k in range(flat.shape[1]):
        est = MCEstimate.from_samples(flat[:, k])
        means.append(est.value)
        errs.append(est.stderr)
    means, errs = np.array(means), np.array(errs)
    score = float(np.max(np.abs(means) / (3 * errs + MARTINGALE_ATOL)))
    rms = np.sqrt(np.mean(flat**2, axis=0))
    report = ResidualReport(
        "clark_ocone", score, 1.0, residual, params,
        {"node": np.arange(grid.n_steps + 1), "t": grid.nodes, "mean": means, "stderr": errs, "rms": rms},
    )
    report.summary.update(terminal_rms=float(rms[-1]), terminal_mean=float(means[-1]), terminal_stderr=float(errs[-1]))
    return report


def clark_ocone_integrand(phi, t: float, x: Path, diffusion, scheme: FDScheme = DEFAULT_SCHEME) -> np.ndarray:
    """``d phi(t, x).(1_[t,T] Phi e'_m)`` for each noise coordinate ``m``."""
    diffusion = np.asarray(diffusion, dtype=float)
    return np.stack([np.asarray(vertical_derivative(phi, t, x, diffusion[..., :, m], scheme)) for m in range(diffusion.shape[-1])], axis=-1)


def clark_ocone_convergence(phi, coeffs: CoefficientSet, t_hat: float, Y: Path, fine_noise: NoiseBundle, factors=(2, 1), scheme: FDScheme = DEFAULT_SCHEME, target: float = 0.5, spread: float = 0.3) -> ResidualReport:
    """Ratio of terminal RMS residuals between successive grid halvings.

    Passes when every ratio lies within ``target * (1 +/- spread)``; the
    value reported is the largest relative deviation from ``target``.
    """
    dts, rms = [], []
    for r in factors:
        grid = TimeGrid(fine_noise.grid.horizon, fine_noise.grid.n_steps // r)
        Yc = Y.coarsen(grid) if Y.grid != grid else Y
        report = clark_ocone_residual(phi, coeffs, t_hat, Yc, fine_noise.coarsen(grid), scheme)
        dts.append(grid.dt)
        rms.append(report.summary["terminal_rms"])
    ratios = np.array(rms[1:]) / np.array(rms[:-1])
    value = float(np.max(np.abs(ratios / target - 1)))
    return ResidualReport(
        "clark_ocone_convergence", value, spread, ratios, {"factors": list(factors)},
        {"dt": np.array(dts), "terminal_rms": np.array(rms)},
    )


def tower_residual(t_prime: float, t: float, x: Path, f, coeffs: CoefficientSet, n_outer: int, n_inner: int, seed: int) -> ResidualReport:
    """``phi(t', x)`` directly against the mean of inner estimates of ``phi(t, X^{t',x})``."""
    if t_prime > t:
        raise DomainError(f"t'={t_prime!r} must not exceed t={t!r}")
    grid = x.grid
    direct = feynman_kac(t_prime, x, f, coeffs, n_outer * n_inner, derive_seed(seed, 0))
    outer = map_ensemble(t_prime, x, coeffs, derive_seed(seed, 1), n_outer, lambda X: X.values)
    anchors = Path(grid, outer[:, None, :, :])
    inc = sample_ensemble_noise(grid, coeffs.dim_u, derive_seed(seed, 2), n_outer * n_inner).increments
    noise = NoiseBundle(grid, inc.reshape((n_outer, n_inner) + inc.shape[1:]), derive_seed(seed, 2))
    X = simulate(t, anchors, coeffs, noise)
    inner = np.broadcast_to(np.asarray(f(grid.horizon, X), dtype=float), X.batch_shape).mean(axis=1)
    nested = MCEstimate.from_samples(inner, seed)
    combined = math.hypot(direct.stderr, nested.stderr)
    diff = abs(direct.value - nested.value)
    return ResidualReport(
        "tower", diff, 3 * combined + 1e-12, direct.value - nested.value,
        {"t_prime": t_prime, "t": t, "n_outer": n_outer, "n_inner": n_inner, "seed": seed},
        {"direct": [direct.value], "direct_stderr": [direct.stderr], "nested": [nested.value], "nested_stderr": [nested.stderr]},
    )


def _directional(f, solution: Path, direction: Path, eps: float = 1e-6):
    horizon = solution.grid.horizon
    if getattr(f, "directional", None) is not None:
        return np.asarray(f.directional(horizon, solution, direction), dtype=float)
    up = Path(solution.grid, solution.values + eps * direction.values)
    down = Path(solution.grid, solution.values - eps * direction.values)
    return (np.asarray(f(horizon, up)) - np.asarray(f(horizon, down))) / (2 * eps)


def chain_rule_gradient(f, drift, B, t: float, x: Path, v, noise: NoiseBundle, tol: float = 1e-13) -> np.ndarray:
    """Per-path samples of ``d f(X^{t,x}).(dLambda.(1_[t,T] v))`` by the Neumann series.

    ``x`` may carry leading batch axes that broadcast against the noise.
    """
    ctx = PsiContext(t, x, drift, integrate_constant_noise(B, noise))
    result = picard_solve(ctx, tol=tol)
    dctx = DerivativeContext.build(ctx, result.solution, result.lam)
    direction = first_derivative(dctx, bump_direction(t, v, x.grid), tol)
    return _directional(f, result.solution, direction)


def verify_phi_suite(f, drift, B, t: float, x: Path, n_paths: int = 4000, seed: int = 0, n_outer: int = 200, n_inner: int = 200, rel_tol: float = 1e-3, scheme: FDScheme = DEFAULT_SCHEME) -> list:
    """Gradient cross-check, Kolmogorov residual and martingale representation of
    ``phi = E f(X)`` for an additive-noise SDE with a convolution drift.

    The gradient of ``phi`` is computed by finite differences of the Monte
    Carlo ``phi`` and by the chain rule through the Neumann-series
    derivative of the pathwise solution, on the same noise.
    """
    grid = x.grid
    if drift.grid != grid:
        raise GridError("drift and path live on different grids")
    B = np.atleast_2d(np.asarray(B, dtype=float))
    coeffs = CoefficientSet.additive(drift, B, lipschitz=drift.lipschitz)
    phi = SampledPhi(f, coeffs, grid, n_paths, derive_seed(seed, 10))
    noise = phi.noise_for(grid)
    rows, worst = [], 0.0
    for l in range(x.dim):
        e = np.eye(x.dim)[l]
        fd = MCEstimate.from_samples(vertical_derivative(phi, t, x, e, scheme))
        chain = MCEstimate.from_samples(chain_rule_gradient(f, drift, B, t, x, e, noise))
        rel = abs(chain.value - fd.value) / max(abs(fd.value), 1e-12)
        worst = max(worst, rel)
        rows.append((l, chain.value, chain.stderr, fd.value, fd.stderr, rel))
    cols = list(zip(*rows))
    gradient = ResidualReport(
        "gradient_cross_check", worst, rel_tol, np.array(cols[5]), {"t": t, "n_paths": n_paths, "seed": seed},
        {"direction": np.array(cols[0]), "chain_rule": np.array(cols[1]), "chain_rule_stderr": np.array(cols[2]),
         "finite_difference": np.array(cols[3]), "finite_difference_stderr": np.array(cols[4]), "rel_err": np.array(cols[5])},
    )
    reports = [gradient]
    if t > 0:
        reports.append(kolmogorov_residual(f, coeffs, t, x, scheme, n_paths, derive_seed(seed, 11)))
    reports.append(phi_clark_ocone(f, drift, B, coeffs, t, x, n_paths, n_outer, n_inner, seed))
    return reports


def phi_clark_ocone(f, drift, B, coeffs, t_hat, Y, n_paths, n_outer, n_inner, seed) -> ResidualReport:
    """Terminal martingale residual with the integrand from the chain-rule gradient,
    averaged over ``n_inner`` inner solutions per outer path and step."""
    grid = Y.grid
    n, k0, dim = grid.n_steps, grid.index(t_hat), Y.dim
    start = feynman_kac(t_hat, Y, f, coeffs, n_paths, derive_seed(seed, 20))
    outer_noise = sample_ensemble_noise(grid, coeffs.dim_u, derive_seed(seed, 21), n_outer)
    X = simulate(t_hat, Y, coeffs, outer_noise)
    anchors = Path(grid, X.values[:, None, :, :])
    acc = np.zeros(n_outer)
    for j in range(k0, n):
        tj = grid.time(j)
        inc = sample_ensemble_noise(grid, coeffs.dim_u, derive_seed(seed, 22, j), n_outer * n_inner).increments
        inner = NoiseBundle(grid, inc.reshape((n_outer, n_inner) + inc.shape[1:]), derive_seed(seed, 22, j))
        grad = np.stack(
            [chain_rule_gradient(f, drift, B, tj, anchors, np.eye(dim)[l], inner).mean(axis=1) for l in range(dim)],
            axis=-1,
        )
        acc = acc + np.sum(grad * (outer_noise.increments[:, j, :] @ B.T), axis=-1)
    terminal = np.asarray(f(grid.horizon, X), dtype=float) - start.value - acc
    est = MCEstimate.from_samples(terminal)
    se = math.hypot(est.stderr, start.stderr)
    return ResidualReport(
        "clark_ocone", abs(est.value) / (3 * se + MARTINGALE_ATOL), 1.0, terminal,
        {"t_hat": t_hat, "n_outer": n_outer, "n_inner": n_inner, "seed": seed, "integrand": "chain_rule"},
        {"mean": [est.value], "stderr": [se], "rms": [float(np.sqrt(np.mean(terminal**2)))]},
    )
