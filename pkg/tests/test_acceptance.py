"""One test per acceptance criterion, each printing a single PASS/FAIL line."""

import math

import numpy as np
from scipy.stats import ortho_group

from funcito.catalog import (
    average,
    cylinder,
    delay_linear_drift,
    linear_drift,
    ou_terminal_phi,
    running_integral,
    smooth_nonlinear_drift,
    terminal,
    zero_drift,
    zero_drift_average_phi,
)
from funcito.cli import main
from funcito.config import bundled_configs
from funcito.functionals import NO_CALLBACKS, check_nonanticipativity, trace_term
from funcito.measures import RadonMeasure
from funcito.paths import BasisSpec, Path, TimeGrid, linear_interp, seminorm, stop_path
from funcito.pathwise import PsiContext, contraction_factor, measured_contraction, picard_solve, solve_sde_pathwise
from funcito.sde import CoefficientSet, flow_residual, integrate_constant_noise, sample_ensemble_noise, sample_noise, simulate
from funcito.sensitivities import (
    DerivativeContext,
    dense_first_derivative,
    fd_first_derivative,
    fd_second_derivative,
    first_derivative,
    second_derivative,
)
from funcito.verification import (
    clark_ocone_convergence,
    clark_ocone_integrand,
    clark_ocone_residual,
    feynman_kac,
    ito_convergence,
    ito_residual,
    kolmogorov_residual,
    kolmogorov_residual_exact,
)

SIGMA = 0.3
MEASURES = {
    "dirac_0": RadonMeasure.dirac(1.0),
    "dirac_T/4": RadonMeasure.dirac(1.0, 0.25),
    "lebesgue": RadonMeasure.lebesgue(1.0),
}


def additive(drift):
    return CoefficientSet.additive(drift, [[SIGMA]])


def rel_err(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def test_contraction_law(verdict):
    grid = TimeGrid(1.0, 64)
    W = integrate_constant_noise([[SIGMA]], sample_noise(grid, 1, 0))
    worst_measured, worst_picard = 0.0, 0.0
    for measure in MEASURES.values():
        for lam in (2.0, 5.0, 10.0):
            linear = linear_drift(grid, measure, kappa=1.0)
            alpha = contraction_factor(lam, 1.0, linear.total_variation, 1.0)
            ratios = measured_contraction(PsiContext(0.0, Path.constant(grid, [0.0]), linear), lam, 100, seed=1)
            worst_measured = max(worst_measured, float(np.max(ratios)) / alpha)
            smooth = smooth_nonlinear_drift(grid, measure, kappa=1.0)
            result = picard_solve(PsiContext(0.0, Path.constant(grid, [0.5]), smooth, W), lam=lam, tol=1e-12)
            worst_picard = max(worst_picard, float(np.max(result.ratios())) / result.alpha)
    ok = worst_measured <= 1.0 and worst_picard <= 1.05
    verdict("1 contraction law", ok, f"max measured/alpha={worst_measured:.6g} (<= 1), max picard/alpha={worst_picard:.6g} (<= 1.05)")


def test_markovian_reduction(verdict):
    grid = TimeGrid(1.0, 256)
    x0 = 0.5
    drift = smooth_nonlinear_drift(grid, RadonMeasure.dirac(1.0), kappa=1.0)
    x = Path.constant(grid, [x0])
    noise = sample_ensemble_noise(grid, 1, 21, 20)
    em = simulate(0.0, x, additive(drift), noise)
    pw = solve_sde_pathwise(0.0, x, drift, [[SIGMA]], noise, tol=1e-14)
    gap = float(np.max(np.abs(em.values[..., -1, :] - pw.values[..., -1, :])))
    budget = 5 * grid.dt * (1 + abs(x0))
    verdict("2 markovian reduction", gap <= budget, f"terminal gap={gap:.3g} budget={budget:.3g}")


def test_ou_closed_form(verdict):
    grid = TimeGrid(1.0, 256)
    est = feynman_kac(0.0, Path.constant(grid, [1.0]), terminal(), additive(linear_drift(grid, kappa=1.0)), 100_000, 22)
    gap = abs(est.value - math.exp(-1.0))
    budget = 3 * est.stderr + 0.01
    verdict("3 OU closed form", gap <= budget, f"|estimate - e^-1|={gap:.3g} budget={budget:.3g}")


def test_ito_formula(verdict):
    grid = TimeGrid(1.0, 32)
    coeffs = additive(linear_drift(grid, kappa=1.0))
    noise = sample_ensemble_noise(grid, 1, 23, 50)
    linear = ito_residual(cylinder("linear"), 0.0, Path.constant(grid, [1.0]), coeffs, noise)
    fine = TimeGrid(1.0, 512)
    fine_noise = sample_ensemble_noise(fine, 1, 24, 300)
    smooth = ito_convergence(
        cylinder("sin_decay", rate=1.0), 0.0, Path.constant(fine, [1.0]), additive(linear_drift(fine, kappa=1.0)), fine_noise, factors=(8, 4, 2, 1)
    )
    ok = linear.value <= 1e-10 and smooth.value >= 0.4
    verdict("4 ito formula", ok, f"linear residual={linear.value:.3g} (<= 1e-10), smooth rms slope={smooth.value:.3f} (>= 0.4)")


def test_kolmogorov(verdict):
    grid = TimeGrid(1.0, 32)
    ou, driftless = additive(linear_drift(grid, kappa=1.0)), additive(zero_drift(grid))
    x = Path.from_function(grid, lambda s: [1.0 + 0.5 * np.sin(3 * s)])
    exact = max(
        max(kolmogorov_residual_exact(ou_terminal_phi(1.0, 1.0), ou, t, x).value, kolmogorov_residual_exact(zero_drift_average_phi(), driftless, t, x).value)
        for t in (0.25, 0.5, 0.75)
    )
    mc = [kolmogorov_residual(terminal(), ou, 0.5, x, n_paths=4000, seed=25), kolmogorov_residual(average(), driftless, 0.5, x, n_paths=4000, seed=26)]
    ok = exact <= 1e-6 and all(r.passed for r in mc)
    detail = ", ".join(f"mc={r.value:.3g}/{r.budget:.3g}" for r in mc)
    verdict("5 kolmogorov residual", ok, f"callback residual={exact:.3g} (<= 1e-6), {detail}")


def test_clark_ocone(verdict):
    grid = TimeGrid(1.0, 32)
    driftless = additive(zero_drift(grid))
    x = Path.from_function(grid, lambda s: [np.sin(s)])
    integrand_gap = max(
        abs(clark_ocone_integrand(zero_drift_average_phi(), grid.time(k), x, [[SIGMA]], NO_CALLBACKS)[0] - SIGMA * (1.0 - grid.time(k)))
        for k in range(grid.n_steps + 1)
    )
    noise = sample_ensemble_noise(grid, 1, 27, 10_000)
    report = clark_ocone_residual(zero_drift_average_phi(), driftless, 0.0, Path.constant(grid, [1.0]), noise)
    mean, se = report.summary["terminal_mean"], report.summary["terminal_stderr"]
    fine = TimeGrid(1.0, 128)
    halving = clark_ocone_convergence(zero_drift_average_phi(), additive(zero_drift(fine)), 0.0, Path.constant(fine, [1.0]), sample_ensemble_noise(fine, 1, 28, 2000))
    ok = integrand_gap <= 1e-6 and abs(mean) <= 3 * se and halving.passed
    verdict(
        "6 clark-ocone",
        ok,
        f"integrand gap={integrand_gap:.3g} (<= 1e-6), |mean|={abs(mean):.3g} 3se={3 * se:.3g}, rms ratios={np.round(halving.residual, 3).tolist()} (0.5 +/- 30%)",
    )


def test_sensitivities(verdict):
    grid = TimeGrid(1.0, 32)
    W = integrate_constant_noise([[SIGMA]], sample_noise(grid, 1, 29))
    v = Path.from_function(grid, lambda s: [np.cos(3 * s)])
    ones = Path.constant(grid, [1.0])
    first = second = dense = 0.0
    for measure in MEASURES.values():
        for t in (0.0, 0.25, 0.5):
            dctx = DerivativeContext.build(PsiContext(t, Path.constant(grid, [0.5]), smooth_nonlinear_drift(grid, measure, kappa=1.0), W))
            neumann = first_derivative(dctx, v).values
            first = max(first, rel_err(neumann, fd_first_derivative(dctx, v).values))
            dense = max(dense, float(np.max(np.abs(neumann - dense_first_derivative(dctx, v).values))))
            if measure.atoms:
                second = max(second, rel_err(second_derivative(dctx, v, ones).values, fd_second_derivative(dctx, v, ones).values))
    ok = first <= 1e-4 and second <= 1e-3 and dense <= 1e-10
    verdict("7 sensitivities", ok, f"first rel={first:.3g} (<= 1e-4), second rel={second:.3g} (<= 1e-3), dense gap={dense:.3g} (<= 1e-10)")


def test_structural_exactness(verdict):
    grid = TimeGrid(1.0, 64)
    delay = delay_linear_drift(grid, RadonMeasure.dirac(1.0, 0.25), kappa=1.5)
    coeffs = additive(delay)
    x = Path.constant(grid, [1.0])
    noise = sample_ensemble_noise(grid, 1, 30, 8)
    flow = max(flow_residual(0.0, x, s, coeffs, noise) for s in (0.25, 0.5, 0.75))

    # non-anticipativity of the scheme: swapping noise after step k leaves nodes <= k untouched
    single = sample_noise(grid, 1, 31)
    inc = np.array(single.increments)
    inc[40:] = sample_noise(grid, 1, 32).increments[40:]
    before = simulate(0.0, x, coeffs, single)
    after = simulate(0.0, x, coeffs, type(single)(grid, inc, 0))
    scheme_leak = float(np.max(np.abs(before.values[:41] - after.values[:41])))
    functional_leak = max(check_nonanticipativity(f, 20, 33, grid, dim=2) for f in (cylinder("sin_decay", dim=2), running_integral("square", dim=2)))

    rng = np.random.default_rng(34)
    phi = rng.standard_normal((2, 3))
    u = cylinder("sin_decay", dim=2, a=[1.0, -0.5], rate=0.5)
    xs = Path(grid, rng.standard_normal((65, 2)).cumsum(axis=0) * 0.1)
    q = ortho_group.rvs(3, random_state=34)
    trace_gap = abs(trace_term(u, 0.5, xs, phi, BasisSpec(2, 3)) - trace_term(u, 0.5, xs, phi, BasisSpec(2, 3, u_basis=q)))

    algebra = 0.0
    for i, j in ((8, 40), (40, 8), (0, 64), (64, 64)):
        s, t = grid.time(i), grid.time(j)
        algebra = max(algebra, float(np.max(np.abs(stop_path(stop_path(xs, s), t).values - stop_path(xs, min(s, t)).values))))
    partition = TimeGrid(1.0, 8)
    rebuilt = linear_interp(partition, xs.coarsen(partition).values, onto=grid)
    algebra = max(algebra, float(np.max(np.abs(rebuilt.coarsen(partition).values - xs.coarsen(partition).values))))
    algebra = max(algebra, abs(seminorm(xs, RadonMeasure.dirac(1.0, grid.time(20))) - float(np.linalg.norm(xs.node(20)))))
    algebra = max(algebra, abs(seminorm(Path.constant(grid, [3.0, -4.0]), RadonMeasure(1.0, ((0.25, 0.5), (0.75, 1.5)))) - 10.0))

    ok = flow == 0.0 and scheme_leak == 0.0 and functional_leak == 0.0 and trace_gap <= 1e-8 and algebra <= 1e-12
    verdict(
        "8 structural exactness",
        ok,
        f"flow={flow:.3g}, scheme leak={scheme_leak:.3g}, functional leak={functional_leak:.3g}, trace gap={trace_gap:.3g} (<= 1e-8), algebra={algebra:.3g} (<= 1e-12)",
    )


def test_reproducibility(verdict, tmp_path, capsys):
    mismatched, codes = [], []
    for name in bundled_configs():
        first, second = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        codes += [main(["run", name, "--out", str(first)]), main(["run", name, "--out", str(second)])]
        files = sorted(p.name for p in first.iterdir())
        if files != sorted(p.name for p in second.iterdir()):
            mismatched.append(f"{name}: file sets differ")
        mismatched += [f"{name}/{f}" for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    capsys.readouterr()
    ok = not mismatched and codes == [0] * len(codes)
    verdict("9 reproducibility", ok, f"configs={bundled_configs()}, exit codes={codes}, differing files={mismatched or 'none'}")
