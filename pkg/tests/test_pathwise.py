import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcito.catalog import delay_linear_drift, linear_drift, smooth_nonlinear_drift, zero_drift
from funcito.exceptions import ConvergenceError, DomainError
from funcito.measures import RadonMeasure
from funcito.paths import Path, TimeGrid, stop_path
from funcito.pathwise import (
    ConvolutionDrift,
    PsiContext,
    contraction_factor,
    lambda_for_contraction,
    measured_contraction,
    picard_solve,
    psi_apply,
    solve_sde_pathwise,
)
from funcito.sde import CoefficientSet, integrate_constant_noise, sample_ensemble_noise, sample_noise, simulate

GRID = TimeGrid(1.0, 64)


def constant_drift(c):
    return ConvolutionDrift(lambda t, y: np.zeros_like(y) + c, RadonMeasure.dirac(1.0), GRID, lipschitz=0.0, name="constant")


def test_psi_without_drift_or_noise_stops_the_anchor():
    x = Path.from_function(GRID, lambda t: [np.sin(4 * t)])
    ctx = PsiContext(0.5, x, zero_drift(GRID))
    y = Path.from_function(GRID, lambda t: [t**3])
    np.testing.assert_array_equal(psi_apply(ctx, y).values, stop_path(x, 0.5).values)


def test_psi_with_constant_drift_is_linear_in_time():
    x = Path.constant(GRID, [0.7])
    ctx = PsiContext(0.0, x, constant_drift(2.0))
    np.testing.assert_allclose(psi_apply(ctx, x).values[:, 0], 0.7 + 2.0 * GRID.nodes, rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1])
def test_solution_is_a_fixed_point(seed):
    drift = smooth_nonlinear_drift(GRID, RadonMeasure(1.0, ((0.25, 0.5),), np.array([1.0])), kappa=1.0)
    ctx = PsiContext(0.25, Path.constant(GRID, [0.5]), drift, integrate_constant_noise([[0.4]], sample_noise(GRID, 1, seed)))
    sol = picard_solve(ctx, tol=1e-13).solution
    assert np.max(np.abs(psi_apply(ctx, sol).values - sol.values)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 50.0), st.floats(0.01, 10.0))
def test_contraction_factor_decreases_in_lambda(lam, step):
    assert contraction_factor(lam + step, 1.0, 1.0, 1.0) < contraction_factor(lam, 1.0, 1.0, 1.0)


def test_contraction_factor_value():
    assert contraction_factor(10.0, 1.0, 1.0, 1.0) == pytest.approx((1 - math.exp(-10)) / 10, rel=1e-15)
    assert contraction_factor(10.0, 1.0, 1.0, 1.0) == pytest.approx(0.0999955, abs=1e-7)


@pytest.mark.parametrize("lipschitz,tv", [(1.0, 1.0), (3.0, 2.0), (10.0, 1.5)])
def test_lambda_for_contraction_hits_target(lipschitz, tv):
    lam = lambda_for_contraction(0.5, lipschitz, tv, 1.0)
    assert contraction_factor(lam, lipschitz, tv, 1.0) <= 0.5 + 1e-9
    assert contraction_factor(lam * 0.99, lipschitz, tv, 1.0) > 0.5


def test_contraction_needs_positive_lambda():
    with pytest.raises(DomainError):
        contraction_factor(0.0, 1.0, 1.0, 1.0)


def test_zero_drift_converges_immediately():
    x = Path.constant(GRID, [1.0])
    W = integrate_constant_noise([[0.5]], sample_noise(GRID, 1, 0))
    result = picard_solve(PsiContext(0.0, x, zero_drift(GRID), W))
    assert result.iterations <= 2
    np.testing.assert_allclose(result.solution.values, x.values + W.values, rtol=0, atol=1e-15)


@pytest.mark.parametrize("n", [32, 64, 128])
def test_linear_ode(n):
    grid = TimeGrid(1.0, n)
    kappa, x0 = 1.5, 2.0
    sol = picard_solve(PsiContext(0.0, Path.constant(grid, [x0]), linear_drift(grid, kappa=kappa)), tol=1e-14).solution
    # left-point quadrature of the fixed point is the explicit Euler recursion
    np.testing.assert_allclose(sol.values[:, 0], x0 * (1 - kappa * grid.dt) ** np.arange(n + 1), rtol=1e-12)
    assert np.max(np.abs(sol.values[:, 0] - x0 * np.exp(-kappa * grid.nodes))) <= kappa**2 * x0 * grid.dt


def delay_ode_exact(t, kappa, delay):
    """Method-of-steps solution of y' = -kappa y(t - delay), y = 1 on [-delay, 0]."""
    total, j = 0.0, 0
    while (j - 1) * delay <= t:
        total += (-kappa) ** j * (t - (j - 1) * delay) ** j / math.factorial(j)
        j += 1
    return total


def test_delay_ode_exact_satisfies_the_equation():
    kappa, delay = 2.0, 0.25
    for t in (0.1, 0.3, 0.6, 0.95):
        h = 1e-6
        slope = (delay_ode_exact(t + h, kappa, delay) - delay_ode_exact(t - h, kappa, delay)) / (2 * h)
        lagged = delay_ode_exact(t - delay, kappa, delay) if t >= delay else 1.0
        assert slope == pytest.approx(-kappa * lagged, abs=1e-6)


def test_delay_ode_matches_method_of_steps():
    kappa, delay = 2.0, 0.25
    errs = []
    for n in (64, 128, 256):
        grid = TimeGrid(1.0, n)
        drift = delay_linear_drift(grid, RadonMeasure.dirac(1.0, delay), kappa=kappa)
        sol = picard_solve(PsiContext(0.0, Path.constant(grid, [1.0]), drift), tol=1e-14).solution
        exact = np.array([delay_ode_exact(t, kappa, delay) for t in grid.nodes])
        errs.append(np.max(np.abs(sol.values[:, 0] - exact)))
    assert errs[-1] <= 2 * kappa * grid.dt
    assert errs[0] / errs[-1] == pytest.approx(4.0, rel=0.15)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pathwise_agrees_with_euler_for_markovian_drift(seed):
    drift = smooth_nonlinear_drift(GRID, kappa=1.0)
    x = Path.constant(GRID, [0.5])
    noise = sample_noise(GRID, 1, seed)
    em = simulate(0.0, x, CoefficientSet.additive(drift, [[0.3]]), noise)
    pw = solve_sde_pathwise(0.0, x, drift, [[0.3]], noise, tol=1e-14)
    assert np.max(np.abs(em.values - pw.values)) <= 1e-12


def test_pathwise_agrees_with_euler_for_delay_and_density():
    measure = RadonMeasure(1.0, ((0.25, 0.5),), np.array([1.0, -0.5]))
    drift = linear_drift(GRID, measure, kappa=1.2)
    x = Path.constant(GRID, [1.0, -0.5])
    B = np.array([[0.3, 0.1], [0.0, 0.2]])
    noise = sample_ensemble_noise(GRID, 2, 3, 5)
    em = simulate(0.125, x, CoefficientSet.additive(drift, B), noise)
    pw = solve_sde_pathwise(0.125, x, drift, B, noise, tol=1e-14)
    assert np.max(np.abs(em.values - pw.values)) <= 1e-12


def test_without_noise_reduces_to_deterministic_solve():
    drift = smooth_nonlinear_drift(GRID, kappa=0.8)
    x = Path.constant(GRID, [0.5])
    pw = solve_sde_pathwise(0.0, x, drift, [[0.0]], sample_noise(GRID, 1, 0))
    det = picard_solve(PsiContext(0.0, x, drift)).solution
    np.testing.assert_allclose(pw.values, det.values, rtol=0, atol=1e-12)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_pathwise_flow_property(s):
    drift = delay_linear_drift(GRID, RadonMeasure.dirac(1.0, 0.25), kappa=1.0)
    noise = sample_noise(GRID, 1, 4)
    first = solve_sde_pathwise(0.0, Path.constant(GRID, [1.0]), drift, [[0.3]], noise, tol=1e-14)
    second = solve_sde_pathwise(s, first, drift, [[0.3]], noise, tol=1e-14)
    assert np.max(np.abs(first.values - second.values)) <= 1e-12


def test_batched_solve_matches_individual_solves():
    drift = smooth_nonlinear_drift(GRID, RadonMeasure.dirac(1.0, 0.125), kappa=1.0)
    x = Path.constant(GRID, [0.2])
    noise = sample_ensemble_noise(GRID, 1, 9, 4)
    batch = solve_sde_pathwise(0.0, x, drift, [[0.5]], noise, tol=1e-14)
    for i in range(4):
        single = solve_sde_pathwise(0.0, x, drift, [[0.5]], noise.select(i), tol=1e-14)
        np.testing.assert_allclose(batch.values[i], single.values, rtol=0, atol=1e-12)


@pytest.mark.parametrize("lam", [2.0, 5.0, 10.0])
@pytest.mark.parametrize("measure", [RadonMeasure.dirac(1.0), RadonMeasure.dirac(1.0, 0.25), RadonMeasure.lebesgue(1.0)])
def test_measured_contraction_below_factor(lam, measure):
    drift = linear_drift(GRID, measure, kappa=1.0)
    ctx = PsiContext(0.0, Path.constant(GRID, [0.0]), drift)
    ratios = measured_contraction(ctx, lam, 100, seed=1)
    assert np.max(ratios) <= contraction_factor(lam, 1.0, drift.total_variation, 1.0)


def test_picard_error_ratios_below_factor():
    drift = smooth_nonlinear_drift(GRID, RadonMeasure(1.0, ((0.0, 0.5), (0.25, 0.5))), kappa=1.0)
    ctx = PsiContext(0.0, Path.constant(GRID, [0.5]), drift, integrate_constant_noise([[0.3]], sample_noise(GRID, 1, 0)))
    result = picard_solve(ctx, lam=4.0, tol=1e-13)
    assert np.all(result.ratios() <= result.alpha * 1.05)
    assert result.diagnostics_csv().startswith("iteration,lambda_error,sup_error\n")


def test_picard_reports_non_convergence():
    drift = smooth_nonlinear_drift(GRID, kappa=1.0)
    with pytest.raises(ConvergenceError):
        picard_solve(PsiContext(0.0, Path.constant(GRID, [0.5]), drift, integrate_constant_noise([[1.0]], sample_noise(GRID, 1, 0))), max_iter=2)


def test_picard_rejects_non_contracting_lambda():
    with pytest.raises(DomainError):
        picard_solve(PsiContext(0.0, Path.constant(GRID, [0.5]), linear_drift(GRID, kappa=5.0)), lam=0.1)
