import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcito.exceptions import DomainError, GridError, ShapeError
from funcito.measures import RadonMeasure
from funcito.paths import (
    STEP,
    BasisSpec,
    Path,
    TimeGrid,
    bump_direction,
    linear_interp,
    modulus_bound,
    seminorm,
    stop_path,
    weighted_norm,
)

GRID = TimeGrid(1.0, 16)


def random_path(seed, grid=GRID, dim=2):
    rng = np.random.default_rng(seed)
    return Path(grid, rng.standard_normal((grid.n_steps + 1, dim)).cumsum(axis=0))


def test_grid_nodes_and_index():
    assert GRID.dt == 1 / 16
    assert GRID.nodes[-1] == 1.0
    assert GRID.index(0.25, exact=True) == 4
    with pytest.raises(GridError):
        GRID.index(0.3, exact=True)
    with pytest.raises(DomainError):
        GRID.index(1.5)


@pytest.mark.parametrize("horizon,n", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects_bad_arguments(horizon, n):
    with pytest.raises(DomainError):
        TimeGrid(horizon, n)


def test_path_rejects_wrong_shape_and_nan():
    with pytest.raises(ShapeError):
        Path(GRID, np.zeros((5, 1)))
    values = np.zeros((17, 1))
    values[3] = np.nan
    with pytest.raises(DomainError):
        Path(GRID, values)


def test_stop_at_horizon_is_identity():
    x = random_path(0)
    np.testing.assert_array_equal(stop_path(x, 1.0).values, x.values)


def test_stop_at_zero_is_constant():
    x = random_path(1)
    np.testing.assert_array_equal(stop_path(x, 0.0).values, np.broadcast_to(x.values[0], x.values.shape))


def test_stop_identity_path_at_half():
    x = Path.from_function(GRID, lambda t: t)
    np.testing.assert_array_equal(stop_path(x, 0.5).values[:, 0], np.minimum(GRID.nodes, 0.5))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 16), st.integers(0, 16), st.integers(0, 2**32 - 1))
def test_stopping_composes_to_the_earlier_time(i, j, seed):
    x = random_path(seed)
    s, t = GRID.time(i), GRID.time(j)
    both = stop_path(stop_path(x, s), t)
    np.testing.assert_allclose(both.values, stop_path(x, min(s, t)).values, rtol=0, atol=1e-12)


def test_dirac_seminorm_is_pointwise_norm():
    x = random_path(2)
    s = GRID.time(5)
    assert seminorm(x, RadonMeasure.dirac(1.0, s)) == pytest.approx(np.linalg.norm(x.node(5)), abs=1e-12)


def test_constant_path_seminorm():
    c = np.array([3.0, -4.0])
    nu = RadonMeasure(1.0, ((0.25, 0.5), (0.75, 1.5)))
    assert seminorm(Path.constant(GRID, c), nu) == pytest.approx(2.0 * 5.0, abs=1e-12)


def test_lebesgue_seminorm_of_identity():
    x = Path.from_function(TimeGrid(1.0, 256), lambda t: t)
    # trapezoid midpoints integrate a linear path exactly
    assert seminorm(x, RadonMeasure.lebesgue(1.0)) == pytest.approx(0.5, abs=1e-12)


def test_bump_at_zero_is_constant():
    v = np.array([1.0, 2.0])
    np.testing.assert_array_equal(bump_direction(0.0, v, GRID).values, np.broadcast_to(v, (17, 2)))


def test_bump_at_horizon_only_last_node():
    b = bump_direction(1.0, [2.0], GRID)
    assert b.kind == STEP
    assert np.all(b.values[:-1] == 0) and b.values[-1, 0] == 2.0


def test_bump_at_half_is_indicator():
    b = bump_direction(0.5, [1.0, 0.0], GRID)
    np.testing.assert_array_equal(b.values[:, 0], (GRID.nodes >= 0.5).astype(float))
    assert np.all(b.values[:, 1] == 0)


def test_interp_constant_points():
    partition = TimeGrid(1.0, 4)
    x = linear_interp(partition, np.full((5, 2), 1.5), onto=GRID)
    np.testing.assert_array_equal(x.values, np.full((17, 2), 1.5))


def test_interp_single_segment():
    w = np.array([2.0, -1.0])
    x = linear_interp(TimeGrid(2.0, 1), [[0.0, 0.0], w], onto=TimeGrid(2.0, 8))
    np.testing.assert_allclose(x.values, x.grid.nodes[:, None] * w / 2.0, rtol=0, atol=1e-15)


def test_interp_rejects_wrong_count():
    with pytest.raises(ShapeError):
        linear_interp(TimeGrid(1.0, 4), np.zeros((3, 1)))


@pytest.mark.parametrize("n_coarse", [2, 4, 8])
def test_interp_within_modulus(n_coarse):
    fine = TimeGrid(1.0, 64)
    x = Path.from_function(fine, lambda t: [np.sin(7 * t), abs(t - 0.3)])
    partition = TimeGrid(1.0, n_coarse)
    rebuilt = linear_interp(partition, x.coarsen(partition).values, onto=fine)
    err = np.max(np.linalg.norm(rebuilt.values - x.values, axis=-1))
    assert err <= 2 * modulus_bound(x, partition.dt) + 1e-12


def test_weighted_norm_constant():
    assert weighted_norm(Path.constant(GRID, [3.0, 4.0]), 2.0) == pytest.approx(5.0, abs=1e-12)


def test_weighted_norm_small_lambda_tends_to_sup():
    x = random_path(3)
    assert weighted_norm(x, 1e-12) == pytest.approx(np.max(x.sup_norm()), rel=1e-10)


def test_weighted_norm_cancels_exponential():
    lam, c = 3.0, np.array([1.0, -2.0])
    x = Path.from_function(GRID, lambda t: np.exp(lam * t) * c)
    assert weighted_norm(x, lam) == pytest.approx(np.linalg.norm(c), abs=1e-12)


def test_weighted_norm_needs_positive_lambda():
    with pytest.raises(DomainError):
        weighted_norm(random_path(0), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_weighted_norm_between_discounted_and_plain_sup(seed, lam):
    x = random_path(seed)
    sup = float(np.max(x.sup_norm()))
    assert np.exp(-lam) * sup - 1e-12 <= weighted_norm(x, lam) <= sup + 1e-12


def test_refine_then_coarsen_roundtrip():
    x = random_path(4)
    np.testing.assert_array_equal(x.refine(4).coarsen(GRID).values, x.values)


def test_step_path_evaluation_uses_left_node():
    x = Path(TimeGrid(1.0, 2), [[0.0], [1.0], [2.0]], STEP)
    assert x.at(0.25)[0] == 0.0
    assert Path(x.grid, x.values).at(0.25)[0] == pytest.approx(0.5)


def test_csv_roundtrip_is_exact():
    x = random_path(5)
    back = Path.from_csv(x.to_csv())
    np.testing.assert_array_equal(back.values, x.values)
    assert back.grid == x.grid


def test_basis_must_be_orthonormal():
    with pytest.raises(DomainError):
        BasisSpec(2, 2, u_basis=np.array([[1.0, 1.0], [0.0, 1.0]]))
