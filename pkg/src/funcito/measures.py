"""Radon measures on [0, T] and history convolutions against them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import ConfigError, DomainError, GridError
from .paths import CONTINUOUS, STEP, Path, TimeGrid


@dataclass(frozen=True, eq=False)
class RadonMeasure:
    """Weighted Dirac atoms plus a piecewise-constant density.

    The density holds one value per cell of a uniform partition of
    ``[0, horizon]`` into ``len(density)`` cells. On a finer grid each value
    is repeated over the sub-cells.
    """

    horizon: float
    atoms: tuple = ()
    density: np.ndarray | None = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon!r}")
        atoms = tuple((float(t), float(w)) for t, w in self.atoms)
        tol = 1e-9 * self.horizon
        for t, w in atoms:
            if not (-tol <= t <= self.horizon + tol):
                raise DomainError(f"atom at {t!r} lies outside [0, {self.horizon!r}]")
            if not math.isfinite(w):
                raise DomainError(f"atom at {t!r} has non-finite weight")
        object.__setattr__(self, "atoms", atoms)
        if self.density is not None:
            density = np.atleast_1d(np.array(self.density, dtype=float))
            if density.ndim != 1 or not np.all(np.isfinite(density)):
                raise DomainError("density must be a finite 1-d array")
            density.flags.writeable = False
            object.__setattr__(self, "density", density)

    @classmethod
    def dirac(cls, horizon: float, at: float = 0.0, weight: float = 1.0) -> "RadonMeasure":
        return cls(horizon, ((at, weight),))

    @classmethod
    def lebesgue(cls, horizon: float, scale: float = 1.0) -> "RadonMeasure":
        return cls(horizon, (), np.array([scale]))

    @classmethod
    def from_config(cls, horizon: float, entries) -> "RadonMeasure":
        """Build from ``{type: dirac, at, weight}`` / ``{type: density, values}`` entries."""
        atoms, density = [], None
        for i, entry in enumerate(entries):
            kind = entry.get("type")
            if kind == "dirac":
                atoms.append((float(entry["at"]), float(entry.get("weight", 1.0))))
            elif kind == "density":
                values = np.atleast_1d(np.asarray(entry["values"], dtype=float))
                density = values if density is None else _add_densities(density, values)
            else:
                raise ConfigError(f"measure entry {i}: unknown type {kind!r}")
        return cls(horizon, tuple(atoms), density)

    def __add__(self, other: "RadonMeasure") -> "RadonMeasure":
        if not math.isclose(self.horizon, other.horizon):
            raise DomainError("measures live on different intervals")
        if self.density is None:
            density = other.density
        elif other.density is None:
            density = self.density
        else:
            density = _add_densities(self.density, other.density)
        return RadonMeasure(self.horizon, self.atoms + other.atoms, density)

    def density_on(self, grid: TimeGrid) -> np.ndarray:
        """Density value for each cell of ``grid`` (zeros if there is none)."""
        if self.density is None:
            return np.zeros(grid.n_steps)
        cells = len(self.density)
        if grid.n_steps % cells:
            raise GridError(f"density with {cells} cells does not refine onto {grid.n_steps} steps")
        return np.repeat(self.density, grid.n_steps // cells)

    def check_aligned(self, grid: TimeGrid) -> None:
        for t, _ in self.atoms:
            if not grid.is_aligned(t):
                raise GridError(f"atom at {t!r} is not a node of the grid (dt={grid.dt!r})")
        self.density_on(grid)

    def node_weights(self, grid: TimeGrid, kind: str = CONTINUOUS) -> np.ndarray:
        """Weights ``q_k`` with ``int x dnu = sum_k q_k x(t_k)`` on the grid."""
        self.check_aligned(grid)
        q = np.zeros(grid.n_steps + 1)
        for t, w in self.atoms:
            q[grid.index(t, exact=True)] += w
        cell = self.density_on(grid) * grid.dt
        if kind == STEP:
            q[:-1] += cell
        else:
            q[:-1] += 0.5 * cell
            q[1:] += 0.5 * cell
        return q

    def plan(self, grid: TimeGrid, kind: str = CONTINUOUS) -> "ConvolutionPlan":
        return _plan(self, grid, kind)


def total_variation(measure: RadonMeasure) -> float:
    """``sum |w_i| + sum |d_c| * cell width``."""
    tv = sum(abs(w) for _, w in measure.atoms)
    if measure.density is not None:
        tv += float(np.sum(np.abs(measure.density))) * measure.horizon / len(measure.density)
    return tv


def _add_densities(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = math.lcm(len(a), len(b))
    return np.repeat(a, n // len(a)) + np.repeat(b, n // len(b))


class ConvolutionPlan:
    """The map ``y -> (k -> int y~(t_k - s) mu(ds))`` compiled for one grid.

    ``y~`` is the history extension (constant ``y(0)`` before time 0). Mid-cell
    values of the density quadrature follow the path kind: linear
    interpolation for continuous paths, the left node for step paths.
    """

    def __init__(self, measure: RadonMeasure, grid: TimeGrid, kind: str):
        measure.check_aligned(grid)
        self.grid = grid
        self.kind = kind
        self.lags = np.array([grid.index(t, exact=True) for t, _ in measure.atoms], dtype=int)
        self.weights = np.array([w for _, w in measure.atoms], dtype=float)
        n = grid.n_steps
        self.has_density = measure.density is not None and np.any(measure.density != 0)
        self.matrix = np.zeros((n + 1, n + 1))
        for j, w in zip(self.lags, self.weights):
            rows = np.arange(n + 1)
            np.add.at(self.matrix, (rows, np.maximum(rows - j, 0)), w)
        if self.has_density:
            self.density_matrix = _density_matrix(measure.density_on(grid) * grid.dt, kind)
            self.matrix += self.density_matrix
        self.matrix.flags.writeable = False

    def at(self, k: int, history: np.ndarray) -> np.ndarray:
        """Convolution at node ``k`` given node values ``0..k`` (or more)."""
        out = np.zeros(history.shape[:-2] + history.shape[-1:])
        for j, w in zip(self.lags, self.weights):
            out = out + w * history[..., max(k - j, 0), :]
        if self.has_density:
            out = out + np.einsum("m,...mn->...n", self.density_matrix[k, : k + 1], history[..., : k + 1, :])
        return out

    def all(self, values: np.ndarray) -> np.ndarray:
        """Convolution at every node for full-grid values ``(..., n+1, N)``."""
        rows = np.arange(self.grid.n_steps + 1)
        out = np.zeros(values.shape)
        for j, w in zip(self.lags, self.weights):
            out = out + w * values[..., np.maximum(rows - j, 0), :]
        if self.has_density:
            out = out + self.density_matrix @ values
        return out


def _density_matrix(cell_mass: np.ndarray, kind: str) -> np.ndarray:
    n = len(cell_mass)
    mat = np.zeros((n + 1, n + 1))
    tails = np.concatenate([np.cumsum(cell_mass[::-1])[::-1], [0.0]])
    for k in range(n + 1):
        # cells c < k have midpoint lag landing inside [0, t_k]
        c = np.arange(k)
        left = k - c - 1
        if kind == STEP:
            np.add.at(mat[k], left, cell_mass[c])
        else:
            np.add.at(mat[k], left, 0.5 * cell_mass[c])
            np.add.at(mat[k], left + 1, 0.5 * cell_mass[c])
        mat[k, 0] += tails[k]
    return mat


@lru_cache(maxsize=64)
def _plan(measure, grid, kind):
    # measures hash by identity, grids by value
    return ConvolutionPlan(measure, grid, kind)


@dataclass(frozen=True, eq=False)
class ExtendedPath:
    """A path continued to ``[-T, T]`` by its initial value."""

    base: Path

    def __call__(self, r: float) -> np.ndarray:
        horizon = self.base.grid.horizon
        if not (-horizon * (1 + 1e-9) <= r <= horizon * (1 + 1e-9)):
            raise DomainError(f"time {r!r} outside [-{horizon!r}, {horizon!r}]")
        if r < 0:
            return self.base.node(0)
        return self.base.at(r)


def extend_history(x: Path) -> ExtendedPath:
    return ExtendedPath(x)


def convolve_history(x: Path, t: float, measure: RadonMeasure) -> np.ndarray:
    """``int x~(t - s) mu(ds)`` at a grid time ``t``."""
    k = x.grid.index(t)
    return measure.plan(x.grid, x.kind).at(k, x.values)
