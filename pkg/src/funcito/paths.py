"""Grid paths in a finite-dimensional Hilbert space.

A :class:`Path` stores node values of a function ``[0, T] -> R^N`` on a
uniform :class:`TimeGrid`. Values may carry leading batch dimensions, so an
ensemble of ``P`` trajectories is a single ``Path`` with values of shape
``(P, n_steps + 1, N)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .exceptions import DomainError, GridError, ShapeError

CONTINUOUS = "continuous"
STEP = "step"
_KINDS = (CONTINUOUS, STEP)

# relative slack when deciding that a time sits exactly on a node
_ALIGN_RTOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / n_steps`` on ``[0, T]``."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise DomainError(f"horizon must be positive, got {self.horizon!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError(f"n_steps must be a positive integer, got {self.n_steps!r}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def time(self, k: int) -> float:
        return k * self.dt

    def index(self, t: float, exact: bool = False) -> int:
        """Index of the node nearest to ``t``.

        With ``exact=True`` the time must already sit on a node.
        """
        t = float(t)
        tol = _ALIGN_RTOL * self.horizon
        if not (-tol <= t <= self.horizon + tol):
            raise DomainError(f"time {t!r} outside [0, {self.horizon!r}]")
        k = int(np.floor(t / self.dt + 0.5))
        k = min(max(k, 0), self.n_steps)
        if exact and abs(t - k * self.dt) > _ALIGN_RTOL * max(self.dt, abs(t)):
            raise GridError(f"time {t!r} is not a node of a grid with dt={self.dt!r}")
        return k

    def is_aligned(self, t: float) -> bool:
        try:
            self.index(t, exact=True)
        except (GridError, DomainError):
            return False
        return True

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * int(factor))

    def coarsening_factor(self, coarse: "TimeGrid") -> int:
        """Integer ``r`` with ``self.n_steps == r * coarse.n_steps``."""
        if not np.isclose(coarse.horizon, self.horizon, rtol=1e-12, atol=0.0):
            raise GridError("grids have different horizons")
        if self.n_steps % coarse.n_steps:
            raise GridError(
                f"grid with {coarse.n_steps} steps is not a coarsening of {self.n_steps} steps"
            )
        return self.n_steps // coarse.n_steps


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Orthonormal bases of ``H = R^N`` and ``U = R^M`` stored as columns."""

    dim_h: int
    dim_u: int
    h_basis: np.ndarray = None
    u_basis: np.ndarray = None

    def __post_init__(self):
        for name, dim in (("h_basis", self.dim_h), ("u_basis", self.dim_u)):
            if dim < 1:
                raise DomainError(f"dimension must be positive, got {dim}")
            basis = getattr(self, name)
            basis = np.eye(dim) if basis is None else np.array(basis, dtype=float)
            if basis.shape != (dim, dim):
                raise ShapeError(f"{name} must be {dim}x{dim}, got {basis.shape}")
            if not np.allclose(basis.T @ basis, np.eye(dim), rtol=0.0, atol=1e-12):
                raise DomainError(f"{name} is not orthonormal to 1e-12")
            basis.flags.writeable = False
            object.__setattr__(self, name, basis)


@dataclass(frozen=True, eq=False)
class Path:
    """Node values of a path on a uniform grid.

    ``kind`` controls evaluation between nodes: ``"continuous"`` paths are
    interpolated linearly, ``"step"`` paths are right-continuous and take the
    value of the left node.
    """

    grid: TimeGrid
    values: np.ndarray
    kind: str = CONTINUOUS
    _sup: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError(f"unknown path kind {self.kind!r}")
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim < 2 or values.shape[-2] != self.grid.n_steps + 1:
            raise ShapeError(
                f"expected values of shape (..., {self.grid.n_steps + 1}, N), got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise DomainError("path values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: TimeGrid, value, kind: str = CONTINUOUS) -> "Path":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        values = np.broadcast_to(value[..., None, :], value.shape[:-1] + (grid.n_steps + 1, value.shape[-1]))
        return cls(grid, values, kind)

    @classmethod
    def from_function(cls, grid: TimeGrid, fn, kind: str = CONTINUOUS) -> "Path":
        """Sample ``fn(t) -> R^N`` at every node."""
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in grid.nodes], dtype=float), kind)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[:-2]

    def with_values(self, values, kind: str | None = None) -> "Path":
        return Path(self.grid, values, self.kind if kind is None else kind)

    def __getitem__(self, item) -> "Path":
        """Select trajectories from a batched path."""
        if not self.batch_shape:
            raise ShapeError("path has no batch dimension")
        return Path(self.grid, self.values[item], self.kind)

    def node(self, k: int) -> np.ndarray:
        return self.values[..., k, :]

    def at(self, s: float) -> np.ndarray:
        """Value at time ``s`` using the kind's between-node convention."""
        s = float(s)
        if not (0.0 <= s <= self.grid.horizon * (1 + _ALIGN_RTOL)):
            raise DomainError(f"time {s!r} outside [0, {self.grid.horizon!r}]")
        pos = min(s / self.grid.dt, float(self.grid.n_steps))
        k = int(np.floor(pos))
        frac = pos - k
        if k >= self.grid.n_steps or frac <= _ALIGN_RTOL:
            return self.values[..., min(k, self.grid.n_steps), :]
        if 1.0 - frac <= _ALIGN_RTOL:
            return self.values[..., k + 1, :]
        if self.kind == STEP:
            return self.values[..., k, :]
        return (1.0 - frac) * self.values[..., k, :] + frac * self.values[..., k + 1, :]

    def sup_norm(self):
        """``max_k |x(t_k)|_2``; an array for batched paths."""
        if self._sup is None:
            object.__setattr__(self, "_sup", np.max(np.linalg.norm(self.values, axis=-1), axis=-1))
        return self._sup

    def refine(self, factor: int) -> "Path":
        """The same path on a grid ``factor`` times finer."""
        factor = int(factor)
        if factor == 1:
            return self
        fine = self.grid.refine(factor)
        left = self.values[..., :-1, :]
        right = self.values[..., 1:, :]
        frac = (np.arange(factor) / factor)[:, None]
        if self.kind == STEP:
            blocks = np.repeat(left[..., :, None, :], factor, axis=-2)
        else:
            blocks = left[..., :, None, :] + frac * (right - left)[..., :, None, :]
        blocks = blocks.reshape(self.batch_shape + (self.grid.n_steps * factor, self.dim))
        values = np.concatenate([blocks, self.values[..., -1:, :]], axis=-2)
        return Path(fine, values, self.kind)

    def coarsen(self, coarse: TimeGrid) -> "Path":
        """Restriction to the nodes of a coarser grid."""
        r = self.grid.coarsening_factor(coarse)
        return Path(coarse, self.values[..., ::r, :], self.kind)

    def __add__(self, other: "Path") -> "Path":
        _check_same_grid(self, other)
        kind = STEP if STEP in (self.kind, other.kind) else CONTINUOUS
        return Path(self.grid, self.values + other.values, kind)

    def __sub__(self, other: "Path") -> "Path":
        _check_same_grid(self, other)
        kind = STEP if STEP in (self.kind, other.kind) else CONTINUOUS
        return Path(self.grid, self.values - other.values, kind)

    def __mul__(self, scalar) -> "Path":
        return Path(self.grid, self.values * scalar, self.kind)

    __rmul__ = __mul__

    def __neg__(self) -> "Path":
        return Path(self.grid, -self.values, self.kind)

    def to_csv(self) -> str:
        """CSV text with header ``t,x_1,...,x_N`` and 17 significant digits."""
        if self.batch_shape:
            raise ShapeError("to_csv expects a single trajectory")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(self.dim)])
        for t, row in zip(self.grid.nodes, self.values):
            writer.writerow([format_float(t)] + [format_float(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, kind: str = CONTINUOUS) -> "Path":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if not header or header[0].strip() != "t":
            raise ShapeError("path CSV must start with a 't' column")
        data = np.array([[float(v) for v in row] for row in body if row])
        times = data[:, 0]
        grid = TimeGrid(times[-1], len(times) - 1)
        if not np.allclose(times, grid.nodes, rtol=0.0, atol=1e-12 * grid.horizon):
            raise GridError("path CSV times are not a uniform grid starting at 0")
        return cls(grid, data[:, 1:], kind)


def format_float(value) -> str:
    return format(float(value), ".17g")


def _check_same_grid(x: Path, y: Path) -> None:
    if x.grid != y.grid:
        raise GridError(f"paths live on different grids: {x.grid} vs {y.grid}")


def stop_path(x: Path, t: float) -> Path:
    """The stopped path ``s -> x(min(s, t))``."""
    k = x.grid.index(t)
    values = np.array(x.values)
    values[..., k + 1 :, :] = x.values[..., k : k + 1, :]
    return Path(x.grid, values, x.kind)


def bump_direction(t: float, v, grid: TimeGrid) -> Path:
    """Step path equal to 0 before ``t`` and ``v`` on ``[t, T]``.

    ``v`` may carry batch dimensions, giving one bump per trajectory.
    """
    k = grid.index(t)
    v = np.atleast_1d(np.asarray(v, dtype=float))
    values = np.zeros(v.shape[:-1] + (grid.n_steps + 1, v.shape[-1]))
    values[..., k:, :] = v[..., None, :]
    return Path(grid, values, STEP)


def seminorm(x: Path, measure) -> np.ndarray:
    """``|int x(s) nu(ds)|`` for a Radon measure ``nu`` on the path's grid."""
    weights = measure.node_weights(x.grid, x.kind)
    return np.linalg.norm(np.einsum("k,...kn->...n", weights, x.values), axis=-1)


def linear_interp(partition: TimeGrid, points, onto: TimeGrid | None = None) -> Path:
    """Piecewise-linear path through ``points`` placed on the partition nodes.

    The result lives on ``onto`` (a refinement of the partition), or on the
    partition itself.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.shape[-2] != partition.n_steps + 1:
        raise ShapeError(
            f"need {partition.n_steps + 1} points for the partition, got {points.shape[-2]}"
        )
    path = Path(partition, points, CONTINUOUS)
    if onto is None:
        return path
    return path.refine(onto.coarsening_factor(partition))


def weighted_norm(x: Path, lam: float):
    """``max_k exp(-lam t_k) |x(t_k)|``."""
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam!r}")
    return lambda_norm_values(x.values, x.grid, lam)


def lambda_norm_values(values: np.ndarray, grid: TimeGrid, lam: float):
    weights = np.exp(-lam * grid.nodes)
    return np.max(weights * np.linalg.norm(values, axis=-1), axis=-1)


def modulus_bound(x: Path, delta: float) -> float:
    """Empirical modulus of continuity ``w_x(delta)`` over the grid nodes."""
    lag = max(int(np.floor(delta / x.grid.dt + _ALIGN_RTOL)), 0)
    best = 0.0
    for j in range(1, lag + 1):
        diff = np.linalg.norm(x.values[..., j:, :] - x.values[..., :-j, :], axis=-1)
        best = max(best, float(np.max(diff)))
    return best


def stack(paths: Iterable[Path]) -> Path:
    """Batch single-trajectory paths sharing one grid."""
    paths = list(paths)
    grid = paths[0].grid
    for p in paths[1:]:
        _check_same_grid(paths[0], p)
    return Path(grid, np.stack([p.values for p in paths]), paths[0].kind)
