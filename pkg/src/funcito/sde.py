"""Noise generation and Euler-Maruyama for path-dependent SDEs.

Coefficients are non-anticipative by construction: at step ``k`` they receive
only the history array ``values[..., :k+1, :]``, i.e. the node values of the
solution stopped at ``t_k``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .exceptions import DivergenceError, DomainError, GridError, ShapeError
from .paths import Path, TimeGrid, stop_path

DIVERGENCE_FACTOR = 1e6


def derive_seed(seed: int, *labels: int) -> int:
    """A 64-bit seed for a labelled sub-experiment of ``seed``."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(v) for v in labels))
    return int(seq.generate_state(1, np.uint64)[0])


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FUNCITO_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Drift ``b(t, history) -> (..., N)`` and diffusion ``Phi(t, history) -> (..., N, M)``.

    The declared constants mirror the standing Lipschitz/growth and
    derivative-bound assumptions; they are metadata, not enforced.
    """

    drift: Callable
    diffusion: Callable
    dim_h: int
    dim_u: int
    lipschitz: float | None = None
    drift_lipschitz: float | None = None
    drift_d1: float | None = None
    drift_d2: float | None = None

    @classmethod
    def additive(cls, drift, B, **constants) -> "CoefficientSet":
        """Coefficients with constant diffusion matrix ``B``."""
        B = np.atleast_2d(np.asarray(B, dtype=float))
        B.flags.writeable = False
        dim_h, dim_u = B.shape
        if drift is None:
            drift = ZeroDrift(dim_h)
        return cls(drift, ConstantDiffusion(B), dim_h, dim_u, **constants)

    def on(self, grid: TimeGrid) -> "CoefficientSet":
        """The same coefficients for paths on ``grid`` (grid-bound drifts are rebound)."""
        rebind = getattr(self.drift, "on", None)
        if rebind is None or getattr(self.drift, "grid", None) == grid:
            return self
        return replace(self, drift=rebind(grid))


class ZeroDrift:
    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, t, history):
        return np.zeros(history.shape[:-2] + (self.dim,))


class ConstantDiffusion:
    def __init__(self, B):
        self.matrix = np.asarray(B, dtype=float)

    def __call__(self, t, history):
        return self.matrix


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Brownian increments ``(..., n_steps, M)`` on a grid.

    ``stream`` is the stream id of the first trajectory; batched bundles hold
    consecutive streams.
    """

    grid: TimeGrid
    increments: np.ndarray
    seed: int
    stream: int = 0

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim < 2 or inc.shape[-2] != self.grid.n_steps:
            raise ShapeError(f"increments must be (..., {self.grid.n_steps}, M), got {inc.shape}")
        inc.flags.writeable = False
        object.__setattr__(self, "increments", inc)

    @property
    def dim(self) -> int:
        return self.increments.shape[-1]

    @property
    def n_paths(self) -> int:
        return int(np.prod(self.increments.shape[:-2], dtype=int))

    def coarsen(self, coarse: TimeGrid) -> "NoiseBundle":
        """Increments of the same Brownian path on a coarser grid."""
        r = self.grid.coarsening_factor(coarse)
        inc = self.increments.reshape(self.increments.shape[:-2] + (coarse.n_steps, r, self.dim)).sum(axis=-2)
        return NoiseBundle(coarse, inc, self.seed, self.stream)

    def select(self, item) -> "NoiseBundle":
        return NoiseBundle(self.grid, self.increments[item], self.seed, self.stream)


def _stream_normals(seed: int, stream: int, size) -> np.ndarray:
    # counter-based: the stream id occupies the top counter word
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=[0, 0, 0, int(stream)])
    return np.random.Generator(bitgen).standard_normal(size)


def sample_noise(grid: TimeGrid, dim_u: int, seed: int, stream: int = 0) -> NoiseBundle:
    """Increments for one trajectory, reproducible from ``(seed, stream)``."""
    if dim_u < 1:
        raise DomainError("noise dimension must be at least 1")
    z = _stream_normals(seed, stream, (grid.n_steps, dim_u))
    return NoiseBundle(grid, z * np.sqrt(grid.dt), int(seed), int(stream))


def sample_ensemble_noise(grid: TimeGrid, dim_u: int, seed: int, n_paths: int, first_stream: int = 0) -> NoiseBundle:
    """Increments for trajectories ``first_stream .. first_stream + n_paths - 1``."""
    if dim_u < 1:
        raise DomainError("noise dimension must be at least 1")
    z = np.empty((n_paths, grid.n_steps, dim_u))
    for i in range(n_paths):
        z[i] = _stream_normals(seed, first_stream + i, (grid.n_steps, dim_u))
    return NoiseBundle(grid, z * np.sqrt(grid.dt), int(seed), int(first_stream))


def integrate_constant_noise(B, noise: NoiseBundle) -> Path:
    """The path ``W^B(t_k) = sum_{j<k} B dW_j``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[-1] != noise.dim:
        raise ShapeError(f"B has {B.shape[-1]} columns but noise has dimension {noise.dim}")
    steps = np.einsum("nm,...km->...kn", B, noise.increments)
    zero = np.zeros(steps.shape[:-2] + (1, B.shape[0]))
    return Path(noise.grid, np.concatenate([zero, np.cumsum(steps, axis=-2)], axis=-2))


@dataclass(frozen=True, eq=False)
class ItoProcessSpec:
    """Start time and initial path; optional raw per-step integrands.

    With ``drift_steps`` ``(..., n, N)`` and ``diffusion_steps`` ``(..., n, N, M)``
    the process is the plain Ito sum of those integrands instead of being
    induced by a coefficient set.
    """

    start: float
    initial: Path
    drift_steps: np.ndarray | None = None
    diffusion_steps: np.ndarray | None = None


def euler_maruyama(spec: ItoProcessSpec, coeffs: CoefficientSet | None, noise: NoiseBundle) -> Path:
    """Explicit scheme with left-point coefficients evaluated on the stopped history."""
    grid = spec.initial.grid
    if noise.grid != grid:
        raise GridError(f"noise grid {noise.grid} differs from path grid {grid}")
    if coeffs is not None:
        coeffs = coeffs.on(grid)
    k0 = grid.index(spec.start)
    init = spec.initial.values
    n, dim = grid.n_steps, spec.initial.dim
    batch = np.broadcast_shapes(init.shape[:-2], noise.increments.shape[:-2])
    X = np.empty(batch + (n + 1, dim))
    X[...] = init
    X[..., k0 + 1 :, :] = X[..., k0 : k0 + 1, :]
    bound = DIVERGENCE_FACTOR * (1.0 + float(np.max(spec.initial.sup_norm())))
    dW = noise.increments
    raw = spec.drift_steps is not None or spec.diffusion_steps is not None
    for k in range(k0, n):
        t = grid.time(k)
        if raw:
            b = 0.0 if spec.drift_steps is None else spec.drift_steps[..., k, :]
            phi = None if spec.diffusion_steps is None else spec.diffusion_steps[..., k, :, :]
        else:
            history = X[..., : k + 1, :]
            b = coeffs.drift(t, history)
            phi = coeffs.diffusion(t, history)
        step = X[..., k, :] + b * grid.dt
        if phi is not None:
            step = step + np.einsum("...nm,...m->...n", phi, dW[..., k, :])
        X[..., k + 1, :] = step
        size = np.linalg.norm(step, axis=-1)
        bad = ~(size <= bound)
        if np.any(bad):
            where = np.argwhere(bad)
            trajectory = tuple(int(i) for i in where[0]) if where.ndim > 1 and where.shape[1] else None
            raise DivergenceError(
                f"trajectory diverged at step {k + 1} (t={grid.time(k + 1)!r})"
                + (f", trajectory {trajectory}" if trajectory else ""),
                step=k + 1,
                trajectory=trajectory,
            )
    return Path(grid, X)


def simulate(t: float, x: Path, coeffs: CoefficientSet, noise: NoiseBundle) -> Path:
    return euler_maruyama(ItoProcessSpec(t, x), coeffs, noise)


def simulate_chunked(t: float, x: Path, coeffs: CoefficientSet, noise: NoiseBundle, reduce: Callable, chunk: int = 8192) -> np.ndarray:
    """Apply ``reduce(paths) -> (P_chunk, ...)`` chunk by chunk, in trajectory order.

    Keeps memory bounded for large ensembles; with ``FUNCITO_THREADS > 1``
    chunks run on a thread pool and are reassembled in fixed order.
    """
    total = noise.increments.shape[0]
    bounds = [(i, min(i + chunk, total)) for i in range(0, total, chunk)]

    def run(span):
        a, b = span
        try:
            return reduce(simulate(t, x, coeffs, noise.select(slice(a, b))))
        except DivergenceError as err:
            local = err.trajectory[0] if err.trajectory else 0
            raise DivergenceError(
                f"trajectory {a + local} (stream {noise.stream + a + local}) diverged at step {err.step}",
                step=err.step,
                trajectory=a + local,
            ) from err

    workers = worker_count()
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(span) for span in bounds]
    return np.concatenate(parts, axis=0)


def map_ensemble(t: float, x: Path, coeffs: CoefficientSet, seed: int, n_paths: int, reduce: Callable, chunk: int = 8192, first_stream: int = 0) -> np.ndarray:
    """``reduce`` applied to ``n_paths`` solutions from ``(t, x)``, one stream per trajectory.

    Noise is generated chunk by chunk so memory stays bounded; results are
    concatenated in trajectory order whatever the worker count.
    """
    if n_paths < 1:
        raise DomainError("n_paths must be at least 1")
    grid = x.grid
    bounds = [(a, min(a + chunk, n_paths)) for a in range(0, n_paths, chunk)]

    def run(span):
        a, b = span
        noise = sample_ensemble_noise(grid, coeffs.dim_u, seed, b - a, first_stream + a)
        try:
            return np.asarray(reduce(simulate(t, x, coeffs, noise)))
        except DivergenceError as err:
            local = err.trajectory[0] if err.trajectory else 0
            raise DivergenceError(
                f"trajectory {a + local} (seed {seed}, stream {first_stream + a + local}) diverged at step {err.step}",
                step=err.step,
                trajectory=a + local,
            ) from err

    workers = worker_count()
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(span) for span in bounds]
    return np.concatenate(parts, axis=0)


def stopped_coordinates(X: Path, partition: TimeGrid) -> list:
    """``[X stopped at t_2, ..., X stopped at t_n, X]`` for the partition nodes ``t_1 = 0 < ... < t_n = T``."""
    X.grid.coarsening_factor(partition)
    nodes = partition.nodes
    return [stop_path(X, t) for t in nodes[1:]] + [X]


def partition_coefficients(s: float, b_s, phi_s, partition: TimeGrid):
    """Slot ``i`` carries ``1_[0, t_{i+1})(s) b_s``; the last slot uses the closed interval."""
    b_s = np.asarray(b_s, dtype=float)
    phi_s = np.asarray(phi_s, dtype=float)
    nodes = partition.nodes
    active = np.append(s < nodes[1:], s <= nodes[-1]).astype(float)
    b_pi = active[:, None] * b_s
    phi_pi = active[:, None, None] * phi_s
    return b_pi, phi_pi


def flow_residual(t: float, x: Path, s: float, coeffs: CoefficientSet, noise: NoiseBundle) -> float:
    """Sup-distance between the solution from ``(t, x)`` and its restart at ``s``."""
    if s < t:
        raise DomainError(f"restart time {s!r} precedes start {t!r}")
    first = simulate(t, x, coeffs, noise)
    second = simulate(s, first, coeffs, noise)
    return float(np.max(np.abs(first.values - second.values)))
