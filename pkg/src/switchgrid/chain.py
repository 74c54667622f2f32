"""Markov-chain approximation of the diffusion generator on a box grid.

Explicit upwind stencil, axis-aligned neighbours only.  At a face of the
box the second difference along that axis is dropped and drift pointing
out of the box is replaced by staying put, so every row stays a genuine
probability vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import SwitchingModel

__all__ = [
    "Grid",
    "ChainApprox",
    "ChainError",
    "build",
    "cfl_rate",
    "auto_steps",
    "auto_dt",
    "Level",
    "DiscreteProblem",
    "discretize",
]

ROW_TOL = 1e-12


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on [lo, hi]; ``steps`` is set for finite horizons."""

    lo: tuple
    hi: tuple
    n: tuple
    dt: float
    steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        if not (len(self.lo) == len(self.hi) == len(self.n)) or not self.lo:
            raise ChainError("lo, hi and n must have one entry per axis")
        for a, b, c in zip(self.lo, self.hi, self.n):
            if not a < b:
                raise ChainError(f"need lo < hi, got [{a}, {b}]")
            if c < 3:
                raise ChainError(f"need at least 3 nodes per axis, got {c}")
        if not self.dt > 0:
            raise ChainError(f"dt must be > 0, got {self.dt}")
        if self.steps is not None and self.steps < 1:
            raise ChainError("steps must be >= 1")

    @classmethod
    def finite(cls, lo, hi, n, T: float, steps: int) -> "Grid":
        return cls(lo, hi, n, T / steps, steps)

    @classmethod
    def infinite(cls, lo, hi, n, dt: float) -> "Grid":
        return cls(lo, hi, n, dt, None)

    @property
    def k(self) -> int:
        return len(self.n)

    @property
    def dx(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / (np.array(self.n) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(a, b, c) for a, b, c in zip(self.lo, self.hi, self.n)]

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (size, k), C order over the axes."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def index(self) -> np.ndarray:
        """Per-node integer multi-index, shape (size, k)."""
        return np.stack(np.unravel_index(np.arange(self.size), self.n), axis=1)

    @property
    def times(self) -> np.ndarray:
        if self.steps is None:
            return np.zeros(1)
        return np.arange(self.steps + 1) * self.dt

    def nearest(self, X: np.ndarray) -> np.ndarray:
        """Flat index of the nearest node for points X of shape (P, k)."""
        X = np.atleast_2d(X)
        idx = np.rint((X - np.array(self.lo)) / self.dx).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.n) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.n)

    def contains(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= np.array(self.lo)) & (X <= np.array(self.hi)), axis=1)

    def clamp(self, X: np.ndarray) -> np.ndarray:
        return np.clip(X, np.array(self.lo), np.array(self.hi))


@dataclass
class ChainApprox:
    """Transition kernel of one time level.

    Row ``x``: probability ``p_up[j, x]`` to node ``up[j, x]``, ``p_down[j, x]``
    to ``down[j, x]`` and ``p_stay[x]`` to itself.
    """

    dt: float
    p_stay: np.ndarray
    p_up: np.ndarray
    p_down: np.ndarray
    up: np.ndarray
    down: np.ndarray
    beta: Optional[float] = None

    @property
    def size(self) -> int:
        return self.p_stay.shape[0]

    def expected_next(self, field: np.ndarray) -> np.ndarray:
        """One-step conditional expectation; ``field`` has shape (..., size)."""
        out = self.p_stay * field
        for j in range(self.p_up.shape[0]):
            out = out + self.p_up[j] * field[..., self.up[j]]
            out = out + self.p_down[j] * field[..., self.down[j]]
        return out

    def row(self, node: int) -> dict:
        r = {node: float(self.p_stay[node])}
        for j in range(self.p_up.shape[0]):
            for tgt, p in ((self.up[j, node], self.p_up[j, node]), (self.down[j, node], self.p_down[j, node])):
                if p > 0:
                    r[int(tgt)] = r.get(int(tgt), 0.0) + float(p)
        return r

    def matrix(self) -> np.ndarray:
        """Dense transition matrix; meant for tiny grids only."""
        P = np.diag(self.p_stay.astype(float))
        rows = np.arange(self.size)
        for j in range(self.p_up.shape[0]):
            np.add.at(P, (rows, self.up[j]), self.p_up[j])
            np.add.at(P, (rows, self.down[j]), self.p_down[j])
        return P


def _diffusion(model: SwitchingModel, t: float, X: np.ndarray):
    b = model.drift_at(t, X)
    s = model.sigma_at(t, X)
    a = np.einsum("jqx,lqx->jlx", s, s)
    return b, a


def _bad_node(mask: np.ndarray, X: np.ndarray) -> str:
    idx = int(np.argmax(mask))
    return f"node {idx} at x={[float(v) for v in X[idx]]}"


def cfl_rate(model: SwitchingModel, grid: Grid, t: float) -> np.ndarray:
    """Per-node sum_j a_jj/dx_j^2 + |b_j|/dx_j; the kernel needs dt * rate <= 1."""
    X = grid.coords
    b, a = _diffusion(model, t, X)
    dx = grid.dx[:, None]
    diag = np.einsum("jjx->jx", a)
    return np.sum(diag / dx ** 2 + np.abs(b) / dx, axis=0)


def build(model: SwitchingModel, grid: Grid, t: float = 0.0) -> ChainApprox:
    if model.k != grid.k:
        raise ChainError(f"grid has {grid.k} axes, model has k={model.k}")
    X = grid.coords
    b, a = _diffusion(model, t, X)
    nan = np.isnan(b).any(axis=0) | np.isnan(a).any(axis=(0, 1))
    if nan.any():
        raise ChainError(f"NaN drift/volatility at t={t}, {_bad_node(nan, X)}")

    k = grid.k
    diag = np.einsum("jjx->jx", a)
    if k > 1:
        offd = a.copy()
        for j in range(k):
            offd[j, j] = 0.0
        scale = np.maximum(1.0, np.abs(diag).max(axis=0))
        cross = np.abs(offd).max(axis=(0, 1)) > 1e-12 * scale
        if cross.any():
            raise ChainError(
                "sigma sigma^T has off-diagonal entries, which this stencil does not "
                f"support; first at t={t}, {_bad_node(cross, X)}"
            )

    dx = grid.dx[:, None]
    rate = np.sum(diag / dx ** 2 + np.abs(b) / dx, axis=0)
    worst = int(np.argmax(rate))
    if grid.dt * rate[worst] > 1.0 + ROW_TOL:
        raise ChainError(
            f"CFL violated at t={t}, node {worst} x={[float(v) for v in X[worst]]}: "
            f"dt*rate = {grid.dt * rate[worst]:.6g} > 1; largest admissible dt is "
            f"{1.0 / rate[worst]:.6g}"
        )

    idx = grid.index
    strides = np.array([int(np.prod(grid.n[j + 1:])) for j in range(k)])
    flat = np.arange(grid.size)
    up = np.empty((k, grid.size), dtype=np.int64)
    down = np.empty_like(up)
    p_up = np.empty((k, grid.size))
    p_down = np.empty_like(p_up)
    for j in range(k):
        at_lo = idx[:, j] == 0
        at_hi = idx[:, j] == grid.n[j] - 1
        up[j] = np.where(at_hi, flat, flat + strides[j])
        down[j] = np.where(at_lo, flat, flat - strides[j])
        half = np.where(at_lo | at_hi, 0.0, diag[j] / (2.0 * dx[j] ** 2))
        p_up[j] = np.where(at_hi, 0.0, grid.dt * (half + np.maximum(b[j], 0.0) / dx[j]))
        p_down[j] = np.where(at_lo, 0.0, grid.dt * (half + np.maximum(-b[j], 0.0) / dx[j]))
    p_stay = 1.0 - p_up.sum(axis=0) - p_down.sum(axis=0)
    p_stay = np.where((p_stay < 0) & (p_stay > -ROW_TOL), 0.0, p_stay)

    beta = None
    if not model.finite:
        beta = 1.0 / (1.0 + model.horizon.r * grid.dt)
    chain = ChainApprox(grid.dt, p_stay, p_up, p_down, up, down, beta)
    check_rows(chain)
    return chain


def check_rows(chain: ChainApprox) -> None:
    if (chain.p_stay < 0).any() or (chain.p_up < 0).any() or (chain.p_down < 0).any():
        raise ChainError("negative transition probability")
    total = chain.p_stay + chain.p_up.sum(axis=0) + chain.p_down.sum(axis=0)
    if np.abs(total - 1.0).max() > ROW_TOL:
        raise ChainError("transition rows do not sum to one")


def _max_rate(model: SwitchingModel, grid_like: Grid, times) -> float:
    return max(float(cfl_rate(model, grid_like, float(t)).max()) for t in times)


def auto_steps(model: SwitchingModel, lo, hi, n, safety: float = 0.9) -> int:
    """Smallest step count (up to ``safety``) that satisfies the CFL bound at every level."""
    T = model.horizon.T
    probe = Grid(lo, hi, n, 1.0, None)
    timedep = model.time_dependent("dynamics")
    rate = _max_rate(model, probe, np.linspace(0, T, 65) if timedep else [0.0])
    steps = max(1, math.ceil(T * rate / safety))
    if timedep:
        while True:
            g = Grid.finite(lo, hi, n, T, steps)
            if _max_rate(model, g, g.times[:-1]) * g.dt <= 1.0:
                break
            steps = math.ceil(steps * 1.25)
    return steps


def auto_dt(model: SwitchingModel, lo, hi, n, safety: float = 0.9) -> float:
    rate = _max_rate(model, Grid(lo, hi, n, 1.0, None), [0.0])
    return safety / rate if rate > 0 else 1.0


@dataclass
class Level:
    t: float
    chain: ChainApprox
    psi: np.ndarray
    G: np.ndarray
    F: np.ndarray


@dataclass
class DiscreteProblem:
    """A model laid on a grid: per-level kernels and coefficient arrays.

    Finite horizon: ``levels[n]`` for n = 0..N-1.  Infinite: a single level.
    """

    model: SwitchingModel
    grid: Grid
    levels: list = field(default_factory=list)

    @property
    def finite(self) -> bool:
        return self.model.finite

    @property
    def beta(self) -> Optional[float]:
        return self.levels[0].chain.beta

    @property
    def psi_max(self) -> float:
        return max(float(np.abs(lv.psi).max()) for lv in self.levels)


def discretize(model: SwitchingModel, grid: Grid) -> DiscreteProblem:
    X = grid.coords
    if model.finite:
        if grid.steps is None:
            raise ChainError("finite-horizon model needs a grid with time steps")
        if not math.isclose(grid.steps * grid.dt, model.horizon.T, rel_tol=1e-12):
            raise ChainError(f"steps*dt = {grid.steps * grid.dt} does not match T = {model.horizon.T}")
        times = grid.times[:-1]
    else:
        if grid.steps is not None:
            raise ChainError("infinite-horizon model takes a grid without time steps")
        if model.time_dependent():
            raise ChainError("infinite-horizon coefficients must not depend on t")
        times = [0.0]

    shared = None if model.time_dependent("dynamics") else build(model, grid, 0.0)
    levels = []
    for t in times:
        t = float(t)
        chain = shared if shared is not None else build(model, grid, t)
        psi, G, F = model.psi_at(t, X), model.g_at(t, X), model.F_at(t, X)
        offd = ~np.eye(model.m, dtype=bool)
        for name, arr in (("psi", psi), ("g (off-diagonal pair)", G[offd]), ("F", F)):
            bad = ~np.isfinite(arr)
            if bad.any():
                pos = np.unravel_index(int(np.argmax(bad)), arr.shape)
                node = pos[-1]
                raise ChainError(
                    f"non-finite {name}{list(pos[:-1])} at t={t}, x={[float(v) for v in X[node]]}"
                )
        levels.append(Level(t, chain, psi, G, F))
    return DiscreteProblem(model, grid, levels)
