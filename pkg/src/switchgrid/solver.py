"""Discrete value functions of the switching system with default.

Finite horizon: backward induction where each time level resolves the
inter-connected obstacle by a short fixed point (``coupled``), or the
monotone Picard scheme over single-obstacle stopping problems (``picard``).
Infinite horizon: outer Picard loop, each pass solving m decoupled
stopping problems by value iteration.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .chain import DiscreteProblem, Grid, discretize
from .model import SwitchingModel, obstacle_field

__all__ = [
    "ValueField",
    "SolveDiagnostics",
    "SolverError",
    "coupled_step",
    "solve_finite",
    "solve_infinite",
    "check_complementarity",
    "complementarity_residuals",
    "upper_bound",
    "compare_resolutions",
    "refine_grid",
]

MONO_SLACK = 1e-12


class SolverError(RuntimeError):
    pass


@dataclass
class ValueField:
    """V[i, n, node] (finite horizon) or V[i, node] (infinite horizon)."""

    values: np.ndarray
    grid: Grid
    model_hash: str
    scheme: str
    iterations: int = 0
    residual: float = float("nan")

    @property
    def finite(self) -> bool:
        return self.values.ndim == 3

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def initial(self) -> np.ndarray:
        """Values at t = 0, shape (m, nodes)."""
        return self.values[:, 0] if self.finite else self.values

    def at(self, i: int, x) -> float:
        node = int(self.grid.nearest(np.asarray(x, dtype=float).reshape(1, -1))[0])
        return float(self.initial()[i, node])


@dataclass
class SolveDiagnostics:
    outer_iterations: int = 0
    inner_iterations: int = 0
    residual: float = float("nan")
    monotonicity_violations: int = 0
    pass_min_increments: list = field(default_factory=list)
    max_coupled_iterations: int = 0
    closure_shift: float = 0.0
    wall_time: float = 0.0

    def to_dict(self, with_time: bool = False) -> dict:
        out = {
            "outer_iterations": self.outer_iterations,
            "inner_iterations": self.inner_iterations,
            "residual": self.residual,
            "monotonicity_violations": self.monotonicity_violations,
            "min_pass_increment": min(self.pass_min_increments) if self.pass_min_increments else None,
            "max_coupled_iterations": self.max_coupled_iterations,
            "closure_shift": self.closure_shift,
        }
        if with_time:
            out["wall_time"] = self.wall_time
        return out


def coupled_step(C: np.ndarray, G: np.ndarray, F: np.ndarray):
    """Fixed point of V_i = max(C_i, -F_i, max_{j != i}(-g_ij + V_j)).

    C and F have shape (m, nodes), G shape (m, m, nodes) with +inf on the
    diagonal.  Returns (V, number of updates that changed V).  Positive
    switching costs rule out profitable cycles, so at most m-1 updates
    change anything.
    """
    m = C.shape[0]
    base = np.maximum(C, -F)
    V = base
    for ell in range(1, m + 1):
        new = np.maximum(base, np.max(V[None, :] - G, axis=1))
        if np.array_equal(new, V):
            return V, ell - 1
        V = new
    raise SolverError(
        f"obstacle fixed point still moving after {m} updates; switching costs "
        "must be strictly positive"
    )


def _check_finite(arr: np.ndarray, where: str):
    if not np.isfinite(arr).all():
        pos = np.unravel_index(int(np.argmax(~np.isfinite(arr))), arr.shape)
        raise SolverError(f"non-finite value at {where}, index {tuple(int(p) for p in pos)}")


def _continuation(problem: DiscreteProblem, n: int, V_next: np.ndarray) -> np.ndarray:
    lv = problem.levels[n]
    return lv.psi * lv.chain.dt + lv.chain.expected_next(V_next)


def solve_finite(
    model: SwitchingModel,
    grid: Grid,
    scheme: str = "coupled",
    tol: float = 1e-8,
    max_passes: int = 10_000,
    problem: Optional[DiscreteProblem] = None,
):
    """Backward induction for the finite-horizon system.  Returns (ValueField, SolveDiagnostics)."""
    if not model.finite:
        raise SolverError("solve_finite needs a finite-horizon model")
    if scheme not in ("coupled", "picard"):
        raise SolverError(f"unknown scheme {scheme!r}")
    start = time.perf_counter()
    problem = problem or discretize(model, grid)
    N, X, m = grid.steps, grid.size, model.m
    diag = SolveDiagnostics()

    if scheme == "coupled":
        V = np.zeros((m, N + 1, X))
        for n in range(N - 1, -1, -1):
            lv = problem.levels[n]
            C = _continuation(problem, n, V[:, n + 1])
            _check_finite(C, f"time level {n}")
            V[:, n], it = coupled_step(C, lv.G, lv.F)
            diag.max_coupled_iterations = max(diag.max_coupled_iterations, it)
        diag.outer_iterations = 1
    else:
        prev = None
        for p in range(max_passes):
            V = np.zeros((m, N + 1, X))
            for n in range(N - 1, -1, -1):
                lv = problem.levels[n]
                C = _continuation(problem, n, V[:, n + 1])
                _check_finite(C, f"pass {p}, time level {n}")
                if prev is None:
                    obstacle = -lv.F
                else:
                    obstacle = obstacle_field(prev[:, n], lv.G, lv.F)
                V[:, n] = np.maximum(C, obstacle)
            diag.outer_iterations = p + 1
            if prev is not None:
                inc = V - prev
                lowest = float(inc.min())
                diag.pass_min_increments.append(lowest)
                diag.monotonicity_violations += int((inc < -MONO_SLACK).sum())
                if float(np.abs(inc).max()) <= tol:
                    break
            prev = V
        else:
            raise SolverError(f"Picard scheme did not converge within {max_passes} passes")

    vf = ValueField(V, grid, model.hash, scheme, diag.outer_iterations)
    vf.residual = diag.residual = check_complementarity(vf, model, grid, problem)
    diag.wall_time = time.perf_counter() - start
    return vf, diag


def upper_bound(problem: DiscreteProblem) -> float:
    """max|psi| * (1 + r dt) / r: value of collecting the largest profit forever."""
    r = problem.model.horizon.r
    return problem.psi_max * (1.0 + r * problem.grid.dt) / r


def _stopping(chain, psi_dt, obstacle, start, inner_tol, max_inner):
    """Value iteration for W = max(O, psi dt + beta E[W]) from ``start``."""
    W = start
    beta = chain.beta
    for it in range(1, max_inner + 1):
        new = np.maximum(obstacle, psi_dt + beta * chain.expected_next(W))
        change = float(np.abs(new - W).max())
        W = new
        if change <= inner_tol:
            return W, it
    raise SolverError(f"value iteration did not reach {inner_tol:g} within {max_inner} sweeps")


def solve_infinite(
    model: SwitchingModel,
    grid: Grid,
    tol: float = 1e-8,
    max_outer: int = 10_000,
    init: str = "lower",
    max_inner: int = 10_000_000,
    problem: Optional[DiscreteProblem] = None,
):
    """Outer Picard loop over single-obstacle stopping problems.

    ``init="lower"`` starts from V = -F (pass 0 obstacle is -F alone) and
    the passes increase; ``init="upper"`` starts from the constant upper
    bound and the passes decrease.  Both converge to the same fixed point.
    """
    if model.finite:
        raise SolverError("solve_infinite needs an infinite-horizon model")
    if init not in ("lower", "upper"):
        raise SolverError(f"unknown init {init!r}")
    start = time.perf_counter()
    problem = problem or discretize(model, grid)
    lv = problem.levels[0]
    chain = lv.chain
    if not 0.0 < chain.beta < 1.0:
        raise SolverError(f"discount factor {chain.beta} outside (0, 1)")
    psi_dt = lv.psi * chain.dt
    diag = SolveDiagnostics()
    sign = 1.0 if init == "lower" else -1.0

    if init == "lower":
        prev = -lv.F.copy()
        obstacle = -lv.F
    else:
        prev = np.full_like(lv.F, upper_bound(problem))
        obstacle = obstacle_field(prev, lv.G, lv.F)

    for p in range(max_outer):
        # each pass warm-starts from the previous one, which is a sub- (or super-)
        # solution of the new stopping problem, so the iterates stay monotone
        V, inner = _stopping(chain, psi_dt, obstacle, prev, tol / 10.0, max_inner)
        _check_finite(V, f"outer pass {p}")
        diag.inner_iterations += inner
        diag.outer_iterations = p + 1
        inc = sign * (V - prev)
        diag.pass_min_increments.append(float(inc.min()))
        diag.monotonicity_violations += int((inc < -MONO_SLACK).sum())
        if p > 0 and float(np.abs(V - prev).max()) <= tol:
            prev = V
            break
        prev = V
        obstacle = obstacle_field(V, lv.G, lv.F)
    else:
        raise SolverError(
            f"outer loop did not converge within {max_outer} passes "
            f"(last change {float(np.abs(inc).max()):.3g})"
        )

    # The last pass used the previous pass in its obstacle, so the pairwise
    # inequalities V_i >= V_j - g_ij can be short by up to the last change.
    # Closing the obstacle once fixes that; it only raises V where the
    # inequality is short, and leaves the exact fixed point unchanged.
    closed, _ = coupled_step(prev, lv.G, lv.F)
    diag.closure_shift = float((closed - prev).max())
    prev = closed

    vf = ValueField(prev, grid, model.hash, f"picard-{init}", diag.outer_iterations)
    vf.residual = diag.residual = check_complementarity(vf, model, grid, problem)
    diag.wall_time = time.perf_counter() - start
    return vf, diag


def complementarity_residuals(field: ValueField, problem: DiscreteProblem) -> np.ndarray:
    """|min(V - M V, V - C)| at every (mode, level, node) before the horizon."""
    V = field.values
    if field.finite:
        out = np.empty_like(V[:, :-1])
        for n, lv in enumerate(problem.levels):
            C = _continuation(problem, n, V[:, n + 1])
            M = obstacle_field(V[:, n], lv.G, lv.F)
            out[:, n] = np.abs(np.minimum(V[:, n] - M, V[:, n] - C))
        return out
    lv = problem.levels[0]
    C = lv.psi * lv.chain.dt + lv.chain.beta * lv.chain.expected_next(V)
    M = obstacle_field(V, lv.G, lv.F)
    return np.abs(np.minimum(V - M, V - C))


def check_complementarity(
    field: ValueField,
    model: SwitchingModel,
    grid: Grid,
    problem: Optional[DiscreteProblem] = None,
) -> float:
    problem = problem or discretize(model, grid)
    return float(complementarity_residuals(field, problem).max())


def refine_grid(grid: Grid, factor: int = 2) -> Grid:
    """Split each cell ``factor`` ways; dt shrinks by factor**2 so the CFL ratio is kept."""
    n = tuple(factor * (c - 1) + 1 for c in grid.n)
    if grid.steps is None:
        return Grid.infinite(grid.lo, grid.hi, n, grid.dt / factor ** 2)
    T = grid.steps * grid.dt
    return Grid.finite(grid.lo, grid.hi, n, T, grid.steps * factor ** 2)


def _solve(model, grid, scheme, tol):
    if model.finite:
        return solve_finite(model, grid, scheme=scheme, tol=tol)
    return solve_infinite(model, grid, tol=tol)


def compare_resolutions(
    model: SwitchingModel,
    grid: Grid,
    x0,
    mode: int = 0,
    factor: int = 2,
    scheme: str = "coupled",
    tol: float = 1e-8,
) -> dict:
    """Solve on ``grid`` and on its refinement and fit a first-order error constant.

    With h = max dx + sqrt(dt) and V_h = V + C h, the difference of the two
    solves gives C = |V_coarse - V_fine| / (h_coarse - h_fine).
    """
    fine = refine_grid(grid, factor)
    out = {}
    for name, g in (("coarse", grid), ("fine", fine)):
        vf, _ = _solve(model, g, scheme, tol)
        h = float(g.dx.max() + math.sqrt(g.dt))
        out[name] = {"n": list(g.n), "dt": g.dt, "steps": g.steps, "h": h, "value": vf.at(mode, x0)}
    diff = out["coarse"]["value"] - out["fine"]["value"]
    out["difference"] = diff
    out["C"] = abs(diff) / (out["coarse"]["h"] - out["fine"]["h"])
    return out
