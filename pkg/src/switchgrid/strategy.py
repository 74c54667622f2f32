"""Switching/default regions from a value field, and Monte Carlo checks.

The simulated controller looks up the action at the nearest grid node for
the current mode at every grid time level, so it is exactly the extracted
discrete strategy applied to Euler-Maruyama paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ._threads import ordered_map
from .chain import DiscreteProblem, Grid, discretize
from .model import SwitchingModel
from .oracle import CONTINUE, DEFAULT, Policy, action_label, switch
from .solver import ValueField

__all__ = [
    "StrategyRegions",
    "PathResult",
    "MCEstimate",
    "SimulationError",
    "extract",
    "simulate_path",
    "estimate_J",
]

# discount level below which an infinite-horizon path is cut off
DISCOUNT_CUTOFF = 1e-12


class SimulationError(RuntimeError):
    pass


@dataclass
class StrategyRegions:
    actions: np.ndarray  # (m, levels, nodes) action codes, same encoding as Policy
    tol_action: float
    prefer_default: bool = True

    def label(self, i: int, level: int, node: int) -> str:
        return action_label(int(self.actions[i, level, node]))

    def as_policy(self) -> Policy:
        return Policy(self.actions)


def extract(
    field: ValueField,
    model: SwitchingModel,
    grid: Grid,
    tol_action: float = 1e-7,
    prefer_default: bool = True,
    problem: Optional[DiscreteProblem] = None,
) -> StrategyRegions:
    """Label each (mode, level, node) cell CONTINUE, DEFAULT or SWITCH(j).

    A cell continues when V_i exceeds its obstacle by more than
    ``tol_action``.  Otherwise the best switch target (smallest j on ties)
    is taken if it beats defaulting; a switch/default tie within
    ``tol_action`` goes to DEFAULT unless ``prefer_default`` is False.
    """
    problem = problem or discretize(model, grid)
    V = field.values
    levels = range(grid.steps) if field.finite else [0]
    m, X = model.m, grid.size
    acts = np.empty((m, len(levels), X), dtype=np.int64)
    for n in levels:
        lv = problem.levels[n]
        Vn = V[:, n] if field.finite else V
        cand = Vn[None, :] - lv.G
        jstar = np.argmax(cand, axis=1)
        s = np.max(cand, axis=1)
        d = -lv.F
        M = np.maximum(s, d)
        if prefer_default:
            take_switch = s > d + tol_action
        else:
            take_switch = s >= d - tol_action
        stop_action = np.where(take_switch, switch(0) + jstar, DEFAULT)
        acts[:, n] = np.where(Vn - M > tol_action, CONTINUE, stop_action)
    return StrategyRegions(acts, tol_action, prefer_default)


@dataclass
class PathResult:
    switch_times: list = field(default_factory=list)
    switch_from: list = field(default_factory=list)
    switch_to: list = field(default_factory=list)
    switch_costs: list = field(default_factory=list)   # discounted for infinite horizon
    default_time: Optional[float] = None
    default_cost: float = 0.0                           # discounted for infinite horizon
    accrual: float = 0.0
    terminal_time: float = 0.0
    payoff: float = 0.0
    clamped: bool = False
    nodes: list = field(default_factory=list)           # node at each decision epoch


@dataclass
class MCEstimate:
    mean: float
    stderr: float
    paths: int
    seed: int
    clamp_fraction: float = 0.0
    default_fraction: float = 0.0


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _plan(model: SwitchingModel, grid: Grid, dt_sim: Optional[float], max_time: Optional[float]):
    dt_sim = grid.dt if dt_sim is None else float(dt_sim)
    if not 0 < dt_sim <= grid.dt * (1 + 1e-12):
        raise SimulationError(f"dt_sim must lie in (0, grid dt = {grid.dt}]")
    ratio = int(round(grid.dt / dt_sim))
    if abs(ratio * dt_sim - grid.dt) > 1e-9 * grid.dt:
        raise SimulationError("grid dt must be an integer multiple of dt_sim")
    dt_sim = grid.dt / ratio
    if model.finite:
        epochs = grid.steps
        beta = 1.0
    else:
        beta = 1.0 / (1.0 + model.horizon.r * grid.dt)
        if max_time is None:
            epochs = math.ceil(math.log(DISCOUNT_CUTOFF) / math.log(beta))
        else:
            epochs = max(1, math.ceil(max_time / grid.dt))
    return dt_sim, ratio, epochs, beta


def _simulate_block(model, actions, grid, x0, i0, dt_sim, ratio, epochs, beta, seqs, record=False):
    P = len(seqs)
    k, d, m = model.k, model.d, model.m
    rngs = [np.random.default_rng(s) for s in seqs]
    X = np.tile(np.asarray(x0, dtype=float), (P, 1))
    mode = np.full(P, i0, dtype=np.int64)
    alive = np.ones(P, dtype=bool)
    payoff = np.zeros(P)
    accrual = np.zeros(P)
    defaulted = np.zeros(P, dtype=bool)
    clamped = np.zeros(P, dtype=bool)
    rows = np.arange(P)
    stationary = actions.shape[1] == 1 and not model.finite
    log = PathResult() if record else None
    chunk = 256
    Z = None
    total_steps = epochs * ratio
    sqdt = math.sqrt(dt_sim)

    for s in range(total_steps):
        if s % chunk == 0:
            n_draw = min(chunk, total_steps - s)
            Z = np.stack([r.standard_normal((n_draw, d)) for r in rngs], axis=1)  # (n_draw, P, d)
        t = s * dt_sim
        disc = beta ** (s / ratio)
        if s % ratio == 0:
            n = s // ratio
            level = 0 if stationary else n
            node = grid.nearest(X)
            if record:
                log.nodes.append(int(node[0]))
            G = model.g_at(t, X)
            Fv = model.F_at(t, X)
            for it in range(m):
                a = actions[mode, level, node]
                sw = alive & (a >= 2)
                if not sw.any():
                    break
                if it == m - 1:
                    raise SimulationError(f"more than {m - 1} chained switches at t={t}")
                tgt = np.where(sw, a - 2, mode)
                cost = np.where(sw, G[mode, tgt, rows], 0.0) * disc
                if record and sw[0]:
                    log.switch_times.append(t)
                    log.switch_from.append(int(mode[0]))
                    log.switch_to.append(int(tgt[0]))
                    log.switch_costs.append(float(cost[0]))
                payoff -= cost
                mode = tgt
            a = actions[mode, level, node]
            dflt = alive & (a == DEFAULT)
            if dflt.any():
                fcost = Fv[mode, rows] * disc
                payoff -= np.where(dflt, fcost, 0.0)
                if record and dflt[0]:
                    log.default_time = t
                    log.default_cost = float(fcost[0])
                defaulted |= dflt
                alive &= ~dflt
            if not alive.any():
                break
        psi = model.psi_at(t, X)[mode, rows]
        gain = np.where(alive, psi * dt_sim * disc, 0.0)
        payoff += gain
        accrual += gain
        b = model.drift_at(t, X)            # (k, P)
        sig = model.sigma_at(t, X)          # (k, d, P)
        dW = Z[s % chunk] * sqdt            # (P, d)
        X = X + b.T * dt_sim + np.einsum("kdp,pd->pk", sig, dW)
        if not np.isfinite(X).all() or not np.isfinite(payoff).all():
            raise SimulationError(f"non-finite state or payoff at t={t + dt_sim}")
        out = ~grid.contains(X)
        if out.any():
            clamped |= out & alive
            X = grid.clamp(X)

    if record:
        log.accrual = float(accrual[0])
        log.payoff = float(payoff[0])
        log.clamped = bool(clamped[0])
        if log.default_time is not None:
            log.terminal_time = log.default_time
        else:
            log.terminal_time = epochs * grid.dt
    return payoff, clamped, defaulted, log


def _actions_of(source) -> np.ndarray:
    return source.actions if hasattr(source, "actions") else np.asarray(source)


def _check_start(grid: Grid, x0, i0, m):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (grid.k,) or not grid.contains(x0)[0]:
        raise SimulationError(f"x0={list(x0)} is not inside the grid box")
    if not 0 <= i0 < m:
        raise SimulationError(f"start mode {i0} out of range")
    return x0


def simulate_path(
    model: SwitchingModel,
    regions: Union[StrategyRegions, Policy],
    grid: Grid,
    x0,
    i0: int,
    dt_sim: Optional[float] = None,
    seed=0,
    max_time: Optional[float] = None,
) -> PathResult:
    """One controlled Euler-Maruyama path with its full event log."""
    x0 = _check_start(grid, x0, i0, model.m)
    dt_sim, ratio, epochs, beta = _plan(model, grid, dt_sim, max_time)
    _, _, _, log = _simulate_block(
        model, _actions_of(regions), grid, x0, i0, dt_sim, ratio, epochs, beta,
        [_seed_sequence(seed)], record=True,
    )
    return log


def estimate_J(
    model: SwitchingModel,
    regions: Union[StrategyRegions, Policy],
    grid: Grid,
    x0,
    i0: int,
    paths: int,
    dt_sim: Optional[float] = None,
    seed: int = 0,
    max_time: Optional[float] = None,
    block: int = 5000,
) -> MCEstimate:
    """Mean payoff and standard error over ``paths`` independent paths.

    Path p draws from child p of ``SeedSequence(seed)``, so the estimate does
    not depend on how blocks are scheduled across threads.
    """
    if paths < 2:
        raise SimulationError("need at least 2 paths")
    x0 = _check_start(grid, x0, i0, model.m)
    dt_sim, ratio, epochs, beta = _plan(model, grid, dt_sim, max_time)
    acts = _actions_of(regions)
    seqs = np.random.SeedSequence(seed).spawn(paths)

    def run(lo):
        return _simulate_block(model, acts, grid, x0, i0, dt_sim, ratio, epochs, beta, seqs[lo:lo + block])

    parts = ordered_map(run, range(0, paths, block))
    payoff = np.concatenate([p[0] for p in parts])
    clamped = np.concatenate([p[1] for p in parts])
    defaulted = np.concatenate([p[2] for p in parts])
    return MCEstimate(
        mean=float(payoff.mean()),
        stderr=float(payoff.std(ddof=1) / math.sqrt(paths)),
        paths=paths,
        seed=seed,
        clamp_fraction=float(clamped.mean()),
        default_fraction=float(defaulted.mean()),
    )
