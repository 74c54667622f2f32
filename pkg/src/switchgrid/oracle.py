"""Brute-force certification on micro instances.

Every cycle-free Markov policy on the grid is enumerated and evaluated by
exact forward propagation of the state distribution over the same chain the
solver uses.  No dynamic-programming maximisation is involved, so agreement
with the solver is an independent check of its recursions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._threads import ordered_map
from .chain import DiscreteProblem

__all__ = [
    "CONTINUE",
    "DEFAULT",
    "switch",
    "action_label",
    "Policy",
    "PolicyError",
    "OracleError",
    "OracleResult",
    "evaluate_policy",
    "evaluate_policies",
    "enumerate_policies",
    "random_policy",
    "truncation_bound",
]

CONTINUE = 0
DEFAULT = 1
ENUM_CAP = 10 ** 7


def switch(j: int) -> int:
    return 2 + j


def action_label(code: int) -> str:
    """'C', 'D' or 'S:<j>' with a 1-based target mode."""
    if code == CONTINUE:
        return "C"
    if code == DEFAULT:
        return "D"
    return f"S:{code - 1}"


class PolicyError(ValueError):
    pass


class OracleError(ValueError):
    pass


@dataclass
class Policy:
    """Action code per (mode, level, node).

    Finite horizon: one level per time step.  Infinite horizon: a single
    stationary level.
    """

    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        m = self.actions.shape[0]
        for i in range(m):
            a = self.actions[i]
            if (a < 0).any() or (a >= m + 2).any() or (a == switch(i)).any():
                raise PolicyError(f"invalid action code for mode {i}")

    @property
    def m(self) -> int:
        return self.actions.shape[0]


@dataclass
class OracleResult:
    best: np.ndarray          # (m, nodes) best value from every start
    policy: Policy            # a policy attaining ``best`` from every start
    evaluated: int            # cycle-free policies evaluated
    rejected: int             # policies rejected for switch cycles
    truncation_bound: float = 0.0


def truncation_bound(problem: DiscreteProblem, n_trunc: int) -> float:
    """Bound on what an optimal strategy can gain or lose after ``n_trunc`` steps."""
    beta = problem.beta
    lv = problem.levels[0]
    tail = max(problem.psi_max * lv.chain.dt / (1.0 - beta), float(np.abs(lv.F).max()))
    return beta ** n_trunc * tail


def _horizon(problem: DiscreteProblem, n_trunc: Optional[int]):
    if problem.finite:
        return problem.grid.steps, [1.0] * problem.grid.steps
    if n_trunc is None or n_trunc < 1:
        raise OracleError("infinite horizon needs a truncation step count n_trunc >= 1")
    return n_trunc, [problem.beta ** n for n in range(n_trunc)]


def _resolve(actions, G, i, l, x):
    """Follow switches at cell (l, x) from mode i.  Returns (mode, cost, final code)."""
    m = actions.shape[0]
    seen = [i]
    cost = 0.0
    mode = i
    while True:
        a = int(actions[mode, l, x])
        if a < 2:
            return mode, cost, a
        j = a - 2
        cost += float(G[mode, j, x])
        if j in seen:
            raise PolicyError(f"switch cycle {seen + [j]} at level {l}, node {x}")
        seen.append(j)
        mode = j
        if len(seen) > m:
            raise PolicyError("switch chain longer than m - 1")


def evaluate_policy(policy: Policy, problem: DiscreteProblem, start, n_trunc: Optional[int] = None) -> float:
    """Expected payoff of ``policy`` from start = (mode, node), by forward induction."""
    m, X = problem.model.m, problem.grid.size
    steps, disc = _horizon(problem, n_trunc)
    L = policy.actions.shape[1]
    if problem.finite and L != steps:
        raise PolicyError(f"policy has {L} levels, horizon has {steps}")
    mass = np.zeros((m, X))
    mass[start[0], start[1]] = 1.0
    total = 0.0
    matrices = {}
    for n in range(steps):
        li = n if problem.finite else 0
        pl = n if L > 1 else 0
        lv = problem.levels[li]
        moved = np.zeros((m, X))
        for i in range(m):
            for x in range(X):
                w = mass[i, x]
                if w == 0.0:
                    continue
                mode, cost, a = _resolve(policy.actions, lv.G, i, pl, x)
                if a == DEFAULT:
                    total += disc[n] * w * (-cost - lv.F[mode, x])
                else:
                    total += disc[n] * w * (-cost + lv.psi[mode, x] * lv.chain.dt)
                    moved[mode, x] += w
        if li not in matrices:
            matrices[li] = lv.chain.matrix()
        mass = moved @ matrices[li]
    return total


def _cell_options(m: int, allowed) -> list:
    out = []
    for i in range(m):
        opts = []
        if "continue" in allowed:
            opts.append(CONTINUE)
        if "default" in allowed:
            opts.append(DEFAULT)
        if "switch" in allowed:
            opts.extend(switch(j) for j in range(m) if j != i)
        if not opts:
            raise OracleError("no admissible action left")
        out.append(opts)
    return out


def evaluate_policies(actions: np.ndarray, problem: DiscreteProblem, n_trunc: Optional[int] = None):
    """Values from every start for a batch of policies.

    ``actions`` has shape (B, m, L, nodes).  Returns (values (B, m, nodes),
    valid (B,)); values of cyclic policies are -inf.
    """
    B, m, L, X = actions.shape
    steps, disc = _horizon(problem, n_trunc)

    # resolve switch chains for every cell at once
    Gs = np.stack([problem.levels[l if problem.finite else 0].G for l in range(L)])  # (L, m, m, X)
    li = np.arange(L)[None, None, :, None]
    xi = np.arange(X)[None, None, None, :]
    cur = np.broadcast_to(np.arange(m)[None, :, None, None], actions.shape).copy()
    cost = np.zeros(actions.shape)
    invalid = np.zeros(actions.shape, dtype=bool)
    for step in range(m):
        a = np.take_along_axis(actions, cur, axis=1)
        sw = a >= 2
        if step == m - 1:
            invalid |= sw
            break
        tgt = np.where(sw, a - 2, cur)
        cost += np.where(sw, Gs[li, cur, tgt, xi], 0.0)
        cur = tgt
    final = np.take_along_axis(actions, cur, axis=1)
    valid = ~invalid.any(axis=(1, 2, 3))

    values = np.full((B, m, X), -np.inf)
    keep = np.flatnonzero(valid)
    if keep.size == 0:
        return values, valid
    cur, final, cost = cur[keep], final[keep], cost[keep]
    Bv, S = keep.size, m * X
    mass = np.broadcast_to(np.eye(S).reshape(1, S, m, X), (Bv, S, m, X)).copy()
    total = np.zeros((Bv, S))
    xs = np.arange(X)[None, None, :]
    for n in range(steps):
        lv = problem.levels[n if problem.finite else 0]
        pl = n if L > 1 else 0
        term, fin, c = cur[:, :, pl], final[:, :, pl], cost[:, :, pl]
        reward = -c + np.where(fin == DEFAULT, -lv.F[term, xs], lv.psi[term, xs] * lv.chain.dt)
        total += disc[n] * (mass * reward[:, None]).sum(axis=(2, 3))
        moved = np.zeros_like(mass)
        for i in range(m):
            for j in range(m):
                w = ((term[:, i] == j) & (fin[:, i] == CONTINUE)).astype(float)
                moved[:, :, j] += mass[:, :, i] * w[:, None, :]
        mass = (moved.reshape(-1, X) @ lv.chain.matrix()).reshape(Bv, S, m, X)
    values[keep] = total.reshape(Bv, m, X)
    return values, valid


def enumerate_policies(
    problem: DiscreteProblem,
    allowed=("continue", "default", "switch"),
    n_trunc: Optional[int] = None,
    max_cells: int = 14,
    cap: int = ENUM_CAP,
    batch: int = 4096,
) -> OracleResult:
    """Exact maximum over all cycle-free Markov policies on the problem's chain."""
    m, X = problem.model.m, problem.grid.size
    L = problem.grid.steps if problem.finite else 1
    cells = m * L * X
    if cells > max_cells:
        raise OracleError(f"{cells} policy cells exceed the limit of {max_cells}; shrink the instance")
    opts = _cell_options(m, set(allowed))
    bases = np.array([len(opts[i]) for i in range(m) for _ in range(L * X)], dtype=np.int64)
    total = int(np.prod(bases, dtype=object))
    if total > cap:
        raise OracleError(f"{total} policies exceed the cap of {cap}; shrink the instance")
    table = np.full((m, max(len(o) for o in opts)), -1, dtype=np.int64)
    for i, o in enumerate(opts):
        table[i, : len(o)] = o
    strides = np.ones(cells, dtype=np.int64)
    for c in range(cells - 2, -1, -1):
        strides[c] = strides[c + 1] * bases[c + 1]
    cell_mode = np.repeat(np.arange(m), L * X)

    def run(lo: int):
        idx = np.arange(lo, min(lo + batch, total), dtype=np.int64)
        digits = (idx[:, None] // strides[None, :]) % bases[None, :]
        acts = table[cell_mode[None, :], digits].reshape(len(idx), m, L, X)
        vals, valid = evaluate_policies(acts, problem, n_trunc)
        best = vals.max(axis=0)
        score = np.where(valid, vals.reshape(len(idx), -1).sum(axis=1), -np.inf)
        top = int(np.argmax(score))  # first maximiser, deterministic
        return best, float(score[top]), acts[top], int(valid.sum())

    results = ordered_map(run, range(0, total, batch))
    best = np.max(np.stack([r[0] for r in results]), axis=0)
    # ties resolved to the earliest batch so the result does not depend on scheduling
    top = max(range(len(results)), key=lambda b: (results[b][1], -b))
    evaluated = sum(r[3] for r in results)
    bound = 0.0 if problem.finite else truncation_bound(problem, n_trunc)
    return OracleResult(best, Policy(results[top][2]), evaluated, total - evaluated, bound)


def random_policy(rng: np.random.Generator, m: int, levels: int, nodes: int, p_default: float = 0.05) -> Policy:
    """Random cycle-free policy: switches only go forward in a random mode order per cell."""
    acts = np.empty((m, levels, nodes), dtype=np.int64)
    for l in range(levels):
        for x in range(nodes):
            order = rng.permutation(m)
            rank = np.empty(m, dtype=np.int64)
            rank[order] = np.arange(m)
            for i in range(m):
                later = [j for j in range(m) if rank[j] > rank[i]]
                u = rng.random()
                if u < p_default:
                    acts[i, l, x] = DEFAULT
                elif later and u < p_default + (1 - p_default) / 2:
                    acts[i, l, x] = switch(int(rng.choice(later)))
                else:
                    acts[i, l, x] = CONTINUE
    return Policy(acts)
