"""Switching problem datum, assumption checks and the obstacle operator."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import qmc

from .expr import Expr, evaluate, free_vars, parse, to_text

__all__ = [
    "Finite",
    "Infinite",
    "SwitchingModel",
    "make_model",
    "ValidationEntry",
    "ValidationReport",
    "validate",
    "obstacle_value",
    "obstacle_field",
    "drift_diffusion",
    "ModelError",
]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Finite:
    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise ModelError(f"horizon T must be > 0, got {self.T}")


@dataclass(frozen=True)
class Infinite:
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ModelError(f"discount rate r must be > 0, got {self.r}")


@dataclass(frozen=True)
class SwitchingModel:
    """Coefficients of the m-mode switching problem with default.

    Modes are 0-based in the Python API.  ``g[i][i]`` is ``None``.
    """

    m: int
    k: int
    d: int
    horizon: Union[Finite, Infinite]
    b: tuple
    sigma: tuple
    psi: tuple
    g: tuple
    F: tuple
    alpha: float
    mu: int = 1

    def __post_init__(self):
        if self.m < 1 or self.k < 1 or self.d < 1:
            raise ModelError("m, k and d must all be >= 1")
        if len(self.b) != self.k:
            raise ModelError(f"drift needs {self.k} entries, got {len(self.b)}")
        if len(self.sigma) != self.k or any(len(row) != self.d for row in self.sigma):
            raise ModelError(f"volatility must be a {self.k}x{self.d} matrix")
        if len(self.psi) != self.m or len(self.F) != self.m:
            raise ModelError(f"profit and default cost need {self.m} entries each")
        if len(self.g) != self.m or any(len(row) != self.m for row in self.g):
            raise ModelError(f"switching costs must be a {self.m}x{self.m} matrix")
        for i in range(self.m):
            for j in range(self.m):
                if (i == j) != (self.g[i][j] is None):
                    raise ModelError(
                        f"g[{i}][{j}] must be {'absent' if i == j else 'present'}"
                    )
        if not self.alpha > 0:
            raise ModelError(f"alpha must be > 0, got {self.alpha}")
        if self.mu < 0:
            raise ModelError(f"mu must be >= 0, got {self.mu}")

    @property
    def finite(self) -> bool:
        return isinstance(self.horizon, Finite)

    def expressions(self):
        """Yield (label, expr) for every coefficient."""
        for j, e in enumerate(self.b):
            yield f"b[{j}]", e
        for j, row in enumerate(self.sigma):
            for l, e in enumerate(row):
                yield f"sigma[{j}][{l}]", e
        for i, e in enumerate(self.psi):
            yield f"psi[{i}]", e
        for i, row in enumerate(self.g):
            for j, e in enumerate(row):
                if e is not None:
                    yield f"g[{i}][{j}]", e
        for i, e in enumerate(self.F):
            yield f"F[{i}]", e

    def time_dependent(self, which: str = "all") -> bool:
        exprs = self.expressions()
        if which == "dynamics":
            exprs = (p for p in exprs if p[0].startswith(("b[", "sigma[")))
        return any("t" in free_vars(e) for _, e in exprs)

    def canonical(self) -> dict:
        h = self.horizon
        return {
            "m": self.m,
            "k": self.k,
            "d": self.d,
            "horizon": {"T": h.T} if isinstance(h, Finite) else {"r": h.r},
            "b": [to_text(e) for e in self.b],
            "sigma": [[to_text(e) for e in row] for row in self.sigma],
            "psi": [to_text(e) for e in self.psi],
            "g": [[None if e is None else to_text(e) for e in row] for row in self.g],
            "F": [to_text(e) for e in self.F],
            "alpha": self.alpha,
            "mu": self.mu,
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def permuted(self, perm: Sequence[int]) -> "SwitchingModel":
        """Relabel modes: new mode ``a`` is old mode ``perm[a]``."""
        g = tuple(
            tuple(None if a == c else self.g[perm[a]][perm[c]] for c in range(self.m))
            for a in range(self.m)
        )
        return SwitchingModel(
            self.m, self.k, self.d, self.horizon, self.b, self.sigma,
            tuple(self.psi[p] for p in perm), g, tuple(self.F[p] for p in perm),
            self.alpha, self.mu,
        )

    # -- vectorised coefficient evaluation on a set of points ---------------

    def _on(self, e: Expr, t, X: np.ndarray) -> np.ndarray:
        val = evaluate(e, t, [X[:, j] for j in range(self.k)])
        return np.broadcast_to(np.asarray(val, dtype=float), (X.shape[0],))

    def psi_at(self, t, X: np.ndarray) -> np.ndarray:
        """Profit rates, shape (m, points)."""
        return np.stack([self._on(e, t, X) for e in self.psi])

    def F_at(self, t, X: np.ndarray) -> np.ndarray:
        return np.stack([self._on(e, t, X) for e in self.F])

    def g_at(self, t, X: np.ndarray) -> np.ndarray:
        """Switching costs, shape (m, m, points); the diagonal is +inf."""
        out = np.full((self.m, self.m, X.shape[0]), np.inf)
        for i in range(self.m):
            for j in range(self.m):
                if i != j:
                    out[i, j] = self._on(self.g[i][j], t, X)
        return out

    def drift_at(self, t, X: np.ndarray) -> np.ndarray:
        return np.stack([self._on(e, t, X) for e in self.b])

    def sigma_at(self, t, X: np.ndarray) -> np.ndarray:
        """Volatility, shape (k, d, points)."""
        return np.stack([np.stack([self._on(e, t, X) for e in row]) for row in self.sigma])


def _as_expr(value, k: int) -> Expr:
    if isinstance(value, (int, float)):
        value = repr(float(value))
    if isinstance(value, str):
        return parse(value, k)
    return value


def make_model(
    *,
    horizon: Union[Finite, Infinite],
    b,
    sigma,
    psi,
    g,
    F,
    alpha: float,
    mu: int = 1,
) -> SwitchingModel:
    """Build a model from strings, numbers or parsed expressions.

    ``g`` is an m x m nested list whose diagonal entries are ignored.
    """
    k = len(b)
    d = len(sigma[0])
    m = len(psi)
    return SwitchingModel(
        m=m,
        k=k,
        d=d,
        horizon=horizon,
        b=tuple(_as_expr(e, k) for e in b),
        sigma=tuple(tuple(_as_expr(e, k) for e in row) for row in sigma),
        psi=tuple(_as_expr(e, k) for e in psi),
        g=tuple(
            tuple(None if i == j else _as_expr(g[i][j], k) for j in range(m))
            for i in range(m)
        ),
        F=tuple(_as_expr(e, k) for e in F),
        alpha=float(alpha),
        mu=int(mu),
    )


# ---------------------------------------------------------------------------
# obstacle operator

def obstacle_value(i: int, v: Sequence[float], g_row: Sequence[float], F_i: float) -> float:
    """max( max_{j != i}(-g_ij + v_j), -F_i ).  ``g_row[i]`` is ignored."""
    vals = [float(x) for x in v]
    costs = [None if j == i else float(c) for j, c in enumerate(g_row)]
    if np.isnan(F_i) or any(np.isnan(x) for x in vals) or any(
        c is not None and np.isnan(c) for c in costs
    ):
        raise ValueError("NaN passed to obstacle_value")
    best = -float(F_i)
    for j, vj in enumerate(vals):
        if j != i:
            best = max(best, -costs[j] + vj)
    return best


def switch_field(V: np.ndarray, G: np.ndarray) -> np.ndarray:
    """max_{j != i}(-g_ij + V_j) per mode; -inf when m == 1.

    V has shape (m, ...) and G shape (m, m, ...) with +inf on the diagonal.
    """
    return np.max(V[None, :] - G, axis=1)


def obstacle_field(V: np.ndarray, G: np.ndarray, F: np.ndarray) -> np.ndarray:
    return np.maximum(switch_field(V, G), -F)


def drift_diffusion(model: SwitchingModel, t: float, x: Sequence[float]):
    """Drift vector b and diffusion matrix a = sigma sigma^T at one point."""
    X = np.asarray(x, dtype=float).reshape(1, model.k)
    bvec = model.drift_at(t, X)[:, 0]
    s = model.sigma_at(t, X)[:, :, 0]
    if np.isnan(bvec).any() or np.isnan(s).any():
        raise ValueError(f"NaN coefficient at t={t}, x={list(x)}")
    return bvec, s @ s.T


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationEntry:
    check: str
    status: str  # "pass" | "warn" | "fail"
    detail: str = ""
    witness: Optional[dict] = None


@dataclass
class ValidationReport:
    entries: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(e.status == "fail" for e in self.entries)

    @property
    def warned(self) -> bool:
        return any(e.status == "warn" for e in self.entries)

    def add(self, check, status, detail="", witness=None):
        self.entries.append(ValidationEntry(check, status, detail, witness))

    def to_dict(self) -> dict:
        return {
            "ok": not self.failed,
            "entries": [
                {"check": e.check, "status": e.status, "detail": e.detail, "witness": e.witness}
                for e in self.entries
            ],
        }


# beyond this an empirical Lipschitz estimate is flagged
LIPSCHITZ_WARN = 1e6


def _witness(t, X, idx, **values) -> dict:
    out = {"t": float(t[idx]), "x": [float(v) for v in X[idx]]}
    out.update({k: float(v) for k, v in values.items()})
    return out


def validate(model: SwitchingModel, lo, hi, samples: int = 256, seed: int = 0) -> ValidationReport:
    """Check the standing assumptions on a scrambled Sobol sample of the box.

    Sign and gap conditions (g vs alpha, F >= 0, finiteness, time
    homogeneity for the infinite horizon) are hard failures.  Growth and
    Lipschitz estimates can only ever warn.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (model.k,) or hi.shape != (model.k,) or not np.all(lo < hi):
        raise ModelError("validation box must satisfy lo < hi in every axis")
    if samples < 1:
        raise ModelError("samples must be >= 1")

    dim = model.k + 1
    # draw a full power-of-two block so the sequence keeps its balance, then truncate
    u = qmc.Sobol(dim, scramble=True, seed=seed).random_base2(max(0, math.ceil(math.log2(samples))))[:samples]
    # first sample pinned to the box centre
    u[0] = 0.5
    X = lo + u[:, 1:] * (hi - lo)
    if model.finite:
        t = u[:, 0] * model.horizon.T
    else:
        t = np.zeros(samples)

    rep = ValidationReport()

    if not model.finite:
        dep = [lab for lab, e in model.expressions() if "t" in free_vars(e)]
        if dep:
            rep.add("time_homogeneous", "fail", f"infinite horizon but t appears in {', '.join(dep)}")
        else:
            rep.add("time_homogeneous", "pass")

    # all coefficients finite
    bad = None
    for lab, e in model.expressions():
        vals = np.broadcast_to(
            np.asarray(evaluate(e, t, [X[:, j] for j in range(model.k)]), dtype=float), (samples,)
        )
        nonfinite = ~np.isfinite(vals)
        if nonfinite.any():
            idx = int(np.argmax(nonfinite))
            bad = (lab, idx, vals[idx])
            break
    if bad:
        lab, idx, val = bad
        rep.add("finite", "fail", f"{lab} is not finite", _witness(t, X, idx, value=val))
        return rep
    rep.add("finite", "pass")

    G = model.g_at(t, X)
    off = ~np.eye(model.m, dtype=bool)
    if model.m > 1:
        gvals = G[off]  # (pairs, samples)
        pairs = [(i, j) for i in range(model.m) for j in range(model.m) if i != j]
        if model.finite:
            checks = [("g_lower_bound", gvals - model.alpha, f"g_ij >= alpha={model.alpha}")]
        else:
            checks = [
                ("g_lower_bound", gvals - 1.0 / model.alpha, f"g_ij >= 1/alpha={1.0 / model.alpha}"),
                ("g_upper_bound", model.alpha - gvals, f"g_ij <= alpha={model.alpha}"),
            ]
        for name, slack, text in checks:
            p, s = np.unravel_index(np.argmin(slack), slack.shape)
            if slack[p, s] < 0:
                i, j = pairs[p]
                rep.add(name, "fail", f"violated: {text}",
                        _witness(t, X, s, i=i, j=j, g=gvals[p, s]))
            else:
                rep.add(name, "pass", text)

    Fv = model.F_at(t, X)
    i, s = np.unravel_index(np.argmin(Fv), Fv.shape)
    if Fv[i, s] < 0:
        rep.add("F_nonnegative", "fail", "default cost is negative", _witness(t, X, s, i=i, F=Fv[i, s]))
    else:
        rep.add("F_nonnegative", "pass")

    # polynomial growth: fitted C over the full box vs. over its inner half
    size = np.abs(model.psi_at(t, X)) + np.abs(Fv)
    if model.m > 1:
        size = size + np.where(off[:, :, None], np.abs(G), 0.0).max(axis=1)
    norm = np.linalg.norm(X, axis=1)
    ratio = size.max(axis=0) / (1.0 + norm ** model.mu)
    C_full = float(ratio.max())
    centre = (lo + hi) / 2
    inner = np.all(np.abs(X - centre) <= (hi - lo) / 4, axis=1)
    C_inner = float(ratio[inner].max()) if inner.any() else C_full
    if C_full > 2.0 * C_inner + 1e-12:
        rep.add("growth", "warn",
                f"fitted C grows from {C_inner:.6g} (inner half) to {C_full:.6g} (full box); "
                f"mu={model.mu} may be too small")
    else:
        rep.add("growth", "pass", f"fitted C = {C_full:.6g} for mu={model.mu}")

    # empirical linear-growth and Lipschitz ratios of b and sigma, at a common time
    t0 = float(t[0])
    coef = np.vstack([
        model.drift_at(t0, X),
        model.sigma_at(t0, X).reshape(model.k * model.d, samples),
    ]).T
    lin = float((np.linalg.norm(coef, axis=1) / (1 + norm)).max())
    lip = 0.0
    if samples > 1:
        dx = np.linalg.norm(X[:, None] - X[None], axis=-1)
        dc = np.linalg.norm(coef[:, None] - coef[None], axis=-1)
        mask = dx > 0
        if mask.any():
            lip = float((dc[mask] / dx[mask]).max())
    status = "warn" if max(lin, lip) > LIPSCHITZ_WARN else "pass"
    rep.add("dynamics_regularity", status,
            f"sampled linear-growth ratio {lin:.6g}, Lipschitz ratio {lip:.6g}")
    return rep
