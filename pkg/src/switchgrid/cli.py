"""Command line entry point: ``switchgrid <command> --config FILE --out DIR``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .chain import discretize
from .config import ConfigError, RunSpec, load_config
from .oracle import action_label, enumerate_policies
from .model import switch_field, validate
from .solver import (
    ValueField,
    check_complementarity,
    compare_resolutions,
    solve_finite,
    solve_infinite,
    upper_bound,
)
from .strategy import estimate_J, extract

log = logging.getLogger("switchgrid")

COMMANDS = ("validate", "solve", "check", "extract", "simulate", "oracle", "compare")

EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4


class RunError(RuntimeError):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


class Run:
    def __init__(self, spec: RunSpec, out: Path, scheme: str | None, force: bool, values: Path | None):
        self.spec = spec
        self.model = spec.model
        self.grid = spec.grid
        self.out = out
        self.force = force
        self.values_path = values
        self.solve_cfg = dict(spec.section("solve"))
        if scheme:
            self.solve_cfg["scheme"] = scheme
        self._problem = None

    @property
    def header(self) -> str:
        return f"model_hash={self.model.hash} spec_hash={self.spec.hash}"

    @property
    def problem(self):
        if self._problem is None:
            self._problem = discretize(self.model, self.grid)
        return self._problem

    # -- output helpers -----------------------------------------------------

    def write_json(self, name: str, payload: dict):
        doc = {"_header": self.header, **payload}
        path = self.out / name
        path.write_text(json.dumps(doc, indent=2, sort_keys=False, allow_nan=True) + "\n")
        log.info("wrote %s", path)

    def _rows(self, array, fmt_value):
        coords = self.grid.coords
        if array.ndim == 3:
            for i in range(array.shape[0]):
                for n in range(array.shape[1]):
                    for x in range(array.shape[2]):
                        yield [i + 1, n, *map(_fmt, coords[x]), fmt_value(array[i, n, x])]
        else:
            for i in range(array.shape[0]):
                for x in range(array.shape[1]):
                    yield [i + 1, 0, *map(_fmt, coords[x]), fmt_value(array[i, x])]

    def write_csv(self, name: str, array, column: str, fmt_value):
        path = self.out / name
        with path.open("w", newline="") as fh:
            fh.write(f"# {self.header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", "time_index", *[f"x{j + 1}" for j in range(self.grid.k)], column])
            w.writerows(self._rows(array, fmt_value))
        log.info("wrote %s", path)

    # -- shared steps -------------------------------------------------------

    def validation(self):
        cfg = self.spec.section("validate")
        return validate(self.model, self.grid.lo, self.grid.hi, cfg["samples"], self.spec.seed)

    def gate(self):
        rep = self.validation()
        if rep.failed:
            fails = [e.check for e in rep.entries if e.status == "fail"]
            if not self.force:
                raise RunError(
                    "validation",
                    f"model violates standing assumptions ({', '.join(fails)}); "
                    "rerun with --force to solve outside them",
                    EXIT_VALIDATION,
                )
            log.warning("--force: solving despite failed checks %s", fails)
        return rep

    def solve(self):
        self.gate()
        c = self.solve_cfg
        if self.model.finite:
            return solve_finite(self.model, self.grid, c["scheme"], c["tol"], c["max_passes"], self.problem)
        return solve_infinite(self.model, self.grid, c["tol"], c["max_outer"], c["init"], problem=self.problem)

    def read_values(self, path: Path) -> ValueField:
        if not path.exists():
            raise RunError("input", f"values file {path} not found; run 'solve' first", EXIT_CONFIG)
        with path.open() as fh:
            first = fh.readline().strip()
            expected = f"model_hash={self.model.hash}"
            if not first.startswith("# ") or expected not in first:
                raise RunError("input", f"{path} was not produced for this model ({expected})", EXIT_CONFIG)
            rows = list(csv.reader(fh))[1:]
        m, X = self.model.m, self.grid.size
        shape = (m, self.grid.steps + 1, X) if self.model.finite else (m, X)
        vals = np.array([float(r[-1]) for r in rows])
        if vals.size != int(np.prod(shape)):
            raise RunError("input", f"{path} has {vals.size} values, expected {int(np.prod(shape))}", EXIT_CONFIG)
        return ValueField(vals.reshape(shape), self.grid, self.model.hash, "file")

    def values(self) -> ValueField:
        if self.values_path is not None:
            return self.read_values(self.values_path)
        vf, _ = self.solve()
        return vf

    # -- commands -----------------------------------------------------------

    def cmd_validate(self):
        rep = self.validation()
        self.write_json("validation.json", rep.to_dict())
        return EXIT_VALIDATION if rep.failed else 0

    def cmd_solve(self):
        vf, diag = self.solve()
        log.info("solve took %.3fs", diag.wall_time)
        self.write_csv("values.csv", vf.values, "value", _fmt)
        self.write_json("solve.json", {
            "scheme": vf.scheme,
            "horizon": "finite" if self.model.finite else "infinite",
            "grid": {"n": list(self.grid.n), "dt": self.grid.dt, "steps": self.grid.steps},
            "diagnostics": diag.to_dict(),
        })
        return 0

    def cmd_check(self):
        vf = self.read_values(self.values_path or self.out / "values.csv")
        residual = check_complementarity(vf, self.model, self.grid, self.problem)
        V = vf.values
        lower, pair = math.inf, math.inf
        for n, lv in enumerate(self.problem.levels):
            Vn = V[:, n] if vf.finite else V
            lower = min(lower, float((Vn + lv.F).min()))
            if self.model.m > 1:
                pair = min(pair, float((Vn - switch_field(Vn, lv.G)).min()))
        report = {
            "complementarity_residual": residual,
            "min_V_plus_F": lower,
            "min_V_minus_best_switch": pair if self.model.m > 1 else None,
        }
        if vf.finite:
            report["terminal_max_abs"] = float(np.abs(V[:, -1]).max())
            bound = self.problem.psi_max * (self.grid.steps * self.grid.dt)
            report["max_V_minus_bound"] = float(V[:, 0].max() - bound)
        else:
            report["max_V_minus_bound"] = float(V.max() - upper_bound(self.problem))
        self.write_json("check.json", report)
        return 0

    def cmd_extract(self):
        vf = self.values()
        cfg = self.spec.section("strategy")
        reg = extract(vf, self.model, self.grid, cfg["tol_action"], cfg["prefer_default"], self.problem)
        self.write_csv("regions.csv", reg.actions, "action", lambda a: action_label(int(a)))
        return 0

    def cmd_simulate(self):
        vf = self.values()
        cfg = self.spec.section("strategy")
        reg = extract(vf, self.model, self.grid, cfg["tol_action"], cfg["prefer_default"], self.problem)
        sim = self.spec.section("simulate")
        x0 = sim.get("x0", [(a + b) / 2 for a, b in zip(self.grid.lo, self.grid.hi)])
        i0 = sim["mode"] - 1
        est = estimate_J(self.model, reg, self.grid, x0, i0, sim["paths"], sim["dt_sim"], self.spec.seed, sim["max_time"])
        value = vf.at(i0, x0)
        h = float(self.grid.dx.max() + math.sqrt(self.grid.dt))
        self.write_json("simulate.json", {
            "x0": list(x0),
            "mode": sim["mode"],
            "value_at_x0": value,
            "mc_mean": est.mean,
            "mc_stderr": est.stderr,
            "paths": est.paths,
            "seed": est.seed,
            "abs_difference": abs(est.mean - value),
            "h": h,
            "clamp_fraction": est.clamp_fraction,
            "default_fraction": est.default_fraction,
        })
        return 0

    def cmd_oracle(self):
        vf, _ = self.solve()
        cfg = self.spec.section("oracle")
        n_trunc = None if self.model.finite else cfg["n_trunc"]
        res = enumerate_policies(self.problem, n_trunc=n_trunc, max_cells=cfg["max_cells"])
        gap = float(np.abs(res.best - vf.initial()).max())
        self.write_json("oracle.json", {
            "policies_evaluated": res.evaluated,
            "policies_rejected_cyclic": res.rejected,
            "max_discrepancy": gap,
            "truncation_bound": res.truncation_bound,
            "n_trunc": n_trunc,
            "oracle_best": res.best.tolist(),
            "solver_values": vf.initial().tolist(),
        })
        return 0

    def cmd_compare(self):
        self.gate()
        cfg = self.spec.section("compare")
        x0 = cfg.get("x0", [(a + b) / 2 for a, b in zip(self.grid.lo, self.grid.hi)])
        res = compare_resolutions(self.model, self.grid, x0, cfg["mode"] - 1, cfg["factor"],
                                  self.solve_cfg["scheme"], self.solve_cfg["tol"])
        self.write_json("compare.json", {"x0": list(x0), "mode": cfg["mode"], **res})
        return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="switchgrid", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--force", action="store_true", help="solve even if hard validation checks fail")
    p.add_argument("--scheme", choices=("coupled", "picard"), help="finite-horizon scheme")
    p.add_argument("--values", type=Path, help="values.csv to reuse instead of solving")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _error(kind: str, message: str, code: int, pointer: str | None = None) -> int:
    report = {"status": "error", "kind": kind, "message": message, "exit_code": code}
    if pointer is not None:
        report["pointer"] = pointer
    print(json.dumps(report), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = load_config(args.config)
        if args.seed is not None:
            spec.settings["seed"] = args.seed
            spec.source["seed"] = args.seed
        if args.scheme:
            spec.source["solve"] = {**spec.source["solve"], "scheme": args.scheme}
    except ConfigError as exc:
        return _error("config", exc.detail, EXIT_CONFIG, exc.pointer or "/")
    args.out.mkdir(parents=True, exist_ok=True)
    run = Run(spec, args.out, args.scheme, args.force, args.values)
    try:
        return getattr(run, f"cmd_{args.command}")()
    except RunError as exc:
        return _error(exc.kind, str(exc), exc.code)
    except (ValueError, RuntimeError) as exc:
        return _error("numerical", f"{type(exc).__name__}: {exc}", EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
