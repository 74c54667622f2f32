"""JSON run configuration: schema, defaults and conversion to model/grid objects."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .chain import Grid, auto_dt, auto_steps
from .expr import ExprError, parse
from .model import Finite, Infinite, ModelError, SwitchingModel, make_model

__all__ = ["ConfigError", "RunSpec", "load_config", "parse_config", "SCHEMA"]


class ConfigError(ValueError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
        self.detail = message


_expr = {"type": ["string", "number"]}
_vec = {"type": "array", "items": {"type": "number"}, "minItems": 1}

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["modes", "dim", "horizon", "drift", "volatility", "profit", "default_cost", "alpha"],
    "properties": {
        "modes": {"type": "integer", "minimum": 1},
        "dim": {"type": "integer", "minimum": 1},
        "brownian_dim": {"type": "integer", "minimum": 1},
        "horizon": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["type", "T"],
                    "properties": {"type": {"const": "finite"}, "T": {"type": "number", "exclusiveMinimum": 0}},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["type", "r"],
                    "properties": {"type": {"const": "infinite"}, "r": {"type": "number", "exclusiveMinimum": 0}},
                },
            ]
        },
        "drift": {"type": "array", "items": _expr, "minItems": 1},
        "volatility": {"type": "array", "items": {"type": "array", "items": _expr, "minItems": 1}, "minItems": 1},
        "profit": {"type": "array", "items": _expr, "minItems": 1},
        "switch_cost": {"type": "array", "items": {"type": "array", "items": {"type": ["string", "number", "null"]}}},
        "default_cost": {"type": "array", "items": _expr, "minItems": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "mu": {"type": "integer", "minimum": 0},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "grid"],
    "properties": {
        "model": {"oneOf": [{"type": "string"}, MODEL_SCHEMA]},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["lo", "hi", "nodes"],
            "properties": {
                "lo": _vec,
                "hi": _vec,
                "nodes": {"type": "array", "items": {"type": "integer", "minimum": 3}, "minItems": 1},
                "steps": {"oneOf": [{"type": "integer", "minimum": 1}, {"const": "auto"}]},
                "dt": {"oneOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "auto"}]},
                "cfl_safety": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "solve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scheme": {"enum": ["coupled", "picard"]},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_passes": {"type": "integer", "minimum": 1},
                "max_outer": {"type": "integer", "minimum": 1},
                "init": {"enum": ["lower", "upper"]},
            },
        },
        "validate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"samples": {"type": "integer", "minimum": 1}},
        },
        "strategy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol_action": {"type": "number", "minimum": 0},
                "prefer_default": {"type": "boolean"},
            },
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x0": _vec,
                "mode": {"type": "integer", "minimum": 1},
                "paths": {"type": "integer", "minimum": 2},
                "dt_sim": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "max_time": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_trunc": {"type": "integer", "minimum": 1},
                "max_cells": {"type": "integer", "minimum": 1},
            },
        },
        "compare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x0": _vec,
                "mode": {"type": "integer", "minimum": 1},
                "factor": {"type": "integer", "minimum": 2},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
    },
}

DEFAULTS = {
    "solve": {"scheme": "coupled", "tol": 1e-8, "max_passes": 10_000, "max_outer": 10_000, "init": "lower"},
    "validate": {"samples": 256},
    "strategy": {"tol_action": 1e-7, "prefer_default": True},
    "simulate": {"mode": 1, "paths": 10_000, "dt_sim": None, "max_time": None},
    "oracle": {"n_trunc": 200, "max_cells": 14},
    "compare": {"mode": 1, "factor": 2},
    "seed": 0,
}


@dataclass
class RunSpec:
    model: SwitchingModel
    grid: Grid
    settings: dict          # every section with defaults filled in
    source: dict            # resolved config (model inlined), used for the spec hash

    @property
    def seed(self) -> int:
        return self.settings["seed"]

    @property
    def hash(self) -> str:
        blob = json.dumps(self.source, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def section(self, name: str) -> dict:
        return self.settings[name]


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def _check_schema(doc: Any, schema: dict, prefix: str = ""):
    err = jsonschema.exceptions.best_match(jsonschema.Draft7Validator(schema).iter_errors(doc))
    if err is not None:
        raise ConfigError(err.message, prefix + _pointer(err.absolute_path))


def build_model(doc: dict, prefix: str = "/model") -> SwitchingModel:
    m, k = doc["modes"], doc["dim"]
    d = doc.get("brownian_dim", len(doc["volatility"][0]))

    def need_len(key, n):
        if len(doc[key]) != n:
            raise ConfigError(f"expected {n} entries, got {len(doc[key])}", f"{prefix}/{key}")

    need_len("drift", k)
    need_len("volatility", k)
    for j, row in enumerate(doc["volatility"]):
        if len(row) != d:
            raise ConfigError(f"expected {d} entries, got {len(row)}", f"{prefix}/volatility/{j}")
    need_len("profit", m)
    need_len("default_cost", m)
    g = doc.get("switch_cost")
    if m > 1:
        if g is None:
            raise ConfigError("required when modes > 1", f"{prefix}/switch_cost")
        if len(g) != m or any(len(row) != m for row in g):
            raise ConfigError(f"expected a {m}x{m} matrix", f"{prefix}/switch_cost")
        for i in range(m):
            for j in range(m):
                if i == j and g[i][j] is not None:
                    raise ConfigError("diagonal must be null (no self-switch)", f"{prefix}/switch_cost/{i}/{j}")
                if i != j and g[i][j] is None:
                    raise ConfigError("off-diagonal cost missing", f"{prefix}/switch_cost/{i}/{j}")
    else:
        g = [[None]]

    def parsed(path, value):
        if isinstance(value, (int, float)):
            value = repr(float(value))
        try:
            return parse(value, k)
        except ExprError as exc:
            raise ConfigError(str(exc), path) from None

    h = doc["horizon"]
    horizon = Finite(float(h["T"])) if h["type"] == "finite" else Infinite(float(h["r"]))
    try:
        return make_model(
            horizon=horizon,
            b=[parsed(f"{prefix}/drift/{j}", e) for j, e in enumerate(doc["drift"])],
            sigma=[[parsed(f"{prefix}/volatility/{j}/{q}", e) for q, e in enumerate(row)]
                   for j, row in enumerate(doc["volatility"])],
            psi=[parsed(f"{prefix}/profit/{i}", e) for i, e in enumerate(doc["profit"])],
            g=[[None if i == j else parsed(f"{prefix}/switch_cost/{i}/{j}", g[i][j]) for j in range(m)]
               for i in range(m)],
            F=[parsed(f"{prefix}/default_cost/{i}", e) for i, e in enumerate(doc["default_cost"])],
            alpha=doc["alpha"],
            mu=doc.get("mu", 1),
        )
    except ModelError as exc:
        raise ConfigError(str(exc), prefix) from None


def build_grid(doc: dict, model: SwitchingModel) -> Grid:
    lo, hi, n = doc["lo"], doc["hi"], doc["nodes"]
    if not (len(lo) == len(hi) == len(n) == model.k):
        raise ConfigError(f"lo, hi and nodes need {model.k} entries each", "/grid")
    for j in range(model.k):
        if not lo[j] < hi[j]:
            raise ConfigError("lo must be < hi", f"/grid/lo/{j}")
    safety = doc.get("cfl_safety", 0.9)
    try:
        if model.finite:
            if "dt" in doc:
                raise ConfigError("finite horizon takes 'steps', not 'dt'", "/grid/dt")
            steps = doc.get("steps", "auto")
            if steps == "auto":
                steps = auto_steps(model, lo, hi, n, safety)
            return Grid.finite(lo, hi, n, model.horizon.T, steps)
        if "steps" in doc:
            raise ConfigError("infinite horizon takes 'dt', not 'steps'", "/grid/steps")
        dt = doc.get("dt", "auto")
        if dt == "auto":
            dt = auto_dt(model, lo, hi, n, safety)
        return Grid.infinite(lo, hi, n, dt)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "/grid") from None


def parse_config(doc: dict, base: Path = Path(".")) -> RunSpec:
    _check_schema(doc, SCHEMA)
    doc = copy.deepcopy(doc)
    if isinstance(doc["model"], str):
        mpath = base / doc["model"]
        try:
            mdoc = json.loads(mpath.read_text())
        except FileNotFoundError:
            raise ConfigError(f"model file {mpath} not found", "/model") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model file is not valid JSON: {exc}", "/model") from None
        _check_schema(mdoc, MODEL_SCHEMA, "/model")
        doc["model"] = mdoc
    model = build_model(doc["model"])
    grid = build_grid(doc["grid"], model)

    settings = {}
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            settings[key] = {**default, **doc.get(key, {})}
        else:
            settings[key] = doc.get(key, default)
    for sec in ("simulate", "compare"):
        s = settings[sec]
        if s["mode"] > model.m:
            raise ConfigError(f"mode must be <= {model.m}", f"/{sec}/mode")
        if "x0" in s and len(s["x0"]) != model.k:
            raise ConfigError(f"expected {model.k} entries", f"/{sec}/x0")
    source = {**doc, **settings}
    return RunSpec(model, grid, settings, source)


def load_config(path) -> RunSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"not valid JSON: {exc}") from None
    return parse_config(doc, path.parent)
