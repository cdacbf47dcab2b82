"""Strict TOML experiment configuration.

Unknown keys are rejected with their full path, ``scheme.seed`` and every
tolerance a recipe needs are mandatory, and tolerances must be > 0.
"""

from __future__ import annotations

import hashlib
import math
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .bsde import SchemeParams
from .errors import ConfigError
from .experiments import RECIPES
from .levy import JumpComponent, LevyModel

__all__ = ["ExperimentConfig", "ExperimentSpec", "load_config", "parse_config", "SCHEMA_TEXT", "sub_seed"]

REQUIRED = object()

MODEL_KEYS = {"gamma": (float, REQUIRED), "sigma": (float, REQUIRED), "horizon": (float, REQUIRED),
              "truncation_epsilon": (float, 0.0), "jumps": (list, [])}
JUMP_KEYS = {"intensity": (float, REQUIRED), "sizes": (list, REQUIRED), "probs": (list, REQUIRED)}
SCHEME_KEYS = {"seed": (int, REQUIRED), "steps": (int, REQUIRED), "paths": (int, REQUIRED),
               "picard_tol": (float, REQUIRED), "basis": (str, "polynomial"), "degree": (int, 3),
               "hat_cells": (int, 16), "max_picard": (int, 50), "picard_weight": (float, 0.0)}
OVERRIDE_KEYS = {k: (t, None) for k, (t, _) in SCHEME_KEYS.items() if k != "seed"}
EXPERIMENT_KEYS = {"name", "recipe", "params", "tolerances", "model", "scheme"}

SCHEMA_TEXT = """\
Experiment configuration (TOML). Unknown keys are errors.

output = "<dir>"                      # optional; --out overrides

[model]                               # Lévy triplet and horizon
gamma = <float>                       # required
sigma = <float >= 0>                  # required
horizon = <float > 0>                 # required
truncation_epsilon = <float >= 0>     # optional, default 0
[[model.jumps]]                       # zero or more compound-Poisson components
intensity = <float >= 0>
sizes = [<float>, ...]                # jump-size quadrature nodes
probs = [<float>, ...]                # their probabilities (sum to 1)

[scheme]
seed = <int>                          # required
steps = <int >= 1>                    # required
paths = <int >= 1>                    # required
picard_tol = <float > 0>              # required
basis = "polynomial" | "hat" | "indicator"   # default "polynomial"
degree = <int>                        # default 3
hat_cells = <int>                     # default 16
max_picard = <int>                    # default 50
picard_weight = <float>               # default 0

[[experiments]]
name = "<unique name>"                # required; also seeds the experiment's stream
recipe = "<recipe>"                   # optional, defaults to name
[experiments.params]                  # recipe parameters (see `list`)
[experiments.tolerances]              # every tolerance the recipe declares, each > 0
[experiments.model]                   # optional full model replacing [model]
[experiments.scheme]                  # optional overrides of steps, paths, basis, ...

Statistical checks pass iff |estimate - target| / SE <= 3.
"""


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    recipe: str
    params: dict
    tolerances: dict
    model: LevyModel
    scheme: SchemeParams
    steps: int
    paths: int
    seed: int


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output: str | None
    experiments: tuple
    sha256: str = ""
    source: str = ""

    def names(self):
        return [e.name for e in self.experiments]


def sub_seed(seed, name):
    """Independent integer seed for experiment ``name``."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _check_keys(table, allowed, where):
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table")
    for key in table:
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r}")


def _typed(value, kind, where):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {type(value).__name__}")
    if kind is float and not math.isfinite(value):
        raise ConfigError(f"{where}: must be finite")
    return value


def _fill(table, keys, where):
    _check_keys(table, keys, where)
    out = {}
    for key, (kind, default) in keys.items():
        if key in table:
            out[key] = _typed(table[key], kind, f"{where}.{key}")
        elif default is REQUIRED:
            raise ConfigError(f"{where}: missing required key {key!r}")
        elif default is not None:
            out[key] = default
    return out


def _model(table, where):
    vals = _fill(table, MODEL_KEYS, where)
    jumps = []
    for n, jt in enumerate(vals["jumps"]):
        j = _fill(jt, JUMP_KEYS, f"{where}.jumps[{n}]")
        jumps.append(JumpComponent(j["intensity"], [float(x) for x in j["sizes"]],
                                   [float(p) for p in j["probs"]]))
    try:
        return LevyModel(vals["gamma"], vals["sigma"], tuple(jumps), vals["horizon"],
                         vals["truncation_epsilon"])
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _scheme(vals, where):
    for key in ("steps", "paths", "max_picard", "degree", "hat_cells"):
        if key in vals and vals[key] < (0 if key == "degree" else 1):
            raise ConfigError(f"{where}.{key}: must be positive")
    if vals["picard_tol"] <= 0:
        raise ConfigError(f"{where}.picard_tol: tolerances must be > 0")
    try:
        return SchemeParams(basis=vals["basis"], basis_degree=vals["degree"], hat_cells=vals["hat_cells"],
                            picard_tol=vals["picard_tol"], max_picard=vals["max_picard"],
                            picard_weight=vals["picard_weight"])
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _params(table, recipe, where):
    table = table or {}
    _check_keys(table, recipe.params, where)
    out = dict(recipe.params)
    for key, value in table.items():
        default = recipe.params[key]
        kind = type(default)
        if kind is list:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected list")
            value = [_typed(v, type(default[0]), f"{where}.{key}") for v in value]
        else:
            value = _typed(value, kind, f"{where}.{key}")
        out[key] = value
    return out


def _tolerances(table, recipe, where):
    table = table or {}
    _check_keys(table, recipe.tolerances, where)
    out = {}
    for key in recipe.tolerances:
        if key not in table:
            raise ConfigError(f"{where}: missing required tolerance {key!r}")
        val = _typed(table[key], float, f"{where}.{key}")
        if val <= 0:
            raise ConfigError(f"{where}.{key}: tolerances must be > 0")
        out[key] = val
    return out


def parse_config(data: dict, sha256: str = "", source: str = "") -> ExperimentConfig:
    _check_keys(data, {"output", "model", "scheme", "experiments"}, "config")
    for key in ("model", "scheme"):
        if key not in data:
            raise ConfigError(f"config: missing required table [{key}]")
    output = data.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("config.output: expected a string")
    model = _model(data["model"], "model")
    scheme_vals = _fill(data["scheme"], SCHEME_KEYS, "scheme")
    _scheme(scheme_vals, "scheme")
    seed = scheme_vals["seed"]
    if seed < 0:
        raise ConfigError("scheme.seed: must be >= 0")
    specs, seen = [], set()
    exps = data.get("experiments", [])
    if not isinstance(exps, list):
        raise ConfigError("config.experiments: expected an array of tables")
    for n, et in enumerate(exps):
        where = f"experiments[{n}]"
        _check_keys(et, EXPERIMENT_KEYS, where)
        if "name" not in et or not isinstance(et["name"], str) or not et["name"]:
            raise ConfigError(f"{where}: missing required key 'name'")
        name = et["name"]
        if name in seen:
            raise ConfigError(f"{where}: duplicate experiment name {name!r}")
        seen.add(name)
        recipe_name = et.get("recipe", name)
        if recipe_name not in RECIPES:
            raise ConfigError(f"{where}: unknown recipe {recipe_name!r}; known: {', '.join(sorted(RECIPES))}")
        recipe = RECIPES[recipe_name]
        params = _params(et.get("params"), recipe, f"{where}.params")
        tols = _tolerances(et.get("tolerances"), recipe, f"{where}.tolerances")
        emodel = _model(et["model"], f"{where}.model") if "model" in et else model
        over = _fill(et.get("scheme", {}), OVERRIDE_KEYS, f"{where}.scheme")
        vals = {**scheme_vals, **over}
        escheme = _scheme(vals, f"{where}.scheme")
        specs.append(ExperimentSpec(name, recipe_name, params, tols, emodel, escheme, vals["steps"],
                                    vals["paths"], sub_seed(seed, name)))
    return ExperimentConfig(seed, output, tuple(specs), sha256, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, hashlib.sha256(raw).hexdigest(), str(path))
