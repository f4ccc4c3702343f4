"""Run configuration: YAML file blocks merged over defaults, then flag overrides."""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml

from .expr import parse_function_of_x
from .geometry import GridFunction, TorusSpec, read_grid
from .semigroup import EvolutionConfig
from .verify import VerifyConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "model": None,
    "grid": {"dim": 1, "period": 1.0, "resolution": 256},
    "evolution": {"dt": 1e-3, "v_max": 6.0, "v_res": 129, "picard_tol": 1e-12, "picard_max": 50,
                  "snapshot_every": 0},
    "battery": {"name": "theorem-a", "horizons": [0.25, 0.5, 1.0], "n_samples": 500, "p_cap": 3.0,
                "u_cap": 2.0, "seed": 0, "flow_h": 1e-3, "tol": None, "mode": "ae"},
    "io": {"out": "out", "workers": 1},
    "data": {"phi": "-1", "phi_file": None, "x0": 0.0, "p0": 1.0, "u0": 0.0, "states": None, "T": 1.0,
             "h": 1e-3, "adaptive": False, "backward": False, "x": 0.5, "t": 1.0, "direction": "backward", "u": 0.0,
             "v_min": -3.0, "v_max": 3.0, "n_v": 61},
}


def _fmt_mark(exc) -> str:
    mark = getattr(exc, "problem_mark", None)
    if mark is None:
        return ""
    return f" at line {mark.line + 1}, column {mark.column + 1}"


def load_config(path) -> dict:
    """Parse a config file into the effective config (defaults filled in)."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{path}: parse error{_fmt_mark(exc)}: {problem}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of blocks")
    if "model" not in raw:
        raise ConfigError(f"{path}: missing required key 'model'")
    return merge(raw)


def merge(raw: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    for block, value in raw.items():
        if block not in DEFAULTS:
            raise ConfigError(f"unknown config block '{block}'; known blocks: {', '.join(DEFAULTS)}")
        if block == "model":
            cfg["model"] = value
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"block '{block}' must be a mapping")
        for key, v in value.items():
            if key not in DEFAULTS[block]:
                raise ConfigError(f"unknown key '{key}' in block '{block}'")
            cfg[block][key] = v
    return cfg


def torus_spec(cfg: dict) -> TorusSpec:
    g = cfg["grid"]
    return TorusSpec(int(g["dim"]), g["period"], g["resolution"])


def evolution_config(cfg: dict) -> EvolutionConfig:
    e = cfg["evolution"]
    return EvolutionConfig(dt=float(e["dt"]), v_max=float(e["v_max"]), v_res=int(e["v_res"]),
                           picard_tol=float(e["picard_tol"]), picard_max=int(e["picard_max"]),
                           snapshot_every=int(e["snapshot_every"]))


def verify_config(cfg: dict) -> VerifyConfig:
    b = cfg["battery"]
    return VerifyConfig(horizons=tuple(float(t) for t in b["horizons"]), n_samples=int(b["n_samples"]),
                        p_cap=float(b["p_cap"]), u_cap=float(b["u_cap"]), seed=int(b["seed"]),
                        flow_h=float(b["flow_h"]), evolution=evolution_config(cfg),
                        tol=None if b["tol"] is None else float(b["tol"]))


def initial_datum(cfg: dict, spec: TorusSpec) -> GridFunction:
    """phi from a grid file (its own grid wins) or from an expression in x1..xd sampled on ``spec``."""
    d = cfg["data"]
    if d.get("phi_file"):
        path = Path(d["phi_file"])
        if not path.exists():
            raise ConfigError(f"grid file not found: {path}")
        return read_grid(path)
    expr = parse_function_of_x(str(d["phi"]), spec.dim)
    zeros = np.zeros(spec.dim)
    return GridFunction.sample(spec, lambda X: expr.value(X, zeros, 0.0))
