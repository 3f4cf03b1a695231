"""Experiment configuration: TOML files checked against a JSON schema."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envs import LQGEnv, NL1DEnv, check_stable
from .exact import GridModel

_num = {"type": "number"}
_matrix = {"oneOf": [_num, {"type": "array", "items": {"oneOf": [_num, {"type": "array", "items": _num}]}}]}
_state_list = {"type": "array", "items": {"oneOf": [_num, {"type": "array", "items": _num}]}}
_pos_int = {"type": "integer", "minimum": 1}
_p0 = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "atoms": _state_list,
        "weights": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "mean": {"oneOf": [_num, {"type": "array", "items": _num}]},
        "var": {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                          {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}]},
    },
    "oneOf": [{"required": ["atoms"]}, {"required": ["mean", "var"]}],
}
K_KIND_ENUM = ["KS", "KD", "KS_baselined", "KD_baselined"]

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "sdequiv experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["env", "policy"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**63 - 1},
        "env": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family"],
            "properties": {
                "family": {"enum": ["lqg", "nl1d"]},
                "A": _matrix, "B": _matrix, "Q": _matrix,
                "R": _matrix, "Sigma": _matrix, "r": {"type": "array", "items": _num},
                "a": _num, "b": _num, "c": _num,
                "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "p0": _p0,
                "quartic": {"type": "number", "minimum": 0},
            },
            "allOf": [
                {"if": {"properties": {"family": {"const": "lqg"}}},
                 "then": {"required": ["A", "B", "Q", "R", "Sigma", "gamma"],
                          "not": {"anyOf": [{"required": ["a"]}, {"required": ["b"]}, {"required": ["c"]}]}}},
                {"if": {"properties": {"family": {"const": "nl1d"}}},
                 "then": {"required": ["gamma"],
                          "not": {"anyOf": [{"required": ["A"]}, {"required": ["B"]}, {"required": ["Q"]}]}}},
            ],
        },
        "policy": {
            "type": "object",
            "additionalProperties": False,
            "required": ["theta"],
            "properties": {
                "features": {"enum": ["state", "affine"]},
                "theta": _matrix,
            },
        },
        "rollouts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"horizon": _pos_int, "n_rollouts": _pos_int, "chunk_size": _pos_int},
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "nodes": {"oneOf": [{"type": "integer", "minimum": 2},
                                    {"type": "array", "items": {"type": "integer", "minimum": 2}}]},
                "extent": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
                "quadrature_order": {"type": "integer", "minimum": 2},
            },
        },
        "equivalence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "expect_inequivalence": {"type": "boolean"},
                "state_dependent_scale": {"type": "number", "minimum": 0},
                "q_difference": {"enum": ["auto", "constant", "nonconstant"]},
                "fisher": {"type": "boolean"},
            },
        },
        "gradcheck": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"monte_carlo": {"type": "boolean"}},
        },
        "transform": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["gaussian", "mixture", "qg"]},
                "offsets": _state_list,
                "covariances": {"type": "array"},
                "weights": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "kernel": {"enum": ["delta", "density"]},
                "state_cov": _matrix,
                "orders": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 3, "maxItems": 3},
                "probes": _state_list,
            },
        },
        "learn": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "iterations": {"type": "integer", "minimum": 0},
                "step": {"type": "number", "minimum": 0},
                "kinds": {"type": "array", "items": {"enum": K_KIND_ENUM}, "minItems": 1},
                "train_rollouts": _pos_int,
                "eval_rollouts": _pos_int,
                "compare_rollouts": _pos_int,
                "horizon": _pos_int,
                "features_degree": _pos_int,
                "critic_mode": {"enum": ["S", "D"]},
                "natural": {"type": "boolean"},
            },
        },
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration (exit status 2)."""


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict
    source: str = "<dict>"

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    @property
    def name(self) -> str:
        return self.data.get("name", Path(self.source).stem)

    @property
    def hash(self) -> str:
        return config_hash(self.data)

    def with_overrides(self, seed: Optional[int] = None, quadrature_order: Optional[int] = None) -> "ExperimentConfig":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["seed"] = int(seed)
        if quadrature_order is not None:
            data.setdefault("grid", {})["quadrature_order"] = int(quadrature_order)
        validate(data)
        return ExperimentConfig(data, self.source)


def config_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def validate(data: dict) -> None:
    v = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(v.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}")


def load_config(path) -> ExperimentConfig:
    """Read and validate a TOML file; ``bundled:NAME`` picks a shipped config."""
    path = str(path)
    if path.startswith("bundled:"):
        text = bundled_path(path.split(":", 1)[1]).read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    validate(data)
    return ExperimentConfig(data, path)


def bundled_path(name: str) -> Path:
    name = name if name.endswith(".toml") else name + ".toml"
    p = Path(str(resources.files("sdequiv") / "configs" / name))
    if not p.exists():
        raise ConfigError(f"no bundled config named {name!r}; available: {', '.join(bundled_names())}")
    return p


def bundled_names() -> list[str]:
    d = Path(str(resources.files("sdequiv") / "configs"))
    return sorted(p.stem for p in d.glob("*.toml"))


# ---------------------------------------------------------------------------
# builders


def build_env(cfg: ExperimentConfig):
    e = dict(cfg.section("env"))
    family = e.pop("family")
    pol = cfg.section("policy")
    try:
        if family == "lqg":
            env = LQGEnv(e["A"], e["B"], e["Q"], e["R"], e["Sigma"], e["gamma"],
                         p0=e.get("p0"), r=e.get("r"), quartic=e.get("quartic", 0.0), name=cfg.name)
            if pol.get("features", "state") != "state":
                raise ConfigError("lqg policies use state features")
            theta = np.asarray(pol["theta"], dtype=float).reshape(env.n_u, env.n_x)
            check_stable(env, theta)
            env.Theta = theta
        else:
            env = NL1DEnv(**{k: v for k, v in e.items() if k != "p0"}, p0=e.get("p0"), name=cfg.name)
            if pol.get("features", "affine") != "affine":
                raise ConfigError("nl1d policies use affine features")
            env.theta = np.asarray(pol["theta"], dtype=float).ravel()
            if env.theta.size != 2:
                raise ConfigError("nl1d policy theta needs two entries")
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid env/policy: {exc}") from None
    return env


def auto_extent(env) -> list[tuple[float, float]]:
    if isinstance(env, NL1DEnv):
        h = env.half_width()
        return [(-h, h)]
    std = env.stationary_std(env.Theta)
    reach = np.max(np.abs(env.p0.atoms(10)[0]), axis=0)
    return [(-(5 * s + m), 5 * s + m) for s, m in zip(std, reach)]


def build_grid(cfg: ExperimentConfig, env, refine: int = 1, order: Optional[int] = None) -> GridModel:
    g = cfg.section("grid")
    extent = g.get("extent") or auto_extent(env)
    n_x = len(extent)
    nodes = g.get("nodes", 401 if n_x == 1 else 81)
    nodes = [nodes] * n_x if isinstance(nodes, int) else list(nodes)
    if len(nodes) != n_x:
        raise ConfigError("grid.nodes and grid.extent disagree on the state dimension")
    axes = [(float(lo), float(hi), (n - 1) * refine + 1) for (lo, hi), n in zip(extent, nodes)]
    return GridModel(axes, order or g.get("quadrature_order", 10))
