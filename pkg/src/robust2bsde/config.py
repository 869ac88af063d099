"""Experiment configuration: YAML text validated against a JSON schema."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import jsonschema
import yaml

from .errors import ConfigurationError
from .generators import CLAIMS, GENERATORS, risk_premium
from .market_paths import TimeGrid, uncertain_volatility_family
from .regression import RegressionBasis

CONFIG_SCHEMA_VERSION = 1
TASKS = ("solve-bsde", "robust-value", "price", "verify")
MODES = ("lattice", "path")
VERIFIERS = ("tower", "dpp", "minimality", "representation", "apriori", "sup_consistency",
             "discounted_K", "superhedge", "two_rate", "oracle")

_POSITIVE = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "required": ["task", "market", "generator", "claim", "numerics"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": CONFIG_SCHEMA_VERSION},
        "name": {"type": "string"},
        "task": {"enum": list(TASKS)},
        "market": {
            "type": "object",
            "required": ["sigmas", "x0", "horizon"],
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["uncertain-volatility"]},
                "sigmas": {"type": "array", "minItems": 1,
                           "items": {"type": "number", "minimum": 0}},
                "rate": {"type": "number"},
                "geometric": {"type": "boolean"},
                "x0": {"type": "number"},
                "horizon": _POSITIVE,
                "notional": _POSITIVE,
            },
        },
        "generator": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "params": {"type": "object"},
                "risk_premium": {
                    "type": "object",
                    "required": ["rate", "bound"],
                    "additionalProperties": False,
                    "properties": {
                        "rate": {"type": "number"},
                        "reference": {"enum": ["unit", "state"]},
                        "bound": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "claim": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {"name": {"type": "string"}, "params": {"type": "object"},
                           "p": {"type": "number", "exclusiveMinimum": 1}},
        },
        "numerics": {
            "type": "object",
            "required": ["steps", "seed"],
            "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "mode": {"enum": list(MODES)},
                "paths": {"type": "integer", "minimum": 2},
                "nodes": {"type": "integer", "minimum": 3},
                "n_std": _POSITIVE,
                "picard_tol": _POSITIVE,
                "clip_m": _POSITIVE,
                "policy": {"type": "integer", "minimum": 0},
                "threads": {"type": "integer", "minimum": 1},
                "increments": {"enum": ["gaussian", "rademacher"]},
                "basis": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["polynomial", "piecewise-linear-buckets"]},
                        "degree": {"type": "integer", "minimum": 0},
                        "buckets": {"type": "integer", "minimum": 1},
                        "ridge": {"type": "number", "minimum": 0},
                    },
                },
                "p": {"type": "number", "exclusiveMinimum": 1},
                "kappa": {"type": "number", "exclusiveMinimum": 1},
            },
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hedge_fraction": _POSITIVE,
                "oracle_relative": _POSITIVE,
                "minimality": _POSITIVE,
            },
        },
        "verifiers": {"type": "array", "items": {"enum": list(VERIFIERS)}, "uniqueItems": True},
        "hedge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "paths": {"type": "integer", "minimum": 2},
                "random_policies": {"type": "integer", "minimum": 0},
                "increments": {"enum": ["gaussian", "rademacher"]},
            },
        },
        "suite": {"enum": ["fast", "full"]},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"},
                           "surface_stride": {"type": "integer", "minimum": 1},
                           "pde_nodes": {"type": "integer", "minimum": 3},
                           "pde_steps": {"type": "integer", "minimum": 1}},
        },
    },
}

DEFAULTS = {
    "market": {"family": "uncertain-volatility", "rate": 0.0, "geometric": True},
    "numerics": {"mode": "lattice", "paths": 10_000, "nodes": 3201, "n_std": 8.0,
                 "picard_tol": 1e-12, "policy": 0, "threads": 1, "increments": "gaussian",
                 "basis": {}, "p": 2.0, "kappa": 1.5},
    "tolerances": {"hedge_fraction": 0.005, "oracle_relative": 0.005,
                   "minimality": 1e-8},
    "hedge": {"paths": 20_000, "random_policies": 20, "increments": "rademacher"},
    "output": {"dir": "out", "surface_stride": 1, "pde_nodes": 1600, "pde_steps": 1600},
}


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _describe(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "required":
        missing = [f for f in err.validator_value if f not in (err.instance or {})]
        names = ", ".join(f"{where}/{m}" if where != "<root>" else m for m in missing)
        return f"missing required field: {names}"
    return f"{where}: {err.message}"


def validate_config(raw) -> dict:
    """Schema check, name checks and defaults; raises :class:`ConfigurationError`."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigurationError("; ".join(_describe(e) for e in errors))
    cfg = _merge(DEFAULTS, raw)
    if cfg["generator"]["name"] not in GENERATORS:
        raise ConfigurationError(
            f"unknown generator {cfg['generator']['name']!r}; valid names: {', '.join(GENERATORS)}"
        )
    if cfg["claim"]["name"] not in CLAIMS:
        raise ConfigurationError(
            f"unknown claim {cfg['claim']['name']!r}; valid names: {', '.join(CLAIMS)}"
        )
    if cfg["numerics"]["policy"] >= len(cfg["market"]["sigmas"]):
        raise ConfigurationError("numerics/policy indexes outside market/sigmas")
    if not cfg["numerics"]["kappa"] < cfg["numerics"]["p"]:
        raise ConfigurationError("numerics/kappa must be below numerics/p")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    return validate_config(raw)


@dataclass
class Experiment:
    """Objects built from a validated config."""

    config: dict
    family: object
    grid: TimeGrid
    generator: object
    claim: object
    basis: RegressionBasis

    @property
    def x0(self) -> float:
        return float(self.config["market"]["x0"])


def build(cfg: dict) -> Experiment:
    m, n = cfg["market"], cfg["numerics"]
    family = uncertain_volatility_family(m["sigmas"], m["rate"], m["geometric"])
    grid = TimeGrid(m["horizon"], n["steps"])
    gspec = cfg["generator"]
    params = dict(gspec.get("params", {}))
    if "risk_premium" in gspec:
        rp = gspec["risk_premium"]
        params["theta"] = risk_premium(rp["rate"], rp.get("reference", "unit"))
        params["theta_bound"] = rp["bound"]
    try:
        generator = GENERATORS[gspec["name"]](**params)
        claim = CLAIMS[cfg["claim"]["name"]](**cfg["claim"].get("params", {}))
        basis = RegressionBasis(**n["basis"])
    except TypeError as exc:
        raise ConfigurationError(f"bad parameter block: {exc}") from exc
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    if "p" in cfg["claim"]:
        claim = type(claim)(claim.payoff, claim.name, cfg["claim"]["p"], claim.params)
    return Experiment(cfg, family, grid, generator, claim, basis)
