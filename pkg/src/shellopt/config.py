"""Run configuration: strict JSON schema with materialized defaults.

Unknown keys are rejected at every nesting level so a typo in a barrier
weight cannot silently fall back to a default.  The resolved configuration
(defaults filled in) is embedded in every run summary, making runs
reconstructible from their artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

_SCHEMA: dict[str, dict[str, Any]] = {
    "mesh": None,           # required string
    "output_dir": None,     # optional string, default "out"
    "dirichlet": {"z_threshold": None, "indices": None},
    "tracking": {"mode": "full", "radius": None, "indices": None},
    "material": {"lower": 0.01, "upper": 0.2, "volume_cap": 60.0, "initial": None},
    "force": {"max_xy": 0.0015, "max_z": None},
    "elastic": {"mu": 1.0, "lam": 1.0, "bending": 1.0},
    "barrier": {"force": 1e-4, "thickness": 1.0, "volume": 1e-5},
    "noise": {"sigma": 0.1, "v_min": 1e-2, "v_max": 2.0, "seed": 1234},
    "optimization": {
        "samples": 128, "iterations": 200, "step0": None, "step_halflife": 100.0,
        "follower_max_iter": 100, "follower_grad_tol": 1e-9,
        "follower_rel_grad_tol": 1e-9, "follower_mode": "full",
        "allow_sample_failures": False, "checkpoint_every": 50,
    },
    "risk": {"cvar_levels": (0.5, 0.9), "excess_target": 0.0, "excess_order": 1,
             "semideviation_order": 1},
}


@dataclass
class RunConfig:
    mesh: str
    output_dir: str = "out"
    dirichlet: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=lambda: {"mode": "full"})
    material: dict = field(default_factory=dict)
    force: dict = field(default_factory=dict)
    elastic: dict = field(default_factory=dict)
    barrier: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    optimization: dict = field(default_factory=dict)
    risk: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        """Fully materialized configuration for the run summary."""
        out: dict[str, Any] = {"mesh": self.mesh, "output_dir": self.output_dir}
        for section in ("dirichlet", "tracking", "material", "force", "elastic",
                        "barrier", "noise", "optimization", "risk"):
            out[section] = dict(getattr(self, section))
        return out


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {section!r}")


def _require_number(section, key, value, lo=None, hi=None, strict_lo=False):
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
    v = float(value)
    if lo is not None and (v <= lo if strict_lo else v < lo):
        op = ">" if strict_lo else ">="
        raise ConfigError(f"{section}.{key} must be {op} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{section}.{key} must be <= {hi}, got {v}")
    return v


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    _check_keys("<root>", raw, _SCHEMA)
    if "mesh" not in raw or not isinstance(raw["mesh"], str):
        raise ConfigError("config requires a string 'mesh' path")

    cfg = RunConfig(mesh=raw["mesh"], output_dir=raw.get("output_dir", "out"))
    if not isinstance(cfg.output_dir, str):
        raise ConfigError("output_dir must be a string")

    for section, defaults in _SCHEMA.items():
        if not isinstance(defaults, dict):
            continue
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be an object")
        _check_keys(section, given, defaults)
        merged = {k: v for k, v in defaults.items() if v is not None}
        merged.update(given)
        setattr(cfg, section, merged)

    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    d = cfg.dirichlet
    if ("z_threshold" in d) == ("indices" in d):
        raise ConfigError("dirichlet needs exactly one of z_threshold or indices")
    if "indices" in d and (not isinstance(d["indices"], list) or
                           not all(isinstance(i, int) for i in d["indices"])):
        raise ConfigError("dirichlet.indices must be a list of integers")

    t = cfg.tracking
    if t.get("mode") not in ("full", "plateau", "indices"):
        raise ConfigError(f"tracking.mode must be full|plateau|indices, got {t.get('mode')!r}")
    if t["mode"] == "plateau":
        _require_number("tracking", "radius", t.get("radius"), lo=0.0, strict_lo=True)
    if t["mode"] == "indices" and not isinstance(t.get("indices"), list):
        raise ConfigError("tracking.indices must be a list")

    m = cfg.material
    lower = _require_number("material", "lower", m["lower"], lo=0.0, strict_lo=True)
    upper = _require_number("material", "upper", m["upper"])
    if upper <= lower:
        raise ConfigError("material.upper must exceed material.lower")
    _require_number("material", "volume_cap", m["volume_cap"], lo=0.0, strict_lo=True)
    if m.get("initial") is not None:
        _require_number("material", "initial", m["initial"], lo=lower, strict_lo=True)
        if float(m["initial"]) >= upper:
            raise ConfigError("material.initial must be strictly below material.upper")

    f = cfg.force
    max_xy = _require_number("force", "max_xy", f["max_xy"], lo=0.0, strict_lo=True)
    if f.get("max_z") is None:
        f["max_z"] = 2.0 * max_xy
    _require_number("force", "max_z", f["max_z"], lo=0.0, strict_lo=True)

    e = cfg.elastic
    _require_number("elastic", "mu", e["mu"], lo=0.0, strict_lo=True)
    _require_number("elastic", "lam", e["lam"], lo=0.0)
    _require_number("elastic", "bending", e["bending"], lo=0.0)

    b = cfg.barrier
    for key in ("force", "thickness", "volume"):
        _require_number("barrier", key, b[key], lo=0.0, strict_lo=True)

    n = cfg.noise
    _require_number("noise", "sigma", n["sigma"], lo=0.0)
    v_min = _require_number("noise", "v_min", n["v_min"], lo=0.0, strict_lo=True)
    v_max = _require_number("noise", "v_max", n["v_max"])
    # bounded support keeps every perturbed thickness positive and finite
    if not v_min < v_max < float("inf"):
        raise ConfigError("noise requires 0 < v_min < v_max < inf")
    if not isinstance(n["seed"], int) or isinstance(n["seed"], bool):
        raise ConfigError("noise.seed must be an integer")

    o = cfg.optimization
    for key, lo in (("samples", 1), ("iterations", 0), ("follower_max_iter", 1),
                    ("checkpoint_every", 1)):
        if not isinstance(o[key], int) or isinstance(o[key], bool) or o[key] < lo:
            raise ConfigError(f"optimization.{key} must be an integer >= {lo}")
    if o.get("step0") is not None:
        _require_number("optimization", "step0", o["step0"], lo=0.0, strict_lo=True)
    _require_number("optimization", "step_halflife", o["step_halflife"], lo=0.0, strict_lo=True)
    _require_number("optimization", "follower_grad_tol", o["follower_grad_tol"], lo=0.0, strict_lo=True)
    _require_number("optimization", "follower_rel_grad_tol", o["follower_rel_grad_tol"], lo=0.0)
    if o["follower_mode"] not in ("full", "frozen"):
        raise ConfigError("optimization.follower_mode must be 'full' or 'frozen'")
    if not isinstance(o["allow_sample_failures"], bool):
        raise ConfigError("optimization.allow_sample_failures must be a boolean")

    r = cfg.risk
    levels = r["cvar_levels"]
    if not isinstance(levels, (list, tuple)) or not levels:
        raise ConfigError("risk.cvar_levels must be a nonempty list")
    for beta in levels:
        bval = _require_number("risk", "cvar_levels[]", beta, lo=0.0)
        if bval >= 1.0:
            raise ConfigError("risk.cvar_levels entries must lie in [0, 1)")
    r["cvar_levels"] = [float(beta) for beta in levels]
    _require_number("risk", "excess_target", r["excess_target"])
    for key in ("excess_order", "semideviation_order"):
        if not isinstance(r[key], int) or isinstance(r[key], bool) or r[key] < 1:
            raise ConfigError(f"risk.{key} must be an integer >= 1")
