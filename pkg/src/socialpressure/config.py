"""Experiment configuration: a TOML file with one table per module.

Every key is optional; missing ones take the defaults below.  Unknown keys
and wrongly typed values are rejected with a :class:`ConfigError` naming
the field, before any computation starts.
"""
from __future__ import annotations

import copy
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .finite_system import InitialCondition
from .limit_sde import PicardConfig
from .rates import RateFunction

EXPERIMENTS = ("simulate-finite", "solve-limit", "coupling-error", "invariant", "phase-diagram",
               "figure1", "figure2", "figure3", "selftest")

# name -> (type, default); nested dicts are tables
SCHEMA = {
    "experiment": (str, None),
    "seed": (int, 0),
    "out_dir": (str, "out"),
    "workers": (int, 1),
    "model": {
        "family": (str, "tanh_plus_one"),
        "B": (float, None),
        "shape": (str, None),
        "amplitude": (float, None),
        "slope": (float, None),
        "h": (float, 0.5),
        "N": (int, 1000),
        "T": (float, 15.0),
        "grid_points": (int, 300),
        "record_pressures": (bool, False),
    },
    "initial": {
        "kind": (str, "constant"),
        "value": (float, 0.0),
        "L": (float, 1.0),
    },
    "finite": {"replicas": (int, 1)},
    "picard": {
        "M": (int, 20000),
        "K": (int, None),
        "tol": (float, None),
        "max_iter": (int, 50),
        "window": (float, None),
    },
    "coupling": {
        "Ns": (list, [25, 50, 100, 200, 400, 800]),
        "replicas": (int, 100),
    },
    "invariant": {
        "gamma": (float, None),
        "x_max": (float, None),
        "points": (int, 501),
    },
    "phase": {"h_grid": (list, [0.25, 0.5, 0.75, 1.0, 1.1, 1.25, 1.5, 2.0, 3.0, 4.0])},
    "figure": {
        "replicas": (int, 10),
        "N": (int, 1000),
        "T": (float, 15.0),
        "grid_points": (int, 300),
    },
    "selftest": {"only": (list, [])},
}

_INITIAL_KINDS = ("constant", "iid_uniform", "iid_two_point")


def defaults(schema=SCHEMA) -> dict:
    out = {}
    for k, v in schema.items():
        out[k] = defaults(v) if isinstance(v, dict) else copy.deepcopy(v[1])
    return out


def _check_type(path: str, value, kind):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    if not isinstance(value, kind):
        raise ConfigError(path, f"expected {kind.__name__}, got {value!r}")
    return value


def _merge(base: dict, data: Mapping, schema: dict, prefix: str = "") -> None:
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(path, "unknown key")
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, Mapping):
                raise ConfigError(path, "expected a table")
            _merge(base[key], value, spec, path + ".")
        else:
            base[key] = _check_type(path, value, spec[0])


def load(path=None, overrides: Mapping = None) -> dict:
    """Defaults, then the TOML file, then flag overrides (dotted keys)."""
    cfg = defaults()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("--config", f"{path}: {exc}")
        _merge(cfg, data, SCHEMA)
    for dotted, value in (overrides or {}).items():
        nested: dict = {}
        cur = nested
        parts = dotted.split(".")
        for p in parts[:-1]:
            cur = cur.setdefault(p, {})
        cur[parts[-1]] = value
        _merge(cfg, nested, SCHEMA)
    validate(cfg)
    return cfg


def parse_assignment(text: str):
    """``key=value`` with a TOML value (bare words are taken as strings)."""
    if "=" not in text:
        raise ConfigError("--set", f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def validate(cfg: dict) -> None:
    if cfg["experiment"] is not None and cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    if cfg["workers"] < 1:
        raise ConfigError("workers", "must be >= 1")
    m = cfg["model"]
    if not m["h"] > 0:
        raise ConfigError("model.h", "must be > 0")
    if m["N"] < 2:
        raise ConfigError("model.N", "must be >= 2")
    if not m["T"] > 0:
        raise ConfigError("model.T", "must be > 0")
    if m["grid_points"] < 2:
        raise ConfigError("model.grid_points", "must be >= 2")
    rate_function(cfg)
    init = cfg["initial"]
    if init["kind"] not in _INITIAL_KINDS:
        raise ConfigError("initial.kind", f"must be one of {', '.join(_INITIAL_KINDS)}")
    if init["L"] < 0:
        raise ConfigError("initial.L", "must be >= 0")
    if cfg["finite"]["replicas"] < 1:
        raise ConfigError("finite.replicas", "must be >= 1")
    try:
        picard_config(cfg)
    except ValueError as exc:
        raise ConfigError("picard", str(exc))
    Ns = cfg["coupling"]["Ns"]
    if not all(isinstance(n, int) and not isinstance(n, bool) and n >= 10 for n in Ns) or len(Ns) < 2:
        raise ConfigError("coupling.Ns", "need at least two integers, each >= 10")
    if cfg["coupling"]["replicas"] < 2:
        raise ConfigError("coupling.replicas", "must be >= 2")
    hg = cfg["phase"]["h_grid"]
    if not hg or not all(isinstance(h, (int, float)) and not isinstance(h, bool) and h > 0 for h in hg):
        raise ConfigError("phase.h_grid", "need positive numbers")
    g = cfg["invariant"]["gamma"]
    if g is not None and g == 0:
        raise ConfigError("invariant.gamma", "must be nonzero (0 is the point mass)")
    if cfg["invariant"]["points"] < 2:
        raise ConfigError("invariant.points", "must be >= 2")
    f = cfg["figure"]
    if f["replicas"] < 1 or f["N"] < 2 or not f["T"] > 0 or f["grid_points"] < 2:
        raise ConfigError("figure", "replicas >= 1, N >= 2, T > 0 and grid_points >= 2 required")
    only = cfg["selftest"]["only"]
    if not all(isinstance(i, int) and 1 <= i <= 9 for i in only):
        raise ConfigError("selftest.only", "criterion numbers must be integers in 1..9")


def rate_function(cfg: dict) -> RateFunction:
    m = cfg["model"]
    params = {k: m[k] for k in ("B", "shape", "amplitude", "slope") if m[k] is not None}
    try:
        return RateFunction.from_name(m["family"], **params)
    except ValueError as exc:
        field = "model.family" if "family" in str(exc) else "model"
        raise ConfigError(field, str(exc))


def initial_condition(cfg: dict) -> InitialCondition:
    init = cfg["initial"]
    if init["kind"] == "constant":
        return InitialCondition.constant(init["value"])
    if init["kind"] == "iid_uniform":
        return InitialCondition.iid_uniform(init["L"])
    return InitialCondition.iid_two_point(init["L"])


def picard_config(cfg: dict) -> PicardConfig:
    p = cfg["picard"]
    return PicardConfig(M=p["M"], K=p["K"], tol=p["tol"], max_iter=p["max_iter"], window=p["window"],
                        workers=cfg["workers"])


def as_record(cfg: dict) -> dict[str, Any]:
    """The part of the config that determines outputs (for hashing)."""
    out = copy.deepcopy(cfg)
    out.pop("out_dir", None)
    out.pop("workers", None)
    return out
