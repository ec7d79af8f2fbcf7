"""Run configuration: JSON schema, defaults and materialization.

A user config may give any subset of the sections below; unknown keys are
rejected at every level.  :func:`materialize` fills every default so the
stored config of a run is complete and self-describing.
"""

from __future__ import annotations

import copy
import json

import jsonschema

from .errors import InvalidParameterError

__all__ = ["DEFAULTS", "SCHEMA", "ConfigError", "load_config", "materialize", "validate"]

RECON_METHODS = ("cgsense", "tensor-lr", "mllr", "gtlr", "lps", "lowrank", "ossimm")


class ConfigError(InvalidParameterError):
    """Invalid run configuration."""


DEFAULTS = {
    "sequence": {"tr_ms": 15.0, "te_ms": 2.7, "n_c": 10, "flip_deg": 10.0, "psi_b_deg": 0.0,
                 "gradient_mode": "balanced", "sample_time": "at_te"},
    "simulate": {"t1_ms": 1433.2, "t2_ms": 92.6, "f0_hz": -20.0, "m0": 1.0,
                 "f0_grid_hz": {"start": -33.3, "stop": 33.3, "step": 0.5},
                 "duality_f0_hz": [-20.0, -13.333333333333334, -6.666666666666667, 0.0,
                                   6.666666666666667]},
    "phantom": {"nx": 48, "ny": 48, "t_s": 50, "n_coils": 4, "frame_period_s": 2.0,
                "target_tsnr_db": 38.0},
    "sampling": {"kind": "cartesian", "accel": 12.0, "center_lines": 2, "power": 2.0,
                 "memory": 10,
                 "spiral": {"n_i": 9, "a_mm": 310.0, "b_mm": 110.0, "d": 300, "fov_mm": 220.0,
                            "matrix_n": None},
                 "rotation": "prospective"},
    "encoding": {"width": 5, "oversampling": 2.0},
    "dictionary": {"t1_fixed_ms": 1433.2, "t2_ms": {"start": 92.6, "stop": 92.6, "step": 1.0},
                   "r2s_hz": {"start": 12.0, "stop": 38.0, "step": 0.1},
                   "f0_hz": {"start": -33.3, "stop": 33.3, "step": 0.22}},
    "solver": {
        "method": "tensor-lr",
        "init_window": 10,
        "cgsense": {"iters": 19, "reg": "quadratic", "alpha": 0.001, "delta": 0.01},
        "admm": {"lambdas": [1.0, 1.0, 2.0], "lambda_scale": 0.2, "rho": 121.0, "r": 3.0,
                 "outer_S": 2, "inner_T": 11, "cg_iters": 4},
        "patch": {"patch_dims": [8, 8], "t_s_block": 33, "overlap_discard": 2,
                  "cycle_spin": True},
        "lps": {"mu": 0.05},
        "lowrank": {"alpha": "auto", "iters": 15, "target_rank": 4},
        "manifold": {"beta": None, "outer_iters": 4, "cg_iters": 2, "kappa": 15.0,
                     "init": "tensor-lr"},
    },
    "analysis": {"threshold": 0.45, "discard_frames": 0, "cluster_min": 0, "n_detrend": 4},
    "seeds": {"phantom": 0, "sampling": 0, "noise": 0, "solver": 0},
    "output_dir": "out",
    "inputs": {"phantom": None, "sample": None, "recon": None, "dictionary": None},
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer"}
_PINT = {"type": "integer", "minimum": 1}
_NNINT = {"type": "integer", "minimum": 0}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}
_PATH = {"type": ["string", "null"]}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1}


def _obj(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


def _range(lo=_NUM):
    return _obj({"start": lo, "stop": lo, "step": _POS})


SCHEMA = _obj({
    "sequence": _obj({"tr_ms": _POS, "te_ms": {"type": "number", "minimum": 0},
                      "n_c": _PINT, "flip_deg": _NUM, "psi_b_deg": _NUM,
                      "gradient_mode": {"enum": ["balanced", "spoiled"]},
                      "sample_time": {"enum": ["at_te", "post_rf", "pre_rf"]}}),
    "simulate": _obj({"t1_ms": _POS, "t2_ms": _POS, "f0_hz": _NUM, "m0": _NUM,
                      "f0_grid_hz": _range(), "duality_f0_hz": {"type": "array", "items": _NUM,
                                                               "minItems": 1}}),
    "phantom": _obj({"nx": {"type": "integer", "minimum": 8}, "ny": {"type": "integer", "minimum": 8},
                     "t_s": _PINT, "n_coils": _PINT, "frame_period_s": _POS,
                     "target_tsnr_db": {"type": ["number", "null"]}}),
    "sampling": _obj({"kind": {"enum": ["cartesian", "spiral", "full"]}, "accel": {
        "type": "number", "minimum": 1}, "center_lines": _NNINT, "power": _NUM, "memory": _NNINT,
        "spiral": _obj({"n_i": _PINT, "a_mm": _POS, "b_mm": _POS, "d": _NNINT, "fov_mm": _POS,
                        "matrix_n": {"type": ["integer", "null"], "minimum": 1}}),
        "rotation": {"enum": ["prospective", "baseline", "retrospective"]}}),
    "encoding": _obj({"width": _PINT, "oversampling": {"type": "number", "minimum": 1}}),
    "dictionary": _obj({"t1_fixed_ms": _POS, "t2_ms": _range(_POS), "r2s_hz": _range(),
                        "f0_hz": _range()}),
    "solver": _obj({
        "method": {"enum": list(RECON_METHODS)},
        "init_window": _PINT,
        "cgsense": _obj({"iters": _PINT, "reg": {"enum": ["none", "quadratic", "huber"]},
                         "alpha": {"type": "number", "minimum": 0}, "delta": _POS}),
        "admm": _obj({"lambdas": {"type": "array", "items": {"type": "number", "minimum": 0},
                                  "minItems": 3, "maxItems": 3},
                      "lambda_scale": {"type": "number", "minimum": 0}, "rho": _POS,
                      "r": {"type": "number", "minimum": 1}, "outer_S": _PINT, "inner_T": _PINT,
                      "cg_iters": _PINT}),
        "patch": _obj({"patch_dims": {"type": "array", "items": _PINT, "minItems": 2,
                                      "maxItems": 2},
                       "t_s_block": _PINT, "overlap_discard": _NNINT, "cycle_spin": _BOOL}),
        "lps": _obj({"mu": {"type": "number", "minimum": 0}}),
        "lowrank": _obj({"alpha": {"anyOf": [{"type": "number", "minimum": 0},
                                             {"const": "auto"}]},
                         "iters": _PINT, "target_rank": _PINT}),
        "manifold": _obj({"beta": {"type": ["number", "null"], "minimum": 0},
                          "outer_iters": _PINT, "cg_iters": _NNINT,
                          "kappa": {"type": "number", "exclusiveMinimum": 1},
                          "init": {"enum": ["data-shared", "tensor-lr"]}}),
    }),
    "analysis": _obj({"threshold": {"type": "number", "minimum": 0, "maximum": 1},
                      "discard_frames": _NNINT, "cluster_min": _NNINT, "n_detrend": _NNINT}),
    "seeds": _obj({"phantom": _SEED, "sampling": _SEED, "noise": _SEED, "solver": _SEED}),
    "output_dir": _STR,
    "inputs": _obj({"phantom": _PATH, "sample": _PATH, "recon": _PATH, "dictionary": _PATH}),
})
SCHEMA["minProperties"] = 1


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg) -> None:
    """Raise :class:`ConfigError` with the schema message on failure."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        msg = exc.message
        if exc.validator == "minProperties":
            msg = "config is empty; give at least one section of " + ", ".join(SCHEMA["properties"])
        raise ConfigError(f"config error at {where}: {msg}") from None


def materialize(cfg: dict) -> dict:
    """Validated config with every default filled in."""
    validate(cfg)
    full = _merge(DEFAULTS, cfg)
    validate(full)
    patch = full["solver"]["patch"]
    if 2 * patch["overlap_discard"] >= patch["t_s_block"]:
        raise ConfigError("config error at solver/patch: overlap_discard must be below "
                          "half of t_s_block")
    return full


def load_config(path) -> dict:
    """Read, validate and materialize a JSON config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    if not text.strip():
        raise ConfigError("config is empty; give at least one section of "
                          + ", ".join(SCHEMA["properties"]))
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return materialize(raw)
