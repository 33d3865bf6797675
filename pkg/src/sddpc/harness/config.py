"""JSON experiment configuration.

Matrices are nested row lists.  Scalar weights/covariances are accepted as
shorthand for a scaled identity.  See the README for the full schema.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

CONTROLLER_TYPES = ("smpc", "sddpc", "mpc", "deepc", "spc")

DEFAULTS: dict[str, Any] = {
    "plant": None,
    "x0": None,
    "prior": None,
    "horizon": {"L": 10, "N": 30, "N_c": 10},
    "constraints": {"u_max": 0.6, "y_max": 0.4, "p_u": 0.2, "p_y": 0.2},
    "cost": {"Q": 1e4, "R": 1.0},
    "controller": {"type": "smpc"},
    "reference": [[0, 0.0]],
    "offline_data": {"T_d": 200, "input_std": 1.0, "noisy": True},
    "T": 100,
    "warmup_inputs": None,
    "seed": 0,
    "stream": 0,
    "output": {"dir": "out"},
    "controllers": None,
    "runs": 1,
}

CONTROLLER_DEFAULTS: dict[str, Any] = {
    "alpha": 0.7,
    "eps": 1e-6,
    "max_iter": 50,
    "lambda_y": 1e6,
    "lambda_g": 1e3,
    "lambda": 1e-3,
    "sigma_rho": 1e-4,
    "recovery": "tikhonov",
    "on_infeasible": "hold",
    "aux_prior": "zero",
    "sigma_v": None,
    "label": None,
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    if np.isscalar(value):
        if rows != cols:
            raise ConfigError(f"{name}: scalar shorthand needs a square matrix")
        return float(value) * np.eye(rows)
    a = np.asarray(value, float)
    if a.ndim == 1 and rows == cols and a.size == rows:
        return np.diag(a)
    a = np.atleast_2d(a)
    if a.shape != (rows, cols):
        raise ConfigError(f"{name}: expected shape ({rows}, {cols}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name}: entries must be finite")
    return a


def _vector(value, size: int, name: str) -> np.ndarray:
    a = np.asarray(value, float).reshape(-1)
    if a.size == 1 and size > 1:
        a = np.full(size, float(a[0]))
    if a.size != size:
        raise ConfigError(f"{name}: expected length {size}, got {a.size}")
    return a


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


@dataclass
class ExperimentConfig:
    """Validated view of a JSON experiment description."""

    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        merged = _merge(DEFAULTS, data)
        merged["controller"] = _merge(CONTROLLER_DEFAULTS, merged["controller"] or {})
        cfg = cls(merged)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def with_overrides(self, **over) -> "ExperimentConfig":
        data = {k: v for k, v in self.raw.items()}
        return ExperimentConfig.from_dict(_merge(data, over))

    # -- accessors --------------------------------------------------------

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def controller_type(self) -> str:
        return self.raw["controller"]["type"]

    @property
    def label(self) -> str:
        return self.raw["controller"].get("label") or self.controller_type.upper()

    @property
    def T(self) -> int:
        return int(self.raw["T"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def stream(self) -> int:
        return int(self.raw["stream"])

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        r = self.raw
        plant = r["plant"]
        if not isinstance(plant, dict):
            raise ConfigError("'plant' must be given (matrices or a 'random' generator)")
        if "random" in plant:
            gen = plant["random"]
            for k in ("n", "m", "p"):
                if int(gen.get(k, 0)) < 1:
                    raise ConfigError(f"plant.random.{k} must be >= 1")
        else:
            for k in ("A", "B", "C"):
                if k not in plant:
                    raise ConfigError(f"plant.{k} missing")
        hz = r["horizon"]
        L, N, Nc = (int(hz.get(k, 0)) for k in ("L", "N", "N_c"))
        if L < 1:
            raise ConfigError("horizon.L must be >= 1")
        if not 1 <= Nc <= N:
            raise ConfigError("horizon must satisfy 1 <= N_c <= N")
        cons = r["constraints"]
        for k in ("p_u", "p_y"):
            pv = float(cons.get(k, 0.2))
            if not 0.0 < pv <= 0.5:
                raise ConfigError(f"constraints.{k}={pv} must lie in (0, 1/2]")
        ctrl = r["controller"]
        if ctrl["type"] not in CONTROLLER_TYPES:
            raise ConfigError(f"controller.type must be one of {CONTROLLER_TYPES}")
        if not 0.0 < float(ctrl["alpha"]) < 1.0:
            raise ConfigError("controller.alpha must lie in (0, 1)")
        if float(ctrl["eps"]) <= 0 or int(ctrl["max_iter"]) < 1:
            raise ConfigError("controller.eps must be > 0 and max_iter >= 1")
        if ctrl["recovery"] not in ("exact", "tikhonov"):
            raise ConfigError("controller.recovery must be 'exact' or 'tikhonov'")
        if float(ctrl["lambda"]) <= 0:
            raise ConfigError("controller.lambda must be > 0")
        if ctrl["on_infeasible"] not in ("hold", "raise"):
            raise ConfigError("controller.on_infeasible must be 'hold' or 'raise'")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.seed < 0 or self.stream < 0:
            raise ConfigError("seed and stream must be nonnegative")
        if not r["reference"]:
            raise ConfigError("reference schedule must have at least one segment")
        if min(int(seg[0]) for seg in r["reference"]) > 0:
            raise ConfigError("reference schedule must start at t=0")
        od = r["offline_data"]
        if "csv" not in od and int(od.get("T_d", 0)) < 2 * L:
            raise ConfigError("offline_data.T_d must be >= 2L")
        wu = r["warmup_inputs"]
        if wu is not None and len(wu) >= self.T:
            raise ConfigError("warmup segment must be shorter than T")
        if r["controllers"] is not None:
            if not isinstance(r["controllers"], list) or not r["controllers"]:
                raise ConfigError("'controllers' must be a non-empty list")
            for c in r["controllers"]:
                if c.get("type") not in CONTROLLER_TYPES:
                    raise ConfigError(f"controllers entry has bad type {c.get('type')!r}")
        if int(r["runs"]) < 1:
            raise ConfigError("runs must be >= 1")
        if ctrl["aux_prior"] not in ("zero", "matched"):
            raise ConfigError("controller.aux_prior must be 'zero' or 'matched'")

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)
