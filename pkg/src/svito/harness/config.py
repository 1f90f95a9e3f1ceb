"""Study configuration: defaults, JSON schema validation and provenance hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import jsonschema

from .. import __version__
from ..sim import SimConfig

__all__ = ["StudyConfig", "SCHEMA", "DESK_GRID", "PAPER_GRID", "ConfigError", "load_config"]

DESK_GRID = [
    {"n": 125, "m": 390, "p": 100},
    {"n": 125, "m": 780, "p": 100},
    {"n": 250, "m": 390, "p": 100},
    {"n": 250, "m": 780, "p": 100},
]
PAPER_GRID = [{"n": n, "m": m, "p": 200} for n in (125, 250, 500) for m in (390, 780, 2340)]

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "sim": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r": {"type": "integer", "minimum": 1},
                "q": {"type": "integer", "minimum": 1},
                "substeps_per_obs": {"type": "integer", "minimum": 1},
                "alpha0": _matrix,
                "alpha": {"type": "array", "items": _matrix, "minItems": 1},
                "nu": _matrix,
                "noise_sd": {"type": "number", "minimum": 0},
                "drift": {"type": "number"},
                "burnin_days": {"type": "integer", "minimum": 0},
                "thinning": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "grid": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["n", "m", "p"],
                "properties": {
                    "n": {"type": "integer", "minimum": 2},
                    "m": {"type": "integer", "minimum": 2},
                    "p": {"type": "integer", "minimum": 2},
                },
            },
        },
        "replications": {"type": "integer", "minimum": 1},
        "estimators": {
            "type": "array",
            "items": {"enum": ["qmle", "lse"]},
            "minItems": 1,
            "uniqueItems": True,
        },
        "baselines": {"type": "array", "items": {"enum": ["poet-prev", "prvm-prev"]}, "uniqueItems": True},
        "thresholds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pooled": {"type": ["number", "null"], "minimum": 0},
                "single_day": {"type": ["number", "null"], "minimum": 0},
            },
        },
        "window_theta": {"type": "number", "exclusiveMinimum": 0},
        "rank": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r_max": {"type": "integer", "minimum": 1},
                "c1_scale": {"type": "number", "minimum": 0},
                "c2": {"type": "number", "minimum": 0},
            },
        },
        "portfolio_c0": {"type": "array", "items": {"type": "number", "minimum": 1}},
        "forecast_origins": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "refit_every": {"type": "integer", "minimum": 1},
        "oos_days": {"type": "integer", "minimum": 3},
        "max_failure_rate": {"type": "number", "minimum": 0, "maximum": 1},
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


class ConfigError(ValueError):
    """Invalid study configuration; the message names the offending location."""


@dataclass
class StudyConfig:
    sim: dict = field(default_factory=dict)
    grid: list = field(default_factory=lambda: copy.deepcopy(DESK_GRID))
    replications: int = 50
    estimators: list = field(default_factory=lambda: ["qmle", "lse"])
    baselines: list = field(default_factory=lambda: ["poet-prev", "prvm-prev"])
    thresholds: dict = field(default_factory=lambda: {"pooled": None, "single_day": None})
    window_theta: float = 1.0
    rank: dict = field(default_factory=lambda: {"r_max": 30, "c1_scale": 0.02, "c2": 0.5})
    portfolio_c0: list = field(default_factory=lambda: [1.0, 1.2, 1.4, 1.6, 1.8, 2.0])
    forecast_origins: list = field(default_factory=lambda: [100])
    refit_every: int = 1
    oos_days: int = 150
    max_failure_rate: float = 0.1
    output_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict, paper_scale: bool = False) -> "StudyConfig":
        try:
            jsonschema.validate(data, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        base = cls.paper_scale() if paper_scale else cls()
        for key, val in data.items():
            if key in ("thresholds", "rank", "sim"):
                merged = dict(getattr(base, key))
                merged.update(val)
                val = merged
            setattr(base, key, val)
        base.validate()
        return base

    @classmethod
    def paper_scale(cls) -> "StudyConfig":
        return cls(grid=copy.deepcopy(PAPER_GRID), replications=500)

    def sim_config(self, cell: dict, seed: int = 0) -> SimConfig:
        kw = dict(self.sim)
        return SimConfig(p=cell["p"], n=cell["n"], m=cell["m"], seed=seed, **kw)

    def validate(self):
        if self.replications < 1:
            raise ConfigError("config error at replications: must be >= 1")
        for i, cell in enumerate(self.grid):
            try:
                self.sim_config(cell)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config error at grid/{i}: {exc}") from None
            r = self.sim.get("r", 3)
            if self.rank.get("r_max", 30) < 1 or cell["p"] <= r:
                raise ConfigError(f"config error at grid/{i}: p must exceed r")
        for i, h in enumerate(self.forecast_origins):
            if h >= self.oos_days:
                raise ConfigError(f"config error at forecast_origins/{i}: origin {h} must be < oos_days {self.oos_days}")

    def to_dict(self) -> dict:
        return {
            "sim": self.sim,
            "grid": self.grid,
            "replications": self.replications,
            "estimators": self.estimators,
            "baselines": self.baselines,
            "thresholds": self.thresholds,
            "window_theta": self.window_theta,
            "rank": self.rank,
            "portfolio_c0": self.portfolio_c0,
            "forecast_origins": self.forecast_origins,
            "refit_every": self.refit_every,
            "oos_days": self.oos_days,
            "max_failure_rate": self.max_failure_rate,
            "output_dir": self.output_dir,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        """Short SHA-256 of everything that affects results (not the output path)."""
        d = self.to_dict()
        d.pop("output_dir")
        d["version"] = __version__
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path=None, paper_scale: bool = False, overrides: dict | None = None) -> StudyConfig:
    """Read a JSON config (optional), apply CLI overrides and validate."""
    data = {}
    if path is not None:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError("config error at <root>: expected a JSON object")
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    return StudyConfig.from_dict(data, paper_scale=paper_scale)
