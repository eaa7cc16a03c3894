"""Experiment configuration and the enhancement report.

Configurations are YAML files (or plain dicts) with the layout::

    cell:
      family: ellipsoid        # flat | ellipsoid | sphere_packing | grid
      params: {eps: 0.1}       # or h_target: 0.02 for the isotropic ellipsoid
    channel: {R: 1.0, L: [50.0], rho: 1.0}
    pipelines: [analytic, matrix, mc]
    truncation: {K_max: 35, L_max: 35}
    binning: {N_r: 24, N_theta: 24}
    n_traj: 100000
    n_samples: 10000          # scatters per bin for the matrix
    convention: verified      # eigenvalue convention used for eta_analytic
    seed: 1
    out: results
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import yaml

from .errors import ConfigInvalid

PIPELINES = ("analytic", "matrix", "mc", "msd")

PRESETS = {
    # sphere radius 0.1 nm, argon radius 0.18 nm
    "argon": {
        "cell": {"family": "sphere_packing", "params": {"r_s": 0.1, "r_m": 0.18}},
        "channel": {"R": 1.0, "L": [50.0], "rho": 1.0},
        "pipelines": ["analytic"],
        "truncation": {"K_max": 35, "L_max": 35},
        "binning": {"N_r": 24, "N_theta": 24},
        "n_traj": 10000,
        "n_samples": 10000,
        "seed": 1,
    },
    "ellipsoid-h002": {
        "cell": {"family": "ellipsoid", "h_target": 0.02},
        "channel": {"R": 1.0, "L": [50.0], "rho": 1.0},
        "pipelines": ["analytic", "matrix", "mc"],
        "truncation": {"K_max": 35, "L_max": 35},
        "binning": {"N_r": 24, "N_theta": 24},
        "n_traj": 100000,
        "n_samples": 10000,
        "seed": 1,
    },
}


@dataclass
class ExperimentConfig:
    cell: dict
    channel: dict = field(default_factory=lambda: {"R": 1.0, "L": [50.0], "rho": 1.0})
    pipelines: list = field(default_factory=lambda: ["analytic"])
    truncation: dict = field(default_factory=lambda: {"K_max": 35, "L_max": 35})
    binning: dict = field(default_factory=lambda: {"N_r": 24, "N_theta": 24})
    n_traj: int = 100_000
    n_samples: int = 10_000
    msd_traj: int = 2000
    msd_steps: int = 2000
    convention: str = "verified"
    x_norm: str = "oracle"
    seed: int = None
    out: str = "results"
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(msg):
            raise ConfigInvalid(msg)

        if not isinstance(self.cell, dict) or "family" not in self.cell:
            bad("cell.family is required")
        ch = self.channel
        for key in ("R", "L", "rho"):
            if key not in ch:
                bad(f"channel.{key} is required")
        if not isinstance(ch["L"], (list, tuple)):
            ch["L"] = [ch["L"]]
        if not ch["L"]:
            bad("channel.L must list at least one half-length")
        if min(ch["R"], ch["rho"], *ch["L"]) <= 0:
            bad("channel dimensions must be positive")
        if list(ch["L"]) != sorted(ch["L"]):
            bad("channel.L must be ascending")
        for p in self.pipelines:
            if p not in PIPELINES:
                bad(f"unknown pipeline {p!r}; choose from {PIPELINES}")
        for key in ("K_max", "L_max"):
            if int(self.truncation.get(key, -1)) < 0:
                bad(f"truncation.{key} must be a non-negative integer")
        for key in ("N_r", "N_theta"):
            if int(self.binning.get(key, 0)) <= 0:
                bad(f"binning.{key} must be positive")
        for key in ("n_traj", "n_samples", "msd_traj", "msd_steps", "threads"):
            v = getattr(self, key)
            if not isinstance(v, int) or v <= 0:
                bad(f"{key} must be a positive integer, got {v!r}")
        if self.seed is None:
            bad("seed is required")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            bad("seed must be a 64-bit non-negative integer")
        if self.convention not in ("formula", "verified"):
            bad("convention must be 'formula' or 'verified'")
        if self.x_norm not in ("oracle", "printed"):
            bad("x_norm must be 'oracle' or 'printed'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigInvalid(f"unknown configuration keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigInvalid(f"{path}: top level must be a mapping")
        if "preset" in d:
            base = copy.deepcopy(PRESETS.get(d.pop("preset"), None) or {})
            if not base:
                raise ConfigInvalid("unknown preset")
            base.update(d)
            d = base
        return cls.from_dict(d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in PRESETS:
            raise ConfigInvalid(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        d = copy.deepcopy(PRESETS[name])
        d.update(overrides)
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)


def _clean(x):
    """Recursively convert to JSON-safe builtins; non-finite floats become strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if hasattr(x, "tolist"):
        return _clean(x.tolist())
    if isinstance(x, float):
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (bool, int, str)) or x is None:
        return x
    return str(x)


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


REPORT_KEYS = (
    "config",
    "micro",
    "C",
    "convention",
    "theta",
    "eta_analytic",
    "eta_matrix",
    "eta_mc",
    "eta_msd",
    "relative_differences",
    "flags",
)


@dataclass
class EtaReport:
    """Results of the selected pipelines with data-quality flags."""

    config: dict
    micro: dict = field(default_factory=dict)
    C: dict = field(default_factory=dict)
    convention: str = "verified"
    theta: float = None
    eta_analytic: float = None
    eta_matrix: dict = None
    eta_mc: dict = None
    eta_msd: dict = None
    relative_differences: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def etas(self) -> dict:
        out = {}
        if self.eta_analytic is not None:
            out["analytic"] = self.eta_analytic
        if self.eta_matrix is not None:
            out["matrix"] = self.eta_matrix["eta"]
        if self.eta_mc is not None:
            out["mc"] = self.eta_mc["eta"]
        if self.eta_msd is not None:
            out["msd"] = self.eta_msd["eta"]
        return out

    def fill_differences(self):
        e = self.etas()
        names = sorted(e)
        self.relative_differences = {}
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                self.relative_differences[f"{a}-{b}"] = abs(e[a] - e[b]) / min(abs(e[a]), abs(e[b]))

    def to_dict(self):
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self) -> str:
        return dumps(self.to_dict())
