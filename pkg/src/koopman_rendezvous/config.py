"""Scenario configuration (JSON) for the experiment pipeline."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .orbit import MU_EARTH, OrbitalElements
from .sparse_solver import IrlsConfig

PAPER_SCALE = {"n_traj": 1000, "n_steps": 2000, "N": 500, "n_lift": 120}

DEFAULTS = {
    "name": "scenario",
    "orbit": {"semimajor_axis_m": 6763e3, "eccentricity": 0.73074, "mu": MU_EARTH, "nu0": 0.0},
    "x0": None,
    "x_f": [0.0] * 6,
    "N": 200,
    "T": 1.0,
    "n_lift": 120,
    "observables": {"r_ref": None, "rbf_seed": 1},
    "training": {"n_traj": 200, "n_steps": 500, "seed": 1, "u_scale": 1.0},
    "normalization": {"L_ref": None, "V_ref": None},
    "irls": {},
    "flags": {"freeze_anomaly": False},
    "terminal_constraint": "lifted",
    "eps_sing": 1.0,
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    elements: OrbitalElements
    x0: np.ndarray
    x_f: np.ndarray
    N: int
    T: float
    n_lift: int
    r_ref: float | None
    rbf_seed: int
    n_traj: int
    n_steps: int
    data_seed: int
    u_scale: float
    L_ref: float | None
    V_ref: float | None
    irls: IrlsConfig
    freeze_anomaly: bool
    terminal_constraint: str
    eps_sing: float
    raw: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def digest(self) -> str:
        """Hash of everything that determines the fitted model."""
        keys = ("orbit", "x0", "N", "T", "n_lift", "observables", "training", "normalization", "flags", "eps_sing")
        blob = json.dumps({k: self.raw.get(k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def from_dict(d: dict, *, seed: int | None = None, paper_scale: bool = False,
              freeze_anomaly: bool | None = None) -> ScenarioConfig:
    raw = _merge(DEFAULTS, d)
    if seed is not None:
        raw["training"]["seed"] = int(seed)
        raw["observables"]["rbf_seed"] = int(seed)
    if paper_scale:
        raw["training"]["n_traj"] = PAPER_SCALE["n_traj"]
        raw["training"]["n_steps"] = PAPER_SCALE["n_steps"]
        raw["N"] = PAPER_SCALE["N"]
        raw["n_lift"] = PAPER_SCALE["n_lift"]
    if freeze_anomaly is not None:
        raw["flags"]["freeze_anomaly"] = bool(freeze_anomaly)
    try:
        orbit = raw["orbit"]
        elements = OrbitalElements(float(orbit["semimajor_axis_m"]), float(orbit["eccentricity"]),
                                   float(orbit["mu"]), float(orbit["nu0"]))
        if raw["x0"] is None:
            raise ConfigError("x0 is required")
        x0 = np.asarray(raw["x0"], dtype=float)
        x_f = np.asarray(raw["x_f"], dtype=float)
        if x0.shape != (6,) or x_f.shape != (6,) or not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x_f))):
            raise ConfigError("x0 and x_f must be six finite numbers")
        N, T = int(raw["N"]), float(raw["T"])
        if N < 1 or not T > 0:
            raise ConfigError("need N >= 1 and T > 0")
        tr, obs, nm = raw["training"], raw["observables"], raw["normalization"]
        if raw["terminal_constraint"] not in ("lifted", "state"):
            raise ConfigError("terminal_constraint must be 'lifted' or 'state'")
        return ScenarioConfig(
            name=str(raw["name"]), elements=elements, x0=x0, x_f=x_f, N=N, T=T,
            n_lift=int(raw["n_lift"]),
            r_ref=None if obs["r_ref"] is None else float(obs["r_ref"]), rbf_seed=int(obs["rbf_seed"]),
            n_traj=int(tr["n_traj"]), n_steps=int(tr["n_steps"]), data_seed=int(tr["seed"]),
            u_scale=float(tr["u_scale"]),
            L_ref=None if nm["L_ref"] is None else float(nm["L_ref"]),
            V_ref=None if nm["V_ref"] is None else float(nm["V_ref"]),
            irls=IrlsConfig.from_dict(raw["irls"]),
            freeze_anomaly=bool(raw["flags"]["freeze_anomaly"]),
            terminal_constraint=raw["terminal_constraint"], eps_sing=float(raw["eps_sing"]), raw=raw)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario config: {exc}") from None


def load_config(path, **overrides) -> ScenarioConfig:
    """Load a scenario file; ``short_field`` / ``far_field`` name the bundled ones."""
    p = Path(path)
    if not p.exists() and str(path) in bundled_scenarios():
        text = resources.files("koopman_rendezvous.scenarios").joinpath(f"{path}.json").read_text()
    else:
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return from_dict(d, **overrides)


def bundled_scenarios() -> list[str]:
    files = resources.files("koopman_rendezvous.scenarios").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".json"))
