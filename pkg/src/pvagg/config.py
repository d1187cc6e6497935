"""Scenario configuration: JSON sections merged over the bundled defaults.

Sections: ``panel``, ``shared``, ``validation_fleet``, ``validation_commands``,
``grid``, ``controller``, ``event_fleet``, ``event``, ``mcs``, ``run``. A user
file only needs the keys it changes. Unknown sections or keys are errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .control import ControllerConfig
from .fleet import Fleet, SharedParams
from .grid import LfcParams
from .mcs import McsConfig


class ConfigError(ValueError):
    """Invalid scenario configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class PanelConfig:
    p_rated: float = 5695.0
    n_cells: int = 500
    ideality: float = 1.7
    r_s: float = 2.5
    r_sh: float = 2000.0
    voc_per_cell: float = 0.62
    t_ref: float = 300.0
    dv_min: float = -60.0
    dv_max: float = 20.0
    dv_step: float = 0.5
    s_min: float = 10.0
    s_max: float = 100.0
    s_step: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if f.name not in ("dv_min", "dv_max") and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be strictly positive")
        if not self.dv_min < 0 < self.dv_max:
            raise ValueError("voltage grid must straddle zero (dv_min < 0 < dv_max)")
        if not self.s_min < self.s_max <= 100:
            raise ValueError("irradiance grid needs s_min < s_max <= 100")

    def calibration_kwargs(self) -> dict:
        return {k: getattr(self, k) for k in ("p_rated", "n_cells", "ideality", "r_s", "r_sh", "voc_per_cell", "t_ref")}

    def grids(self) -> tuple[np.ndarray, np.ndarray]:
        nv = int(round((self.dv_max - self.dv_min) / self.dv_step)) + 1
        ns = int(round((self.s_max - self.s_min) / self.s_step)) + 1
        return np.linspace(self.dv_min, self.dv_max, nv), np.linspace(self.s_min, self.s_max, ns)


@dataclass(frozen=True)
class ValidationCommands:
    dV_PV: tuple
    dV_dc_ref: tuple
    published_dV_PV_a: float | None = None
    published_dV_dc_ref_a: float | None = None
    t_step: float = 1.5
    t_end: float = 4.0

    def __post_init__(self):
        if len(self.dV_PV) != len(self.dV_dc_ref):
            raise ValueError("dV_PV and dV_dc_ref must have the same length")
        if not 0 <= self.t_step < self.t_end:
            raise ValueError("need 0 <= t_step < t_end")


@dataclass(frozen=True)
class EventConfig:
    d_pu: float = 0.086
    t_event: float = 1.0
    t_end: float = 20.0
    stride: int = 20

    def __post_init__(self):
        if not np.isfinite(self.d_pu):
            raise ValueError("d_pu must be finite")
        if not 0 <= self.t_event < self.t_end:
            raise ValueError("need 0 <= t_event < t_end")
        if int(self.stride) < 1:
            raise ValueError("stride must be a positive integer")


@dataclass(frozen=True)
class RunConfig:
    dt: float = 5e-5
    dt_benchmark: float = 1e-5
    seed: int = 2020
    out: str = "out"
    parallel: int = 1

    def __post_init__(self):
        if not (self.dt > 0 and self.dt_benchmark > 0):
            raise ValueError("time steps must be positive")
        if self.dt > 1e-4:
            raise ValueError("dt above 1e-4 s is unstable for the 1 ms current loop")
        if self.seed < 0 or self.parallel < 1:
            raise ValueError("seed must be >= 0 and parallel >= 1")


@dataclass(frozen=True)
class ScenarioConfig:
    panel: PanelConfig
    shared: SharedParams
    validation_fleet: Fleet
    validation_commands: ValidationCommands
    grid: LfcParams
    controller: ControllerConfig
    event_fleet: Fleet
    event: EventConfig
    mcs: McsConfig
    run: RunConfig


def _simple(cls):
    def build(d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(unknown[0])
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    return build


def _keyed(from_dict):
    def build(d):
        try:
            return from_dict(d)
        except KeyError as exc:
            # from_dict reports "unknown ... key(s): ['x']"; surface the first name
            msg = str(exc.args[0]) if exc.args else ""
            if "[" in msg:
                raise KeyError(msg[msg.index("[") + 2:].split("'")[0]) from None
            raise
    return build


def _fleet(d):
    if "feeders" in d:
        if set(d) != {"feeders"}:
            raise KeyError(sorted(set(d) - {"feeders"})[0])
        for block in d["feeders"]:
            _fleet_block(block)
    else:
        _fleet_block(d)
    return Fleet.from_dict(d)


def _fleet_block(block):
    cols = ("S", "P_r_kw", "k_p", "k_i")
    extra = sorted(set(block) - set(cols))
    if extra:
        raise KeyError(extra[0])
    missing = [c for c in cols if c not in block]
    if missing:
        raise ValueError(f"missing column {missing[0]}")
    if len({len(block[c]) for c in cols}) != 1:
        raise ValueError("columns S, P_r_kw, k_p, k_i must have equal length")


_SECTIONS = {
    "panel": _simple(PanelConfig),
    "shared": _keyed(SharedParams.from_dict),
    "validation_fleet": _fleet,
    "validation_commands": _simple(ValidationCommands),
    "grid": _keyed(LfcParams.from_dict),
    "controller": _simple(ControllerConfig),
    "event_fleet": _fleet,
    "event": _simple(EventConfig),
    "mcs": _keyed(McsConfig.from_dict),
    "run": _simple(RunConfig),
}


def default_dict() -> dict:
    text = resources.files("pvagg").joinpath("data/default.json").read_text()
    return json.loads(text)


def merge(base: dict, override: dict) -> dict:
    """Section-wise update; fleet sections are replaced whole."""
    out = {k: dict(v) for k, v in base.items()}
    for section, values in override.items():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        if not isinstance(values, dict):
            raise ConfigError(section, "section must be a JSON object")
        if section.endswith("_fleet"):
            out[section] = dict(values)
        else:
            out[section].update(values)
    return out


def parse(raw: dict) -> ScenarioConfig:
    built = {}
    for section, builder in _SECTIONS.items():
        try:
            built[section] = builder(raw[section])
        except KeyError as exc:
            key = exc.args[0] if exc.args else "?"
            raise ConfigError(f"{section}.{key}", "unknown or missing key") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(section, str(exc)) from None
    vc, vf = built["validation_commands"], built["validation_fleet"]
    if len(vc.dV_PV) != len(vf):
        raise ConfigError("validation_commands.dV_PV", f"length {len(vc.dV_PV)} does not match fleet size {len(vf)}")
    return ScenarioConfig(**built)


def load_config(path=None, overrides: dict | None = None) -> ScenarioConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (section -> values)."""
    raw = default_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(str(path), "top level must be a JSON object")
        raw = merge(raw, user)
    if overrides:
        raw = merge(raw, overrides)
    return parse(raw)
