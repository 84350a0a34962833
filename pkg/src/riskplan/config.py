"""Human-readable YAML configuration for worlds, episodes and studies.

Every default in the library is reproduced (with units) by
:func:`write_default_config`; :func:`load_config` accepts any subset of
keys and fills the rest from the dataclass defaults.
"""

import dataclasses

import yaml

from .behaviors import BehaviorConfig
from .episode import SimConfig
from .mapping import RiskFactorConfig
from .mpc import MpcConfig
from .sensor import NoiseConfig
from .world import WorldSpec

_SECTIONS = {
    "world": WorldSpec,
    "noise": NoiseConfig,
    "risk": RiskFactorConfig,
    "mpc": MpcConfig,
    "behavior": BehaviorConfig,
}

_SIM_SCALARS = (
    "sensor_range", "replan_every", "step_cap", "goal_tolerance",
    "lethal_inflation_cells", "unreachable_patience", "footprint_radius",
    "mapper_alpha_floor", "geo_lambda",
)

_STUDY_DEFAULTS = {
    "runs": 50,
    "alphas": [0.05, 0.1, 0.5, 0.95],
    "base_seed": 0,
}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _section_dict(obj):
    return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def config_dict(sim=None, world=None, study=None):
    """Full configuration dictionary with every default filled in."""
    sim = sim if sim is not None else SimConfig()
    world = world if world is not None else WorldSpec()
    out = {
        "world": _section_dict(world),
        "sim": {k: _plain(getattr(sim, k)) for k in _SIM_SCALARS},
        "noise": _section_dict(sim.noise),
        "risk": _section_dict(sim.risk),
        "mpc": _section_dict(sim.mpc),
        "behavior": _section_dict(sim.behavior),
        "study": dict(_STUDY_DEFAULTS if study is None else study),
    }
    return out


def _build(cls, payload):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - fields
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in payload:
            v = payload[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) and f.name != "alphas" else v
    return cls(**kwargs)


def from_dict(payload):
    """(WorldSpec, SimConfig, study dict) from a configuration mapping."""
    payload = payload or {}
    world = _build(WorldSpec, payload.get("world", {}))
    sim = SimConfig(
        noise=_build(NoiseConfig, payload.get("noise", {})),
        risk=_build(RiskFactorConfig, payload.get("risk", {})),
        mpc=_build(MpcConfig, payload.get("mpc", {})),
        behavior=_build(BehaviorConfig, payload.get("behavior", {})),
    )
    for k, v in payload.get("sim", {}).items():
        if k not in _SIM_SCALARS:
            raise ValueError(f"unknown sim key: {k}")
        setattr(sim, k, v)
    study = dict(_STUDY_DEFAULTS)
    study.update(payload.get("study", {}))
    return world, sim, study


def load_config(path):
    """Read a YAML config file; missing keys keep their defaults."""
    with open(path) as fh:
        payload = yaml.safe_load(fh)
    return from_dict(payload)


def save_config(path, sim=None, world=None, study=None):
    with open(path, "w") as fh:
        yaml.safe_dump(config_dict(sim, world, study), fh, sort_keys=False)


_HEADER = """\
# riskplan simulation configuration.
# Units: meters, seconds, radians unless stated otherwise.
# Every key is optional; omitted keys keep the documented default.
#
# world:    synthetic ground-truth generation (seed, size, resolution,
#           hazard field correlation length and lethal fraction, counts of
#           stamped walls / pits / water patches / ramps / low ceilings,
#           goal distance).
# sim:      episode wiring (sensor range, geometric replan cadence,
#           step cap, goal tolerance, lethal-mask inflation in cells).
# noise:    sensor model (elevation noise at zero range and per meter,
#           intensity noise).
# risk:     traversability factor weights, detection thresholds and their
#           growth with range, variance model, CVaR lethal threshold.
# mpc:      kinodynamic planner (model, horizon, dt, limits, risk-speed
#           coupling gamma_v, obstacle threshold rho_max, SQP iterations,
#           linesearch bounds, trajectory library shape).
# behavior: recovery logic (risk-level decrement and floor, tilt limits,
#           wiggle timing, escape-lethal dwell).
# study:    Monte Carlo defaults (runs per risk level, risk levels,
#           base seed for paired worlds).
"""


def write_default_config(path, sim=None, world=None, study=None):
    """Write the fully-documented default configuration file."""
    body = yaml.safe_dump(config_dict(sim, world, study), sort_keys=False)
    with open(path, "w") as fh:
        fh.write(_HEADER + body)
