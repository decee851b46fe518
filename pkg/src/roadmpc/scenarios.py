"""Scenario files: schema, validation, path synthesis and stack assembly.

Scenarios are YAML with units spelled out in the key names.  Loading is
strict: unknown keys are rejected and every numeric field is range-checked,
with errors naming the offending field.  A scenario fully determines a run
up to the RNG seed.

Three fixtures ship with the package: ``dlc80`` (ISO 3888-1 style double
lane change at 80 km/h; the gate geometry is parameterized and the defaults
follow the published standard layout, not any single test campaign),
``parking10`` (low-speed lane with a pedestrian-sized obstacle revealed at
10 m) and ``alden60`` (500 m lane keep at 60 km/h with a vehicle-sized
obstacle and a 1.2 s safe duration).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .ocp import OcpConfig
from .planner import GlobalPath, Obstacle, localize_closest_point
from .simulation import NmpcController, Plant, PlantConfig
from .vehicle import VehicleParams

__all__ = [
    "Scenario",
    "ScenarioError",
    "load_scenario",
    "fixture_path",
    "list_fixtures",
    "build_controller",
    "build_plant",
    "initial_state",
]


class ScenarioError(ValueError):
    """Scenario file failed to parse or validate; message names the field."""


@dataclass
class Scenario:
    name: str
    path: GlobalPath
    obstacles: list
    params: VehicleParams
    ocp: OcpConfig
    plant: PlantConfig
    safe_duration: float
    lateral_margin: float
    ego_length: float
    ego_width: float
    max_steps: int
    stop_margin: float
    start_lateral_offset: float


# -- small schema helpers ---------------------------------------------------


def _section(raw, name, required=True):
    if name not in raw:
        if required:
            raise ScenarioError(f"missing required section '{name}'")
        return {}
    out = raw[name]
    if out is None:
        return {}
    if not isinstance(out, dict):
        raise ScenarioError(f"section '{name}' must be a mapping")
    return out


def _check_keys(section, allowed, where):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ScenarioError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _num(section, key, where, lo=None, hi=None, default=None):
    if key not in section or section[key] is None:
        if default is None:
            raise ScenarioError(f"missing field {where}.{key}")
        return default
    try:
        val = float(section[key])
    except (TypeError, ValueError):
        raise ScenarioError(f"field {where}.{key} must be a number") from None
    if lo is not None and val < lo:
        raise ScenarioError(f"field {where}.{key} = {val} below minimum {lo}")
    if hi is not None and val > hi:
        raise ScenarioError(f"field {where}.{key} = {val} above maximum {hi}")
    return val


def _vec(section, key, where, size, default=None):
    if key not in section or section[key] is None:
        if default is None:
            raise ScenarioError(f"missing field {where}.{key}")
        return tuple(default)
    val = section[key]
    if not isinstance(val, (list, tuple)) or len(val) != size:
        raise ScenarioError(f"field {where}.{key} must be a list of {size} numbers")
    return tuple(float(v) for v in val)


# -- path synthesis ----------------------------------------------------------


def _synthesize_path(sec) -> GlobalPath:
    kind = sec.get("kind")
    if kind not in ("straight", "arc", "dlc", "csv"):
        raise ScenarioError("path.kind must be one of straight|arc|dlc|csv")
    lane_hw = _num(sec, "lane_half_width_m", "path", lo=0.5, hi=10.0)

    if kind == "csv":
        _check_keys(sec, {"kind", "file", "lane_half_width_m"}, "path")
        fname = sec.get("file")
        if not fname:
            raise ScenarioError("missing field path.file")
        if not Path(fname).exists():
            raise ScenarioError(f"path.file does not exist: {fname}")
        return GlobalPath.from_csv(fname, lane_half_width=lane_hw)

    speed = _num(sec, "speed_kph", "path", lo=1.0, hi=200.0) / 3.6
    ds = _num(sec, "sample_spacing_m", "path", lo=0.05, hi=5.0, default=0.5)

    if kind == "straight":
        _check_keys(sec, {"kind", "length_m", "speed_kph", "sample_spacing_m", "lane_half_width_m"}, "path")
        length = _num(sec, "length_m", "path", lo=10.0)
        x = np.arange(0.0, length + 0.5 * ds, ds)
        return GlobalPath.from_arrays(x, np.zeros_like(x), np.zeros_like(x),
                                      np.full_like(x, speed), lane_half_width=lane_hw)

    if kind == "arc":
        _check_keys(sec, {"kind", "length_m", "radius_m", "speed_kph", "sample_spacing_m", "lane_half_width_m"}, "path")
        length = _num(sec, "length_m", "path", lo=10.0)
        radius = _num(sec, "radius_m", "path", lo=10.0)
        s = np.arange(0.0, length + 0.5 * ds, ds)
        theta = s / radius
        x = radius * np.sin(theta)
        y = radius * (1.0 - np.cos(theta))
        return GlobalPath.from_arrays(x, y, theta, np.full_like(s, speed), lane_half_width=lane_hw)

    # double lane change: piecewise sections with cosine-blend offsets.
    # Section lengths/offset default to the ISO 3888-1 part-1 layout
    # (15/30/25/25/15 m, 3.5 m lateral offset); externally sourced numbers,
    # adjustable per scenario.
    allowed = {"kind", "speed_kph", "sample_spacing_m", "lane_half_width_m",
               "lead_in_m", "entry_m", "change1_m", "side_m", "change2_m",
               "exit_m", "tail_m", "offset_m"}
    _check_keys(sec, allowed, "path")
    lead = _num(sec, "lead_in_m", "path", lo=0.0, default=40.0)
    entry = _num(sec, "entry_m", "path", lo=1.0, default=15.0)
    ch1 = _num(sec, "change1_m", "path", lo=5.0, default=30.0)
    side = _num(sec, "side_m", "path", lo=1.0, default=25.0)
    ch2 = _num(sec, "change2_m", "path", lo=5.0, default=25.0)
    exit_ = _num(sec, "exit_m", "path", lo=1.0, default=15.0)
    tail = _num(sec, "tail_m", "path", lo=0.0, default=40.0)
    off = _num(sec, "offset_m", "path", lo=0.5, default=3.5)

    x = np.arange(0.0, lead + entry + ch1 + side + ch2 + exit_ + tail + 0.5 * ds, ds)
    y = np.zeros_like(x)
    dy = np.zeros_like(x)
    s1 = lead + entry
    s2 = s1 + ch1
    s3 = s2 + side
    s4 = s3 + ch2
    ramp1 = (x >= s1) & (x < s2)
    u1 = (x[ramp1] - s1) / ch1
    y[ramp1] = 0.5 * off * (1.0 - np.cos(np.pi * u1))
    dy[ramp1] = 0.5 * off * np.pi / ch1 * np.sin(np.pi * u1)
    y[(x >= s2) & (x < s3)] = off
    ramp2 = (x >= s3) & (x < s4)
    u2 = (x[ramp2] - s3) / ch2
    y[ramp2] = 0.5 * off * (1.0 + np.cos(np.pi * u2))
    dy[ramp2] = -0.5 * off * np.pi / ch2 * np.sin(np.pi * u2)
    psi = np.arctan(dy)
    return GlobalPath.from_arrays(x, y, psi, np.full_like(x, speed), lane_half_width=lane_hw)


# -- scenario loading ---------------------------------------------------------

_TOP_KEYS = {"name", "path", "vehicle", "ego", "controller", "planner", "plant", "obstacles", "run"}

_VEHICLE_KEYS = {
    "mass_kg": ("mass", 100.0, 1e5),
    "yaw_inertia_kgm2": ("inertia_z", 100.0, 1e6),
    "cog_to_front_m": ("lf", 0.3, 5.0),
    "cog_to_rear_m": ("lr", 0.3, 5.0),
    "cornering_stiffness_front_nprad": ("kf", 1e3, 1e6),
    "cornering_stiffness_rear_nprad": ("kr", 1e3, 1e6),
    "max_torque_nm": ("torque_max", 50.0, 2e4),
    "wheel_radius_m": ("wheel_radius", 0.1, 1.0),
    "rolling_resistance_n": ("cr0", 0.0, 2e3),
    "drag_kgpm": ("cr2", 0.0, 10.0),
    "slip_velocity_floor_mps": ("vx_eps", 0.01, 5.0),
}


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file; raises ScenarioError on any defect."""
    path = Path(path)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except yaml.YAMLError as err:
        raise ScenarioError(f"could not parse {path}: {err}") from None
    if not isinstance(raw, dict):
        raise ScenarioError(
            "scenario file is empty or not a mapping; required sections: "
            + ", ".join(sorted(_TOP_KEYS - {"obstacles"}))
        )
    _check_keys(raw, _TOP_KEYS, "scenario")

    name = raw.get("name")
    if not name or not isinstance(name, str):
        raise ScenarioError("missing field name")

    gpath = _synthesize_path(_section(raw, "path"))

    vsec = _section(raw, "vehicle")
    _check_keys(vsec, _VEHICLE_KEYS, "vehicle")
    vkw = {}
    for key, (attr, lo, hi) in _VEHICLE_KEYS.items():
        default = 0.5 if attr == "vx_eps" else None
        vkw[attr] = _num(vsec, key, "vehicle", lo=lo, hi=hi, default=default)
    params = VehicleParams(**vkw)

    esec = _section(raw, "ego")
    _check_keys(esec, {"length_m", "width_m"}, "ego")
    ego_length = _num(esec, "length_m", "ego", lo=1.0, hi=20.0)
    ego_width = _num(esec, "width_m", "ego", lo=0.5, hi=5.0)

    csec = _section(raw, "controller")
    _check_keys(csec, {"horizon_steps", "sample_time_s", "rk4_substeps", "state_weights",
                       "input_weights", "input_rate_weights", "terminal_weights",
                       "vx_bounds_mps", "vy_bounds_mps", "yaw_rate_bounds_radps",
                       "steering_bounds_rad", "terminal_error_box"}, "controller")
    n_horizon = int(_num(csec, "horizon_steps", "controller", lo=1, hi=200, default=30))
    box = csec.get("terminal_error_box")
    try:
        ocp = OcpConfig(
            n_horizon=n_horizon,
            dt=_num(csec, "sample_time_s", "controller", lo=1e-3, hi=1.0, default=0.04),
            rk4_substeps=int(_num(csec, "rk4_substeps", "controller", lo=1, hi=64, default=4)),
            q_diag=_vec(csec, "state_weights", "controller", 6),
            r_diag=_vec(csec, "input_weights", "controller", 2),
            s_diag=_vec(csec, "input_rate_weights", "controller", 2),
            p_diag=_vec(csec, "terminal_weights", "controller", 6),
            vx_bounds=_vec(csec, "vx_bounds_mps", "controller", 2, default=(-2.0, 45.0)),
            vy_bounds=_vec(csec, "vy_bounds_mps", "controller", 2, default=(-4.0, 4.0)),
            omega_bounds=_vec(csec, "yaw_rate_bounds_radps", "controller", 2, default=(-1.5, 1.5)),
            delta_bounds=_vec(csec, "steering_bounds_rad", "controller", 2, default=(-0.5, 0.5)),
            terminal_error_box=None if box is None else _vec(csec, "terminal_error_box", "controller", 6),
        )
    except ValueError as err:
        raise ScenarioError(f"controller: {err}") from None

    psec = _section(raw, "planner")
    _check_keys(psec, {"safe_duration_s", "lateral_margin_m"}, "planner")
    safe_duration = _num(psec, "safe_duration_s", "planner", lo=0.1, hi=10.0)
    lateral_margin = _num(psec, "lateral_margin_m", "planner", lo=0.0, hi=5.0)

    plsec = _section(raw, "plant")
    _check_keys(plsec, {"param_scale", "sensor_noise_std", "actuator_delay_steps",
                        "steer_rate_limit_radps", "integrator_substeps", "seed"}, "plant")
    scale_raw = plsec.get("param_scale") or {}
    if not isinstance(scale_raw, dict):
        raise ScenarioError("plant.param_scale must be a mapping")
    scale = {}
    for key, val in scale_raw.items():
        if key not in _VEHICLE_KEYS:
            raise ScenarioError(f"plant.param_scale key {key!r} is not a vehicle field")
        scale[_VEHICLE_KEYS[key][0]] = float(val)
    noise = _vec(plsec, "sensor_noise_std", "plant", 6, default=(0.05, 0.05, 0.005, 0.05, 0.05, 0.005))
    try:
        plant = PlantConfig(
            param_scale=scale,
            sensor_noise_std=noise,
            actuator_delay=int(_num(plsec, "actuator_delay_steps", "plant", lo=0, hi=20, default=1)),
            steer_rate_limit=_num(plsec, "steer_rate_limit_radps", "plant", lo=0.05, hi=10.0, default=0.8),
            integrator_substeps=int(_num(plsec, "integrator_substeps", "plant", lo=8, hi=256, default=8)),
            seed=int(_num(plsec, "seed", "plant", lo=0, default=0)),
        )
    except ValueError as err:
        raise ScenarioError(f"plant: {err}") from None

    obstacles = []
    for i, osec in enumerate(raw.get("obstacles") or []):
        where = f"obstacles[{i}]"
        if not isinstance(osec, dict):
            raise ScenarioError(f"{where} must be a mapping")
        _check_keys(osec, {"x_m", "y_m", "length_m", "width_m", "detection_range_m", "appear_time_s"}, where)
        ox = _num(osec, "x_m", where)
        oy = _num(osec, "y_m", where)
        k_near = localize_closest_point(gpath, ox, oy)
        appear = osec.get("appear_time_s")
        obstacles.append(Obstacle(
            x=ox,
            y=oy,
            length=_num(osec, "length_m", where, lo=0.05, hi=50.0),
            width=_num(osec, "width_m", where, lo=0.05, hi=20.0),
            detection_range=_num(osec, "detection_range_m", where, lo=0.5, hi=500.0),
            heading=float(gpath.psi[k_near]),
            appear_time=None if appear is None else float(appear),
        ))

    rsec = _section(raw, "run", required=False)
    _check_keys(rsec, {"max_steps", "stop_margin_m", "start_lateral_offset_m"}, "run")
    return Scenario(
        name=name,
        path=gpath,
        obstacles=obstacles,
        params=params,
        ocp=ocp,
        plant=plant,
        safe_duration=safe_duration,
        lateral_margin=lateral_margin,
        ego_length=ego_length,
        ego_width=ego_width,
        max_steps=int(_num(rsec, "max_steps", "run", lo=1, hi=100000, default=5000)),
        stop_margin=_num(rsec, "stop_margin_m", "run", lo=0.0, default=5.0),
        start_lateral_offset=_num(rsec, "start_lateral_offset_m", "run", lo=-3.0, hi=3.0, default=0.0),
    )


def fixture_path(name: str) -> Path:
    """Filesystem path of a shipped scenario fixture (dlc80, parking10, alden60)."""
    base = resources.files("roadmpc").joinpath("fixtures")
    p = Path(str(base.joinpath(f"{name}.yaml")))
    if not p.exists():
        raise ScenarioError(f"no fixture named {name!r}; available: {list_fixtures()}")
    return p


def list_fixtures():
    base = Path(str(resources.files("roadmpc").joinpath("fixtures")))
    return sorted(p.stem for p in base.glob("*.yaml"))


# -- stack assembly ------------------------------------------------------------


def initial_state(scenario: Scenario) -> np.ndarray:
    """Start pose: first path point plus the configured lateral offset, at v_ref."""
    p = scenario.path
    off = scenario.start_lateral_offset
    return np.array([
        p.v[0], 0.0, 0.0,
        p.x[0] - off * np.sin(p.psi[0]),
        p.y[0] + off * np.cos(p.psi[0]),
        p.psi[0],
    ])


def build_controller(scenario: Scenario, sqp_solver=None) -> NmpcController:
    return NmpcController(
        path=scenario.path,
        obstacles=scenario.obstacles,
        ocp_config=scenario.ocp,
        params=scenario.params,
        safe_duration=scenario.safe_duration,
        lateral_margin=scenario.lateral_margin,
        sqp_solver=sqp_solver,
    )


def build_plant(scenario: Scenario, seed: Optional[int] = None) -> Plant:
    cfg = scenario.plant
    if seed is not None:
        cfg = PlantConfig(
            param_scale=cfg.param_scale,
            sensor_noise_std=cfg.sensor_noise_std,
            actuator_delay=cfg.actuator_delay,
            steer_rate_limit=cfg.steer_rate_limit,
            integrator_substeps=cfg.integrator_substeps,
            seed=seed,
        )
    return Plant(
        params=scenario.params,
        config=cfg,
        init_state=initial_state(scenario),
        dt=scenario.ocp.dt,
        delta_bounds=scenario.ocp.delta_bounds,
    )
