"""Deterministic closed-loop harness: perturbed plant, noise, 25 Hz controller.

The plant is the same bicycle model as the prediction model but with
multiplicatively perturbed parameters, an actuator-delay FIFO, a steering
rate limit and its own saturation check, integrated at finer RK4 substeps.
Measurements add seeded Gaussian noise from a counter-based generator
(Philox), so every run is bitwise reproducible from (scenario, seed).

Each control period runs exactly one plan/solve cycle:
measure -> gate obstacles -> localize -> reference window -> corridor ->
build NLP -> warm-started SQP -> apply the first control.  Non-converged
solves still apply the first control of the best iterate and are flagged
in the log.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import planner as pl
from . import vehicle as vm
from .ocp import OcpConfig, build_nlp
from .sqp import CONVERGED, SqpSolver, WarmStart, warm_start_shift

__all__ = [
    "PlantConfig",
    "Plant",
    "NmpcController",
    "StepRecord",
    "RunLog",
    "run_closed_loop",
    "RUNLOG_COLUMNS",
]

DIVERGENCE_LIMIT = 20.0  # m of position error that aborts a run

DEFAULT_PARAM_SCALE = {"mass": 1.1, "kf": 0.85, "kr": 0.85, "cr2": 1.2}
DEFAULT_NOISE_STD = (0.05, 0.05, 0.005, 0.05, 0.05, 0.005)


@dataclass(frozen=True)
class PlantConfig:
    """Mismatch, noise and actuation model of the simulated vehicle."""

    param_scale: dict = field(default_factory=lambda: dict(DEFAULT_PARAM_SCALE))
    sensor_noise_std: tuple = DEFAULT_NOISE_STD
    actuator_delay: int = 1  # whole control steps
    steer_rate_limit: float = 0.8  # rad/s
    integrator_substeps: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.actuator_delay < 0:
            raise ValueError("actuator delay must be >= 0")
        if self.integrator_substeps < 8:
            raise ValueError("plant integrates with at least 8 substeps")
        for name, scale in self.param_scale.items():
            if not 0.5 <= scale <= 2.0:
                raise ValueError(f"param_scale[{name!r}] outside [0.5, 2.0]")
        if len(self.sensor_noise_std) != vm.NX:
            raise ValueError("sensor_noise_std must have 6 entries")


class Plant:
    """Perturbed-parameter bicycle plant with delay, rate limit and saturation."""

    def __init__(self, params: vm.VehicleParams, config: PlantConfig, init_state, dt,
                 delta_bounds, u_init=(0.0, 0.0)):
        self.params = params.scaled(config.param_scale)
        self.config = config
        self.dt = float(dt)
        self.delta_bounds = tuple(delta_bounds)
        self.state = np.asarray(init_state, dtype=float).copy()
        self._queue = deque([np.asarray(u_init, dtype=float)] * config.actuator_delay)
        self._delta_applied = float(u_init[0])

    def measure(self, rng) -> np.ndarray:
        noise = np.asarray(self.config.sensor_noise_std) * rng.standard_normal(vm.NX)
        return self.state + noise

    def step(self, commanded) -> np.ndarray:
        """Advance one control period; returns the control actually applied."""
        commanded = np.asarray(commanded, dtype=float)
        if self.config.actuator_delay > 0:
            self._queue.append(commanded.copy())
            target = self._queue.popleft()
        else:
            target = commanded
        max_move = self.config.steer_rate_limit * self.dt
        delta = float(np.clip(target[0], self._delta_applied - max_move, self._delta_applied + max_move))
        # saturation re-check, independent of whatever the solver promised
        delta = float(np.clip(delta, *self.delta_bounds))
        tr = float(np.clip(target[1], -1.0, 1.0))
        applied = np.array([delta, tr])
        self._delta_applied = delta
        self.state = vm.rk4_step_array(
            self.state, applied, self.params, self.dt, self.config.integrator_substeps
        )
        return applied


@dataclass
class StepDiag:
    """Per-step controller internals kept in memory for verification."""

    k_star: int
    window: object
    corridor: object
    measured: np.ndarray
    u_last_prev: np.ndarray
    z: np.ndarray
    lam_g: np.ndarray
    lam_x: np.ndarray
    stats: object


class NmpcController:
    """Planner + OCP + SQP assembled into the 25 Hz trajectory-tracking loop."""

    def __init__(self, path: pl.GlobalPath, obstacles, ocp_config: OcpConfig,
                 params: vm.VehicleParams, safe_duration, lateral_margin,
                 u_init=(0.0, 0.0), sqp_solver: Optional[SqpSolver] = None):
        self.path = path
        self.obstacles = list(obstacles)
        self.cfg = ocp_config
        self.params = params
        self.safe_duration = float(safe_duration)
        self.lateral_margin = float(lateral_margin)
        self.solver = sqp_solver or SqpSolver()
        self.u_last = np.asarray(u_init, dtype=float)
        self._hint = None
        self._prev = None  # (z, lam_g, lam_x, active_set, penalty)

    def _cold_start(self, nlp, window, measured):
        states = window.states.copy()
        states[0] = measured
        tr_ff = float(vm.resistance(max(window.v[0], 0.0), self.params)) / (
            self.params.torque_max / self.params.wheel_radius
        )
        controls = np.tile([0.0, np.clip(tr_ff, -1.0, 1.0)], (self.cfg.n_horizon, 1))
        return nlp.layout.pack(states, controls)

    def step(self, measured, t):
        measured = np.asarray(measured, dtype=float)
        self.obstacles = pl.gate_obstacles(self.obstacles, measured, t)
        k_star = pl.localize_closest_point(self.path, measured[3], measured[4], hint=self._hint)
        self._hint = k_star
        window = pl.extract_reference_window(self.path, k_star, self.cfg.n_horizon, self.cfg.dt)
        corridor = pl.build_corridor(
            window,
            [ob for ob in self.obstacles if ob.active],
            self.safe_duration,
            float(window.v[0]),
            self.path.lane_half_width,
            self.lateral_margin,
        )
        nlp = build_nlp(measured, corridor.window, corridor, self.u_last, self.cfg, self.params)

        if self._prev is None:
            z0 = self._cold_start(nlp, corridor.window, measured)
            warm = None
        else:
            z_prev, lam_g, lam_x, active, penalty = self._prev
            z0 = warm_start_shift(z_prev, nlp.layout, corridor)
            warm = WarmStart(
                lam_g=nlp.layout.shift_constraint_duals(lam_g),
                lam_x=nlp.layout.shift_bound_duals(lam_x),
                active_set=nlp.layout.shift_active_set(active),
                penalty=penalty,
            )
        res = self.solver.solve(nlp, z0, warm=warm)
        self._prev = (res.x, res.lam_g, res.lam_x, res.active_set,
                      min(2.0 * float(np.max(np.abs(res.lam_g), initial=1.0)), 1e6))

        _, controls = nlp.layout.unpack(res.x)
        u_cmd = np.array([
            np.clip(controls[0, 0], *self.cfg.delta_bounds),
            np.clip(controls[0, 1], -1.0, 1.0),
        ])
        diag = StepDiag(
            k_star=k_star,
            window=window,
            corridor=corridor,
            measured=measured.copy(),
            u_last_prev=self.u_last.copy(),
            z=res.x,
            lam_g=res.lam_g,
            lam_x=res.lam_x,
            stats=res.stats,
        )
        self.u_last = u_cmd.copy()
        return u_cmd, diag


RUNLOG_COLUMNS = (
    "step", "t_s",
    "vx_true", "vy_true", "omega_true", "x_true", "y_true", "psi_true",
    "vx_meas", "vy_meas", "omega_meas", "x_meas", "y_meas", "psi_meas",
    "v_ref_mps", "x_ref_m", "y_ref_m", "psi_ref_rad", "ref_shift_m",
    "corridor_left_m", "corridor_right_m",
    "delta_cmd_rad", "tr_cmd", "delta_applied_rad", "tr_applied",
    "status", "sqp_iters", "qp_iters", "primal_inf", "dual_inf",
    "solve_time_ms", "t_qp_ms", "t_linesearch_ms", "t_costcon_ms",
    "t_grad_ms", "t_hess_ms", "t_jac_ms",
    "n_active_obstacles", "obstacle_clearance_m",
    "lateral_error_m", "heading_error_rad", "vx_error_mps", "corridor_violation_m",
)


@dataclass
class StepRecord:
    values: dict

    def row(self):
        return [self.values[c] for c in RUNLOG_COLUMNS]


@dataclass
class RunLog:
    scenario: str
    seed: int
    dt: float
    records: list = field(default_factory=list)
    diag: list = field(default_factory=list)  # StepDiag, in-memory only
    completed: bool = False
    diverged: bool = False
    abort_reason: str = ""

    def column(self, name):
        return np.array([r.values[name] for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_COLUMNS)
            for rec in self.records:
                w.writerow([v if isinstance(v, str) else repr(float(v)) if isinstance(v, (float, np.floating)) else v
                            for v in rec.row()])


def _physical_obstacles(obstacles, t):
    return [ob for ob in obstacles if ob.appear_time is None or t >= ob.appear_time]


def run_closed_loop(scenario, controller: NmpcController, plant: Plant) -> RunLog:
    """Drive the controller against the plant until the path ends.

    One solve per sample period, a 20 m position-error divergence guard,
    and per-step records sufficient to recompute every summary statistic.
    """
    path = controller.path
    dt = controller.cfg.dt
    rng = np.random.Generator(np.random.Philox(plant.config.seed))
    log = RunLog(scenario=scenario.name, seed=plant.config.seed, dt=dt)
    s_stop = path.s[-1] - scenario.stop_margin

    for step in range(scenario.max_steps):
        t = step * dt
        measured = plant.measure(rng)
        try:
            u_cmd, diag = controller.step(measured, t)
        except pl.CorridorEmptyError as err:
            log.abort_reason = f"corridor_empty: {err}"
            break
        truth_before = plant.state.copy()
        applied = plant.step(u_cmd)

        win = diag.corridor.window
        nrm = (-np.sin(win.psi[0]), np.cos(win.psi[0]))
        lat_err = nrm[0] * (truth_before[3] - win.x[0]) + nrm[1] * (truth_before[4] - win.y[0])
        head_err = truth_before[5] - win.psi[0]
        vx_err = truth_before[0] - win.v[0]
        violation = max(lat_err - diag.corridor.left[0], diag.corridor.right[0] - lat_err, 0.0)

        phys = _physical_obstacles(controller.obstacles, t)
        clearance = min(
            (pl.obstacle_clearance(
                (truth_before[3], truth_before[4]), truth_before[5],
                scenario.ego_length, scenario.ego_width, ob)
             for ob in phys),
            default=np.inf,
        )

        st = diag.stats
        ms = {k: 1e3 * v for k, v in st.timings.items()}
        rec = dict(
            step=step, t_s=t,
            vx_true=truth_before[0], vy_true=truth_before[1], omega_true=truth_before[2],
            x_true=truth_before[3], y_true=truth_before[4], psi_true=truth_before[5],
            vx_meas=measured[0], vy_meas=measured[1], omega_meas=measured[2],
            x_meas=measured[3], y_meas=measured[4], psi_meas=measured[5],
            v_ref_mps=win.v[0], x_ref_m=win.x[0], y_ref_m=win.y[0], psi_ref_rad=win.psi[0],
            ref_shift_m=diag.corridor.shift[0],
            corridor_left_m=diag.corridor.left[0], corridor_right_m=diag.corridor.right[0],
            delta_cmd_rad=u_cmd[0], tr_cmd=u_cmd[1],
            delta_applied_rad=applied[0], tr_applied=applied[1],
            status=st.status, sqp_iters=st.sqp_iterations, qp_iters=st.qp_iterations_total,
            primal_inf=st.primal_infeasibility, dual_inf=st.dual_infeasibility,
            solve_time_ms=1e3 * st.solve_time_s,
            t_qp_ms=ms["qp"], t_linesearch_ms=ms["line_search"],
            t_costcon_ms=ms["cost_and_constraints"], t_grad_ms=ms["gradient"],
            t_hess_ms=ms["hessian"], t_jac_ms=ms["jacobian"],
            n_active_obstacles=sum(ob.active for ob in controller.obstacles),
            obstacle_clearance_m=clearance,
            lateral_error_m=lat_err, heading_error_rad=head_err, vx_error_mps=vx_err,
            corridor_violation_m=violation,
        )
        log.records.append(StepRecord(rec))
        log.diag.append(diag)

        ref_err = np.hypot(truth_before[3] - win.x[0], truth_before[4] - win.y[0])
        if ref_err > DIVERGENCE_LIMIT:
            log.diverged = True
            log.abort_reason = f"divergence guard at step {step}: {ref_err:.1f} m"
            break
        if path.s[diag.k_star] >= s_stop:
            log.completed = True
            break
    else:
        log.abort_reason = "max_steps reached before path end"
    return log
