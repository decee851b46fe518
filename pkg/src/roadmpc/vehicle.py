"""Six-state bicycle model with a linear tire law and RK4 discretization.

The state ordering is fixed everywhere as (vx, vy, omega, X, Y, psi):
body-frame longitudinal/lateral velocity, yaw rate, global position and
heading.  Controls are the front steering angle and a normalized throttle.

The same continuous dynamics serve controller prediction and the plant:
``dynamics``/``rk4_step`` accept plain floats, numpy batches and
:class:`~roadmpc.autodiff.DiffScalar` (for derivative cross checks), while
``rk4_step_sens`` propagates exact first/second-order sensitivities through
the integrator in vectorized form for the optimizer's hot path.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad

__all__ = [
    "VehicleParams",
    "VehicleState",
    "ControlInput",
    "TireForces",
    "slip_angles",
    "tire_forces",
    "resistance",
    "dynamics",
    "dynamics_array",
    "rk4_step",
    "rk4_step_array",
    "rk4_step_sens",
]

# width of the smooth sign surrogate used for the resistance force (m/s)
_SIGN_WIDTH = 0.1

NX = 6
NU = 2
NW = NX + NU  # stage inputs of the discrete dynamics: (state, control)


@dataclass(frozen=True)
class VehicleParams:
    """Bicycle-model parameters; values come from the scenario config."""

    mass: float  # kg
    inertia_z: float  # kg m^2
    lf: float  # CoG to front axle, m
    lr: float  # CoG to rear axle, m
    kf: float  # front cornering stiffness, N/rad
    kr: float  # rear cornering stiffness, N/rad
    torque_max: float  # N m
    wheel_radius: float  # m
    cr0: float  # zeroth-order friction, N
    cr2: float  # second-order friction, kg/m
    vx_eps: float = 0.5  # slip-angle velocity floor, m/s

    def __post_init__(self):
        for name in ("mass", "inertia_z", "lf", "lr", "torque_max", "wheel_radius", "vx_eps"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"VehicleParams.{name} must be strictly positive")

    @property
    def drive_gain(self):
        """Per-axle drive force per unit throttle, 0.5 * Tmax / Rw."""
        return 0.5 * self.torque_max / self.wheel_radius

    def scaled(self, factors):
        """Return params with fields multiplied by ``factors`` (name -> scale)."""
        known = {f.name for f in fields(self)}
        unknown = set(factors) - known
        if unknown:
            raise ValueError(f"unknown VehicleParams fields: {sorted(unknown)}")
        return replace(self, **{k: getattr(self, k) * v for k, v in factors.items()})


@dataclass(frozen=True)
class VehicleState:
    vx: float
    vy: float
    omega: float
    x: float
    y: float
    psi: float

    def as_array(self):
        return np.array([self.vx, self.vy, self.omega, self.x, self.y, self.psi])

    @classmethod
    def from_array(cls, arr):
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class ControlInput:
    delta: float  # front steering angle, rad
    tr: float  # normalized throttle/brake in [-1, 1]

    def as_array(self):
        return np.array([self.delta, self.tr])

    @classmethod
    def from_array(cls, arr):
        return cls(float(arr[0]), float(arr[1]))

    def clipped(self, delta_min, delta_max):
        return ControlInput(
            float(np.clip(self.delta, delta_min, delta_max)),
            float(np.clip(self.tr, -1.0, 1.0)),
        )


@dataclass(frozen=True)
class TireForces:
    fxf: float  # N
    fxr: float  # N
    fyf: float  # N
    fyr: float  # N
    fres: float  # N


# -- component kernels (generic over float / ndarray / DiffScalar) ----------


def _slip_c(vx, vy, omega, delta, p):
    vf = ad.maximum(vx, p.vx_eps)
    alpha_f = -ad.arctan((omega * p.lf + vy) / vf) + delta
    alpha_r = ad.arctan((omega * p.lr - vy) / vf)
    return alpha_f, alpha_r


def _resistance_c(vx, p):
    return ad.tanh(vx / _SIGN_WIDTH) * (p.cr0 + p.cr2 * vx * vx)


def _dynamics_c(vx, vy, omega, psi, delta, tr, p):
    alpha_f, alpha_r = _slip_c(vx, vy, omega, delta, p)
    fx = p.drive_gain * tr  # per axle, front == rear
    fyf = p.kf * alpha_f
    fyr = p.kr * alpha_r
    fres = _resistance_c(vx, p)
    sd, cd = ad.sin(delta), ad.cos(delta)
    sp, cp = ad.sin(psi), ad.cos(psi)
    dvx = (fx * (cd + 1.0) - fyf * sd - fres) / p.mass + omega * vy
    dvy = (fx * sd + fyr + fyf * cd) / p.mass - omega * vx
    domega = (p.lf * (fyf * cd + fx * sd) - p.lr * fyr) / p.inertia_z
    dx = vx * cp - vy * sp
    dy = vx * sp + vy * cp
    return dvx, dvy, domega, dx, dy, omega


def _rk4_c(state, control, p, dt, substeps):
    """Classical RK4 with zero-order hold on the control; components generic."""
    h = dt / substeps
    delta, tr = control

    def f(s):
        return _dynamics_c(s[0], s[1], s[2], s[5], delta, tr, p)

    s = tuple(state)
    for _ in range(substeps):
        k1 = f(s)
        k2 = f(tuple(si + (h / 2.0) * ki for si, ki in zip(s, k1)))
        k3 = f(tuple(si + (h / 2.0) * ki for si, ki in zip(s, k2)))
        k4 = f(tuple(si + h * ki for si, ki in zip(s, k3)))
        s = tuple(
            si + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d)
            for si, a, b, c, d in zip(s, k1, k2, k3, k4)
        )
    return s


# -- public operations -------------------------------------------------------


def slip_angles(state: VehicleState, delta, params: VehicleParams):
    """Front and rear slip angles; the vx floor removes the standstill singularity."""
    af, ar = _slip_c(state.vx, state.vy, state.omega, delta, params)
    return float(af), float(ar)


def tire_forces(state: VehicleState, control: ControlInput, params: VehicleParams):
    af, ar = _slip_c(state.vx, state.vy, state.omega, control.delta, params)
    fx = params.drive_gain * control.tr
    return TireForces(
        fxf=float(fx),
        fxr=float(fx),
        fyf=float(params.kf * af),
        fyr=float(params.kr * ar),
        fres=float(_resistance_c(state.vx, params)),
    )


def resistance(vx, params: VehicleParams):
    """Rolling resistance plus air drag with a smooth, odd sign surrogate."""
    return _resistance_c(vx, params)


def dynamics(state: VehicleState, control: ControlInput, params: VehicleParams):
    """Continuous-time state derivative, returned in state ordering."""
    d = _dynamics_c(
        state.vx, state.vy, state.omega, state.psi, control.delta, control.tr, params
    )
    return VehicleState(*(float(v) for v in d))


def dynamics_array(x, u, params: VehicleParams):
    """Vectorized state derivative for batched states ``x (...,6)``, ``u (...,2)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    d = _dynamics_c(x[..., 0], x[..., 1], x[..., 2], x[..., 5], u[..., 0], u[..., 1], params)
    return np.stack(d, axis=-1)


def rk4_step(state: VehicleState, control: ControlInput, params: VehicleParams, dt, substeps=4):
    """Discrete dynamics over one sample interval (zero-order hold input)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    s = _rk4_c(
        (state.vx, state.vy, state.omega, state.x, state.y, state.psi),
        (control.delta, control.tr),
        params,
        dt,
        substeps,
    )
    return VehicleState(*(float(v) for v in s))


def rk4_step_array(x, u, params: VehicleParams, dt, substeps=4):
    """Vectorized RK4 over batched states/controls."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    s = _rk4_c(
        tuple(x[..., i] for i in range(NX)),
        (u[..., 0], u[..., 1]),
        params,
        dt,
        substeps,
    )
    return np.stack(s, axis=-1)


# -- analytic stage derivatives ----------------------------------------------
#
# Hand-propagated sensitivities of the same equations, vectorized over a
# batch of stages.  They exist because a per-operation tangent sweep in
# Python is too slow for the 40 ms controller budget; the tests pin them
# bitwise-tight against the DiffScalar engine, which remains the reference.

def _stage_derivs(x, u, p: VehicleParams, order=2):
    """Dynamics value, Jacobian and (optionally) Hessians at a batch of stages.

    Returns ``(f, J, H)`` with shapes ``(...,6)``, ``(...,6,8)`` and
    ``(...,6,8,8)`` (H is None for order 1).  Input ordering of the last
    axis is (vx, vy, omega, X, Y, psi, delta, tr).
    """
    vx, vy, om, ps = x[..., 0], x[..., 1], x[..., 2], x[..., 5]
    de, tr = u[..., 0], u[..., 1]
    batch = vx.shape

    m, iz, lf, lr, kf, kr = p.mass, p.inertia_z, p.lf, p.lr, p.kf, p.kr
    ct = p.drive_gain

    g = (vx > p.vx_eps).astype(float)
    vf = np.maximum(vx, p.vx_eps)
    u1 = 1.0 / vf
    qf = (om * lf + vy) * u1
    qr = (om * lr - vy) * u1
    d = 1.0 / (1.0 + qf * qf)
    e = 1.0 / (1.0 + qr * qr)
    af = -np.arctan(qf) + de
    ar = np.arctan(qr)
    fyf = kf * af
    fyr = kr * ar
    fx = ct * tr
    sg = np.tanh(vx / _SIGN_WIDTH)
    sgp = (1.0 - sg * sg) / _SIGN_WIDTH
    r2 = p.cr0 + p.cr2 * vx * vx
    fres_vx = sgp * r2 + sg * 2.0 * p.cr2 * vx
    sd, cd = np.sin(de), np.cos(de)
    sp, cp = np.sin(ps), np.cos(ps)

    f = np.empty(batch + (NX,))
    f[..., 0] = (fx * (cd + 1.0) - fyf * sd - sg * r2) / m + om * vy
    f[..., 1] = (fx * sd + fyr + fyf * cd) / m - om * vx
    f[..., 2] = (lf * (fyf * cd + fx * sd) - lr * fyr) / iz
    f[..., 3] = vx * cp - vy * sp
    f[..., 4] = vx * sp + vy * cp
    f[..., 5] = om

    # slip-angle first partials over (vx, vy, omega)
    ones = np.ones(batch)
    qf_1 = np.stack([-qf * u1 * g, u1 * ones, lf * u1 * ones], axis=-1)
    qr_1 = np.stack([-qr * u1 * g, -u1 * ones, lr * u1 * ones], axis=-1)
    af_1 = -d[..., None] * qf_1
    ar_1 = e[..., None] * qr_1
    kaf_m = (kf / m) * af_1
    kar_m = (kr / m) * ar_1
    sd1, cd1 = sd[..., None], cd[..., None]

    J = np.zeros(batch + (NX, NW))
    J[..., 0, :3] = -kaf_m * sd1
    J[..., 0, 0] -= fres_vx / m
    J[..., 0, 1] += om
    J[..., 0, 2] += vy
    J[..., 0, 6] = (-fx * sd - kf * sd - fyf * cd) / m
    J[..., 0, 7] = ct * (cd + 1.0) / m
    J[..., 1, :3] = kar_m + kaf_m * cd1
    J[..., 1, 0] -= om
    J[..., 1, 2] -= vx
    J[..., 1, 6] = (fx * cd + kf * cd - fyf * sd) / m
    J[..., 1, 7] = ct * sd / m
    J[..., 2, :3] = (lf * m / iz) * kaf_m * cd1 - (lr * m / iz) * kar_m
    J[..., 2, 6] = lf * (kf * cd - fyf * sd + fx * cd) / iz
    J[..., 2, 7] = lf * ct * sd / iz
    J[..., 3, 0] = cp
    J[..., 3, 1] = -sp
    J[..., 3, 5] = -f[..., 4]
    J[..., 4, 0] = sp
    J[..., 4, 1] = cp
    J[..., 4, 5] = f[..., 3]
    J[..., 5, 2] = 1.0

    if order < 2:
        return f, J, None

    # slip-angle second partials: only (vx,vx), (vx,vy), (vx,omega) survive
    u1g2 = u1 * u1 * g
    qf_2 = np.zeros(batch + (3, 3))
    qf_2[..., 0, 0] = 2.0 * qf * u1g2
    qf_2[..., 0, 1] = qf_2[..., 1, 0] = -u1g2
    qf_2[..., 0, 2] = qf_2[..., 2, 0] = -lf * u1g2
    qr_2 = np.zeros(batch + (3, 3))
    qr_2[..., 0, 0] = 2.0 * qr * u1g2
    qr_2[..., 0, 1] = qr_2[..., 1, 0] = u1g2
    qr_2[..., 0, 2] = qr_2[..., 2, 0] = -lr * u1g2

    qf_o = qf_1[..., :, None] * qf_1[..., None, :]
    qr_o = qr_1[..., :, None] * qr_1[..., None, :]
    af_2 = 2.0 * (qf * d * d)[..., None, None] * qf_o - d[..., None, None] * qf_2
    ar_2 = -2.0 * (qr * e * e)[..., None, None] * qr_o + e[..., None, None] * qr_2

    sgpp = -2.0 * sg * (1.0 - sg * sg) / (_SIGN_WIDTH * _SIGN_WIDTH)
    fres_vxvx = sgpp * r2 + 2.0 * sgp * 2.0 * p.cr2 * vx + sg * 2.0 * p.cr2

    H = np.zeros(batch + (NX, NW, NW))
    lat = slice(0, 3)  # vx, vy, omega block
    sd2, cd2 = sd[..., None, None], cd[..., None, None]
    kaf2_m = (kf / m) * af_2
    kar2_m = (kr / m) * ar_2

    H[..., 0, lat, lat] = -kaf2_m * sd2
    H[..., 0, 0, 0] += -fres_vxvx / m
    H[..., 0, 1, 2] += 1.0
    H[..., 0, 2, 1] += 1.0
    c0 = -kaf_m * cd1
    H[..., 0, lat, 6] = c0
    H[..., 0, 6, lat] = c0
    H[..., 0, 6, 6] = (-fx * cd - 2.0 * kf * cd + fyf * sd) / m
    H[..., 0, 6, 7] = H[..., 0, 7, 6] = -ct * sd / m

    H[..., 1, lat, lat] = kar2_m + kaf2_m * cd2
    H[..., 1, 0, 2] += -1.0
    H[..., 1, 2, 0] += -1.0
    c1 = -kaf_m * sd1
    H[..., 1, lat, 6] = c1
    H[..., 1, 6, lat] = c1
    H[..., 1, 6, 6] = (-fx * sd - 2.0 * kf * sd - fyf * cd) / m
    H[..., 1, 6, 7] = H[..., 1, 7, 6] = ct * cd / m

    H[..., 2, lat, lat] = (lf * m / iz) * kaf2_m * cd2 - (lr * m / iz) * kar2_m
    c2 = -(lf * m / iz) * kaf_m * sd1
    H[..., 2, lat, 6] = c2
    H[..., 2, 6, lat] = c2
    H[..., 2, 6, 6] = lf * (-2.0 * kf * sd - fyf * cd - fx * sd) / iz
    H[..., 2, 6, 7] = H[..., 2, 7, 6] = lf * ct * cd / iz

    H[..., 3, 5, 5] = -f[..., 3]
    H[..., 3, 0, 5] = H[..., 3, 5, 0] = -sp
    H[..., 3, 1, 5] = H[..., 3, 5, 1] = -cp
    H[..., 4, 5, 5] = -f[..., 4]
    H[..., 4, 0, 5] = H[..., 4, 5, 0] = cp
    H[..., 4, 1, 5] = H[..., 4, 5, 1] = -sp

    return f, J, H


def _chained_stage(xi, u, p, P, P2, order):
    """Stage derivatives chained onto running sensitivities P (and P2)."""
    f, J, H = _stage_derivs(xi, u, p, order)
    Jx, Ju = J[..., :NX], J[..., NX:]
    K = np.matmul(Jx, P)
    K[..., NX:] += Ju
    if order < 2:
        return f, K, None
    batch = xi.shape[:-1]
    T = np.zeros(batch + (NW, NW))
    T[..., :NX, :] = P
    T[..., NX, NX] = 1.0
    T[..., NX + 1, NX + 1] = 1.0
    Tt = np.swapaxes(T, -1, -2)
    # K2[a] = T^T H[a] T + sum_b Jx[a,b] P2[b]
    tmp = np.matmul(H, T[..., None, :, :])
    K2 = np.matmul(Tt[..., None, :, :], tmp)
    flat = P2.reshape(batch + (NX, NW * NW))
    K2 += np.matmul(Jx, flat).reshape(batch + (NX, NW, NW))
    return f, K, K2


def rk4_step_sens(x, u, params: VehicleParams, dt, substeps=4, order=2):
    """RK4 step with exact sensitivities w.r.t. the stage inputs (x, u).

    ``x`` has shape ``(...,6)`` and ``u`` ``(...,2)``.  Returns
    ``(x_next, J, H)`` where ``J`` is ``(...,6,8)`` and ``H`` is
    ``(...,6,8,8)`` (None when ``order == 1``).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = x.shape[:-1]
    h = dt / substeps

    P = np.zeros(batch + (NX, NW))
    P[..., :, :NX] = np.eye(NX)
    P2 = np.zeros(batch + (NX, NW, NW)) if order == 2 else None

    xc = x.copy()
    for _ in range(substeps):
        k1, K1, Q1 = _chained_stage(xc, u, params, P, P2, order)
        s2 = xc + (h / 2.0) * k1
        k2, K2, Q2 = _chained_stage(
            s2,
            u,
            params,
            P + (h / 2.0) * K1,
            None if order < 2 else P2 + (h / 2.0) * Q1,
            order,
        )
        s3 = xc + (h / 2.0) * k2
        k3, K3, Q3 = _chained_stage(
            s3,
            u,
            params,
            P + (h / 2.0) * K2,
            None if order < 2 else P2 + (h / 2.0) * Q2,
            order,
        )
        s4 = xc + h * k3
        k4, K4, Q4 = _chained_stage(
            s4,
            u,
            params,
            P + h * K3,
            None if order < 2 else P2 + h * Q3,
            order,
        )
        xc = xc + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        P = P + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        if order == 2:
            P2 = P2 + (h / 6.0) * (Q1 + 2.0 * Q2 + 2.0 * Q3 + Q4)
    if order == 2:
        # the chained matmuls leave round-off asymmetry; the true tensor is
        # symmetric, so restore that exactly
        P2 = 0.5 * (P2 + np.swapaxes(P2, -1, -2))
    return xc, P, P2
