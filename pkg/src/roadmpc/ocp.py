"""Multiple-shooting transcription of the trajectory-tracking OCP.

Decision vector (stage-major): ``[x_0, u_0, x_1, u_1, ..., u_{N-1}, x_N]``
with 6 states and 2 controls per stage, giving ``n = 8N + 6`` variables.
Constraint rows, in order: 6 initial-state equalities, ``6N`` shooting
defects ``x_{k+1} - f_d(x_k, u_k) = 0``, and ``2N`` corridor half-space
rows (a left/right pair per stage, applied at stages 1..N where the state
is free; stage 0 is pinned by the initial equality, so constraining it
could only duplicate or contradict the measurement).

The objective is the quadratic tracking cost: state error under Q per
stage, controls under R, control moves under S (the first move is measured
against the previously applied command), and the terminal error under P.

Derivative evaluators exploit the stage structure: defect blocks come from
the vectorized RK4 sensitivity kernel, everything else is linear or
quadratic with constant derivative data.  Sparsity patterns are built once
per NLP and only the numeric entries are refreshed across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .sqp import NlpInstance
from .vehicle import NU, NW, NX, VehicleParams, rk4_step_array, rk4_step_sens

__all__ = [
    "OcpConfig",
    "ReferenceWindow",
    "DecisionLayout",
    "stage_cost",
    "terminal_cost",
    "build_nlp",
]

TR_BOUNDS = (-1.0, 1.0)  # normalized throttle saturation, fixed


@dataclass(frozen=True)
class OcpConfig:
    """Horizon, weights, bounds and solver-facing knobs of the tracking OCP."""

    n_horizon: int = 30
    dt: float = 0.04
    rk4_substeps: int = 4
    q_diag: tuple = (2.0, 0.5, 0.5, 10.0, 10.0, 20.0)
    r_diag: tuple = (40.0, 20.0)
    s_diag: tuple = (800.0, 400.0)
    p_diag: tuple = (8.0, 2.0, 2.0, 40.0, 40.0, 80.0)
    vx_bounds: tuple = (-2.0, 45.0)
    vy_bounds: tuple = (-4.0, 4.0)
    omega_bounds: tuple = (-1.5, 1.5)
    delta_bounds: tuple = (-0.5, 0.5)
    terminal_error_box: Optional[tuple] = None

    def __post_init__(self):
        if self.n_horizon < 1:
            raise ValueError("horizon must have at least one stage")
        if self.dt <= 0.0:
            raise ValueError("sample time must be positive")
        if self.rk4_substeps < 1:
            raise ValueError("rk4_substeps must be >= 1")
        q, r, s, p = (np.asarray(v, dtype=float) for v in (self.q_diag, self.r_diag, self.s_diag, self.p_diag))
        if q.shape != (NX,) or p.shape != (NX,) or r.shape != (NU,) or s.shape != (NU,):
            raise ValueError("weight vector of wrong length")
        if np.any(q < 0.0) or np.any(s < 0.0) or np.any(p < 0.0):
            raise ValueError("Q, S, P must be positive semidefinite")
        if np.any(r <= 0.0):
            raise ValueError("R must be strictly positive definite")
        # terminal weight dominates the stage weight
        if p.min() < q.min():
            raise ValueError("terminal weight must not be smaller than the stage weight")
        for name in ("vx_bounds", "vy_bounds", "omega_bounds", "delta_bounds"):
            lo, hi = getattr(self, name)
            if lo >= hi:
                raise ValueError(f"{name} must be an increasing pair")

    @property
    def q(self):
        return np.asarray(self.q_diag, dtype=float)

    @property
    def r(self):
        return np.asarray(self.r_diag, dtype=float)

    @property
    def s(self):
        return np.asarray(self.s_diag, dtype=float)

    @property
    def p(self):
        return np.asarray(self.p_diag, dtype=float)


@dataclass(frozen=True)
class ReferenceWindow:
    """Per-stage reference: speed, position and heading for k = 0..N.

    Lateral velocity and yaw rate are regulated to zero, so the full
    6-state reference is assembled with zeros in those slots.
    """

    v: np.ndarray  # (N+1,)
    x: np.ndarray  # (N+1,)
    y: np.ndarray  # (N+1,)
    psi: np.ndarray  # (N+1,)

    def __post_init__(self):
        for name in ("v", "x", "y", "psi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.v.shape[0]
        if any(getattr(self, k).shape != (n,) for k in ("x", "y", "psi")):
            raise ValueError("window arrays must share one length")

    def __len__(self):
        return self.v.shape[0]

    @property
    def states(self):
        """Reference states (N+1, 6) with zero lateral velocity and yaw rate."""
        out = np.zeros((len(self), NX))
        out[:, 0] = self.v
        out[:, 3] = self.x
        out[:, 4] = self.y
        out[:, 5] = self.psi
        return out

    def shifted_laterally(self, offset):
        """Window moved ``offset`` meters to the left of its own heading."""
        off = np.broadcast_to(np.asarray(offset, dtype=float), self.v.shape)
        return ReferenceWindow(
            v=self.v.copy(),
            x=self.x - off * np.sin(self.psi),
            y=self.y + off * np.cos(self.psi),
            psi=self.psi.copy(),
        )


STAGE = NX + NU  # variables per stage in the interleaved layout


@dataclass(frozen=True)
class DecisionLayout:
    """Index bookkeeping for the stage-major decision vector."""

    n_horizon: int

    @property
    def n(self):
        return STAGE * self.n_horizon + NX

    @property
    def m(self):
        return NX + NX * self.n_horizon + 2 * self.n_horizon

    def ix(self, k):
        return slice(STAGE * k, STAGE * k + NX)

    def iu(self, k):
        return slice(STAGE * k + NX, STAGE * (k + 1))

    def unpack(self, z):
        N = self.n_horizon
        z = np.asarray(z)
        body = z[: STAGE * N].reshape(N, STAGE)
        states = np.vstack([body[:, :NX], z[STAGE * N :]])
        controls = body[:, NX:].copy()
        return states, controls

    def pack(self, states, controls):
        N = self.n_horizon
        z = np.empty(self.n)
        body = z[: STAGE * N].reshape(N, STAGE)
        body[:, :NX] = states[:N]
        body[:, NX:] = controls
        z[STAGE * N :] = states[N]
        return z

    # -- warm-start shifting helpers -------------------------------------

    def shift_primal(self, z):
        """Advance stage variables one sample; the last stage is duplicated."""
        z = np.asarray(z)
        return np.concatenate([z[STAGE:], z[-STAGE:]])

    def shift_bound_duals(self, lam_x):
        return self.shift_primal(lam_x)

    def shift_constraint_duals(self, lam_g):
        N = self.n_horizon
        out = np.empty_like(lam_g)
        out[:NX] = lam_g[:NX]
        d = lam_g[NX : NX + NX * N].reshape(N, NX)
        out[NX : NX + NX * N] = np.vstack([d[1:], d[-1]]).ravel()
        c = lam_g[NX + NX * N :].reshape(N, 2)
        out[NX + NX * N :] = np.vstack([c[1:], c[-1]]).ravel()
        return out

    def shift_active_set(self, active):
        N = self.n_horizon
        m = self.m
        out = np.empty_like(active)
        gen, bnd = active[:m], active[m:]
        out[:NX] = gen[:NX]
        d = gen[NX : NX + NX * N].reshape(N, NX)
        out[NX : NX + NX * N] = np.vstack([d[1:], d[-1]]).ravel()
        c = gen[NX + NX * N : m].reshape(N, 2)
        out[NX + NX * N : m] = np.vstack([c[1:], c[-1]]).ravel()
        out[m:] = np.concatenate([bnd[STAGE:], bnd[-STAGE:]])
        return out


def stage_cost(x, u, u_prev, x_ref, config: OcpConfig):
    """Tracking stage cost: error under Q, input under R, input move under S."""
    e = np.asarray(x, dtype=float) - np.asarray(x_ref, dtype=float)
    u = np.asarray(u, dtype=float)
    du = u - np.asarray(u_prev, dtype=float)
    return float(e @ (config.q * e) + u @ (config.r * u) + du @ (config.s * du))


def terminal_cost(x_n, x_ref_n, config: OcpConfig):
    e = np.asarray(x_n, dtype=float) - np.asarray(x_ref_n, dtype=float)
    return float(e @ (config.p * e))


def _corridor_normals(window: ReferenceWindow):
    nx = -np.sin(window.psi)
    ny = np.cos(window.psi)
    return nx, ny


def build_nlp(x_now, window: ReferenceWindow, corridor, u_last, config: OcpConfig, params: VehicleParams):
    """Assemble the tracking OCP as an :class:`~roadmpc.sqp.NlpInstance`.

    ``corridor`` supplies per-stage lateral bounds (left > right, offsets
    from the window's own reference line).  ``u_last`` is the previously
    applied command, against which the first control move is penalized.
    """
    N = config.n_horizon
    if len(window) != N + 1:
        raise ValueError(f"window must hold {N + 1} points, got {len(window)}")
    if len(corridor.left) != N + 1 or len(corridor.right) != N + 1:
        raise ValueError("corridor must hold one bound pair per window point")
    x_now = np.asarray(x_now, dtype=float)
    if x_now.shape != (NX,):
        raise ValueError("x_now must be a 6-state vector")
    u_last = np.asarray(u_last, dtype=float)

    layout = DecisionLayout(N)
    n, m = layout.n, layout.m
    ref = window.states
    q, r, s, p = config.q, config.r, config.s, config.p
    dt, substeps = config.dt, config.rk4_substeps

    # -- variable bounds ---------------------------------------------------
    lbx = np.full(n, -np.inf)
    ubx = np.full(n, np.inf)
    state_lo = np.array([config.vx_bounds[0], config.vy_bounds[0], config.omega_bounds[0], -np.inf, -np.inf, -np.inf])
    state_hi = np.array([config.vx_bounds[1], config.vy_bounds[1], config.omega_bounds[1], np.inf, np.inf, np.inf])
    for k in range(1, N + 1):
        lbx[layout.ix(k)] = state_lo
        ubx[layout.ix(k)] = state_hi
    # stage 0 is fixed by the initial-state equality; boxing it as well could
    # only make a noisy measurement infeasible, so its bounds stay open
    for k in range(N):
        lbx[layout.iu(k)] = (config.delta_bounds[0], TR_BOUNDS[0])
        ubx[layout.iu(k)] = (config.delta_bounds[1], TR_BOUNDS[1])
    if config.terminal_error_box is not None:
        box = np.asarray(config.terminal_error_box, dtype=float)
        sl = layout.ix(N)
        lbx[sl] = np.maximum(lbx[sl], ref[N] - box)
        ubx[sl] = np.minimum(ubx[sl], ref[N] + box)

    # -- constraint bounds ---------------------------------------------------
    lbg = np.zeros(m)
    ubg = np.zeros(m)
    nrm_x, nrm_y = _corridor_normals(window)
    base = NX + NX * N
    ref_dot = nrm_x * window.x + nrm_y * window.y
    for j in range(N):
        k = j + 1
        lbg[base + 2 * j] = -np.inf
        ubg[base + 2 * j] = corridor.left[k] + ref_dot[k]
        lbg[base + 2 * j + 1] = corridor.right[k] + ref_dot[k]
        ubg[base + 2 * j + 1] = np.inf

    # -- jacobian pattern (built once, data refreshed per evaluation) --------
    rows, cols = [], []
    for i in range(NX):
        rows.append(i)
        cols.append(i)
    for k in range(N):
        r0 = NX + NX * k
        c0 = STAGE * k
        for a in range(NX):
            for b in range(NW):
                rows.append(r0 + a)
                cols.append(c0 + b)
        for a in range(NX):
            rows.append(r0 + a)
            cols.append(STAGE * (k + 1) + a)
    for j in range(N):
        k = j + 1
        for rr in (base + 2 * j, base + 2 * j + 1):
            rows.append(rr)
            cols.append(STAGE * k + 3)
            rows.append(rr)
            cols.append(STAGE * k + 4)
    jac_rows = np.array(rows)
    jac_cols = np.array(cols)
    corr_data = np.empty(4 * N)
    for j in range(N):
        k = j + 1
        corr_data[4 * j : 4 * j + 4] = (nrm_x[k], nrm_y[k], nrm_x[k], nrm_y[k])
    proto = sp.coo_matrix((np.arange(jac_rows.size, dtype=float), (jac_rows, jac_cols)), shape=(m, n)).tocsr()
    jac_perm = proto.data.astype(np.intp)
    jac_indices, jac_indptr = proto.indices, proto.indptr

    # -- constant objective Hessian entries ----------------------------------
    ho_rows, ho_cols, ho_data = [], [], []

    def add_diag(sl, vals):
        for i, v in enumerate(vals):
            ho_rows.append(sl.start + i)
            ho_cols.append(sl.start + i)
            ho_data.append(v)

    for k in range(N):
        add_diag(layout.ix(k), 2.0 * q)
        ru = 2.0 * r + 2.0 * s * (2.0 if k < N - 1 else 1.0)
        add_diag(layout.iu(k), ru)
        if k < N - 1:
            for i in range(NU):
                a = layout.iu(k).start + i
                b = layout.iu(k + 1).start + i
                ho_rows += [a, b]
                ho_cols += [b, a]
                ho_data += [-2.0 * s[i], -2.0 * s[i]]
    add_diag(layout.ix(N), 2.0 * p)
    ho_rows = np.array(ho_rows)
    ho_cols = np.array(ho_cols)
    ho_data = np.array(ho_data)

    # defect Hessian blocks live on the per-stage (x_k, u_k) squares
    hb_rows = np.empty(N * NW * NW, dtype=int)
    hb_cols = np.empty(N * NW * NW, dtype=int)
    blk = np.arange(NW)
    bi, bj = np.meshgrid(blk, blk, indexing="ij")
    for k in range(N):
        off = STAGE * k
        hb_rows[k * NW * NW : (k + 1) * NW * NW] = (bi + off).ravel()
        hb_cols[k * NW * NW : (k + 1) * NW * NW] = (bj + off).ravel()
    hess_rows = np.concatenate([ho_rows, hb_rows])
    hess_cols = np.concatenate([ho_cols, hb_cols])

    def split(z):
        return layout.unpack(z)

    def du_of(controls):
        return np.vstack([controls[:1] - u_last, np.diff(controls, axis=0)])

    def objective(z):
        states, controls = split(z)
        e = states - ref
        du = du_of(controls)
        val = float(np.sum(e[:N] * e[:N] * q)) + float(e[N] @ (p * e[N]))
        val += float(np.sum(controls * controls * r)) + float(np.sum(du * du * s))
        return val

    def objective_gradient(z):
        states, controls = split(z)
        e = states - ref
        du = du_of(controls)
        gx = 2.0 * q * e[:N]
        gN = 2.0 * p * e[N]
        gu = 2.0 * r * controls + 2.0 * s * du
        gu[:-1] -= 2.0 * s * du[1:]
        grad = np.empty(n)
        body = grad[: STAGE * N].reshape(N, STAGE)
        body[:, :NX] = gx
        body[:, NX:] = gu
        grad[STAGE * N :] = gN
        return grad

    def constraints(z):
        states, controls = split(z)
        out = np.empty(m)
        out[:NX] = states[0] - x_now
        pred = rk4_step_array(states[:N], controls, params, dt, substeps)
        out[NX : NX + NX * N] = (states[1:] - pred).ravel()
        e_val = nrm_x[1:] * states[1:, 3] + nrm_y[1:] * states[1:, 4]
        out[base:] = np.repeat(e_val, 2)
        return out

    def constraint_jacobian(z):
        states, controls = split(z)
        _, J, _ = rk4_step_sens(states[:N], controls, params, dt, substeps, order=1)
        data = np.concatenate([np.ones(NX), np.column_stack([(-J).reshape(N, NX * NW), np.ones((N, NX))]).ravel(), corr_data])
        return sp.csr_matrix((data[jac_perm], jac_indices, jac_indptr), shape=(m, n))

    def lagrangian_hessian(z, lam_g):
        states, controls = split(z)
        _, _, H = rk4_step_sens(states[:N], controls, params, dt, substeps, order=2)
        w = lam_g[NX : NX + NX * N].reshape(N, NX)
        defect = -np.einsum("na,napq->npq", w, H)
        data = np.concatenate([ho_data, defect.ravel()])
        return sp.coo_matrix((data, (hess_rows, hess_cols)), shape=(n, n)).tocsc()

    nlp = NlpInstance(
        n=n,
        m=m,
        lbx=lbx,
        ubx=ubx,
        lbg=lbg,
        ubg=ubg,
        objective=objective,
        objective_gradient=objective_gradient,
        constraints=constraints,
        constraint_jacobian=constraint_jacobian,
        lagrangian_hessian=lagrangian_hessian,
    )
    nlp.layout = layout
    nlp.jacobian_pattern = (jac_rows, jac_cols)
    return nlp
