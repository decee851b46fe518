"""SQP solver with an L1-merit backtracking line search and warm starts.

The loop is a textbook exact-Hessian SQP: linearize, solve an inequality
QP through :class:`~roadmpc.qp.ActiveSetQpSolver`, globalize with an
L1 exact-penalty merit function (Armijo, halving), update the duals from
the QP.  Convergence is declared on the measured KKT residuals —
primal infeasibility below 1e-6 and dual infeasibility below 1e-4 by
default — and the per-phase wall times are recorded in the same
categories a profiler would show: QP, line search, cost and constraints,
gradient, Hessian, Jacobian.

Everything is deterministic: identical inputs reproduce the iterate
sequence bitwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .qp import ActiveSetQpSolver, QpProblem

__all__ = [
    "NlpInstance",
    "SolveStats",
    "SqpResult",
    "WarmStart",
    "SqpSolver",
    "solve_nlp",
    "warm_start_shift",
]

CONVERGED = "converged"
MAX_ITER = "max_iter"
LINE_SEARCH_FAILURE = "line_search_failure"

TIMING_CATEGORIES = ("qp", "line_search", "cost_and_constraints", "gradient", "hessian", "jacobian")


@dataclass
class NlpInstance:
    """Smooth NLP in the form min f(x) s.t. lbg <= g(x) <= ubg, lbx <= x <= ubx."""

    n: int
    m: int
    lbx: np.ndarray
    ubx: np.ndarray
    lbg: np.ndarray
    ubg: np.ndarray
    objective: Callable[[np.ndarray], float]
    objective_gradient: Callable[[np.ndarray], np.ndarray]
    constraints: Callable[[np.ndarray], np.ndarray]
    constraint_jacobian: Callable[[np.ndarray], sp.spmatrix]
    lagrangian_hessian: Callable[[np.ndarray, np.ndarray], sp.spmatrix]

    @classmethod
    def from_functions(cls, f, g_list, lbx, ubx, lbg, ubg):
        """Build an instance whose derivatives come from the autodiff engine.

        ``f`` and each entry of ``g_list`` must be written over the engine's
        seeded scalars (plain arithmetic plus the ``autodiff`` primitives).
        """
        lbx = np.asarray(lbx, dtype=float)
        ubx = np.asarray(ubx, dtype=float)
        lbg = np.asarray(lbg, dtype=float)
        ubg = np.asarray(ubg, dtype=float)
        n = lbx.shape[0]
        m = lbg.shape[0]

        def g_stacked(xs):
            return [gi(xs) for gi in g_list]

        def objective(x):
            return float(ad.value_of(f([float(v) for v in x])))

        def constraints(x):
            xl = [float(v) for v in x]
            return np.array([float(ad.value_of(gi(xl))) for gi in g_list])

        return cls(
            n=n,
            m=m,
            lbx=lbx,
            ubx=ubx,
            lbg=lbg,
            ubg=ubg,
            objective=objective,
            objective_gradient=lambda x: ad.gradient(f, x),
            constraints=constraints,
            constraint_jacobian=lambda x: ad.jacobian(g_stacked, x),
            lagrangian_hessian=lambda x, lam: ad.lagrangian_hessian(f, g_stacked, x, lam),
        )


@dataclass
class SolveStats:
    sqp_iterations: int = 0
    qp_iterations_total: int = 0
    primal_infeasibility: float = np.inf
    dual_infeasibility: float = np.inf
    timings: dict = field(default_factory=lambda: {k: 0.0 for k in TIMING_CATEGORIES})
    status: str = MAX_ITER
    solve_time_s: float = 0.0
    objective: float = np.nan
    merit_trace: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == CONVERGED


@dataclass
class WarmStart:
    lam_g: Optional[np.ndarray] = None
    lam_x: Optional[np.ndarray] = None
    active_set: Optional[np.ndarray] = None
    penalty: float = 1.0


@dataclass
class SqpResult:
    x: np.ndarray
    lam_g: np.ndarray
    lam_x: np.ndarray
    active_set: Optional[np.ndarray]
    stats: SolveStats


class SqpSolver:
    """Reusable SQP solver; one solve at a time per instance."""

    def __init__(
        self,
        max_sqp=50,
        max_qp=100,
        primal_tol=1e-6,
        dual_tol=1e-4,
        armijo=1e-4,
        backtrack=0.5,
        alpha_min=1e-10,
        qp_solver: Optional[ActiveSetQpSolver] = None,
    ):
        self.max_sqp = max_sqp
        self.max_qp = max_qp
        self.primal_tol = primal_tol
        self.dual_tol = dual_tol
        self.armijo = armijo
        self.backtrack = backtrack
        self.alpha_min = alpha_min
        self.qp_solver = qp_solver or ActiveSetQpSolver()

    # -- merit helpers -------------------------------------------------------

    @staticmethod
    def _violation_l1(nlp, c):
        return float(
            np.sum(np.maximum(nlp.lbg - c, 0.0)) + np.sum(np.maximum(c - nlp.ubg, 0.0))
        )

    @staticmethod
    def _primal_infeasibility(nlp, x, c):
        vg = max(
            np.max(nlp.lbg - c, initial=0.0),
            np.max(c - nlp.ubg, initial=0.0),
        )
        vx = max(
            np.max(nlp.lbx - x, initial=0.0),
            np.max(x - nlp.ubx, initial=0.0),
        )
        return float(max(vg, vx))

    def line_search_merit(self, nlp, x, p, rho, f0, c0, grad):
        """Backtracking Armijo search on the L1 merit function.

        Returns ``(alpha, f_new, c_new, ok)``; ``ok`` is False when no
        sufficient-decrease step above ``alpha_min`` exists.
        """
        phi0 = f0 + rho * self._violation_l1(nlp, c0)
        # directional-derivative model: the QP step removes the linearized
        # violation, so the merit slope is bounded by this expression
        dphi = float(grad @ p) - rho * self._violation_l1(nlp, c0)
        alpha = 1.0
        while alpha >= self.alpha_min:
            xt = x + alpha * p
            ft = nlp.objective(xt)
            ct = nlp.constraints(xt)
            phit = ft + rho * self._violation_l1(nlp, ct)
            if phit <= phi0 + self.armijo * alpha * dphi:
                return alpha, ft, ct, True
            alpha *= self.backtrack
        return 0.0, f0, c0, False

    # -- main loop -------------------------------------------------------------

    def solve(self, nlp: NlpInstance, x0, warm: Optional[WarmStart] = None) -> SqpResult:
        t_start = time.perf_counter()
        stats = SolveStats()
        timings = stats.timings

        x = np.clip(np.asarray(x0, dtype=float), nlp.lbx, nlp.ubx)
        lam_g = np.zeros(nlp.m)
        lam_x = np.zeros(nlp.n)
        active = None
        rho = 1.0
        if warm is not None:
            if warm.lam_g is not None:
                lam_g = np.asarray(warm.lam_g, dtype=float).copy()
            if warm.lam_x is not None:
                lam_x = np.asarray(warm.lam_x, dtype=float).copy()
            active = warm.active_set
            rho = max(rho, warm.penalty)

        stats.status = MAX_ITER
        for it in range(self.max_sqp + 1):
            t0 = time.perf_counter()
            f = nlp.objective(x)
            c = nlp.constraints(x)
            timings["cost_and_constraints"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            grad = nlp.objective_gradient(x)
            timings["gradient"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            jac = nlp.constraint_jacobian(x)
            timings["jacobian"] += time.perf_counter() - t0

            stats.primal_infeasibility = self._primal_infeasibility(nlp, x, c)
            stationarity = grad + jac.T @ lam_g + lam_x
            stats.dual_infeasibility = float(np.max(np.abs(stationarity), initial=0.0))
            stats.objective = f
            if (
                stats.primal_infeasibility < self.primal_tol
                and stats.dual_infeasibility < self.dual_tol
            ):
                stats.status = CONVERGED
                break
            if it == self.max_sqp:
                break

            t0 = time.perf_counter()
            hess = nlp.lagrangian_hessian(x, lam_g)
            timings["hessian"] += time.perf_counter() - t0

            t0 = time.perf_counter()
            qp = QpProblem(
                h=hess,
                g=grad,
                a=jac,
                lba=nlp.lbg - c,
                uba=nlp.ubg - c,
                lbx=nlp.lbx - x,
                ubx=nlp.ubx - x,
            )
            qsol = self.qp_solver.solve(qp, warm=active, max_iter=self.max_qp)
            timings["qp"] += time.perf_counter() - t0
            stats.qp_iterations_total += qsol.iterations
            active = qsol.active_set
            p = qsol.primal
            lam_g_new = qsol.dual[: nlp.m]
            lam_x_new = qsol.dual[nlp.m :]
            rho = max(
                rho,
                2.0 * float(np.max(np.abs(qsol.dual), initial=0.0)),
            )

            step_scale = float(np.max(np.abs(p), initial=0.0))
            if step_scale <= 1e-12 * (1.0 + float(np.max(np.abs(x), initial=0.0))):
                # degenerate step: adopt the QP duals and re-check the KKT point
                lam_g, lam_x = lam_g_new, lam_x_new
                stats.sqp_iterations += 1
                continue

            t0 = time.perf_counter()
            alpha, f_new, c_new, ok = self.line_search_merit(nlp, x, p, rho, f, c, grad)
            timings["line_search"] += time.perf_counter() - t0
            stats.merit_trace.append(
                (rho, f + rho * self._violation_l1(nlp, c))
            )
            if not ok:
                stats.status = LINE_SEARCH_FAILURE
                stats.sqp_iterations += 1
                break

            x = x + alpha * p
            lam_g, lam_x = lam_g_new, lam_x_new
            stats.sqp_iterations += 1
            stats.merit_trace.append(
                (rho, f_new + rho * self._violation_l1(nlp, c_new))
            )

        stats.solve_time_s = time.perf_counter() - t_start
        return SqpResult(x=x, lam_g=lam_g, lam_x=lam_x, active_set=active, stats=stats)


def solve_nlp(nlp, x0, warm=None, max_sqp=50, **kwargs):
    """One-shot convenience wrapper around :class:`SqpSolver`."""
    return SqpSolver(max_sqp=max_sqp, **kwargs).solve(nlp, x0, warm)


def warm_start_shift(prev_x, layout, corridor, clamp_margin=0.05):
    """Shift a horizon solution one stage for the next sample.

    States and controls move one stage forward with the last stage
    duplicated; the shifted positions are clamped laterally into the new
    corridor so the guess starts inside the drivable set.  ``layout`` is a
    decision-vector layout (``unpack``/``pack``), ``corridor`` provides the
    adjusted reference window and per-stage lateral bounds.
    """
    states, controls = layout.unpack(np.asarray(prev_x, dtype=float))
    states = np.vstack([states[1:], states[-1]])
    controls = np.vstack([controls[1:], controls[-1]])

    win = corridor.window
    nrm_x, nrm_y = -np.sin(win.psi), np.cos(win.psi)
    e = nrm_x * (states[:, 3] - win.x) + nrm_y * (states[:, 4] - win.y)
    lo = corridor.right + clamp_margin
    hi = corridor.left - clamp_margin
    e_cl = np.clip(e, np.minimum(lo, hi), np.maximum(lo, hi))
    states[:, 3] += nrm_x * (e_cl - e)
    states[:, 4] += nrm_y * (e_cl - e)
    return layout.pack(states, controls)
