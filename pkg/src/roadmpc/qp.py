"""Sparsity-exploiting primal active-set solver for convex QPs.

Problem form::

    min  1/2 x'Hx + g'x
    s.t. lba <= A x <= uba        (equality rows encoded as lba == uba)
         lbx <=  x  <= ubx

The working set is a list of rows (general rows first-class, variable
bounds as implicit unit rows) held at one of their bounds.  Each iteration
solves the equality-constrained subproblem for the working set through a
sparse KKT factorization, takes the longest feasible step along it and
updates the set by the blocking constraint or by the most negative
multiplier.  All pivoting rules are deterministic: smallest row index
enters on ties, largest sign violation (then smallest index) leaves.

Deliberate behaviours that the enclosing SQP relies on:

* ``warm`` active sets are honoured as the starting working set; re-solving
  a problem from its own optimum costs one KKT solve and no set changes.
* an infeasible starting point is recovered by driving violated rows to
  their bounds, with an L1-elastic relaxation as the fallback, so QPs from
  freshly shifted corridors never hard-fail.
* nonpositive curvature triggers a Levenberg shift ``tau*I`` on the Hessian,
  doubling from 1e-8 until the working-set subproblem is convex.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = ["QpProblem", "QpSolution", "ActiveSetQpSolver", "dump_qp"]

SOLVED = "solved"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


@dataclass
class QpProblem:
    h: object  # (n, n) symmetric, dense or sparse
    g: np.ndarray  # (n,)
    a: object  # (m, n) dense or sparse
    lba: np.ndarray  # (m,)
    uba: np.ndarray  # (m,)
    lbx: np.ndarray  # (n,)
    ubx: np.ndarray  # (n,)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        self.lba = np.asarray(self.lba, dtype=float)
        self.uba = np.asarray(self.uba, dtype=float)
        self.lbx = np.asarray(self.lbx, dtype=float)
        self.ubx = np.asarray(self.ubx, dtype=float)
        n = self.g.shape[0]
        if self.h.shape != (n, n):
            raise ValueError("H dimension mismatch")
        if self.a is None:
            self.a = sp.csr_matrix((0, n))
        if not sp.issparse(self.a):
            self.a = sp.csr_matrix(np.atleast_2d(np.asarray(self.a, dtype=float)))
        else:
            self.a = self.a.tocsr()
        if np.any(self.lba > self.uba) or np.any(self.lbx > self.ubx):
            raise ValueError("lower bound exceeds upper bound")
        if sp.issparse(self.h):
            skew = abs(self.h - self.h.T)
            asym = skew.data.max() if skew.nnz else 0.0
        else:
            hd = np.asarray(self.h)
            asym = float(np.abs(hd - hd.T).max()) if hd.size else 0.0
        if asym > 1e-10:
            raise ValueError("H must be symmetric")

    @property
    def n(self):
        return self.g.shape[0]

    @property
    def m(self):
        return self.a.shape[0]


@dataclass
class QpSolution:
    primal: np.ndarray
    dual: np.ndarray  # (m + n,): general-row then bound multipliers
    active_set: np.ndarray  # int8 (m + n,): 0 inactive, -1 lower, +1 upper
    status: str
    iterations: int  # KKT solves performed
    objective: float
    objective_trace: list = field(default_factory=list)

    @property
    def solved(self):
        return self.status == SOLVED


class _Infeasible(Exception):
    pass


class ActiveSetQpSolver:
    """Primal active-set QP solver with warm starts and Levenberg regularization.

    One instance owns reusable workspace and must not be shared across
    threads mid-solve; independent instances are fine.
    """

    def __init__(self, feas_tol=1e-8, stat_tol=1e-8, step_tol=1e-11):
        self.feas_tol = feas_tol
        self.stat_tol = stat_tol
        self.step_tol = step_tol

    # -- public entry ------------------------------------------------------

    def solve(self, qp: QpProblem, warm=None, max_iter=100, x0=None) -> QpSolution:
        n, m = qp.n, qp.m
        eq = qp.lba == qp.uba
        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
        x = np.clip(x, qp.lbx, qp.ubx)

        wrows, wsides = self._initial_working_set(qp, eq, warm, x)
        try:
            sol = self._main_loop(qp, eq, x, wrows, wsides, max_iter)
        except _Infeasible:
            sol = None
        if sol is not None and self._feasible(qp, sol.primal):
            return sol
        return self._elastic_recovery(qp, eq, x, max_iter)

    # -- working-set construction ------------------------------------------

    def _initial_working_set(self, qp, eq, warm, x):
        m, n = qp.m, qp.n
        rows = [np.flatnonzero(eq)]
        sides = [np.ones(rows[0].size, dtype=np.int8)]
        cg = qp.a @ x
        viol_lo = np.flatnonzero(~eq & (cg < qp.lba - self.feas_tol))
        viol_hi = np.flatnonzero(~eq & (cg > qp.uba + self.feas_tol))
        if viol_lo.size or viol_hi.size:
            # infeasible start: drive the violated rows home, ignore the
            # stale warm set (it may conflict with the violated face)
            rows += [viol_lo, viol_hi]
            sides += [
                np.full(viol_lo.size, -1, dtype=np.int8),
                np.ones(viol_hi.size, dtype=np.int8),
            ]
        elif warm is not None:
            warm = np.asarray(warm)
            idx = np.flatnonzero(warm != 0)
            idx = idx[~((idx < m) & eq[np.minimum(idx, m - 1)])] if m else idx
            side = warm[idx].astype(np.int8)
            lo_all = np.concatenate([qp.lba, qp.lbx])
            hi_all = np.concatenate([qp.uba, qp.ubx])
            bound = np.where(side > 0, hi_all[idx], lo_all[idx])
            keep = np.isfinite(bound)
            rows.append(idx[keep])
            sides.append(side[keep])
        wrows = np.concatenate(rows).astype(np.intp)
        wsides = np.concatenate(sides)
        # cap |W| at n to keep the working-set system determined
        if wrows.size > n:
            wrows, wsides = wrows[:n], wsides[:n]
        return wrows, wsides

    # -- main active-set loop ------------------------------------------------

    def _main_loop(self, qp, eq, x, wrows, wsides, max_iter):
        n, m = qp.n, qp.m
        H = qp.h.tocsc() if sp.issparse(qp.h) else sp.csc_matrix(qp.h)
        A = qp.a
        lo_all = np.concatenate([qp.lba, qp.lbx])
        hi_all = np.concatenate([qp.uba, qp.ubx])
        iters = 0
        tau = 0.0
        trace = []
        status = MAX_ITER

        def q(v):
            return 0.5 * float(v @ (H @ v)) + float(qp.g @ v)

        lam = np.zeros(0)
        while iters < max_iter:
            G = self._gather_rows(A, wrows, m, n)
            target = np.where(wsides > 0, hi_all[wrows], lo_all[wrows])
            r_vec = target - G @ x if wrows.size else np.zeros(0)
            p, lam, tau = self._solve_kkt(H, qp.g, x, G, r_vec, tau, wrows, wsides)
            iters += 1
            trace.append(q(x))

            if np.max(np.abs(p), initial=0.0) <= self.step_tol * (1.0 + np.abs(x).max(initial=0.0)):
                drop = self._sign_violation(wrows, wsides, lam, eq, m)
                if drop is None:
                    status = SOLVED
                    break
                wrows = np.delete(wrows, drop)
                wsides = np.delete(wsides, drop)
                continue

            alpha, block_row, block_side = self._ratio_test(qp, eq, x, p, wrows, A)
            x = x + alpha * p
            trace.append(q(x))
            if block_row is None:
                if tau == 0.0:
                    # unblocked full step lands on the working-set optimum
                    drop = self._sign_violation(wrows, wsides, lam, eq, m)
                    if drop is None:
                        status = SOLVED
                        break
                    wrows = np.delete(wrows, drop)
                    wsides = np.delete(wsides, drop)
            else:
                if wrows.size < n:
                    wrows = np.append(wrows, block_row)
                    wsides = np.append(wsides, np.int8(block_side))

        dual = np.zeros(m + n)
        active = np.zeros(m + n, dtype=np.int8)
        if wrows.size:
            dual[wrows] = lam[: wrows.size]
            is_eq = (wrows < m) & eq[np.minimum(wrows, max(m - 1, 0))] if m else np.zeros(wrows.size, bool)
            active[wrows] = np.where(is_eq, np.int8(1), wsides)
        return QpSolution(
            primal=x,
            dual=dual,
            active_set=active,
            status=status,
            iterations=iters,
            objective=q(x),
            objective_trace=trace,
        )

    # -- pieces ---------------------------------------------------------------

    @staticmethod
    def _gather_rows(A, wrows, m, n):
        """Stack the working-set rows (general rows and unit bound rows) in order."""
        nw = wrows.size
        if nw == 0:
            return sp.csr_matrix((0, n))
        gen = wrows < m
        parts = []
        if gen.any():
            parts.append(A[wrows[gen]])
        nb = int((~gen).sum())
        if nb:
            cols = (wrows[~gen] - m).astype(np.intp)
            parts.append(
                sp.csr_matrix((np.ones(nb), (np.arange(nb), cols)), shape=(nb, n))
            )
        stacked = parts[0] if len(parts) == 1 else sp.vstack(parts, format="csr")
        # restore working-set order (general rows were gathered first)
        order = np.concatenate([np.flatnonzero(gen), np.flatnonzero(~gen)])
        perm = np.empty(nw, dtype=np.intp)
        perm[order] = np.arange(nw)
        return stacked[perm]

    def _solve_kkt(self, H, g, x, G, r_vec, tau, wrows, wsides):
        """EQP step: min 1/2 p'Hp + (Hx+g)'p  s.t.  Gp = r."""
        n = g.shape[0]
        nw = G.shape[0]
        rhs = np.concatenate([-(H @ x + g), r_vec])
        hc = H.tocoo()
        gc = G.tocoo()
        kappa = 0.0
        for _ in range(64):
            rows = [hc.row, gc.row + n, gc.col]
            cols = [hc.col, gc.col, gc.row + n]
            data = [hc.data, gc.data, gc.data]
            if tau:
                rows.append(np.arange(n))
                cols.append(np.arange(n))
                data.append(np.full(n, tau))
            if kappa and nw:
                rows.append(n + np.arange(nw))
                cols.append(n + np.arange(nw))
                data.append(np.full(nw, -kappa))
            K = sp.coo_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n + nw, n + nw),
            ).tocsc()
            try:
                lu = spla.splu(K)
                sol = lu.solve(rhs)
            except RuntimeError:
                if kappa == 0.0:
                    kappa = 1e-12
                else:
                    tau = 1e-8 if tau == 0.0 else 2.0 * tau
                    kappa = 0.0
                continue
            p = sol[:n]
            lam = sol[n:]
            if not np.all(np.isfinite(sol)):
                tau = 1e-8 if tau == 0.0 else 2.0 * tau
                continue
            pnorm2 = float(p @ p)
            if pnorm2 > 0.0:
                curv = float(p @ (H @ p)) + tau * pnorm2
                if curv <= 1e-14 * pnorm2:
                    tau = 1e-8 if tau == 0.0 else 2.0 * tau
                    continue
            return p, lam, tau
        raise _Infeasible("KKT system could not be regularized")

    def _sign_violation(self, wrows, wsides, lam, eq, m):
        """Index in W of the worst wrong-signed multiplier, or None."""
        if wrows.size == 0:
            return None
        viol = np.where(wsides > 0, -lam[: wrows.size], lam[: wrows.size])
        if m:
            viol[(wrows < m) & eq[np.minimum(wrows, m - 1)]] = -np.inf
        worst = viol.max()
        if worst <= self.stat_tol:
            return None
        cand = np.flatnonzero(viol == worst)
        # deterministic: among equal violations drop the smallest row index
        return int(cand[np.argmin(wrows[cand])])

    def _ratio_test(self, qp, eq, x, p, wrows, A):
        """Longest step along p keeping all rows outside W feasible."""
        m, n = qp.m, qp.n
        dgen = A @ p
        cgen = A @ x
        d_all = np.concatenate([dgen, p])
        c_all = np.concatenate([cgen, x])
        lb_all = np.concatenate([qp.lba, qp.lbx])
        ub_all = np.concatenate([qp.uba, qp.ubx])
        in_w = np.zeros(m + n, dtype=bool)
        in_w[np.asarray(wrows, dtype=int)] = True

        dtol = 1e-13
        alpha = 1.0
        block_row, block_side = None, None
        up = ~in_w & (d_all > dtol) & np.isfinite(ub_all)
        lo = ~in_w & (d_all < -dtol) & np.isfinite(lb_all)
        cand_rows = np.concatenate([np.flatnonzero(up), np.flatnonzero(lo)])
        cand_sides = np.concatenate(
            [np.ones(up.sum(), dtype=int), -np.ones(lo.sum(), dtype=int)]
        )
        if cand_rows.size:
            bounds = np.where(cand_sides > 0, ub_all[cand_rows], lb_all[cand_rows])
            steps = np.maximum((bounds - c_all[cand_rows]) / d_all[cand_rows], 0.0)
            amin = steps.min()
            if amin < alpha:
                alpha = amin
                hit = np.flatnonzero(steps <= amin + 1e-14)
                k = hit[np.argmin(cand_rows[hit])]
                block_row, block_side = int(cand_rows[k]), int(cand_sides[k])
        return alpha, block_row, block_side

    def _feasible(self, qp, x):
        cg = qp.a @ x
        ok_rows = np.all(cg >= qp.lba - 10 * self.feas_tol) and np.all(
            cg <= qp.uba + 10 * self.feas_tol
        )
        ok_x = np.all(x >= qp.lbx - 10 * self.feas_tol) and np.all(
            x <= qp.ubx + 10 * self.feas_tol
        )
        return bool(ok_rows and ok_x)

    # -- L1-elastic fallback ---------------------------------------------------

    def _elastic_recovery(self, qp, eq, x, max_iter):
        """Relax all general rows with slacks, penalize violations, retry."""
        n, m = qp.n, qp.m
        if m == 0:
            raise _Infeasible("elastic recovery needs general rows")
        A = qp.a
        Im = sp.eye(m, format="csr")
        Ae = sp.vstack([sp.hstack([A, -Im]), sp.hstack([A, Im])]).tocsr()
        lba_e = np.concatenate([np.full(m, -np.inf), qp.lba])
        uba_e = np.concatenate([qp.uba, np.full(m, np.inf)])
        lbx_e = np.concatenate([qp.lbx, np.zeros(m)])
        ubx_e = np.concatenate([qp.ubx, np.full(m, np.inf)])
        Hd = qp.h if sp.issparse(qp.h) else sp.csc_matrix(qp.h)
        He = sp.block_diag([Hd, 1e-8 * sp.eye(m)], format="csc")

        cg = A @ x
        s0 = np.maximum(np.maximum(qp.lba - cg, cg - qp.uba), 0.0)
        rho = 100.0 * (1.0 + np.abs(qp.g).max(initial=0.0))
        total_iters = 0
        for _ in range(3):
            ge = np.concatenate([qp.g, np.full(m, rho)])
            qpe = QpProblem(He, ge, Ae, lba_e, uba_e, lbx_e, ubx_e)
            z0 = np.concatenate([x, s0 + self.feas_tol])
            sol = self._main_loop(qpe, lba_e == uba_e, z0.copy(), *self._initial_working_set(
                qpe, lba_e == uba_e, None, np.clip(z0, lbx_e, ubx_e)
            ), max_iter=max(2 * max_iter, 50))
            total_iters += sol.iterations
            s = sol.primal[n:]
            if s.max(initial=0.0) <= 10 * self.feas_tol:
                # feasible point recovered: clean solve from it
                clean = self._main_loop(
                    qp, eq, sol.primal[:n].copy(), *self._initial_working_set(
                        qp, eq, None, np.clip(sol.primal[:n], qp.lbx, qp.ubx)
                    ), max_iter=max_iter
                )
                clean = dataclasses.replace(
                    clean, iterations=clean.iterations + total_iters
                )
                return clean
            rho *= 100.0
        # genuinely infeasible: report best elastic iterate
        dual = np.zeros(m + n)
        dual[:m] = sol.dual[:2 * m][:m] + sol.dual[m:2 * m]
        dual[m:] = sol.dual[2 * m : 2 * m + n]
        active = np.zeros(m + n, dtype=np.int8)
        return QpSolution(
            primal=sol.primal[:n],
            dual=dual,
            active_set=active,
            status=INFEASIBLE,
            iterations=total_iters,
            objective=sol.objective,
            objective_trace=sol.objective_trace,
        )


def dump_qp(qp: QpProblem, path):
    """Write a QP to a plain-text, matrix-market-style file for offline debugging."""
    a = qp.a.tocoo()
    h = (qp.h if sp.issparse(qp.h) else sp.csc_matrix(qp.h)).tocoo()
    with open(path, "w") as fh:
        fh.write(f"%%qp n {qp.n} m {qp.m}\n")
        fh.write(f"%H coordinate {h.nnz}\n")
        for i, j, v in zip(h.row, h.col, h.data):
            fh.write(f"{i} {j} {v!r}\n")
        fh.write("%g\n")
        for v in qp.g:
            fh.write(f"{v!r}\n")
        fh.write(f"%A coordinate {a.nnz}\n")
        for i, j, v in zip(a.row, a.col, a.data):
            fh.write(f"{i} {j} {v!r}\n")
        for name, vec in (("lba", qp.lba), ("uba", qp.uba), ("lbx", qp.lbx), ("ubx", qp.ubx)):
            fh.write(f"%{name}\n")
            for v in vec:
                fh.write(f"{v!r}\n")
