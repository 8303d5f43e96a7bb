"""Small dense convex-QP solver (operator-splitting ADMM).

Solves   minimize 0.5 z' P z + q' z   subject to   l <= A z <= u
with P symmetric PSD.  Equality constraints are rows with l == u.  The
implementation follows the standard operator-splitting scheme: Ruiz
equilibration, a quasi-definite KKT factorization, over-relaxed ADMM
iterations with residual-based termination and infeasibility certificates,
and an optional active-set polish step for high-accuracy solutions.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

INF = np.inf
_EQ_TOL = 1e-12          # rows with u - l below this are treated as equalities
_CHECK_INTERVAL = 25


class QpStatus(enum.Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"


@dataclass
class ToleranceConfig:
    eps_primal: float = 1e-6
    eps_dual: float = 1e-6
    eps_infeasible: float = 1e-9
    max_iter: int = 4000
    rho: float = 0.1
    equality_rho_scale: float = 1e3
    sigma: float = 1e-6
    over_relaxation: float = 1.6
    scaling_iters: int = 10
    polish: bool = True
    # residual-ratio rho adaptation (refactorizes when rho moves by > 5x)
    adaptive_rho: bool = True
    rho_min: float = 1e-6
    rho_max: float = 1e6


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n = self.q.shape[0]
        m = self.A.shape[0]
        if self.P.shape != (n, n):
            raise ValueError("P must be (n, n)")
        if self.A.shape != (m, n) or self.l.shape != (m,) or self.u.shape != (m,):
            raise ValueError("constraint dimensions inconsistent")
        if np.any(self.l > self.u):
            raise ValueError("l must be <= u elementwise")
        self.P = 0.5 * (self.P + self.P.T)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.P @ z + self.q @ z)

    def dump(self, path) -> None:
        """Debug dump of the problem data for offline inspection."""
        with open(path, "w") as f:
            json.dump({k: getattr(self, k).tolist() for k in "PqAlu"}, f)


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    status: QpStatus
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float = np.nan
    polished: bool = False


def _ruiz_equilibrate(P, q, A, iters):
    """Symmetric diagonal scaling of the KKT data; returns (Pb, qb, Ab, d, e, c)."""
    n, m = q.shape[0], A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Pb, qb, Ab = P.copy(), q.copy(), A.copy()
    for _ in range(iters):
        col_norm = np.maximum(
            np.abs(Pb).max(axis=0, initial=0.0),
            np.abs(Ab).max(axis=0, initial=0.0) if m else 0.0,
        )
        row_norm = np.abs(Ab).max(axis=1, initial=0.0) if m else np.zeros(0)
        dd = 1.0 / np.sqrt(np.maximum(col_norm, 1e-10))
        ee = 1.0 / np.sqrt(np.maximum(row_norm, 1e-10)) if m else e
        Pb = Pb * dd[:, None] * dd[None, :]
        qb = qb * dd
        if m:
            Ab = Ab * ee[:, None] * dd[None, :]
        d *= dd
        e *= ee
        # cost normalization
        p_norm = np.abs(Pb).max(axis=0, initial=0.0).mean() if n else 1.0
        q_norm = np.abs(qb).max(initial=0.0)
        cc = 1.0 / max(1e-10, max(p_norm, q_norm))
        Pb *= cc
        qb *= cc
        c *= cc
    return Pb, qb, Ab, d, e, c


def solve(p: QpProblem, warm: QpSolution | None = None,
          tol: ToleranceConfig | None = None) -> QpSolution:
    """Solve the QP.  Never raises on solver failure; inspect `status`."""
    tol = tol or ToleranceConfig()
    n, m = p.n, p.m

    if m == 0:
        # unconstrained: direct regularized solve
        z = np.linalg.solve(p.P + tol.sigma * np.eye(n), -p.q)
        r_dual = float(np.abs(p.P @ z + p.q).max(initial=0.0))
        return QpSolution(z, np.zeros(0), QpStatus.SOLVED, 0, 0.0, r_dual,
                          objective=p.objective(z))

    Pb, qb, Ab, d, e, c = _ruiz_equilibrate(p.P, p.q, p.A, tol.scaling_iters)
    lb = e * p.l
    ub = e * p.u

    eq = (p.u - p.l) <= _EQ_TOL
    rho_base = tol.rho

    def _factorize(rb):
        rv = np.full(m, rb)
        rv[eq] = np.clip(rb * tol.equality_rho_scale, tol.rho_min, 1e3 * tol.rho_max)
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = Pb + tol.sigma * np.eye(n)
        kkt[:n, n:] = Ab.T
        kkt[n:, :n] = Ab
        kkt[n:, n:] = -np.diag(1.0 / rv)
        return rv, 1.0 / rv, sla.lu_factor(kkt, check_finite=False)

    rho, rho_inv, (lu, piv) = _factorize(rho_base)

    if warm is not None and warm.z.shape == (n,) and warm.y.shape == (m,):
        z = warm.z / d
        y = c * warm.y / e
        zc = np.clip(Ab @ z, lb, ub)
    else:
        z = np.zeros(n)
        y = np.zeros(m)
        zc = np.zeros(m)

    alpha = tol.over_relaxation
    rhs = np.empty(n + m)
    status = QpStatus.MAX_ITER
    r_prim = r_dual = np.inf
    it = 0
    for it in range(1, tol.max_iter + 1):
        rhs[:n] = tol.sigma * z - qb
        rhs[n:] = zc - rho_inv * y
        sol = sla.lu_solve((lu, piv), rhs, check_finite=False)
        z_t = sol[:n]
        zc_t = zc + rho_inv * (sol[n:] - y)

        z_prev, y_prev = z, y
        z = alpha * z_t + (1.0 - alpha) * z
        zc_new = np.clip(alpha * zc_t + (1.0 - alpha) * zc + rho_inv * y, lb, ub)
        y = y + rho * (alpha * zc_t + (1.0 - alpha) * zc - zc_new)
        zc = zc_new

        if it % _CHECK_INTERVAL == 0 or it == tol.max_iter:
            # residuals of the original (unscaled) problem, with combined
            # absolute + relative termination thresholds
            az_un = (Ab @ z) / e
            zc_un = zc / e
            px_un = ((Pb @ z) / d) / c
            aty_un = ((Ab.T @ y) / d) / c
            r_prim = np.abs(az_un - zc_un).max(initial=0.0)
            r_dual = np.abs(px_un + p.q + aty_un).max(initial=0.0)
            prim_scale = max(np.abs(az_un).max(initial=0.0), np.abs(zc_un).max(initial=0.0))
            dual_scale = max(np.abs(px_un).max(initial=0.0), np.abs(aty_un).max(initial=0.0),
                             np.abs(p.q).max(initial=0.0))
            if r_prim <= tol.eps_primal * (1.0 + prim_scale) \
                    and r_dual <= tol.eps_dual * (1.0 + dual_scale):
                status = QpStatus.SOLVED
                break
            dz, dy = z - z_prev, y - y_prev
            if _primal_infeasible(p, dy, e, c, tol.eps_infeasible):
                status = QpStatus.PRIMAL_INFEASIBLE
                break
            if _dual_infeasible(p, dz, d, c, tol.eps_infeasible):
                status = QpStatus.DUAL_INFEASIBLE
                break
            if tol.adaptive_rho and it % (4 * _CHECK_INTERVAL) == 0:
                ratio = np.sqrt((r_prim / (1.0 + prim_scale))
                                / max(r_dual / (1.0 + dual_scale), 1e-300))
                if ratio > 5.0 or ratio < 0.2:
                    rho_base = float(np.clip(rho_base * ratio, tol.rho_min, tol.rho_max))
                    rho, rho_inv, (lu, piv) = _factorize(rho_base)

    z_out = z * d
    y_out = (e * y) / c
    sol = QpSolution(z_out, y_out, status, it, r_prim, r_dual,
                     objective=p.objective(z_out))
    if tol.polish and status == QpStatus.SOLVED:
        _polish(p, sol, tol)
    return sol


def _primal_infeasible(p, dy, e, c, eps):
    v = e * dy
    nv = np.abs(v).max(initial=0.0)
    if nv <= eps:
        return False
    v = v / nv
    atv = p.A.T @ v
    if np.abs(atv).max(initial=0.0) > eps:
        return False
    ub = np.where(np.isfinite(p.u), p.u, 0.0)
    lb = np.where(np.isfinite(p.l), p.l, 0.0)
    support = ub @ np.maximum(v, 0.0) + lb @ np.minimum(v, 0.0)
    bad = (np.maximum(v, 0.0)[~np.isfinite(p.u)].sum()
           - np.minimum(v, 0.0)[~np.isfinite(p.l)].sum())
    return support < -eps and bad <= eps


def _dual_infeasible(p, dz, d, c, eps):
    v = d * dz
    nv = np.abs(v).max(initial=0.0)
    if nv <= eps:
        return False
    v = v / nv
    if p.q @ v > -eps:
        return False
    if np.abs(p.P @ v).max(initial=0.0) > eps:
        return False
    av = p.A @ v
    up_ok = (av <= eps) | ~np.isfinite(p.u)
    lo_ok = (av >= -eps) | ~np.isfinite(p.l)
    return bool(np.all(up_ok & lo_ok))


def _polish(p, sol, tol):
    """Refine the solution by solving the KKT system of the detected active set."""
    az = p.A @ sol.z
    gap = 10.0 * (sol.primal_residual + tol.eps_primal)
    near_lo = np.isfinite(p.l) & (az - p.l <= gap * (1.0 + np.abs(np.where(np.isfinite(p.l), p.l, 0.0))))
    near_hi = np.isfinite(p.u) & (p.u - az <= gap * (1.0 + np.abs(np.where(np.isfinite(p.u), p.u, 0.0))))
    eq = near_lo & near_hi
    act_lo = near_lo & ((sol.y < 0) | eq)
    act_hi = near_hi & (sol.y > 0) & ~act_lo
    rows = np.flatnonzero(act_lo | act_hi)
    a_red = p.A[rows]
    b_red = np.where(act_lo[rows], p.l[rows], p.u[rows])
    k = rows.shape[0]
    n = p.n
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = p.P + tol.sigma * np.eye(n)
    kkt[:n, n:] = a_red.T
    kkt[n:, :n] = a_red
    kkt[n:, n:] = -tol.sigma * np.eye(k)
    rhs = np.concatenate([-p.q, b_red])
    try:
        lu, piv = sla.lu_factor(kkt, check_finite=False)
    except (sla.LinAlgError, ValueError):
        return
    t = sla.lu_solve((lu, piv), rhs, check_finite=False)
    # iterative refinement against the unregularized KKT system
    for _ in range(3):
        r = rhs - np.concatenate([p.P @ t[:n] + a_red.T @ t[n:], a_red @ t[:n]])
        t = t + sla.lu_solve((lu, piv), r, check_finite=False)
    z_new = t[:n]
    y_new = np.zeros(p.m)
    y_new[rows] = t[n:]
    # dual feasibility of the polished multipliers (skip true equality rows)
    sign_tol = 1e-9 * (1.0 + np.abs(y_new).max(initial=0.0))
    ineq_lo = act_lo & ~eq
    ineq_hi = act_hi & ~eq
    if np.any(y_new[ineq_lo] > sign_tol) or np.any(y_new[ineq_hi] < -sign_tol):
        return
    rp_new, rd_new = _kkt_residuals(p, z_new, y_new)
    rp_old, rd_old = _kkt_residuals(p, sol.z, sol.y)
    if max(rp_new, rd_new) < max(rp_old, rd_old):
        sol.z, sol.y = z_new, y_new
        sol.primal_residual, sol.dual_residual = rp_new, rd_new
        sol.objective = p.objective(z_new)
        sol.polished = True


def _kkt_residuals(p, z, y):
    az = p.A @ z
    r_prim = float(np.maximum(np.maximum(p.l - az, 0.0),
                              np.maximum(az - p.u, 0.0)).max(initial=0.0))
    r_dual = float(np.abs(p.P @ z + p.q + p.A.T @ y).max(initial=0.0))
    return r_prim, r_dual
