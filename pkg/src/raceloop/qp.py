"""Sparse convex QP solver based on operator splitting (ADMM).

Solves
    minimize    0.5 z' H z + g' z
    subject to  A_eq z = b_eq
                lb <= A_in z <= ub

with H symmetric positive semidefinite.  The implementation follows the
well-known OSQP scheme: Ruiz equilibration, sparse LU factorization of the
quasi-definite KKT matrix, over-relaxed ADMM iterations with residual-balanced
rho adaptation, and a primal infeasibility certificate on the dual increment.
Termination uses unscaled residuals:

    || C z - proj(C z) ||_inf <= tol          (primal / constraint violation)
    || H z + g + C' y ||_inf  <= tol * (1 + ||g||_inf)   (stationarity)

The solver is deterministic: identical inputs produce identical iterates.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

_SIGMA = 1e-6
_ALPHA = 1.6
_RHO_INEQ = 0.1
_RHO_EQ_SCALE = 1e3
_RHO_BOUNDS = (1e-6, 1e6)
_RHO_ADAPT_THRESHOLD = 5.0
_RUIZ_ITERS = 5
_CHECK_EVERY = 25
_POLISH_FIRST_ITER = 100
_EPS_INFEAS = 1e-9
_MIN_SCALING = 1e-8


@dataclass
class QpProblem:
    """Stacked sparse QP data; inequality bounds may be +-inf on either side."""

    H: sp.csc_matrix
    g: np.ndarray
    A_eq: sp.csc_matrix
    b_eq: np.ndarray
    A_in: sp.csc_matrix
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.H = sp.csc_matrix(self.H)
        self.A_eq = sp.csc_matrix(self.A_eq)
        self.A_in = sp.csc_matrix(self.A_in)
        self.g = np.asarray(self.g, dtype=float)
        self.b_eq = np.asarray(self.b_eq, dtype=float)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        n = self.g.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H shape {self.H.shape} inconsistent with g ({n})")
        if self.A_eq.shape[1] != n or self.A_in.shape[1] != n:
            raise ValueError("constraint matrices inconsistent with variable count")
        if self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise ValueError("A_eq/b_eq row mismatch")
        if self.A_in.shape[0] != self.lb.shape[0] or self.lb.shape != self.ub.shape:
            raise ValueError("A_in/lb/ub row mismatch")

    @property
    def n(self) -> int:
        return self.g.shape[0]

    def min_hessian_eigenvalue(self) -> float:
        """Smallest eigenvalue of H (dense check, for validation only)."""
        return float(np.linalg.eigvalsh(self.H.toarray()).min())

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.H @ z) + self.g @ z)


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray  # stacked duals for [A_eq; A_in] rows
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    solve_time_s: float = 0.0
    rho_scale: float = 1.0  # final step-size scale, reusable as a hint


@dataclass
class QpWarmStart:
    z: np.ndarray
    y: np.ndarray | None = None
    rho_scale: float | None = None  # carry the adapted step size across solves


def _csc_col_inf_norms(M, n_cols):
    out = np.zeros(n_cols)
    if M.nnz:
        cols = np.repeat(np.arange(n_cols), np.diff(M.indptr))
        np.maximum.at(out, cols, np.abs(M.data))
    return out


def _csc_row_inf_norms(M, n_rows):
    out = np.zeros(n_rows)
    if M.nnz:
        np.maximum.at(out, M.indices, np.abs(M.data))
    return out


def _ruiz_equilibrate(P, q, C, n_iters=_RUIZ_ITERS):
    """Modified Ruiz scaling of the stacked problem; returns scaled data.

    Scaling happens in place on copies of the sparse data arrays, which is an
    order of magnitude cheaper than diagonal matrix products.
    """
    n = P.shape[0]
    m = C.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Pb = P.copy().tocsc()
    qb = q.copy()
    Cb = C.copy().tocsc()
    p_cols = np.repeat(np.arange(n), np.diff(Pb.indptr)) if Pb.nnz else None
    c_cols = np.repeat(np.arange(n), np.diff(Cb.indptr)) if Cb.nnz else None
    for _ in range(n_iters):
        col_p = _csc_col_inf_norms(Pb, n)
        col_c = _csc_col_inf_norms(Cb, n)
        dx = 1.0 / np.sqrt(np.maximum(np.maximum(col_p, col_c), _MIN_SCALING))
        de = 1.0 / np.sqrt(np.maximum(_csc_row_inf_norms(Cb, m), _MIN_SCALING))
        if Pb.nnz:
            Pb.data *= dx[Pb.indices] * dx[p_cols]
        if Cb.nnz:
            Cb.data *= de[Cb.indices] * dx[c_cols]
        qb *= dx
        d *= dx
        e *= de
        # Cost normalization.
        gamma_den = max(
            float(np.mean(_csc_col_inf_norms(Pb, n))),
            float(np.max(np.abs(qb), initial=0.0)),
        )
        gamma = 1.0 / max(gamma_den, _MIN_SCALING)
        Pb.data *= gamma
        qb *= gamma
        c *= gamma
    return Pb, qb, Cb, d, e, c


def _polish(problem, A_in_csr, C, lo, hi, x, y, tol, eps_dual):
    """Active-set refinement seeded by the ADMM iterate.

    Solves the KKT system of the guessed active set directly, then repairs the
    guess for a few rounds: rows with wrong-sign multipliers are released and
    violated inactive rows are activated.  Returns (x, y, r_prim, r_dual) when
    the polished point passes the full optimality checks, else None.
    """
    n = problem.n
    n_eq = problem.A_eq.shape[0]
    m_in = A_in_csr.shape[0]
    y_in = y[n_eq:]
    low = y_in < 0.0
    up = y_in > 0.0
    delta = 1e-9

    for _ in range(4):
        low_act = np.flatnonzero(low)
        up_act = np.flatnonzero(up)
        A_act = sp.vstack(
            [problem.A_eq, A_in_csr[low_act], A_in_csr[up_act]], format="csc"
        )
        b_act = np.concatenate([problem.b_eq, problem.lb[low_act], problem.ub[up_act]])
        n_act = A_act.shape[0]
        K = sp.bmat(
            [
                [problem.H + delta * sp.eye(n), A_act.T],
                [A_act, -delta * sp.eye(n_act) if n_act else None],
            ],
            format="csc",
        )
        try:
            lu = splu(K)
        except RuntimeError:
            return None
        sol = lu.solve(np.concatenate([-problem.g, b_act]))
        # One refinement pass against the unperturbed KKT system.
        r1 = -problem.g - (problem.H @ sol[:n] + A_act.T @ sol[n:])
        r2 = b_act - A_act @ sol[:n]
        sol = sol + lu.solve(np.concatenate([r1, r2]))
        x_p = sol[:n]
        nu = sol[n:]
        if not np.all(np.isfinite(x_p)):
            return None

        y_p = np.zeros(C.shape[0])
        y_p[:n_eq] = nu[:n_eq]
        y_p[n_eq + low_act] = nu[n_eq : n_eq + len(low_act)]
        y_p[n_eq + up_act] = nu[n_eq + len(low_act) :]

        cin = A_in_csr @ x_p if m_in else np.zeros(0)
        bad_low = low & (y_p[n_eq:] > tol)
        bad_up = up & (y_p[n_eq:] < -tol)
        viol_low = ~low & (cin < problem.lb - tol)
        viol_up = ~up & (cin > problem.ub + tol)
        if not (bad_low.any() or bad_up.any() or viol_low.any() or viol_up.any()):
            cx = C @ x_p
            r_prim = float(np.max(np.abs(cx - np.clip(cx, lo, hi)), initial=0.0))
            r_dual = float(
                np.max(np.abs(problem.H @ x_p + problem.g + C.T @ y_p), initial=0.0)
            )
            if r_prim <= tol and r_dual <= eps_dual:
                return x_p, y_p, r_prim, r_dual
            return None
        low = (low & ~bad_low) | viol_low
        up = (up & ~bad_up) | viol_up
    return None


def _primal_infeasibility_certificate(C, delta_y, lo, hi) -> bool:
    norm = float(np.max(np.abs(delta_y), initial=0.0))
    if norm < _EPS_INFEAS:
        return False
    dy = delta_y / norm
    if float(np.max(np.abs(C.T @ dy), initial=0.0)) > _EPS_INFEAS * 1e3:
        return False
    dy_pos = np.maximum(dy, 0.0)
    dy_neg = np.minimum(dy, 0.0)
    # Unbounded rows cannot participate in a certificate.
    if np.any(dy_pos[np.isinf(hi)] > _EPS_INFEAS) or np.any(
        dy_neg[np.isinf(lo)] < -_EPS_INFEAS
    ):
        return False
    support = float(
        np.sum(hi[dy_pos > 0] * dy_pos[dy_pos > 0])
        + np.sum(lo[dy_neg < 0] * dy_neg[dy_neg < 0])
    )
    return support < -_EPS_INFEAS * 1e3


def solve_qp(
    problem: QpProblem,
    warm_start: QpWarmStart | None = None,
    tol: float = 1e-6,
    max_iter: int = 4000,
) -> QpSolution:
    """Solve the QP to the stated residual tolerances.

    Returns the best iterate flagged MAX_ITER when the iteration cap is hit,
    and INFEASIBLE when a primal infeasibility certificate is found.
    """
    t0 = time.perf_counter()
    n = problem.n
    C = sp.vstack([problem.A_eq, problem.A_in], format="csc")
    lo = np.concatenate([problem.b_eq, problem.lb])
    hi = np.concatenate([problem.b_eq, problem.ub])
    m = C.shape[0]
    n_eq = problem.A_eq.shape[0]

    Pb, qb, Cb, d, e, c = _ruiz_equilibrate(problem.H.tocsc(), problem.g, C)
    lob = e * lo
    hib = e * hi

    rho_scale = 1.0
    if warm_start is not None and warm_start.rho_scale is not None:
        rho_scale = min(max(warm_start.rho_scale, _RHO_BOUNDS[0]), _RHO_BOUNDS[1])
    rho = np.full(m, _RHO_INEQ * rho_scale)
    rho[:n_eq] = _RHO_INEQ * _RHO_EQ_SCALE * rho_scale

    def factorize(rho_vec):
        if m == 0:
            return splu((Pb + _SIGMA * sp.eye(n)).tocsc())
        kkt = sp.bmat(
            [
                [Pb + _SIGMA * sp.eye(n), Cb.T],
                [Cb, -sp.diags(1.0 / rho_vec)],
            ],
            format="csc",
        )
        return splu(kkt)

    lu = factorize(rho)

    if warm_start is not None:
        xb = warm_start.z / d
        yb = c * warm_start.y / e if warm_start.y is not None else np.zeros(m)
    else:
        xb = np.zeros(n)
        yb = np.zeros(m)
    zb = np.clip(Cb @ xb, lob, hib) if m else np.zeros(0)

    eps_dual = tol * (1.0 + float(np.max(np.abs(problem.g), initial=0.0)))
    status = MAX_ITER
    iters = max_iter
    r_prim = np.inf
    r_dual = np.inf
    A_in_csr = problem.A_in.tocsr()
    polished_sig = None
    next_polish_k = _POLISH_FIRST_ITER

    for k in range(1, max_iter + 1):
        rho_inv = 1.0 / rho
        rhs = np.concatenate([_SIGMA * xb - qb, zb - rho_inv * yb])
        sol = lu.solve(rhs)
        x_t = sol[:n]
        nu = sol[n:]
        z_t = zb + rho_inv * (nu - yb) if m else zb
        xb = _ALPHA * x_t + (1.0 - _ALPHA) * xb
        if m:
            z_tmp = _ALPHA * z_t + (1.0 - _ALPHA) * zb + rho_inv * yb
            zb_new = np.clip(z_tmp, lob, hib)
            y_new = rho * (z_tmp - zb_new)
            delta_y = y_new - yb
            zb = zb_new
            yb = y_new
        else:
            delta_y = np.zeros(0)

        if k % _CHECK_EVERY == 0 or k == max_iter:
            x = d * xb
            y = (e * yb) / c
            r_prim = (
                float(np.max(np.abs(C @ x - np.clip(C @ x, lo, hi)), initial=0.0))
                if m
                else 0.0
            )
            r_dual = float(
                np.max(np.abs(problem.H @ x + problem.g + C.T @ y), initial=0.0)
            )
            if r_prim <= tol and r_dual <= eps_dual:
                status = OPTIMAL
                iters = k
                break
            if m and _primal_infeasibility_certificate(C, (e * delta_y) / c, lo, hi):
                status = INFEASIBLE
                iters = k
                break
            if m and r_prim <= 1e2 * tol and k >= next_polish_k:
                # The active set has plausibly settled; try a direct solve on
                # it.  Attempts back off geometrically so hard instances do
                # not drown in failed factorizations.
                next_polish_k = 2 * k
                act_sig = hash((tuple(y[n_eq:] < 0.0), tuple(y[n_eq:] > 0.0)))
                if act_sig != polished_sig:
                    polished_sig = act_sig
                    polished = _polish(problem, A_in_csr, C, lo, hi, x, y, tol, eps_dual)
                    if polished is not None:
                        xb = polished[0] / d
                        yb = c * polished[1] / e if m else yb
                        r_prim, r_dual = polished[2], polished[3]
                        status = OPTIMAL
                        iters = k
                        break
            if m and k < max_iter:
                # Adapt rho toward balanced scaled residuals (OSQP rule) and
                # refactorize when it moves by more than the threshold.
                cx = Cb @ xb
                rp_s = float(np.max(np.abs(cx - zb), initial=0.0))
                den_p = max(
                    float(np.max(np.abs(cx), initial=0.0)),
                    float(np.max(np.abs(zb), initial=0.0)),
                    1e-10,
                )
                aty = Cb.T @ yb
                rd_s = float(np.max(np.abs(Pb @ xb + qb + aty), initial=0.0))
                den_d = max(
                    float(np.max(np.abs(Pb @ xb), initial=0.0)),
                    float(np.max(np.abs(aty), initial=0.0)),
                    float(np.max(np.abs(qb), initial=0.0)),
                    1e-10,
                )
                ratio = math.sqrt(
                    (rp_s / den_p) / max(rd_s / den_d, 1e-16)
                )
                if ratio > _RHO_ADAPT_THRESHOLD or ratio < 1.0 / _RHO_ADAPT_THRESHOLD:
                    rho = np.clip(rho * ratio, *_RHO_BOUNDS)
                    rho_scale *= ratio
                    lu = factorize(rho)

    x = d * xb
    y = (e * yb) / c
    return QpSolution(
        z=x,
        y=y,
        status=status,
        iterations=iters,
        primal_residual=r_prim,
        dual_residual=r_dual,
        objective=problem.objective(x),
        solve_time_s=time.perf_counter() - t0,
        rho_scale=rho_scale,
    )
