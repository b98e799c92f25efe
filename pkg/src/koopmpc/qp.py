"""Dense convex quadratic programming with certified KKT residuals.

Problems have the form

    minimize    0.5 x'Px + q'x
    subject to  A_eq x  = b_eq
                A_in x <= b_in

and are solved by a primal active-set method. A feasible start is produced by
a phase-1 linear program (HiGHS), whose optimal slack also certifies primal
infeasibility. Pure linear programs (P = 0) are dispatched to HiGHS directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

OPTIMAL = "Optimal"
PRIMAL_INFEASIBLE = "PrimalInfeasible"
MAX_ITERATIONS = "MaxIterations"

_FEAS_TOL = 1e-9


class NonConvex(Exception):
    """The quadratic term has a negative eigenvalue beyond tolerance."""


@dataclass
class QuadraticProgram:
    """Convex QP data. P is symmetrized on construction; empty constraint
    blocks are normalized to 0-row matrices so downstream code never branches
    on None."""

    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        d = self.q.size
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if self.P.shape != (d, d):
            raise ValueError(f"P shape {self.P.shape} does not match q size {d}")
        self.P = 0.5 * (self.P + self.P.T)

        def _block(A, b, name):
            if A is None:
                return np.zeros((0, d)), np.zeros(0)
            A = np.atleast_2d(np.asarray(A, dtype=float))
            b = np.asarray(b, dtype=float).ravel()
            if A.shape != (b.size, d):
                raise ValueError(
                    f"{name} shape {A.shape} inconsistent with rhs size {b.size} "
                    f"and dimension {d}"
                )
            return A, b

        self.A_eq, self.b_eq = _block(self.A_eq, self.b_eq, "A_eq")
        self.A_in, self.b_in = _block(self.A_in, self.b_in, "A_in")

    @property
    def dim(self) -> int:
        return self.q.size


@dataclass
class QpSolution:
    x_star: np.ndarray
    objective: float
    status: str
    kkt_residuals: dict[str, float]
    iterations: int = 0
    eq_multipliers: np.ndarray | None = None
    in_multipliers: np.ndarray | None = None
    active_set: tuple[int, ...] = ()


def _objective(qp: QuadraticProgram, x: np.ndarray) -> float:
    return float(0.5 * x @ qp.P @ x + qp.q @ x)


def _kkt_residuals(qp, x, nu, lam) -> dict[str, float]:
    stat = qp.P @ x + qp.q
    if qp.A_eq.shape[0]:
        stat = stat + qp.A_eq.T @ nu
    if qp.A_in.shape[0]:
        stat = stat + qp.A_in.T @ lam
    r_in = qp.A_in @ x - qp.b_in if qp.A_in.shape[0] else np.zeros(0)
    r_eq = qp.A_eq @ x - qp.b_eq if qp.A_eq.shape[0] else np.zeros(0)
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "primal_eq": float(np.max(np.abs(r_eq))) if r_eq.size else 0.0,
        "primal_in": float(max(np.max(r_in), 0.0)) if r_in.size else 0.0,
        "complementarity": float(np.max(np.abs(lam * r_in))) if r_in.size else 0.0,
    }


def _validate_psd(P: np.ndarray) -> None:
    if P.size == 0:
        return
    scale = max(1.0, float(np.max(np.abs(P))))
    if np.linalg.eigvalsh(P).min() < -1e-10 * scale:
        raise NonConvex("quadratic term is not positive semidefinite")


def _solve_lp(qp: QuadraticProgram) -> QpSolution:
    res = linprog(
        qp.q,
        A_ub=qp.A_in if qp.A_in.shape[0] else None,
        b_ub=qp.b_in if qp.A_in.shape[0] else None,
        A_eq=qp.A_eq if qp.A_eq.shape[0] else None,
        b_eq=qp.b_eq if qp.A_eq.shape[0] else None,
        bounds=[(None, None)] * qp.dim,
        method="highs",
    )
    if res.status == 2:
        return QpSolution(
            x_star=np.full(qp.dim, np.nan),
            objective=np.nan,
            status=PRIMAL_INFEASIBLE,
            kkt_residuals={},
        )
    if res.status == 3:
        raise RuntimeError("linear objective is unbounded below on the feasible set")
    if not res.success:
        raise RuntimeError(f"LP solve failed: {res.message}")
    x = np.asarray(res.x, dtype=float)
    lam = -np.asarray(res.ineqlin.marginals) if qp.A_in.shape[0] else np.zeros(0)
    nu = -np.asarray(res.eqlin.marginals) if qp.A_eq.shape[0] else np.zeros(0)
    active = tuple(
        int(i) for i in np.flatnonzero(qp.b_in - qp.A_in @ x <= _FEAS_TOL)
    )
    return QpSolution(
        x_star=x,
        objective=_objective(qp, x),
        status=OPTIMAL,
        kkt_residuals=_kkt_residuals(qp, x, nu, lam),
        eq_multipliers=nu,
        in_multipliers=lam,
        active_set=active,
    )


def _phase1(qp: QuadraticProgram):
    """Feasible point, or None when infeasibility is certified."""
    d = qp.dim
    if qp.A_in.shape[0] == 0:
        if qp.A_eq.shape[0] == 0:
            return np.zeros(d)
        x, *_ = np.linalg.lstsq(qp.A_eq, qp.b_eq, rcond=None)
        if np.max(np.abs(qp.A_eq @ x - qp.b_eq)) > 1e-8:
            return None
        return x
    # minimize s  s.t.  A_in x - s <= b_in,  A_eq x = b_eq,  s >= 0
    c = np.zeros(d + 1)
    c[-1] = 1.0
    A_ub = np.hstack([qp.A_in, -np.ones((qp.A_in.shape[0], 1))])
    res = linprog(
        c,
        A_ub=A_ub,
        b_ub=qp.b_in,
        A_eq=np.hstack([qp.A_eq, np.zeros((qp.A_eq.shape[0], 1))])
        if qp.A_eq.shape[0]
        else None,
        b_eq=qp.b_eq if qp.A_eq.shape[0] else None,
        bounds=[(None, None)] * d + [(0.0, None)],
        method="highs",
    )
    if res.status == 2:
        return None  # equality system itself is inconsistent
    if not res.success:
        raise RuntimeError(f"phase-1 LP failed: {res.message}")
    if res.x[-1] > _FEAS_TOL:
        return None  # certified: even the minimal constraint violation is positive
    return np.asarray(res.x[:d], dtype=float)


def _project_equalities(qp: QuadraticProgram, x: np.ndarray):
    """Minimum-norm correction of x onto the equality manifold, or None if the
    correction leaves an inequality meaningfully violated."""
    if qp.A_eq.shape[0]:
        r = qp.b_eq - qp.A_eq @ x
        if np.max(np.abs(r)) > 0:
            delta, *_ = np.linalg.lstsq(qp.A_eq, r, rcond=None)
            x = x + delta
        if np.max(np.abs(qp.A_eq @ x - qp.b_eq)) > 1e-8:
            return None
    if qp.A_in.shape[0] and np.max(qp.A_in @ x - qp.b_in) > _FEAS_TOL:
        return None
    return x


def _independent_working_set(qp, candidates):
    """Greedily keep candidate inequality rows that stay independent of the
    equality rows (so the KKT system keeps full row rank)."""
    base = qp.A_eq
    rank = np.linalg.matrix_rank(base) if base.shape[0] else 0
    keep = []
    for i in candidates:
        trial = np.vstack([base, qp.A_in[i : i + 1]])
        trial_rank = np.linalg.matrix_rank(trial)
        if trial_rank > rank:
            keep.append(int(i))
            base, rank = trial, trial_rank
    return keep


def _eqp_direction(qp, x, working, g):
    """Solve the equality-constrained subproblem at x for a step direction.

    Returns (p, y, is_ray): y are the stacked multipliers from the fast KKT
    path when available (None otherwise), and is_ray flags a direction of
    linear descent along which the subproblem is unbounded.
    """
    d = qp.dim
    A_w = np.vstack([qp.A_eq, qp.A_in[working]]) if (qp.A_eq.shape[0] or working) else np.zeros((0, d))
    m = A_w.shape[0]
    kkt = np.zeros((d + m, d + m))
    kkt[:d, :d] = qp.P
    if m:
        kkt[:d, d:] = A_w.T
        kkt[d:, :d] = A_w
    rhs = np.concatenate([-g, np.zeros(m)])
    try:
        sol = np.linalg.solve(kkt, rhs)
        resid = np.max(np.abs(kkt @ sol - rhs))
        if resid <= 1e-7 * max(1.0, np.max(np.abs(rhs))):
            return sol[:d], sol[d:], False
    except np.linalg.LinAlgError:
        pass
    # Degenerate working set or singular reduced Hessian: fall back to an
    # explicit nullspace solve (deterministic via SVD/eigh).
    if m:
        _, s, vt = np.linalg.svd(A_w)
        rank = int(np.sum(s > s[0] * max(A_w.shape) * np.finfo(float).eps)) if s.size else 0
        Z = vt[rank:].T
    else:
        Z = np.eye(d)
    if Z.shape[1] == 0:
        return np.zeros(d), None, False
    H = Z.T @ qp.P @ Z
    c = Z.T @ g
    evals, evecs = np.linalg.eigh(0.5 * (H + H.T))
    ch = evecs.T @ c
    eps_h = 1e-11 * max(1.0, float(evals.max(initial=0.0)))
    eps_c = 1e-9 * max(1.0, float(np.max(np.abs(g))) if g.size else 1.0)
    flat = evals <= eps_h
    if np.any(flat & (np.abs(ch) > eps_c)):
        w = np.where(flat & (np.abs(ch) > eps_c), -ch, 0.0)
        ray = Z @ (evecs @ w)
        ray = ray / max(np.max(np.abs(ray)), 1e-300)
        return ray, None, True
    v = np.where(flat, 0.0, -ch / np.where(flat, 1.0, evals))
    return Z @ (evecs @ v), None, False


def _multipliers_at(qp, working, g):
    """Minimum-norm stacked multipliers solving A_w' y = -g."""
    A_w = np.vstack([qp.A_eq, qp.A_in[working]])
    if A_w.shape[0] == 0:
        return np.zeros(0)
    y, *_ = np.linalg.lstsq(A_w.T, -g, rcond=None)
    return y


def solve(
    qp: QuadraticProgram,
    tol: float = 1e-8,
    max_iter: int = 500,
    x0: np.ndarray | None = None,
    active0=None,
) -> QpSolution:
    """Solve a convex QP with a primal active-set method.

    `x0`/`active0` are optional warm starts (a candidate point and the
    inequality indices expected active at the optimum); correctness never
    depends on them — an unusable warm start falls back to phase 1.

    Raises NonConvex when P fails the PSD validation (eigenvalues below
    -1e-10 relative to scale).
    """
    _validate_psd(qp.P)
    m_i = qp.A_in.shape[0]
    m_e = qp.A_eq.shape[0]

    if not np.any(qp.P):
        return _solve_lp(qp)

    x = None
    if x0 is not None:
        x = _project_equalities(qp, np.asarray(x0, dtype=float).ravel().copy())
    if x is None:
        x = _phase1(qp)
        if x is None:
            return QpSolution(
                x_star=np.full(qp.dim, np.nan),
                objective=np.nan,
                status=PRIMAL_INFEASIBLE,
                kkt_residuals={},
            )

    # Initial working set: constraints active at x, warm-start indices first.
    resid = qp.b_in - qp.A_in @ x if m_i else np.zeros(0)
    active_now = set(np.flatnonzero(resid <= 1e-9).tolist())
    ordered = []
    if active0:
        ordered.extend(i for i in active0 if i in active_now)
    ordered.extend(i for i in sorted(active_now) if i not in set(ordered))
    working = _independent_working_set(qp, ordered)

    status = MAX_ITERATIONS
    iterations = 0
    nu = np.zeros(m_e)
    lam = np.zeros(m_i)
    for iterations in range(1, max_iter + 1):
        g = qp.P @ x + qp.q
        p, y, is_ray = _eqp_direction(qp, x, working, g)
        step_scale = max(1.0, float(np.max(np.abs(x))))
        if not is_ray and np.max(np.abs(p), initial=0.0) <= 1e-11 * step_scale:
            if y is None:
                y = _multipliers_at(qp, working, g)
            lam_w = y[m_e:]
            if lam_w.size == 0 or np.min(lam_w) >= -tol:
                nu = y[:m_e]
                lam = np.zeros(m_i)
                lam[working] = np.maximum(lam_w, 0.0)
                status = OPTIMAL
                break
            working.pop(int(np.argmin(lam_w)))
            continue
        # Ratio test against the non-working inequalities.
        alpha = np.inf if is_ray else 1.0
        blocking = -1
        if m_i:
            r = qp.b_in - qp.A_in @ x
            Ap = qp.A_in @ p
            for i in range(m_i):
                if i in working or Ap[i] <= 1e-13:
                    continue
                a_i = max(r[i], 0.0) / Ap[i]
                if a_i < alpha - 1e-15:
                    alpha = a_i
                    blocking = i
        if is_ray and blocking < 0:
            raise RuntimeError("objective is unbounded below on the feasible set")
        x = x + alpha * p
        if blocking >= 0 and (is_ray or alpha < 1.0):
            trial = _independent_working_set(qp, working + [blocking])
            if blocking in trial:
                working = trial
            else:
                # Dependent blocking row: swap it in for a dependent partner by
                # dropping the working row with the smallest multiplier.
                y_now = _multipliers_at(qp, working, qp.P @ x + qp.q)
                lam_w = y_now[m_e:]
                if lam_w.size:
                    working.pop(int(np.argmin(lam_w)))
                working = _independent_working_set(qp, working + [blocking])
            continue
        # Unblocked full step: x is the minimizer over the current working set
        # (the KKT solve gives stationarity at x + p), so run the multiplier
        # test here. Waiting for the next direction to vanish instead can spin
        # forever on ill-conditioned KKT systems whose computed steps never
        # drop below the zero-direction threshold.
        if y is None:
            y = _multipliers_at(qp, working, qp.P @ x + qp.q)
        lam_w = y[m_e:]
        if lam_w.size == 0 or np.min(lam_w) >= -tol:
            nu = y[:m_e]
            lam = np.zeros(m_i)
            lam[working] = np.maximum(lam_w, 0.0)
            status = OPTIMAL
            break
        working.pop(int(np.argmin(lam_w)))

    x = np.asarray(x, dtype=float)
    return QpSolution(
        x_star=x,
        objective=_objective(qp, x),
        status=status,
        kkt_residuals=_kkt_residuals(qp, x, nu, lam),
        iterations=iterations,
        eq_multipliers=nu,
        in_multipliers=lam,
        active_set=tuple(sorted(working)),
    )
