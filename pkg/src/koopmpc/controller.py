"""Tracking MPC in the lifted space with artificial steady-state targets.

Each step solves one QP over the nominal lifted trajectory, a steady pair
(z_s, u_s) acting as an adjustable target, and tightened state/input sets from
a :class:`~koopmpc.sets.TighteningSchedule`.  The offset term ``s * ||C_y z_s
- y_t||^2`` pulls the artificial target toward the requested reference while
the tracking terms pull the trajectory toward the artificial target, which
keeps the problem feasible even for unreachable or stepping references.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import qp as qps
from .model import KoopmanModel, lift
from .sets import TighteningSchedule, margin as _poly_margin

_MARGIN_TOL = 1e-9


class Infeasible(Exception):
    """The tracking QP (or its initial-state precondition) has no solution."""


def _as_vector(v, n: int, name: str) -> np.ndarray:
    out = np.atleast_1d(np.asarray(v, dtype=float))
    if out.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {out.shape}")
    return out


def _check_spd(M, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=1e-9 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return M


@dataclass(frozen=True)
class KtmpcConfig:
    """Horizon, tracking weights, offset weight s (for S = s*I), and tube gain."""

    N: int
    Q: np.ndarray
    R: np.ndarray
    s: float
    K: np.ndarray

    def __post_init__(self):
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 1):
            raise ValueError("horizon N must be a positive integer")
        object.__setattr__(self, "Q", _check_spd(self.Q, "Q"))
        object.__setattr__(self, "R", _check_spd(self.R, "R"))
        if not (float(self.s) > 0):
            raise ValueError("offset weight s must be positive")
        object.__setattr__(self, "s", float(self.s))
        K = np.asarray(self.K, dtype=float)
        if K.ndim != 2:
            raise ValueError("K must be a matrix")
        object.__setattr__(self, "K", K)


@dataclass(frozen=True)
class SteadyTarget:
    """A steady pair of the lifted model with its output and offset cost."""

    z_s: np.ndarray
    u_s: np.ndarray
    y_s: np.ndarray
    offset_cost: float

    def __post_init__(self):
        for name in ("z_s", "u_s", "y_s"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        if not (self.offset_cost >= 0.0):
            raise ValueError("offset_cost must be non-negative")
        object.__setattr__(self, "offset_cost", float(self.offset_cost))


@dataclass(frozen=True)
class NonlinearSteadyTarget:
    """Best steady pair of the true plant found by grid search."""

    x_s: np.ndarray
    u_s: np.ndarray
    y_s: np.ndarray
    offset_cost: float

    def __post_init__(self):
        for name in ("x_s", "u_s", "y_s"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        if not (self.offset_cost >= 0.0):
            raise ValueError("offset_cost must be non-negative")
        object.__setattr__(self, "offset_cost", float(self.offset_cost))


@dataclass(frozen=True)
class KtmpcSolution:
    """Optimal trajectory, artificial target, and total cost of one step's QP."""

    u_bar: np.ndarray
    z_bar: np.ndarray
    target: SteadyTarget
    total_cost: float
    qp_status: str

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.u_bar, dtype=float))
        z = np.atleast_2d(np.asarray(self.z_bar, dtype=float))
        if z.shape[0] != u.shape[0] + 1:
            raise ValueError("z_bar must hold one more step than u_bar")
        object.__setattr__(self, "u_bar", u)
        object.__setattr__(self, "z_bar", z)
        object.__setattr__(self, "total_cost", float(self.total_cost))


@dataclass(frozen=True)
class LyapunovDiag:
    """Tracking cost V1, optimality gap V2 = J_N* - J_eq~*, and J_eq~* itself."""

    V1: float
    V2: float
    J_eq_tilde: float

    def __post_init__(self):
        if not (self.V1 >= 0.0):
            raise ValueError("V1 must be non-negative")
        if not (self.V2 >= -1e-7):
            raise ValueError(f"V2 = {self.V2} violates its -1e-7 lower bound")


@dataclass(frozen=True)
class FeasibilityReport:
    """Per-constraint margins of a candidate trajectory (negative = violated)."""

    state_margins: np.ndarray
    input_margins: np.ndarray
    steady_state_margin: float
    steady_input_margin: float
    terminal_gap: float
    candidate_cost: float
    min_margin: float
    feasible: bool


@dataclass(frozen=True)
class GridSpec:
    """Per-dimension grid values for the nonlinear steady-pair search."""

    x_values: tuple
    u_values: tuple
    fp_tol: float = 1e-6

    def __post_init__(self):
        for field_name in ("x_values", "u_values"):
            vals = tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in getattr(self, field_name))
            if not vals or any(v.ndim != 1 or v.size == 0 for v in vals):
                raise ValueError(f"{field_name} must be non-empty 1-D grids")
            object.__setattr__(self, field_name, vals)
        if not (self.fp_tol > 0):
            raise ValueError("fp_tol must be positive")


# --- layout of the decision vector [u(0..N-1); z(1..N); z_s; u_s] ----------------

class _Layout:
    def __init__(self, N: int, n_z: int, n_u: int):
        self.N, self.n_z, self.n_u = N, n_z, n_u
        self.dim = N * n_u + N * n_z + n_z + n_u
        self._z0 = N * n_u
        self.z_s = slice(N * n_u + N * n_z, N * n_u + N * n_z + n_z)
        self.u_s = slice(self.dim - n_u, self.dim)

    def u(self, j: int) -> slice:
        return slice(j * self.n_u, (j + 1) * self.n_u)

    def z(self, j: int) -> slice:  # j = 1..N
        return slice(self._z0 + (j - 1) * self.n_z, self._z0 + j * self.n_z)


def _tracking_cost(config: KtmpcConfig, u_bar, z_bar, z_s, u_s) -> float:
    Lq = np.linalg.cholesky(config.Q)
    Lr = np.linalg.cholesky(config.R)
    cost = 0.0
    for j in range(config.N):
        cost += float(np.sum((Lq.T @ (z_bar[j] - z_s)) ** 2))
        cost += float(np.sum((Lr.T @ (u_bar[j] - u_s)) ** 2))
    return cost


def _offset_cost(config: KtmpcConfig, model: KoopmanModel, z_s, y_t) -> float:
    return config.s * float(np.sum((model.C_y @ z_s - y_t) ** 2))


# --- steady-target optimizers ---------------------------------------------------

def solve_steady_offline(
    model: KoopmanModel, schedule: TighteningSchedule, y_t, s: float
) -> SteadyTarget:
    """Most-tightened steady pair minimizing the offset to the reference.

    Solves ``min s*||C_y z_s - y_t||^2`` over steady pairs ``z_s = A z_s + B
    u_s`` with ``C_x z_s`` in the terminal tightened state set and ``u_s`` in
    the terminal tightened input set.
    """
    y_t = _as_vector(y_t, model.n_y, "y_t")
    n_z, n_u = model.n_z, model.n_u
    X_N = schedule.state_sets[-1]
    U_N = schedule.input_sets[-1]
    d = n_z + n_u
    P = np.zeros((d, d))
    P[:n_z, :n_z] = 2.0 * s * model.C_y.T @ model.C_y
    q = np.concatenate([-2.0 * s * model.C_y.T @ y_t, np.zeros(n_u)])
    A_eq = np.hstack([np.eye(n_z) - model.A, -model.B])
    b_eq = np.zeros(n_z)
    A_in = np.block(
        [
            [X_N.normals @ model.C_x, np.zeros((X_N.normals.shape[0], n_u))],
            [np.zeros((U_N.normals.shape[0], n_z)), U_N.normals],
        ]
    )
    b_in = np.concatenate([X_N.offsets, U_N.offsets])
    sol = qps.solve(qps.QuadraticProgram(P=P, q=q, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in))
    if sol.status == qps.PRIMAL_INFEASIBLE:
        raise Infeasible("no steady pair exists inside the terminal tightened sets")
    if sol.status != qps.OPTIMAL:
        raise RuntimeError(f"steady-target QP ended with status {sol.status}")
    z_s, u_s = sol.x_star[:n_z], sol.x_star[n_z:]
    return SteadyTarget(
        z_s=z_s,
        u_s=u_s,
        y_s=model.C_y @ z_s,
        offset_cost=s * float(np.sum((model.C_y @ z_s - y_t) ** 2)),
    )


def solve_steady_nonlinear(plant, y_t, s: float, grid_spec: GridSpec) -> NonlinearSteadyTarget:
    """Brute-force steady pair of the true plant, used as a reference oracle.

    ``plant`` must expose batched maps ``f(X, U) -> X_next`` and ``h(X) -> Y``
    over row-stacked arrays.  Among all grid points with ``||f(x,u) - x||_inf
    <= fp_tol``, returns the one minimizing ``s*||h(x) - y_t||^2`` (first hit
    wins ties, so the result is deterministic).
    """
    y_t = np.atleast_1d(np.asarray(y_t, dtype=float))
    mesh = np.meshgrid(*grid_spec.x_values, indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    best = None
    for u_combo in itertools.product(*grid_spec.u_values):
        u = np.array(u_combo, dtype=float)
        U = np.broadcast_to(u, (X.shape[0], u.size))
        X_next = np.asarray(plant.f(X, U), dtype=float)
        fp = np.max(np.abs(X_next - X), axis=1) <= grid_spec.fp_tol
        if not np.any(fp):
            continue
        Xf = X[fp]
        Y = np.atleast_2d(np.asarray(plant.h(Xf), dtype=float))
        costs = s * np.sum((Y - y_t) ** 2, axis=1)
        i = int(np.argmin(costs))
        if best is None or costs[i] < best[0]:
            best = (float(costs[i]), Xf[i], u, Y[i])
    if best is None:
        raise ValueError("no fixed point of the plant found on the given grid")
    cost, x_s, u_s, y_s = best
    return NonlinearSteadyTarget(x_s=x_s, u_s=u_s, y_s=y_s, offset_cost=cost)


# --- per-step QP ---------------------------------------------------------------------

def build_qp(
    model: KoopmanModel,
    config: KtmpcConfig,
    schedule: TighteningSchedule,
    x_k,
    y_t,
) -> qps.QuadraticProgram:
    """Assemble the sparse tracking QP for the measured state ``x_k``.

    Decision vector: ``[u(0..N-1); z(1..N); z_s; u_s]`` with ``z(0) = psi(x_k)``
    substituted into the cost and the first dynamics row.  The initial state
    constraint ``x_k in X~(0)`` involves no decision variable and is checked by
    :func:`solve_step` instead.
    """
    N, n_z, n_u = config.N, model.n_z, model.n_u
    if schedule.horizon != N:
        raise ValueError(f"schedule horizon {schedule.horizon} != config horizon {N}")
    if config.Q.shape != (n_z, n_z) or config.R.shape != (n_u, n_u):
        raise ValueError("Q/R dimensions do not match the model")
    x_k = _as_vector(x_k, model.n_x, "x_k")
    y_t = _as_vector(y_t, model.n_y, "y_t")
    z0 = lift(model, x_k)
    lay = _Layout(N, n_z, n_u)
    Q2, R2 = 2.0 * config.Q, 2.0 * config.R

    P = np.zeros((lay.dim, lay.dim))
    q = np.zeros(lay.dim)
    for j in range(N):
        P[lay.u(j), lay.u(j)] = R2
        P[lay.u(j), lay.u_s] = -R2
        P[lay.u_s, lay.u(j)] = -R2
    P[lay.u_s, lay.u_s] = N * R2
    for j in range(1, N):
        P[lay.z(j), lay.z(j)] = Q2
        P[lay.z(j), lay.z_s] = -Q2
        P[lay.z_s, lay.z(j)] = -Q2
    P[lay.z_s, lay.z_s] = N * Q2 + 2.0 * config.s * model.C_y.T @ model.C_y
    q[lay.z_s] = -Q2 @ z0 - 2.0 * config.s * model.C_y.T @ y_t

    n_eq = (N + 2) * n_z
    A_eq = np.zeros((n_eq, lay.dim))
    b_eq = np.zeros(n_eq)
    A_eq[0:n_z, lay.z(1)] = np.eye(n_z)
    A_eq[0:n_z, lay.u(0)] = -model.B
    b_eq[0:n_z] = model.A @ z0
    for j in range(1, N):
        r = slice(j * n_z, (j + 1) * n_z)
        A_eq[r, lay.z(j + 1)] = np.eye(n_z)
        A_eq[r, lay.z(j)] = -model.A
        A_eq[r, lay.u(j)] = -model.B
    r = slice(N * n_z, (N + 1) * n_z)
    A_eq[r, lay.z_s] = np.eye(n_z) - model.A
    A_eq[r, lay.u_s] = -model.B
    r = slice((N + 1) * n_z, (N + 2) * n_z)
    A_eq[r, lay.z(N)] = np.eye(n_z)
    A_eq[r, lay.z_s] = -np.eye(n_z)

    rows_A, rows_b = [], []

    def add(normals: np.ndarray, offsets: np.ndarray, sl: slice, through=None):
        block = np.zeros((normals.shape[0], lay.dim))
        block[:, sl] = normals if through is None else normals @ through
        rows_A.append(block)
        rows_b.append(offsets)

    for j in range(N):
        Uj = schedule.input_sets[j]
        add(Uj.normals, Uj.offsets, lay.u(j))
    for j in range(1, N):
        Xj = schedule.state_sets[j]
        add(Xj.normals, Xj.offsets, lay.z(j), through=model.C_x)
    X_N = schedule.state_sets[N]
    add(X_N.normals, X_N.offsets, lay.z_s, through=model.C_x)
    U_N = schedule.input_sets[N]
    add(U_N.normals, U_N.offsets, lay.u_s)

    return qps.QuadraticProgram(
        P=P, q=q, A_eq=A_eq, b_eq=b_eq, A_in=np.vstack(rows_A), b_in=np.concatenate(rows_b)
    )


def solve_step(
    model: KoopmanModel,
    config: KtmpcConfig,
    schedule: TighteningSchedule,
    x_k,
    y_t,
    warm_start: KtmpcSolution | None = None,
) -> tuple[np.ndarray, KtmpcSolution]:
    """Solve the tracking QP at ``x_k`` and return the first input to apply."""
    x_k = _as_vector(x_k, model.n_x, "x_k")
    y_t = _as_vector(y_t, model.n_y, "y_t")
    m0 = _poly_margin(schedule.state_sets[0], x_k)
    if m0 < -_MARGIN_TOL:
        raise Infeasible(f"measured state violates the initial tightened set by {-m0:.3g}")
    problem = build_qp(model, config, schedule, x_k, y_t)

    x0 = None
    if warm_start is not None:
        u_c, z_c, _ = shifted_candidate(warm_start, model, config, config.K, x_k, y_t, schedule)
        x0 = np.concatenate(
            [u_c.ravel(), z_c[1:].ravel(), warm_start.target.z_s, warm_start.target.u_s]
        )

    sol = qps.solve(problem, tol=1e-8, max_iter=2000, x0=x0)
    if sol.status == qps.PRIMAL_INFEASIBLE:
        raise Infeasible("tracking QP is primal infeasible")
    if sol.status != qps.OPTIMAL:
        raise RuntimeError(f"tracking QP ended with status {sol.status}")

    N, n_z, n_u = config.N, model.n_z, model.n_u
    lay = _Layout(N, n_z, n_u)
    u_bar = sol.x_star[: N * n_u].reshape(N, n_u)
    z_tail = sol.x_star[lay._z0 : lay._z0 + N * n_z].reshape(N, n_z)
    z_bar = np.vstack([lift(model, x_k)[None, :], z_tail])
    z_s = sol.x_star[lay.z_s]
    u_s = sol.x_star[lay.u_s]
    target = SteadyTarget(
        z_s=z_s,
        u_s=u_s,
        y_s=model.C_y @ z_s,
        offset_cost=_offset_cost(config, model, z_s, y_t),
    )
    total = _tracking_cost(config, u_bar, z_bar, z_s, u_s) + target.offset_cost
    solution = KtmpcSolution(
        u_bar=u_bar, z_bar=z_bar, target=target, total_cost=total, qp_status=sol.status
    )
    return u_bar[0].copy(), solution


def diagnostics(solution: KtmpcSolution, offline: SteadyTarget) -> LyapunovDiag:
    """Lyapunov-style quantities: V1 (tracking part) and V2 = J_N* - J_eq~*."""
    V1 = max(solution.total_cost - solution.target.offset_cost, 0.0)
    V2 = solution.total_cost - offline.offset_cost
    return LyapunovDiag(V1=V1, V2=V2, J_eq_tilde=offline.offset_cost)


def shifted_candidate(
    prev: KtmpcSolution,
    model: KoopmanModel,
    config: KtmpcConfig,
    K: np.ndarray,
    x_next,
    y_t,
    schedule: TighteningSchedule,
) -> tuple[np.ndarray, np.ndarray, FeasibilityReport]:
    """One-step-shifted candidate built from the previous optimum.

    The candidate tracks the shifted previous trajectory under the tube gain,
    ``u_c(j) = u*(j+1) + K (z_c(j) - z*(j+1))``, finishing with the previous
    steady input; the previous steady pair is reused as the candidate target.
    The report gives the worst margin of every constraint of the tracking QP
    against the tightened schedule (j-indexed sets), plus the terminal defect
    ``||z_c(N) - z_s||_inf``, which is zero only in the disturbance-free case.
    """
    x_next = _as_vector(x_next, model.n_x, "x_next")
    y_t = _as_vector(y_t, model.n_y, "y_t")
    K = np.asarray(K, dtype=float)
    N = config.N
    z_c = np.zeros((N + 1, model.n_z))
    u_c = np.zeros((N, model.n_u))
    z_c[0] = lift(model, x_next)
    for j in range(N - 1):
        u_c[j] = prev.u_bar[j + 1] + K @ (z_c[j] - prev.z_bar[j + 1])
        z_c[j + 1] = model.A @ z_c[j] + model.B @ u_c[j]
    u_c[N - 1] = prev.target.u_s
    z_c[N] = model.A @ z_c[N - 1] + model.B @ u_c[N - 1]

    state_margins = np.array(
        [_poly_margin(schedule.state_sets[j], model.C_x @ z_c[j]) for j in range(N)]
    )
    input_margins = np.array(
        [_poly_margin(schedule.input_sets[j], u_c[j]) for j in range(N)]
    )
    steady_state = _poly_margin(schedule.state_sets[N], model.C_x @ prev.target.z_s)
    steady_input = _poly_margin(schedule.input_sets[N], prev.target.u_s)
    min_margin = float(
        min(state_margins.min(), input_margins.min(), steady_state, steady_input)
    )
    cost = _tracking_cost(config, u_c, z_c, prev.target.z_s, prev.target.u_s) + _offset_cost(
        config, model, prev.target.z_s, y_t
    )
    report = FeasibilityReport(
        state_margins=state_margins,
        input_margins=input_margins,
        steady_state_margin=steady_state,
        steady_input_margin=steady_input,
        terminal_gap=float(np.max(np.abs(z_c[N] - prev.target.z_s))),
        candidate_cost=cost,
        min_margin=min_margin,
        feasible=bool(min_margin >= -_MARGIN_TOL),
    )
    return u_c, z_c, report


def segment_inequality_check(y_s_star, y_sr_tilde, y_t, s: float, sigma_samples) -> bool:
    """Offset-cost decrease along the segment from y_s* toward the best output.

    For each sigma, the blend ``y_s = (1-sigma) y_s* + sigma y_sr~`` must cut
    the offset cost by at least ``s (2 sigma - sigma^2) ||y_s* - y_sr~||^2``.
    This holds whenever ``y_sr~`` optimizes the offset over a convex set
    containing ``y_s*``; violations mean the two points came from different
    constraint sets (or a non-optimal y_sr~).

    Both endpoints come out of finite-tolerance solvers, so the slack scales
    with ``s`` and the offset magnitude; the verdict is invariant to ``s``,
    which multiplies both sides of the inequality.
    """
    y_star = np.atleast_1d(np.asarray(y_s_star, dtype=float))
    y_sr = np.atleast_1d(np.asarray(y_sr_tilde, dtype=float))
    y_t = np.atleast_1d(np.asarray(y_t, dtype=float))
    gap = float(np.sum((y_star - y_sr) ** 2))
    base = float(np.sum((y_star - y_t) ** 2))
    tol = 1e-8 * s * (1.0 + base)
    for sigma in np.atleast_1d(np.asarray(sigma_samples, dtype=float)):
        y_s = (1.0 - sigma) * y_star + sigma * y_sr
        lhs = s * (float(np.sum((y_s - y_t) ** 2)) - base)
        rhs = -s * (2.0 * sigma - sigma**2) * gap
        if lhs > rhs + tol:
            return False
    return True
