"""Closed-loop simulation of the benchmark plants under the tracking controller.

The simulator owns disturbance injection (seeded, in lifted coordinates for
the polynomial benchmark), reference scheduling (timed steps or position-based
waypoint switching), training-data generation, and step-by-step logging of
everything the analysis needs: costs, Lyapunov values, shifted-candidate
margins, and the injected noise realizations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controller import (
    Infeasible,
    KtmpcConfig,
    KtmpcSolution,
    diagnostics,
    shifted_candidate,
    solve_steady_offline,
    solve_step,
)
from .model import DisturbanceModel, KoopmanModel, TrajectoryData, lift
from .sets import CONTAINS_TOL, TighteningSchedule, Zonotope, margin, sample


class InfeasibleAtStep(Exception):
    """Closed loop lost feasibility at `step`; the partial `log` is retained."""

    def __init__(self, step: int, log: "SimLog"):
        self.step = step
        self.log = log
        super().__init__(f"closed loop infeasible at step {step}")


# --- plants -----------------------------------------------------------------------

@dataclass(frozen=True)
class Plant:
    """A benchmark plant: batched dynamics f, batched output h, output matrix C."""

    kind: str
    n_x: int
    n_u: int
    C: np.ndarray
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    dt: float | None = None
    A_lift: np.ndarray | None = None
    B_lift: np.ndarray | None = None


def numerical_example_plant(lam: float = -0.1, mu: float = 2.0) -> Plant:
    """Two-state polynomial benchmark; its degree-2 lifting is exactly linear."""
    C = np.array([[0.0, 1.0]])
    A_lift = np.array([[lam, 0.0, 0.0], [0.0, mu, lam**2 - mu], [0.0, 0.0, lam**2]])
    B_lift = np.array([[0.0], [1.0], [0.0]])

    def f(X: np.ndarray, U: np.ndarray) -> np.ndarray:
        x1, x2 = X[:, 0], X[:, 1]
        return np.column_stack([lam * x1, mu * x2 + (lam**2 - mu) * x1**2 + U[:, 0]])

    return Plant(
        kind="numerical_example", n_x=2, n_u=1, C=C, f=f, h=lambda X: X @ C.T,
        A_lift=A_lift, B_lift=B_lift,
    )


def unicycle_plant(dt: float = 0.1) -> Plant:
    """Kinematic unicycle (p_x, p_y, theta) under forward-Euler discretization."""
    if not (dt > 0):
        raise ValueError("dt must be positive")
    C = np.hstack([np.eye(2), np.zeros((2, 1))])

    def f(X: np.ndarray, U: np.ndarray) -> np.ndarray:
        px, py, th = X[:, 0], X[:, 1], X[:, 2]
        v, w = U[:, 0], U[:, 1]
        return np.column_stack([px + dt * v * np.cos(th), py + dt * v * np.sin(th), th + dt * w])

    return Plant(kind="unicycle", n_x=3, n_u=2, C=C, f=f, h=lambda X: X @ C.T, dt=dt)


def step_plant(
    plant: Plant,
    x,
    u,
    rng: np.random.Generator | None = None,
    W: Zonotope | None = None,
    V: Zonotope | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One plant step; returns (x_next, y, w_injected, v_injected).

    For the polynomial benchmark the step is propagated through the exact
    lifted model ``z+ = A z + B u + w`` with ``x+ = C_x z+ + v``, so process
    noise lives in lifted coordinates.  The unicycle takes no injected
    disturbance: its model error plays that role.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (plant.n_x,) or u.shape != (plant.n_u,):
        raise ValueError(f"expected shapes ({plant.n_x},) and ({plant.n_u},)")
    if plant.kind == "numerical_example":
        if (W is not None or V is not None) and rng is None:
            raise ValueError("disturbance injection requires an rng")
        z = np.array([x[0], x[1], x[0] ** 2])
        w = sample(W, rng) if W is not None else np.zeros(3)
        v = sample(V, rng) if V is not None else np.zeros(2)
        if w.shape != (3,) or v.shape != (2,):
            raise ValueError("W must be 3-dimensional and V 2-dimensional")
        z_next = plant.A_lift @ z + plant.B_lift @ u + w
        x_next = z_next[:2] + v
    else:
        if W is not None or V is not None:
            raise ValueError("the unicycle plant takes no injected disturbance")
        x_next = plant.f(x[None, :], u[None, :])[0]
        w = v = np.zeros(0)
    return x_next, plant.C @ x_next, w, v


# --- reference schedules --------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceSchedule:
    """Either timed reference steps or a waypoint course with switch radius."""

    mode: str
    entries: tuple = ()
    points: tuple = ()
    switch_radius: float = 0.0

    @classmethod
    def timed(cls, entries) -> "ReferenceSchedule":
        norm = tuple((int(k), np.atleast_1d(np.asarray(y, dtype=float))) for k, y in entries)
        if not norm or norm[0][0] != 0:
            raise ValueError("timed schedule must start at step 0")
        starts = [k for k, _ in norm]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("timed entries must be strictly increasing in start_step")
        return cls(mode="timed", entries=norm)

    @classmethod
    def waypoints(cls, points, switch_radius: float) -> "ReferenceSchedule":
        pts = tuple(np.atleast_1d(np.asarray(p, dtype=float)) for p in points)
        if not pts:
            raise ValueError("waypoint schedule needs at least one point")
        if not (switch_radius > 0):
            raise ValueError("switch_radius must be positive")
        return cls(mode="waypoint", points=pts, switch_radius=float(switch_radius))


class _RefCursor:
    """Stateful reference lookup for one run; records waypoint arrival steps."""

    def __init__(self, refs: ReferenceSchedule):
        self.refs = refs
        self._i = 0
        self._last_reached = False
        self.reached_steps: list[int] = []

    def advance(self, k: int, position) -> tuple[np.ndarray, bool]:
        refs = self.refs
        if refs.mode == "timed":
            switched = False
            while self._i + 1 < len(refs.entries) and refs.entries[self._i + 1][0] <= k:
                self._i += 1
                switched = True
            return refs.entries[self._i][1], switched
        wp = refs.points[self._i]
        switched = False
        if position is not None and not self._last_reached:
            if np.linalg.norm(np.asarray(position, dtype=float) - wp) < refs.switch_radius:
                self.reached_steps.append(k)
                if self._i + 1 < len(refs.points):
                    self._i += 1
                    switched = True
                else:
                    self._last_reached = True
        return refs.points[self._i], switched


# --- logging ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimLog:
    """One record per simulated step; arrays are row-per-step."""

    k: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    y: np.ndarray
    y_t: np.ndarray
    y_s: np.ndarray
    u_s: np.ndarray
    y_sr: np.ndarray
    J_N: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    feasible: np.ndarray
    margin_min: np.ndarray
    state_margin: np.ndarray
    input_margin: np.ndarray
    w_inj: np.ndarray
    v_inj: np.ndarray
    reached_steps: tuple = ()
    halted_at: int | None = None

    @classmethod
    def empty(cls, n_x: int, n_u: int, n_y: int, n_z: int, n_w: int, n_v: int) -> "SimLog":
        def m(n):
            return np.zeros((0, n))

        return cls(
            k=np.zeros(0, dtype=int), x=m(n_x), z=m(n_z), u=m(n_u), y=m(n_y),
            y_t=m(n_y), y_s=m(n_y), u_s=m(n_u), y_sr=m(n_y), J_N=np.zeros(0),
            V1=np.zeros(0), V2=np.zeros(0), feasible=np.zeros(0, dtype=bool),
            margin_min=np.zeros(0), state_margin=np.zeros(0), input_margin=np.zeros(0),
            w_inj=m(n_w), v_inj=m(n_v),
        )


class _LogRows:
    def __init__(self):
        self.rows: dict[str, list] = {name: [] for name in (
            "k", "x", "z", "u", "y", "y_t", "y_s", "u_s", "y_sr", "J_N", "V1", "V2",
            "feasible", "margin_min", "state_margin", "input_margin", "w_inj", "v_inj",
        )}

    def append(self, **kw):
        for name, value in kw.items():
            self.rows[name].append(value)

    def build(self, reached_steps, halted_at) -> SimLog:
        out = {}
        for name, values in self.rows.items():
            arr = np.array(values)
            if name == "k":
                arr = arr.astype(int)
            elif name == "feasible":
                arr = arr.astype(bool)
            out[name] = arr
        return SimLog(reached_steps=tuple(reached_steps), halted_at=halted_at, **out)


def run_closed_loop(
    plant: Plant,
    model: KoopmanModel,
    config: KtmpcConfig,
    schedule: TighteningSchedule,
    refs: ReferenceSchedule,
    disturbances: DisturbanceModel | None = None,
    T: int = 100,
    seed: int = 0,
    x0=None,
) -> SimLog:
    """Run T controller steps from x0 (origin by default); seeded, deterministic.

    Raises :class:`InfeasibleAtStep` if any step's QP is infeasible; the log up
    to and including the failing step rides along on the exception.
    """
    rng = np.random.default_rng(seed)
    x = np.zeros(plant.n_x) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    W = disturbances.W if disturbances is not None else None
    V = disturbances.V if disturbances is not None else None
    n_w = 3 if plant.kind == "numerical_example" else 0
    n_v = 2 if plant.kind == "numerical_example" else 0

    cursor = _RefCursor(refs)
    offline_cache: dict[bytes, object] = {}
    rows = _LogRows()
    prev: KtmpcSolution | None = None

    for k in range(T):
        y_t, _ = cursor.advance(k, position=plant.C @ x)
        z = lift(model, x)
        y = plant.C @ x
        cand_margin = np.nan
        if prev is not None:
            _, _, report = shifted_candidate(prev, model, config, config.K, x, y_t, schedule)
            cand_margin = report.min_margin
        try:
            key = y_t.tobytes()
            if key not in offline_cache:
                offline_cache[key] = solve_steady_offline(model, schedule, y_t, config.s)
            offline = offline_cache[key]
            u_k, sol = solve_step(model, config, schedule, x, y_t, warm_start=prev)
        except Infeasible:
            rows.append(
                k=k, x=x, z=z, u=np.full(plant.n_u, np.nan), y=y, y_t=y_t,
                y_s=np.full(model.n_y, np.nan), u_s=np.full(plant.n_u, np.nan),
                y_sr=np.full(model.n_y, np.nan), J_N=np.nan, V1=np.nan, V2=np.nan,
                feasible=False, margin_min=cand_margin,
                state_margin=margin(schedule.state_sets[0], x), input_margin=np.nan,
                w_inj=np.zeros(n_w), v_inj=np.zeros(n_v),
            )
            raise InfeasibleAtStep(k, rows.build(cursor.reached_steps, halted_at=k)) from None
        diag = diagnostics(sol, offline)
        x_next, _, w, v = step_plant(plant, x, u_k, rng=rng, W=W, V=V)
        rows.append(
            k=k, x=x, z=z, u=u_k, y=y, y_t=y_t, y_s=sol.target.y_s, u_s=sol.target.u_s,
            y_sr=offline.y_s, J_N=sol.total_cost, V1=diag.V1, V2=diag.V2, feasible=True,
            margin_min=cand_margin, state_margin=margin(schedule.state_sets[0], x),
            input_margin=margin(schedule.input_sets[0], u_k), w_inj=w, v_inj=v,
        )
        x = x_next
        prev = sol
    return rows.build(cursor.reached_steps, halted_at=None)


# --- training data ----------------------------------------------------------------------

def generate_training_data(
    plant: Plant,
    n_traj: int,
    traj_len: int,
    input_box: Zonotope,
    state_box: Zonotope,
    seed: int,
) -> TrajectoryData:
    """Random-restart rollouts: uniform initial states, uniform i.i.d. inputs."""
    if state_box.dim != plant.n_x or input_box.dim != plant.n_u:
        raise ValueError("state_box/input_box dimensions do not match the plant")
    rng = np.random.default_rng(seed)
    trajectories = []
    for _ in range(n_traj):
        x = sample(state_box, rng)
        states, inputs = [x], []
        for _ in range(traj_len):
            u = sample(input_box, rng)
            x, _, _, _ = step_plant(plant, x, u)
            states.append(x)
            inputs.append(u)
        trajectories.append((np.array(states), np.array(inputs)))
    return TrajectoryData(trajectories)


# --- metrics and persistence ------------------------------------------------------------

def tracking_metrics(log: SimLog, settle_window: int) -> dict:
    """Summary of tracking quality against the per-segment reachable target.

    ``final_error`` is the worst segment's mean ``||y - y_sr~||`` over that
    segment's last ``settle_window`` steps; segments are maximal runs of equal
    reference values.  Margins within the membership tolerance of the boundary
    count as satisfied (same convention as :func:`koopmpc.sets.contains`), so
    an input sitting on an active bound does not report roundoff as violation.
    """
    if log.k.size == 0:
        raise ValueError("cannot compute metrics of an empty simulation log")
    if settle_window < 1:
        raise ValueError("settle_window must be at least 1")
    errs = np.linalg.norm(log.y - log.y_sr, axis=1)
    changed = np.any(log.y_t[1:] != log.y_t[:-1], axis=1)
    boundaries = [0] + list(np.nonzero(changed)[0] + 1) + [log.k.size]
    seg_means, pooled = [], []
    for lo, hi in zip(boundaries, boundaries[1:]):
        tail = errs[max(lo, hi - settle_window) : hi]
        seg_means.append(float(np.mean(tail)))
        pooled.extend(tail)
    worst = np.nanmin(
        np.concatenate([log.state_margin[None, :], log.input_margin[None, :]])
    )
    violation = max(0.0, -float(worst))
    return {
        "final_error": max(seg_means),
        "mean_settled_error": float(np.mean(pooled)),
        "max_constraint_violation": violation if violation > CONTAINS_TOL else 0.0,
        "steps_to_waypoints": list(log.reached_steps),
    }


def save_log_csv(log: SimLog, path) -> None:
    """Fixed-schema CSV: k,x_*,u_*,y_*,yt_*,ys_*,us_*,JN,V1,V2,feasible,margin_min."""
    def expand(tag, n):
        return [f"{tag}_{i}" for i in range(n)]

    header = (
        ["k"]
        + expand("x", log.x.shape[1])
        + expand("u", log.u.shape[1])
        + expand("y", log.y.shape[1])
        + expand("yt", log.y_t.shape[1])
        + expand("ys", log.y_s.shape[1])
        + expand("us", log.u_s.shape[1])
        + ["JN", "V1", "V2", "feasible", "margin_min"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(log.k.size):
            row = [int(log.k[i])]
            for arr in (log.x, log.u, log.y, log.y_t, log.y_s, log.u_s):
                row.extend(repr(float(v)) for v in arr[i])
            row.extend(repr(float(v[i])) for v in (log.J_N, log.V1, log.V2))
            row.append(int(log.feasible[i]))
            row.append(repr(float(log.margin_min[i])))
            writer.writerow(row)
