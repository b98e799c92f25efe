"""Lifted linear models: dictionary construction, EDMD fitting, persistence.

A model consists of lifted dynamics ``z+ = A z + B u`` together with the
projections ``C_x`` (lifted -> state) and ``C_y`` (lifted -> tracked output).
All lifting dictionaries here are identity-augmented: the first ``n_x``
coordinates of the lifted vector are the raw state, so ``C_x = [I 0]`` and
decoding is exact by construction.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.stats import qmc

from .sets import Zonotope

_KINDS = ("polynomial", "rbf", "explicit")
_PRES = ("identity", "planar_heading")


class UnderdeterminedData(Exception):
    """Raised when the regression data cannot pin down the lifted dynamics."""


def _as_matrix(M, name: str) -> np.ndarray:
    out = np.asarray(M, dtype=float)
    if out.ndim != 2 or not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be a finite 2-D array, got shape {out.shape}")
    return out


@dataclass(frozen=True)
class LiftingSpec:
    """Dictionary of scalar observables evaluated on the (pre-mapped) state.

    ``pre`` maps the raw state to the feature coordinates the dictionary is
    built over: ``identity`` keeps the state as-is, ``planar_heading`` maps
    ``(p_x, p_y, theta)`` to ``(p_x, p_y, sin theta, cos theta)``.  The lifted
    vector is always the raw state followed by the dictionary features, so
    ``n_z = n_x + <feature count>``.

    For ``kind="polynomial"`` the features are all monomials of total degree
    2..max_degree over the pre-features, plus the degree-1 pre-features that
    are not raw state coordinates (e.g. sin/cos of the heading).  For
    ``kind="explicit"`` the caller supplies the exponent matrix directly,
    one row per monomial.  For ``kind="rbf"`` the features are Gaussian bumps
    ``exp(-||f - c_i||^2 / (2 width^2))`` around the given centers.
    """

    kind: str
    n_x: int
    pre: str = "identity"
    max_degree: int | None = None
    centers: np.ndarray | None = None
    width: float | None = None
    exponents: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown lifting kind {self.kind!r}")
        if self.pre not in _PRES:
            raise ValueError(f"unknown pre-map {self.pre!r}")
        if not (isinstance(self.n_x, (int, np.integer)) and self.n_x >= 1):
            raise ValueError("n_x must be a positive integer")
        if self.pre == "planar_heading" and self.n_x != 3:
            raise ValueError("planar_heading pre-map requires n_x == 3")
        n_f = self._n_features_in()
        if self.kind == "polynomial":
            if not (isinstance(self.max_degree, (int, np.integer)) and self.max_degree >= 1):
                raise ValueError("polynomial lifting requires max_degree >= 1")
            exps = _monomial_exponents(n_f, int(self.max_degree), self._extra_degree_one())
            object.__setattr__(self, "exponents", exps)
        elif self.kind == "explicit":
            exps = np.asarray(self.exponents)
            if exps.ndim != 2 or exps.shape[1] != n_f:
                raise ValueError(f"exponents must have shape (k, {n_f})")
            if not np.issubdtype(exps.dtype, np.integer) and not np.all(exps == exps.astype(int)):
                raise ValueError("exponents must be non-negative integers")
            exps = exps.astype(int)
            if np.any(exps < 0):
                raise ValueError("exponents must be non-negative integers")
            object.__setattr__(self, "exponents", exps)
        else:  # rbf
            centers = _as_matrix(self.centers, "centers")
            if centers.shape[1] != n_f:
                raise ValueError(f"centers must have {n_f} columns")
            if self.width is None or not (float(self.width) > 0):
                raise ValueError("rbf lifting requires width > 0")
            object.__setattr__(self, "centers", centers)
            object.__setattr__(self, "width", float(self.width))

    def _n_features_in(self) -> int:
        return 4 if self.pre == "planar_heading" else self.n_x

    def _extra_degree_one(self) -> list[int]:
        # Pre-feature indices that are not raw state coordinates and therefore
        # deserve a degree-1 observable of their own (sin/cos of the heading).
        if self.pre == "planar_heading":
            return [2, 3]
        return []

    @property
    def n_z(self) -> int:
        if self.kind == "rbf":
            return self.n_x + self.centers.shape[0]
        return self.n_x + self.exponents.shape[0]


def _monomial_exponents(n_f: int, max_degree: int, extra_degree_one: Sequence[int]) -> np.ndarray:
    rows = []
    for idx in extra_degree_one:
        e = np.zeros(n_f, dtype=int)
        e[idx] = 1
        rows.append(e)
    for degree in range(2, max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_f), degree):
            e = np.zeros(n_f, dtype=int)
            for i in combo:
                e[i] += 1
            rows.append(e)
    if not rows:
        return np.zeros((0, n_f), dtype=int)
    return np.array(rows, dtype=int)


def _pre_map(spec: LiftingSpec, X: np.ndarray) -> np.ndarray:
    if spec.pre == "identity":
        return X
    return np.column_stack([X[:, 0], X[:, 1], np.sin(X[:, 2]), np.cos(X[:, 2])])


def _features(spec: LiftingSpec, X: np.ndarray) -> np.ndarray:
    """Dictionary features (beyond the identity block) for a batch of states."""
    F = _pre_map(spec, X)
    if spec.kind == "rbf":
        d2 = ((F[:, None, :] - spec.centers[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-d2 / (2.0 * spec.width**2))
    if spec.exponents.shape[0] == 0:
        return np.zeros((X.shape[0], 0))
    return np.prod(F[:, None, :] ** spec.exponents[None, :, :], axis=2)


@dataclass(frozen=True)
class KoopmanModel:
    """Fitted lifted-linear model with state and output projections."""

    A: np.ndarray
    B: np.ndarray
    C_x: np.ndarray
    C_y: np.ndarray
    lifting: LiftingSpec

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C_x = _as_matrix(self.C_x, "C_x")
        C_y = _as_matrix(self.C_y, "C_y")
        n_z = self.lifting.n_z
        if A.shape != (n_z, n_z):
            raise ValueError(f"A must be {n_z}x{n_z}, got {A.shape}")
        if B.shape[0] != n_z:
            raise ValueError(f"B must have {n_z} rows, got {B.shape}")
        if C_x.shape != (self.lifting.n_x, n_z):
            raise ValueError(f"C_x must be {self.lifting.n_x}x{n_z}, got {C_x.shape}")
        if C_y.shape[1] != n_z:
            raise ValueError(f"C_y must have {n_z} columns, got {C_y.shape}")
        for name, M in (("A", A), ("B", B), ("C_x", C_x), ("C_y", C_y)):
            object.__setattr__(self, name, M)

    @property
    def n_x(self) -> int:
        return self.C_x.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C_y.shape[0]

    @property
    def n_z(self) -> int:
        return self.A.shape[0]


def make_model(A, B, lifting: LiftingSpec, output_matrix=None) -> KoopmanModel:
    """Assemble a model around identity-augmented projections.

    ``C_x = [I 0]`` picks the raw state out of the lifted vector; the output
    map is ``output_matrix @ C_x`` (identity over the state by default).
    """
    n_z = lifting.n_z
    C_x = np.hstack([np.eye(lifting.n_x), np.zeros((lifting.n_x, n_z - lifting.n_x))])
    if output_matrix is None:
        output_matrix = np.eye(lifting.n_x)
    C = _as_matrix(output_matrix, "output_matrix")
    if C.shape[1] != lifting.n_x:
        raise ValueError(f"output_matrix must have {lifting.n_x} columns")
    return KoopmanModel(A=A, B=B, C_x=C_x, C_y=C @ C_x, lifting=lifting)


# --- pointwise operations -----------------------------------------------------

def lift(model: KoopmanModel, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (model.n_x,):
        raise ValueError(f"state must have shape ({model.n_x},), got {x.shape}")
    return np.concatenate([x, _features(model.lifting, x[None, :])[0]])


def lift_many(model: KoopmanModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_x:
        raise ValueError(f"states must have shape (n, {model.n_x}), got {X.shape}")
    return np.hstack([X, _features(model.lifting, X)])


def predict(model: KoopmanModel, z, u) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if z.shape != (model.n_z,) or u.shape != (model.n_u,):
        raise ValueError(
            f"expected z of shape ({model.n_z},) and u of shape ({model.n_u},), "
            f"got {z.shape} and {u.shape}"
        )
    return model.A @ z + model.B @ u


def decode(model: KoopmanModel, z) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (model.n_z,):
        raise ValueError(f"lifted state must have shape ({model.n_z},), got {z.shape}")
    return model.C_x @ z


def output(model: KoopmanModel, z) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (model.n_z,):
        raise ValueError(f"lifted state must have shape ({model.n_z},), got {z.shape}")
    return model.C_y @ z


# --- training data ---------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryData:
    """A list of (states, inputs) pairs with states one step longer than inputs."""

    trajectories: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        checked = []
        for i, (states, inputs) in enumerate(self.trajectories):
            states = _as_matrix(states, f"trajectory {i} states")
            inputs = _as_matrix(inputs, f"trajectory {i} inputs")
            if states.shape[0] != inputs.shape[0] + 1:
                raise ValueError(
                    f"trajectory {i}: expected one more state than input, got "
                    f"{states.shape[0]} states and {inputs.shape[0]} inputs"
                )
            if checked and (
                states.shape[1] != checked[0][0].shape[1]
                or inputs.shape[1] != checked[0][1].shape[1]
            ):
                raise ValueError("all trajectories must share state/input dimensions")
            checked.append((states, inputs))
        object.__setattr__(self, "trajectories", checked)

    @property
    def n_x(self) -> int:
        return self.trajectories[0][0].shape[1]

    @property
    def n_u(self) -> int:
        return self.trajectories[0][1].shape[1]

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (x, u, x+) triples across all trajectories."""
        X = np.vstack([s[:-1] for s, _ in self.trajectories])
        U = np.vstack([u for _, u in self.trajectories])
        Xp = np.vstack([s[1:] for s, _ in self.trajectories])
        return X, U, Xp

    def all_states(self) -> np.ndarray:
        return np.vstack([s for s, _ in self.trajectories])


# --- fitting ------------------------------------------------------------------------

def fit_edmd(
    data: TrajectoryData,
    lifting: LiftingSpec,
    ridge: float = 1e-8,
    output_matrix=None,
) -> KoopmanModel:
    """Least-squares fit of the lifted transition matrices from trajectory data.

    Solves ``min_{A,B} sum ||A psi(x) + B u - psi(x+)||^2`` (plus an optional
    ridge penalty on the coefficients).  With ``ridge=0`` the data must make
    the regression full-rank, otherwise :class:`UnderdeterminedData` is raised.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if not data.trajectories:
        raise UnderdeterminedData("no trajectories provided")
    if data.n_x != lifting.n_x:
        raise ValueError(f"data has n_x={data.n_x} but lifting expects {lifting.n_x}")
    X, U, Xp = data.transitions()
    n_z, n_u = lifting.n_z, U.shape[1]
    probe = make_model(np.zeros((n_z, n_z)), np.zeros((n_z, n_u)), lifting, output_matrix)
    Phi = np.hstack([lift_many(probe, X), U])
    Psi_next = lift_many(probe, Xp)
    n_cols = n_z + n_u
    if Phi.shape[0] < n_cols:
        raise UnderdeterminedData(
            f"{Phi.shape[0]} transitions cannot determine {n_cols} coefficient columns"
        )
    if ridge == 0.0:
        Theta_T, _, rank, _ = np.linalg.lstsq(Phi, Psi_next, rcond=None)
        if rank < n_cols:
            raise UnderdeterminedData(
                f"regressor matrix has rank {rank} < {n_cols}; "
                "add richer trajectories or use ridge > 0"
            )
    else:
        G = Phi.T @ Phi + ridge * np.eye(n_cols)
        Theta_T = np.linalg.solve(G, Phi.T @ Psi_next)
    Theta = Theta_T.T
    return make_model(Theta[:, :n_z], Theta[:, n_z:], lifting, output_matrix)


# --- disturbance estimation ------------------------------------------------------------

@dataclass(frozen=True)
class DisturbanceModel:
    """Bounded process (lifted) and measurement (state) disturbance sets."""

    W: Zonotope
    V: Zonotope

    def __post_init__(self):
        for name, Z in (("W", self.W), ("V", self.V)):
            if not _zonotope_contains_origin(Z):
                raise ValueError(f"{name} must contain the origin")


def _zonotope_contains_origin(Z: Zonotope, tol: float = 1e-9) -> bool:
    if np.allclose(Z.center, 0.0, atol=tol):
        return True
    # Feasibility of c + G xi = 0 with ||xi||_inf <= 1.
    n, g = Z.generators.shape
    if g == 0:
        return bool(np.max(np.abs(Z.center)) <= tol)
    res = linprog(
        c=np.zeros(g),
        A_eq=Z.generators,
        b_eq=-Z.center,
        bounds=[(-1.0, 1.0)] * g,
        method="highs",
    )
    return bool(res.status == 0)


def estimate_disturbance_sets(
    model: KoopmanModel, data: TrajectoryData, inflation: float = 1.0
) -> DisturbanceModel:
    """Axis-aligned residual bounds, symmetrized about their midpoint.

    The process residual is ``psi(x+) - A psi(x) - B u`` per transition; the
    measurement residual is ``x - C_x psi(x)`` per visited state (identically
    zero for identity-augmented dictionaries).  Each residual range [lo, hi]
    becomes an interval ``mid +- inflation * (hi - lo) / 2``.
    """
    if inflation < 1.0:
        raise ValueError("inflation must be >= 1")
    if not data.trajectories:
        raise ValueError("cannot estimate disturbance sets from empty data")
    X, U, Xp = data.transitions()
    W_res = lift_many(model, Xp) - lift_many(model, X) @ model.A.T - U @ model.B.T
    states = data.all_states()
    V_res = states - lift_many(model, states) @ model.C_x.T

    def symmetric_box(res: np.ndarray) -> Zonotope:
        lo, hi = res.min(axis=0), res.max(axis=0)
        mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
        return Zonotope(center=mid, generators=np.diag(half * inflation))

    return DisturbanceModel(W=symmetric_box(W_res), V=symmetric_box(V_res))


# --- persistence -----------------------------------------------------------------------

def _lifting_to_doc(spec: LiftingSpec) -> dict:
    params: dict = {"pre": spec.pre}
    if spec.kind == "polynomial":
        params["max_degree"] = int(spec.max_degree)
    elif spec.kind == "explicit":
        params["exponents"] = spec.exponents.tolist()
    else:
        params["centers"] = spec.centers.tolist()
        params["width"] = spec.width
    return {"kind": spec.kind, "params": params}


def _lifting_from_doc(doc: dict, n_x: int) -> LiftingSpec:
    params = doc["params"]
    common = {"kind": doc["kind"], "n_x": n_x, "pre": params.get("pre", "identity")}
    if doc["kind"] == "polynomial":
        return LiftingSpec(**common, max_degree=params["max_degree"])
    if doc["kind"] == "explicit":
        return LiftingSpec(**common, exponents=np.array(params["exponents"], dtype=int))
    return LiftingSpec(**common, centers=params["centers"], width=params["width"])


def save_model(model: KoopmanModel, path) -> None:
    doc = {
        "n_x": model.n_x,
        "n_u": model.n_u,
        "n_y": model.n_y,
        "n_z": model.n_z,
        "lifting": _lifting_to_doc(model.lifting),
        "A": model.A.tolist(),
        "B": model.B.tolist(),
        "C_x": model.C_x.tolist(),
        "C_y": model.C_y.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path) -> KoopmanModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path} is not valid JSON: {exc}") from exc
    try:
        lifting = _lifting_from_doc(doc["lifting"], int(doc["n_x"]))
        model = KoopmanModel(
            A=np.array(doc["A"], dtype=float),
            B=np.array(doc["B"], dtype=float),
            C_x=np.array(doc["C_x"], dtype=float),
            C_y=np.array(doc["C_y"], dtype=float),
            lifting=lifting,
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path} is missing required model fields: {exc}") from exc
    for key in ("n_u", "n_y", "n_z"):
        if int(doc[key]) != getattr(model, key):
            raise ValueError(f"{path}: declared {key}={doc[key]} does not match matrices")
    return model


def save_trajectories(data: TrajectoryData, path) -> None:
    """CSV with one row per time step; the final row of each trajectory has no input."""
    header = (
        ["traj_id", "t"]
        + [f"x_{i}" for i in range(data.n_x)]
        + [f"u_{i}" for i in range(data.n_u)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for traj_id, (states, inputs) in enumerate(data.trajectories):
            for t, x in enumerate(states):
                u = [repr(float(v)) for v in inputs[t]] if t < len(inputs) else [""] * data.n_u
                writer.writerow([traj_id, t] + [repr(float(v)) for v in x] + u)


def load_trajectories(path) -> TrajectoryData:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        n_x = sum(1 for h in header if h.startswith("x_"))
        n_u = sum(1 for h in header if h.startswith("u_"))
        expected = ["traj_id", "t"] + [f"x_{i}" for i in range(n_x)] + [f"u_{i}" for i in range(n_u)]
        if header != expected or n_x == 0 or n_u == 0:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [(row, line_no) for line_no, row in enumerate(reader, start=2) if row]

    by_traj: dict[str, list[tuple[list[float], list[float] | None]]] = {}
    order: list[str] = []
    for row, line_no in rows:
        if len(row) != len(expected):
            raise ValueError(f"{path}:{line_no}: expected {len(expected)} cells, got {len(row)}")
        try:
            x = [float(v) for v in row[2 : 2 + n_x]]
            u_cells = row[2 + n_x :]
            u = None if all(c == "" for c in u_cells) else [float(v) for v in u_cells]
        except ValueError:
            raise ValueError(f"{path}:{line_no}: non-numeric cell") from None
        if row[0] not in by_traj:
            by_traj[row[0]] = []
            order.append(row[0])
        by_traj[row[0]].append((x, u))

    trajectories = []
    for traj_id in order:
        steps = by_traj[traj_id]
        states = np.array([x for x, _ in steps])
        for i, (_, u) in enumerate(steps):
            if (u is None) != (i == len(steps) - 1):
                raise ValueError(
                    f"{path}: trajectory {traj_id} must leave exactly the last input empty"
                )
        inputs = np.array([u for _, u in steps[:-1]], dtype=float).reshape(len(steps) - 1, n_u)
        trajectories.append((states, inputs))
    return TrajectoryData(trajectories)


def latin_hypercube_centers(lo, hi, count: int, seed: int = 0) -> np.ndarray:
    """Deterministic Latin-hypercube RBF centers spread over a box."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("need lo < hi elementwise")
    sampler = qmc.LatinHypercube(d=lo.size, seed=seed)
    return lo + sampler.random(count) * (hi - lo)
