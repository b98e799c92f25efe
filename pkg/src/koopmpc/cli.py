"""Command-line front end for fitting, tightening, simulation, and target inspection.

A *scenario* is a single JSON document that describes everything a run needs:
the plant, the lifting dictionary, where training data comes from (a CSV path,
resolved relative to the scenario file, or an inline generation recipe), the
disturbance description used for tightening (``declared`` sets or
``estimate`` + inflation), the disturbance actually injected into the plant
(``injected``, optional), box constraints, controller weights, the reference
schedule, and run length.  See ``scenarios/`` for complete examples.

Exit codes: 0 success, 2 missing/malformed input, 3 underdetermined fit,
4 empty tightened constraint set, 5 closed-loop infeasibility.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .controller import (
    GridSpec,
    Infeasible,
    KtmpcConfig,
    solve_steady_nonlinear,
    solve_steady_offline,
)
from .gains import dlqr
from .model import (
    TrajectoryData,
    UnderdeterminedData,
    _lifting_from_doc,
    decode,
    estimate_disturbance_sets,
    fit_edmd,
    lift,
    load_trajectories,
    predict,
    save_model,
    DisturbanceModel,
)
from .sets import EmptyTightenedSet, Zonotope, box_polytope, tighten_constraints
from .sim import (
    InfeasibleAtStep,
    ReferenceSchedule,
    generate_training_data,
    numerical_example_plant,
    run_closed_loop,
    save_log_csv,
    tracking_metrics,
    unicycle_plant,
)

# Grid resolutions for the fixed-point oracle when the scenario does not
# override them; chosen so the benchmark grids land exactly on the known
# steady pairs while staying fast for the 3-state unicycle.
_DEFAULT_GRIDS = {
    "numerical_example": ([11, 101], [121]),
    "unicycle": ([13, 13, 13], [5, 9]),
}


def _load_json(path) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"{path} must contain a JSON object")
    return doc


def _zonotope_from_doc(doc: dict, what: str) -> Zonotope:
    try:
        center = np.asarray(doc["center"], dtype=float)
        if "half_extents" in doc:
            gens = np.diag(np.asarray(doc["half_extents"], dtype=float))
        else:
            gens = np.asarray(doc["generators"], dtype=float)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{what} needs 'center' and 'half_extents' or 'generators'") from exc
    return Zonotope(center=center, generators=gens)


def _weight(value, n: int, what: str) -> np.ndarray:
    """Scalar shorthand c -> c * I_n; otherwise an explicit matrix."""
    if isinstance(value, (int, float)):
        return float(value) * np.eye(n)
    M = np.asarray(value, dtype=float)
    if M.shape != (n, n):
        raise ValueError(f"{what} must be a scalar or an {n}x{n} matrix, got shape {M.shape}")
    return M


def _build_plant(doc: dict):
    kind = doc.get("kind")
    params = doc.get("params", {})
    if kind == "numerical_example":
        return numerical_example_plant(
            lam=float(params.get("lambda", -0.1)), mu=float(params.get("mu", 2.0))
        )
    if kind == "unicycle":
        return unicycle_plant(dt=float(params.get("dt", 0.1)))
    raise ValueError(f"unknown plant kind {kind!r}")


def _training_data(sc: dict, plant, scenario_dir: Path) -> TrajectoryData:
    doc = sc.get("data")
    if not isinstance(doc, dict) or ("path" not in doc) == ("generate" not in doc):
        raise ValueError("scenario 'data' must give exactly one of 'path' or 'generate'")
    if "path" in doc:
        return load_trajectories(scenario_dir / doc["path"])
    gen = doc["generate"]
    return generate_training_data(
        plant,
        n_traj=int(gen["n_traj"]),
        traj_len=int(gen["traj_len"]),
        input_box=_zonotope_from_doc(gen["input_box"], "data.generate.input_box"),
        state_box=_zonotope_from_doc(gen["state_box"], "data.generate.state_box"),
        seed=int(gen.get("seed", 0)),
    )


def _fit_from_scenario(sc: dict, plant, scenario_dir: Path):
    lifting = _lifting_from_doc(sc["lifting"], n_x=plant.n_x)
    data = _training_data(sc, plant, scenario_dir)
    output_matrix = sc.get("output_matrix")
    if output_matrix is not None:
        output_matrix = np.asarray(output_matrix, dtype=float)
    model = fit_edmd(data, lifting, ridge=float(sc.get("ridge", 1e-8)), output_matrix=output_matrix)
    return model, data


def _disturbance_from_scenario(sc: dict, model, data) -> DisturbanceModel:
    doc = sc.get("disturbance")
    if not isinstance(doc, dict) or ("declared" not in doc) == ("estimate" not in doc):
        raise ValueError("scenario 'disturbance' must give exactly one of 'declared' or 'estimate'")
    if "declared" in doc:
        return DisturbanceModel(
            W=_zonotope_from_doc(doc["declared"]["W"], "disturbance.declared.W"),
            V=_zonotope_from_doc(doc["declared"]["V"], "disturbance.declared.V"),
        )
    return estimate_disturbance_sets(model, data, inflation=float(doc["estimate"].get("inflation", 1.0)))


def _injected_from_scenario(sc: dict) -> DisturbanceModel | None:
    doc = sc.get("injected")
    if doc is None:
        return None
    return DisturbanceModel(
        W=_zonotope_from_doc(doc["W"], "injected.W"),
        V=_zonotope_from_doc(doc["V"], "injected.V"),
    )


def _constraint_boxes(sc: dict):
    con = sc["constraints"]
    X = box_polytope(con["state"]["lo"], con["state"]["hi"])
    U = box_polytope(con["input"]["lo"], con["input"]["hi"])
    return X, U


def _controller_from_scenario(sc: dict, model, disturbance):
    cfg_doc = sc["controller"]
    N = int(cfg_doc["N"])
    lqr_doc = cfg_doc.get("lqr", {})
    gain = dlqr(
        model.A,
        model.B,
        _weight(lqr_doc.get("Qk", 1.0), model.n_z, "controller.lqr.Qk"),
        _weight(lqr_doc.get("Rk", 1.0), model.n_u, "controller.lqr.Rk"),
        tol=float(lqr_doc.get("tol", 1e-12)),
        max_iter=int(lqr_doc.get("max_iter", 10_000)),
    )
    X, U = _constraint_boxes(sc)
    schedule = tighten_constraints(X, U, disturbance, model.A, model.B, gain.K, model.C_x, N)
    config = KtmpcConfig(
        N=N,
        Q=_weight(cfg_doc["Q"], model.n_z, "controller.Q"),
        R=_weight(cfg_doc["R"], model.n_u, "controller.R"),
        s=float(cfg_doc["s"]),
        K=gain.K,
    )
    return config, schedule


def _refs_from_scenario(sc: dict) -> ReferenceSchedule:
    doc = sc.get("references")
    if isinstance(doc, dict) and "timed" in doc:
        return ReferenceSchedule.timed([(int(k), y) for k, y in doc["timed"]])
    if isinstance(doc, dict) and "waypoints" in doc:
        wp = doc["waypoints"]
        return ReferenceSchedule.waypoints(wp["points"], switch_radius=float(wp["switch_radius"]))
    raise ValueError("scenario 'references' must give 'timed' or 'waypoints'")


def _grid_from_scenario(sc: dict, plant) -> GridSpec:
    con = sc["constraints"]
    x_lo, x_hi = con["state"]["lo"], con["state"]["hi"]
    u_lo, u_hi = con["input"]["lo"], con["input"]["hi"]
    doc = sc.get("steady_grid", {})
    x_default, u_default = _DEFAULT_GRIDS[plant.kind]
    x_points = doc.get("x_points", x_default)
    u_points = doc.get("u_points", u_default)
    return GridSpec(
        x_values=tuple(np.linspace(lo, hi, int(n)) for lo, hi, n in zip(x_lo, x_hi, x_points)),
        u_values=tuple(np.linspace(lo, hi, int(n)) for lo, hi, n in zip(u_lo, u_hi, u_points)),
        fp_tol=float(doc.get("fp_tol", 1e-6)),
    )


# --- subcommands -----------------------------------------------------------------------

def cmd_fit(data_csv, lifting_json, out_model_json) -> int:
    """Fit a lifted linear model from a trajectory CSV and report held-out errors.

    The last ~10% of trajectories are held out; the multi-step error rolls the
    fitted model forward up to 10 steps (capped at trajectory length) under the
    recorded inputs.
    """
    lift_doc = _load_json(lifting_json)
    try:
        lifting = _lifting_from_doc(lift_doc, n_x=int(lift_doc["n_x"]))
    except KeyError as exc:
        raise ValueError(f"{lifting_json} is missing required field {exc}") from exc
    output_matrix = lift_doc.get("output_matrix")
    if output_matrix is not None:
        output_matrix = np.asarray(output_matrix, dtype=float)

    data = load_trajectories(data_csv)
    n_hold = max(1, len(data.trajectories) // 10)
    train_trajs = data.trajectories[:-n_hold] or data.trajectories
    model = fit_edmd(
        TrajectoryData(train_trajs),
        lifting,
        ridge=float(lift_doc.get("ridge", 1e-8)),
        output_matrix=output_matrix,
    )

    one_step, multi_step = [], []
    for states, inputs in data.trajectories[-n_hold:]:
        z = lift(model, states[0])
        for t, u in enumerate(inputs[: min(10, len(inputs))]):
            z_next = predict(model, lift(model, states[t]), u)
            one_step.append(np.linalg.norm(decode(model, z_next) - states[t + 1]))
            z = predict(model, z, u)
            multi_step.append(np.linalg.norm(decode(model, z) - states[t + 1]))
    save_model(model, out_model_json)
    n_train = sum(len(inputs) for _, inputs in train_trajs)
    print(f"fitted lifted model: n_z={model.n_z}, {n_train} training transitions, "
          f"{n_hold} held-out trajectories")
    print(f"one-step mean prediction error: {float(np.mean(one_step)):.6e}")
    print(f"10-step mean prediction error:  {float(np.mean(multi_step)):.6e}")
    print(f"wrote {out_model_json}")
    return 0


def _polytope_doc(P) -> dict:
    return {"normals": P.normals.tolist(), "offsets": P.offsets.tolist()}


def cmd_tighten(scenario_json, out_json) -> int:
    """Compute the tightened constraint schedule for a scenario and save it as JSON."""
    sc = _load_json(scenario_json)
    plant = _build_plant(sc["plant"])
    model, data = _fit_from_scenario(sc, plant, Path(scenario_json).parent)
    disturbance = _disturbance_from_scenario(sc, model, data)
    _, schedule = _controller_from_scenario(sc, model, disturbance)
    doc = {
        "horizon": schedule.horizon,
        "state_sets": [_polytope_doc(P) for P in schedule.state_sets],
        "input_sets": [_polytope_doc(P) for P in schedule.input_sets],
        "error_sets": [
            {"center": Z.center.tolist(), "generators": Z.generators.tolist()}
            for Z in schedule.error_sets
        ],
    }
    Path(out_json).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"wrote tightening schedule (N={schedule.horizon}) to {out_json}")
    return 0


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def cmd_simulate(scenario_json, seed=None, seeds=None, out=None, deterministic=False) -> int:
    """Run the closed loop for one or more seeds, writing a log CSV and metrics JSON each."""
    sc = _load_json(scenario_json)
    plant = _build_plant(sc["plant"])
    model, data = _fit_from_scenario(sc, plant, Path(scenario_json).parent)
    disturbance = _disturbance_from_scenario(sc, model, data)
    config, schedule = _controller_from_scenario(sc, model, disturbance)
    refs = _refs_from_scenario(sc)
    injected = _injected_from_scenario(sc)
    x0 = None if sc.get("x0") is None else np.asarray(sc["x0"], dtype=float)
    settle_window = int(sc.get("settle_window", 20))

    seed_list = seeds if seeds is not None else [seed if seed is not None else int(sc.get("seed", 0))]
    out_dir = Path(out) if out is not None else Path(sc.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    any_halted = False
    for run_seed in seed_list:
        try:
            log = run_closed_loop(
                plant, model, config, schedule, refs,
                disturbances=injected, T=int(sc["T"]), seed=int(run_seed), x0=x0,
            )
        except InfeasibleAtStep as exc:
            log = exc.log
            any_halted = True
        m = tracking_metrics(log, settle_window=settle_window)
        metrics = {
            "seed": int(run_seed),
            "halted_at": log.halted_at,
            "final_error": _json_float(m["final_error"]),
            "mean_settled_error": _json_float(m["mean_settled_error"]),
            "max_constraint_violation": _json_float(m["max_constraint_violation"]),
            "steps_to_waypoints": [int(k) for k in m["steps_to_waypoints"]],
        }
        if not deterministic:
            metrics["timestamp"] = datetime.now(timezone.utc).isoformat()
        log_path = out_dir / f"log_seed{run_seed}.csv"
        save_log_csv(log, log_path)
        (out_dir / f"metrics_seed{run_seed}.json").write_text(
            json.dumps(metrics, indent=2, sort_keys=True) + "\n"
        )
        status = f"halted at step {log.halted_at}" if log.halted_at is not None else "ok"
        print(f"seed {run_seed}: {status}, final_error={metrics['final_error']}, "
              f"log -> {log_path}")
    return 5 if any_halted else 0


def cmd_steady(scenario_json, y_t) -> int:
    """Print the lifted-model steady target next to a grid search over true plant fixed points."""
    sc = _load_json(scenario_json)
    plant = _build_plant(sc["plant"])
    model, data = _fit_from_scenario(sc, plant, Path(scenario_json).parent)
    disturbance = _disturbance_from_scenario(sc, model, data)
    config, schedule = _controller_from_scenario(sc, model, disturbance)
    y_target = np.atleast_1d(np.asarray(y_t, dtype=float))

    target = solve_steady_offline(model, schedule, y_target, config.s)
    x_s = model.C_x @ target.z_s
    print(f"lifted-model steady target: y_s = {np.array2string(target.y_s)}, "
          f"x_s = {np.array2string(x_s)}, u_s = {np.array2string(target.u_s)}, "
          f"offset cost = {target.offset_cost:.6e}")

    if plant.kind not in _DEFAULT_GRIDS:
        print("no fixed-point oracle for this plant kind; skipping grid search")
        return 0
    try:
        oracle = solve_steady_nonlinear(plant, y_target, config.s, _grid_from_scenario(sc, plant))
    except ValueError as exc:
        print(f"grid search found no steady pair: {exc}")
        return 0
    print(f"plant fixed-point target:   y_s = {np.array2string(oracle.y_s)}, "
          f"x_s = {np.array2string(oracle.x_s)}, u_s = {np.array2string(oracle.u_s)}, "
          f"offset cost = {oracle.offset_cost:.6e}")
    print(f"output gap between the two: {float(np.max(np.abs(target.y_s - oracle.y_s))):.6e}")
    return 0


# --- argument parsing ------------------------------------------------------------------

def _parse_seed_range(text: str) -> list[int]:
    """'a..b' -> [a, ..., b] inclusive; a bare integer -> [a]."""
    if ".." in text:
        lo_text, hi_text = text.split("..", 1)
        lo, hi = int(lo_text), int(hi_text)
        if hi < lo:
            raise ValueError(f"--seeds range {text!r} is empty")
        return list(range(lo, hi + 1))
    return [int(text)]


def _parse_targets(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",")]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="koopmpc",
        description="Tracking MPC on lifted linear models: fit, tighten, simulate, steady.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a lifted linear model from a trajectory CSV")
    p.add_argument("data_csv")
    p.add_argument("lifting_json")
    p.add_argument("out_model_json")

    p = sub.add_parser("tighten", help="compute and save the tightened constraint schedule")
    p.add_argument("scenario_json")
    p.add_argument("out_json")

    p = sub.add_parser("simulate", help="run the closed loop described by a scenario")
    p.add_argument("scenario_json")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--seeds", type=str, default=None,
                   help="inclusive range a..b; runs one simulation per seed")
    p.add_argument("--out", type=str, default=None, help="output directory override")
    p.add_argument("--deterministic", action="store_true",
                   help="omit timestamps so outputs are byte-for-byte reproducible")

    p = sub.add_parser("steady", help="compare the steady target against a plant grid search")
    p.add_argument("scenario_json")
    p.add_argument("y_t", help="target output, comma-separated floats")

    args = parser.parse_args(argv)
    try:
        if args.command == "fit":
            return cmd_fit(args.data_csv, args.lifting_json, args.out_model_json)
        if args.command == "tighten":
            return cmd_tighten(args.scenario_json, args.out_json)
        if args.command == "simulate":
            seeds = None if args.seeds is None else _parse_seed_range(args.seeds)
            return cmd_simulate(args.scenario_json, seed=args.seed, seeds=seeds,
                                out=args.out, deterministic=args.deterministic)
        if args.command == "steady":
            return cmd_steady(args.scenario_json, _parse_targets(args.y_t))
    except UnderdeterminedData as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return 3
    except EmptyTightenedSet as exc:
        print(f"tightening failed: {exc}", file=sys.stderr)
        return 4
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 5
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
