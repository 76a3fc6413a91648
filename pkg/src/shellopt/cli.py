"""Command line front end: solve, follower, simulate, toy.

Exit codes: 0 success, 2 solver abort, 64 configuration error, 65 input
data error.  Every run writes a summary.json containing the fully resolved
configuration, so a run is reconstructible from its artifacts alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import bilevel, risk
from .config import RunConfig, load_config
from .elastic import (ElasticComponents, MaterialField, SPDFactorization, assemble_components,
                      assemble_h, solve_state)
from .errors import (ConfigError, DirichletError, InputDataError, MaterialError,
                     MeshError, ShelloptError)
from .follower import ForceModel, FollowerResult, build_force_basis, solve_follower
from .leader import (LeaderConfig, NoiseModel, default_initial_thickness, sgd,
                     simulate_outcomes, tracking_mask)
from .mesh import (ShellMesh, build_topology, load_obj, reference_quantities,
                   save_obj, select_dirichlet, vertex_normals)

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_CONFIG = 64
EXIT_INPUT = 65


@dataclass
class Problem:
    """Everything assembled from a config: mesh, operators, models."""

    cfg: RunConfig
    mesh: ShellMesh
    components: ElasticComponents
    model: ForceModel
    chi: np.ndarray
    material: MaterialField
    noise: NoiseModel
    leader_cfg: LeaderConfig


def build_problem(cfg: RunConfig, workers: int) -> Problem:
    mesh = build_topology(load_obj(cfg.mesh))
    mesh = select_dirichlet(mesh, indices=cfg.dirichlet.get("indices"),
                            z_threshold=cfg.dirichlet.get("z_threshold"))
    ref = reference_quantities(mesh)
    components = assemble_components(mesh, ref, mu=cfg.elastic["mu"],
                                     lam=cfg.elastic["lam"], gamma=cfg.elastic["bending"])
    model = build_force_basis(mesh, vertex_normals(mesh), max_xy=cfg.force["max_xy"],
                              max_z=cfg.force["max_z"], barrier_weight=cfg.barrier["force"])
    chi = tracking_mask(mesh, mode=cfg.tracking["mode"],
                        radius=cfg.tracking.get("radius"),
                        indices=cfg.tracking.get("indices"))
    m = cfg.material
    initial = m.get("initial")
    material = MaterialField.uniform(mesh, 0.0, m["lower"], m["upper"], m["volume_cap"])
    if initial is None:
        initial = default_initial_thickness(material, ref.face_areas)
    material = material.with_values(np.full(mesh.n_faces, float(initial)))
    try:
        material.validate_strict(ref.face_areas)
    except MaterialError as exc:
        raise ConfigError(f"initial thickness is not strictly feasible: {exc}") from exc
    n = cfg.noise
    noise = NoiseModel(sigma=n["sigma"], v_min=n["v_min"], v_max=n["v_max"], seed=n["seed"])
    o = cfg.optimization
    leader_cfg = LeaderConfig(
        barrier_thickness=cfg.barrier["thickness"], barrier_volume=cfg.barrier["volume"],
        n_samples=o["samples"], iterations=o["iterations"], step0=o.get("step0"),
        step_halflife=o["step_halflife"], follower_mode=o["follower_mode"],
        follower_max_iter=o["follower_max_iter"], follower_grad_tol=o["follower_grad_tol"],
        follower_rel_grad_tol=o["follower_rel_grad_tol"],
        allow_sample_failures=o["allow_sample_failures"], workers=workers)
    return Problem(cfg=cfg, mesh=mesh, components=components, model=model, chi=chi,
                   material=material, noise=noise, leader_cfg=leader_cfg)


# ---------------------------------------------------------------------------
# artifact writers; floats are written with full precision so fixed-seed runs
# produce bitwise identical files

def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_thickness(path, u: np.ndarray) -> None:
    _write_csv(path, ["face_index", "thickness"],
               [(t, _fmt(v)) for t, v in enumerate(u)])


def read_thickness(path, n_faces: int) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputDataError(f"cannot read thickness file {path}: {exc}") from exc
    if rows and rows[0] and rows[0][0] == "face_index":
        rows = rows[1:]
    values = np.full(n_faces, np.nan)
    for row in rows:
        if not row:
            continue
        try:
            t, v = int(row[0]), float(row[1])
        except (ValueError, IndexError) as exc:
            raise InputDataError(f"bad thickness row {row!r} in {path}") from exc
        if not 0 <= t < n_faces:
            raise InputDataError(f"face index {t} out of range in {path}")
        values[t] = v
    if np.any(np.isnan(values)):
        missing = int(np.flatnonzero(np.isnan(values))[0])
        raise InputDataError(f"thickness file {path} misses face {missing}")
    return values


def write_summary(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=float)
        fh.write("\n")


def _mesh_info(problem: Problem) -> dict:
    mesh = problem.mesh
    return {
        "vertices": mesh.n_vertices, "edges": mesh.n_edges, "faces": mesh.n_faces,
        "interior_edges": int(len(mesh.interior_edges)),
        "dirichlet_vertices": int(len(mesh.dirichlet)),
        "frozen_faces": int(mesh.frozen_faces.sum()),
        "reduced_dofs": problem.components.n_reduced,
    }


def _follower_artifacts(problem: Problem, u: np.ndarray, outdir: str,
                        trace_name: str | None = None) -> FollowerResult:
    """Deterministic worst-case solve at u plus deformed mesh and reports."""
    result = solve_follower(problem.components, u, problem.model,
                            max_iter=problem.leader_cfg.follower_max_iter,
                            grad_tol=problem.leader_cfg.follower_grad_tol,
                            rel_grad_tol=problem.leader_cfg.follower_rel_grad_tol)
    factorization = SPDFactorization(assemble_h(problem.components, u))
    y = solve_state(factorization, problem.components, result.force)
    disp = np.linalg.norm(y.reshape(-1, 3), axis=1)
    save_obj(problem.mesh, os.path.join(outdir, "deformed.obj"),
             positions=problem.mesh.vertices + y.reshape(-1, 3))
    _write_csv(os.path.join(outdir, "displacement.csv"),
               ["vertex_index", "magnitude"],
               [(v, _fmt(d)) for v, d in enumerate(disp)])
    coeffs = result.coefficients
    direction = coeffs / max(np.linalg.norm(coeffs), 1e-300)
    _write_csv(os.path.join(outdir, "force.csv"), ["quantity", "value"],
               [("coeff_wind_x", _fmt(coeffs[0])),
                ("coeff_wind_y", _fmt(coeffs[1])),
                ("coeff_gravity", _fmt(coeffs[2])),
                ("direction_x", _fmt(direction[0])),
                ("direction_y", _fmt(direction[1])),
                ("direction_z", _fmt(direction[2])),
                ("compliance", _fmt(result.compliance)),
                ("smoothed_objective", _fmt(result.smoothed_value)),
                ("iterations", str(result.iterations)),
                ("converged", str(result.converged).lower())])
    if trace_name:
        _write_csv(os.path.join(outdir, trace_name),
                   ["iteration", "smoothed_objective"],
                   [(i, _fmt(v)) for i, v in enumerate(result.trace)])
    return result


def _outdir(cfg: RunConfig, override: str | None) -> str:
    outdir = override or cfg.output_dir
    os.makedirs(outdir, exist_ok=True)
    return outdir


def run_solve(cfg: RunConfig, workers: int, outdir_override=None) -> int:
    t_start = time.perf_counter()
    outdir = _outdir(cfg, outdir_override)
    problem = build_problem(cfg, workers)
    checkpoint_every = cfg.optimization["checkpoint_every"]

    def checkpoint(record, u):
        if (record["iteration"] + 1) % checkpoint_every == 0:
            write_thickness(os.path.join(outdir, "thickness.csv"), u)

    result = sgd(problem.components, problem.material, problem.model, problem.noise,
                 problem.chi, problem.leader_cfg, callback=checkpoint)
    u_final = result.material.values
    write_thickness(os.path.join(outdir, "thickness.csv"), u_final)
    _write_csv(os.path.join(outdir, "convergence.csv"),
               ["iteration", "empirical_risk", "relative_cost", "barrier",
                "volume", "step_size", "wall_ms"],
               [(r["iteration"], _fmt(r["empirical_risk"]), _fmt(r["relative_cost"]),
                 _fmt(r["barrier"]), _fmt(r["volume"]), _fmt(r["step_size"]),
                 _fmt(r["wall_ms"])) for r in result.history])
    follower_result = _follower_artifacts(problem, u_final, outdir)

    history = result.history
    summary = {
        "command": "solve",
        "config": cfg.resolved(),
        "mesh_info": _mesh_info(problem),
        "workers": workers,
        "initial_thickness": float(problem.material.values[0]),
        "step0": float(result.step0) if np.isfinite(result.step0) else None,
        "step0_probed": result.step0_probed,
        "iterations_run": len(history),
        "final_relative_cost": history[-1]["relative_cost"] if history else None,
        "final_volume": float(problem.components.ref.face_areas @ u_final),
        "worst_case_force": [float(c) for c in follower_result.coefficients],
        "worst_case_compliance": follower_result.compliance,
        "aborted": result.aborted,
        "abort_reason": result.abort_reason,
        "wall_seconds": time.perf_counter() - t_start,
    }
    write_summary(os.path.join(outdir, "summary.json"), summary)
    return EXIT_SOLVER if result.aborted else EXIT_OK


def run_follower(cfg: RunConfig, workers: int, thickness_path=None,
                 outdir_override=None) -> int:
    t_start = time.perf_counter()
    outdir = _outdir(cfg, outdir_override)
    problem = build_problem(cfg, workers)
    if thickness_path is None:
        u = problem.material.values
    else:
        u = read_thickness(thickness_path, problem.mesh.n_faces)
        if np.any(u <= 0.0):
            raise InputDataError(f"thickness file {thickness_path} has non-positive entries")
    result = _follower_artifacts(problem, u, outdir, trace_name="follower_trace.csv")
    summary = {
        "command": "follower",
        "config": cfg.resolved(),
        "mesh_info": _mesh_info(problem),
        "thickness_file": thickness_path,
        "coefficients": [float(c) for c in result.coefficients],
        "compliance": result.compliance,
        "smoothed_objective": result.smoothed_value,
        "iterations": result.iterations,
        "converged": result.converged,
        "wall_seconds": time.perf_counter() - t_start,
    }
    write_summary(os.path.join(outdir, "summary.json"), summary)
    if not result.converged:
        return EXIT_SOLVER
    return EXIT_OK


def run_simulate(cfg: RunConfig, workers: int, thickness_path=None,
                 outdir_override=None) -> int:
    t_start = time.perf_counter()
    outdir = _outdir(cfg, outdir_override)
    problem = build_problem(cfg, workers)
    if thickness_path is None:
        u = problem.material.values
    else:
        u = read_thickness(thickness_path, problem.mesh.n_faces)
        if np.any(u <= 0.0):
            raise InputDataError(f"thickness file {thickness_path} has non-positive entries")
    k = cfg.optimization["samples"]
    batch = simulate_outcomes(problem.components, u, problem.model, problem.noise,
                              problem.chi, k, workers=workers,
                              allow_failures=cfg.optimization["allow_sample_failures"])
    _write_csv(os.path.join(outdir, "distribution.csv"),
               ["sample_index", "outcome", "coeff_wind_x", "coeff_wind_y",
                "coeff_gravity", "compliance", "excluded"],
               [(i, _fmt(batch.costs[i]), _fmt(batch.coefficients[i, 0]),
                 _fmt(batch.coefficients[i, 1]), _fmt(batch.coefficients[i, 2]),
                 _fmt(batch.compliances[i]), str(bool(batch.excluded[i])).lower())
                for i in range(k)])
    outcomes = batch.included_costs
    rcfg = cfg.risk
    rows = [("expectation", "", _fmt(risk.expectation(outcomes)))]
    for beta in rcfg["cvar_levels"]:
        rows.append(("cvar", f"beta={beta}", _fmt(risk.cvar(outcomes, beta))))
    rows.append(("expected_excess",
                 f"target={rcfg['excess_target']};order={rcfg['excess_order']}",
                 _fmt(risk.expected_excess(outcomes, rcfg["excess_target"],
                                           rcfg["excess_order"]))))
    rows.append(("mean_upper_semideviation", f"order={rcfg['semideviation_order']}",
                 _fmt(risk.mean_upper_semideviation(outcomes, rcfg["semideviation_order"]))))
    _write_csv(os.path.join(outdir, "risk_measures.csv"),
               ["measure", "parameters", "value"], rows)
    summary = {
        "command": "simulate",
        "config": cfg.resolved(),
        "mesh_info": _mesh_info(problem),
        "thickness_file": thickness_path,
        "samples": k,
        "excluded_samples": int(batch.excluded.sum()),
        "expectation": float(risk.expectation(outcomes)),
        "standard_error": batch.standard_error,
        "wall_seconds": time.perf_counter() - t_start,
    }
    write_summary(os.path.join(outdir, "summary.json"), summary)
    return EXIT_OK


def run_toy(outdir: str, grid_points: int = 101, slack: float = 0.1,
            resolution: int = 201, gap_grid: int = 10_000) -> int:
    """Closed-form instance diagnostics: value curves and the scale-gap table."""
    os.makedirs(outdir, exist_ok=True)
    instance = bilevel.toy_instance()
    lo, hi = bilevel.TOY_DESIGN_INTERVAL
    rows = []
    for u in np.linspace(lo, hi, grid_points):
        rows.append((_fmt(u),
                     _fmt(bilevel.max_compliance(instance, u)),
                     _fmt(bilevel.worst_case_cost(instance, u)),
                     _fmt(bilevel.relaxed_worst_case_cost(instance, u, slack, resolution))))
    _write_csv(os.path.join(outdir, "toy.csv"),
               ["design", "max_compliance", "worst_case", "relaxed_worst_case"], rows)

    gap_rows = []
    for k in (10, 100, 1000):
        u = 1.0 - 1.0 / k
        sup_gap, mean_gap = bilevel.toy_scale_gap(u, grid_size=gap_grid)
        gap_rows.append((k, _fmt(u), _fmt(sup_gap), _fmt(mean_gap), _fmt(1.0 + 1.0 / u)))
    _write_csv(os.path.join(outdir, "scale_gap.csv"),
               ["k", "design", "sup_gap", "mean_gap", "jump_bound"], gap_rows)
    write_summary(os.path.join(outdir, "summary.json"), {
        "command": "toy", "grid_points": grid_points, "slack": slack,
        "resolution": resolution, "gap_grid": gap_grid,
    })
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shellopt",
                                     description="Worst-case shell design under "
                                                 "manufacturing noise")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, thickness=False):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="worker threads for per-sample evaluation")
        p.add_argument("--seed", type=int, default=None, help="override noise.seed")
        p.add_argument("--output-dir", default=None, help="override output_dir")
        if thickness:
            p.add_argument("--thickness", default=None,
                           help="per-face thickness CSV (face_index,thickness)")

    common(sub.add_parser("solve", help="run the stochastic design optimization"))
    common(sub.add_parser("follower", help="worst-case load for a fixed design"),
           thickness=True)
    common(sub.add_parser("simulate", help="sample the random outcome and report "
                                           "risk measures"), thickness=True)
    toy = sub.add_parser("toy", help="closed-form low-dimensional diagnostics")
    toy.add_argument("--output-dir", default="out-toy")
    toy.add_argument("--grid", type=int, default=101, help="design grid points")
    toy.add_argument("--slack", type=float, default=0.1,
                     help="optimality slack for the relaxed worst case")
    toy.add_argument("--resolution", type=int, default=201,
                     help="per-axis grid for the relaxed worst case")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "toy":
            return run_toy(args.output_dir, grid_points=args.grid, slack=args.slack,
                           resolution=args.resolution)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.noise["seed"] = args.seed
        workers = max(1, args.workers)
        if args.command == "solve":
            return run_solve(cfg, workers, outdir_override=args.output_dir)
        if args.command == "follower":
            return run_follower(cfg, workers, thickness_path=args.thickness,
                                outdir_override=args.output_dir)
        if args.command == "simulate":
            return run_simulate(cfg, workers, thickness_path=args.thickness,
                                outdir_override=args.output_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DirichletError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputDataError, MeshError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ShelloptError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
