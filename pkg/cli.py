"""
Command-line interface for the Stokes-Biot simulator.

Subcommands:
    run <config.ini> [--out DIR] [--steps N]          time integration with ledger and snapshots
    converge <config.ini> [--levels K] [--ref-h H]    mesh-refinement study, writes table1.csv
    compare <config.ini> --dt-sweep a,b,c             decoupled versus monolithic sweep, writes oracle.csv
    mesh --nx N --ny M --out FILE                     write the built-in channel mesh (MESH v1)
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

import config
from assembly_helper import ElementPairing, Problem, build_problem
from config import RunConfig, parse_config
from errors import SimulationError, UsageError
from export_helper import (format_table, ledger_summary, write_convergence_csv, write_dofs_csv, write_ledger_csv,
                           write_oracle_csv, write_vtk)
from mesh_helper import Region, TriangleMesh, apply_mapping, build_channel_mesh, read_mesh, test2_mapping, write_mesh
from model_helper import (SourceTerms, boundary_set_physical, boundary_set_test1, boundary_set_test2,
                          channel_source_terms, fracture_source_terms)
from timestepping_helper import EnergyMonitor, StokesBiotSolver, zero_state
from verification_helper import ConvergenceStudy, oracle_compare, run_convergence_study

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Scenario construction
# ---------------------------------------------------------------------------

def build_mesh(cfg: RunConfig) -> TriangleMesh:
    spec = cfg.mesh
    if spec.file is not None:
        mesh = read_mesh(spec.file)
    else:
        mesh = build_channel_mesh(spec.nx, spec.ny_half, (spec.x_min, spec.x_max), spec.y_split, spec.y_lo, spec.y_hi)
    if spec.mapping == "test2":
        mesh = apply_mapping(mesh, test2_mapping)
    return mesh


def build_scenario(cfg: RunConfig, threads: Optional[int] = None) -> Problem:
    """Mesh, boundary conditions and sources of the configured scenario."""
    mesh = build_mesh(cfg)
    if cfg.scenario == "test1":
        bcs = boundary_set_test1(cfg.fluid_ext_bc)
    elif cfg.scenario == "test2_external_mesh":
        bcs = boundary_set_test2()
    else:
        bcs = boundary_set_physical()

    if cfg.scenario == "test2_external_mesh":
        sources = fracture_source_terms(mesh.region_area(Region.FLUID), cfg.injection_rate)
    elif cfg.sources == "test1":
        sources = channel_source_terms(cfg.params)
    else:
        sources = SourceTerms()
    if cfg.p_in_expression.strip() not in ("0", "0.0"):
        sources = dataclasses.replace(sources, p_in=cfg.p_in,
                                      name="traction" if sources.is_zero else sources.name)
    return build_problem(mesh, cfg.params, cfg.nitsche, bcs, sources,
                         ElementPairing.from_name(cfg.mesh.elements), threads)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(cfg: RunConfig, out: Optional[Path] = None, steps: Optional[int] = None) -> int:
    """Integrate in time; ledger.csv is rewritten after every step."""
    out = Path(out) if out is not None else cfg.output_dir
    n_steps = cfg.n_steps if steps is None else steps
    if n_steps < 1:
        raise UsageError(f"number of steps must be at least 1, got {n_steps}")
    problem = build_scenario(cfg)
    initial = zero_state(problem)
    monitor = EnergyMonitor(problem, initial, cfg.dt)
    ledger_path = out / "ledger.csv"

    def on_step(prev, state):
        row = monitor.record(prev, state)
        write_ledger_csv(monitor.ledger, ledger_path)
        if state.n % cfg.stride == 0:
            write_vtk(out / f"fields_{state.n}.vtk", problem, state)
            if cfg.dump_dofs:
                write_dofs_csv(problem, state, out / f"dofs_{state.n}.csv")
        logger.info(f"n={row.n} t={row.t:.6g} E={row.energy:.6e} residual={row.residual:.2e}")

    StokesBiotSolver(problem).run(cfg.dt, n_steps, cfg.scheme, initial, on_step)
    print(ledger_summary(monitor.ledger))
    if not monitor.ledger.all_finite:
        raise SimulationError("ledger contains non-finite entries")
    return 0


def cmd_converge(cfg: RunConfig, levels: int = 4, ref_h: float = 0.014, out: Optional[Path] = None) -> int:
    if cfg.scenario != "test1":
        raise UsageError(f"convergence studies use the test1 scenario, got {cfg.scenario}")
    study = ConvergenceStudy.halving(
        base_nx=cfg.mesh.nx, n_levels=levels, params=cfg.params, nitsche=cfg.nitsche, ref_h=ref_h,
        dt=cfg.dt, T=cfg.T, pairing=ElementPairing.from_name(cfg.mesh.elements),
        x_range=(cfg.mesh.x_min, cfg.mesh.x_max), y_lo=cfg.mesh.y_lo, y_split=cfg.mesh.y_split,
        y_hi=cfg.mesh.y_hi, fluid_ext_bc=cfg.fluid_ext_bc,
    )
    report = run_convergence_study(study)
    out = Path(out) if out is not None else cfg.output_dir
    write_convergence_csv(report, out / "table1.csv")
    print(format_table(report.to_frame()))
    return 0


def cmd_compare(cfg: RunConfig, dt_sweep: List[float], out: Optional[Path] = None) -> int:
    report = oracle_compare(build_scenario(cfg), dt_sweep, cfg.T)
    out = Path(out) if out is not None else cfg.output_dir
    write_oracle_csv(report, out / "oracle.csv")
    print(format_table(report.to_frame()))
    if report.order is not None:
        print(f"fitted order: {report.order:.3f}")
    return 0


def cmd_mesh(nx: int, ny: int, out: Path) -> int:
    mesh = build_channel_mesh(nx, ny)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, out)
    logger.info(f"Wrote {out}: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")
    return 0


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _dt_list(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty dt sweep")
    return values


def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Stokes-Biot simulator with pseudo-pressure splitting and Nitsche interface coupling."
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a time integration")
    run.add_argument("config", type=Path, help="Run configuration (INI)")
    run.add_argument("--out", type=Path, default=None, help="Output directory (overrides [output] directory)")
    run.add_argument("--steps", type=int, default=None, help="Number of steps (overrides T / dt)")

    converge = commands.add_parser("converge", help="Mesh-refinement convergence study")
    converge.add_argument("config", type=Path)
    converge.add_argument("--levels", type=int, default=4, help="Number of halving levels")
    converge.add_argument("--ref-h", type=float, default=0.014, help="Reference mesh size")
    converge.add_argument("--out", type=Path, default=None)

    compare = commands.add_parser("compare", help="Decoupled versus monolithic over a dt sweep")
    compare.add_argument("config", type=Path)
    compare.add_argument("--dt-sweep", type=_dt_list, required=True, help="Strictly decreasing steps, e.g. 4e-4,2e-4,1e-4")
    compare.add_argument("--out", type=Path, default=None)

    mesh = commands.add_parser("mesh", help="Write the built-in channel mesh")
    mesh.add_argument("--nx", type=int, required=True)
    mesh.add_argument("--ny", type=int, required=True, help="Cells per half height")
    mesh.add_argument("--out", type=Path, required=True)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else config.SBN_LOG_LEVEL, format=config.LOG_FORMAT)
    try:
        if args.command == "mesh":
            return cmd_mesh(args.nx, args.ny, args.out)
        cfg = parse_config(args.config)
        if args.command == "run":
            return cmd_run(cfg, args.out, args.steps)
        if args.command == "converge":
            return cmd_converge(cfg, args.levels, args.ref_h, args.out)
        return cmd_compare(cfg, args.dt_sweep, args.out)
    except SimulationError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return 1
