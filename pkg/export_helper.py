"""
Export Helper for the Stokes-Biot simulator

Writes legacy-VTK field snapshots, CSV result tables (ledger, convergence,
oracle sweep, raw dof vectors) and plain-text console summaries.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
from tabulate import tabulate

from assembly_helper import FIELD_ORDER, Problem
from mesh_helper import TriangleMesh
from timestepping_helper import EnergyLedger, SolutionState
from verification_helper import ConvergenceReport, OracleReport

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
VTK_TRIANGLE = 5
CONVERGENCE_COLUMNS = ["h", "eps_f", "rate_f", "eps_p", "rate_p", "eps_fp", "rate_fp", "eps_pp", "rate_pp"]

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# VTK
# ---------------------------------------------------------------------------

def vertex_values(problem: Problem, state: SolutionState, name: str) -> np.ndarray:
    """Field values at mesh vertices, shape (n_nodes,) or (n_nodes, 2).

    Vertices outside the field's region get zeros; interface vertices take
    the value of the field's own region.
    """
    space = "eta" if name == "p_p" else name
    dof_map = problem.spaces[space]
    x = state.get(name)
    inside = dof_map.vertex_dofs >= 0
    dofs = dof_map.vertex_dofs[inside]
    if dof_map.n_components == 1:
        out = np.zeros(problem.mesh.n_nodes)
        out[inside] = x[dofs]
        return out
    out = np.zeros((problem.mesh.n_nodes, 2))
    for c in range(2):
        out[inside, c] = x[c * dof_map.n_scalar + dofs]
    return out


def write_vtk(path: PathLike, problem: Problem, state: SolutionState, title: str = "stokes-biot") -> Path:
    """Legacy VTK 3.0 ASCII unstructured grid with vertex point data."""
    path = Path(path)
    mesh: TriangleMesh = problem.mesh
    lines = ["# vtk DataFile Version 3.0", f"{title} n={state.n} t={state.t:.17g}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_nodes} double"]
    lines.extend(f"{x:.17g} {y:.17g} 0" for x, y in mesh.nodes)
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines.extend([str(VTK_TRIANGLE)] * mesh.n_triangles)
    lines.append(f"CELL_DATA {mesh.n_triangles}")
    lines.append("SCALARS region int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(int(code)) for code in mesh.regions)

    lines.append(f"POINT_DATA {mesh.n_nodes}")
    for name in ("v", "U", "q"):
        values = vertex_values(problem, state, name)
        lines.append(f"VECTORS {name} double")
        lines.extend(f"{a:.17g} {b:.17g} 0" for a, b in values)
    for name in ("p_f", "p_p", "xi", "eta"):
        values = vertex_values(problem, state, name)
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(f"{value:.17g}" for value in values)

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    logger.debug(f"Wrote {path}")
    return path


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="")
    logger.info(f"Wrote {path} ({len(frame)} rows)")
    return path


def write_ledger_csv(ledger: EnergyLedger, path: PathLike) -> Path:
    return _write_frame(ledger.to_frame(), path)


def write_convergence_csv(report: ConvergenceReport, path: PathLike) -> Path:
    return _write_frame(report.to_frame()[CONVERGENCE_COLUMNS], path)


def write_oracle_csv(report: OracleReport, path: PathLike) -> Path:
    return _write_frame(report.to_frame(), path)


def write_dofs_csv(problem: Problem, state: SolutionState, path: PathLike) -> Path:
    """Every dof of every field in long format: field, index, value."""
    frames = [pd.DataFrame({"field": name, "index": np.arange(problem.spaces.size(name)), "value": state.get(name)})
              for name in FIELD_ORDER]
    return _write_frame(pd.concat(frames, ignore_index=True), path)


# ---------------------------------------------------------------------------
# Console
# ---------------------------------------------------------------------------

def format_table(frame: pd.DataFrame, floatfmt: str = ".3e") -> str:
    return tabulate(frame, headers="keys", tablefmt="github", showindex=False, floatfmt=floatfmt, missingval="-")


def ledger_summary(ledger: EnergyLedger) -> str:
    frame = ledger.to_frame()
    lines = [format_table(frame[["n", "t", "energy", "dissipation_v", "dissipation_q", "mismatch_n", "residual"]])]
    conditions = ", ".join(f"{name}={'yes' if held else 'no'}" for name, held in ledger.conditions.items())
    lines.append(f"stability side conditions: {conditions}")
    if ledger.growth_steps:
        lines.append(f"energy growth with zero loads at steps {ledger.growth_steps}")
    if ledger.blowup_steps:
        lines.append(f"energy blow-up at steps {ledger.blowup_steps}")
    return "\n".join(lines)
