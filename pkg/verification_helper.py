"""
Verification Helper for the Stokes-Biot simulator

This module provides:
- error indicators of a coarse trajectory against a fine-mesh reference run,
- observed convergence rates and the mesh-refinement study driver,
- the decoupled-versus-monolithic comparison over a sweep of time steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from numpy.typing import NDArray

from assembly_helper import FIELD_ORDER, ElementPairing, Problem, build_problem, field_region
from errors import ParameterError, SimulationError, UsageError
from fem_helper import tabulate
from mesh_helper import TriangleMesh, build_channel_mesh, locate_points
from model_helper import NitscheParameters, PhysicalParameters, boundary_set_test1, channel_source_terms
from timestepping_helper import SolutionState, run_trajectory

logger = logging.getLogger(__name__)

INDICATORS = ("eps_f", "eps_p", "eps_fp", "eps_pp")
_TIME_TOL = 1e-12
_STEP_TOL = 1e-9


# ---------------------------------------------------------------------------
# Error indicators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorIndicators:
    """eps_f: L2(0,T;H1) of v, eps_p: Linf(0,T;H1) of U,
    eps_fp: L2(0,T;L2) of p_f, eps_pp: L2(0,T;L2) of p_p."""

    eps_f: float
    eps_p: float
    eps_fp: float
    eps_pp: float

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in INDICATORS}


@dataclass(frozen=True, eq=False)
class _Sampler:
    """Sparse point-evaluation operators of one field's scalar components."""

    values: sp.csr_matrix
    grad_x: sp.csr_matrix
    grad_y: sp.csr_matrix
    n_scalar: int
    n_components: int

    def sample(self, x: NDArray[np.float64]) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Values (C, P) and gradients (C, 2, P) of a coefficient vector."""
        parts = [x[c * self.n_scalar:(c + 1) * self.n_scalar] for c in range(self.n_components)]
        values = np.stack([self.values @ part for part in parts])
        grads = np.stack([np.stack([self.grad_x @ part, self.grad_y @ part]) for part in parts])
        return values, grads


def _sampler(problem: Problem, name: str, points: NDArray[np.float64],
             triangles: Optional[NDArray[np.int64]] = None) -> _Sampler:
    mesh = problem.mesh
    dof_map = problem.spaces[name]
    if triangles is None:
        triangles, bary = locate_points(mesh, points, field_region(name))
    else:
        bary = mesh.barycentric(triangles, points)
    values, ref_grads = tabulate(dof_map.kind.degree, bary)
    grads = np.einsum("pnk,pkd->pnd", ref_grads, mesh.affine_maps[3][triangles])
    cols = dof_map.cell_dofs[dof_map.tri_row[triangles]]
    rows = np.broadcast_to(np.arange(points.shape[0])[:, None], cols.shape)
    shape = (points.shape[0], dof_map.n_scalar)

    def operator(data):
        return sp.csr_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=shape)

    return _Sampler(operator(values), operator(grads[..., 0]), operator(grads[..., 1]),
                    dof_map.n_scalar, dof_map.n_components)


def _check_time_grids(coarse: Sequence[SolutionState], reference: Sequence[SolutionState]) -> None:
    if len(coarse) != len(reference):
        raise UsageError(f"time grids differ: {len(coarse)} vs {len(reference)} levels")
    for a, b in zip(coarse, reference):
        if abs(a.t - b.t) > _TIME_TOL * max(1.0, abs(b.t)):
            raise UsageError(f"time grids differ at level {a.n}: t={a.t!r} vs t={b.t!r}")


def error_norms(coarse: Problem, coarse_trajectory: Sequence[SolutionState],
                reference: Problem, reference_trajectory: Sequence[SolutionState]) -> ErrorIndicators:
    """Error indicators of a coarse trajectory against a reference trajectory.

    Coarse fields are evaluated at the reference quadrature points. Time
    integrals use the right-endpoint rule over levels n >= 1; the H1 norm
    includes the L2 part.

    Raises:
        UsageError: the two trajectories are on different time grids.
    """
    _check_time_grids(coarse_trajectory, reference_trajectory)
    samplers = {}
    weights = {}
    for name, space in (("v", "v"), ("U", "U"), ("p_f", "p_f"), ("p_p", "eta")):
        volume = reference.volume(space)
        points = volume.points.reshape(-1, 2)
        tris = np.repeat(volume.triangles, volume.points.shape[1])
        samplers[name] = (_sampler(coarse, space, points), _sampler(reference, space, points, tris))
        weights[name] = volume.weights.ravel()

    def difference(name: str, a: SolutionState, b: SolutionState, with_gradient: bool) -> float:
        coarse_sampler, reference_sampler = samplers[name]
        va, ga = coarse_sampler.sample(a.get(name))
        vb, gb = reference_sampler.sample(b.get(name))
        total = float(np.sum(weights[name] * (va - vb) ** 2))
        if with_gradient:
            total += float(np.sum(weights[name] * (ga - gb) ** 2))
        return total

    eps_f2 = eps_fp2 = eps_pp2 = 0.0
    eps_p = 0.0
    for k in range(1, len(coarse_trajectory)):
        a, b = coarse_trajectory[k], reference_trajectory[k]
        dt = b.t - reference_trajectory[k - 1].t
        eps_f2 += dt * difference("v", a, b, True)
        eps_fp2 += dt * difference("p_f", a, b, False)
        eps_pp2 += dt * difference("p_p", a, b, False)
        eps_p = max(eps_p, math.sqrt(difference("U", a, b, True)))
    return ErrorIndicators(math.sqrt(eps_f2), eps_p, math.sqrt(eps_fp2), math.sqrt(eps_pp2))


def convergence_rate(errors: Sequence[float]) -> NDArray[np.float64]:
    """Observed orders log2(e_{i-1} / e_i) of a halving sequence.

    Raises:
        UsageError: any error is not positive.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if np.any(~(errors > 0)):
        raise UsageError(f"errors must be positive, got {errors.tolist()}")
    return np.log2(errors[:-1] / errors[1:])


def _rates_or_nan(errors: Sequence[float]) -> List[float]:
    rates = [math.nan]
    for previous, current in zip(errors[:-1], errors[1:]):
        rates.append(float(convergence_rate([previous, current])[0]) if previous > 0 and current > 0 else math.nan)
    return rates


# ---------------------------------------------------------------------------
# Convergence study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceStudy:
    """Mesh-refinement protocol on the channel [x_range] x [y_lo, y_hi].

    Levels are given by the number of cells along x; every level uses
    ny_half = nx. The reference mesh is the smallest multiple of the finest
    level whose h_max does not exceed ``ref_h`` unless ``ref_nx`` is given.
    """

    params: PhysicalParameters = field(default_factory=PhysicalParameters.channel_benchmark)
    nitsche: NitscheParameters = field(default_factory=NitscheParameters)
    levels: Tuple[int, ...] = (5, 10, 20, 40)
    ref_h: float = 0.014
    ref_nx: Optional[int] = None
    dt: float = 1e-4
    T: float = 1e-3
    pairing: ElementPairing = ElementPairing()
    x_range: Tuple[float, float] = (0.0, 1.0)
    y_lo: float = -1.0
    y_split: float = 0.0
    y_hi: float = 1.0
    fluid_ext_bc: str = "noslip"
    p_in: Optional[Callable[[float], float]] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if not self.levels:
            raise ParameterError("a convergence study needs at least one level")
        if any(nx < 1 for nx in self.levels):
            raise ParameterError(f"level sizes must be positive, got {self.levels}")
        if not self.dt > 0 or self.T < self.dt:
            raise ParameterError(f"need dt > 0 and T >= dt, got dt={self.dt}, T={self.T}")

    @classmethod
    def halving(cls, base_nx: int = 5, n_levels: int = 4, **kwargs) -> "ConvergenceStudy":
        if n_levels < 1:
            raise ParameterError(f"number of levels must be positive, got {n_levels}")
        return cls(levels=tuple(base_nx * 2 ** k for k in range(n_levels)), **kwargs)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def mesh(self, nx: int) -> TriangleMesh:
        return build_channel_mesh(nx, nx, self.x_range, self.y_split, self.y_lo, self.y_hi)

    def reference_nx(self) -> int:
        if self.ref_nx is not None:
            return int(self.ref_nx)
        finest = max(self.levels)
        h_finest = self.mesh(finest).h_max
        if self.ref_h > h_finest * (1.0 + 1e-12):
            raise ParameterError(f"reference h={self.ref_h} is coarser than the finest level h={h_finest:.4g}")
        return finest * max(1, math.ceil(h_finest / self.ref_h - 1e-12))

    def problem(self, nx: int) -> Problem:
        return build_problem(self.mesh(nx), self.params, self.nitsche, boundary_set_test1(self.fluid_ext_bc),
                             channel_source_terms(self.params, self.p_in), self.pairing, self.threads)


@dataclass
class ConvergenceReport:
    h: List[float]
    indicators: List[ErrorIndicators]
    rates: Dict[str, List[float]]

    def to_frame(self) -> pd.DataFrame:
        columns: Dict[str, list] = {"h": self.h}
        for name in INDICATORS:
            columns[name] = [getattr(ind, name) for ind in self.indicators]
            columns["rate_" + name[4:]] = self.rates[name]
        return pd.DataFrame(columns)


def run_convergence_study(study: ConvergenceStudy) -> ConvergenceReport:
    """Run the reference and every level with the decoupled scheme and compare.

    Failures are re-raised with the level index and h prefixed.
    """
    ref_nx = study.reference_nx()
    reference = study.problem(ref_nx)
    logger.info(f"Reference run: nx={ref_nx}, h={reference.mesh.h_max:.4g}, steps={study.n_steps}")
    try:
        reference_trajectory = run_trajectory(reference, study.dt, study.n_steps)
    except SimulationError as e:
        e.args = (f"reference (h={reference.mesh.h_max:.4g}): {e}",) + e.args[1:]
        raise

    hs: List[float] = []
    indicators: List[ErrorIndicators] = []
    for index, nx in enumerate(study.levels):
        problem = study.problem(nx)
        h = problem.mesh.h_max
        try:
            trajectory = run_trajectory(problem, study.dt, study.n_steps)
            result = error_norms(problem, trajectory, reference, reference_trajectory)
        except SimulationError as e:
            e.args = (f"level {index} (h={h:.4g}): {e}",) + e.args[1:]
            raise
        logger.info(f"Level {index}: h={h:.4g} " + ", ".join(f"{k}={v:.3e}" for k, v in result.as_dict().items()))
        hs.append(h)
        indicators.append(result)

    rates = {name: _rates_or_nan([getattr(ind, name) for ind in indicators]) for name in INDICATORS}
    return ConvergenceReport(hs, indicators, rates)


# ---------------------------------------------------------------------------
# Decoupled versus monolithic
# ---------------------------------------------------------------------------

@dataclass
class OracleReport:
    dts: List[float]
    discrepancies: List[float]
    order: Optional[float]

    def to_frame(self) -> pd.DataFrame:
        order = self.order if self.order is not None else math.nan
        return pd.DataFrame({"dt": self.dts, "discrepancy": self.discrepancies,
                             "fitted_order": [order] * len(self.dts)})


_NORM_FORMS = {"v": "mass_v", "p_f": "mass_p", "U": "mass_U", "xi": "mass_xi", "q": "mass_q", "eta": "mass_eta"}


def state_discrepancy(problem: Problem, state: SolutionState, oracle: SolutionState) -> float:
    """Max over fields of ||state - oracle||_L2 / ||oracle||_L2 (absolute where the oracle vanishes)."""
    worst = 0.0
    for name in FIELD_ORDER:
        mass = problem.matrix(_NORM_FORMS[name])
        diff = state.get(name) - oracle.get(name)
        error = math.sqrt(max(float(diff @ (mass @ diff)), 0.0))
        scale = math.sqrt(max(float(oracle.get(name) @ (mass @ oracle.get(name))), 0.0))
        worst = max(worst, error / scale if scale > 0 else error)
    return worst


def oracle_compare(problem: Problem, dt_sweep: Sequence[float], T: float) -> OracleReport:
    """Run both integrators to the final time T for every dt of the sweep.

    The fitted order is the slope of log(discrepancy) over log(dt); it is None
    for a single dt or when a discrepancy vanishes.

    Raises:
        UsageError: the sweep is empty, not positive or not strictly decreasing,
            or T is not a whole number of steps for some dt.
    """
    dts = [float(dt) for dt in dt_sweep]
    if not dts or any(not dt > 0 for dt in dts):
        raise UsageError(f"dt sweep must hold positive steps, got {dts}")
    if any(b >= a for a, b in zip(dts[:-1], dts[1:])):
        raise UsageError(f"dt sweep must be strictly decreasing, got {dts}")
    steps = []
    for dt in dts:
        ratio = T / dt
        n_steps = int(round(ratio))
        if n_steps < 1 or abs(ratio - n_steps) > _STEP_TOL * ratio:
            raise UsageError(f"T={T:g} is not a whole number of steps of dt={dt:g}")
        steps.append(n_steps)

    discrepancies = []
    for dt, n_steps in zip(dts, steps):
        decoupled = run_trajectory(problem, dt, n_steps, "decoupled")[-1]
        monolithic = run_trajectory(problem, dt, n_steps, "monolithic")[-1]
        discrepancy = state_discrepancy(problem, decoupled, monolithic)
        logger.info(f"dt={dt:.3e}: {n_steps} steps, discrepancy={discrepancy:.3e}")
        discrepancies.append(discrepancy)

    order = None
    if len(dts) > 1 and all(d > 0 for d in discrepancies):
        order = float(np.polyfit(np.log(dts), np.log(discrepancies), 1)[0])
    return OracleReport(dts, discrepancies, order)
