"""
Assembly Helper for the Stokes-Biot simulator

Builds the linear systems of the loosely-coupled scheme

    step 1 (U, xi)   poroelastic displacement with lagged fluid data,
    step 2 (q, eta)  mixed Darcy problem using xi of step 1,
    step 3 (v, p_f)  Stokes problem using U and q of steps 1 and 2,

and of the monolithic scheme in (v, p_f, U, xi, q, eta). Every bilinear form is
represented as a LocalBlock: per-cell (or per-edge) dense matrices together
with the field-local dof indices of their rows and columns. Systems are sums of
scaled blocks; lagged data enters right-hand sides through LocalBlock.apply.

Interface operators use one normal n pointing out of the fluid region. The
interface trial "U" stands for the discrete time derivative d_tU, so the
matrix block for U^n is the U block divided by dt.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import TYPE_CHECKING, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

import config
from errors import SequencingError, UsageError
from fem_helper import (DofMap, ElementKind, SparseSystem, TripletBuilder, build_dof_map, edge_quadrature, tabulate,
                        triangle_quadrature)
from mesh_helper import BOUNDARY_TAGS, EdgeArrays, EdgeTag, Region, TriangleMesh, edge_arrays
from model_helper import (FLUID_FIELDS, BoundaryConditionSet, Constraint, NitscheParameters, PhysicalParameters,
                          PseudoPressureCoefficients, SourceTerms, pseudo_coefficients)

if TYPE_CHECKING:
    from timestepping_helper import SolutionState

logger = logging.getLogger(__name__)

FIELD_ORDER = ("v", "p_f", "U", "xi", "q", "eta")
_AXIS_TOL = 1e-12

# Coefficients of each field in the interface mismatches (v - d_tU - q).n and (v - d_tU).tau
_MISMATCH_N = {"v": 1.0, "U": -1.0, "q": -1.0}
_MISMATCH_T = {"v": 1.0, "U": -1.0}

STEP1 = "step1_displacement"
STEP2 = "step2_darcy"
STEP3 = "step3_stokes"
MONOLITHIC = "monolithic"


# ---------------------------------------------------------------------------
# Discretization context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ElementPairing:
    """Polynomial degrees of v, U and q; p_f, xi and eta are always P1."""

    velocity_degree: int = 2
    displacement_degree: int = 2
    darcy_degree: int = 2

    @classmethod
    def from_name(cls, name: str) -> "ElementPairing":
        if name == "p2p1":
            return cls(2, 2, 2)
        if name == "p1p1":
            return cls(1, 1, 1)
        raise UsageError(f"unknown element pairing '{name}' (expected p2p1 or p1p1)")

    def kind(self, name: str) -> ElementKind:
        degrees = {"v": self.velocity_degree, "U": self.displacement_degree, "q": self.darcy_degree}
        if name in degrees:
            return ElementKind.vector(degrees[name])
        return ElementKind.P1_SCALAR


def field_region(name: str) -> Region:
    return Region.FLUID if name in FLUID_FIELDS else Region.POROUS


@dataclass(frozen=True, eq=False)
class FieldSpaces:
    """Dof maps of the six discrete fields."""

    mesh: TriangleMesh
    pairing: ElementPairing
    maps: Mapping[str, DofMap]

    def __getitem__(self, name: str) -> DofMap:
        return self.maps[name]

    def size(self, name: str) -> int:
        return self.maps[name].n_dofs


def build_spaces(mesh: TriangleMesh, pairing: ElementPairing = ElementPairing()) -> FieldSpaces:
    maps = {name: build_dof_map(mesh, pairing.kind(name), field_region(name)) for name in FIELD_ORDER}
    return FieldSpaces(mesh, pairing, maps)


class InterfaceMode(str, Enum):
    NITSCHE_STAR = "nitsche_star"
    BJS_PLUS = "bjs_plus"


@dataclass(frozen=True, eq=False)
class InterfaceCoupling:
    """Interface operator flavour and per-edge weights (h = edge length)."""

    mode: InterfaceMode
    nitsche: NitscheParameters
    mu_f: float
    beta: float
    edge_h: NDArray[np.float64]

    @property
    def penalty_weights(self) -> NDArray[np.float64]:
        """gamma_f * mu_f / h_edge."""
        return self.nitsche.gamma_f * self.mu_f / self.edge_h

    @property
    def tangential_weights(self) -> NDArray[np.float64]:
        if self.mode is InterfaceMode.BJS_PLUS:
            return np.full_like(self.edge_h, self.beta)
        return self.penalty_weights


@dataclass(frozen=True, eq=False)
class Problem:
    """Everything the assemblers need besides the time level."""

    mesh: TriangleMesh
    spaces: FieldSpaces
    params: PhysicalParameters
    coeffs: PseudoPressureCoefficients
    nitsche: NitscheParameters
    bcs: BoundaryConditionSet
    sources: SourceTerms
    quadrature_degree: int = 4
    edge_quadrature_degree: int = 5
    threads: int = 0

    @cached_property
    def coupling(self) -> InterfaceCoupling:
        mode = InterfaceMode.BJS_PLUS if self.nitsche.use_bjs else InterfaceMode.NITSCHE_STAR
        return InterfaceCoupling(mode, self.nitsche, self.params.mu_f, self.params.beta,
                                 edge_arrays(self.mesh, EdgeTag.INTERFACE).lengths)

    @cached_property
    def interface(self) -> "EdgeTraces":
        return edge_traces(self, edge_arrays(self.mesh, EdgeTag.INTERFACE), FIELD_ORDER)

    @cached_property
    def fluid_volume(self) -> "VolumeQuadrature":
        return VolumeQuadrature(self.mesh, Region.FLUID, self.quadrature_degree)

    @cached_property
    def porous_volume(self) -> "VolumeQuadrature":
        return VolumeQuadrature(self.mesh, Region.POROUS, self.quadrature_degree)

    def volume(self, name: str) -> "VolumeQuadrature":
        return self.fluid_volume if field_region(name) is Region.FLUID else self.porous_volume

    @cached_property
    def forms(self) -> Dict[str, "LocalBlock"]:
        return _volume_forms(self)

    @cached_property
    def _matrices(self) -> Dict[str, sp.csr_matrix]:
        return {}

    def matrix(self, form: str) -> sp.csr_matrix:
        """Assembled global matrix of one volume form (cached)."""
        if form not in self._matrices:
            block = self.forms[form]
            self._matrices[form] = block.to_matrix(self.spaces.size(block.test), self.spaces.size(block.trial))
        return self._matrices[form]

    @cached_property
    def dirichlet(self) -> Dict[str, NDArray[np.int64]]:
        return {name: dirichlet_dofs(self, name) for name in FIELD_ORDER}


def build_problem(mesh: TriangleMesh, params: PhysicalParameters, nitsche: NitscheParameters,
                  bcs: BoundaryConditionSet, sources: SourceTerms,
                  pairing: ElementPairing = ElementPairing(), threads: Optional[int] = None) -> Problem:
    """Bundle a mesh, its spaces and the model data into a Problem."""
    spaces = build_spaces(mesh, pairing)
    problem = Problem(mesh, spaces, params, pseudo_coefficients(params), nitsche, bcs, sources,
                      threads=config.SBN_THREADS if threads is None else int(threads))
    logger.info(f"Problem on {mesh.n_triangles} triangles: "
                + ", ".join(f"{name}={spaces.size(name)}" for name in FIELD_ORDER))
    return problem


# ---------------------------------------------------------------------------
# Local blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LocalBlock:
    """Dense local matrices (E, m, n) with field-local row and column dofs."""

    test: str
    trial: str
    rows: NDArray[np.int64]
    cols: NDArray[np.int64]
    values: NDArray[np.float64]

    def scaled(self, factor) -> "LocalBlock":
        factor = np.asarray(factor, dtype=np.float64)
        if factor.ndim == 1:
            factor = factor[:, None, None]
        return LocalBlock(self.test, self.trial, self.rows, self.cols, self.values * factor)

    def transpose(self) -> "LocalBlock":
        return LocalBlock(self.trial, self.test, self.cols, self.rows, np.swapaxes(self.values, 1, 2))

    def apply(self, x: NDArray[np.float64], n_test: int) -> NDArray[np.float64]:
        """Assembled block times a trial coefficient vector."""
        if self.values.size == 0:
            return np.zeros(n_test)
        local = np.einsum("emn,en->em", self.values, np.asarray(x)[self.cols])
        return np.bincount(self.rows.ravel(), weights=local.ravel(), minlength=n_test)

    def to_matrix(self, n_test: int, n_trial: int) -> sp.csr_matrix:
        builder = TripletBuilder(n_test, n_trial)
        builder.add_local(self.rows, self.cols, self.values)
        return builder.tocsr()


@dataclass(frozen=True)
class InterfaceBlocks:
    """Consistency, adjoint-consistency and penalty parts of one pairing."""

    consistency: LocalBlock
    adjoint: LocalBlock
    penalty: LocalBlock

    @property
    def total(self) -> LocalBlock:
        c = self.consistency
        return LocalBlock(c.test, c.trial, c.rows, c.cols, c.values + self.adjoint.values + self.penalty.values)

    def without_consistency(self) -> LocalBlock:
        a = self.adjoint
        return LocalBlock(a.test, a.trial, a.rows, a.cols, a.values + self.penalty.values)


# ---------------------------------------------------------------------------
# Volume quadrature and forms
# ---------------------------------------------------------------------------

class VolumeQuadrature:
    """Quadrature points, weights and physical basis gradients on one region."""

    def __init__(self, mesh: TriangleMesh, region: Region, degree: int):
        self.rule = triangle_quadrature(degree)
        self.triangles = mesh.region_triangles(region)
        origin, jac, det, inv = mesh.affine_maps
        ref = self.rule.points[:, 1:3]
        self.points = origin[self.triangles][:, None, :] + np.einsum("tdk,qk->tqd", jac[self.triangles], ref)
        self.weights = np.abs(det[self.triangles])[:, None] * self.rule.weights[None, :]
        self.jinv = inv[self.triangles]
        self.diameters = mesh.triangle_diameters[self.triangles]
        self._basis: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}

    def basis(self, degree: int) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Values (Q, n) and physical gradients (T, Q, n, 2)."""
        if degree not in self._basis:
            values, ref_grads = tabulate(degree, self.rule.points)
            grads = np.einsum("qnk,tkd->tqnd", ref_grads, self.jinv)
            self._basis[degree] = (values, grads)
        return self._basis[degree]

    def mass(self, test_degree: int, trial_degree: int) -> NDArray[np.float64]:
        vt = self.basis(test_degree)[0]
        vr = self.basis(trial_degree)[0]
        return np.einsum("tq,qi,qj->tij", self.weights, vt, vr)

    def grad_grad(self, test_degree: int, trial_degree: int, a: int, b: int) -> NDArray[np.float64]:
        gt = self.basis(test_degree)[1]
        gr = self.basis(trial_degree)[1]
        return np.einsum("tq,tqi,tqj->tij", self.weights, gt[..., a], gr[..., b])

    def grad_value(self, test_degree: int, trial_degree: int, a: int) -> NDArray[np.float64]:
        gt = self.basis(test_degree)[1]
        vr = self.basis(trial_degree)[0]
        return np.einsum("tq,tqi,qj->tij", self.weights, gt[..., a], vr)

    def stiffness(self, degree: int) -> NDArray[np.float64]:
        return self.grad_grad(degree, degree, 0, 0) + self.grad_grad(degree, degree, 1, 1)

    def strain(self, degree: int) -> NDArray[np.float64]:
        """Vector local matrices of (D(u), D(phi)), component-blocked."""
        n = 3 if degree == 1 else 6
        stiff = self.stiffness(degree)
        out = np.zeros((self.triangles.size, 2 * n, 2 * n))
        for d in range(2):
            for c in range(2):
                block = self.grad_grad(degree, degree, c, d)
                if c == d:
                    block = block + stiff
                out[:, d * n:(d + 1) * n, c * n:(c + 1) * n] = 0.5 * block
        return out

    def divdiv(self, degree: int) -> NDArray[np.float64]:
        """Vector local matrices of (div u, div phi)."""
        n = 3 if degree == 1 else 6
        out = np.zeros((self.triangles.size, 2 * n, 2 * n))
        for d in range(2):
            for c in range(2):
                out[:, d * n:(d + 1) * n, c * n:(c + 1) * n] = self.grad_grad(degree, degree, d, c)
        return out

    def vector_mass(self, degree: int, tensor: NDArray[np.float64]) -> NDArray[np.float64]:
        n = 3 if degree == 1 else 6
        mass = self.mass(degree, degree)
        out = np.zeros((self.triangles.size, 2 * n, 2 * n))
        for d in range(2):
            for c in range(2):
                out[:, d * n:(d + 1) * n, c * n:(c + 1) * n] = tensor[d, c] * mass
        return out

    def divergence(self, vector_degree: int, scalar_degree: int) -> NDArray[np.float64]:
        """Local matrices of (psi, div phi): rows vector test, columns scalar trial."""
        return np.concatenate([self.grad_value(vector_degree, scalar_degree, d) for d in range(2)], axis=1)

    def load(self, values: NDArray[np.float64], degree: int) -> NDArray[np.float64]:
        """Local load vectors (T, n) of a scalar integrand sampled at (T, Q)."""
        return np.einsum("tq,tq,qi->ti", self.weights, values, self.basis(degree)[0])


def _block(problem: Problem, test: str, trial: str, values: NDArray[np.float64]) -> LocalBlock:
    volume = problem.volume(test)
    rows = problem.spaces[test].cell_block(np.arange(volume.triangles.size))
    cols = problem.spaces[trial].cell_block(np.arange(volume.triangles.size))
    return LocalBlock(test, trial, rows, cols, values)


def _run_tasks(tasks: Mapping[str, Callable[[], np.ndarray]], threads: int) -> Dict[str, np.ndarray]:
    """Evaluate named tasks, concurrently when threads > 0; results keep task order."""
    if threads <= 0:
        return {name: task() for name, task in tasks.items()}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {name: pool.submit(task) for name, task in tasks.items()}
        return {name: futures[name].result() for name in tasks}


def _volume_forms(problem: Problem) -> Dict[str, LocalBlock]:
    """Unscaled volume bilinear forms shared by all assemblers."""
    pairing = problem.spaces.pairing
    dv, du, dq = pairing.velocity_degree, pairing.displacement_degree, pairing.darcy_degree
    fluid, porous = problem.fluid_volume, problem.porous_volume
    kinv = problem.params.conductivity_inverse
    h2 = porous.diameters ** 2
    tasks = {
        "strain_v": lambda: fluid.strain(dv),
        "strain_U": lambda: porous.strain(du),
        "divdiv_U": lambda: porous.divdiv(du),
        "div_v_p": lambda: fluid.divergence(dv, 1),
        "div_U_xi": lambda: porous.divergence(du, 1),
        "div_q_eta": lambda: porous.divergence(dq, 1),
        "mass_p": lambda: fluid.mass(1, 1),
        "mass_P1": lambda: porous.mass(1, 1),
        "kinv_q": lambda: porous.vector_mass(dq, kinv),
        "mass_q": lambda: porous.vector_mass(dq, np.eye(2)),
        "mass_v": lambda: fluid.vector_mass(dv, np.eye(2)),
        "mass_U": lambda: porous.vector_mass(du, np.eye(2)),
        "stiff_h2": lambda: porous.stiffness(1) * h2[:, None, None],
    }
    local = _run_tasks(tasks, problem.threads)
    forms = {
        "strain_v": _block(problem, "v", "v", local["strain_v"]),
        "strain_U": _block(problem, "U", "U", local["strain_U"]),
        "divdiv_U": _block(problem, "U", "U", local["divdiv_U"]),
        "div_v_p": _block(problem, "v", "p_f", local["div_v_p"]),
        "div_U_xi": _block(problem, "U", "xi", local["div_U_xi"]),
        "div_q_eta": _block(problem, "q", "eta", local["div_q_eta"]),
        "div_q_xi": _block(problem, "q", "xi", local["div_q_eta"]),
        "mass_p": _block(problem, "p_f", "p_f", local["mass_p"]),
        "mass_xi": _block(problem, "xi", "xi", local["mass_P1"]),
        "mass_eta": _block(problem, "eta", "eta", local["mass_P1"]),
        "mass_xi_eta": _block(problem, "xi", "eta", local["mass_P1"]),
        "kinv_q": _block(problem, "q", "q", local["kinv_q"]),
        "mass_q": _block(problem, "q", "q", local["mass_q"]),
        "mass_v": _block(problem, "v", "v", local["mass_v"]),
        "mass_U": _block(problem, "U", "U", local["mass_U"]),
        "stiff_h2_xi": _block(problem, "xi", "xi", local["stiff_h2"]),
        "stiff_h2_eta": _block(problem, "eta", "eta", local["stiff_h2"]),
    }
    logger.debug(f"Volume forms ready ({len(forms)} blocks, threads={problem.threads})")
    return forms


def load_vector(problem: Problem, name: str, source, t: float) -> NDArray[np.float64]:
    """(source(t), test) over the field's region; vector sources give (2, ...)."""
    volume = problem.volume(name)
    dof_map = problem.spaces[name]
    degree = dof_map.kind.degree
    values = np.asarray(source(volume.points[..., 0], volume.points[..., 1], t), dtype=np.float64)
    if dof_map.n_components == 2:
        local = np.concatenate([volume.load(values[c], degree) for c in range(2)], axis=1)
    else:
        local = volume.load(values, degree)
    rows = dof_map.cell_block(np.arange(volume.triangles.size))
    return np.bincount(rows.ravel(), weights=local.ravel(), minlength=dof_map.n_dofs)


# ---------------------------------------------------------------------------
# Edge traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FieldTrace:
    """Basis traces of one field on a set of edges, sampled at edge quadrature points.

    normal, tangent: phi.n and phi.tau (vector fields); value: psi (scalar
    fields); dnn, dtn: n.D(phi)n and tau.D(phi)n (vector fields).
    """

    dofs: NDArray[np.int64]
    value: Optional[NDArray[np.float64]] = None
    normal: Optional[NDArray[np.float64]] = None
    tangent: Optional[NDArray[np.float64]] = None
    dnn: Optional[NDArray[np.float64]] = None
    dtn: Optional[NDArray[np.float64]] = None


@dataclass(frozen=True, eq=False)
class EdgeTraces:
    edges: EdgeArrays
    weights: NDArray[np.float64]
    points: NDArray[np.float64]
    fields: Dict[str, FieldTrace] = field(default_factory=dict)

    def __getitem__(self, name: str) -> FieldTrace:
        return self.fields[name]


def _field_trace(problem: Problem, name: str, triangles: NDArray[np.int64], points: NDArray[np.float64],
                 normals: NDArray[np.float64], tangents: NDArray[np.float64]) -> FieldTrace:
    dof_map = problem.spaces[name]
    mesh = problem.mesh
    rows = dof_map.tri_row[triangles]
    if np.any(rows < 0):
        raise UsageError(f"edge owner triangle outside the {dof_map.region.value} region of field {name}")
    dofs = dof_map.cell_block(rows)
    bary = mesh.barycentric(np.broadcast_to(triangles[:, None], points.shape[:2]), points)
    values, ref_grads = tabulate(dof_map.kind.degree, bary)
    if dof_map.n_components == 1:
        return FieldTrace(dofs, value=values)
    grads = np.einsum("eqnk,ekd->eqnd", ref_grads, mesh.affine_maps[3][triangles])
    g_n = np.einsum("eqnd,ed->eqn", grads, normals)
    g_t = np.einsum("eqnd,ed->eqn", grads, tangents)
    n_c = [normals[:, c][:, None, None] for c in range(2)]
    t_c = [tangents[:, c][:, None, None] for c in range(2)]
    return FieldTrace(
        dofs,
        normal=np.concatenate([values * n_c[c] for c in range(2)], axis=2),
        tangent=np.concatenate([values * t_c[c] for c in range(2)], axis=2),
        dnn=np.concatenate([n_c[c] * g_n for c in range(2)], axis=2),
        dtn=np.concatenate([0.5 * (t_c[c] * g_n + n_c[c] * g_t) for c in range(2)], axis=2),
    )


def edge_traces(problem: Problem, edges: EdgeArrays, names: Iterable[str]) -> EdgeTraces:
    """Traces of the named fields on ``edges``; interface edges sample each
    field from the triangle of its own region."""
    rule = edge_quadrature(problem.edge_quadrature_degree)
    s = rule.points
    p0 = problem.mesh.nodes[edges.vertices[:, 0]]
    p1 = problem.mesh.nodes[edges.vertices[:, 1]]
    points = p0[:, None, :] + s[None, :, None] * (p1 - p0)[:, None, :]
    weights = edges.lengths[:, None] * rule.weights[None, :]
    traces = {}
    for name in names:
        if edges.tag is EdgeTag.INTERFACE:
            owners = edges.first if field_region(name) is Region.FLUID else edges.second
        else:
            if edges.tag.region is not field_region(name):
                continue
            owners = edges.first
        traces[name] = _field_trace(problem, name, owners, points, edges.normals, edges.tangents)
    return EdgeTraces(edges, weights, points, traces)


# ---------------------------------------------------------------------------
# Interface operators
# ---------------------------------------------------------------------------

def interface_terms(problem: Problem, trial: str, test: str, edges: Optional[EdgeArrays] = None) -> InterfaceBlocks:
    """Interface contributions of one (test, trial) field pairing.

    consistency  -int T_n(v, p) [test].n  -  int T_tau(v) [test].tau
    adjoint      -int S_n(phi, psi) m_n   -  int S_tau(phi) m_tau
    penalty      +int gamma_f mu_f / h  m_n [test].n  +  int w_tau m_tau [test].tau

    with T_n = 2 mu_f n.D(v)n - p, S_n = 2 mu_f varsigma n.D(phi)n + psi,
    m_n = (v - d_tU - q).n, m_tau = (v - d_tU).tau and the test mismatch
    (phi_f - phi_p - r). In bjs_plus mode the tangential consistency and
    adjoint parts are dropped and w_tau = beta; otherwise w_tau is the normal
    penalty weight. The trial "U" is the coefficient of d_tU.

    Raises:
        UsageError: unknown field or edges not tagged interface.
    """
    for name in (trial, test):
        if name not in FIELD_ORDER:
            raise UsageError(f"unknown field '{name}'")
    if edges is None:
        traces = problem.interface
    else:
        if edges.tag is not EdgeTag.INTERFACE:
            raise UsageError(f"interface terms need interface edges, got '{edges.tag.value}'")
        traces = edge_traces(problem, edges, (trial, test))
    if trial not in traces.fields or test not in traces.fields:
        raise UsageError(f"fields {test}/{trial} have no interface trace")

    X, Y = traces[test], traces[trial]
    w = traces.weights
    E = w.shape[0]
    shape = (E, X.dofs.shape[1], Y.dofs.shape[1])
    coupling = problem.coupling
    star = coupling.mode is InterfaceMode.NITSCHE_STAR
    mu = problem.params.mu_f
    vs = float(problem.nitsche.varsigma)

    def pair(weight, a, b):
        return np.einsum("eq,eqi,eqj->eij", weight, a, b)

    consistency = np.zeros(shape)
    if trial in ("v", "p_f") and test in _MISMATCH_N:
        t_n = 2.0 * mu * Y.dnn if trial == "v" else -Y.value
        consistency -= pair(w, _MISMATCH_N[test] * X.normal, t_n)
        if star and trial == "v" and test in _MISMATCH_T:
            consistency -= pair(w, _MISMATCH_T[test] * X.tangent, 2.0 * mu * Y.dtn)

    adjoint = np.zeros(shape)
    if test in ("v", "p_f") and trial in _MISMATCH_N:
        s_n = 2.0 * mu * vs * X.dnn if test == "v" else X.value
        adjoint -= pair(w, s_n, _MISMATCH_N[trial] * Y.normal)
        if star and test == "v" and trial in _MISMATCH_T:
            adjoint -= pair(w, 2.0 * mu * vs * X.dtn, _MISMATCH_T[trial] * Y.tangent)

    penalty = np.zeros(shape)
    if test in _MISMATCH_N and trial in _MISMATCH_N:
        weights = _edge_weights(problem, traces.edges)
        penalty += pair(w * weights[0][:, None], _MISMATCH_N[test] * X.normal, _MISMATCH_N[trial] * Y.normal)
        if test in _MISMATCH_T and trial in _MISMATCH_T:
            penalty += pair(w * weights[1][:, None], _MISMATCH_T[test] * X.tangent, _MISMATCH_T[trial] * Y.tangent)

    if not problem.nitsche.coupling:
        consistency[:] = 0.0
        adjoint[:] = 0.0
        penalty[:] = 0.0
    return InterfaceBlocks(*(LocalBlock(test, trial, X.dofs, Y.dofs, values)
                             for values in (consistency, adjoint, penalty)))


def _edge_weights(problem: Problem, edges: EdgeArrays) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    normal = problem.nitsche.gamma_f * problem.params.mu_f / edges.lengths
    if problem.coupling.mode is InterfaceMode.BJS_PLUS:
        return normal, np.full_like(normal, problem.params.beta)
    return normal, normal


# ---------------------------------------------------------------------------
# Stabilization terms
# ---------------------------------------------------------------------------

STABILIZATIONS = ("s_fp", "s_fv", "s_fq", "s_q_xi", "s_q_eta")


def stabilization_terms(kind: str, problem: Problem) -> LocalBlock:
    """Implicit part of a stabilization term.

    s_fp     gamma_stab h / (gamma_f mu_f)       int_G p psi
    s_fv     gamma'_stab gamma_f mu_f / h        int_G (v.n)(phi.n)
    s_fq     gamma'_stab gamma_f mu_f / h        int_G (q.n)(r.n)
    s_q_xi   gamma_q k1 h_T^2                    int_Op grad xi . grad w
    s_q_eta  gamma_q k2 h_T^2                    int_Op grad eta . grad z

    The time-derivative terms are returned without the dt factors, which
    cancel: applying the block to the previous level gives the explicit part.
    The s_q terms are zero unless pseudo-pressure stabilization is enabled.
    """
    nitsche = problem.nitsche
    if kind in ("s_q_xi", "s_q_eta"):
        field_name = kind[4:]
        base = problem.forms[f"stiff_h2_{field_name}"]
        k = problem.coeffs.k1 if field_name == "xi" else problem.coeffs.k2
        scale = nitsche.gamma_q * k if nitsche.pseudo_stabilization else 0.0
        return base.scaled(scale)
    if kind not in STABILIZATIONS:
        raise UsageError(f"unknown stabilization '{kind}'")

    traces = problem.interface
    w = traces.weights
    h = traces.edges.lengths
    active = nitsche.coupling and nitsche.gamma_f > 0
    if kind == "s_fp":
        X = traces["p_f"]
        scale = nitsche.gamma_stab * h / (nitsche.gamma_f * problem.params.mu_f) if active else np.zeros_like(h)
        values = np.einsum("eq,eqi,eqj->eij", w * scale[:, None], X.value, X.value)
        return LocalBlock("p_f", "p_f", X.dofs, X.dofs, values)
    name = "v" if kind == "s_fv" else "q"
    X = traces[name]
    scale = nitsche.gamma_stab_prime * nitsche.gamma_f * problem.params.mu_f / h if active else np.zeros_like(h)
    values = np.einsum("eq,eqi,eqj->eij", w * scale[:, None], X.normal, X.normal)
    return LocalBlock(name, name, X.dofs, X.dofs, values)


# ---------------------------------------------------------------------------
# Boundary conditions
# ---------------------------------------------------------------------------

def _edge_scalar_dofs(problem: Problem, name: str, edges: EdgeArrays) -> NDArray[np.int64]:
    """Scalar dofs on each edge, shape (E, 2) for P1 and (E, 3) for P2."""
    dof_map = problem.spaces[name]
    dofs = dof_map.vertex_dofs[edges.vertices]
    if dof_map.kind.degree == 2:
        mids = dof_map.edge_dofs[problem.mesh.edge_ids(edges.vertices)]
        dofs = np.concatenate([dofs, mids[:, None]], axis=1)
    return dofs


def dirichlet_dofs(problem: Problem, name: str) -> NDArray[np.int64]:
    """Field-local dofs fixed to zero by the boundary-condition set.

    Normal constraints are strong on axis-aligned edges (the matching
    component is fixed) and penalized elsewhere (see normal_penalty_block).
    """
    dof_map = problem.spaces[name]
    region = field_region(name)
    fixed: List[np.ndarray] = []
    for tag in BOUNDARY_TAGS:
        if tag.region is not region:
            continue
        constraint = problem.bcs.treatment(tag, name)
        if constraint is Constraint.NATURAL:
            continue
        edges = edge_arrays(problem.mesh, tag)
        if len(edges) == 0:
            continue
        scalar = _edge_scalar_dofs(problem, name, edges)
        if constraint is Constraint.ALL or dof_map.n_components == 1:
            fixed.extend(scalar.ravel() + c * dof_map.n_scalar for c in range(dof_map.n_components))
            continue
        for c in range(2):
            aligned = np.abs(edges.normals[:, c]) >= 1.0 - _AXIS_TOL
            fixed.append(scalar[aligned].ravel() + c * dof_map.n_scalar)
    if not fixed:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(fixed)).astype(np.int64)


def normal_penalty_block(problem: Problem, name: str) -> Optional[LocalBlock]:
    """Penalty for normal constraints on edges that are not axis-aligned.

    Weight gamma * 2 mu_p / h for U and gamma * |k^-1| h for q, with
    gamma = gamma_f (1500 when the interface penalty is switched off).
    """
    gamma = problem.nitsche.gamma_f if problem.nitsche.gamma_f > 0 else 1500.0
    blocks = []
    for tag in BOUNDARY_TAGS:
        if tag.region is not field_region(name) or problem.bcs.treatment(tag, name) is not Constraint.NORMAL:
            continue
        edges = edge_arrays(problem.mesh, tag)
        skew = np.all(np.abs(edges.normals) < 1.0 - _AXIS_TOL, axis=1)
        if not np.any(skew):
            continue
        picked = EdgeArrays(tag, edges.vertices[skew], edges.first[skew], edges.second[skew],
                            edges.normals[skew], edges.tangents[skew], edges.lengths[skew])
        traces = edge_traces(problem, picked, (name,))
        X = traces[name]
        h = picked.lengths
        if name == "U":
            weight = gamma * 2.0 * problem.params.mu_p / h
        else:
            weight = gamma * np.linalg.norm(problem.params.conductivity_inverse, 2) * h
        values = np.einsum("eq,eqi,eqj->eij", traces.weights * weight[:, None], X.normal, X.normal)
        blocks.append(LocalBlock(name, name, X.dofs, X.dofs, values))
    if not blocks:
        return None
    return LocalBlock(name, name, np.concatenate([b.rows for b in blocks]), np.concatenate([b.cols for b in blocks]),
                      np.concatenate([b.values for b in blocks]))


def traction_vector(problem: Problem, t: float) -> NDArray[np.float64]:
    """<-p_in(t) n, phi> over the traction tags."""
    p_in = float(problem.sources.p_in(t))
    result = np.zeros(problem.spaces.size("v"))
    if p_in == 0.0:
        return result
    for tag in problem.bcs.traction_tags:
        edges = edge_arrays(problem.mesh, tag)
        if len(edges) == 0:
            continue
        traces = edge_traces(problem, edges, ("v",))
        local = -p_in * np.einsum("eq,eqi->ei", traces.weights, traces["v"].normal)
        result += np.bincount(traces["v"].dofs.ravel(), weights=local.ravel(), minlength=result.size)
    return result


# ---------------------------------------------------------------------------
# Block systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockLayout:
    """Ordered unknown blocks and their sizes."""

    fields: Tuple[str, ...]
    sizes: Tuple[int, ...]

    @property
    def offsets(self) -> Tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)[:-1]])) if self.sizes else ()

    @property
    def n(self) -> int:
        return int(sum(self.sizes))

    def slice(self, name: str) -> slice:
        k = self.fields.index(name)
        return slice(self.offsets[k], self.offsets[k] + self.sizes[k])

    def split(self, x: NDArray[np.float64]) -> Dict[str, NDArray[np.float64]]:
        return {name: np.array(x[self.slice(name)]) for name in self.fields}


@dataclass(frozen=True, eq=False)
class SubProblemSystem:
    which: str
    system: SparseSystem
    layout: BlockLayout
    dirichlet: NDArray[np.int64]


def _layout(problem: Problem, names: Sequence[str]) -> BlockLayout:
    return BlockLayout(tuple(names), tuple(problem.spaces.size(name) for name in names))


def _finish(problem: Problem, which: str, layout: BlockLayout,
            terms: List[Tuple[LocalBlock, float]], rhs: Mapping[str, NDArray[np.float64]]) -> SubProblemSystem:
    builder = TripletBuilder(layout.n)
    for block, scale in terms:
        if block.test not in layout.fields or block.trial not in layout.fields:
            continue
        r0 = layout.offsets[layout.fields.index(block.test)]
        c0 = layout.offsets[layout.fields.index(block.trial)]
        builder.add_local(block.rows + r0, block.cols + c0, block.values, scale)
    for name in layout.fields:
        penalty = normal_penalty_block(problem, name) if name in ("U", "q") else None
        if penalty is not None:
            offset = layout.offsets[layout.fields.index(name)]
            builder.add_local(penalty.rows + offset, penalty.cols + offset, penalty.values)
    matrix = builder.tocsr()
    b = np.concatenate([np.asarray(rhs[name], dtype=np.float64) for name in layout.fields])

    fixed = [problem.dirichlet[name] + layout.offsets[k] for k, name in enumerate(layout.fields)]
    if "p_f" in layout.fields and problem.bcs.needs_pressure_gauge():
        fixed.append(np.array([layout.offsets[layout.fields.index("p_f")]]))
    fixed_dofs = np.unique(np.concatenate(fixed)) if fixed else np.zeros(0, dtype=np.int64)
    matrix, b = apply_dirichlet(matrix, b, fixed_dofs)
    logger.debug(f"Assembled {which}: n={layout.n}, nnz={matrix.nnz}, fixed={fixed_dofs.size}")
    return SubProblemSystem(which, SparseSystem(matrix, b), layout, fixed_dofs)


def apply_dirichlet(matrix: sp.csr_matrix, rhs: NDArray[np.float64],
                    fixed: NDArray[np.int64]) -> Tuple[sp.csr_matrix, NDArray[np.float64]]:
    """Homogeneous strong conditions by row and column elimination with unit rows."""
    mask = np.zeros(matrix.shape[0])
    mask[fixed] = 1.0
    keep = sp.diags(1.0 - mask)
    reduced = (keep @ matrix @ keep + sp.diags(mask)).tocsr()
    reduced.eliminate_zeros()
    reduced.sort_indices()
    return reduced, rhs * (1.0 - mask)


def _require(state, names: Iterable[str], which: str) -> None:
    if state is None:
        raise SequencingError(f"{which} needs the previous solution state")
    for name in names:
        if getattr(state, name, None) is None:
            raise SequencingError(f"{which} needs field '{name}' of the previous state")


def _check_size(problem: Problem, name: str, vector, which: str) -> NDArray[np.float64]:
    if vector is None:
        raise SequencingError(f"{which} needs '{name}' from the preceding step")
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (problem.spaces.size(name),):
        raise SequencingError(f"{which}: '{name}' has {vector.shape[0]} entries, expected {problem.spaces.size(name)}")
    return vector


def _lagged(problem: Problem, test: str, data: Mapping[str, NDArray[np.float64]],
            consistency_only: bool = False, skip_consistency: bool = False) -> NDArray[np.float64]:
    """-sum over trials of interface blocks applied to known data."""
    n = problem.spaces.size(test)
    result = np.zeros(n)
    for trial, x in data.items():
        blocks = interface_terms(problem, trial, test)
        if consistency_only:
            block = blocks.consistency
        elif skip_consistency:
            block = blocks.without_consistency()
        else:
            block = blocks.total
        result -= block.apply(x, n)
    return result


def assemble_step1(problem: Problem, state_prev: "SolutionState", dt: float) -> SubProblemSystem:
    """Step 1: (U^n, xi^n) with lagged fluid traction, v^{n-1}, q^{n-1} and eta^{n-1}."""
    _require(state_prev, ("v", "p_f", "U", "q", "eta"), STEP1)
    _check_dt(dt)
    p, c, nit = problem.params, problem.coeffs, problem.nitsche
    forms = problem.forms
    t = state_prev.t + dt
    interface_U = interface_terms(problem, "U", "U").total
    terms = [
        (forms["strain_U"], 2.0 * p.mu_p),
        (forms["div_U_xi"], -1.0),
        (forms["div_U_xi"].transpose(), 1.0),
        (forms["mass_xi"], c.k3),
        (interface_U, 1.0 / dt),
        (stabilization_terms("s_q_xi", problem), 1.0),
    ]
    n_U = problem.spaces.size("U")
    rhs_U = (load_vector(problem, "U", problem.sources.h, t)
             + _lagged(problem, "U", {"v": state_prev.v, "p_f": state_prev.p_f, "q": state_prev.q})
             + interface_U.apply(state_prev.U, n_U) / dt)
    rhs_xi = c.k1 * forms["mass_xi_eta"].apply(state_prev.eta, problem.spaces.size("xi"))
    return _finish(problem, STEP1, _layout(problem, ("U", "xi")), terms, {"U": rhs_U, "xi": rhs_xi})


def assemble_step2(problem: Problem, state_prev: "SolutionState", xi_new, dt: float) -> SubProblemSystem:
    """Step 2: (q^n, eta^n) using xi^n, lagged fluid data and d_tU^{n-1}."""
    _require(state_prev, ("v", "p_f", "q", "eta", "dU_dt"), STEP2)
    xi_new = _check_size(problem, "xi", xi_new, STEP2)
    _check_dt(dt)
    c = problem.coeffs
    forms = problem.forms
    t = state_prev.t + dt
    n_q, n_eta = problem.spaces.size("q"), problem.spaces.size("eta")
    s_fq = stabilization_terms("s_fq", problem)
    terms = [
        (forms["kinv_q"], 1.0),
        (forms["div_q_eta"], -c.k2),
        (forms["div_q_eta"].transpose(), 1.0),
        (forms["mass_eta"], 1.0 / dt),
        (interface_terms(problem, "q", "q").total, 1.0),
        (s_fq, 1.0),
        (stabilization_terms("s_q_eta", problem), 1.0),
    ]
    rhs_q = (c.k1 * forms["div_q_xi"].apply(xi_new, n_q)
             + _lagged(problem, "q", {"v": state_prev.v, "p_f": state_prev.p_f, "U": state_prev.dU_dt})
             + s_fq.apply(state_prev.q, n_q))
    rhs_eta = (load_vector(problem, "eta", problem.sources.s, t)
               + forms["mass_eta"].apply(state_prev.eta, n_eta) / dt)
    return _finish(problem, STEP2, _layout(problem, ("q", "eta")), terms, {"q": rhs_q, "eta": rhs_eta})


def assemble_step3(problem: Problem, state_prev: "SolutionState", U_new, q_new, dt: float) -> SubProblemSystem:
    """Step 3: (v^n, p_f^n) with lagged traction and the new d_tU^n, q^n."""
    _require(state_prev, ("v", "p_f", "U"), STEP3)
    U_new = _check_size(problem, "U", U_new, STEP3)
    q_new = _check_size(problem, "q", q_new, STEP3)
    _check_dt(dt)
    p = problem.params
    forms = problem.forms
    t = state_prev.t + dt
    n_v, n_p = problem.spaces.size("v"), problem.spaces.size("p_f")
    dU_dt = (U_new - state_prev.U) / dt
    s_fp = stabilization_terms("s_fp", problem)
    s_fv = stabilization_terms("s_fv", problem)
    terms = [
        (forms["strain_v"], 2.0 * p.mu_f),
        (forms["div_v_p"], -1.0),
        (forms["div_v_p"].transpose(), 1.0),
        (interface_terms(problem, "v", "v").without_consistency(), 1.0),
        (interface_terms(problem, "v", "p_f").adjoint, 1.0),
        (s_fp, 1.0),
        (s_fv, 1.0),
    ]
    rhs_v = (load_vector(problem, "v", problem.sources.f, t)
             + traction_vector(problem, t)
             + _lagged(problem, "v", {"v": state_prev.v, "p_f": state_prev.p_f}, consistency_only=True)
             + _lagged(problem, "v", {"U": dU_dt, "q": q_new}, skip_consistency=True)
             + s_fv.apply(state_prev.v, n_v))
    rhs_p = (load_vector(problem, "p_f", problem.sources.g, t)
             + _lagged(problem, "p_f", {"U": dU_dt, "q": q_new})
             + s_fp.apply(state_prev.p_f, n_p))
    return _finish(problem, STEP3, _layout(problem, ("v", "p_f")), terms, {"v": rhs_v, "p_f": rhs_p})


def assemble_monolithic(problem: Problem, state_prev: "SolutionState", dt: float) -> SubProblemSystem:
    """All six fields at once with the interface operators fully implicit."""
    _require(state_prev, ("U", "eta"), MONOLITHIC)
    _check_dt(dt)
    p, c = problem.params, problem.coeffs
    forms = problem.forms
    t = state_prev.t + dt
    terms = [
        (forms["strain_v"], 2.0 * p.mu_f),
        (forms["div_v_p"], -1.0),
        (forms["div_v_p"].transpose(), 1.0),
        (forms["strain_U"], 2.0 * p.mu_p),
        (forms["div_U_xi"], -1.0),
        (forms["div_U_xi"].transpose(), 1.0),
        (forms["mass_xi"], c.k3),
        (forms["mass_xi_eta"], -c.k1),
        (forms["kinv_q"], 1.0),
        (forms["div_q_xi"], -c.k1),
        (forms["div_q_eta"], -c.k2),
        (forms["div_q_eta"].transpose(), 1.0),
        (forms["mass_eta"], 1.0 / dt),
        (stabilization_terms("s_q_xi", problem), 1.0),
        (stabilization_terms("s_q_eta", problem), 1.0),
    ]
    rhs = {name: np.zeros(problem.spaces.size(name)) for name in FIELD_ORDER}
    for test in ("v", "p_f", "U", "q"):
        for trial in ("v", "p_f", "U", "q"):
            block = interface_terms(problem, trial, test).total
            terms.append((block, 1.0 / dt if trial == "U" else 1.0))
            if trial == "U":
                rhs[test] += block.apply(state_prev.U, problem.spaces.size(test)) / dt
    rhs["v"] += load_vector(problem, "v", problem.sources.f, t) + traction_vector(problem, t)
    rhs["p_f"] += load_vector(problem, "p_f", problem.sources.g, t)
    rhs["U"] += load_vector(problem, "U", problem.sources.h, t)
    rhs["eta"] += (load_vector(problem, "eta", problem.sources.s, t)
                   + forms["mass_eta"].apply(state_prev.eta, problem.spaces.size("eta")) / dt)
    return _finish(problem, MONOLITHIC, _layout(problem, FIELD_ORDER), terms, rhs)


def _check_dt(dt: float) -> None:
    if not dt > 0:
        raise UsageError(f"time step must be positive, got {dt}")


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def coupling_components(system: SubProblemSystem) -> List[set]:
    """Connected components of the field-level sparsity graph."""
    layout = system.layout
    graph = nx.Graph()
    graph.add_nodes_from(layout.fields)
    coo = system.system.matrix.tocoo()
    owner = np.repeat(np.arange(len(layout.fields)), layout.sizes)
    off = owner[coo.row] != owner[coo.col]
    pairs = {(int(a), int(b)) for a, b in zip(owner[coo.row[off]], owner[coo.col[off]])}
    graph.add_edges_from((layout.fields[a], layout.fields[b]) for a, b in pairs)
    return sorted((set(component) for component in nx.connected_components(graph)),
                  key=lambda component: min(layout.fields.index(name) for name in component))


def inverse_inequality_ratio(problem: Problem, samples: int = 100, seed: int = 0) -> float:
    """max over random velocity fields of h ||D(u) n||^2_G / ||D(u)||^2_Of."""
    traces = problem.interface
    if len(traces.edges) == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    n_v = problem.spaces.size("v")
    strain = problem.forms["strain_v"].to_matrix(n_v, n_v)
    X = traces["v"]
    h = traces.edges.lengths
    worst = 0.0
    for _ in range(samples):
        x = rng.standard_normal(n_v)
        local = x[X.dofs]
        dnn = np.einsum("eqk,ek->eq", X.dnn, local)
        dtn = np.einsum("eqk,ek->eq", X.dtn, local)
        boundary = float(np.sum(h[:, None] * traces.weights * (dnn ** 2 + dtn ** 2)))
        volume = float(x @ (strain @ x))
        if volume > 0:
            worst = max(worst, boundary / volume)
    return worst
