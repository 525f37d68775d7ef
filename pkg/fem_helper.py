"""
FEM Helper for the Stokes-Biot simulator

Reference Lagrange elements (P1/P2, scalar and 2-vector), quadrature rules on the
reference triangle and the unit segment, degree-of-freedom maps restricted to a
mesh region, COO-to-CSR assembly primitives and the direct sparse solver.

Vector dof maps are component-blocked: dof ``c * n_scalar + i`` is component
``c`` of scalar dof ``i``; local vector dofs on a cell are ordered the same way.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import leggauss
from numpy.typing import NDArray
from scipy.sparse.linalg import splu
from scipy.special import roots_jacobi

from errors import ParameterError, SolverError
from mesh_helper import Region, TriangleMesh

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
# Pivots below this fraction of the largest one count as zero.
PIVOT_RTOL = 1e-30
_REFINEMENT_STEPS = 3

# ---------------------------------------------------------------------------
# Element kinds
# ---------------------------------------------------------------------------


class ElementKind(str, Enum):
    P1_SCALAR = "P1_scalar"
    P2_SCALAR = "P2_scalar"
    P1_VECTOR2 = "P1_vector2"
    P2_VECTOR2 = "P2_vector2"

    @property
    def degree(self) -> int:
        return 1 if self.value.startswith("P1") else 2

    @property
    def n_components(self) -> int:
        return 2 if self.value.endswith("vector2") else 1

    @property
    def n_local(self) -> int:
        """Local scalar basis functions per triangle."""
        return 3 if self.degree == 1 else 6

    @classmethod
    def vector(cls, degree: int) -> "ElementKind":
        return cls.P1_VECTOR2 if degree == 1 else cls.P2_VECTOR2

    @classmethod
    def scalar(cls, degree: int) -> "ElementKind":
        return cls.P1_SCALAR if degree == 1 else cls.P2_SCALAR


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle (barycentric points, weights sum 1/2)
    or on the unit segment (points in [0, 1], weights sum 1)."""

    points: NDArray[np.float64]
    weights: NDArray[np.float64]
    degree: int

    def __len__(self) -> int:
        return int(self.weights.shape[0])


def _symmetric_orbit(a: float) -> List[Tuple[float, float, float]]:
    b = 1.0 - 2.0 * a
    return [(a, a, b), (a, b, a), (b, a, a)]


def _frozen_rule(points: List[Tuple[float, ...]], weights: List[float], degree: int) -> QuadratureRule:
    p = np.array(points, dtype=np.float64)
    w = np.array(weights, dtype=np.float64)
    p.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(p, w, degree)


def _collapsed_rule(n: int) -> Tuple[List[Tuple[float, float, float]], List[float]]:
    """Conical Gauss-Jacobi x Gauss-Legendre product rule, exact to degree 2n-1."""
    ta, wa = roots_jacobi(n, 1.0, 0.0)
    tb, wb = leggauss(n)
    points, weights = [], []
    for ai, wai in zip((ta + 1.0) / 2.0, wa / 4.0):
        for bj, wbj in zip((tb + 1.0) / 2.0, wb / 2.0):
            x, y = ai, (1.0 - ai) * bj
            points.append((1.0 - x - y, x, y))
            weights.append(wai * wbj)
    return points, weights


@lru_cache(maxsize=None)
def triangle_quadrature(min_exact_degree: int = 4) -> QuadratureRule:
    """Rule on the reference triangle exact for polynomials of the given degree.

    Degrees 1, 2, 4 (6 points, used for 3 and 4) and 5 (7 points) are the
    classical symmetric rules; degree 6 uses a 16-point collapsed product rule.

    Raises:
        ParameterError: degree outside [1, 6].
    """
    if min_exact_degree not in range(1, 7):
        raise ParameterError(f"triangle quadrature degree must be in [1, 6], got {min_exact_degree}")
    if min_exact_degree == 1:
        return _frozen_rule([(1 / 3, 1 / 3, 1 / 3)], [0.5], 1)
    if min_exact_degree == 2:
        return _frozen_rule(_symmetric_orbit(1 / 6), [1 / 6] * 3, 2)
    if min_exact_degree <= 4:
        a1, w1 = 0.44594849091596488632, 0.22338158967801146570
        a2, w2 = 0.09157621350977074346, 0.10995174365532186764
        return _frozen_rule(_symmetric_orbit(a1) + _symmetric_orbit(a2), [w1 / 2] * 3 + [w2 / 2] * 3, 4)
    if min_exact_degree == 5:
        r = math.sqrt(15.0)
        a1, w1 = (6.0 - r) / 21.0, (155.0 - r) / 1200.0
        a2, w2 = (6.0 + r) / 21.0, (155.0 + r) / 1200.0
        points = [(1 / 3, 1 / 3, 1 / 3)] + _symmetric_orbit(a1) + _symmetric_orbit(a2)
        weights = [9.0 / 80.0] + [w1 / 2] * 3 + [w2 / 2] * 3
        return _frozen_rule(points, weights, 5)
    points, weights = _collapsed_rule(4)
    return _frozen_rule(points, weights, 6)


@lru_cache(maxsize=None)
def edge_quadrature(min_exact_degree: int = 5) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact to the requested degree.

    Raises:
        ParameterError: degree outside [1, 6].
    """
    if min_exact_degree not in range(1, 7):
        raise ParameterError(f"edge quadrature degree must be in [1, 6], got {min_exact_degree}")
    n = (min_exact_degree + 2) // 2
    t, w = leggauss(n)
    return _frozen_rule([(s + 1.0) / 2.0 for s in t], list(w / 2.0), 2 * n - 1)


# ---------------------------------------------------------------------------
# Shape functions
# ---------------------------------------------------------------------------

# d(lambda_i)/d(x_hat, y_hat) with lambda = (1 - x_hat - y_hat, x_hat, y_hat)
_BARY_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
_P2_EDGES = ((0, 1), (1, 2), (2, 0))


def tabulate(degree: int, bary: NDArray[np.float64]) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Scalar basis values (..., n) and reference gradients (..., n, 2)."""
    lam = np.asarray(bary, dtype=np.float64)
    if degree == 1:
        grads = np.broadcast_to(_BARY_GRADS, lam.shape[:-1] + (3, 2)).copy()
        return lam.copy(), grads
    values = np.empty(lam.shape[:-1] + (6,))
    grads = np.empty(lam.shape[:-1] + (6, 2))
    for i in range(3):
        values[..., i] = lam[..., i] * (2.0 * lam[..., i] - 1.0)
        grads[..., i, :] = np.expand_dims(4.0 * lam[..., i] - 1.0, -1) * _BARY_GRADS[i]
    for k, (i, j) in enumerate(_P2_EDGES, start=3):
        values[..., k] = 4.0 * lam[..., i] * lam[..., j]
        grads[..., k, :] = 4.0 * (np.expand_dims(lam[..., j], -1) * _BARY_GRADS[i] + np.expand_dims(lam[..., i], -1) * _BARY_GRADS[j])
    return values, grads


def shape_functions(kind: ElementKind, point) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Basis values and reference gradients at one barycentric point.

    Scalar kinds return shapes (n,) and (n, 2). Vector kinds return (2n, 2)
    values and (2n, 2, 2) gradients (basis, component, derivative), basis
    ``c * n + i`` being the scalar function ``i`` times the unit vector ``e_c``.
    """
    kind = ElementKind(kind)
    values, grads = tabulate(kind.degree, np.asarray(point, dtype=np.float64))
    if kind.n_components == 1:
        return values, grads
    n = values.shape[0]
    vec_values = np.zeros((2 * n, 2))
    vec_grads = np.zeros((2 * n, 2, 2))
    for c in range(2):
        vec_values[c * n:(c + 1) * n, c] = values
        vec_grads[c * n:(c + 1) * n, c, :] = grads
    return vec_values, vec_grads


# ---------------------------------------------------------------------------
# Degree-of-freedom maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DofMap:
    """Local-to-global dof table of one element kind on one region.

    Attributes:
        kind: Element kind.
        region: Region the map is restricted to (None for the whole mesh).
        triangles: Mesh triangles covered, in increasing order.
        cell_dofs: (len(triangles), n_local) global scalar dof indices.
        n_scalar: Number of scalar dofs.
        coordinates: (n_scalar, 2) nodal points of the scalar dofs.
        tri_row: (n_mesh_triangles,) row of ``cell_dofs`` per triangle, -1 outside.
        vertex_dofs: (n_mesh_nodes,) scalar dof at each vertex, -1 outside.
        edge_dofs: (n_mesh_edges,) scalar midpoint dof per unique edge (P2), -1 otherwise.
    """

    kind: ElementKind
    region: Optional[Region]
    triangles: NDArray[np.int64]
    cell_dofs: NDArray[np.int64]
    n_scalar: int
    coordinates: NDArray[np.float64]
    tri_row: NDArray[np.int64]
    vertex_dofs: NDArray[np.int64]
    edge_dofs: NDArray[np.int64]

    @property
    def n_components(self) -> int:
        return self.kind.n_components

    @property
    def n_dofs(self) -> int:
        return self.n_scalar * self.kind.n_components

    def component(self, c: int) -> NDArray[np.int64]:
        return c * self.n_scalar + np.arange(self.n_scalar)

    def cell_block(self, rows: NDArray[np.int64]) -> NDArray[np.int64]:
        """Global dofs of cells ``rows`` with all components, shape (len, n_comp * n_local)."""
        scalar = self.cell_dofs[rows]
        return np.concatenate([scalar + c * self.n_scalar for c in range(self.n_components)], axis=-1)


def build_dof_map(mesh: TriangleMesh, kind: ElementKind, region: Optional[Region] = None) -> DofMap:
    """Continuous Lagrange dof map of ``kind`` on ``region``.

    Vertex dofs come first in increasing vertex order, then (for P2) edge
    midpoint dofs in increasing unique-edge order.
    """
    kind = ElementKind(kind)
    region = Region(region) if region is not None else None
    tris = mesh.region_triangles(region)

    vertex_dofs = np.full(mesh.n_nodes, -1, dtype=np.int64)
    used_vertices = np.unique(mesh.triangles[tris])
    vertex_dofs[used_vertices] = np.arange(used_vertices.size)
    cell_dofs = vertex_dofs[mesh.triangles[tris]]
    coordinates = mesh.nodes[used_vertices]

    edge_dofs = np.full(mesh.unique_edges.shape[0], -1, dtype=np.int64)
    if kind.degree == 2:
        used_edges = np.unique(mesh.tri_edges[tris])
        edge_dofs[used_edges] = used_vertices.size + np.arange(used_edges.size)
        cell_dofs = np.concatenate([cell_dofs, edge_dofs[mesh.tri_edges[tris]]], axis=1)
        ends = mesh.unique_edges[used_edges]
        coordinates = np.concatenate([coordinates, 0.5 * (mesh.nodes[ends[:, 0]] + mesh.nodes[ends[:, 1]])], axis=0)

    tri_row = np.full(mesh.n_triangles, -1, dtype=np.int64)
    tri_row[tris] = np.arange(tris.size)
    for array in (tris, cell_dofs, coordinates, tri_row, vertex_dofs, edge_dofs):
        array.setflags(write=False)
    dof_map = DofMap(kind, region, tris, cell_dofs, int(coordinates.shape[0]), coordinates, tri_row, vertex_dofs, edge_dofs)
    logger.debug(f"Dof map {kind.value} on {region.value if region else 'all'}: {dof_map.n_dofs} dofs")
    return dof_map


# ---------------------------------------------------------------------------
# Sparse assembly primitives
# ---------------------------------------------------------------------------

class TripletBuilder:
    """Accumulates COO triplets in insertion order and merges them into CSR."""

    def __init__(self, n_rows: int, n_cols: Optional[int] = None):
        self.shape = (int(n_rows), int(n_rows if n_cols is None else n_cols))
        self._rows: List[np.ndarray] = []
        self._cols: List[np.ndarray] = []
        self._vals: List[np.ndarray] = []

    def add_local(self, rows: NDArray[np.int64], cols: NDArray[np.int64], local: NDArray[np.float64],
                  scale: float = 1.0) -> None:
        """Scatter local matrices (E, m, n) with row dofs (E, m) and column dofs (E, n)."""
        if local.size == 0 or scale == 0.0:
            return
        r = np.broadcast_to(rows[:, :, None], local.shape)
        c = np.broadcast_to(cols[:, None, :], local.shape)
        self._rows.append(r.ravel())
        self._cols.append(c.ravel())
        self._vals.append((scale * local).ravel())

    def add_matrix(self, matrix: sp.spmatrix, row_offset: int = 0, col_offset: int = 0, scale: float = 1.0) -> None:
        if scale == 0.0:
            return
        coo = sp.coo_matrix(matrix)
        self._rows.append(coo.row.astype(np.int64) + row_offset)
        self._cols.append(coo.col.astype(np.int64) + col_offset)
        self._vals.append(scale * coo.data)

    def tocsr(self) -> sp.csr_matrix:
        if self._rows:
            rows = np.concatenate(self._rows)
            cols = np.concatenate(self._cols)
            vals = np.concatenate(self._vals)
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
        matrix = sp.coo_matrix((vals, (rows, cols)), shape=self.shape).tocsr()
        matrix.sum_duplicates()
        matrix.sort_indices()
        return matrix


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Square CSR matrix with its right-hand side."""

    matrix: sp.csr_matrix
    rhs: NDArray[np.float64]

    def __post_init__(self):
        matrix = sp.csr_matrix(self.matrix, dtype=np.float64)
        matrix.sum_duplicates()
        matrix.sort_indices()
        rhs = np.asarray(self.rhs, dtype=np.float64).reshape(-1)
        if matrix.shape[0] != matrix.shape[1]:
            raise ParameterError(f"system matrix must be square, got {matrix.shape}")
        if rhs.shape[0] != matrix.shape[0]:
            raise ParameterError(f"right-hand side has length {rhs.shape[0]}, expected {matrix.shape[0]}")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "rhs", rhs)

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])


@dataclass(frozen=True)
class SolveResult:
    solution: NDArray[np.float64]
    residual: float


def _relative_residual(matrix: sp.csr_matrix, x: np.ndarray, b: np.ndarray) -> float:
    r = b - matrix @ x
    scale = np.linalg.norm(b)
    return float(np.linalg.norm(r) / scale) if scale > 0.0 else float(np.linalg.norm(r))


def solve_sparse(system: SparseSystem) -> SolveResult:
    """Direct LU solve with partial pivoting and iterative refinement.

    Returns:
        SolveResult: solution and relative residual ||Ax - b|| / ||b||.

    Raises:
        SolverError: singular or numerically singular pivot (index of the unknown
            in the original numbering), or a non-finite solution.
    """
    started = time.perf_counter()
    csc = system.matrix.tocsc()
    try:
        lu = splu(csc, permc_spec="COLAMD", diag_pivot_thresh=1.0)
    except RuntimeError as e:
        raise SolverError(f"LU factorization failed: {e}") from e

    diagonal = np.abs(lu.U.diagonal())
    if diagonal.size:
        tiny = ~np.isfinite(diagonal) | (diagonal <= PIVOT_RTOL * diagonal.max())
        if tiny.any():
            position = int(np.argmax(tiny))
            pivot = int(np.argsort(lu.perm_c)[position])
            raise SolverError(f"numerically singular pivot at unknown {pivot}", pivot=pivot)

    x = lu.solve(system.rhs)
    residual = _relative_residual(system.matrix, x, system.rhs)
    for _ in range(_REFINEMENT_STEPS):
        if residual <= RESIDUAL_TOL:
            break
        x = x + lu.solve(system.rhs - system.matrix @ x)
        residual = _relative_residual(system.matrix, x, system.rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("solution contains non-finite values")
    if residual > RESIDUAL_TOL:
        logger.warning(f"Relative residual {residual:.3e} above {RESIDUAL_TOL:.0e} (n={system.n})")
    logger.debug(f"Solved n={system.n}, nnz={system.matrix.nnz} in {time.perf_counter() - started:.3f}s, "
                 f"residual={residual:.2e}")
    return SolveResult(x, residual)
