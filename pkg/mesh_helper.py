"""
Mesh Helper for the Stokes-Biot simulator

This module builds, maps, reads and writes conforming two-region triangulations
of the channel geometry: a fluid region on top of a poroelastic region, glued
along a tagged interface. Boundary edges carry one tag each (fluid_in,
fluid_out, fluid_ext, porous_in, porous_out, porous_ext).

Meshes are immutable once constructed; derived connectivity (unique edges,
neighbours, affine maps) is computed lazily and cached on the instance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from errors import GeometryError, MeshParseError, ParameterError

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

MESH_HEADER = "MESH v1"
_LOCATE_TOL = 1e-10


class Region(str, Enum):
    """Subdomain label of a triangle."""

    FLUID = "fluid"
    POROUS = "porous"

    @property
    def code(self) -> int:
        return 0 if self is Region.FLUID else 1


class EdgeTag(str, Enum):
    """Tag of an interface or boundary edge."""

    INTERFACE = "interface"
    FLUID_IN = "fluid_in"
    FLUID_OUT = "fluid_out"
    FLUID_EXT = "fluid_ext"
    POROUS_IN = "porous_in"
    POROUS_OUT = "porous_out"
    POROUS_EXT = "porous_ext"

    @property
    def region(self) -> Optional[Region]:
        """Region owning a boundary tag; None for the interface."""
        if self is EdgeTag.INTERFACE:
            return None
        return Region.FLUID if self.value.startswith("fluid") else Region.POROUS


BOUNDARY_TAGS = tuple(tag for tag in EdgeTag if tag is not EdgeTag.INTERFACE)

CoordinateMap = Callable[[NDArray[np.float64], NDArray[np.float64]], Tuple[NDArray[np.float64], NDArray[np.float64]]]


@dataclass(frozen=True)
class StructuredGrid:
    """Builder parameters kept on channel meshes for point location."""

    nx: int
    ny_half: int
    x_min: float
    x_max: float
    y_lo: float
    y_split: float
    y_hi: float


@dataclass(frozen=True)
class EdgeInfo:
    """One tagged edge with its owning triangle(s) and unit frame.

    For interface edges ``triangles`` is ``(fluid, porous)`` and ``normal``
    points out of the fluid triangle; for boundary edges it is ``(owner,)`` and
    the normal points out of the domain. ``tangent`` is the normal rotated +90°.
    """

    index: int
    vertices: Tuple[int, int]
    triangles: Tuple[int, ...]
    normal: Tuple[float, float]
    tangent: Tuple[float, float]
    length: float


@dataclass(frozen=True)
class EdgeArrays:
    """Vectorized view of all edges carrying one tag."""

    tag: EdgeTag
    vertices: NDArray[np.int64]
    first: NDArray[np.int64]
    second: NDArray[np.int64]
    normals: NDArray[np.float64]
    tangents: NDArray[np.float64]
    lengths: NDArray[np.float64]

    def __len__(self) -> int:
        return int(self.vertices.shape[0])


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# ---------------------------------------------------------------------------
# Core type
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Conforming two-region triangulation with tagged edges."""

    nodes: NDArray[np.float64]
    triangles: NDArray[np.int64]
    regions: NDArray[np.int8]
    edges: NDArray[np.int64]
    edge_tags: Tuple[EdgeTag, ...]
    grid: Optional[StructuredGrid] = field(default=None)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=np.float64).reshape(-1, 2)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        regions = np.array(self.regions, dtype=np.int8).reshape(-1)
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
        tags = tuple(EdgeTag(tag) for tag in self.edge_tags)
        object.__setattr__(self, "nodes", _readonly(nodes))
        object.__setattr__(self, "triangles", _readonly(triangles))
        object.__setattr__(self, "regions", _readonly(regions))
        object.__setattr__(self, "edges", _readonly(edges))
        object.__setattr__(self, "edge_tags", tags)
        self._validate()

    # -- validation ---------------------------------------------------------

    def _validate(self) -> None:
        n_nodes = self.nodes.shape[0]
        if self.regions.shape[0] != self.triangles.shape[0]:
            raise GeometryError("one region label per triangle is required")
        if len(self.edge_tags) != self.edges.shape[0]:
            raise GeometryError("one tag per edge is required")
        for name, table in (("triangle", self.triangles), ("edge", self.edges)):
            if table.size and (table.min() < 0 or table.max() >= n_nodes):
                bad = int(np.nonzero((table < 0) | (table >= n_nodes))[0][0])
                raise GeometryError(f"{name} {bad} references a node outside 0..{n_nodes - 1}")
        if not np.all(np.isin(self.regions, (0, 1))):
            raise GeometryError("region labels must be fluid (0) or porous (1)")

        areas = self.signed_areas
        if areas.size and areas.min() <= 0.0:
            bad = int(np.argmin(areas))
            raise GeometryError(f"triangle {bad} has nonpositive signed area {areas[bad]:.3e}", triangle=bad)

        counts = np.bincount(self.tri_edges.ravel(), minlength=self.unique_edges.shape[0])
        if counts.size and counts.max() > 2:
            raise GeometryError("an edge is shared by more than two triangles")

        tagged = self.tagged_edge_ids
        if len(np.unique(tagged)) != len(tagged):
            raise GeometryError("an edge carries more than one tag")
        boundary = np.nonzero(counts == 1)[0]
        tags = np.array([tag.value for tag in self.edge_tags], dtype=object)
        is_interface = tags == EdgeTag.INTERFACE.value
        tagged_boundary = np.sort(tagged[~is_interface]) if len(tagged) else tagged
        if not np.array_equal(tagged_boundary, boundary):
            raise GeometryError("boundary edges must be tagged exactly once and only boundary edges may carry boundary tags")

        owners = self.edge_triangles
        for k in np.nonzero(is_interface)[0]:
            a, b = owners[tagged[k]]
            if b < 0 or {int(self.regions[a]), int(self.regions[b])} != {0, 1}:
                raise GeometryError(f"interface edge {int(k)} is not shared by one fluid and one porous triangle")
        # Untagged interior edges must not separate the regions.
        interior = np.nonzero(counts == 2)[0]
        untagged = np.setdiff1d(interior, tagged[is_interface]) if len(tagged) else interior
        pairs = owners[untagged]
        if pairs.size and np.any(self.regions[pairs[:, 0]] != self.regions[pairs[:, 1]]):
            raise GeometryError("an edge between fluid and porous triangles is not tagged as interface")

    # -- basic properties ---------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    @cached_property
    def signed_areas(self) -> NDArray[np.float64]:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return _readonly(0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]))

    @cached_property
    def h_max(self) -> float:
        """Global maximum edge length."""
        edges = self.unique_edges
        if edges.size == 0:
            return 0.0
        d = self.nodes[edges[:, 1]] - self.nodes[edges[:, 0]]
        return float(np.max(np.hypot(d[:, 0], d[:, 1])))

    @cached_property
    def triangle_diameters(self) -> NDArray[np.float64]:
        """Longest edge of each triangle."""
        p = self.nodes[self.triangles]
        lengths = np.stack([np.hypot(*(p[:, (k + 1) % 3] - p[:, k]).T) for k in range(3)], axis=1)
        return _readonly(lengths.max(axis=1))

    def region_triangles(self, region: Optional[Region]) -> NDArray[np.int64]:
        """Indices of the triangles of a region (all triangles for None)."""
        if region is None:
            return np.arange(self.n_triangles)
        return np.nonzero(self.regions == Region(region).code)[0]

    def region_area(self, region: Optional[Region]) -> float:
        return float(self.signed_areas[self.region_triangles(region)].sum())

    # -- connectivity -------------------------------------------------------

    @cached_property
    def _edge_table(self) -> Tuple[NDArray[np.int64], NDArray[np.int64]]:
        local = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]], axis=0
        )
        local = np.sort(local, axis=1)
        keys = local[:, 0] * self.n_nodes + local[:, 1]
        unique_keys, inverse = np.unique(keys, return_inverse=True)
        unique = np.stack([unique_keys // self.n_nodes, unique_keys % self.n_nodes], axis=1)
        tri_edges = inverse.reshape(3, -1).T
        return _readonly(unique), _readonly(np.ascontiguousarray(tri_edges))

    @property
    def unique_edges(self) -> NDArray[np.int64]:
        """All mesh edges as sorted vertex pairs, lexicographically ordered."""
        return self._edge_table[0]

    @property
    def tri_edges(self) -> NDArray[np.int64]:
        """Edge id of local edge k = (k, k+1 mod 3) for every triangle."""
        return self._edge_table[1]

    @cached_property
    def edge_triangles(self) -> NDArray[np.int64]:
        """Up to two triangles per unique edge (-1 where absent)."""
        flat = self.tri_edges.ravel()
        tri_of = np.repeat(np.arange(self.n_triangles), 3)
        order = np.argsort(flat, kind="stable")
        sorted_edges = flat[order]
        sorted_tris = tri_of[order]
        first = np.ones(sorted_edges.shape[0], dtype=bool)
        first[1:] = sorted_edges[1:] != sorted_edges[:-1]
        owners = np.full((self.unique_edges.shape[0], 2), -1, dtype=np.int64)
        owners[sorted_edges[first], 0] = sorted_tris[first]
        owners[sorted_edges[~first], 1] = sorted_tris[~first]
        return _readonly(owners)

    @cached_property
    def neighbors(self) -> NDArray[np.int64]:
        """Triangle across local edge k, -1 on the boundary."""
        owners = self.edge_triangles[self.tri_edges]
        mine = np.arange(self.n_triangles)[:, None]
        return _readonly(np.where(owners[..., 0] == mine, owners[..., 1], owners[..., 0]))

    def edge_ids(self, vertex_pairs: NDArray[np.int64]) -> NDArray[np.int64]:
        """Unique-edge ids of arbitrary vertex pairs."""
        pairs = np.sort(np.asarray(vertex_pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        keys = pairs[:, 0] * self.n_nodes + pairs[:, 1]
        table = self.unique_edges[:, 0] * self.n_nodes + self.unique_edges[:, 1]
        ids = np.searchsorted(table, keys)
        ids = np.clip(ids, 0, max(len(table) - 1, 0))
        if len(keys) and not np.array_equal(table[ids], keys):
            raise GeometryError("a tagged edge is not an edge of any triangle")
        return ids

    @cached_property
    def tagged_edge_ids(self) -> NDArray[np.int64]:
        return _readonly(self.edge_ids(self.edges))

    # -- affine maps --------------------------------------------------------

    @cached_property
    def affine_maps(self) -> Tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
        """Per-triangle origin, Jacobian, determinant and inverse Jacobian.

        x = p0 + J @ (x_hat, y_hat) maps the reference triangle (0,0),(1,0),(0,1).
        """
        p = self.nodes[self.triangles]
        origin = p[:, 0]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1] / det
        inv[:, 0, 1] = -jac[:, 0, 1] / det
        inv[:, 1, 0] = -jac[:, 1, 0] / det
        inv[:, 1, 1] = jac[:, 0, 0] / det
        return _readonly(origin), _readonly(jac), _readonly(det), _readonly(inv)

    def barycentric(self, triangles: NDArray[np.int64], points: NDArray[np.float64]) -> NDArray[np.float64]:
        """Barycentric coordinates of points (..., 2) in matching triangles (...)."""
        origin, _, _, inv = self.affine_maps
        rel = points - origin[triangles]
        ref = np.einsum("...kd,...d->...k", inv[triangles], rel)
        return np.concatenate([1.0 - ref.sum(axis=-1, keepdims=True), ref], axis=-1)


# ---------------------------------------------------------------------------
# Construction and mapping
# ---------------------------------------------------------------------------

def build_channel_mesh(nx: int, ny_half: int, x_range: Tuple[float, float] = (0.0, 1.0),
                       y_split: float = 0.0, y_lo: float = -1.0, y_hi: float = 1.0) -> TriangleMesh:
    """Structured channel mesh: porous below ``y_split``, fluid above.

    Every cell is split along its (+,+) diagonal. The left side is tagged
    *_in, the right side *_out, the bottom porous_ext and the top fluid_ext.

    Args:
        nx: Cells along x.
        ny_half: Cells along y in each half.
        x_range: (x_min, x_max).
        y_split: Height of the interface.
        y_lo: Bottom of the porous region.
        y_hi: Top of the fluid region.

    Returns:
        TriangleMesh: The tagged mesh, carrying its StructuredGrid.
    """
    x_min, x_max = float(x_range[0]), float(x_range[1])
    if int(nx) != nx or int(ny_half) != ny_half or nx < 1 or ny_half < 1:
        raise ParameterError(f"nx and ny_half must be positive integers, got {nx}, {ny_half}")
    if not x_min < x_max:
        raise ParameterError(f"empty x range {x_range}")
    if not y_lo < y_split < y_hi:
        raise ParameterError(f"need y_lo < y_split < y_hi, got {y_lo}, {y_split}, {y_hi}")
    nx, ny = int(nx), int(ny_half)

    xs = np.linspace(x_min, x_max, nx + 1)
    ys = np.concatenate([np.linspace(y_lo, y_split, ny + 1), np.linspace(y_split, y_hi, ny + 1)[1:]])
    gx, gy = np.meshgrid(xs, ys)
    nodes = np.stack([gx.ravel(), gy.ravel()], axis=1)

    stride = nx + 1
    jj, ii = np.meshgrid(np.arange(2 * ny), np.arange(nx), indexing="ij")
    a = (jj * stride + ii).ravel()
    b, c, d = a + 1, a + stride + 1, a + stride
    triangles = np.empty((2 * a.size, 3), dtype=np.int64)
    triangles[0::2] = np.stack([a, b, c], axis=1)
    triangles[1::2] = np.stack([a, c, d], axis=1)
    regions = np.repeat(np.where(jj.ravel() < ny, Region.POROUS.code, Region.FLUID.code), 2)

    def row(j: int) -> np.ndarray:
        start = j * stride + np.arange(nx)
        return np.stack([start, start + 1], axis=1)

    def column(i: int, rows: range) -> np.ndarray:
        start = np.array([j * stride + i for j in rows], dtype=np.int64)
        return np.stack([start, start + stride], axis=1)

    pieces = [
        (row(ny), EdgeTag.INTERFACE),
        (row(0), EdgeTag.POROUS_EXT),
        (row(2 * ny), EdgeTag.FLUID_EXT),
        (column(0, range(ny)), EdgeTag.POROUS_IN),
        (column(nx, range(ny)), EdgeTag.POROUS_OUT),
        (column(0, range(ny, 2 * ny)), EdgeTag.FLUID_IN),
        (column(nx, range(ny, 2 * ny)), EdgeTag.FLUID_OUT),
    ]
    edges = np.concatenate([p for p, _ in pieces], axis=0)
    tags = tuple(tag for p, tag in pieces for _ in range(p.shape[0]))
    grid = StructuredGrid(nx, ny, x_min, x_max, float(y_lo), float(y_split), float(y_hi))
    mesh = TriangleMesh(nodes, triangles, regions, edges, tags, grid)
    logger.debug(f"Built channel mesh nx={nx}, ny_half={ny}: {mesh.n_nodes} nodes, "
                 f"{mesh.n_triangles} triangles, h_max={mesh.h_max:.4g}")
    return mesh


def apply_mapping(mesh: TriangleMesh, mapping: CoordinateMap) -> TriangleMesh:
    """Move every node through ``mapping``; connectivity and tags are kept.

    Raises:
        GeometryError: if a triangle inverts, naming the triangle index.
    """
    x, y = mapping(mesh.nodes[:, 0].copy(), mesh.nodes[:, 1].copy())
    mapped = np.stack([np.broadcast_to(x, mesh.nodes[:, 0].shape),
                       np.broadcast_to(y, mesh.nodes[:, 1].shape)], axis=1).astype(np.float64)
    if not np.all(np.isfinite(mapped)):
        raise GeometryError("mapping produced non-finite coordinates")
    try:
        return TriangleMesh(mapped, mesh.triangles, mesh.regions, mesh.edges, mesh.edge_tags, None)
    except GeometryError as e:
        if e.triangle is not None:
            raise GeometryError(f"mapping inverts triangle {e.triangle}", triangle=e.triangle) from e
        raise


def test2_mapping(x_hat: NDArray[np.float64], y_hat: NDArray[np.float64]) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Wavy-layer map of the reference square [-100, 100]^2."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = (5.0 * np.cos((x_hat + y_hat) / 100.0) * np.cos((math.pi * x_hat + y_hat) / 100.0) ** 2
         + y_hat / 5.0 - x_hat / 10.0)
    return x_hat.copy(), y


# ---------------------------------------------------------------------------
# Tagged edge queries
# ---------------------------------------------------------------------------

def edge_arrays(mesh: TriangleMesh, tag: EdgeTag) -> EdgeArrays:
    """All edges with ``tag`` with owners, unit normals, tangents and lengths."""
    tag = EdgeTag(tag)
    picks = np.array([k for k, t in enumerate(mesh.edge_tags) if t is tag], dtype=np.int64)
    vertices = mesh.edges[picks] if picks.size else np.zeros((0, 2), dtype=np.int64)
    ids = mesh.tagged_edge_ids[picks] if picks.size else np.zeros(0, dtype=np.int64)
    owners = mesh.edge_triangles[ids] if picks.size else np.zeros((0, 2), dtype=np.int64)

    first = owners[:, 0].copy()
    second = owners[:, 1].copy()
    if tag is EdgeTag.INTERFACE:
        swap = mesh.regions[first] != Region.FLUID.code
        first[swap], second[swap] = owners[swap, 1], owners[swap, 0]
    else:
        second[:] = -1

    p0 = mesh.nodes[vertices[:, 0]]
    p1 = mesh.nodes[vertices[:, 1]]
    d = p1 - p0
    lengths = np.hypot(d[:, 0], d[:, 1])
    normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / lengths[:, None] if picks.size else np.zeros((0, 2))
    if picks.size:
        centroids = mesh.nodes[mesh.triangles[first]].mean(axis=1)
        outward = np.einsum("ij,ij->i", normals, 0.5 * (p0 + p1) - centroids)
        normals[outward < 0] *= -1.0
    tangents = np.stack([-normals[:, 1], normals[:, 0]], axis=1) if picks.size else np.zeros((0, 2))
    return EdgeArrays(tag, vertices, first, second, normals, tangents, lengths)


def edges_with_tag(mesh: TriangleMesh, tag: EdgeTag) -> List[EdgeInfo]:
    """Tagged edges with owning triangle(s), outward normal and tangent."""
    arrays = edge_arrays(mesh, tag)
    result = []
    for k in range(len(arrays)):
        owners = (int(arrays.first[k]),) if arrays.second[k] < 0 else (int(arrays.first[k]), int(arrays.second[k]))
        result.append(EdgeInfo(
            index=k,
            vertices=(int(arrays.vertices[k, 0]), int(arrays.vertices[k, 1])),
            triangles=owners,
            normal=(float(arrays.normals[k, 0]), float(arrays.normals[k, 1])),
            tangent=(float(arrays.tangents[k, 0]), float(arrays.tangents[k, 1])),
            length=float(arrays.lengths[k]),
        ))
    return result


# ---------------------------------------------------------------------------
# Point location
# ---------------------------------------------------------------------------

def locate_points(mesh: TriangleMesh, points: NDArray[np.float64],
                  region: Optional[Region] = None) -> Tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Find a containing triangle (optionally of one region) for every point.

    Structured channel meshes use cell arithmetic; other meshes use a walk over
    triangle neighbours with a brute-force fallback.

    Returns:
        (triangle indices, barycentric coordinates)
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if mesh.grid is not None:
        tris = _locate_structured(mesh, points, region)
    else:
        tris = _locate_walk(mesh, points, region)
    return tris, mesh.barycentric(tris, points)


def _locate_structured(mesh: TriangleMesh, points: NDArray[np.float64], region: Optional[Region]) -> NDArray[np.int64]:
    g = mesh.grid
    dx = (g.x_max - g.x_min) / g.nx
    i = np.clip(np.floor((points[:, 0] - g.x_min) / dx), 0, g.nx - 1).astype(np.int64)
    dy_p = (g.y_split - g.y_lo) / g.ny_half
    dy_f = (g.y_hi - g.y_split) / g.ny_half
    below = np.floor((points[:, 1] - g.y_lo) / dy_p)
    above = g.ny_half + np.floor((points[:, 1] - g.y_split) / dy_f)
    if region is None:
        j = np.where(points[:, 1] < g.y_split, below, above)
    elif Region(region) is Region.POROUS:
        j = np.minimum(below, g.ny_half - 1)
    else:
        j = np.maximum(above, g.ny_half)
    j = np.clip(j, 0, 2 * g.ny_half - 1).astype(np.int64)
    cell = j * g.nx + i
    lower, upper = 2 * cell, 2 * cell + 1
    lam_lower = mesh.barycentric(lower, points).min(axis=1)
    lam_upper = mesh.barycentric(upper, points).min(axis=1)
    return np.where(lam_lower >= lam_upper, lower, upper)


def _locate_walk(mesh: TriangleMesh, points: NDArray[np.float64], region: Optional[Region]) -> NDArray[np.int64]:
    allowed = mesh.region_triangles(region)
    if allowed.size == 0:
        name = Region(region).value if region is not None else "mesh"
        raise GeometryError(f"cannot locate points: region '{name}' has no triangles")
    allowed_mask = np.zeros(mesh.n_triangles, dtype=bool)
    allowed_mask[allowed] = True
    neighbors = mesh.neighbors
    result = np.empty(points.shape[0], dtype=np.int64)
    current = int(allowed[0])
    for k, point in enumerate(points):
        found = -1
        tri = current
        for _ in range(mesh.n_triangles):
            lam = mesh.barycentric(np.array([tri]), point[None, :])[0]
            worst = int(np.argmin(lam))
            if lam[worst] >= -_LOCATE_TOL:
                found = tri
                break
            nxt = neighbors[tri, (worst + 1) % 3]
            if nxt < 0:
                break
            tri = int(nxt)
        if found < 0 or not allowed_mask[found]:
            lam = mesh.barycentric(allowed, np.broadcast_to(point, (allowed.size, 2)))
            best = int(np.argmax(lam.min(axis=1)))
            if lam[best].min() < -1e-8:
                raise GeometryError(f"point ({point[0]:.6g}, {point[1]:.6g}) lies outside the mesh")
            found = int(allowed[best])
        result[k] = found
        current = found
    return result


# ---------------------------------------------------------------------------
# MESH v1 I/O
# ---------------------------------------------------------------------------

def write_mesh(mesh: TriangleMesh, path: Union[str, Path]) -> None:
    """Write a mesh in the MESH v1 text format (17 significant digits)."""
    region_names = {Region.FLUID.code: Region.FLUID.value, Region.POROUS.code: Region.POROUS.value}
    lines = [MESH_HEADER, f"nodes {mesh.n_nodes}"]
    lines.extend(f"{x:.17g} {y:.17g}" for x, y in mesh.nodes)
    lines.append(f"triangles {mesh.n_triangles}")
    lines.extend(f"{i} {j} {k} {region_names[int(r)]}" for (i, j, k), r in zip(mesh.triangles, mesh.regions))
    lines.append(f"edges {mesh.edges.shape[0]}")
    lines.extend(f"{i} {j} {tag.value}" for (i, j), tag in zip(mesh.edges, mesh.edge_tags))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote mesh with {mesh.n_triangles} triangles to {path}")


def read_mesh(path: Union[str, Path]) -> TriangleMesh:
    """Parse a MESH v1 file.

    Raises:
        MeshParseError: malformed header or section, out-of-range index, unknown
            tag or region; the message carries the line number. An unreadable
            file is reported with its path.
    """
    try:
        text_lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise MeshParseError(f"cannot read mesh file {path}: {exc}") from exc
    numbered = []
    for number, raw in enumerate(text_lines, start=1):
        text = raw.strip()
        if text and not text.startswith("#"):
            numbered.append((number, text.split()))
    cursor = iter(numbered)

    def next_line(what: str) -> Tuple[int, List[str]]:
        try:
            return next(cursor)
        except StopIteration:
            raise MeshParseError(f"unexpected end of file while reading {what}", line=len(numbered) and numbered[-1][0]) from None

    number, tokens = next_line("header")
    if " ".join(tokens) != MESH_HEADER:
        raise MeshParseError(f"expected header '{MESH_HEADER}'", line=number)

    def section(name: str) -> int:
        number, tokens = next_line(f"'{name}' section")
        if len(tokens) != 2 or tokens[0] != name:
            raise MeshParseError(f"expected '{name} <count>'", line=number)
        try:
            count = int(tokens[1])
        except ValueError:
            raise MeshParseError(f"invalid {name} count '{tokens[1]}'", line=number) from None
        if count < 0:
            raise MeshParseError(f"negative {name} count", line=number)
        return count

    def record(what: str, width: int) -> Tuple[int, List[str]]:
        number, tokens = next_line(what)
        if len(tokens) != width:
            raise MeshParseError(f"expected {width} fields in {what}, got {len(tokens)}", line=number)
        return number, tokens

    n_nodes = section("nodes")
    nodes = np.empty((n_nodes, 2))
    for k in range(n_nodes):
        number, tokens = record("node record", 2)
        try:
            nodes[k] = [float(tokens[0]), float(tokens[1])]
        except ValueError:
            raise MeshParseError("invalid node coordinates", line=number) from None

    def index(token: str, number: int) -> int:
        try:
            value = int(token)
        except ValueError:
            raise MeshParseError(f"invalid node index '{token}'", line=number) from None
        if not 0 <= value < n_nodes:
            raise MeshParseError(f"node index {value} outside 0..{n_nodes - 1}", line=number)
        return value

    n_tris = section("triangles")
    triangles = np.empty((n_tris, 3), dtype=np.int64)
    regions = np.empty(n_tris, dtype=np.int8)
    for k in range(n_tris):
        number, tokens = record("triangle record", 4)
        triangles[k] = [index(t, number) for t in tokens[:3]]
        try:
            regions[k] = Region(tokens[3]).code
        except ValueError:
            raise MeshParseError(f"unknown region '{tokens[3]}'", line=number) from None

    n_edges = section("edges")
    edges = np.empty((n_edges, 2), dtype=np.int64)
    tags = []
    for k in range(n_edges):
        number, tokens = record("edge record", 3)
        edges[k] = [index(t, number) for t in tokens[:2]]
        try:
            tags.append(EdgeTag(tokens[2]))
        except ValueError:
            raise MeshParseError(f"unknown edge tag '{tokens[2]}'", line=number) from None

    leftover = next(cursor, None)
    if leftover is not None:
        raise MeshParseError("trailing content after the edges section", line=leftover[0])
    return TriangleMesh(nodes, triangles, regions, edges, tuple(tags))
