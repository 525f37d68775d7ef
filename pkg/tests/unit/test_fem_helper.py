import math
import os
import sys

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from errors import ParameterError, SolverError  # noqa: E402
from fem_helper import (ElementKind, SparseSystem, TripletBuilder, build_dof_map, edge_quadrature,  # noqa: E402
                        shape_functions, solve_sparse, tabulate, triangle_quadrature)
from mesh_helper import Region  # noqa: E402


class TestQuadrature:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    @pytest.mark.parametrize("degree", [1, 2, 3, 4, 5, 6])
    def test_triangle_rule_is_exact(self, degree):
        """int x^a y^b over the reference triangle equals a! b! / (a + b + 2)! for a + b <= degree."""
        rule = triangle_quadrature(degree)
        x, y = rule.points[:, 1], rule.points[:, 2]
        assert rule.weights.sum() == pytest.approx(0.5, abs=1e-15)
        for a in range(degree + 1):
            for b in range(degree + 1 - a):
                exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
                assert np.sum(rule.weights * x ** a * y ** b) == pytest.approx(exact, rel=1e-12, abs=1e-15)

    def test_edge_rule_is_exact(self):
        rule = edge_quadrature(5)
        for k in range(6):
            assert np.sum(rule.weights * rule.points ** k) == pytest.approx(1.0 / (k + 1), rel=1e-13)

    def test_rules_are_cached(self):
        assert triangle_quadrature(4) is triangle_quadrature(4)


class TestShapeFunctions:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_p1_mass_matrix(self):
        """Reference P1 mass matrix is (area / 12) [[2,1,1],[1,2,1],[1,1,2]] with area 1/2."""
        rule = triangle_quadrature(2)
        values, _ = tabulate(1, rule.points)
        mass = np.einsum("q,qi,qj->ij", rule.weights, values, values)
        expected = (0.5 / 12.0) * np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])
        np.testing.assert_allclose(mass, expected, atol=1e-14)

    def test_p2_nodal_basis(self):
        """P2 functions are one at their own node and zero at the others."""
        nodes = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0.5, 0.5, 0], [0, 0.5, 0.5], [0.5, 0, 0.5]])
        values, _ = tabulate(2, nodes)
        np.testing.assert_allclose(values, np.eye(6), atol=1e-15)

    @pytest.mark.parametrize("degree", [1, 2])
    def test_partition_of_unity(self, degree):
        bary = np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]])
        values, grads = tabulate(degree, bary)
        np.testing.assert_allclose(values.sum(axis=-1), 1.0)
        np.testing.assert_allclose(grads.sum(axis=-2), 0.0, atol=1e-14)

    def test_vector_kind_is_component_blocked(self):
        values, grads = shape_functions(ElementKind.P1_VECTOR2, [0.2, 0.3, 0.5])
        assert values.shape == (6, 2)
        assert grads.shape == (6, 2, 2)
        np.testing.assert_allclose(values[:3, 1], 0.0)
        np.testing.assert_allclose(values[3:, 1], [0.2, 0.3, 0.5])


class TestDofMap:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_p2_counts(self, tiny_mesh):
        """P2 on a 2 x 2 grid has (2*2+1)^2 nodes; on the fluid half (2*2+1)*(2*1+1)."""
        whole = build_dof_map(tiny_mesh, ElementKind.P2_SCALAR)
        assert whole.n_scalar == 25
        fluid = build_dof_map(tiny_mesh, ElementKind.P2_VECTOR2, Region.FLUID)
        assert fluid.n_scalar == 15
        assert fluid.n_dofs == 30
        assert fluid.cell_block(np.arange(2)).shape == (2, 12)

    def test_region_restriction(self, tiny_mesh):
        porous = build_dof_map(tiny_mesh, ElementKind.P1_SCALAR, Region.POROUS)
        assert porous.n_scalar == 6
        assert np.all(porous.coordinates[:, 1] <= 0.0)
        assert np.all(porous.tri_row[tiny_mesh.region_triangles(Region.FLUID)] == -1)

    def test_p2_midpoint_coordinates(self, tiny_mesh):
        """Edge dofs sit at edge midpoints."""
        dof_map = build_dof_map(tiny_mesh, ElementKind.P2_SCALAR)
        used = dof_map.edge_dofs >= 0
        ends = tiny_mesh.unique_edges[used]
        midpoints = 0.5 * (tiny_mesh.nodes[ends[:, 0]] + tiny_mesh.nodes[ends[:, 1]])
        np.testing.assert_allclose(dof_map.coordinates[dof_map.edge_dofs[used]], midpoints)


class TestSparseAssembly:
    # ---------------------------------------------------------------------------
    # Expected-use test
    # ---------------------------------------------------------------------------
    def test_duplicates_are_summed(self):
        builder = TripletBuilder(3)
        local = np.ones((2, 2, 2))
        builder.add_local(np.array([[0, 1], [1, 2]]), np.array([[0, 1], [1, 2]]), local)
        matrix = builder.tocsr().toarray()
        np.testing.assert_allclose(matrix, [[1, 1, 0], [1, 2, 1], [0, 1, 1]])

    def test_solve(self):
        matrix = sp.csr_matrix(np.array([[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]]))
        rhs = np.array([1.0, 2.0, 3.0])
        result = solve_sparse(SparseSystem(matrix, rhs))
        np.testing.assert_allclose(matrix @ result.solution, rhs, rtol=1e-13)
        assert result.residual < 1e-12

    # ---------------------------------------------------------------------------
    # Failure case test
    # ---------------------------------------------------------------------------
    def test_singular_matrix(self):
        matrix = sp.csr_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(SolverError):
            solve_sparse(SparseSystem(matrix, np.ones(2)))

    def test_tiny_pivot_names_unknown(self):
        matrix = sp.csr_matrix(np.diag([1.0, 1e-40]))
        with pytest.raises(SolverError) as excinfo:
            solve_sparse(SparseSystem(matrix, np.ones(2)))
        assert excinfo.value.pivot == 1

    def test_non_square_system(self):
        with pytest.raises(ParameterError):
            SparseSystem(sp.csr_matrix((2, 3)), np.zeros(2))
