import os
import sys

import pytest

# Make the top-level modules importable without installing the project.
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from assembly_helper import ElementPairing, build_problem  # noqa: E402
from mesh_helper import build_channel_mesh  # noqa: E402
from model_helper import (NitscheParameters, PhysicalParameters, SourceTerms,  # noqa: E402
                          boundary_set_test1)


@pytest.fixture
def tiny_mesh():
    """2 x (1 + 1) channel: 8 triangles, 2 interface edges."""
    return build_channel_mesh(2, 1)


@pytest.fixture
def channel_mesh():
    return build_channel_mesh(4, 2)


@pytest.fixture
def benchmark_params():
    return PhysicalParameters.channel_benchmark()


@pytest.fixture
def make_problem(channel_mesh, benchmark_params):
    """Factory for small problems; every argument defaults to the channel benchmark setup with zero loads."""
    def _make(mesh=None, params=None, nitsche=None, bcs=None, sources=None, pairing=None):
        return build_problem(
            mesh if mesh is not None else channel_mesh,
            params if params is not None else benchmark_params,
            nitsche if nitsche is not None else NitscheParameters(),
            bcs if bcs is not None else boundary_set_test1(),
            sources if sources is not None else SourceTerms(),
            pairing if pairing is not None else ElementPairing(),
            threads=0,
        )
    return _make
