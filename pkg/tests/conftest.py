import numpy as np
import pytest

from shellopt import (ShellMesh, assemble_components, build_force_basis, build_topology,
                      make_roof, reference_quantities, select_dirichlet, tracking_mask,
                      vertex_normals)


class Bundle:
    """Mesh plus the operators every higher-level test needs."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.ref = reference_quantities(mesh)
        self.components = assemble_components(mesh, self.ref)
        self.normals = vertex_normals(mesh)
        self.model = build_force_basis(mesh, self.normals)
        self.chi_full = tracking_mask(mesh, "full")


@pytest.fixture(scope="session")
def roof12():
    """Base roof: 288 faces, corner supports, a couple of frozen faces."""
    return Bundle(select_dirichlet(make_roof(12, 12), z_threshold=0.5))


@pytest.fixture(scope="session")
def roof7():
    """98-face roof with generous corner supports (design-gradient testbed)."""
    return Bundle(select_dirichlet(make_roof(7, 7), z_threshold=2.5))


@pytest.fixture(scope="session")
def roof5():
    """108-DOF roof for dense finite-difference comparisons."""
    return Bundle(select_dirichlet(make_roof(5, 5), z_threshold=0.5))


def two_triangle_mesh(fold_angle: float = 0.0) -> ShellMesh:
    """Two triangles sharing the edge (1, 2); the second is folded out of
    plane by the given hinge angle."""
    verts = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
    ])
    if fold_angle != 0.0:
        # rotate vertex 3 about the shared edge (from (1,0,0) to (0,1,0))
        axis = np.array([-1.0, 1.0, 0.0]) / np.sqrt(2.0)
        origin = verts[1]
        c, s = np.cos(fold_angle), np.sin(fold_angle)
        rel = verts[3] - origin
        verts[3] = origin + (c * rel + s * np.cross(axis, rel)
                             + (1 - c) * axis * (axis @ rel))
    faces = np.array([[0, 1, 2], [1, 3, 2]], dtype=np.int64)
    return build_topology(ShellMesh(vertices=verts, faces=faces))


def single_triangle_obj(path):
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    return path


@pytest.fixture
def tet_mesh():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
                      [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]], dtype=np.int64)
    return build_topology(ShellMesh(vertices=verts, faces=faces))
