import numpy as np
import pytest

from shellopt import (ShellMesh, build_topology, dihedral_angles, load_obj, make_roof,
                      reference_quantities, save_obj, select_dirichlet, vertex_normals)
from shellopt.errors import DirichletError, MeshError, ObjParseError
from shellopt.mesh import dihedral_angle_gradients

from conftest import single_triangle_obj, two_triangle_mesh


class TestLoadObj:
    def test_single_triangle(self, tmp_path):
        mesh = load_obj(single_triangle_obj(tmp_path / "tri.obj"))
        assert mesh.n_vertices == 3
        assert mesh.n_faces == 1
        topo = build_topology(mesh)
        assert topo.n_edges == 3
        assert len(topo.interior_edges) == 0

    def test_quad_face_rejected(self, tmp_path):
        p = tmp_path / "quad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(ObjParseError, match="non-triangular"):
            load_obj(p)

    def test_out_of_range_index(self, tmp_path):
        p = tmp_path / "bad.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 7\n")
        with pytest.raises(ObjParseError):
            load_obj(p)

    def test_ignores_normals_and_textures(self, tmp_path):
        p = tmp_path / "rich.obj"
        p.write_text("vn 0 0 1\nvt 0 0\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1/1 2/1/1 3/1/1\n")
        mesh = load_obj(p)
        assert mesh.n_faces == 1

    def test_roundtrip(self, tmp_path):
        mesh = make_roof(4, 4)
        save_obj(mesh, tmp_path / "roof.obj")
        again = build_topology(load_obj(tmp_path / "roof.obj"))
        assert np.allclose(again.vertices, mesh.vertices, atol=1e-10)
        assert np.array_equal(again.faces, mesh.faces)


class TestTopology:
    def test_two_triangles(self):
        mesh = two_triangle_mesh()
        assert mesh.n_edges == 5
        assert len(mesh.interior_edges) == 1

    def test_tetrahedron_closed(self, tet_mesh):
        assert tet_mesh.n_edges == 6
        assert len(tet_mesh.interior_edges) == 6
        # Euler characteristic of a genus-0 closed surface
        assert tet_mesh.n_vertices - tet_mesh.n_edges + tet_mesh.n_faces == 2

    def test_non_manifold_rejected(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, -1, 0]],
                         dtype=float)
        faces = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]], dtype=np.int64)
        with pytest.raises(MeshError, match="non-manifold"):
            build_topology(ShellMesh(vertices=verts, faces=faces))


class TestReferenceQuantities:
    def test_unit_right_triangle_area(self, tmp_path):
        mesh = build_topology(load_obj(single_triangle_obj(tmp_path / "t.obj")))
        ref = reference_quantities(mesh)
        assert ref.face_areas[0] == pytest.approx(0.5, abs=1e-15)

    def test_edge_and_vertex_areas(self):
        mesh = two_triangle_mesh()
        ref = reference_quantities(mesh)
        # both areas are 1/2; the interior edge gets (a + a')/3
        assert ref.edge_areas[0] == pytest.approx(1.0 / 3.0, abs=1e-15)
        # vertices 1 and 2 touch both faces
        assert ref.vertex_areas[1] == pytest.approx(1.0 / 3.0, abs=1e-15)
        assert ref.vertex_areas[2] == pytest.approx(1.0 / 3.0, abs=1e-15)
        assert ref.vertex_areas[0] == pytest.approx(1.0 / 6.0, abs=1e-15)

    def test_area_conservation(self, roof12):
        ref = roof12.ref
        assert ref.vertex_areas.sum() == pytest.approx(ref.face_areas.sum(), rel=1e-12)
        assert np.all(ref.face_areas > 0)
        assert np.all(ref.edge_lengths > 0)
        assert np.all(ref.edge_areas > 0)


class TestDirichlet:
    def test_ground_plane_selector(self):
        mesh = select_dirichlet(make_roof(12, 12), z_threshold=0.5)
        z = mesh.vertices[:, 2]
        assert np.all(z[mesh.dirichlet] <= z.min() + 0.5)
        assert len(mesh.dirichlet) >= 4
        # corner patches freeze a couple of triangles on this resolution
        assert mesh.frozen_faces.sum() >= 1

    def test_two_vertices_rejected(self):
        mesh = make_roof(4, 4)
        with pytest.raises(DirichletError, match="at least 3"):
            select_dirichlet(mesh, indices=[0, 1])

    def test_collinear_rejected(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0],
                          [0, 1, 0], [1, 1, 0], [2, 1, 0]], dtype=float)
        faces = np.array([[0, 1, 4], [0, 4, 3], [1, 2, 5], [1, 5, 4]], dtype=np.int64)
        mesh = build_topology(ShellMesh(vertices=verts, faces=faces))
        with pytest.raises(DirichletError, match="collinear"):
            select_dirichlet(mesh, indices=[0, 1, 2])

    def test_explicit_four_vertices(self):
        mesh = make_roof(4, 4)
        corners = [0, 4, 20, 24]
        out = select_dirichlet(mesh, indices=corners)
        assert np.array_equal(out.dirichlet, np.array(corners))


class TestVertexNormals:
    def test_flat_mesh(self):
        mesh = two_triangle_mesh()
        normals = vertex_normals(mesh)
        assert np.allclose(np.abs(normals[:, 2]), 1.0, atol=1e-12)
        assert np.allclose(normals[:, :2], 0.0, atol=1e-12)

    def test_tent_ridge_bisects(self):
        mesh = two_triangle_mesh(fold_angle=0.8)
        normals = vertex_normals(mesh)
        _, fn = __import__("shellopt").mesh.face_area_normals(mesh.vertices, mesh.faces)
        expected = fn.sum(axis=0)
        expected /= np.linalg.norm(expected)
        for v in (1, 2):  # ridge vertices touch both faces
            assert np.allclose(normals[v], expected, atol=1e-12)

    def test_unit_length(self, roof12):
        normals = vertex_normals(roof12.mesh)
        assert np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)

    def test_cancellation_reported(self):
        # two coincident triangles with opposite winding: average normal is zero
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        faces = np.array([[0, 1, 2], [0, 2, 1]], dtype=np.int64)
        mesh = build_topology(ShellMesh(vertices=verts, faces=faces))
        with pytest.raises(MeshError, match="cancel"):
            vertex_normals(mesh)


class TestDihedral:
    def test_coplanar_is_zero(self):
        mesh = two_triangle_mesh()
        theta = dihedral_angles(mesh.vertices, mesh.edge_stencils)
        assert theta[0] == 0.0

    def test_orthogonal_fold(self):
        mesh = two_triangle_mesh(fold_angle=np.pi / 2)
        theta = dihedral_angles(mesh.vertices, mesh.edge_stencils)
        assert abs(theta[0]) == pytest.approx(np.pi / 2, abs=1e-10)

    @pytest.mark.parametrize("phi", [0.3, -0.45, 1.2])
    def test_known_rotation(self, phi):
        # DERIVED oracle: fold constructed by explicit rotation about the edge
        mesh = two_triangle_mesh(fold_angle=phi)
        theta = dihedral_angles(mesh.vertices, mesh.edge_stencils)
        assert abs(theta[0]) == pytest.approx(abs(phi), abs=1e-10)

    def test_rigid_motion_invariance(self, roof5):
        mesh = roof5.mesh
        theta = dihedral_angles(mesh.vertices, mesh.edge_stencils)
        ang = 0.37
        rot = np.array([[np.cos(ang), -np.sin(ang), 0.0],
                        [np.sin(ang), np.cos(ang), 0.0],
                        [0.0, 0.0, 1.0]])
        tilt = np.array([[1.0, 0.0, 0.0],
                         [0.0, np.cos(0.5), -np.sin(0.5)],
                         [0.0, np.sin(0.5), np.cos(0.5)]])
        moved = mesh.vertices @ (tilt @ rot).T + np.array([2.0, -7.0, 4.0])
        theta2 = dihedral_angles(moved, mesh.edge_stencils)
        assert np.allclose(theta, theta2, atol=1e-10)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(4)
        mesh = two_triangle_mesh(fold_angle=0.6)
        st = mesh.edge_stencils
        for _ in range(3):
            pos = mesh.vertices + 0.05 * rng.standard_normal(mesh.vertices.shape)
            grad = dihedral_angle_gradients(pos, st)[0]
            h = 1e-6
            for v in range(4):
                for c in range(3):
                    plus, minus = pos.copy(), pos.copy()
                    plus[st[0, v], c] += h
                    minus[st[0, v], c] -= h
                    fd = (dihedral_angles(plus, st)[0] - dihedral_angles(minus, st)[0]) / (2 * h)
                    assert grad[v, c] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_gradients_sum_to_zero(self, roof12):
        grads = dihedral_angle_gradients(roof12.mesh.vertices, roof12.mesh.edge_stencils)
        assert np.allclose(grads.sum(axis=1), 0.0, atol=1e-12)


class TestRoofGeometry:
    def test_fills_box(self):
        mesh = make_roof(10, 10, box=(20.0, 20.0, 10.0))
        lo = mesh.vertices.min(axis=0)
        hi = mesh.vertices.max(axis=0)
        assert np.allclose(lo, [0, 0, 0], atol=1e-12)
        assert np.allclose(hi, [20, 20, 10], atol=1e-12)

    def test_deterministic(self):
        a = make_roof(6, 6, seed=3)
        b = make_roof(6, 6, seed=3)
        assert np.array_equal(a.vertices, b.vertices)

    def test_no_degenerate_faces(self, roof12):
        ref = reference_quantities(roof12.mesh)
        assert ref.face_areas.min() > 1e-6
