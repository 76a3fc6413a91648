"""Triangle surface meshes for discrete shells.

A shell is a triangle mesh with dense, stable vertex/face/edge indexing,
per-element reference quantities (lengths, areas) and a set of clamped
(Dirichlet) vertices.  Everything here is immutable after construction and
safe to share between worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DirichletError, MeshError, ObjParseError

DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class ShellMesh:
    """Triangle mesh with edge topology and clamped-vertex bookkeeping.

    Attributes
    ----------
    vertices : (V, 3) float array
        Reference positions.
    faces : (T, 3) int array
        Vertex index triples, counter-clockwise winding.
    edges : (E, 2) int array
        Unique undirected edges as sorted vertex pairs, lexicographic order.
    edge_faces : (E, 2) int array
        Adjacent face indices per edge; -1 marks a missing (boundary) side.
    interior_edges : (Ei,) int array
        Indices into ``edges`` of the edges with two adjacent faces.
    edge_stencils : (Ei, 4) int array
        Per interior edge the hinge stencil (i, j, k, l): the shared edge
        endpoints and the two opposite vertices.
    dirichlet : (D,) int array
        Clamped vertices, sorted.  Empty until ``select_dirichlet`` ran.
    frozen_faces : (T,) bool array
        Faces whose three vertices are all clamped; their thickness is held
        fixed by the optimizer.
    """

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    edge_faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    interior_edges: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    edge_stencils: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    dirichlet: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    frozen_faces: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        for name in ("vertices", "faces", "edges", "edge_faces",
                     "interior_edges", "edge_stencils", "dirichlet", "frozen_faces"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def has_topology(self) -> bool:
        return self.edges.shape[0] > 0 or self.faces.shape[0] == 0

    def diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))


@dataclass(frozen=True)
class ReferenceQuantities:
    """Lengths and lumped areas of the reference configuration.

    ``edge_areas`` is aligned with ``mesh.interior_edges`` and holds
    (a_t + a_t')/3 for the two faces adjacent to each interior edge.
    ``vertex_areas`` distributes each face area with weight 1/3 to its
    three corners, so vertex_areas.sum() == face_areas.sum().
    """

    edge_lengths: np.ndarray
    face_areas: np.ndarray
    edge_areas: np.ndarray
    vertex_areas: np.ndarray

    def __post_init__(self):
        for name in ("edge_lengths", "face_areas", "edge_areas", "vertex_areas"):
            getattr(self, name).setflags(write=False)


def load_obj(path) -> ShellMesh:
    """Read an ASCII Wavefront OBJ with triangular faces.

    Only ``v`` and ``f`` records are honored; texture/normal indices in face
    records are stripped.  Raises ObjParseError on quads, malformed records
    or out-of-range indices.  Topology is not built yet.
    """
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ObjParseError(f"cannot read mesh {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            tokens = raw.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            tag = tokens[0]
            if tag == "v":
                if len(tokens) < 4:
                    raise ObjParseError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tokens[1:4]])
                except ValueError as exc:
                    raise ObjParseError(f"{path}:{lineno}: bad vertex coordinate") from exc
            elif tag == "f":
                ids = tokens[1:]
                if len(ids) != 3:
                    raise ObjParseError(
                        f"{path}:{lineno}: non-triangular face with {len(ids)} vertices")
                face = []
                for item in ids:
                    head = item.split("/")[0]
                    try:
                        idx = int(head)
                    except ValueError as exc:
                        raise ObjParseError(f"{path}:{lineno}: bad face index {item!r}") from exc
                    if idx <= 0:
                        raise ObjParseError(
                            f"{path}:{lineno}: only positive 1-based indices are supported")
                    face.append(idx - 1)
                faces.append(face)
            # everything else (vn, vt, usemtl, ...) is silently ignored
    vertices = np.asarray(verts, dtype=float).reshape(-1, 3)
    face_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if face_arr.size and face_arr.max() >= len(vertices):
        raise ObjParseError(f"{path}: face references vertex {face_arr.max() + 1} "
                            f"but only {len(vertices)} vertices are defined")
    return ShellMesh(vertices=vertices, faces=face_arr)


def save_obj(mesh: ShellMesh, path, positions: np.ndarray | None = None) -> None:
    """Write the mesh (optionally with replaced positions) as ASCII OBJ."""
    pos = mesh.vertices if positions is None else np.asarray(positions, dtype=float)
    with open(path, "w", encoding="utf-8") as fh:
        for p in pos:
            fh.write(f"v {p[0]:.12g} {p[1]:.12g} {p[2]:.12g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def build_topology(mesh: ShellMesh) -> ShellMesh:
    """Derive the unique edge list, face adjacency and hinge stencils.

    Raises MeshError if an edge is shared by more than two faces.
    """
    faces = mesh.faces
    if faces.size == 0:
        raise MeshError("mesh has no faces")
    # canonical sorted vertex pairs for the three edges of every face
    pair_rows = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pair_rows = np.sort(pair_rows, axis=1)
    face_of_row = np.tile(np.arange(len(faces)), 3)
    edges, inverse = np.unique(pair_rows, axis=0, return_inverse=True)

    counts = np.bincount(inverse, minlength=len(edges))
    if counts.max() > 2:
        bad = int(np.argmax(counts))
        raise MeshError(f"non-manifold edge {tuple(edges[bad])} shared by {counts.max()} faces")

    edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
    # deterministic adjacency order: ascending face index
    order = np.lexsort((face_of_row, inverse))
    sorted_edges = inverse[order]
    sorted_faces = face_of_row[order]
    slot = np.zeros(len(edges), dtype=np.int64)
    for e, f in zip(sorted_edges, sorted_faces):
        edge_faces[e, slot[e]] = f
        slot[e] += 1

    interior = np.flatnonzero(edge_faces[:, 1] >= 0)
    stencils = np.zeros((len(interior), 4), dtype=np.int64)
    for row, e in enumerate(interior):
        i, j = edges[e]
        opp = []
        for f in edge_faces[e]:
            fv = faces[f]
            k = fv[(fv != i) & (fv != j)]
            if len(k) != 1:
                raise MeshError(f"face {f} repeats a vertex of edge {(i, j)}")
            opp.append(k[0])
        stencils[row] = (i, j, opp[0], opp[1])

    return ShellMesh(
        vertices=mesh.vertices,
        faces=faces,
        edges=edges,
        edge_faces=edge_faces,
        interior_edges=interior,
        edge_stencils=stencils,
        dirichlet=mesh.dirichlet,
        frozen_faces=mesh.frozen_faces if mesh.frozen_faces.size else np.zeros(len(faces), dtype=bool),
    )


def face_area_normals(positions: np.ndarray, faces: np.ndarray):
    """Areas and unit normals per face; raises MeshError on degenerate faces."""
    p0 = positions[faces[:, 0]]
    cross = np.cross(positions[faces[:, 1]] - p0, positions[faces[:, 2]] - p0)
    doubled = np.linalg.norm(cross, axis=1)
    areas = 0.5 * doubled
    if np.any(areas < DEGENERATE_AREA):
        bad = int(np.argmin(areas))
        raise MeshError(f"degenerate face {bad}: area {areas[bad]:.3e} below {DEGENERATE_AREA}")
    return areas, cross / doubled[:, None]


def reference_quantities(mesh: ShellMesh) -> ReferenceQuantities:
    """Edge lengths, face areas, interior-edge areas and lumped vertex areas."""
    if not mesh.has_topology:
        raise MeshError("build_topology must run before reference_quantities")
    areas, _ = face_area_normals(mesh.vertices, mesh.faces)
    evec = mesh.vertices[mesh.edges[:, 1]] - mesh.vertices[mesh.edges[:, 0]]
    lengths = np.linalg.norm(evec, axis=1)

    adj = mesh.edge_faces[mesh.interior_edges]
    edge_areas = (areas[adj[:, 0]] + areas[adj[:, 1]]) / 3.0

    vertex_areas = np.zeros(mesh.n_vertices)
    np.add.at(vertex_areas, mesh.faces.ravel(), np.repeat(areas / 3.0, 3))
    return ReferenceQuantities(
        edge_lengths=lengths,
        face_areas=areas,
        edge_areas=edge_areas,
        vertex_areas=vertex_areas,
    )


def select_dirichlet(mesh: ShellMesh, indices=None, z_threshold: float | None = None) -> ShellMesh:
    """Clamp vertices either from an explicit list or by z <= z_min + threshold.

    At least three non-collinear vertices are required (otherwise the reduced
    stiffness matrix keeps rigid-body modes).  Faces whose three vertices are
    all clamped are flagged frozen.
    """
    if (indices is None) == (z_threshold is None):
        raise DirichletError("give exactly one of indices or z_threshold")
    if z_threshold is not None:
        z = mesh.vertices[:, 2]
        selected = np.flatnonzero(z <= z.min() + z_threshold)
    else:
        selected = np.unique(np.asarray(indices, dtype=np.int64))
        if selected.size and (selected.min() < 0 or selected.max() >= mesh.n_vertices):
            raise DirichletError("dirichlet index out of range")
    if len(selected) < 3:
        raise DirichletError(f"need at least 3 dirichlet vertices, got {len(selected)}")
    pts = mesh.vertices[selected]
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] <= 1e-12 * max(1.0, svals[0]):
        raise DirichletError("dirichlet vertices are collinear")

    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[selected] = True
    frozen = mask[mesh.faces].all(axis=1)
    return ShellMesh(
        vertices=mesh.vertices,
        faces=mesh.faces,
        edges=mesh.edges,
        edge_faces=mesh.edge_faces,
        interior_edges=mesh.interior_edges,
        edge_stencils=mesh.edge_stencils,
        dirichlet=selected,
        frozen_faces=frozen,
    )


def vertex_normals(mesh: ShellMesh) -> np.ndarray:
    """Unit vertex normals as normalized averages of adjacent face normals."""
    if not mesh.has_topology:
        raise MeshError("build_topology must run before vertex_normals")
    _, fnormals = face_area_normals(mesh.vertices, mesh.faces)
    acc = np.zeros((mesh.n_vertices, 3))
    np.add.at(acc, mesh.faces.ravel(), np.repeat(fnormals, 3, axis=0))
    norms = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise MeshError(f"adjacent face normals cancel at vertex {bad[0]}")
    return acc / norms[:, None]


def dihedral_angles(positions: np.ndarray, stencils: np.ndarray) -> np.ndarray:
    """Signed hinge angles for the given (i, j, k, l) stencils.

    The magnitude equals arccos of the (clamped) dot product of the two face
    normals; the sign comes from the orientation of the normal pair around
    the shared edge, so the angle is zero (not just extremal) on coplanar
    consistently-oriented face pairs and depends smoothly on the positions
    there.  Invariant under rigid motions.
    """
    xi = positions[stencils[:, 0]]
    xj = positions[stencils[:, 1]]
    xk = positions[stencils[:, 2]]
    xl = positions[stencils[:, 3]]
    e0 = xj - xi
    n1 = np.cross(e0, xk - xi)
    n2 = np.cross(xi - xj, xl - xj)
    l1 = np.linalg.norm(n1, axis=1)
    l2 = np.linalg.norm(n2, axis=1)
    le = np.linalg.norm(e0, axis=1)
    if np.any(l1 < 2 * DEGENERATE_AREA) or np.any(l2 < 2 * DEGENERATE_AREA):
        raise MeshError("degenerate face while evaluating a hinge angle")
    cos = np.clip(np.einsum("ij,ij->i", n1, n2) / (l1 * l2), -1.0, 1.0)
    sin = np.einsum("ij,ij->i", np.cross(n1, n2), e0) / (l1 * l2 * le)
    return np.arctan2(sin, cos)


def dihedral_angle_gradients(positions: np.ndarray, stencils: np.ndarray) -> np.ndarray:
    """d(angle)/d(position) for each hinge, shape (Ei, 4, 3).

    Rows follow the stencil order (i, j, k, l).  The rows sum to zero
    (translation invariance); correctness against finite differences is
    pinned in the test suite.
    """
    xi = positions[stencils[:, 0]]
    xj = positions[stencils[:, 1]]
    xk = positions[stencils[:, 2]]
    xl = positions[stencils[:, 3]]
    e0 = xj - xi
    n1 = np.cross(e0, xk - xi)
    n2 = np.cross(xi - xj, xl - xj)
    sq1 = np.einsum("ij,ij->i", n1, n1)
    sq2 = np.einsum("ij,ij->i", n2, n2)
    le = np.linalg.norm(e0, axis=1)
    if np.any(sq1 < (2 * DEGENERATE_AREA) ** 2) or np.any(sq2 < (2 * DEGENERATE_AREA) ** 2):
        raise MeshError("degenerate face while differentiating a hinge angle")
    a1 = n1 / sq1[:, None]
    a2 = n2 / sq2[:, None]

    grads = np.empty((len(stencils), 4, 3))
    grads[:, 2] = -le[:, None] * a1
    grads[:, 3] = -le[:, None] * a2
    cik = np.einsum("ij,ij->i", e0, xk - xi) / le
    cjk = np.einsum("ij,ij->i", e0, xk - xj) / le
    cil = np.einsum("ij,ij->i", e0, xl - xi) / le
    cjl = np.einsum("ij,ij->i", e0, xl - xj) / le
    grads[:, 0] = -cjk[:, None] * a1 - cjl[:, None] * a2
    grads[:, 1] = cik[:, None] * a1 + cil[:, None] * a2
    return grads


def make_roof(nx: int = 12, ny: int = 12, box=(20.0, 20.0, 10.0),
              corner_flat: float = 0.35, jitter: float = 0.25, seed: int = 7) -> ShellMesh:
    """Curved roof test geometry: four boundary arcs, central plateau,
    flat corner patches resting on the ground plane.

    The surface fills ``box`` (default 20 x 20 x 10).  Interior grid nodes
    are jittered in-plane with a fixed seed and all quads are split along
    the same diagonal, so the triangulation is deliberately asymmetric.
    Topology is already built on the returned mesh; Dirichlet selection
    (e.g. z_threshold=0.5) is left to the caller.
    """
    lx, ly, lz = box
    gx, gy = np.meshgrid(np.linspace(0.0, lx, nx + 1), np.linspace(0.0, ly, ny + 1),
                         indexing="ij")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    dx = rng.uniform(-jitter, jitter, size=gx.shape) * (lx / nx)
    dy = rng.uniform(-jitter, jitter, size=gy.shape) * (ly / ny)
    interior = np.zeros(gx.shape, dtype=bool)
    interior[1:-1, 1:-1] = True
    gx = gx + np.where(interior, dx, 0.0)
    gy = gy + np.where(interior, dy, 0.0)

    s = 2.0 * gx / lx - 1.0
    t = 2.0 * gy / ly - 1.0
    z = lz * np.maximum(0.0, 1.0 - s * s * t * t - corner_flat) / (1.0 - corner_flat)

    verts = np.column_stack([gx.ravel(), gy.ravel(), z.ravel()])
    vid = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a = vid[:-1, :-1].ravel()
    b = vid[1:, :-1].ravel()
    c = vid[1:, 1:].ravel()
    d = vid[:-1, 1:].ravel()
    faces = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return build_topology(ShellMesh(vertices=verts, faces=faces.astype(np.int64)))
