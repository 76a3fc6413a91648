"""Discrete-shell elasticity: stored energy, its linearization and the state solve.

The stored energy is a per-face neo-Hookean membrane term plus a hinge
bending term on interior edges.  Only the energy and its displacement
gradient are needed in nonlinear form (for verification); equilibrium is
always computed from the linearized model, i.e. from the Hessian of the
stored energy at zero displacement,

    H[u] = sum_t u_t K_t^mem + gamma * sum_e u_e^3 K_e^bend,

with the per-element blocks precomputed once per mesh.  The membrane blocks
are second differences of the analytic element gradient; the bending blocks
are exact rank-one matrices because the hinge energy is a squared angle
change (the angle-curvature term vanishes at the reference).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import FactorizationError, MaterialError, MeshError, SolverError
from .mesh import (ReferenceQuantities, ShellMesh, dihedral_angle_gradients,
                   dihedral_angles)


@dataclass(frozen=True)
class MaterialField:
    """Per-face thickness with its feasibility data.

    ``frozen`` marks faces excluded from optimization (their entries in
    ``values`` are held fixed).  Strict feasibility means every optimized
    thickness lies strictly inside (lower, upper) and the total volume is
    strictly below the cap.
    """

    values: np.ndarray
    lower: float
    upper: float
    volume_cap: float
    frozen: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)
        self.frozen.setflags(write=False)

    @classmethod
    def uniform(cls, mesh: ShellMesh, value: float, lower: float, upper: float,
                volume_cap: float) -> "MaterialField":
        values = np.full(mesh.n_faces, float(value))
        return cls(values=values, lower=lower, upper=upper, volume_cap=volume_cap,
                   frozen=mesh.frozen_faces.copy())

    def volume(self, face_areas: np.ndarray) -> float:
        return float(face_areas @ self.values)

    def validate_strict(self, face_areas: np.ndarray) -> None:
        live = ~self.frozen
        if np.any(self.values[live] <= self.lower):
            t = int(np.flatnonzero(live & (self.values <= self.lower))[0])
            raise MaterialError(f"thickness of face {t} is not strictly above the "
                                f"lower bound {self.lower}")
        if np.any(self.values[live] >= self.upper):
            t = int(np.flatnonzero(live & (self.values >= self.upper))[0])
            raise MaterialError(f"thickness of face {t} is not strictly below the "
                                f"upper bound {self.upper}")
        if self.volume(face_areas) >= self.volume_cap:
            raise MaterialError(f"material volume {self.volume(face_areas):.6g} is not "
                                f"strictly below the cap {self.volume_cap}")
        if np.any(self.values <= 0.0):
            raise MaterialError("thickness must be positive everywhere")

    def with_values(self, values: np.ndarray) -> "MaterialField":
        return MaterialField(values=np.asarray(values, dtype=float), lower=self.lower,
                             upper=self.upper, volume_cap=self.volume_cap,
                             frozen=self.frozen.copy())


def face_metric(positions: np.ndarray, face) -> np.ndarray:
    """Gram matrix of the two edge vectors spanning the face."""
    p = positions[np.asarray(face)]
    d = np.column_stack([p[1] - p[0], p[2] - p[0]])
    g = d.T @ d
    if np.linalg.det(g) <= (2 * 1e-12) ** 2:
        raise MeshError("singular face metric (degenerate face)")
    return g


def cauchy_green(mesh: ShellMesh, y: np.ndarray, t: int) -> np.ndarray:
    """Pulled-back metric ratio of face t under displacement y."""
    ref = face_metric(mesh.vertices, mesh.faces[t])
    cur = face_metric(mesh.vertices + y.reshape(-1, 3), mesh.faces[t])
    a = np.linalg.solve(ref, cur)
    if np.linalg.det(a) <= 0.0:
        raise MaterialError(f"inverted element at face {t}")
    return a


def membrane_density(a: np.ndarray, mu: float = 1.0, lam: float = 1.0) -> float:
    """Neo-Hookean areal energy density of a 2x2 strain tensor.

    The log-term coefficient is chosen so the reference is stress-free:
    the value and the derivative both vanish at the identity, and the
    quadratic expansion is the planar isotropic model with moduli (mu, lam).
    """
    det = float(np.linalg.det(a))
    if det <= 0.0:
        raise MaterialError("strain tensor with non-positive determinant")
    c = mu / 2.0 + lam / 4.0
    return float(mu / 2.0 * np.trace(a) + lam / 4.0 * det - c * np.log(det)
                 - mu - lam / 4.0)


def _face_corners(mesh: ShellMesh, y: np.ndarray) -> np.ndarray:
    pos = mesh.vertices + y.reshape(-1, 3)
    return pos[mesh.faces]


def _membrane_batch(corners: np.ndarray, ginv: np.ndarray, mu: float, lam: float,
                    want_grad: bool):
    """Vectorized density and displacement gradient over all faces.

    corners : (T, 3, 3) current positions of the face corners
    ginv    : (T, 2, 2) inverses of the reference metrics
    Returns (density (T,), grad (T, 3, 3) or None); grad rows follow the
    corner order and exclude the a_t * u_t weights.
    """
    d = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]], axis=2)
    g = np.einsum("tia,tib->tab", d, d)
    a = np.einsum("tab,tbc->tac", ginv, g)
    det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] * a[:, 1, 0]
    if np.any(det <= 0.0):
        t = int(np.argmin(det))
        raise MaterialError(f"inverted element at face {t} (det {det[t]:.3e})")
    c = mu / 2.0 + lam / 4.0
    dens = mu / 2.0 * (a[:, 0, 0] + a[:, 1, 1]) + lam / 4.0 * det \
        - c * np.log(det) - mu - lam / 4.0
    if not want_grad:
        return dens, None
    # dW/dA, then chain through A = ginv G and G = D^T D
    inv_at = np.empty_like(a)
    inv_at[:, 0, 0] = a[:, 1, 1]
    inv_at[:, 1, 1] = a[:, 0, 0]
    inv_at[:, 0, 1] = -a[:, 1, 0]
    inv_at[:, 1, 0] = -a[:, 0, 1]
    inv_at /= det[:, None, None]
    p = (lam / 4.0 * det - c)[:, None, None] * inv_at
    p[:, 0, 0] += mu / 2.0
    p[:, 1, 1] += mu / 2.0
    s = np.einsum("tab,tbc->tac", ginv, p)
    dwdd = np.einsum("tia,tab->tib", d, s + s.transpose(0, 2, 1))
    grad = np.empty_like(corners)
    grad[:, 1] = dwdd[:, :, 0]
    grad[:, 2] = dwdd[:, :, 1]
    grad[:, 0] = -grad[:, 1] - grad[:, 2]
    return dens, grad


def _reference_ginv(mesh: ShellMesh) -> np.ndarray:
    corners = mesh.vertices[mesh.faces]
    d = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]], axis=2)
    g = np.einsum("tia,tib->tab", d, d)
    det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
    if np.any(det <= (2 * 1e-12) ** 2):
        raise MeshError("degenerate reference face")
    ginv = np.empty_like(g)
    ginv[:, 0, 0] = g[:, 1, 1]
    ginv[:, 1, 1] = g[:, 0, 0]
    ginv[:, 0, 1] = -g[:, 0, 1]
    ginv[:, 1, 0] = -g[:, 1, 0]
    return ginv / det[:, None, None]


def membrane_energy(mesh: ShellMesh, ref: ReferenceQuantities, u: np.ndarray,
                    y: np.ndarray, mu: float = 1.0, lam: float = 1.0) -> float:
    dens, _ = _membrane_batch(_face_corners(mesh, y), _reference_ginv(mesh), mu, lam, False)
    return float(np.sum(ref.face_areas * u * dens))


def bending_energy(mesh: ShellMesh, ref: ReferenceQuantities, u: np.ndarray,
                   y: np.ndarray, gamma: float = 1.0) -> float:
    if len(mesh.interior_edges) == 0:
        return 0.0
    theta_ref = dihedral_angles(mesh.vertices, mesh.edge_stencils)
    theta = dihedral_angles(mesh.vertices + y.reshape(-1, 3), mesh.edge_stencils)
    pairs = mesh.edge_faces[mesh.interior_edges]
    u_e = 0.5 * (u[pairs[:, 0]] + u[pairs[:, 1]])
    lengths = ref.edge_lengths[mesh.interior_edges]
    return float(gamma * np.sum(u_e ** 3 * (theta - theta_ref) ** 2
                                / ref.edge_areas * lengths ** 2))


def total_energy(mesh: ShellMesh, ref: ReferenceQuantities, u: np.ndarray,
                 y: np.ndarray, mu: float = 1.0, lam: float = 1.0,
                 gamma: float = 1.0) -> float:
    """Stored energy: membrane plus bending."""
    return membrane_energy(mesh, ref, u, y, mu, lam) + bending_energy(mesh, ref, u, y, gamma)


def free_energy(mesh: ShellMesh, ref: ReferenceQuantities, u: np.ndarray,
                f: np.ndarray, y: np.ndarray, mu: float = 1.0, lam: float = 1.0,
                gamma: float = 1.0) -> float:
    """Stored energy minus the load potential f^T M y."""
    mass = assemble_mass(mesh, ref)
    return total_energy(mesh, ref, u, y, mu, lam, gamma) - float(f @ (mass * y))


def energy_gradient(mesh: ShellMesh, ref: ReferenceQuantities, u: np.ndarray,
                    y: np.ndarray, mu: float = 1.0, lam: float = 1.0,
                    gamma: float = 1.0) -> np.ndarray:
    """Analytic d(stored energy)/dy, shape (3V,).  Zero at y = 0."""
    _, grad = _membrane_batch(_face_corners(mesh, y), _reference_ginv(mesh), mu, lam, True)
    out = np.zeros(3 * mesh.n_vertices)
    weighted = grad * (ref.face_areas * u)[:, None, None]
    np.add.at(out.reshape(-1, 3), mesh.faces.ravel(), weighted.reshape(-1, 3))
    if len(mesh.interior_edges):
        pos = mesh.vertices + y.reshape(-1, 3)
        theta_ref = dihedral_angles(mesh.vertices, mesh.edge_stencils)
        theta = dihedral_angles(pos, mesh.edge_stencils)
        dtheta = dihedral_angle_gradients(pos, mesh.edge_stencils)
        pairs = mesh.edge_faces[mesh.interior_edges]
        u_e = 0.5 * (u[pairs[:, 0]] + u[pairs[:, 1]])
        lengths = ref.edge_lengths[mesh.interior_edges]
        coef = gamma * u_e ** 3 * 2.0 * (theta - theta_ref) * lengths ** 2 / ref.edge_areas
        np.add.at(out.reshape(-1, 3), mesh.edge_stencils.ravel(),
                  (coef[:, None, None] * dtheta).reshape(-1, 3))
    return out


def assemble_mass(mesh: ShellMesh, ref: ReferenceQuantities) -> np.ndarray:
    """Diagonal of the lumped mass matrix: a_v repeated for x, y, z."""
    return np.repeat(ref.vertex_areas, 3)


@dataclass(frozen=True)
class ElasticComponents:
    """Thickness-independent stiffness blocks plus the DOF bookkeeping.

    H[u] is assembled as u_t-weighted membrane blocks plus u_e^3-weighted
    bending blocks, restricted to the free (non-Dirichlet) DOFs.
    """

    mesh: ShellMesh
    ref: ReferenceQuantities
    mu: float
    lam: float
    gamma: float
    membrane_blocks: np.ndarray   # (T, 9, 9)
    face_dofs: np.ndarray         # (T, 9) global dof ids
    bend_vectors: np.ndarray      # (Ei, 12); K_e^bend = outer(g_e, g_e)
    edge_dofs: np.ndarray         # (Ei, 12) global dof ids
    edge_face_pairs: np.ndarray   # (Ei, 2) adjacent faces
    mass: np.ndarray              # (3V,) diagonal entries
    free_dofs: np.ndarray         # (F,) kept global dof ids
    full_to_reduced: np.ndarray   # (3V,) reduced index or -1
    _rows: np.ndarray
    _cols: np.ndarray
    _keep: np.ndarray

    @property
    def n_reduced(self) -> int:
        return len(self.free_dofs)

    def reduce(self, vec: np.ndarray) -> np.ndarray:
        return vec[..., self.free_dofs]

    def expand(self, reduced: np.ndarray) -> np.ndarray:
        out = np.zeros(reduced.shape[:-1] + (3 * self.mesh.n_vertices,))
        out[..., self.free_dofs] = reduced
        return out

    def edge_thickness(self, u: np.ndarray) -> np.ndarray:
        return 0.5 * (u[self.edge_face_pairs[:, 0]] + u[self.edge_face_pairs[:, 1]])

    def faces_of_edges(self):
        return self.edge_face_pairs


def assemble_components(mesh: ShellMesh, ref: ReferenceQuantities, mu: float = 1.0,
                        lam: float = 1.0, gamma: float = 1.0) -> ElasticComponents:
    """Precompute the per-element second-derivative blocks at zero displacement.

    Membrane blocks come from central differences of the analytic element
    gradient (step 1e-6 times the local edge scale), symmetrized.  Bending
    blocks are the exact outer products of the hinge-angle gradients.
    """
    if not mesh.has_topology:
        raise MeshError("build_topology must run before assemble_components")
    if len(mesh.dirichlet) == 0:
        raise MeshError("select_dirichlet must run before assemble_components")
    ginv = _reference_ginv(mesh)
    corners0 = mesh.vertices[mesh.faces]
    n_faces = mesh.n_faces

    scale = np.sqrt(ref.face_areas)
    blocks = np.empty((n_faces, 9, 9))
    for ld in range(9):
        v, c = divmod(ld, 3)
        h = 1e-6 * scale
        plus = corners0.copy()
        plus[:, v, c] += h
        minus = corners0.copy()
        minus[:, v, c] -= h
        _, gp = _membrane_batch(plus, ginv, mu, lam, True)
        _, gm = _membrane_batch(minus, ginv, mu, lam, True)
        blocks[:, :, ld] = (gp - gm).reshape(n_faces, 9) / (2.0 * h)[:, None]
    blocks *= ref.face_areas[:, None, None]
    blocks = 0.5 * (blocks + blocks.transpose(0, 2, 1))

    grads0 = dihedral_angle_gradients(mesh.vertices, mesh.edge_stencils)
    lengths = ref.edge_lengths[mesh.interior_edges]
    weight = np.sqrt(2.0 * lengths ** 2 / ref.edge_areas)
    bend_vectors = grads0.reshape(len(mesh.interior_edges), 12) * weight[:, None]

    face_dofs = (3 * mesh.faces[:, :, None] + np.arange(3)).reshape(n_faces, 9)
    edge_dofs = (3 * mesh.edge_stencils[:, :, None] + np.arange(3)).reshape(-1, 12)

    full_to_reduced = np.full(3 * mesh.n_vertices, -1, dtype=np.int64)
    clamped = np.zeros(3 * mesh.n_vertices, dtype=bool)
    clamped[(3 * mesh.dirichlet[:, None] + np.arange(3)).ravel()] = True
    free = np.flatnonzero(~clamped)
    full_to_reduced[free] = np.arange(len(free))

    mem_rows = np.broadcast_to(face_dofs[:, :, None], (n_faces, 9, 9)).ravel()
    mem_cols = np.broadcast_to(face_dofs[:, None, :], (n_faces, 9, 9)).ravel()
    ne = len(mesh.interior_edges)
    bend_rows = np.broadcast_to(edge_dofs[:, :, None], (ne, 12, 12)).ravel()
    bend_cols = np.broadcast_to(edge_dofs[:, None, :], (ne, 12, 12)).ravel()
    rows = full_to_reduced[np.concatenate([mem_rows, bend_rows])]
    cols = full_to_reduced[np.concatenate([mem_cols, bend_cols])]
    keep = (rows >= 0) & (cols >= 0)

    return ElasticComponents(
        mesh=mesh, ref=ref, mu=mu, lam=lam, gamma=gamma,
        membrane_blocks=blocks, face_dofs=face_dofs,
        bend_vectors=bend_vectors, edge_dofs=edge_dofs,
        edge_face_pairs=mesh.edge_faces[mesh.interior_edges].copy(),
        mass=assemble_mass(mesh, ref),
        free_dofs=free, full_to_reduced=full_to_reduced,
        _rows=rows[keep], _cols=cols[keep], _keep=keep,
    )


def assemble_h(components: ElasticComponents, u: np.ndarray) -> scipy.sparse.csr_matrix:
    """Stiffness matrix on the free DOFs for the given thickness field."""
    c = components
    mem = (c.membrane_blocks * u[:, None, None]).ravel()
    ue = c.edge_thickness(u)
    bend = (np.einsum("ei,ej->eij", c.bend_vectors, c.bend_vectors)
            * (c.gamma * ue ** 3)[:, None, None]).ravel()
    data = np.concatenate([mem, bend])[c._keep]
    n = c.n_reduced
    h = scipy.sparse.coo_matrix((data, (c._rows, c._cols)), shape=(n, n))
    return h.tocsr()


_PIVOT_RE = re.compile(r"(\d+)-th leading minor")


class SPDFactorization:
    """Cholesky factorization of a symmetric positive-definite matrix.

    Desk-scale implementation: the (sparse) matrix is densified and factored
    with LAPACK, which certifies positive definiteness and reports the
    offending leading minor on failure.  Triangular solves are reentrant, so
    one factorization may serve concurrent threads.
    """

    def __init__(self, matrix):
        dense = matrix.toarray() if scipy.sparse.issparse(matrix) else np.asarray(matrix, dtype=float)
        if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
            raise FactorizationError("matrix must be square")
        try:
            self._chol = scipy.linalg.cho_factor(dense, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            m = _PIVOT_RE.search(str(exc))
            pivot = int(m.group(1)) if m else None
            raise FactorizationError(
                f"matrix is not positive definite (pivot {pivot}); "
                f"check the Dirichlet set and mesh integrity", pivot=pivot) from exc
        self.shape = dense.shape

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        out = scipy.linalg.cho_solve(self._chol, rhs, check_finite=False)
        if not np.all(np.isfinite(out)):
            raise SolverError("non-finite solution from triangular solve")
        return out


def factorize(components: ElasticComponents, u: np.ndarray) -> SPDFactorization:
    return SPDFactorization(assemble_h(components, u))


def solve_state(factorization: SPDFactorization, components: ElasticComponents,
                f: np.ndarray) -> np.ndarray:
    """Equilibrium displacement for load f: solve H y = M f on the free DOFs.

    Returns the full-length displacement with zeros on clamped vertices.
    """
    rhs = components.reduce(components.mass * f)
    return components.expand(factorization.solve(rhs))


def state_operator(components: ElasticComponents, factorization: SPDFactorization):
    """Callable applying H^{-1} on the full DOF layout.

    Accepts a vector or a (3V, k) column stack; clamped DOFs are zeroed in
    the result.  No shared mutable state, safe across threads.
    """
    def solve(rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        sol = factorization.solve(rhs[components.free_dofs])
        out = np.zeros((3 * components.mesh.n_vertices,) + rhs.shape[1:])
        out[components.free_dofs] = sol
        return out
    return solve


def dh_du(components: ElasticComponents, u: np.ndarray, t: int) -> scipy.sparse.csr_matrix:
    """Derivative of H[u] with respect to the thickness of face t (reduced DOFs)."""
    c = components
    if c.mesh.frozen_faces[t]:
        raise MaterialError(f"face {t} is frozen; its thickness is not a design variable")
    rows_l, cols_l, data_l = [], [], []
    r = c.full_to_reduced[c.face_dofs[t]]
    block = c.membrane_blocks[t]
    rr = np.broadcast_to(r[:, None], (9, 9)).ravel()
    cc = np.broadcast_to(r[None, :], (9, 9)).ravel()
    keep = (rr >= 0) & (cc >= 0)
    rows_l.append(rr[keep])
    cols_l.append(cc[keep])
    data_l.append(block.ravel()[keep])

    ue = c.edge_thickness(u)
    adjacent = np.flatnonzero((c.edge_face_pairs == t).any(axis=1))
    for e in adjacent:
        coef = c.gamma * 3.0 * ue[e] ** 2 * 0.5
        g = c.bend_vectors[e]
        re_ = c.full_to_reduced[c.edge_dofs[e]]
        rr = np.broadcast_to(re_[:, None], (12, 12)).ravel()
        cc = np.broadcast_to(re_[None, :], (12, 12)).ravel()
        keep = (rr >= 0) & (cc >= 0)
        rows_l.append(rr[keep])
        cols_l.append(cc[keep])
        data_l.append((coef * np.outer(g, g)).ravel()[keep])

    n = c.n_reduced
    return scipy.sparse.coo_matrix(
        (np.concatenate(data_l), (np.concatenate(rows_l), np.concatenate(cols_l))),
        shape=(n, n)).tocsr()


def dh_contract_pair(components: ElasticComponents, u: np.ndarray, p: np.ndarray,
                     y: np.ndarray) -> np.ndarray:
    """p^T (dH/du_t) y for every face t at once.

    p and y live on the full DOF layout (entries on clamped DOFs are ignored
    because the blocks are restricted to free DOFs during assembly; callers
    pass vectors that already vanish there).
    """
    c = components
    pf = p[c.face_dofs]
    yf = y[c.face_dofs]
    out = np.einsum("ti,tij,tj->t", pf, c.membrane_blocks, yf)
    ue = c.edge_thickness(u)
    gp = np.einsum("ei,ei->e", c.bend_vectors, p[c.edge_dofs])
    gy = np.einsum("ei,ei->e", c.bend_vectors, y[c.edge_dofs])
    edge_term = c.gamma * 1.5 * ue ** 2 * gp * gy
    np.add.at(out, c.edge_face_pairs[:, 0], edge_term)
    np.add.at(out, c.edge_face_pairs[:, 1], edge_term)
    return out


def dh_contract_gram(components: ElasticComponents, u: np.ndarray,
                     basis: np.ndarray) -> np.ndarray:
    """basis^T (dH/du_t) basis for every face t; basis is (3V, d).

    Returns (T, d, d).  Used for the sensitivity of the reduced compliance
    matrix without forming any derivative matrix explicitly.
    """
    c = components
    d = basis.shape[1]
    bf = basis[c.face_dofs]                      # (T, 9, d)
    out = np.einsum("tia,tij,tjb->tab", bf, c.membrane_blocks, bf)
    ue = c.edge_thickness(u)
    gb = np.einsum("ei,eid->ed", c.bend_vectors, basis[c.edge_dofs])   # (Ei, d)
    edge_term = (c.gamma * 1.5 * ue ** 2)[:, None, None] * np.einsum("ea,eb->eab", gb, gb)
    np.add.at(out, c.edge_face_pairs[:, 0], edge_term)
    np.add.at(out, c.edge_face_pairs[:, 1], edge_term)
    return out.reshape(c.mesh.n_faces, d, d)
