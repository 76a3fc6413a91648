"""Worst-case load search: barrier-smoothed compliance maximization.

Admissible loads are low-dimensional combinations f = B F of fixed basis
fields, with smooth inequality constraints on the coefficients F.  The
smoothed objective augments the compliance quadratic F^T S F with weighted
log-barrier terms and is maximized by a safeguarded Newton ascent with
Armijo backtracking.  The compliance quadratic is convex, so maximizers sit
near the constraint boundary; with the default cylinder the solution hugs
the rim with maximal vertical component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BarrierDomainError, MaterialError
from .elastic import ElasticComponents, SPDFactorization, assemble_h, state_operator
from .mesh import ShellMesh

ARMIJO_SLOPE = 1e-4
ARMIJO_BACKTRACK = 0.5
ARMIJO_MAX_HALVINGS = 40


@dataclass(frozen=True)
class CylinderConstraints:
    """Horizontal-magnitude disc times a vertical interval, in coefficient
    space (F1, F2, F3): F1^2 + F2^2 <= max_xy^2 and 0 <= F3 <= max_z."""

    max_xy: float
    max_z: float

    dim = 3

    def values(self, f: np.ndarray) -> np.ndarray:
        return np.array([
            self.max_xy ** 2 - f[0] ** 2 - f[1] ** 2,
            f[2],
            self.max_z - f[2],
        ])

    def gradients(self, f: np.ndarray) -> np.ndarray:
        return np.array([
            [-2.0 * f[0], -2.0 * f[1], 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ])

    def hessians(self, f: np.ndarray) -> np.ndarray:
        h = np.zeros((3, 3, 3))
        h[0, 0, 0] = -2.0
        h[0, 1, 1] = -2.0
        return h

    def seeds(self) -> np.ndarray:
        """Deterministic multistart points: four horizontal directions at two
        heights, plus the cylinder center."""
        r = 0.9 * self.max_xy
        pts = [[dx * r, dy * r, fz * self.max_z]
               for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
               for fz in (0.1, 0.9)]
        pts.append([0.0, 0.0, 0.5 * self.max_z])
        return np.array(pts)

    def pull_inside(self, f: np.ndarray, gap_factor: float = 10.0) -> np.ndarray:
        """Back a near-boundary point off the walls by enlarging small
        constraint gaps (gap -> gap_factor * gap, capped), so a restarted
        ascent does not begin wedged against the barrier where Newton
        crawls.  Gaps below 1e-6 of the constraint scale are treated as
        fully collapsed (the barrier Hessian is numerically singular there)
        and reopened to that scale.  Comfortably interior points are
        returned unchanged."""
        out = f.copy()
        gap = self.max_xy ** 2 - f[0] ** 2 - f[1] ** 2
        target = min(gap_factor * max(gap, 1e-6 * self.max_xy ** 2),
                     0.5 * self.max_xy ** 2)
        radius_sq = f[0] ** 2 + f[1] ** 2
        if gap < target and radius_sq > 0.0:
            out[:2] *= np.sqrt((self.max_xy ** 2 - target) / radius_sq)
        bottom = min(gap_factor * max(f[2], 1e-6 * self.max_z), 0.25 * self.max_z)
        if out[2] < bottom:
            out[2] = bottom
        top = min(gap_factor * max(self.max_z - f[2], 1e-6 * self.max_z),
                  0.25 * self.max_z)
        if self.max_z - out[2] < top:
            out[2] = self.max_z - top
        return out


@dataclass(frozen=True)
class BoxConstraints:
    """Axis-aligned box in coefficient space, one pair of constraints per axis."""

    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.lower)

    def values(self, f: np.ndarray) -> np.ndarray:
        return np.concatenate([f - self.lower, self.upper - f])

    def gradients(self, f: np.ndarray) -> np.ndarray:
        eye = np.eye(self.dim)
        return np.concatenate([eye, -eye])

    def hessians(self, f: np.ndarray) -> np.ndarray:
        return np.zeros((2 * self.dim, self.dim, self.dim))

    def seeds(self) -> np.ndarray:
        mid = 0.5 * (self.lower + self.upper)
        span = self.upper - self.lower
        pts = [mid]
        for axis in range(self.dim):
            for sgn in (-1.0, 1.0):
                p = mid.copy()
                p[axis] += sgn * 0.45 * span[axis]
                pts.append(p)
        return np.array(pts)

    def pull_inside(self, f: np.ndarray, gap_factor: float = 10.0) -> np.ndarray:
        out = f.copy()
        span = self.upper - self.lower
        for i in range(self.dim):
            lo_gap = min(gap_factor * max(f[i] - self.lower[i], 1e-6 * span[i]),
                         0.25 * span[i])
            hi_gap = min(gap_factor * max(self.upper[i] - f[i], 1e-6 * span[i]),
                         0.25 * span[i])
            out[i] = min(max(f[i], self.lower[i] + lo_gap), self.upper[i] - hi_gap)
        return out


@dataclass(frozen=True)
class ForceModel:
    """Load basis plus coefficient constraints and the barrier weight."""

    basis: np.ndarray
    constraints: object
    barrier_weight: float = 1e-4

    def __post_init__(self):
        self.basis.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


@dataclass
class FollowerResult:
    coefficients: np.ndarray      # maximizing F
    force: np.ndarray | None      # B F on the full DOF layout (None for bare ascent)
    smoothed_value: float         # compliance plus barrier terms
    compliance: float             # F^T S F
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    gradient_norm: float = np.nan


def build_force_basis(mesh: ShellMesh, normals: np.ndarray,
                      max_xy: float = 0.0015, max_z: float | None = None,
                      barrier_weight: float = 1e-4) -> ForceModel:
    """Three basis load fields from the vertex normals.

    Column 0/1: horizontal wind along +X/+Y, per-vertex magnitude equal to
    the absolute normal alignment with that axis.  Column 2: downward
    gravity-type load with magnitude equal to the absolute vertical normal
    alignment.  Rows of clamped vertices are zeroed since those DOFs carry
    no displacement.
    """
    if max_z is None:
        max_z = 2.0 * max_xy
    nv = mesh.n_vertices
    basis = np.zeros((3 * nv, 3))
    basis[0::3, 0] = np.abs(normals[:, 0])
    basis[1::3, 1] = np.abs(normals[:, 1])
    basis[2::3, 2] = -np.abs(normals[:, 2])
    if len(mesh.dirichlet):
        rows = (3 * mesh.dirichlet[:, None] + np.arange(3)).ravel()
        basis[rows] = 0.0
    return ForceModel(basis=basis,
                      constraints=CylinderConstraints(max_xy=max_xy, max_z=max_z),
                      barrier_weight=barrier_weight)


def reduce_compliance(solve, mass: np.ndarray, basis: np.ndarray):
    """Project the compliance quadratic onto the load basis.

    solve(rhs) must apply H^{-1} to stacked columns.  Returns (S, Y) with
    S = (MB)^T H^{-1} (MB) symmetrized and Y = H^{-1} M B the per-column
    equilibrium states, so y[u, BF] = Y F.
    """
    g = mass[:, None] * basis
    states = solve(g)
    s = g.T @ states
    return 0.5 * (s + s.T), states


def smoothed_objective(f: np.ndarray, s_matrix: np.ndarray, model: ForceModel):
    """Value, gradient and Hessian of F^T S F plus the weighted log barrier.

    Raises BarrierDomainError outside the strictly feasible region; the line
    search treats that exactly like an insufficient-increase step.
    """
    q = model.constraints.values(f)
    if np.any(q <= 0.0):
        raise BarrierDomainError(f"constraint value {q.min():.3e} <= 0")
    sf = s_matrix @ f
    alpha = model.barrier_weight
    value = float(f @ sf) + alpha * float(np.sum(np.log(q)))
    grads = model.constraints.gradients(f)
    hesses = model.constraints.hessians(f)
    grad = 2.0 * sf + alpha * np.sum(grads / q[:, None], axis=0)
    hess = 2.0 * s_matrix + alpha * np.einsum(
        "k,kij->ij", 1.0 / q ** 2,
        q[:, None, None] * hesses - np.einsum("ki,kj->kij", grads, grads))
    return value, grad, hess


def _residual_polish(f, state, s_matrix, model, tol, max_steps=8):
    """Newton steps on the stationarity residual itself.

    The Armijo ascent cannot resolve the optimizer once value increments
    fall below roundoff, but the gradient still carries ~8 digits there;
    driving its norm down directly recovers the stationary point.  Steps
    are only taken while they shrink the residual and stay feasible.
    """
    value, grad, hess = state
    gnorm = float(np.linalg.norm(grad))
    for _ in range(max_steps):
        if gnorm <= tol:
            break
        try:
            delta = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        tau = 1.0
        improved = None
        for _ in range(ARMIJO_MAX_HALVINGS):
            try:
                cand = smoothed_objective(f + tau * delta, s_matrix, model)
            except BarrierDomainError:
                tau *= ARMIJO_BACKTRACK
                continue
            cand_norm = float(np.linalg.norm(cand[1]))
            if cand_norm < gnorm:
                improved = (f + tau * delta, cand, cand_norm)
                break
            tau *= ARMIJO_BACKTRACK
        if improved is None:
            break
        f, (value, grad, hess), gnorm = improved
    return f, (value, grad, hess), gnorm


def _ascent_direction(grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """Newton step when it ascends, otherwise a negative-definite shift of
    the Hessian, otherwise plain gradient."""
    try:
        p = np.linalg.solve(hess, -grad)
        if grad @ p > 0.0:
            return p
    except np.linalg.LinAlgError:
        pass
    try:
        lam_max = float(np.linalg.eigvalsh(hess).max())
        shift = hess - (max(lam_max, 0.0) + 1e-8 + 1e-8 * abs(lam_max)) * np.eye(len(grad))
        p = np.linalg.solve(shift, -grad)
        if grad @ p > 0.0:
            return p
    except np.linalg.LinAlgError:
        pass
    return grad.copy()


def newton_ascent(s_matrix: np.ndarray, model: ForceModel, f0: np.ndarray,
                  max_iter: int = 100, grad_tol: float = 1e-9,
                  rel_grad_tol: float = 1e-9) -> FollowerResult:
    """Maximize the smoothed objective from a strictly feasible start.

    The smoothed value is nondecreasing across iterations (only Armijo
    accepted steps move the iterate) and every iterate stays strictly
    feasible.  Converged means: gradient norm below grad_tol, or below
    rel_grad_tol times the compliance gradient magnitude |2 S F| (the
    absolute tolerance alone is unreachable in double precision once that
    scale exceeds ~1e7 times it), or the line search stagnated with a
    predicted ascent below the rounding error of the objective value, i.e.
    no representable progress remains.  Running out of iterations is
    reported in the flag, not raised.
    """
    f = np.asarray(f0, dtype=float).copy()
    value, grad, hess = smoothed_objective(f, s_matrix, model)
    trace = [value]
    converged = False
    iterations = 0
    tol = grad_tol
    for iterations in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(grad))
        # at a barrier-balanced optimum the compliance gradient 2 S F is
        # cancelled by the barrier term, so the attainable residual scales
        # with its magnitude, not with an absolute constant
        tol = max(grad_tol, rel_grad_tol * float(np.linalg.norm(2.0 * s_matrix @ f)))
        if gnorm <= tol:
            converged = True
            iterations -= 1
            break
        p = _ascent_direction(grad, hess)
        slope = float(grad @ p)
        tau = 1.0
        accepted = None
        for _ in range(ARMIJO_MAX_HALVINGS):
            try:
                cand = smoothed_objective(f + tau * p, s_matrix, model)
            except BarrierDomainError:
                tau *= ARMIJO_BACKTRACK
                continue
            # the strict increase guard keeps roundoff-level "improvements"
            # from being accepted forever without any actual progress
            if cand[0] >= value + ARMIJO_SLOPE * tau * slope and cand[0] > value:
                accepted = cand
                break
            tau *= ARMIJO_BACKTRACK
        if accepted is None:
            # stagnation: accept as converged when the Newton model cannot
            # promise an increase distinguishable from value roundoff
            if 0.5 * slope <= 64.0 * np.finfo(float).eps * (1.0 + abs(value)):
                converged = True
            break
        f = f + tau * p
        value, grad, hess = accepted
        trace.append(value)
    else:
        iterations = max_iter
    gnorm = float(np.linalg.norm(grad))
    if gnorm > tol and not converged:
        # the value-based search stalled off tolerance (it crawls when the
        # iterate is wedged against a barrier wall); polish the stationarity
        # residual directly, rejecting any escape from the current basin
        f2, (value2, grad2, hess2), gnorm2 = _residual_polish(
            f, (value, grad, hess), s_matrix, model, tol)
        if value2 >= value - 64.0 * np.finfo(float).eps * (1.0 + abs(value)):
            f, value, grad, gnorm = f2, value2, grad2, gnorm2
    if gnorm <= tol:
        converged = True
    return FollowerResult(
        coefficients=f, force=None, smoothed_value=value,
        compliance=float(f @ (s_matrix @ f)), iterations=iterations,
        converged=converged, trace=trace, gradient_norm=gnorm)


def solve_follower(components: ElasticComponents, u: np.ndarray, model: ForceModel,
                   seeds: np.ndarray | None = None, max_iter: int = 100,
                   grad_tol: float = 1e-9, rel_grad_tol: float = 1e-9,
                   factorization: SPDFactorization | None = None) -> FollowerResult:
    """Full worst-case load solve for the thickness field u.

    Assembles and factors H[u], projects the compliance quadratic onto the
    basis, runs the ascent from every seed and returns the best result.
    A cached factorization for this exact u may be passed in.
    """
    if np.any(u <= 0.0):
        raise MaterialError("thickness must be positive for an SPD stiffness matrix")
    if factorization is None:
        factorization = SPDFactorization(assemble_h(components, u))
    solve = state_operator(components, factorization)
    s_matrix, _ = reduce_compliance(solve, components.mass, model.basis)
    if seeds is None:
        seeds = model.constraints.seeds()
    best = None
    for f0 in np.atleast_2d(seeds):
        result = newton_ascent(s_matrix, model, f0, max_iter=max_iter,
                               grad_tol=grad_tol, rel_grad_tol=rel_grad_tol)
        if best is None or result.smoothed_value > best.smoothed_value:
            best = result
    if not best.converged:
        # stagnated ascents sit wedged against a constraint wall; a restart
        # slightly inside typically converges in a few Newton steps
        pull = getattr(model.constraints, "pull_inside", None)
        if pull is not None:
            retry = newton_ascent(s_matrix, model, pull(best.coefficients),
                                  max_iter=max_iter, grad_tol=grad_tol,
                                  rel_grad_tol=rel_grad_tol)
            if retry.converged or retry.smoothed_value > best.smoothed_value:
                best = retry
    best.force = model.basis @ best.coefficients
    return best
