"""Pessimistic bilevel machinery over a family of SPD operators.

The lower level maximizes the compliance quadratic q(u, f) = (Mf)^T H[u]^{-1} (Mf)
over a bounded polyhedron of admissible loads.  Strict convexity puts every
maximizer at an extreme point, so the exact optimal value, the optimal set
and the upper-level worst-case cost are all computable by enumeration.  The
slack-relaxed worst case (hedging against nearly optimal lower-level
responses) is evaluated by brute force on a grid; that is the honest
desk-scale oracle since the relaxed set is open.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import SolverError

ARGMAX_REL_TOL = 1e-9


@dataclass(frozen=True)
class QuadraticLowerLevel:
    """Lower-level problem data.

    solve_h(u, rhs) applies H[u]^{-1}; ``mass`` is the SPD weighting matrix
    (2-D array, or 1-D for a diagonal).  ``extreme_points`` lists the
    vertices of the admissible polyhedron, and ``box`` gives its axis-aligned
    hull (lower, upper) used for grid enumeration of the relaxed problem.
    ``cost`` is the leader's objective J(u, f).
    """

    solve_h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    mass: np.ndarray
    extreme_points: np.ndarray
    cost: Callable[[np.ndarray, np.ndarray], float]
    box: tuple | None = None

    def __post_init__(self):
        if len(self.extreme_points) == 0:
            raise ValueError("extreme point list must be nonempty")

    def apply_mass(self, f: np.ndarray) -> np.ndarray:
        # f is a single vector or a (d, k) stack of columns
        if self.mass.ndim == 1:
            return self.mass * f if f.ndim == 1 else self.mass[:, None] * f
        return self.mass @ f


def quad_value(lower: QuadraticLowerLevel, u, f: np.ndarray) -> float:
    """Compliance quadratic (Mf)^T H[u]^{-1} (Mf) via one SPD solve."""
    g = lower.apply_mass(np.asarray(f, dtype=float))
    return float(g @ lower.solve_h(u, g))


def max_compliance(lower: QuadraticLowerLevel, u) -> float:
    """Lower-level optimal value: the maximum of the quadratic over the
    extreme points (strict convexity makes enumeration exact)."""
    return max(quad_value(lower, u, f) for f in lower.extreme_points)


def optimal_force_set(lower: QuadraticLowerLevel, u,
                      rel_tol: float = ARGMAX_REL_TOL) -> np.ndarray:
    """Extreme points attaining the lower-level maximum, up to rel_tol ties."""
    values = np.array([quad_value(lower, u, f) for f in lower.extreme_points])
    best = values.max()
    keep = best - values <= rel_tol * max(1.0, best)
    return np.asarray(lower.extreme_points)[keep]


def worst_case_cost(lower: QuadraticLowerLevel, u,
                    rel_tol: float = ARGMAX_REL_TOL) -> float:
    """Pessimistic upper-level value: max of the cost over the optimal set."""
    return max(lower.cost(u, f) for f in optimal_force_set(lower, u, rel_tol))


def relaxed_worst_case_cost(lower: QuadraticLowerLevel, u, slack: float,
                            grid_resolution: int = 201) -> float:
    """Supremum of the cost over the nearly-optimal set, by grid filtering.

    A grid point f qualifies when the optimality gap is strictly below
    ``slack`` (up to 1e-12 to absorb roundoff at the boundary).  Monotone
    nondecreasing in the slack; an upper bound for the exact worst case up
    to the grid error.  Raises SolverError when no grid point qualifies.
    """
    if slack <= 0.0:
        raise ValueError("slack must be positive")
    if lower.box is None:
        pts = np.asarray(lower.extreme_points, dtype=float)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in lower.box)
    axes = [np.linspace(a, b, grid_resolution) for a, b in zip(lo, hi)]
    grid = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    g = lower.apply_mass(grid.T)
    values = np.einsum("dn,dn->n", g, lower.solve_h(u, g))
    best_value = max_compliance(lower, u)
    qualified = grid[best_value - values < slack - 1e-12]
    if len(qualified) == 0:
        raise SolverError("no grid point is nearly optimal; refine the grid")
    return max(lower.cost(u, f) for f in qualified)


# ---------------------------------------------------------------------------
# Closed-form 2-D instance with one design parameter: the lower-level
# quadratic is f1^2 + f2^2 + 2(u-1) f1 f2 over [-1,1] x [0,1] and the leader
# pays u*f1, so the worst case jumps at u = 1.  Handy because every quantity
# is available in closed form.

TOY_DESIGN_INTERVAL = (0.5, 1.5)


def _toy_solve(u, rhs: np.ndarray) -> np.ndarray:
    # H[u] is the inverse of [[1, u-1], [u-1, 1]], so applying H^{-1} is a
    # plain matrix product
    return np.array([[1.0, u - 1.0], [u - 1.0, 1.0]]) @ rhs


def _toy_solve_generic(u, rhs: np.ndarray) -> np.ndarray:
    # same operator through an actual linear solve against H[u]
    h = np.linalg.inv(np.array([[1.0, u - 1.0], [u - 1.0, 1.0]]))
    return np.linalg.solve(h, rhs)


def toy_instance(generic: bool = False) -> QuadraticLowerLevel:
    """The closed-form 2-D instance; ``generic=True`` routes the operator
    application through an explicit SPD solve instead of the closed form."""
    corners = np.array([[-1.0, 0.0], [1.0, 0.0], [-1.0, 1.0], [1.0, 1.0]])
    return QuadraticLowerLevel(
        solve_h=_toy_solve_generic if generic else _toy_solve,
        mass=np.ones(2),
        extreme_points=corners,
        cost=lambda u, f: float(u * f[0]),
        box=(np.array([-1.0, 0.0]), np.array([1.0, 1.0])),
    )


def toy_max_compliance_exact(u: float) -> float:
    return 2.0 + 2.0 * abs(u - 1.0)


def toy_worst_case_exact(u: float) -> float:
    return u if u >= 1.0 else -u


def toy_scale_gap(u: float, grid_size: int = 10_000,
                  interval=(0.9, 1.1)) -> tuple[float, float]:
    """Distance between the outcome profiles v -> worst_case(u*v) and
    v -> worst_case(v) over a scale grid.

    Returns (sup_gap, mean_gap): the grid supremum and the grid average of
    the absolute difference.  For u slightly below 1 the supremum stays
    near 1 + 1/u (the jump at the scale v = 1/u never shrinks) while the
    average tends to zero, separating the sup norm from every integral norm.
    """
    v = np.linspace(interval[0], interval[1], grid_size)
    prof_u = np.where(u * v >= 1.0, u * v, -u * v)
    prof_1 = np.where(v >= 1.0, v, -v)
    diff = np.abs(prof_u - prof_1)
    return float(diff.max()), float(diff.mean())
