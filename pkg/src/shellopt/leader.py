"""Design-side stochastic optimization of the thickness field.

Per iteration the leader draws a batch of multiplicative thickness
perturbations, lets the follower pick the worst admissible load for every
perturbed design, and descends the empirical mean of the tracking cost plus
log-barrier terms for the box and volume constraints.  Gradients are exact
for the smoothed model: an adjoint solve for the direct dependence through
the stiffness matrix plus an implicit-function term through the follower's
stationarity condition.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BarrierDomainError, FollowerConvergenceError, SolverError
from .elastic import (ElasticComponents, MaterialField, SPDFactorization,
                      assemble_h, dh_contract_gram, dh_contract_pair,
                      solve_state, state_operator)
from .follower import ForceModel, FollowerResult, newton_ascent, reduce_compliance, smoothed_objective
from .mesh import ShellMesh


@dataclass(frozen=True)
class NoiseModel:
    """Multiplicative manufacturing noise: i.i.d. truncated normal draws
    with mean parameter 1, one per face, truncated to [v_min, v_max].

    ``sigma`` is the standard deviation of the parent normal before
    truncation.  Draw streams are counter-based: the stream for a sample is
    derived from (seed, sample_index) only, so results do not depend on how
    samples are distributed over workers.
    """

    sigma: float
    v_min: float = 1e-2
    v_max: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.v_min < self.v_max < np.inf):
            raise ValueError("need 0 < v_min < v_max < inf (bounded support)")
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")


def sample_perturbation(noise: NoiseModel, sample_index: int, face_count: int,
                        frozen: np.ndarray | None = None) -> np.ndarray:
    """One perturbation vector, deterministic in (seed, sample_index).

    Rejection sampling against the parent normal; frozen faces always get
    factor 1 since their thickness is not subject to manufacturing scatter
    of the optimized design.
    """
    if noise.sigma == 0.0:
        draws = np.ones(face_count)
    else:
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=(noise.seed, int(sample_index)))))
        draws = 1.0 + noise.sigma * rng.standard_normal(face_count)
        bad = (draws < noise.v_min) | (draws > noise.v_max)
        while np.any(bad):
            draws[bad] = 1.0 + noise.sigma * rng.standard_normal(int(bad.sum()))
            bad = (draws < noise.v_min) | (draws > noise.v_max)
    if frozen is not None:
        draws[frozen] = 1.0
    return draws


def tracking_mask(mesh: ShellMesh, mode: str = "full", radius: float | None = None,
                  indices=None) -> np.ndarray:
    """0/1 vertex indicator of the tracking region.

    "full" marks every vertex, "plateau" marks vertices within ``radius``
    of the bounding-box center in the horizontal plane, "indices" uses an
    explicit list.
    """
    chi = np.zeros(mesh.n_vertices)
    if mode == "full":
        chi[:] = 1.0
    elif mode == "plateau":
        if radius is None:
            raise ValueError("plateau tracking needs a radius")
        center = 0.5 * (mesh.vertices[:, :2].min(axis=0) + mesh.vertices[:, :2].max(axis=0))
        dist = np.linalg.norm(mesh.vertices[:, :2] - center, axis=1)
        chi[dist <= radius] = 1.0
    elif mode == "indices":
        chi[np.asarray(indices, dtype=np.int64)] = 1.0
    else:
        raise ValueError(f"unknown tracking mode {mode!r}")
    if chi.sum() == 0:
        raise ValueError("tracking set is empty")
    return chi


def _dof_weights(components: ElasticComponents, chi: np.ndarray) -> np.ndarray:
    # J = sum_v chi_v a_v |y_v|^2, expressed as per-DOF weights
    return np.repeat(chi * components.ref.vertex_areas, 3)


def tracking_cost(components: ElasticComponents, u: np.ndarray, f: np.ndarray,
                  chi: np.ndarray,
                  factorization: SPDFactorization | None = None) -> float:
    """Squared mass-weighted displacement norm on the tracking set."""
    if factorization is None:
        factorization = SPDFactorization(assemble_h(components, u))
    y = solve_state(factorization, components, f)
    w = _dof_weights(components, chi)
    return float(y @ (w * y))


def leader_barrier(u: np.ndarray, face_areas: np.ndarray, lower: float, upper: float,
                   volume_cap: float, barrier_thickness: float = 1.0,
                   barrier_volume: float = 1e-5):
    """Log-barrier value and per-face gradient for the box and volume limits."""
    lo_gap = u - lower
    hi_gap = upper - u
    vol_gap = volume_cap - float(face_areas @ u)
    if np.any(lo_gap <= 0.0) or np.any(hi_gap <= 0.0) or vol_gap <= 0.0:
        raise BarrierDomainError("thickness field is not strictly feasible")
    value = (-barrier_thickness * float(face_areas @ (np.log(lo_gap) + np.log(hi_gap)))
             - barrier_volume * np.log(vol_gap))
    grad = (-barrier_thickness * face_areas * (1.0 / lo_gap - 1.0 / hi_gap)
            + barrier_volume * face_areas / vol_gap)
    return value, grad


@dataclass
class SampleOutcome:
    """Everything produced for one perturbation draw."""

    index: int
    perturbation: np.ndarray
    cost: float
    follower: FollowerResult
    gradient: np.ndarray | None = None
    excluded: bool = False
    hessian_fallback: bool = False


def evaluate_sample(components: ElasticComponents, u: np.ndarray, model: ForceModel,
                    noise: NoiseModel, chi: np.ndarray, sample_index: int,
                    need_gradient: bool = False, follower_mode: str = "full",
                    warm_start: np.ndarray | None = None,
                    follower_max_iter: int = 100, follower_grad_tol: float = 1e-9,
                    follower_rel_grad_tol: float = 1e-9) -> SampleOutcome:
    """Perturb, solve the follower, evaluate the cost and (optionally) the
    per-face design gradient for one sample.

    One factorization of the perturbed stiffness matrix serves the basis
    states, the follower and the adjoint solve.  The gradient combines the
    direct channel through the stiffness matrix with the implicit channel
    through the follower optimum (skipped in "frozen" mode or when the
    follower Hessian is singular, which is flagged).
    """
    frozen = components.mesh.frozen_faces
    upsilon = sample_perturbation(noise, sample_index, components.mesh.n_faces, frozen)
    u_pert = u * upsilon
    factorization = SPDFactorization(assemble_h(components, u_pert))
    solve = state_operator(components, factorization)
    s_matrix, states = reduce_compliance(solve, components.mass, model.basis)

    seeds = model.constraints.seeds()
    result = None
    if warm_start is not None:
        # previous optima hug the constraint walls; restart a little inside
        pull = getattr(model.constraints, "pull_inside", None)
        start = warm_start if pull is None else pull(warm_start)
        result = newton_ascent(s_matrix, model, start, max_iter=follower_max_iter,
                               grad_tol=follower_grad_tol, rel_grad_tol=follower_rel_grad_tol)
    if result is None or not result.converged:
        for f0 in seeds:
            cand = newton_ascent(s_matrix, model, f0, max_iter=follower_max_iter,
                                 grad_tol=follower_grad_tol, rel_grad_tol=follower_rel_grad_tol)
            if result is None or cand.smoothed_value > result.smoothed_value:
                result = cand
    if not result.converged:
        # a stagnated ascent usually sits wedged against a wall; restarting
        # slightly inside lets Newton finish in a few steps
        pull = getattr(model.constraints, "pull_inside", None)
        if pull is not None:
            retry = newton_ascent(s_matrix, model, pull(result.coefficients),
                                  max_iter=follower_max_iter,
                                  grad_tol=follower_grad_tol,
                                  rel_grad_tol=follower_rel_grad_tol)
            if retry.converged or retry.smoothed_value > result.smoothed_value:
                result = retry
    coeffs = result.coefficients
    result.force = model.basis @ coeffs

    y = states @ coeffs
    w = _dof_weights(components, chi)
    cost = float(y @ (w * y))
    outcome = SampleOutcome(index=sample_index, perturbation=upsilon, cost=cost,
                            follower=result)
    if not need_gradient:
        return outcome

    adjoint = solve(2.0 * w * y)
    grad_pert = -dh_contract_pair(components, u_pert, adjoint, y)
    if follower_mode == "full":
        ds = -dh_contract_gram(components, u_pert, states)          # (T, d, d)
        rhs = 2.0 * np.einsum("tab,b->ta", ds, coeffs)              # (T, d)
        _, _, hess = smoothed_objective(coeffs, s_matrix, model)
        try:
            dcoeffs = -np.linalg.solve(hess, rhs.T).T               # (T, d)
            dj_dcoeffs = 2.0 * states.T @ (w * y)                   # (d,)
            grad_pert = grad_pert + dcoeffs @ dj_dcoeffs
        except np.linalg.LinAlgError:
            outcome.hessian_fallback = True
    grad = grad_pert * upsilon
    grad[frozen] = 0.0
    outcome.gradient = grad
    return outcome


def hypergradient(components: ElasticComponents, u: np.ndarray, upsilon: np.ndarray,
                  follower_result: FollowerResult, chi: np.ndarray,
                  model: ForceModel, follower_mode: str = "full") -> np.ndarray:
    """Design gradient of the tracking cost for a fixed perturbation draw.

    Differentiates u -> J[u * upsilon, B F*(u * upsilon)] at the given
    converged follower result; matches central finite differences of that
    frozen-draw map.  Entries of frozen faces are exactly zero.
    """
    frozen = components.mesh.frozen_faces
    u_pert = u * upsilon
    factorization = SPDFactorization(assemble_h(components, u_pert))
    solve = state_operator(components, factorization)
    s_matrix, states = reduce_compliance(solve, components.mass, model.basis)
    coeffs = follower_result.coefficients
    y = states @ coeffs
    w = _dof_weights(components, chi)
    adjoint = solve(2.0 * w * y)
    grad_pert = -dh_contract_pair(components, u_pert, adjoint, y)
    if follower_mode == "full":
        ds = -dh_contract_gram(components, u_pert, states)
        rhs = 2.0 * np.einsum("tab,b->ta", ds, coeffs)
        _, _, hess = smoothed_objective(coeffs, s_matrix, model)
        dcoeffs = -np.linalg.solve(hess, rhs.T).T
        grad_pert = grad_pert + dcoeffs @ (2.0 * states.T @ (w * y))
    grad = grad_pert * upsilon
    grad[frozen] = 0.0
    return grad


@dataclass
class SampleBatch:
    """Seeded perturbation draws with their outcomes, in sample order."""

    perturbations: np.ndarray     # (K, T)
    costs: np.ndarray             # (K,)
    coefficients: np.ndarray      # (K, d)
    compliances: np.ndarray       # (K,)
    excluded: np.ndarray          # (K,) bool

    @property
    def included_costs(self) -> np.ndarray:
        return self.costs[~self.excluded]

    @property
    def standard_error(self) -> float:
        """Standard error of the sample mean of the included outcomes."""
        vals = self.included_costs
        if len(vals) < 2:
            return float("nan")
        return float(vals.std(ddof=1) / np.sqrt(len(vals)))


def _run_batch(components, u, model, noise, chi, sample_ids, *, need_gradient,
               follower_mode, warm, allow_failures, follower_max_iter,
               follower_grad_tol, follower_rel_grad_tol, executor=None):
    def work(pos_and_id):
        pos, sid = pos_and_id
        return evaluate_sample(
            components, u, model, noise, chi, sid,
            need_gradient=need_gradient, follower_mode=follower_mode,
            warm_start=None if warm is None else warm[pos],
            follower_max_iter=follower_max_iter,
            follower_grad_tol=follower_grad_tol,
            follower_rel_grad_tol=follower_rel_grad_tol)

    tasks = list(enumerate(sample_ids))
    if executor is None:
        outcomes = [work(t) for t in tasks]
    else:
        outcomes = list(executor.map(work, tasks))  # map preserves order
    for out in outcomes:
        if not out.follower.converged:
            if allow_failures:
                out.excluded = True
            else:
                raise FollowerConvergenceError(
                    f"follower did not converge on sample {out.index} "
                    f"(gradient norm {out.follower.gradient_norm:.3e})",
                    sample_index=out.index)
    if all(out.excluded for out in outcomes):
        raise SolverError("every sample in the batch failed")
    return outcomes


def empirical_risk(components: ElasticComponents, u: np.ndarray, model: ForceModel,
                   noise: NoiseModel, chi: np.ndarray, n_samples: int,
                   sample_offset: int = 0, workers: int = 1,
                   allow_failures: bool = False, follower_mode: str = "full",
                   follower_max_iter: int = 100, follower_grad_tol: float = 1e-9,
                   follower_rel_grad_tol: float = 1e-9):
    """Mean per-sample tracking cost under fresh perturbation draws.

    Returns (mean, SampleBatch).  Deterministic for a fixed (seed,
    sample_offset) regardless of the worker count: streams are derived from
    sample indices and the reduction is in fixed sample order.
    """
    sample_ids = [sample_offset + k for k in range(n_samples)]
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        outcomes = _run_batch(components, u, model, noise, chi, sample_ids,
                              need_gradient=False, follower_mode=follower_mode,
                              warm=None, allow_failures=allow_failures,
                              follower_max_iter=follower_max_iter,
                              follower_grad_tol=follower_grad_tol,
                              follower_rel_grad_tol=follower_rel_grad_tol,
                              executor=executor)
    finally:
        if executor is not None:
            executor.shutdown()
    batch = SampleBatch(
        perturbations=np.array([o.perturbation for o in outcomes]),
        costs=np.array([o.cost for o in outcomes]),
        coefficients=np.array([o.follower.coefficients for o in outcomes]),
        compliances=np.array([o.follower.compliance for o in outcomes]),
        excluded=np.array([o.excluded for o in outcomes]),
    )
    return float(batch.included_costs.mean()), batch


@dataclass
class LeaderConfig:
    """Knobs of the stochastic descent (bounds live in MaterialField)."""

    barrier_thickness: float = 1.0
    barrier_volume: float = 1e-5
    n_samples: int = 128
    iterations: int = 200
    step0: float | None = None        # None: probe on the first batch
    step_halflife: float = 100.0
    follower_mode: str = "full"
    follower_max_iter: int = 100
    follower_grad_tol: float = 1e-9
    follower_rel_grad_tol: float = 1e-9
    allow_sample_failures: bool = False
    workers: int = 1
    max_feasibility_halvings: int = 60


@dataclass
class SgdResult:
    material: MaterialField
    history: list = field(default_factory=list)
    step0: float = np.nan
    step0_probed: bool = False
    aborted: bool = False
    abort_reason: str = ""


def default_initial_thickness(material: MaterialField, face_areas: np.ndarray) -> float:
    """Uniform strictly feasible start: the smaller of 90% of the volume
    budget per unit area and the box midpoint."""
    return float(min(0.9 * material.volume_cap / face_areas.sum(),
                     0.5 * (material.lower + material.upper)))


def _strictly_feasible(u, material: MaterialField, face_areas) -> bool:
    live = ~material.frozen
    return (np.all(u[live] > material.lower) and np.all(u[live] < material.upper)
            and float(face_areas @ u) < material.volume_cap)


def _probe_step0(components, material, model, noise, chi, config, u, grad, risk0,
                 sample_ids, warm, executor):
    """Largest power-of-two fraction of 0.1 (u+ - u-) / ||g||_inf that
    decreases the empirical risk on the first sample batch."""
    face_areas = components.ref.face_areas
    gmax = float(np.abs(grad).max())
    if gmax == 0.0:
        return 0.0, True
    base = 0.1 * (material.upper - material.lower) / gmax
    tau = base
    for _ in range(31):
        u_try = u - tau * grad
        if _strictly_feasible(u_try, material, face_areas):
            outcomes = _run_batch(
                components, u_try, model, noise, chi, sample_ids,
                need_gradient=False, follower_mode=config.follower_mode,
                warm=warm, allow_failures=config.allow_sample_failures,
                follower_max_iter=config.follower_max_iter,
                follower_grad_tol=config.follower_grad_tol,
                follower_rel_grad_tol=config.follower_rel_grad_tol,
                executor=executor)
            risk_try = float(np.mean([o.cost for o in outcomes if not o.excluded]))
            if risk_try < risk0:
                return tau, True
        tau *= 0.5
    return tau, False


def sgd(components: ElasticComponents, material: MaterialField, model: ForceModel,
        noise: NoiseModel, chi: np.ndarray, config: LeaderConfig,
        callback=None) -> SgdResult:
    """Stochastic gradient descent on empirical risk plus barrier.

    Per iteration: K fresh draws, per-sample design gradients averaged in
    fixed sample order, one step along the negative total gradient with
    feasibility backtracking (the step is halved until the iterate is
    strictly inside the box and volume region).  History records the risk
    at each iterate before stepping; the trajectory is reproducible bitwise
    under a fixed seed for any worker count.
    """
    face_areas = components.ref.face_areas
    material.validate_strict(face_areas)
    u = material.values.copy()
    frozen = material.frozen
    k = config.n_samples
    executor = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    warm = None
    step0 = config.step0
    step0_probed = False
    risk0 = None
    result = SgdResult(material=material, step0=np.nan)
    try:
        for it in range(config.iterations):
            t_start = time.perf_counter()
            sample_ids = [it * k + j for j in range(k)]
            outcomes = _run_batch(
                components, u, model, noise, chi, sample_ids,
                need_gradient=True, follower_mode=config.follower_mode,
                warm=warm, allow_failures=config.allow_sample_failures,
                follower_max_iter=config.follower_max_iter,
                follower_grad_tol=config.follower_grad_tol,
                follower_rel_grad_tol=config.follower_rel_grad_tol,
                executor=executor)
            included = [o for o in outcomes if not o.excluded]
            risk = float(np.mean([o.cost for o in included]))
            grad_risk = np.mean([o.gradient for o in included], axis=0)
            if risk0 is None:
                risk0 = risk if risk > 0.0 else 1.0
            barrier_value, barrier_grad = leader_barrier(
                u, face_areas, material.lower, material.upper, material.volume_cap,
                config.barrier_thickness, config.barrier_volume)
            grad = grad_risk + barrier_grad
            grad[frozen] = 0.0

            if step0 is None:
                step0, ok = _probe_step0(components, material, model, noise, chi,
                                         config, u, grad, risk, sample_ids,
                                         [o.follower.coefficients for o in outcomes],
                                         executor)
                step0_probed = True
                if not ok and step0 > 0.0:
                    result.abort_reason = "step probe found no decreasing step; using smallest"
            tau = step0 / (1.0 + it / config.step_halflife)
            halvings = 0
            u_next = u - tau * grad
            while not _strictly_feasible(u_next, material, face_areas):
                tau *= 0.5
                halvings += 1
                if halvings > config.max_feasibility_halvings:
                    result.aborted = True
                    result.abort_reason = (f"feasibility backtracking exhausted at "
                                           f"iteration {it} (|g|_inf={np.abs(grad).max():.3e})")
                    result.material = material.with_values(u)
                    result.history.append(dict(
                        iteration=it, empirical_risk=risk, relative_cost=risk / risk0,
                        barrier=barrier_value, volume=float(face_areas @ u),
                        step_size=0.0, wall_ms=1e3 * (time.perf_counter() - t_start)))
                    return result
                u_next = u - tau * grad
            u = u_next
            warm = [o.follower.coefficients for o in outcomes]
            record = dict(iteration=it, empirical_risk=risk, relative_cost=risk / risk0,
                          barrier=barrier_value, volume=float(face_areas @ u),
                          step_size=tau, wall_ms=1e3 * (time.perf_counter() - t_start))
            result.history.append(record)
            if callback is not None:
                callback(record, u)
    finally:
        if executor is not None:
            executor.shutdown()
    result.material = material.with_values(u)
    result.step0 = step0 if step0 is not None else np.nan
    result.step0_probed = step0_probed
    return result


def simulate_outcomes(components: ElasticComponents, u: np.ndarray, model: ForceModel,
                      noise: NoiseModel, chi: np.ndarray, n_samples: int,
                      workers: int = 1, sample_offset: int = 0,
                      allow_failures: bool = False) -> SampleBatch:
    """Draw outcomes of the random upper-level cost for a fixed design."""
    _, batch = empirical_risk(components, u, model, noise, chi, n_samples,
                              sample_offset=sample_offset, workers=workers,
                              allow_failures=allow_failures)
    return batch
