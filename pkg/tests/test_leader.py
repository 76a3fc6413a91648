import numpy as np
import pytest
from scipy.integrate import quad

from shellopt import (LeaderConfig, MaterialField, NoiseModel, SPDFactorization,
                      assemble_h, default_initial_thickness, empirical_risk,
                      evaluate_sample, hypergradient, leader_barrier, newton_ascent,
                      reduce_compliance, sample_perturbation, sgd, simulate_outcomes,
                      solve_state, state_operator, tracking_cost, tracking_mask)
from shellopt.errors import BarrierDomainError
from shellopt.mesh import make_roof, select_dirichlet


def uniform_material(bundle, value=None):
    mat = MaterialField.uniform(bundle.mesh, 0.0, 0.01, 0.2, 60.0)
    if value is None:
        value = default_initial_thickness(mat, bundle.ref.face_areas)
    return mat.with_values(np.full(bundle.mesh.n_faces, value))


class TestSampling:
    def test_deterministic_in_seed_and_index(self):
        noise = NoiseModel(sigma=0.15, seed=77)
        a = sample_perturbation(noise, 5, 400)
        b = sample_perturbation(noise, 5, 400)
        c = sample_perturbation(noise, 6, 400)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_truncation_bounds(self):
        noise = NoiseModel(sigma=0.5, v_min=0.01, v_max=2.0, seed=3)
        draws = np.concatenate([sample_perturbation(noise, k, 10_000) for k in range(20)])
        assert draws.min() >= 0.01
        assert draws.max() <= 2.0

    def test_degenerate_sigma(self):
        draws = sample_perturbation(NoiseModel(sigma=0.0, seed=1), 9, 50)
        assert np.array_equal(draws, np.ones(50))

    def test_frozen_faces_unperturbed(self, roof12):
        noise = NoiseModel(sigma=0.2, seed=5)
        draws = sample_perturbation(noise, 0, roof12.mesh.n_faces,
                                    roof12.mesh.frozen_faces)
        assert np.all(draws[roof12.mesh.frozen_faces] == 1.0)

    def test_mean_matches_quadrature(self):
        # quadrature oracle for the truncated-normal mean
        sigma, lo, hi = 0.1, 0.01, 2.0
        dens = lambda x: np.exp(-0.5 * ((x - 1.0) / sigma) ** 2)
        z = quad(dens, lo, hi)[0]
        tn_mean = quad(lambda x: x * dens(x), lo, hi)[0] / z
        noise = NoiseModel(sigma=sigma, v_min=lo, v_max=hi, seed=11)
        draws = np.concatenate([sample_perturbation(noise, k, 10_000) for k in range(10)])
        se = draws.std(ddof=1) / np.sqrt(len(draws))
        assert abs(draws.mean() - tn_mean) < 3 * se + 1e-4

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            NoiseModel(sigma=0.1, v_min=0.0, v_max=2.0)
        with pytest.raises(ValueError):
            NoiseModel(sigma=0.1, v_min=2.0, v_max=1.0)


class TestTrackingMask:
    def test_full(self, roof12):
        chi = tracking_mask(roof12.mesh, "full")
        assert np.all(chi == 1.0)

    def test_plateau(self, roof12):
        chi = tracking_mask(roof12.mesh, "plateau", radius=4.0)
        center = 0.5 * (roof12.mesh.vertices[:, :2].min(axis=0)
                        + roof12.mesh.vertices[:, :2].max(axis=0))
        dist = np.linalg.norm(roof12.mesh.vertices[:, :2] - center, axis=1)
        assert np.array_equal(chi == 1.0, dist <= 4.0)
        assert 0 < chi.sum() < roof12.mesh.n_vertices

    def test_indices(self, roof12):
        chi = tracking_mask(roof12.mesh, "indices", indices=[3, 5])
        assert chi.sum() == 2.0

    def test_empty_rejected(self, roof12):
        with pytest.raises(ValueError, match="empty"):
            tracking_mask(roof12.mesh, "plateau", radius=-1.0)


class TestTrackingCost:
    def test_zero_force(self, roof12):
        u = np.full(roof12.mesh.n_faces, 0.1)
        j = tracking_cost(roof12.components, u, np.zeros(3 * roof12.mesh.n_vertices),
                          roof12.chi_full)
        assert j == 0.0

    def test_full_mask_is_mass_norm(self, roof12):
        comp = roof12.components
        u = np.full(roof12.mesh.n_faces, 0.1)
        f = roof12.model.basis @ np.array([1e-3, -5e-4, 2e-3])
        fac = SPDFactorization(assemble_h(comp, u))
        y = solve_state(fac, comp, f)
        expected = y @ (comp.mass * y)
        assert tracking_cost(comp, u, f, roof12.chi_full) == pytest.approx(expected, rel=1e-12)

    def test_single_vertex_oracle(self, roof12):
        comp = roof12.components
        u = np.full(roof12.mesh.n_faces, 0.1)
        f = roof12.model.basis @ np.array([1e-3, 1e-3, 2e-3])
        fac = SPDFactorization(assemble_h(comp, u))
        y = solve_state(fac, comp, f).reshape(-1, 3)
        free = np.setdiff1d(np.arange(roof12.mesh.n_vertices), roof12.mesh.dirichlet)
        v = int(free[len(free) // 2])
        chi = np.zeros(roof12.mesh.n_vertices)
        chi[v] = 1.0
        expected = roof12.ref.vertex_areas[v] * float(y[v] @ y[v])
        assert tracking_cost(comp, u, f, chi) == pytest.approx(expected, rel=1e-12)


class TestLeaderBarrier:
    def test_midpoint_box_gradient_vanishes(self, roof12):
        areas = roof12.ref.face_areas
        u = np.full(roof12.mesh.n_faces, 0.105)
        _, grad = leader_barrier(u, areas, 0.01, 0.2, 1e9, barrier_volume=1e-300)
        assert np.allclose(grad, 0.0, atol=1e-10)

    def test_gradient_matches_fd(self, roof12):
        # fourth-order stencil on just the u_t-dependent terms; differencing
        # the full barrier value (~1e3) would drown the per-face change in
        # cancellation noise
        areas = roof12.ref.face_areas
        rng = np.random.default_rng(23)
        u = rng.uniform(0.05, 0.15, roof12.mesh.n_faces)
        _, grad = leader_barrier(u, areas, 0.01, 0.2, 60.0)
        h = 5e-5
        rest = areas @ u

        def local_value(t, x):
            vol_gap = 60.0 - (rest - areas[t] * u[t] + areas[t] * x)
            return (-1.0 * areas[t] * (np.log(x - 0.01) + np.log(0.2 - x))
                    - 1e-5 * np.log(vol_gap))

        for t in rng.choice(roof12.mesh.n_faces, size=6, replace=False):
            x = u[t]
            fd = (local_value(t, x - 2 * h) - 8 * local_value(t, x - h)
                  + 8 * local_value(t, x + h) - local_value(t, x + 2 * h)) / (12 * h)
            assert grad[t] == pytest.approx(fd, rel=1e-8)

    def test_diverges_at_upper_bound(self, roof12):
        areas = roof12.ref.face_areas
        values = []
        for gap in (1e-2, 1e-4, 1e-6):
            u = np.full(roof12.mesh.n_faces, 0.2 - gap)
            values.append(leader_barrier(u, areas, 0.01, 0.2, 1e9)[0])
        assert values[0] < values[1] < values[2]

    def test_infeasible_rejected(self, roof12):
        areas = roof12.ref.face_areas
        with pytest.raises(BarrierDomainError):
            leader_barrier(np.full(roof12.mesh.n_faces, 0.25), areas, 0.01, 0.2, 60.0)


class TestHypergradient:
    def test_matches_frozen_draw_fd(self, roof7):
        # central differences of the fixed-draw design-to-cost map, with the
        # follower re-solved to a residual-polished optimum at every probe
        comp, model, chi = roof7.components, roof7.model, roof7.chi_full
        mesh, ref = roof7.mesh, roof7.ref
        noise = NoiseModel(sigma=0.1, seed=2024)
        rng = np.random.default_rng(42)
        w = np.repeat(chi * ref.vertex_areas, 3)

        def polished_cost(u_val, ups, start):
            fac = SPDFactorization(assemble_h(comp, u_val * ups))
            solve = state_operator(comp, fac)
            s, states = reduce_compliance(solve, comp.mass, model.basis)
            coeffs = newton_ascent(s, model, start, max_iter=300).coefficients
            from shellopt import smoothed_objective
            for _ in range(5):
                _, g, hess = smoothed_objective(coeffs, s, model)
                delta = np.linalg.solve(hess, -g)
                tau = 1.0
                for _ in range(60):
                    cand = coeffs + tau * delta
                    if np.all(model.constraints.values(cand) > 0.0):
                        g2 = smoothed_objective(cand, s, model)[1]
                        if np.linalg.norm(g2) <= np.linalg.norm(g):
                            coeffs = cand
                            break
                    tau *= 0.5
                else:
                    break
            y = states @ coeffs
            return float(y @ (w * y))

        u = rng.uniform(0.08, 0.12, mesh.n_faces)
        out = evaluate_sample(comp, u, model, noise, chi, 0, need_gradient=True)
        assert out.follower.converged
        grad = out.gradient
        checked = 0
        for t in rng.permutation(np.flatnonzero(~mesh.frozen_faces)):
            if checked >= 6 or abs(grad[t]) <= 1e-8:
                continue
            h = 1e-6 * u[t]
            up, um = u.copy(), u.copy()
            up[t] += h
            um[t] -= h
            fd = (polished_cost(up, out.perturbation, out.follower.coefficients)
                  - polished_cost(um, out.perturbation, out.follower.coefficients)) / (2 * h)
            assert grad[t] == pytest.approx(fd, rel=1e-3)
            checked += 1
        assert checked == 6

    def test_public_entry_matches_batch_path(self, roof7):
        comp, model, chi = roof7.components, roof7.model, roof7.chi_full
        noise = NoiseModel(sigma=0.1, seed=8)
        u = np.full(roof7.mesh.n_faces, 0.1)
        out = evaluate_sample(comp, u, model, noise, chi, 3, need_gradient=True)
        direct = hypergradient(comp, u, out.perturbation, out.follower, chi, model)
        assert np.allclose(direct, out.gradient, rtol=1e-10, atol=1e-12)

    def test_frozen_faces_zero(self, roof12):
        comp, model, chi = roof12.components, roof12.model, roof12.chi_full
        noise = NoiseModel(sigma=0.1, seed=9)
        u = np.full(roof12.mesh.n_faces, 0.1)
        out = evaluate_sample(comp, u, model, noise, chi, 0, need_gradient=True)
        frozen = roof12.mesh.frozen_faces
        assert frozen.sum() > 0
        assert np.all(out.gradient[frozen] == 0.0)

    def test_frozen_mode_drops_follower_channel(self, roof7):
        comp, model, chi = roof7.components, roof7.model, roof7.chi_full
        noise = NoiseModel(sigma=0.1, seed=10)
        u = np.full(roof7.mesh.n_faces, 0.1)
        full = evaluate_sample(comp, u, model, noise, chi, 1, need_gradient=True,
                               follower_mode="full")
        frozen = evaluate_sample(comp, u, model, noise, chi, 1, need_gradient=True,
                                 follower_mode="frozen")
        assert not np.allclose(full.gradient, frozen.gradient)

    def test_symmetry_equivariance(self):
        # swapping the two horizontal axes maps the jitter-free roof onto
        # itself; costs are invariant and gradients permute accordingly
        mesh = select_dirichlet(make_roof(8, 8, jitter=0.0), z_threshold=2.0)
        from conftest import Bundle
        bundle = Bundle(mesh)
        n = 8
        vid = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        vperm = vid.T.ravel()
        face_key = {tuple(sorted(f)): t for t, f in enumerate(mesh.faces)}
        fperm = np.array([face_key[tuple(sorted(vperm[f]))] for f in mesh.faces])
        noise = NoiseModel(sigma=0.0, seed=0)
        rng = np.random.default_rng(31)
        u = rng.uniform(0.08, 0.12, mesh.n_faces)
        u_mapped = np.empty_like(u)
        u_mapped[fperm] = u
        out = evaluate_sample(bundle.components, u, bundle.model, noise,
                              bundle.chi_full, 0, need_gradient=True)
        out_mapped = evaluate_sample(bundle.components, u_mapped, bundle.model, noise,
                                     bundle.chi_full, 0, need_gradient=True)
        assert out_mapped.cost == pytest.approx(out.cost, rel=1e-8)
        assert np.allclose(out_mapped.gradient[fperm], out.gradient, rtol=1e-6,
                           atol=1e-8 * np.abs(out.gradient).max())


class TestEmpiricalRisk:
    def test_sigma_zero_equals_deterministic(self, roof12):
        comp, model, chi = roof12.components, roof12.model, roof12.chi_full
        u = np.full(roof12.mesh.n_faces, 0.1)
        noise = NoiseModel(sigma=0.0, seed=1)
        value, batch = empirical_risk(comp, u, model, noise, chi, 4)
        from shellopt import solve_follower
        result = solve_follower(comp, u, model)
        direct = tracking_cost(comp, u, result.force, chi)
        assert value == pytest.approx(direct, rel=1e-10)
        assert np.all(batch.costs == batch.costs[0])

    def test_sample_count_invariance_at_sigma_zero(self, roof12):
        comp, model, chi = roof12.components, roof12.model, roof12.chi_full
        u = np.full(roof12.mesh.n_faces, 0.1)
        noise = NoiseModel(sigma=0.0, seed=1)
        values = [empirical_risk(comp, u, model, noise, chi, k)[0] for k in (1, 4, 8)]
        assert values[0] == values[1] == values[2]

    def test_reproducible_across_calls_and_workers(self, roof12):
        comp, model, chi = roof12.components, roof12.model, roof12.chi_full
        u = np.full(roof12.mesh.n_faces, 0.1)
        noise = NoiseModel(sigma=0.1, seed=321)
        v1, b1 = empirical_risk(comp, u, model, noise, chi, 8, workers=1)
        v2, b2 = empirical_risk(comp, u, model, noise, chi, 8, workers=4)
        assert v1 == v2
        assert np.array_equal(b1.costs, b2.costs)
        assert np.array_equal(b1.perturbations, b2.perturbations)

    def test_standard_error(self, roof12):
        comp, model, chi = roof12.components, roof12.model, roof12.chi_full
        u = np.full(roof12.mesh.n_faces, 0.1)
        noise = NoiseModel(sigma=0.1, seed=5)
        _, batch = empirical_risk(comp, u, model, noise, chi, 8)
        assert batch.standard_error > 0.0
        assert np.isfinite(batch.standard_error)


class TestSgd:
    def test_zero_iterations_returns_start(self, roof12):
        material = uniform_material(roof12)
        noise = NoiseModel(sigma=0.1, seed=1)
        cfg = LeaderConfig(n_samples=2, iterations=0)
        result = sgd(roof12.components, material, roof12.model, noise, roof12.chi_full, cfg)
        assert np.array_equal(result.material.values, material.values)
        assert result.history == []

    def test_deterministic_descent_sigma_zero(self, roof7):
        # with sigma = 0 the objective is deterministic; the probed schedule
        # must reduce it and keep every iterate strictly feasible
        material = uniform_material(roof7)
        noise = NoiseModel(sigma=0.0, seed=1)
        cfg = LeaderConfig(n_samples=1, iterations=40, workers=1)
        result = sgd(roof7.components, material, roof7.model, noise, roof7.chi_full, cfg)
        assert not result.aborted
        risks = [r["empirical_risk"] for r in result.history]
        assert risks[-1] < risks[0]
        drops = sum(b <= a + 1e-12 * abs(a) for a, b in zip(risks, risks[1:]))
        assert drops >= 0.9 * (len(risks) - 1)
        areas = roof7.ref.face_areas
        u = result.material.values
        assert np.all(u[~material.frozen] > material.lower)
        assert np.all(u[~material.frozen] < material.upper)
        assert areas @ u < material.volume_cap

    def test_trajectory_bitwise_reproducible(self, roof12):
        material = uniform_material(roof12)
        noise = NoiseModel(sigma=0.1, seed=2024)
        histories = []
        finals = []
        for workers in (1, 3):
            cfg = LeaderConfig(n_samples=4, iterations=6, workers=workers)
            result = sgd(roof12.components, material, roof12.model, noise,
                         roof12.chi_full, cfg)
            histories.append([r["empirical_risk"] for r in result.history])
            finals.append(result.material.values)
        assert histories[0] == histories[1]
        assert np.array_equal(finals[0], finals[1])

    def test_iterates_strictly_feasible(self, roof12):
        material = uniform_material(roof12)
        noise = NoiseModel(sigma=0.1, seed=55)
        seen = []

        def record(_, u):
            seen.append(u.copy())

        cfg = LeaderConfig(n_samples=2, iterations=8, workers=1)
        sgd(roof12.components, material, roof12.model, noise, roof12.chi_full, cfg,
            callback=record)
        areas = roof12.ref.face_areas
        for u in seen:
            assert np.all(u[~material.frozen] > material.lower)
            assert np.all(u[~material.frozen] < material.upper)
            assert areas @ u < material.volume_cap

    def test_frozen_faces_never_move(self, roof12):
        material = uniform_material(roof12)
        noise = NoiseModel(sigma=0.1, seed=8)
        cfg = LeaderConfig(n_samples=2, iterations=5, workers=1)
        result = sgd(roof12.components, material, roof12.model, noise, roof12.chi_full, cfg)
        frozen = material.frozen
        assert np.array_equal(result.material.values[frozen], material.values[frozen])


class TestSimulate:
    def test_outcome_batch_shapes(self, roof12):
        u = np.full(roof12.mesh.n_faces, 0.1)
        noise = NoiseModel(sigma=0.1, seed=7)
        batch = simulate_outcomes(roof12.components, u, roof12.model, noise,
                                  roof12.chi_full, 6)
        assert batch.costs.shape == (6,)
        assert batch.perturbations.shape == (6, roof12.mesh.n_faces)
        assert batch.coefficients.shape == (6, 3)
        assert not batch.excluded.any()
