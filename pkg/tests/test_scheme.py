import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvfe_ions.checks import fd_jacobian, jacobian_deviation, jittered_rect_mesh, random_state
from cvfe_ions.errors import ConfigurationError, DomainError, InvalidArgumentError
from cvfe_ions.mesh import build_box_mesh, build_rect_mesh, compute_operators, dual_cell_integral
from cvfe_ions.scheme import (Discretization, ProblemConfig, State, WeightVariant, assemble_jacobian,
                              concentrations_from_potentials, edge_weights, poisson_residual,
                              potentials_from_concentrations, project_initial, species_residual)


def const(c):
    return lambda x: np.full(len(x), float(c))


def make_config(n=2, variant="mean", charge=None, **kw):
    charge = [2.0, -1.0, 1.0][:n] if charge is None else charge
    return ProblemConfig(diffusion=[1.0, 0.6, 1.4][:n], charge=charge, initial=[const(0.2)] * n,
                         weight_variant=variant, time_step=0.01, **kw)


def dense_species_residual(mesh, ops, cfg, state, prev, tau):
    """Brute-force loop over every (S, K, L) triple."""
    n = cfg.n_species
    u = state.u
    u0 = 1 - u.sum(axis=0)
    R = np.zeros((n, mesh.n_vertices))
    for K in range(mesh.n_vertices):
        for i in range(n):
            R[i, K] += ops.dual_measure[K] * (u[i, K] - prev.u[i, K]) / tau
    for s, S in enumerate(mesh.simplices):
        for i in range(n):
            if cfg.weight_variant is WeightVariant.MEAN:
                w0 = np.mean(u0[S])
                wi = np.mean(u[i, S])
            else:
                w0 = np.max(u0[S])
                wi = np.max(u[i, S])
            for k, K in enumerate(S):
                for l, L in enumerate(S):
                    if k == l:
                        continue
                    muK = math.log(u[i, K] / u0[K])
                    muL = math.log(u[i, L] / u0[L])
                    F = cfg.diffusion[i] * ops.stiffness[s, k, l] * (
                        (muK - muL) + cfg.beta * cfg.charge[i] * (state.phi[K] - state.phi[L]))
                    R[i, K] += w0 * wi * F
    return R


def dense_poisson_residual(mesh, ops, cfg, state, f_cell):
    R = np.zeros(mesh.n_vertices)
    for s, S in enumerate(mesh.simplices):
        for k, K in enumerate(S):
            for l, L in enumerate(S):
                if k != l:
                    R[K] += cfg.lambda2 * ops.stiffness[s, k, l] * (state.phi[K] - state.phi[L])
    R -= ops.dual_measure * (cfg.charge @ state.u) + f_cell
    for K in mesh.dirichlet_vertices:
        R[K] = state.phi[K] - cfg.phi_dirichlet(mesh.vertices[K:K + 1])[0]
    return R


class TestTransform:
    def test_zero_potentials(self):
        u, u0 = concentrations_from_potentials(np.zeros((2, 1)), return_solvent=True)
        np.testing.assert_allclose(u[:, 0], [1 / 3, 1 / 3], rtol=1e-15)
        assert u0[0] == pytest.approx(1 / 3, rel=1e-15)

    def test_mass_ratio_initial_point(self):
        M1, M0 = 0.15, 9.85
        u = concentrations_from_potentials(np.array([[math.log(M1 / M0)]]))
        assert u[0, 0] == pytest.approx(M1 / (M0 + M1), rel=1e-14)

    def test_large_potential_does_not_overflow(self):
        with np.errstate(over="raise"):
            u, u0 = concentrations_from_potentials(np.array([[700.0], [0.0]]), return_solvent=True)
        assert np.all(np.isfinite(u))
        # in double precision 1 - e^-700 rounds to 1, so u_1 is as close to 1 as representable
        assert 1 - 1e-12 <= u[0, 0] <= 1.0
        assert 0 < u[1, 0] < 1e-300 and 0 < u0[0] < 1e-300

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidArgumentError):
            concentrations_from_potentials(np.array([[np.nan]]))

    def test_simple_potentials(self):
        np.testing.assert_allclose(potentials_from_concentrations(np.full((2, 1), 1 / 3)), 0.0, atol=1e-15)
        assert potentials_from_concentrations(np.array([[0.2]]))[0, 0] == pytest.approx(math.log(0.25))

    def test_domain_error_names_vertex_and_species(self):
        u = np.array([[0.2, 0.3, 0.1], [0.1, 0.0, 0.2]])
        with pytest.raises(DomainError) as exc:
            potentials_from_concentrations(u)
        assert (exc.value.vertex, exc.value.species) == (1, 2)
        with pytest.raises(DomainError) as exc:
            potentials_from_concentrations(np.array([[0.5, 0.7], [0.1, 0.3]]))
        assert (exc.value.vertex, exc.value.species) == (1, 0)

    @given(st.integers(0, 10_000), st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_round_trip(self, seed, n):
        rng = np.random.default_rng(seed)
        st_ = random_state(n, 50, rng, low=1e-8)
        back = concentrations_from_potentials(potentials_from_concentrations(st_.u))
        assert np.max(np.abs(back - st_.u)) <= 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_from_potentials(self, seed):
        rng = np.random.default_rng(seed)
        mu = rng.uniform(-30, 30, size=(3, 40))
        u, u0 = concentrations_from_potentials(mu, return_solvent=True)
        assert np.all(u > 0) and np.all(u0 > 0)
        np.testing.assert_allclose(u0 + u.sum(axis=0), 1.0, atol=1e-15)
        mu_back = np.log(u) - np.log(u0)
        np.testing.assert_allclose(concentrations_from_potentials(mu_back), u, atol=1e-12)


class TestEdgeWeights:
    def test_single_triangle(self):
        u = np.array([[0.1, 0.2, 0.6]])
        tri = np.array([[0, 1, 2]])
        assert edge_weights(u, "max", tri).species[0, 0] == pytest.approx(0.6)
        assert edge_weights(u, "mean", tri).species[0, 0] == pytest.approx(0.3)
        assert edge_weights(u, "max", tri).solvent[0] == pytest.approx(0.9)

    @pytest.mark.parametrize("variant", ["max", "mean"])
    def test_constant_field(self, variant):
        u = np.full((2, 4), 0.3)
        w = edge_weights(u, variant, np.array([[0, 1, 2], [1, 2, 3]]))
        np.testing.assert_allclose(w.species, 0.3, rtol=1e-15)
        np.testing.assert_allclose(w.solvent, 0.4, rtol=1e-14)

    def test_tie_goes_to_lowest_global_index(self):
        u = np.array([[0.3, 0.3, 0.1]])
        w = edge_weights(u, "max", np.array([[2, 1, 0]]))
        # local vertices 1 and 2 (global 1 and 0) tie; global 0 is local 2
        assert w.species_arg[0, 0] == 2

    @given(st.integers(0, 10_000), st.sampled_from(["max", "mean"]))
    @settings(max_examples=30, deadline=None)
    def test_vertex_bound(self, seed, variant):
        rng = np.random.default_rng(seed)
        mesh = jittered_rect_mesh(3, 3, seed=seed)
        s = random_state(2, mesh.n_vertices, rng, low=1e-6)
        w = edge_weights(s.u, variant, mesh.simplices)
        d1 = mesh.dim + 1
        assert np.all(s.u[:, mesh.simplices].max(axis=-1) <= d1 * w.species + 1e-15)
        assert np.all(s.u0[mesh.simplices].max(axis=-1) <= d1 * w.solvent + 1e-15)


class TestResiduals:
    @pytest.mark.parametrize("variant", ["max", "mean"])
    def test_matches_dense_oracle(self, variant, rng):
        mesh = jittered_rect_mesh(3, 2, seed=5)
        ops = compute_operators(mesh)
        cfg = make_config(variant=variant, beta=1.7)
        s, prev = random_state(2, mesh.n_vertices, rng), random_state(2, mesh.n_vertices, rng)
        got = species_residual(s, prev, cfg, ops, 0.03)
        np.testing.assert_allclose(got, dense_species_residual(mesh, ops, cfg, s, prev, 0.03), atol=1e-12)

    def test_dense_oracle_3d(self, rng):
        mesh = build_box_mesh(2, 1, 1)
        ops = compute_operators(mesh)
        cfg = make_config(n=3, variant="max")
        s, prev = random_state(3, mesh.n_vertices, rng), random_state(3, mesh.n_vertices, rng)
        np.testing.assert_allclose(species_residual(s, prev, cfg, ops, 0.1),
                                   dense_species_residual(mesh, ops, cfg, s, prev, 0.1), atol=1e-12)

    def test_unit_triangle_diffusion(self, unit_triangle):
        ops = compute_operators(unit_triangle)
        cfg = ProblemConfig(diffusion=[1.0], charge=[0.0], initial=[const(0.2)], time_step=1.0)
        # mu = (0, 1, 0): pick u with u/u0 = (1, e, 1)
        e = math.e
        u0 = np.array([0.5, 1 / (1 + e), 0.5])
        u = np.array([[0.5, e / (1 + e), 0.5]])
        s = State(u, np.zeros(3))
        wbar = u.mean() * u0.mean()
        R = species_residual(s, s, cfg, ops, 1.0)
        # vertex 2 is local index 1: a_21 * (1 - 0) + a_23 * (1 - 0) with a_21 = 1/2, a_23 = 0
        assert R[0, 1] == pytest.approx(wbar * 0.5, rel=1e-14)
        assert R.sum() == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("variant", ["max", "mean"])
    def test_constant_state_is_equilibrium(self, variant, test1_base_ops):
        cfg = make_config(variant=variant)
        nv = test1_base_ops.mesh.n_vertices
        s = State(np.full((2, nv), [[0.2], [0.35]]), np.full(nv, 0.7))
        assert np.max(np.abs(species_residual(s, s, cfg, test1_base_ops, 0.01))) <= 1e-14

    @given(st.integers(0, 10_000), st.sampled_from(["max", "mean"]))
    @settings(max_examples=25, deadline=None)
    def test_spatial_part_sums_to_zero(self, seed, variant):
        rng = np.random.default_rng(seed)
        mesh = jittered_rect_mesh(4, 3, seed=seed)
        ops = compute_operators(mesh)
        s = random_state(2, mesh.n_vertices, rng, low=1e-4)
        R = species_residual(s, s, make_config(variant=variant), ops, 1.0)
        assert np.max(np.abs(R.sum(axis=1))) <= 1e-12

    def test_time_part(self, rng, test1_base_ops):
        nv = test1_base_ops.mesh.n_vertices
        s, prev = random_state(2, nv, rng), random_state(2, nv, rng)
        R = species_residual(s, prev, make_config(), test1_base_ops, 0.02)
        expected = (test1_base_ops.dual_measure * (s.u - prev.u) / 0.02).sum(axis=1)
        np.testing.assert_allclose(R.sum(axis=1), expected, atol=1e-12)

    def test_poisson_affine_exact(self):
        mesh = jittered_rect_mesh(4, 4, seed=3, dirichlet_tags=(1, 2, 3, 4))
        ops = compute_operators(mesh)
        aff = lambda x: 0.5 - x[:, 0] + 2 * x[:, 1]  # noqa: E731
        cfg = make_config(charge=[0.0, 0.0], phi_dirichlet=aff)
        s = State(np.full((2, mesh.n_vertices), 0.2), aff(mesh.vertices))
        R = poisson_residual(s, cfg, ops, np.zeros(mesh.n_vertices))
        assert np.max(np.abs(R)) <= 1e-12
        assert np.all(R[mesh.dirichlet_vertices] == 0.0)

    def test_poisson_matches_dense_oracle(self, rng):
        mesh = jittered_rect_mesh(3, 3, seed=8)
        ops = compute_operators(mesh)
        cfg = make_config(lambda2=0.3, phi_dirichlet=lambda x: np.sin(x[:, 1]))
        s = random_state(2, mesh.n_vertices, rng)
        f_cell = rng.normal(size=mesh.n_vertices)
        np.testing.assert_allclose(poisson_residual(s, cfg, ops, f_cell),
                                   dense_poisson_residual(mesh, ops, cfg, s, f_cell), atol=1e-13)

    def test_solve_potential_affine(self):
        mesh = jittered_rect_mesh(5, 4, seed=9, dirichlet_tags=(1, 2, 3, 4))
        ops = compute_operators(mesh)
        aff = lambda x: 3 * x[:, 0] + x[:, 1] - 1  # noqa: E731
        cfg = make_config(charge=[1.0, -1.0], phi_dirichlet=aff)
        phi = Discretization(cfg, ops).solve_potential(np.full((2, mesh.n_vertices), 0.25))
        assert np.max(np.abs(phi - aff(mesh.vertices))) <= 1e-12

    def test_nonpositive_state_raises(self, test1_base_ops):
        nv = test1_base_ops.mesh.n_vertices
        u = np.full((2, nv), 0.2)
        u[1, 7] = -1e-3
        s = State(u, np.zeros(nv))
        with pytest.raises(DomainError):
            species_residual(s, s, make_config(), test1_base_ops, 0.1)


class TestJacobian:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_mean_variant_against_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        mesh = jittered_rect_mesh(3, 3, seed=seed)
        assert mesh.n_vertices <= 20
        ops = compute_operators(mesh)
        cfg = make_config(beta=0.8, lambda2=0.07, phi_dirichlet=lambda x: x[:, 0])
        disc = Discretization(cfg, ops)
        s, prev = random_state(2, mesh.n_vertices, rng), random_state(2, mesh.n_vertices, rng)
        J = disc.jacobian(s, 0.05).toarray()
        assert jacobian_deviation(J, fd_jacobian(disc, s, prev, 0.05)) <= 1e-6

    def test_three_species_3d(self, rng):
        mesh = build_box_mesh(1, 1, 1)
        ops = compute_operators(mesh)
        disc = Discretization(make_config(n=3), ops)
        s = random_state(3, mesh.n_vertices, rng)
        J = disc.jacobian(s, 0.1).toarray()
        assert jacobian_deviation(J, fd_jacobian(disc, s, s, 0.1)) <= 1e-6

    def test_max_variant_away_from_ties(self, rng):
        mesh = jittered_rect_mesh(3, 3, seed=11)
        ops = compute_operators(mesh)
        disc = Discretization(make_config(variant="max"), ops)
        s = random_state(2, mesh.n_vertices, rng)
        # distinct values: the max is locally smooth, so central differences apply
        assert len(np.unique(s.u)) == s.u.size
        J = disc.jacobian(s, 0.05).toarray()
        assert jacobian_deviation(J, fd_jacobian(disc, s, s, 0.05, h=1e-7)) <= 1e-5

    def test_uncharged_species_ignore_potential(self, rng, test1_base_ops):
        cfg = make_config(charge=[0.0, 0.0])
        nv = test1_base_ops.mesh.n_vertices
        s = random_state(2, nv, rng)
        J = assemble_jacobian(s, s, cfg, test1_base_ops, 0.01).toarray()
        phi_cols = np.arange(nv) * 3 + 2
        species_rows = np.setdiff1d(np.arange(3 * nv), phi_cols)
        assert np.all(J[np.ix_(species_rows, phi_cols)] == 0.0)

    def test_dirichlet_row_is_unit(self, rng, test1_base_ops):
        nv = test1_base_ops.mesh.n_vertices
        s = random_state(2, nv, rng)
        J = assemble_jacobian(s, s, make_config(), test1_base_ops, 0.01)
        csr = J.to_scipy()
        for v in test1_base_ops.mesh.dirichlet_vertices:
            row = csr.getrow(3 * v + 2)
            assert row.nnz == 1 and row.indices[0] == 3 * v + 2 and row.data[0] == 1.0

    def test_pattern_is_vertex_block_adjacency(self, rng):
        mesh = build_rect_mesh(2, 2)
        ops = compute_operators(mesh)
        J = Discretization(make_config(), ops).jacobian(random_state(2, mesh.n_vertices, rng), 0.1).toarray()
        adj = np.zeros((mesh.n_vertices,) * 2, dtype=bool)
        for S in mesh.simplices:
            adj[np.ix_(S, S)] = True
        block = np.abs(J).reshape(mesh.n_vertices, 3, mesh.n_vertices, 3).sum(axis=(1, 3)) > 0
        assert not np.any(block & ~adj)


class TestProjection:
    def test_test1_masses(self, test1_base_ops):
        cfg = ProblemConfig(diffusion=[1, 1], charge=[2, 1],
                            initial=[lambda x: 0.2 + 0.1 * (x[:, 0] - 1), const(0.4)],
                            phi_dirichlet=lambda x: 10 * (1 - x[:, 0]), time_step=5e-3)
        s = project_initial(cfg, test1_base_ops)
        M = s.u @ test1_base_ops.dual_measure
        assert abs(M[0] - 0.015) <= 1e-13 and abs(M[1] - 0.04) <= 1e-13
        mesh = test1_base_ops.mesh
        np.testing.assert_allclose(s.phi[mesh.dirichlet_vertices],
                                   10 * (1 - mesh.vertices[mesh.dirichlet_vertices, 0]), rtol=1e-15)
        assert np.all(s.phi[~mesh.dirichlet_mask] == 0.0)

    def test_constant_data(self, test1_base_ops):
        s = project_initial(make_config(), test1_base_ops)
        np.testing.assert_allclose(s.u, 0.2, rtol=1e-14)

    def test_clipping_is_logged(self, test1_base_ops, caplog):
        cfg = ProblemConfig(diffusion=[1], charge=[0], initial=[lambda x: np.maximum(0.0, 0.5 - x[:, 0])],
                            time_step=0.1)
        with caplog.at_level("WARNING"):
            s = project_initial(cfg, test1_base_ops)
        assert s.u.min() == pytest.approx(1e-12)
        assert any("clipped" in r.message for r in caplog.records)

    def test_oversaturated_data_rejected(self, test1_base_ops):
        cfg = ProblemConfig(diffusion=[1, 1], charge=[0, 0], initial=[const(0.6), const(0.5)], time_step=0.1)
        with pytest.raises(ConfigurationError):
            project_initial(cfg, test1_base_ops)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError, match="diffusion"):
            ProblemConfig(diffusion=[0.0], charge=[1], initial=[const(0.1)], time_step=0.1)
        with pytest.raises(ConfigurationError, match="tau"):
            ProblemConfig(diffusion=[1.0], charge=[1], initial=[const(0.1)])
        with pytest.raises(ConfigurationError, match="lambda2"):
            ProblemConfig(diffusion=[1.0], charge=[1], initial=[const(0.1)], lambda2=0, time_step=0.1)

    def test_time_grid(self):
        cfg = ProblemConfig(diffusion=[1.0], charge=[1], initial=[const(0.1)], time_step=5e-3, final_time=1.0)
        assert len(cfg.step_sizes()) == 200
        assert cfg.time_grid()[-1] == pytest.approx(1.0)

    def test_f_cell_matches_quadrature(self, test1_base_ops):
        cfg = make_config(source=lambda x: 1 + x[:, 0])
        disc = Discretization(cfg, test1_base_ops)
        np.testing.assert_allclose(disc.f_cell, dual_cell_integral(test1_base_ops, lambda x: 1 + x[:, 0]))
