"""Fast self-checks of the discretization, runnable from the command line."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, build_rect_mesh, compute_operators
from .scheme import (Discretization, ProblemConfig, State, concentrations_from_potentials,
                     potentials_from_concentrations)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} {self.value:.3e} (tol {self.tolerance:.0e})"


def jittered_rect_mesh(nx, ny, amplitude=0.2, seed=0, dirichlet_tags=None) -> Mesh:
    """Structured unit-square mesh with randomly displaced interior vertices."""
    base = build_rect_mesh(nx, ny)
    rng = np.random.default_rng(seed)
    v = base.vertices.copy()
    interior = np.all((v > 1e-12) & (v < 1 - 1e-12), axis=1)
    h = np.array([1.0 / nx, 1.0 / ny])
    v[interior] += amplitude * h * rng.uniform(-1, 1, size=(int(interior.sum()), 2))
    mesh = Mesh(v, base.simplices, base.boundary_faces, base.boundary_tags, base.dirichlet_tags)
    return mesh.with_dirichlet(dirichlet_tags) if dirichlet_tags is not None else mesh


def random_state(n_species, n_vertices, rng, low=0.05) -> State:
    """Interior state with every concentration (solvent included) at least ``low``."""
    w = rng.uniform(low, 1.0, size=(n_species + 1, n_vertices))
    w /= w.sum(axis=0)
    w = low + (1 - (n_species + 1) * low) * w
    return State(w[1:], rng.normal(size=n_vertices))


def fd_jacobian(disc: Discretization, state: State, prev: State, tau: float, h=1e-6) -> np.ndarray:
    """Central finite-difference Jacobian, step ``h * max(1, |x_j|)``."""
    x = state.to_vector()
    n = disc.n
    J = np.empty((len(x), len(x)))
    for j in range(len(x)):
        step = h * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        rp = disc.residual_vector(State.from_vector(xp, n), prev, tau)
        rm = disc.residual_vector(State.from_vector(xm, n), prev, tau)
        J[:, j] = (rp - rm) / (2 * step)
    return J


def jacobian_deviation(J, J_fd) -> float:
    """Largest entrywise relative deviation, entries below 1e-6 of the max counted absolutely."""
    J = np.asarray(J)
    scale = np.maximum(np.abs(J), 1e-6 * np.abs(J).max())
    return float(np.max(np.abs(J - J_fd) / scale))


def check_reference_triangle() -> CheckResult:
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    ops = compute_operators(mesh)
    a = ops.stiffness[0]
    err = max(abs(a[0, 1] - 0.5), abs(a[0, 2] - 0.5), abs(a[1, 2]), abs(a[1, 0] - 0.5), abs(a[2, 1]),
              float(np.max(np.abs(ops.dual_measure - 1 / 6))))
    return CheckResult("stiffness and dual cells, unit triangle", err <= 1e-14, err, 1e-14)


def check_row_sums(seed=1) -> CheckResult:
    ops = compute_operators(jittered_rect_mesh(5, 4, seed=seed))
    err = float(np.max(np.abs(ops.stiffness.sum(axis=2))))
    return CheckResult("stiffness row sums, jittered mesh", err <= 1e-13, err, 1e-13)


def check_round_trip(seed=2) -> CheckResult:
    rng = np.random.default_rng(seed)
    st = random_state(3, 200, rng, low=1e-6)
    u = concentrations_from_potentials(potentials_from_concentrations(st.u))
    err = float(np.max(np.abs(u - st.u)))
    return CheckResult("u -> mu -> u round trip", err <= 1e-12, err, 1e-12)


def check_jacobian(seed=3) -> CheckResult:
    rng = np.random.default_rng(seed)
    mesh = jittered_rect_mesh(3, 3, seed=seed)
    ops = compute_operators(mesh)
    cfg = ProblemConfig(diffusion=[1.0, 0.7], charge=[2.0, -1.0], initial=[lambda x: 0 * x[:, 0] + 0.2] * 2,
                        beta=1.3, lambda2=0.05, phi_dirichlet=lambda x: 1 - x[:, 0],
                        source=lambda x: x[:, 1], weight_variant="mean", time_step=0.01)
    disc = Discretization(cfg, ops)
    state = random_state(2, mesh.n_vertices, rng)
    prev = random_state(2, mesh.n_vertices, rng)
    J = disc.jacobian(state, 0.01).toarray()
    err = jacobian_deviation(J, fd_jacobian(disc, state, prev, 0.01))
    return CheckResult("Jacobian vs central differences", err <= 1e-6, err, 1e-6)


def check_poisson_affine(perturb_stiffness=0.0, seed=4) -> CheckResult:
    mesh = jittered_rect_mesh(4, 4, seed=seed, dirichlet_tags=(1, 2, 3, 4))
    ops = compute_operators(mesh)
    if perturb_stiffness:
        a = ops.stiffness.copy()
        a[:, 0, 1] *= 1 + perturb_stiffness
        a[:, 1, 0] *= 1 + perturb_stiffness
        ops = dataclasses.replace(ops, stiffness=a)

    def affine(x):
        return 1 + 2 * x[:, 0] - 3 * x[:, 1]

    cfg = ProblemConfig(diffusion=[1.0, 1.0], charge=[1.0, -1.0], initial=[lambda x: 0 * x[:, 0] + 0.3] * 2,
                        phi_dirichlet=affine, weight_variant="mean", time_step=0.01)
    phi = Discretization(cfg, ops).solve_potential(np.full((2, mesh.n_vertices), 0.3))
    err = float(np.max(np.abs(phi - affine(mesh.vertices))))
    return CheckResult("Poisson exactness on affine data", err <= 1e-12, err, 1e-12)


def run_checks(perturb_stiffness=0.0) -> list:
    """Run every self-check; ``perturb_stiffness`` injects a fault for testing."""
    return [
        check_reference_triangle(),
        check_row_sums(),
        check_round_trip(),
        check_jacobian(),
        check_poisson_affine(perturb_stiffness),
    ]
