"""The CVFE time step for the volume-filling ion transport system.

Unknowns per vertex are the ion concentrations ``u_1..u_n`` and the
potential ``phi``; the solvent fraction ``u_0 = 1 - sum_i u_i`` is always
derived, never stored.  Fluxes are written in the entropy variables
``mu_i = log(u_i / u_0)``, which are recomputed from ``u`` on the fly.

Global unknown ordering is vertex-major: dof ``v * (n + 1) + i`` is
``u_{i+1}`` at vertex ``v`` for ``i < n`` and dof ``v * (n + 1) + n`` is
``phi`` at vertex ``v``.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, DomainError, InvalidArgumentError
from .mesh import MeshOperators, dual_cell_integral, nested_dissection_order
from .sparse import SparseMatrix, from_triplets, solve

logger = logging.getLogger(__name__)

CLIP_FLOOR = 1e-12

Field = Callable[[np.ndarray], np.ndarray]


class WeightVariant(str, enum.Enum):
    """How the per-simplex flux weights are formed from vertex values."""

    MAX = "max"
    MEAN = "mean"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"max": cls.MAX, "maxvertex": cls.MAX, "mean": cls.MEAN, "arithmeticmean": cls.MEAN}
        try:
            return aliases[key]
        except KeyError:
            raise InvalidArgumentError(f"unknown weight variant {value!r}") from None


def _constant(c):
    def f(x):
        return np.full(len(x), float(c))

    return f


@dataclass
class ProblemConfig:
    """Physical data, boundary data and time grid of one simulation.

    Field callables take an ``(P, d)`` array of points and return ``P``
    values.
    """

    diffusion: Sequence[float]
    charge: Sequence[float]
    initial: Sequence[Field]
    beta: float = 1.0
    lambda2: float = 1e-2
    phi_dirichlet: Field = field(default_factory=lambda: _constant(0.0))
    source: Field = field(default_factory=lambda: _constant(0.0))
    weight_variant: WeightVariant = WeightVariant.MEAN
    final_time: float = 1.0
    time_step: float | None = None
    time_steps: Sequence[float] | None = None
    name: str = "custom"

    def __post_init__(self):
        self.diffusion = np.asarray(self.diffusion, dtype=float).ravel()
        self.charge = np.asarray(self.charge, dtype=float).ravel()
        n = len(self.diffusion)
        if n < 1:
            raise ConfigurationError("need at least one ion species", "species")
        if len(self.charge) != n or len(self.initial) != n:
            raise ConfigurationError("diffusion, charge and initial must have one entry per species", "species")
        if np.any(self.diffusion <= 0) or not np.all(np.isfinite(self.diffusion)):
            raise ConfigurationError("diffusion coefficients must be positive", "diffusion")
        if not np.all(np.isfinite(self.charge)):
            raise ConfigurationError("charges must be finite", "charge")
        if not self.beta > 0:
            raise ConfigurationError("beta must be positive", "beta")
        if not self.lambda2 > 0:
            raise ConfigurationError("lambda2 must be positive", "lambda2")
        self.weight_variant = WeightVariant.parse(self.weight_variant)
        if self.time_steps is not None:
            steps = np.asarray(self.time_steps, dtype=float).ravel()
            if len(steps) == 0 or np.any(steps <= 0):
                raise ConfigurationError("time steps must be positive", "time_steps")
            self.time_steps = steps
            self.final_time = float(steps.sum())
        else:
            if self.time_step is None or not self.time_step > 0:
                raise ConfigurationError("tau must be positive", "tau")
            if not self.final_time > 0:
                raise ConfigurationError("final time must be positive", "T")

    @property
    def n_species(self) -> int:
        return len(self.diffusion)

    def step_sizes(self) -> np.ndarray:
        if self.time_steps is not None:
            return np.array(self.time_steps)
        n = int(round(self.final_time / self.time_step))
        if n < 1 or abs(n * self.time_step - self.final_time) > 1e-9 * self.final_time:
            raise ConfigurationError("final time must be a multiple of tau", "T")
        return np.full(n, float(self.time_step))

    def time_grid(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.step_sizes())])


@dataclass
class State:
    """Concentrations ``u`` (shape ``(n, N)``) and potential ``phi`` at one time level."""

    u: np.ndarray
    phi: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.phi = np.asarray(self.phi, dtype=float).ravel()
        if self.u.shape[1] != len(self.phi):
            raise InvalidArgumentError("u and phi disagree on the number of vertices")

    @property
    def u0(self) -> np.ndarray:
        return 1.0 - self.u.sum(axis=0)

    @property
    def n_species(self):
        return self.u.shape[0]

    def all_concentrations(self) -> np.ndarray:
        """Stack ``(u_0, u_1, ..., u_n)``."""
        return np.vstack([self.u0[None, :], self.u])

    def copy(self):
        return State(self.u.copy(), self.phi.copy(), self.time_index)

    def to_vector(self) -> np.ndarray:
        return np.vstack([self.u, self.phi[None, :]]).T.ravel()

    @classmethod
    def from_vector(cls, x, n_species, time_index=0):
        blocks = np.asarray(x).reshape(-1, n_species + 1).T
        return cls(blocks[:n_species].copy(), blocks[n_species].copy(), time_index)


@dataclass
class EdgeWeights:
    """Per-simplex weights ``ubar_{0,S}`` and ``ubar_{i,S}``.

    For the max variant ``*_arg`` hold the local vertex realising the max.
    """

    solvent: np.ndarray
    species: np.ndarray
    solvent_arg: np.ndarray | None = None
    species_arg: np.ndarray | None = None

    @property
    def product(self):
        return self.solvent[None, :] * self.species


# --------------------------------------------------------------------------
# entropy variables


def concentrations_from_potentials(mu, return_solvent=False):
    """Map entropy variables to concentrations.

    ``u_i = exp(mu_i) / (1 + sum_j exp(mu_j))``, evaluated after shifting the
    exponents by ``max(0, max_j mu_j)`` so that no exponential overflows.
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    if not np.all(np.isfinite(mu)):
        raise InvalidArgumentError("entropy variables must be finite")
    shift = np.maximum(0.0, mu.max(axis=0))
    e = np.exp(mu - shift)
    e0 = np.exp(-shift)
    denom = e0 + e.sum(axis=0)
    u = e / denom
    if return_solvent:
        return u, e0 / denom
    return u


def _check_positive(u, u0):
    if np.any(u <= 0):
        i, k = np.argwhere(u <= 0)[0]
        raise DomainError(f"nonpositive concentration u_{i + 1} at vertex {k}", vertex=int(k), species=int(i + 1))
    if np.any(u0 <= 0):
        k = int(np.argmax(u0 <= 0))
        raise DomainError(f"nonpositive solvent concentration at vertex {k}", vertex=k, species=0)


def potentials_from_concentrations(u) -> np.ndarray:
    u = np.atleast_2d(np.asarray(u, dtype=float))
    u0 = 1.0 - u.sum(axis=0)
    _check_positive(u, u0)
    return np.log(u) - np.log(u0)[None, :]


# --------------------------------------------------------------------------
# weights


def _argmax_lowest_index(vals, simplices):
    """Local argmax along the last axis, ties resolved by lowest global vertex."""
    m = vals.max(axis=-1, keepdims=True)
    big = np.iinfo(np.int64).max
    key = np.where(vals == m, simplices, big)
    return np.argmin(key, axis=-1)


def edge_weights(u, variant, ops_or_simplices) -> EdgeWeights:
    """Flux weights from vertex concentrations ``u`` (shape ``(n, N)``)."""
    simplices = getattr(getattr(ops_or_simplices, "mesh", None), "simplices", ops_or_simplices)
    simplices = np.asarray(simplices)
    u = np.atleast_2d(u)
    variant = WeightVariant.parse(variant)
    u0 = 1.0 - u.sum(axis=0)
    loc = u[:, simplices]  # (n, M, d+1)
    loc0 = u0[simplices]
    if variant is WeightVariant.MEAN:
        return EdgeWeights(loc0.mean(axis=-1), loc.mean(axis=-1))
    arg0 = _argmax_lowest_index(loc0, simplices)
    argi = _argmax_lowest_index(loc, simplices[None])
    w0 = np.take_along_axis(loc0, arg0[:, None], axis=-1)[:, 0]
    wi = np.take_along_axis(loc, argi[..., None], axis=-1)[..., 0]
    return EdgeWeights(w0, wi, arg0, argi)


# --------------------------------------------------------------------------
# assembly


class Discretization:
    """Residual and Jacobian of the coupled time step on a fixed mesh.

    Precomputes the Dirichlet data, the dual-cell integrals of the source
    and the sparsity pattern of the Jacobian.
    """

    def __init__(self, config: ProblemConfig, ops: MeshOperators, f_cell=None):
        self.config = config
        self.ops = ops
        mesh = ops.mesh
        self.n = config.n_species
        self.nv = mesh.n_vertices
        self.ndof = self.nv * (self.n + 1)
        self.d = mesh.dim
        self.simplices = mesh.simplices
        self.area = ops.dual_measure
        self.dirichlet = mesh.dirichlet_vertices
        self.dmask = mesh.dirichlet_mask
        pts = mesh.vertices[self.dirichlet]
        self.phi_d = np.asarray(config.phi_dirichlet(pts), dtype=float) if len(pts) else np.zeros(0)
        self.phi_d = np.broadcast_to(self.phi_d, (len(self.dirichlet),)).copy()
        self.f_cell = dual_cell_integral(ops, config.source) if f_cell is None else np.asarray(f_cell, float)
        a = ops.stiffness
        # derivative of sum_l a_kl (psi_k - psi_l) with respect to psi_m
        rs = a.sum(axis=2) - np.einsum("skk->sk", a)
        c = -a.copy()
        idx = np.arange(self.d + 1)
        c[:, idx, idx] = rs
        self.dflux = c
        self._pattern = None
        self._ordering = None

    @property
    def dof_ordering(self) -> np.ndarray:
        """Nested-dissection permutation of the unknowns, vertex blocks kept together."""
        if self._ordering is None:
            order = nested_dissection_order(self.ops.mesh)
            n1 = self.n + 1
            self._ordering = (order[:, None] * n1 + np.arange(n1)[None, :]).ravel()
        return self._ordering

    # -- residual ---------------------------------------------------------

    def _flux_sum(self, psi):
        """sum_L a_KL (psi_K - psi_L) per simplex; psi has shape (..., M, d+1)."""
        diff = psi[..., :, None] - psi[..., None, :]
        return np.einsum("skl,...skl->...sk", self.ops.stiffness, diff)

    def _scatter(self, local):
        """Scatter-add (..., M, d+1) local values to (..., N) vertex values."""
        lead = local.shape[:-2]
        flat = local.reshape(-1, local.shape[-2] * local.shape[-1])
        idx = self.simplices.ravel()
        out = np.stack([np.bincount(idx, weights=row, minlength=self.nv) for row in flat])
        return out.reshape(lead + (self.nv,))

    def species_residual(self, state: State, prev: State, tau: float) -> np.ndarray:
        cfg = self.config
        u = state.u
        mu = potentials_from_concentrations(u)
        psi = mu + cfg.beta * cfg.charge[:, None] * state.phi[None, :]
        w = edge_weights(u, cfg.weight_variant, self.simplices)
        g = self._flux_sum(psi[:, self.simplices]) * cfg.diffusion[:, None, None]
        spatial = self._scatter(w.product[..., None] * g)
        return self.area[None, :] * (u - prev.u) / tau + spatial

    def poisson_residual(self, state: State) -> np.ndarray:
        cfg = self.config
        lap = self._scatter(cfg.lambda2 * self._flux_sum(state.phi[self.simplices])[None])[0]
        r = lap - self.area * (cfg.charge @ state.u) - self.f_cell
        r[self.dirichlet] = state.phi[self.dirichlet] - self.phi_d
        return r

    def residual_vector(self, state, prev, tau) -> np.ndarray:
        rs = self.species_residual(state, prev, tau)
        rp = self.poisson_residual(state)
        return np.vstack([rs, rp[None, :]]).T.ravel()

    def row_scaling(self, tau) -> np.ndarray:
        """Row weights making residuals dimensionless (see Newton stopping test)."""
        s = np.empty((self.n + 1, self.nv))
        s[: self.n] = tau / self.area[None, :]
        s[self.n] = 1.0 / (self.config.lambda2 + self.area)
        return s.T.ravel()

    def solve_potential(self, u) -> np.ndarray:
        """Potential solving the discrete Poisson equation for fixed concentrations."""
        sim = self.simplices
        d1 = self.d + 1
        rows = np.broadcast_to(sim[:, :, None], (len(sim), d1, d1)).ravel()
        cols = np.broadcast_to(sim[:, None, :], (len(sim), d1, d1)).ravel()
        vals = (self.config.lambda2 * self.dflux).ravel()
        keep = ~self.dmask[rows]
        A = from_triplets(self.nv, self.nv,
                          i=np.concatenate([rows[keep], self.dirichlet]),
                          j=np.concatenate([cols[keep], self.dirichlet]),
                          v=np.concatenate([vals[keep], np.ones(len(self.dirichlet))]))
        b = self.area * (self.config.charge @ np.asarray(u, dtype=float)) + self.f_cell
        b[self.dirichlet] = self.phi_d
        return solve(A, b)

    # -- Jacobian ---------------------------------------------------------

    def _build_pattern(self):
        n1, d1 = self.n + 1, self.d + 1
        sim = self.simplices
        comp = np.arange(n1)
        rows = (sim[:, :, None, None, None] * n1 + comp[None, None, :, None, None])
        cols = (sim[:, None, None, :, None] * n1 + comp[None, None, None, None, :])
        rows = np.broadcast_to(rows, (len(sim), d1, n1, d1, n1)).ravel()
        cols = np.broadcast_to(cols, (len(sim), d1, n1, d1, n1)).ravel()
        dirichlet_phi_rows = np.zeros(self.ndof, dtype=bool)
        dirichlet_phi_rows[self.dirichlet * n1 + self.n] = True
        keep = ~dirichlet_phi_rows[rows]
        # vertex-local couplings: time term and charge term
        v = np.arange(self.nv)
        free = v[~self.dmask]
        vr = np.concatenate([v * n1 + i for i in range(self.n)] + [free * n1 + self.n for _ in range(self.n)]
                            + [self.dirichlet * n1 + self.n])
        vc = np.concatenate([v * n1 + i for i in range(self.n)] + [free * n1 + j for j in range(self.n)]
                            + [self.dirichlet * n1 + self.n])
        all_r = np.concatenate([rows[keep], vr])
        all_c = np.concatenate([cols[keep], vc])
        keys = all_r * self.ndof + all_c
        uniq, inv = np.unique(keys, return_inverse=True)
        indptr = np.zeros(self.ndof + 1, dtype=np.int64)
        np.add.at(indptr, uniq // self.ndof + 1, 1)
        self._pattern = dict(
            keep=keep,
            inv=inv,
            indices=(uniq % self.ndof).astype(np.int64),
            indptr=np.cumsum(indptr),
            nnz=len(uniq),
        )

    def local_jacobians(self, state: State) -> np.ndarray:
        """Element contributions, shape (M, d+1, n+1, d+1, n+1)."""
        cfg = self.config
        n, d1 = self.n, self.d + 1
        u = state.u
        u0 = state.u0
        mu = potentials_from_concentrations(u)
        psi = mu + cfg.beta * cfg.charge[:, None] * state.phi[None, :]
        w = edge_weights(u, cfg.weight_variant, self.simplices)
        sim = self.simplices
        M = len(sim)
        C = self.dflux
        g = self._flux_sum(psi[:, sim]) * cfg.diffusion[:, None, None]  # (n, M, d+1)
        wd = (w.product * cfg.diffusion[:, None]).T  # (M, n)

        # d psi_{i,m} / d u_{j,m}
        inv_u = 1.0 / u[:, sim]  # (n, M, d+1)
        inv_u0 = 1.0 / u0[sim]  # (M, d+1)
        P = np.broadcast_to(inv_u0[:, :, None, None], (M, d1, n, n)).copy()
        ii = np.arange(n)
        P[:, :, ii, ii] += np.transpose(inv_u, (1, 2, 0))

        # d W_i / d u_{j,m}: (M, n, d+1, n)
        if cfg.weight_variant is WeightVariant.MEAN:
            dW = np.broadcast_to((-w.species.T)[:, :, None, None], (M, n, d1, n)).copy()
            dW[:, ii, :, ii] += w.solvent[None, :, None]
            dW /= d1
        else:
            dW = np.zeros((M, n, d1, n))
            rows = np.arange(M)
            for i in range(n):
                dW[rows, i, w.solvent_arg, :] -= w.species[i][:, None]
                dW[rows, i, w.species_arg[i], i] += w.solvent
        J = np.zeros((M, d1, n + 1, d1, n + 1))
        J[:, :, :n, :, :n] = (
            np.einsum("si,skm,smij->skimj", wd, C, P)
            + np.einsum("isk,simj->skimj", g, dW)
        )
        J[:, :, :n, :, n] = np.einsum("si,skm->skim", wd * (cfg.beta * cfg.charge)[None, :], C)
        J[:, :, n, :, n] = cfg.lambda2 * C
        return J

    def jacobian(self, state: State, tau: float) -> SparseMatrix:
        if self._pattern is None:
            self._build_pattern()
        pat = self._pattern
        _check_positive(state.u, state.u0)
        local = self.local_jacobians(state).ravel()[pat["keep"]]
        vals = np.concatenate(
            [np.tile(self.area / tau, self.n)]
            + [-self.area[~self.dmask] * self.config.charge[j] for j in range(self.n)]
            + [np.ones(len(self.dirichlet))]
        )
        data = np.bincount(pat["inv"], weights=np.concatenate([local, vals]), minlength=pat["nnz"])
        csr = sp.csr_matrix((data, pat["indices"], pat["indptr"]), shape=(self.ndof, self.ndof))
        return SparseMatrix(csr)


# --------------------------------------------------------------------------
# functional interface


def species_residual(state, prev, config, ops, tau):
    """Residual of the species balances on every dual cell, shape ``(n, N)``."""
    return Discretization(config, ops, f_cell=np.zeros(ops.mesh.n_vertices)).species_residual(state, prev, tau)


def poisson_residual(state, config, ops, f_cell):
    """Residual of the discrete Poisson equation; Dirichlet rows hold ``phi - phi_D``."""
    return Discretization(config, ops, f_cell=f_cell).poisson_residual(state)


def assemble_jacobian(state, prev, config, ops, tau) -> SparseMatrix:
    """Analytic Jacobian of the coupled residual with respect to ``(u, phi)``.

    ``prev`` enters the residual only through a constant, so it does not
    affect the matrix; it is accepted for symmetry with the residuals.
    """
    return Discretization(config, ops, f_cell=np.zeros(ops.mesh.n_vertices)).jacobian(state, tau)


def project_initial(config: ProblemConfig, ops: MeshOperators) -> State:
    """Dual-cell averages of the initial data, with the Dirichlet lifting for phi."""
    area = ops.dual_measure
    u = np.array([dual_cell_integral(ops, g) / area for g in config.initial])
    pts = ops.subcell_centroids.reshape(-1, ops.dim)
    sampled = np.array([np.broadcast_to(np.asarray(g(pts), float), (len(pts),)) for g in config.initial])
    if np.any(sampled < -1e-10) or np.any(sampled.sum(axis=0) > 1 + 1e-10):
        raise ConfigurationError("initial data must satisfy u_i >= 0 and sum_i u_i <= 1", "initial")
    total = u.sum(axis=0)
    if np.any(total > 1 + 1e-10):
        k = int(np.argmax(total))
        raise ConfigurationError(f"projected initial concentrations sum to {total[k]:.6g} > 1 at vertex {k}", "initial")
    clipped = np.clip(u, CLIP_FLOOR, 1 - CLIP_FLOOR)
    total = clipped.sum(axis=0)
    over = total > 1 - CLIP_FLOOR
    clipped[:, over] *= (1 - CLIP_FLOOR) / total[over]
    changed = np.count_nonzero(np.any(clipped != u, axis=0))
    if changed:
        logger.warning("initial data clipped to [%g, 1 - %g] at %d vertices", CLIP_FLOOR, CLIP_FLOOR, changed)
    mesh = ops.mesh
    phi = np.zeros(mesh.n_vertices)
    if len(mesh.dirichlet_vertices):
        phi[mesh.dirichlet_vertices] = config.phi_dirichlet(mesh.vertices[mesh.dirichlet_vertices])
    return State(clipped, phi, 0)
