"""Runtime invariants (mass, entropy) and error norms for convergence studies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, InvalidArgumentError
from .mesh import Mesh, _signed_volumes


def zeta(x):
    """Entropy density ``x (log x - 1) + 1``; defined here for ``x > 0`` only."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("entropy density needs strictly positive concentrations")
    return x * (np.log(x) - 1.0) + 1.0


def masses(state, ops) -> np.ndarray:
    """``M_i = sum_K |K| u_{i,K}`` for ``i = 0..n`` (solvent first)."""
    return state.all_concentrations() @ ops.dual_measure


def entropy(state, ops) -> float:
    """Discrete entropy ``sum_{i=0..n} sum_K |K| zeta(u_{i,K})``."""
    return float(np.sum(zeta(state.all_concentrations()) @ ops.dual_measure))


@dataclass
class RunHistory:
    """Per-step record of a transient run; row ``k`` is time level ``t^k``."""

    n_species: int
    times: list = field(default_factory=list)
    masses: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    umin: list = field(default_factory=list)
    umax: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    states: list | None = None

    def record(self, t, state, ops, report=None, keep_state=False):
        conc = state.all_concentrations()
        self.times.append(float(t))
        self.masses.append(conc @ ops.dual_measure)
        self.entropy.append(entropy(state, ops))
        self.umin.append(conc.min(axis=1))
        self.umax.append(conc.max(axis=1))
        self.reports.append(report)
        if keep_state:
            if self.states is None:
                self.states = []
            self.states.append(state.copy())

    @property
    def n_steps(self):
        return len(self.times) - 1

    def mass_array(self):
        return np.array(self.masses)

    def entropy_array(self):
        return np.array(self.entropy)


@dataclass
class ConvergenceTable:
    variant: str
    mesh_size: list = field(default_factory=list)
    n_vertices: list = field(default_factory=list)
    n_simplices: list = field(default_factory=list)
    error: list = field(default_factory=list)
    phi_error: list = field(default_factory=list)

    @property
    def rates(self):
        return consecutive_rates(list(zip(self.mesh_size, self.error)))

    @property
    def slope(self):
        return fit_rate(list(zip(self.mesh_size, self.error)))


# --------------------------------------------------------------------------
# nested meshes


def inject(coarse_field, parents: Sequence[np.ndarray]) -> np.ndarray:
    """Interpolate a P1 field through successive refinements.

    ``parents[j]`` is the parent map from level ``j`` to ``j + 1``; every
    fine vertex averages its two parents (equal for inherited vertices).
    """
    f = np.asarray(coarse_field, dtype=float)
    for p in parents:
        p = np.asarray(p)
        if p.ndim != 2 or p.shape[1] != 2 or (len(p) and p.max() >= len(f)):
            raise InvalidArgumentError("parent map does not match the field it is applied to")
        f = 0.5 * (f[p[:, 0]] + f[p[:, 1]])
    return f


def l2_norm_p1(values, mesh: Mesh) -> float:
    """Exact L2 norm of a P1 function given by its vertex values."""
    e = np.asarray(values, dtype=float)[mesh.simplices]
    d = mesh.dim
    vol = np.abs(_signed_volumes(mesh.vertices, mesh.simplices))
    local = (np.sum(e * e, axis=1) + np.sum(e, axis=1) ** 2) / ((d + 1) * (d + 2))
    return math.sqrt(max(float(vol @ local), 0.0))


def nested_l2_error(coarse_field, fine_field, parents, fine_mesh: Mesh) -> float:
    """L2 distance between a coarse P1 field and a field on a refined mesh."""
    fine_field = np.asarray(fine_field, dtype=float)
    if len(fine_field) != fine_mesh.n_vertices:
        raise InvalidArgumentError("fine field does not match the fine mesh")
    injected = inject(coarse_field, parents)
    if len(injected) != len(fine_field):
        raise InvalidArgumentError("meshes are not nested through the given parent maps")
    return l2_norm_p1(injected - fine_field, fine_mesh)


def trajectory_error(history_a: RunHistory, history_b: RunHistory, parents, fine_mesh: Mesh) -> float:
    """``max_k sqrt(sum_i ||u_i^a - u_i^b||^2)`` over ion species.

    ``history_a`` lives on the coarse mesh, ``history_b`` on ``fine_mesh``;
    both must carry states on identical time grids.
    """
    if history_a.states is None or history_b.states is None:
        raise InvalidArgumentError("histories must store states")
    ta, tb = np.asarray(history_a.times), np.asarray(history_b.times)
    if ta.shape != tb.shape or np.any(np.abs(ta - tb) > 1e-12 * max(1.0, float(np.abs(tb).max(initial=0)))):
        raise InvalidArgumentError("histories have different time grids")
    worst = 0.0
    for sa, sb in zip(history_a.states, history_b.states):
        err = math.sqrt(sum(nested_l2_error(sa.u[i], sb.u[i], parents, fine_mesh) ** 2 for i in range(sa.n_species)))
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# rates


def _check_pairs(pairs):
    pairs = np.asarray(pairs, dtype=float)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or len(pairs) < 2:
        raise InvalidArgumentError("need at least two (h, error) pairs")
    if np.any(pairs <= 0):
        raise InvalidArgumentError("mesh sizes and errors must be positive")
    return pairs


def fit_rate(pairs) -> float:
    """Least-squares slope of log(error) against log(h)."""
    pairs = _check_pairs(pairs)
    slope, _ = np.polyfit(np.log(pairs[:, 0]), np.log(pairs[:, 1]), 1)
    return float(slope)


def consecutive_rates(pairs) -> list:
    pairs = _check_pairs(pairs)
    lh, le = np.log(pairs[:, 0]), np.log(pairs[:, 1])
    return [float(r) for r in np.diff(le) / np.diff(lh)]
