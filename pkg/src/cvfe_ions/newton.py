"""Damped Newton solve of each implicit step and the transient driver."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .diagnostics import RunHistory
from .errors import CVFEError, InvalidArgumentError, SolveError, StepFailure
from .mesh import Mesh, MeshOperators, compute_operators
from .scheme import Discretization, ProblemConfig, State, project_initial
from .sparse import factorize

logger = logging.getLogger(__name__)


@dataclass
class NewtonOptions:
    residual_tol: float = 1e-10
    step_tol: float = 1e-10
    max_iterations: int = 50
    min_damping: float = 2.0**-30
    substep_retries: int = 8
    reuse_jacobian: bool = False
    reuse_contraction: float = 0.5
    merit: str = "l2"

    def __post_init__(self):
        if min(self.residual_tol, self.step_tol, self.min_damping) <= 0:
            raise InvalidArgumentError("Newton tolerances must be positive")
        if self.max_iterations < 1 or self.substep_retries < 0:
            raise InvalidArgumentError("max_iterations must be >= 1 and substep_retries >= 0")
        if not self.min_damping < 1:
            raise InvalidArgumentError("min_damping must be < 1")
        if self.merit not in ("max", "l2"):
            raise InvalidArgumentError("merit must be 'max' or 'l2'")
        if not 0 < self.reuse_contraction < 1:
            raise InvalidArgumentError("reuse_contraction must lie in (0, 1)")


@dataclass
class StepReport:
    iterations: int = 0
    residual: float = float("inf")
    damping: list = field(default_factory=list)
    wall_time: float = 0.0
    substeps: int = 0
    converged: bool = False
    factorizations: int = 0


class _NewtonFailed(Exception):
    pass


_MERITS = {
    "max": lambda v: float(np.max(np.abs(v))),
    "l2": lambda v: float(np.sqrt(np.mean(v * v))),
}


def _interior(state: State) -> bool:
    return bool(np.all(state.u > 0) and np.all(state.u0 > 0))


class _Linearization:
    """LU factors of the Jacobian, optionally kept across iterations and steps."""

    def __init__(self, disc: Discretization):
        self.disc = disc
        self.lu = None
        self.tau = None
        self.fresh = False

    def refresh(self, state, tau, report):
        try:
            self.lu = factorize(self.disc.jacobian(state, tau), self.disc.dof_ordering)
        except SolveError as exc:
            self.lu = None
            raise _NewtonFailed(f"linear solve failed: {exc}") from None
        self.tau = tau
        self.fresh = True
        report.factorizations += 1

    def direction(self, state, tau, res, report):
        if self.lu is None or self.tau != tau:
            self.refresh(state, tau, report)
        return self.lu.solve(-res)


def _initial_guess(disc: Discretization, prev: State, scale, tol) -> State:
    """``prev`` with its potential made consistent with its own charge density."""
    state = prev.copy()
    n = disc.n
    rp = disc.poisson_residual(state)
    if np.max(np.abs(rp * scale[n::n + 1])) > tol:
        try:
            state.phi = disc.solve_potential(prev.u)
        except SolveError as exc:
            raise _NewtonFailed(f"potential solve failed: {exc}") from None
    return state


def _newton(disc: Discretization, prev: State, tau: float, opts: NewtonOptions, report: StepReport,
            lin: _Linearization | None = None) -> State:
    n = disc.n
    lin = lin or _Linearization(disc)
    scale = disc.row_scaling(tau)
    merit_of = _MERITS[opts.merit]
    state = _initial_guess(disc, prev, scale, opts.residual_tol)
    x = state.to_vector()
    res = disc.residual_vector(state, prev, tau)
    r = float(np.max(np.abs(scale * res)))
    m = merit_of(scale * res)

    def trial_of(dx, alpha):
        trial = State.from_vector(x + alpha * dx, n)
        if not _interior(trial):
            return trial, None, float("inf"), float("inf")
        res_t = disc.residual_vector(trial, prev, tau)
        return trial, res_t, float(np.max(np.abs(scale * res_t))), merit_of(scale * res_t)

    for it in range(1, opts.max_iterations + 1):
        if not opts.reuse_jacobian:
            lin.lu = None
        dx = lin.direction(state, tau, res, report)
        alpha = 1.0
        trial, res_t, r_t, m_t = trial_of(dx, alpha)
        accepted = r_t <= opts.residual_tol or m_t < (opts.reuse_contraction * m if not lin.fresh else m)
        if not accepted and not lin.fresh:
            # the stored factors are out of date: relinearize before damping
            lin.refresh(state, tau, report)
            dx = lin.lu.solve(-res)
            trial, res_t, r_t, m_t = trial_of(dx, alpha)
            accepted = m_t < m or r_t <= opts.residual_tol
        while not accepted:
            alpha *= 0.5
            if alpha < opts.min_damping:
                report.iterations += it
                lin.lu = None
                raise _NewtonFailed(f"damping fell below {opts.min_damping:g} at iteration {it} (residual {r:.3e})")
            trial, res_t, r_t, m_t = trial_of(dx, alpha)
            accepted = m_t < m or r_t <= opts.residual_tol
        report.damping.append(alpha)
        was_fresh, lin.fresh = lin.fresh, False
        x = x + alpha * dx
        state, res, r, m = trial, res_t, r_t, m_t
        report.residual = r
        if r <= opts.residual_tol:
            report.iterations += it
            return state
        if alpha * float(np.max(np.abs(dx))) <= opts.step_tol:
            if not was_fresh:
                lin.lu = None
                continue
            report.iterations += it
            raise _NewtonFailed(f"Newton stagnated at residual {r:.3e}")
    report.iterations += opts.max_iterations
    raise _NewtonFailed(f"no convergence in {opts.max_iterations} iterations (residual {r:.3e})")


def _advance(disc, prev, tau, opts, report, depth, lin):
    try:
        out = _newton(disc, prev, tau, opts, report, lin)
        report.substeps += 1
        return out
    except _NewtonFailed as exc:
        if depth >= opts.substep_retries:
            raise StepFailure(f"step failed after {depth} halvings: {exc}", report) from None
        logger.info("Newton failed (%s); retrying with tau = %g", exc, tau / 2)
        mid = _advance(disc, prev, tau / 2, opts, report, depth + 1, lin)
        return _advance(disc, mid, tau / 2, opts, report, depth + 1, lin)


def solve_time_step(prev: State, config: ProblemConfig, ops: MeshOperators, tau: float,
                    opts: NewtonOptions | None = None, disc: Discretization | None = None,
                    _lin: _Linearization | None = None):
    """Advance ``prev`` by ``tau``; returns ``(state, StepReport)``.

    Newton runs on ``(u, phi)`` starting from ``prev``.  A step is halved
    whenever the trial state leaves the simplex ``u_i > 0, u_0 > 0`` or the
    scaled residual does not decrease.  If Newton still fails, the time step
    is split in two halves, recursively up to ``opts.substep_retries`` times.

    With ``opts.reuse_jacobian`` the LU factors are kept while each full
    step still contracts the residual by ``opts.reuse_contraction``;
    otherwise every iteration refactorizes.  The stopping test is the same
    in both modes.
    """
    opts = opts or NewtonOptions()
    disc = disc or Discretization(config, ops)
    if not _interior(prev):
        raise InvalidArgumentError("previous state must be strictly inside the concentration simplex")
    report = StepReport()
    t0 = time.perf_counter()
    try:
        state = _advance(disc, prev, float(tau), opts, report, 0, _lin or _Linearization(disc))
    finally:
        report.wall_time = time.perf_counter() - t0
    report.converged = True
    state.time_index = prev.time_index + 1
    return state, report


def run_transient(config: ProblemConfig, mesh: Mesh, ops: MeshOperators | None = None,
                  opts: NewtonOptions | None = None,
                  callbacks: Iterable[Callable] = (), keep_states=False) -> RunHistory:
    """Project the initial data and march to the final time.

    Each callback is called as ``cb(k, t, state, report)`` after every
    accepted step, and once with ``k = 0`` for the initial state.
    """
    ops = ops or compute_operators(mesh)
    opts = opts or NewtonOptions()
    disc = Discretization(config, ops)
    lin = _Linearization(disc)
    callbacks = list(callbacks)
    state = project_initial(config, ops)
    history = RunHistory(config.n_species)
    history.record(0.0, state, ops, None, keep_states)
    for cb in callbacks:
        cb(0, 0.0, state, None)
    t = 0.0
    for k, tau in enumerate(config.step_sizes(), start=1):
        try:
            state, report = solve_time_step(state, config, ops, tau, opts, disc, lin)
        except StepFailure as exc:
            exc.time_index = k
            raise StepFailure(f"time step {k}: {exc}", exc.report, k) from None
        t += tau
        history.record(t, state, ops, report, keep_states)
        for cb in callbacks:
            cb(k, t, state, report)
        logger.debug("step %d t=%.4g iters=%d res=%.2e", k, t, report.iterations, report.residual)
    return history
