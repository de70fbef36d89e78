"""Mesh-convergence studies on uniformly refined mesh families."""
from __future__ import annotations

import dataclasses
import logging
import math
import time

import numpy as np

from .diagnostics import ConvergenceTable, inject, l2_norm_p1
from .errors import InvalidArgumentError, StepFailure
from .mesh import Mesh, compute_operators, refine_uniform
from .newton import NewtonOptions, run_transient
from .scheme import ProblemConfig, WeightVariant

logger = logging.getLogger(__name__)


def refinement_family(base: Mesh, levels: int) -> list:
    """``[base, refine(base), ...]`` with ``levels + 1`` meshes."""
    meshes = [base]
    for _ in range(levels):
        meshes.append(refine_uniform(meshes[-1]))
    return meshes


def _warn_substeps(level, k, report):
    if report is not None and report.substeps > 1:
        logger.warning("level %d, step %d was split into %d sub-steps; its time discretization differs "
                       "from the other levels", level, k, report.substeps)


def convergence_study(problem: ProblemConfig, base: Mesh, levels: int, opts: NewtonOptions | None = None,
                      variant=None, meshes=None, on_level=None, callbacks=(),
                      reference_offset=1) -> ConvergenceTable:
    """Run ``problem`` on a refinement family and measure errors against its finest level.

    Errors are measured on levels ``0..levels - 1``.  The reference is level
    ``levels - 1 + reference_offset``; an offset above one moves it further
    away from the finest measured level, which shrinks the bias the
    reference's own error puts on the fitted slope.

    The error of level ``j`` is ``max_k sqrt(sum_i ||u_i^j - u_i^ref||^2)``
    over the shared time grid, measured on the finest mesh after injecting
    the coarse solution through the parent maps.  The potential error is
    recorded separately.  ``on_level(j, table, seconds)`` is called after
    each coarse level.  ``callbacks`` are passed on to every run.
    """
    if levels < 2:
        raise InvalidArgumentError("a convergence rate needs at least two error values (levels >= 2)")
    if reference_offset < 1:
        raise InvalidArgumentError("reference_offset must be at least 1")
    top = levels - 1 + reference_offset
    if variant is not None:
        problem = dataclasses.replace(problem, weight_variant=WeightVariant.parse(variant))
    meshes = meshes or refinement_family(base, top)
    if len(meshes) != top + 1:
        raise InvalidArgumentError("mesh family does not match the number of levels")
    fine = meshes[-1]
    ref_u, ref_phi = [], []

    def keep(k, t, state, report):
        _warn_substeps(top, k, report)
        ref_u.append(state.u.copy())
        ref_phi.append(state.phi.copy())

    t0 = time.perf_counter()
    try:
        run_transient(problem, fine, opts=opts, callbacks=[keep, *callbacks])
    except StepFailure as exc:
        exc.level = top
        raise StepFailure(f"level {top}: {exc}", exc.report, exc.time_index) from None
    logger.info("reference level %d (%d vertices) done in %.1fs", top, fine.n_vertices, time.perf_counter() - t0)

    table = ConvergenceTable(variant=problem.weight_variant.value)
    for j in range(levels):
        mesh = meshes[j]
        parents = [m.parent for m in meshes[j + 1:]]
        worst = [0.0, 0.0]

        def measure(k, t, state, report, parents=parents, worst=worst, j=j):
            _warn_substeps(j, k, report)
            e2 = sum(l2_norm_p1(inject(state.u[i], parents) - ref_u[k][i], fine) ** 2
                     for i in range(state.n_species))
            worst[0] = max(worst[0], math.sqrt(e2))
            worst[1] = max(worst[1], l2_norm_p1(inject(state.phi, parents) - ref_phi[k], fine))

        t0 = time.perf_counter()
        try:
            run_transient(problem, mesh, opts=opts, callbacks=[measure, *callbacks])
        except StepFailure as exc:
            exc.level = j
            raise StepFailure(f"level {j}: {exc}", exc.report, exc.time_index) from None
        ops = compute_operators(mesh)
        table.mesh_size.append(ops.mesh_size)
        table.n_vertices.append(mesh.n_vertices)
        table.n_simplices.append(mesh.n_simplices)
        table.error.append(worst[0])
        table.phi_error.append(worst[1])
        seconds = time.perf_counter() - t0
        logger.info("level %d: h=%.4g error=%.4e (%.1fs)", j, ops.mesh_size, worst[0], seconds)
        if on_level is not None:
            on_level(j, table, seconds)
    if not np.all(np.asarray(table.error) > 0):
        raise InvalidArgumentError("a level reproduced the reference exactly; no rate can be fitted")
    return table
