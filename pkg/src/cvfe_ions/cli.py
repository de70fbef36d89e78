"""Command-line front end: ``cvfe-ions run|convergence|check``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .checks import run_checks
from .errors import CVFEError, StepFailure
from .io import write_convergence_csv, write_history_csv, write_vtk
from .mesh import compute_operators
from .newton import run_transient
from .scenarios import load_config
from .study import convergence_study

logger = logging.getLogger("cvfe_ions")


def _out_dir(args, rc):
    out = Path(args.out) if args.out else (rc.out_dir or Path("."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    rc = load_config(args.config)
    out = _out_dir(args, rc)
    stride = args.snapshot_stride if args.snapshot_stride is not None else rc.snapshot_stride
    ops = compute_operators(rc.mesh)
    n_steps = len(rc.problem.step_sizes())

    def snapshot(k, t, state, report):
        if stride and (k % stride == 0 or k == n_steps):
            write_vtk(out / f"field_{k}.vtk", rc.mesh, state, f"{rc.name} step {k} t={t!r}")

    def progress(k, t, state, report):
        if report is not None:
            logger.info("step %d/%d t=%.6g newton=%d residual=%.2e", k, n_steps, t, report.iterations,
                        report.residual)

    logger.info("%s: %d vertices, %d simplices, %d steps", rc.name, rc.mesh.n_vertices, rc.mesh.n_simplices, n_steps)
    t0 = time.perf_counter()
    try:
        history = run_transient(rc.problem, rc.mesh, ops, rc.newton, callbacks=[snapshot, progress])
    except StepFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_history_csv(out / "history.csv", history)
    print(f"{rc.name}: {history.n_steps} steps in {time.perf_counter() - t0:.1f}s; wrote {out / 'history.csv'}")
    return 0


def cmd_convergence(args) -> int:
    rc = load_config(args.config)
    out = _out_dir(args, rc)
    variants = ["mean", "max"] if args.variant == "both" else [args.variant]
    status = 0
    for variant in variants:
        def on_level(j, table, seconds):
            logger.info("[%s] level %d: h=%.5g error=%.5e (%.1fs)", variant, j, table.mesh_size[-1],
                        table.error[-1], seconds)

        try:
            table = convergence_study(rc.problem, rc.mesh, args.levels, rc.newton, variant=variant,
                                      on_level=on_level, reference_offset=args.reference_offset)
        except StepFailure as exc:
            print(f"error: [{variant}] {exc}", file=sys.stderr)
            status = 1
            continue
        name = "convergence.csv" if len(variants) == 1 else f"convergence_{variant}.csv"
        write_convergence_csv(out / name, table)
        print(f"{variant}: fitted slope {table.slope:.4f}  (consecutive rates "
              + ", ".join(f"{r:.3f}" for r in table.rates) + f"); wrote {out / name}")
    return status


def cmd_check(args) -> int:
    results = run_checks(perturb_stiffness=args.perturb_stiffness)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvfe-ions", description="Volume-filling ion transport solver.")
    parser.add_argument("--quiet", action="store_true", help="only print results and errors")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: config output.dir or cwd)")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", metavar="{run,convergence,check}")

    p = sub.add_parser("run", parents=[common], help="run one scenario")
    p.add_argument("config", help="JSON configuration file")
    p.add_argument("--snapshot-stride", type=int, default=None, help="write field_<k>.vtk every N steps")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("convergence", parents=[common], help="mesh-convergence study")
    p.add_argument("config", help="JSON configuration file")
    p.add_argument("--levels", type=int, required=True, help="finest refinement level (used as reference)")
    p.add_argument("--variant", choices=["max", "mean", "both"], default="mean")
    p.add_argument("--reference-offset", type=int, default=1,
                   help="reference level minus finest measured level (default 1: the reference is level L)")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("check", parents=[common], help="run the self-check suite")
    p.add_argument("--perturb-stiffness", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "snapshot_stride", None) is not None and args.snapshot_stride < 0:
        parser.error("--snapshot-stride must be non-negative")
    try:
        return args.func(args)
    except CVFEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
