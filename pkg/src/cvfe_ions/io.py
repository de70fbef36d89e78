"""Output artifacts: legacy VTK snapshots and CSV tables."""
from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, MeshParseError

_VTK_TRIANGLE = 5
_VTK_TETRA = 10


def _fmt(x) -> str:
    return repr(float(x))


def vtk_text(mesh, state, title="cvfe_ions state") -> str:
    """Legacy ASCII VTK 3.0 unstructured grid with point scalars u0, u1.., phi."""
    n_pts = mesh.n_vertices
    pts = np.zeros((n_pts, 3))
    pts[:, : mesh.dim] = mesh.vertices
    nv = mesh.dim + 1
    ctype = _VTK_TRIANGLE if mesh.dim == 2 else _VTK_TETRA
    out = _io.StringIO()
    w = out.write
    w("# vtk DataFile Version 3.0\n")
    w(title.replace("\n", " ")[:255] + "\n")
    w("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    w(f"POINTS {n_pts} double\n")
    for p in pts:
        w(" ".join(_fmt(c) for c in p) + "\n")
    w(f"CELLS {mesh.n_simplices} {mesh.n_simplices * (nv + 1)}\n")
    for s in mesh.simplices:
        w(f"{nv} " + " ".join(str(int(v)) for v in s) + "\n")
    w(f"CELL_TYPES {mesh.n_simplices}\n")
    w(f"{ctype}\n" * mesh.n_simplices)
    w(f"POINT_DATA {n_pts}\n")
    conc = state.all_concentrations()
    named = [(f"u{i}", conc[i]) for i in range(len(conc))] + [("phi", state.phi)]
    for name, vals in named:
        w(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        w("\n".join(_fmt(v) for v in vals) + "\n")
    return out.getvalue()


def write_vtk(path, mesh, state, title="cvfe_ions state"):
    with open(path, "w") as fh:
        fh.write(vtk_text(mesh, state, title))


@dataclass
class VTKGrid:
    points: np.ndarray
    cells: list
    cell_types: np.ndarray
    point_data: dict


def read_vtk(text) -> VTKGrid:
    """Read the subset of legacy ASCII VTK written by :func:`vtk_text`."""
    tokens_by_line = [ln.split() for ln in text.splitlines()]
    if not tokens_by_line or not text.startswith("# vtk DataFile Version"):
        raise MeshParseError("missing VTK header", 1)
    if len(tokens_by_line) < 4 or tokens_by_line[2] != ["ASCII"] or tokens_by_line[3] != ["DATASET", "UNSTRUCTURED_GRID"]:
        raise MeshParseError("expected an ASCII unstructured grid", 3)
    i = 4
    points = cells = types = None
    data = {}
    npd = None

    def numbers(start, count, conv):
        vals, j = [], start
        while len(vals) < count:
            if j >= len(tokens_by_line):
                raise MeshParseError("unexpected end of file", j)
            vals.extend(conv(t) for t in tokens_by_line[j])
            j += 1
        if len(vals) != count:
            raise MeshParseError("wrong number of values", j)
        return vals, j

    while i < len(tokens_by_line):
        tok = tokens_by_line[i]
        if not tok:
            i += 1
            continue
        head = tok[0]
        if head == "POINTS":
            n = int(tok[1])
            vals, i = numbers(i + 1, 3 * n, float)
            points = np.array(vals).reshape(n, 3)
        elif head == "CELLS":
            n, size = int(tok[1]), int(tok[2])
            vals, i = numbers(i + 1, size, int)
            cells, k = [], 0
            for _ in range(n):
                m = vals[k]
                cells.append(vals[k + 1: k + 1 + m])
                k += m + 1
        elif head == "CELL_TYPES":
            n = int(tok[1])
            vals, i = numbers(i + 1, n, int)
            types = np.array(vals)
        elif head == "POINT_DATA":
            npd = int(tok[1])
            i += 1
        elif head == "SCALARS":
            if npd is None:
                raise MeshParseError("SCALARS before POINT_DATA", i + 1)
            name = tok[1]
            if i + 1 >= len(tokens_by_line) or tokens_by_line[i + 1][:1] != ["LOOKUP_TABLE"]:
                raise MeshParseError("missing LOOKUP_TABLE", i + 2)
            vals, i = numbers(i + 2, npd, float)
            data[name] = np.array(vals)
        else:
            raise MeshParseError(f"unsupported section {head!r}", i + 1)
    if points is None or cells is None or types is None:
        raise MeshParseError("incomplete unstructured grid", len(tokens_by_line))
    return VTKGrid(points, cells, types, data)


# --------------------------------------------------------------------------
# CSV


def history_header(n_species):
    cols = ["step", "t"] + [f"M_{i}" for i in range(n_species + 1)] + ["entropy"]
    for i in range(n_species + 1):
        cols += [f"min_u{i}", f"max_u{i}"]
    return cols + ["newton_iters", "residual"]


def history_rows(history):
    """Rows of history.csv, one per recorded time level."""
    for k, t in enumerate(history.times):
        rep = history.reports[k]
        row = [str(k), _fmt(t)]
        row += [_fmt(m) for m in history.masses[k]]
        row.append(_fmt(history.entropy[k]))
        for lo, hi in zip(history.umin[k], history.umax[k]):
            row += [_fmt(lo), _fmt(hi)]
        row += [str(rep.iterations if rep else 0), _fmt(rep.residual if rep else 0.0)]
        yield row


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(history_header(history.n_species))
        wr.writerows(history_rows(history))


def write_convergence_csv(path, table):
    """Columns h, n_vertices, error, rate; the first row has no rate."""
    if len(table.error) != len(table.mesh_size):
        raise InvalidArgumentError("convergence table is incomplete")
    rates = [""] + [_fmt(r) for r in table.rates] if len(table.error) >= 2 else [""] * len(table.error)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["h", "n_vertices", "error", "rate"])
        for h, nv, e, r in zip(table.mesh_size, table.n_vertices, table.error, rates):
            wr.writerow([_fmt(h), str(nv), _fmt(e), r])


def read_csv(path):
    """Header and rows of a CSV file written by this module."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
