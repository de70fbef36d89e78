"""Conforming simplicial meshes, uniform refinement and CVFE geometry.

A :class:`Mesh` holds vertex coordinates, simplex connectivity and tagged
boundary faces.  :func:`compute_operators` turns it into the quantities the
scheme needs: P1 basis gradients, element stiffness coefficients and the
barycentric dual cells attached to every vertex.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GeometryError, InvalidArgumentError, MeshParseError

logger = logging.getLogger(__name__)

# boundary tags used by the structured generators
TAG_XMIN, TAG_XMAX, TAG_YMIN, TAG_YMAX, TAG_ZMIN, TAG_ZMAX = 1, 2, 3, 4, 5, 6

_GMSH_POINT = 15


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation (d = 2) or tetrahedralisation (d = 3).

    Parameters
    ----------
    vertices : (N, d) array_like
    simplices : (M, d + 1) array_like of int
        Reoriented on construction so that every simplex has positive
        signed volume.
    boundary_faces : (F, d) array_like of int, optional
        If omitted, the boundary facets are extracted from the connectivity
        and tagged 0.
    boundary_tags : (F,) array_like of int, optional
    dirichlet_tags : sequence of int
        Boundary tags forming the Dirichlet part of the boundary.
    dirichlet_vertices : array_like of int, optional
        Explicit Dirichlet set.  Derived from ``dirichlet_tags`` otherwise.
    parent : (N, 2) array_like of int, optional
        Refinement provenance.  Row ``v`` equals ``(c, c)`` when ``v`` is the
        coarse vertex ``c`` and ``(a, b)`` when ``v`` is the midpoint of the
        coarse edge ``ab``.
    """

    vertices: np.ndarray
    simplices: np.ndarray
    boundary_faces: np.ndarray | None = None
    boundary_tags: np.ndarray | None = None
    dirichlet_tags: tuple = ()
    dirichlet_vertices: np.ndarray | None = None
    parent: np.ndarray | None = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=float)
        simplices = np.asarray(self.simplices, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise InvalidArgumentError("vertices must have shape (N, 2) or (N, 3)")
        d = vertices.shape[1]
        if simplices.ndim != 2 or simplices.shape[1] != d + 1:
            raise InvalidArgumentError(f"simplices must have shape (M, {d + 1})")
        if len(simplices) == 0:
            raise InvalidArgumentError("mesh has no simplices")
        n = len(vertices)
        if simplices.min() < 0 or simplices.max() >= n:
            raise InvalidArgumentError("simplex references a vertex out of range")
        s = np.sort(simplices, axis=1)
        if np.any(s[:, 1:] == s[:, :-1]):
            bad = int(np.nonzero(np.any(s[:, 1:] == s[:, :-1], axis=1))[0][0])
            raise InvalidArgumentError(f"simplex {bad} repeats a vertex")
        simplices = _orient(vertices, simplices)
        _check_facet_multiplicity(simplices)

        if self.boundary_faces is None:
            faces = _boundary_facets(simplices)
            tags = np.zeros(len(faces), dtype=np.int64)
        else:
            faces = np.asarray(self.boundary_faces, dtype=np.int64).reshape(-1, d)
            if self.boundary_tags is None:
                tags = np.zeros(len(faces), dtype=np.int64)
            else:
                tags = np.asarray(self.boundary_tags, dtype=np.int64).reshape(-1)
            if len(tags) != len(faces):
                raise InvalidArgumentError("boundary_tags and boundary_faces differ in length")
            if len(faces) and (faces.min() < 0 or faces.max() >= n):
                raise InvalidArgumentError("boundary face references a vertex out of range")

        dtags = tuple(int(t) for t in self.dirichlet_tags)
        if self.dirichlet_vertices is None:
            mask = np.isin(tags, dtags)
            dirichlet = np.unique(faces[mask]) if mask.any() else np.zeros(0, np.int64)
        else:
            dirichlet = np.unique(np.asarray(self.dirichlet_vertices, dtype=np.int64))
            if len(dirichlet) and (dirichlet.min() < 0 or dirichlet.max() >= n):
                raise InvalidArgumentError("Dirichlet vertex out of range")
            if len(dirichlet) and not np.isin(dirichlet, faces).all():
                raise InvalidArgumentError("Dirichlet vertices must lie on boundary faces")

        parent = self.parent
        if parent is not None:
            parent = np.asarray(parent, dtype=np.int64)
            if parent.shape != (n, 2):
                raise InvalidArgumentError("parent map must have shape (N, 2)")

        object.__setattr__(self, "vertices", _readonly(vertices, float))
        object.__setattr__(self, "simplices", _readonly(simplices, np.int64))
        object.__setattr__(self, "boundary_faces", _readonly(faces, np.int64))
        object.__setattr__(self, "boundary_tags", _readonly(tags, np.int64))
        object.__setattr__(self, "dirichlet_tags", dtags)
        object.__setattr__(self, "dirichlet_vertices", _readonly(dirichlet, np.int64))
        object.__setattr__(
            self, "parent", None if parent is None else _readonly(parent, np.int64)
        )

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_simplices(self) -> int:
        return len(self.simplices)

    @property
    def dirichlet_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.dirichlet_vertices] = True
        return mask

    def with_dirichlet(self, tags: Iterable[int]) -> "Mesh":
        """Copy of this mesh with a different set of Dirichlet tags."""
        return Mesh(
            self.vertices,
            self.simplices,
            self.boundary_faces,
            self.boundary_tags,
            dirichlet_tags=tuple(tags),
            parent=self.parent,
        )

    def __repr__(self):
        return (
            f"Mesh(dim={self.dim}, n_vertices={self.n_vertices}, "
            f"n_simplices={self.n_simplices}, n_dirichlet={len(self.dirichlet_vertices)})"
        )


# --------------------------------------------------------------------------
# helpers


def _signed_volumes(vertices, simplices):
    x = vertices[simplices]
    jac = x[:, 1:, :] - x[:, :1, :]
    d = vertices.shape[1]
    return np.linalg.det(jac) / math.factorial(d)


def _orient(vertices, simplices):
    vol = _signed_volumes(vertices, simplices)
    x = vertices[simplices]
    h = np.max(np.linalg.norm(x[:, :, None, :] - x[:, None, :, :], axis=-1), axis=(1, 2))
    d = vertices.shape[1]
    tiny = np.abs(vol) <= 1e-13 * h**d
    if tiny.any():
        bad = int(np.nonzero(tiny)[0][0])
        raise GeometryError(f"simplex {bad} has zero volume", simplex=bad)
    out = simplices.copy()
    neg = vol < 0
    out[neg, 0], out[neg, 1] = simplices[neg, 1], simplices[neg, 0]
    return out


def _facets(simplices):
    k = simplices.shape[1]
    return np.concatenate(
        [np.delete(simplices, j, axis=1) for j in range(k)], axis=0
    )


def _check_facet_multiplicity(simplices):
    faces = np.sort(_facets(simplices), axis=1)
    _, counts = np.unique(faces, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise GeometryError("a facet is shared by more than two simplices (non-conforming)")


def _boundary_facets(simplices):
    faces = np.sort(_facets(simplices), axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    return uniq[counts == 1]


def _tag_box_faces(vertices, faces, lo, hi):
    """Tag boundary faces of an axis-aligned box by the side they lie on."""
    c = vertices[faces].mean(axis=1)
    tags = np.zeros(len(faces), dtype=np.int64)
    for axis in range(vertices.shape[1]):
        tol = 1e-12 * (hi[axis] - lo[axis])
        tags[np.abs(c[:, axis] - lo[axis]) < tol] = 2 * axis + 1
        tags[np.abs(c[:, axis] - hi[axis]) < tol] = 2 * axis + 2
    return tags


def _check_bounds(bounds, d):
    bounds = np.asarray(bounds, dtype=float)
    if bounds.shape != (d, 2) or not np.all(np.isfinite(bounds)):
        raise InvalidArgumentError(f"bounds must be {d} (min, max) pairs")
    if np.any(bounds[:, 1] <= bounds[:, 0]):
        raise InvalidArgumentError("degenerate bounds: need min < max on every axis")
    return bounds[:, 0], bounds[:, 1]


# --------------------------------------------------------------------------
# generators


def build_rect_mesh(nx, ny, bounds=((0.0, 1.0), (0.0, 1.0)), dirichlet_x=True):
    """Structured triangulation of a rectangle.

    Every one of the ``nx * ny`` cells is split along its lower-left to
    upper-right diagonal.  With ``dirichlet_x`` the two faces ``x = xmin``
    and ``x = xmax`` form the Dirichlet boundary.
    """
    if int(nx) < 1 or int(ny) < 1:
        raise InvalidArgumentError("nx and ny must be >= 1")
    nx, ny = int(nx), int(ny)
    lo, hi = _check_bounds(bounds, 2)
    xs = np.linspace(lo[0], hi[0], nx + 1)
    ys = np.linspace(lo[1], hi[1], ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00, v10, v01, v11 = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
    tris = np.concatenate(
        [np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])]
    )
    faces = _boundary_facets(tris)
    tags = _tag_box_faces(vertices, faces, lo, hi)
    return Mesh(
        vertices,
        tris,
        faces,
        tags,
        dirichlet_tags=(TAG_XMIN, TAG_XMAX) if dirichlet_x else (),
    )


# the six Kuhn tetrahedra of the unit cube, as corner offsets (i, j, k)
_KUHN = []
for _perm in itertools.permutations(range(3)):
    _path = [(0, 0, 0)]
    _cur = [0, 0, 0]
    for _ax in _perm:
        _cur[_ax] = 1
        _path.append(tuple(_cur))
    _KUHN.append(_path)


def build_box_mesh(nx, ny, nz, bounds=((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)), dirichlet_x=True):
    """Structured tetrahedralisation of a box (Kuhn split, 6 tets per cell)."""
    if min(int(nx), int(ny), int(nz)) < 1:
        raise InvalidArgumentError("nx, ny and nz must be >= 1")
    nx, ny, nz = int(nx), int(ny), int(nz)
    lo, hi = _check_bounds(bounds, 3)
    axes = [np.linspace(lo[a], hi[a], m + 1) for a, m in enumerate((nx, ny, nz))]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def vid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    i, j, k = (a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"))
    tets = []
    for path in _KUHN:
        tets.append(np.column_stack([vid(i + a, j + b, k + c) for a, b, c in path]))
    tets = np.concatenate(tets)
    faces = _boundary_facets(tets)
    tags = _tag_box_faces(vertices, faces, lo, hi)
    return Mesh(
        vertices,
        tets,
        faces,
        tags,
        dirichlet_tags=(TAG_XMIN, TAG_XMAX) if dirichlet_x else (),
    )


# --------------------------------------------------------------------------
# refinement


def _edge_table(simplices, n_vertices):
    """Unique edges of the mesh and a lookup from endpoint pairs to edge ids."""
    k = simplices.shape[1]
    pairs = np.array(list(itertools.combinations(range(k), 2)))
    e = simplices[:, pairs].reshape(-1, 2)
    e = np.sort(e, axis=1)
    keys = e[:, 0] * n_vertices + e[:, 1]
    ukeys = np.unique(keys)
    edges = np.column_stack([ukeys // n_vertices, ukeys % n_vertices])
    return edges, ukeys


def _lookup(ukeys, n_vertices, a, b):
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return np.searchsorted(ukeys, lo * n_vertices + hi)


def _split_triangles(tri, mid):
    """Red split of triangles ``tri`` given midpoint lookup ``mid(a, b)``."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    mab, mbc, mca = mid(a, b), mid(b, c), mid(c, a)
    return np.concatenate(
        [
            np.column_stack([a, mab, mca]),
            np.column_stack([mab, b, mbc]),
            np.column_stack([mca, mbc, c]),
            np.column_stack([mab, mbc, mca]),
        ]
    )


def _split_tets(tet, mid, coords):
    v = [tet[:, j] for j in range(4)]
    m = {}
    for a, b in itertools.combinations(range(4), 2):
        m[a, b] = m[b, a] = mid(v[a], v[b])
    corners = [
        np.column_stack([v[0], m[0, 1], m[0, 2], m[0, 3]]),
        np.column_stack([m[0, 1], v[1], m[1, 2], m[1, 3]]),
        np.column_stack([m[0, 2], m[1, 2], v[2], m[2, 3]]),
        np.column_stack([m[0, 3], m[1, 3], m[2, 3], v[3]]),
    ]
    # interior octahedron: three candidate diagonals, each with its equator cycle
    choices = [
        ((0, 1), (2, 3), [(0, 2), (0, 3), (1, 3), (1, 2)]),
        ((0, 2), (1, 3), [(0, 1), (0, 3), (2, 3), (1, 2)]),
        ((0, 3), (1, 2), [(0, 1), (0, 2), (2, 3), (1, 3)]),
    ]
    n_all = len(coords)
    length = np.empty((len(tet), 3))
    key = np.empty((len(tet), 3), dtype=np.int64)
    inner = np.empty((3, 4, len(tet), 4), dtype=np.int64)
    for c, (p, q, ring) in enumerate(choices):
        P, Q = m[p], m[q]
        length[:, c] = np.linalg.norm(coords[P] - coords[Q], axis=1)
        key[:, c] = np.minimum(P, Q) * n_all + np.maximum(P, Q)
        for t in range(4):
            r0, r1 = m[ring[t]], m[ring[(t + 1) % 4]]
            inner[c, t] = np.column_stack([P, Q, r0, r1])
    shortest = length.min(axis=1, keepdims=True)
    cand = length <= shortest * (1.0 + 1e-12)
    key = np.where(cand, key, np.iinfo(np.int64).max)
    pick = np.argmin(key, axis=1)
    rows = np.arange(len(tet))
    octa = [inner[pick, t, rows] for t in range(4)]
    return np.concatenate(corners + octa)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: 4 children per triangle, 8 per tetrahedron.

    Coarse vertices keep their indices; the midpoint of coarse edge ``e``
    gets index ``n_coarse + e``.  Boundary faces are split with their tag,
    so the Dirichlet set of the child mesh follows from the same tags.
    """
    n = mesh.n_vertices
    edges, ukeys = _edge_table(mesh.simplices, n)
    coords = np.concatenate([mesh.vertices, 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])])

    def mid(a, b):
        return n + _lookup(ukeys, n, a, b)

    if mesh.dim == 2:
        children = _split_triangles(mesh.simplices, mid)
        f = mesh.boundary_faces
        faces = np.concatenate([np.column_stack([f[:, 0], mid(f[:, 0], f[:, 1])]),
                                np.column_stack([mid(f[:, 0], f[:, 1]), f[:, 1]])])
        tags = np.concatenate([mesh.boundary_tags, mesh.boundary_tags])
    else:
        children = _split_tets(mesh.simplices, mid, coords)
        faces = _split_triangles(mesh.boundary_faces, mid)
        tags = np.tile(mesh.boundary_tags, 4)

    parent = np.concatenate([np.repeat(np.arange(n)[:, None], 2, axis=1), edges])

    if mesh.dirichlet_tags:
        return Mesh(coords, children, faces, tags, dirichlet_tags=mesh.dirichlet_tags, parent=parent)

    # explicit Dirichlet set: midpoints of edges of all-Dirichlet boundary faces
    dmask = mesh.dirichlet_mask
    dfaces = mesh.boundary_faces[dmask[mesh.boundary_faces].all(axis=1)]
    new = [mesh.dirichlet_vertices]
    for a, b in itertools.combinations(range(mesh.dim), 2):
        if len(dfaces):
            new.append(mid(dfaces[:, a], dfaces[:, b]))
    dirichlet = np.unique(np.concatenate(new))
    return Mesh(coords, children, faces, tags, dirichlet_vertices=dirichlet, parent=parent)


# --------------------------------------------------------------------------
# geometry


@dataclass(frozen=True, eq=False)
class MeshOperators:
    """Precomputed geometry of a mesh and its barycentric dual.

    ``stiffness[s, k, l]`` is ``a_KL^S = -|S| grad e_K . grad e_L`` for the
    local vertices ``k, l`` of simplex ``s``; its diagonal holds
    ``-|S| |grad e_K|^2`` so that every row sums to zero.
    """

    mesh: Mesh
    simplex_measure: np.ndarray
    simplex_diameter: np.ndarray
    inradius: np.ndarray
    basis_gradients: np.ndarray
    stiffness: np.ndarray
    dual_measure: np.ndarray
    mesh_size: float
    regularity: float
    subcell_centroids: np.ndarray
    subcell_measures: np.ndarray
    domain_measure: float = field(default=0.0)

    @property
    def dim(self):
        return self.mesh.dim


def _facet_measures(x):
    """Measures of the d+1 facets of each simplex; x has shape (M, d+1, d)."""
    d = x.shape[2]
    out = np.empty(x.shape[:2])
    for j in range(d + 1):
        f = np.delete(x, j, axis=1)
        if d == 2:
            out[:, j] = np.linalg.norm(f[:, 1] - f[:, 0], axis=1)
        else:
            out[:, j] = 0.5 * np.linalg.norm(np.cross(f[:, 1] - f[:, 0], f[:, 2] - f[:, 0]), axis=1)
    return out


def compute_operators(mesh: Mesh) -> MeshOperators:
    d = mesh.dim
    x = mesh.vertices[mesh.simplices]  # (M, d+1, d)
    jac = np.transpose(x[:, 1:, :] - x[:, :1, :], (0, 2, 1))  # columns are edge vectors
    det = np.linalg.det(jac)
    measure = det / math.factorial(d)
    if np.any(measure <= 0):
        bad = int(np.nonzero(measure <= 0)[0][0])
        raise GeometryError(f"simplex {bad} has nonpositive volume", simplex=bad)
    inv = np.linalg.inv(jac)  # rows are gradients of barycentric coordinates 1..d
    grads = np.empty_like(x)
    grads[:, 1:, :] = inv
    grads[:, 0, :] = -inv.sum(axis=1)
    stiffness = -measure[:, None, None] * np.einsum("ski,sli->skl", grads, grads)

    diam = np.max(np.linalg.norm(x[:, :, None, :] - x[:, None, :, :], axis=-1), axis=(1, 2))
    inradius = d * measure / _facet_measures(x).sum(axis=1)

    dual = np.bincount(
        mesh.simplices.ravel(),
        weights=np.repeat(measure / (d + 1), d + 1),
        minlength=mesh.n_vertices,
    )

    perms = list(itertools.permutations(range(d)))
    cent = np.empty((len(x), d + 1, len(perms), d))
    sub = np.empty((len(x), d + 1, len(perms)))
    for k in range(d + 1):
        others = [j for j in range(d + 1) if j != k]
        for p, perm in enumerate(perms):
            chain = [x[:, k]]
            acc = x[:, k].copy()
            for step, j in enumerate(perm, start=1):
                acc = acc + x[:, others[j]]
                chain.append(acc / (step + 1))
            chain = np.stack(chain, axis=1)  # (M, d+1, d)
            cent[:, k, p] = chain.mean(axis=1)
            e = chain[:, 1:] - chain[:, :1]
            sub[:, k, p] = np.abs(np.linalg.det(e)) / math.factorial(d)

    return MeshOperators(
        mesh=mesh,
        simplex_measure=measure,
        simplex_diameter=diam,
        inradius=inradius,
        basis_gradients=grads,
        stiffness=stiffness,
        dual_measure=dual,
        mesh_size=float(diam.max()),
        regularity=float((diam / inradius).max()),
        subcell_centroids=cent,
        subcell_measures=sub,
        domain_measure=float(measure.sum()),
    )


def dual_cell_integral(ops: MeshOperators, g: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Approximate ``int_K g`` for every dual cell ``K``.

    ``g`` is evaluated on an array of points of shape ``(P, d)``.  One
    centroid point per barycentric sub-simplex is used, which is exact for
    affine ``g``.
    """
    d = ops.dim
    pts = ops.subcell_centroids.reshape(-1, d)
    vals = np.broadcast_to(np.asarray(g(pts), dtype=float), (len(pts),))
    w = (vals * ops.subcell_measures.ravel()).reshape(ops.subcell_measures.shape).sum(axis=2)
    return np.bincount(ops.mesh.simplices.ravel(), weights=w.ravel(), minlength=ops.mesh.n_vertices)


def vertex_adjacency(mesh: Mesh):
    """Symmetric vertex-to-vertex adjacency (including the diagonal) as CSR."""
    import scipy.sparse as sp

    sim = mesh.simplices
    k = sim.shape[1]
    i = np.repeat(sim, k, axis=1).ravel()
    j = np.tile(sim, (1, k)).ravel()
    g = sp.csr_matrix((np.ones(len(i), dtype=np.int8), (i, j)), shape=(mesh.n_vertices,) * 2)
    g.data[:] = 1
    return g


def nested_dissection_order(mesh: Mesh, leaf_size: int = 30) -> np.ndarray:
    """Fill-reducing vertex ordering by recursive coordinate bisection.

    Each set is cut at the median of its longest extent; vertices on the
    low side adjacent to the high side form the separator, numbered last.
    """
    adj = vertex_adjacency(mesh)
    x = mesh.vertices
    marker = np.zeros(mesh.n_vertices, dtype=bool)
    out = []
    stack = [(np.arange(mesh.n_vertices), False)]
    # iterative post-order: (set, emitted) pairs; separators are pushed first
    while stack:
        idx, final = stack.pop()
        if final or len(idx) <= leaf_size:
            out.append(idx)
            continue
        c = x[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        low = c[:, axis] < np.median(c[:, axis])
        if low.all() or not low.any():
            out.append(idx)
            continue
        left, right = idx[low], idx[~low]
        marker[right] = True
        sep = np.asarray(adj[left].multiply(marker[None, :]).sum(axis=1)).ravel() > 0
        marker[right] = False
        stack.append((left[sep], True))
        stack.append((right, False))
        stack.append((left[~sep], False))
    return np.concatenate(out)


# --------------------------------------------------------------------------
# gmsh MSH 2.2 and the plain-text dump

_GMSH_NODES = {1: 2, 2: 3, 4: 4, _GMSH_POINT: 1}


def parse_gmsh(text, dirichlet_tags: Sequence[int] = ()) -> Mesh:
    """Read an ASCII MSH 2.2 file.

    Triangles (type 2) or tetrahedra (type 4) are the volume elements,
    whichever has the higher dimension; lines (1) and triangles (2) of the
    next lower dimension become boundary faces tagged with their physical
    tag.  Node ids are remapped to contiguous indices and nodes not used by
    any volume element are dropped.
    """
    if isinstance(text, (bytes, bytearray)):
        text = text.decode("ascii")
    lines = text.splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines):
            pos += 1
            s = lines[pos - 1].strip()
            if s:
                return s
        raise MeshParseError("unexpected end of file", pos)

    def expect(tag):
        s = next_line()
        if s != tag:
            raise MeshParseError(f"expected {tag}, found {s!r}", pos)

    nodes = None
    elements = None
    while True:
        # skip blank lines between sections
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            break
        header = next_line()
        if header == "$MeshFormat":
            fmt = next_line().split()
            if not fmt or not fmt[0].startswith("2"):
                raise MeshParseError(f"unsupported MSH version {fmt[:1]}", pos)
            if len(fmt) > 1 and fmt[1] != "0":
                raise MeshParseError("binary MSH files are not supported", pos)
            expect("$EndMeshFormat")
        elif header == "$Nodes":
            try:
                count = int(next_line())
            except ValueError:
                raise MeshParseError("bad node count", pos) from None
            ids = np.empty(count, dtype=np.int64)
            xyz = np.empty((count, 3))
            for r in range(count):
                parts = next_line().split()
                if len(parts) != 4:
                    raise MeshParseError("node line needs id x y z", pos)
                try:
                    ids[r] = int(parts[0])
                    xyz[r] = [float(v) for v in parts[1:]]
                except ValueError:
                    raise MeshParseError("malformed node line", pos) from None
            expect("$EndNodes")
            nodes = (ids, xyz)
        elif header == "$Elements":
            try:
                count = int(next_line())
            except ValueError:
                raise MeshParseError("bad element count", pos) from None
            elements = []
            for _ in range(count):
                parts = next_line().split()
                try:
                    vals = [int(v) for v in parts]
                    etype, ntags = vals[1], vals[2]
                except (ValueError, IndexError):
                    raise MeshParseError("malformed element line", pos) from None
                if etype not in _GMSH_NODES:
                    raise MeshParseError(f"unsupported element type {etype}", pos)
                conn = vals[3 + ntags:]
                if len(conn) != _GMSH_NODES[etype]:
                    raise MeshParseError(f"element type {etype} needs {_GMSH_NODES[etype]} nodes", pos)
                tag = vals[3] if ntags > 0 else 0
                elements.append((etype, tag, conn, pos))
            expect("$EndElements")
        elif header.startswith("$"):
            # skip unknown sections such as $PhysicalNames
            end = "$End" + header[1:]
            while next_line() != end:
                pass
        else:
            raise MeshParseError(f"malformed section header {header!r}", pos)

    if nodes is None:
        raise MeshParseError("missing $Nodes section")
    if not elements:
        raise MeshParseError("no volume elements")
    ids, xyz = nodes
    index = {int(i): r for r, i in enumerate(ids)}
    if len(index) != len(ids):
        raise MeshParseError("duplicate node ids")

    vol_type = 4 if any(e[0] == 4 for e in elements) else 2
    if not any(e[0] == vol_type for e in elements):
        raise MeshParseError("no volume elements")
    face_type = 2 if vol_type == 4 else 1
    d = 3 if vol_type == 4 else 2

    def remap(conn, lineno):
        try:
            return [index[c] for c in conn]
        except KeyError as exc:
            raise MeshParseError(f"element references unknown node {exc.args[0]}", lineno) from None

    simplices = np.array([remap(c, ln) for t, _, c, ln in elements if t == vol_type], dtype=np.int64)
    fl = [(remap(c, ln), tag) for t, tag, c, ln in elements if t == face_type]
    faces = np.array([f for f, _ in fl], dtype=np.int64).reshape(-1, d)
    tags = np.array([t for _, t in fl], dtype=np.int64)

    used = np.unique(simplices)
    if len(used) < len(ids):
        logger.info("dropping %d nodes not used by volume elements", len(ids) - len(used))
    new_index = -np.ones(len(ids), dtype=np.int64)
    new_index[used] = np.arange(len(used))
    simplices = new_index[simplices]
    if len(faces):
        keep = (new_index[faces] >= 0).all(axis=1)
        faces, tags = new_index[faces[keep]], tags[keep]
    coords = xyz[used, :d]
    if not len(faces):
        faces, tags = None, None
    return Mesh(coords, simplices, faces, tags, dirichlet_tags=tuple(dirichlet_tags))


def write_gmsh(mesh: Mesh) -> str:
    """Serialise as ASCII MSH 2.2 with round-trip exact coordinates."""
    d = mesh.dim
    out = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(mesh.n_vertices)]
    for i, p in enumerate(mesh.vertices, start=1):
        xyz = list(p) + [0.0] * (3 - d)
        out.append(f"{i} " + " ".join(repr(float(c)) for c in xyz))
    out.append("$EndNodes")
    face_type, vol_type = (1, 2) if d == 2 else (2, 4)
    n_el = len(mesh.boundary_faces) + mesh.n_simplices
    out += ["$Elements", str(n_el)]
    eid = 1
    for f, t in zip(mesh.boundary_faces, mesh.boundary_tags):
        out.append(f"{eid} {face_type} 2 {t} {t} " + " ".join(str(v + 1) for v in f))
        eid += 1
    for s in mesh.simplices:
        out.append(f"{eid} {vol_type} 2 0 0 " + " ".join(str(v + 1) for v in s))
        eid += 1
    out.append("$EndElements")
    return "\n".join(out) + "\n"


def dump_mesh(mesh: Mesh) -> str:
    """Plain-text dump: counts, coordinates, simplices, faces, Dirichlet set."""
    out = [
        "cvfe-mesh 1",
        f"{mesh.dim} {mesh.n_vertices} {mesh.n_simplices} {len(mesh.boundary_faces)}",
    ]
    out += [" ".join(repr(float(c)) for c in p) for p in mesh.vertices]
    out += [" ".join(str(v) for v in s) for s in mesh.simplices]
    out += [" ".join(str(v) for v in f) + f" {t}" for f, t in zip(mesh.boundary_faces, mesh.boundary_tags)]
    out.append("dirichlet " + " ".join(str(v) for v in mesh.dirichlet_vertices))
    return "\n".join(out) + "\n"


def load_mesh_dump(text: str) -> Mesh:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split()[:1] != ["cvfe-mesh"]:
        raise MeshParseError("not a cvfe-mesh dump", 1)
    try:
        d, nv, ns, nf = (int(v) for v in lines[1].split())
        p = 2
        verts = np.array([[float(c) for c in lines[p + i].split()] for i in range(nv)])
        p += nv
        simp = np.array([[int(c) for c in lines[p + i].split()] for i in range(ns)])
        p += ns
        frows = np.array([[int(c) for c in lines[p + i].split()] for i in range(nf)], dtype=np.int64).reshape(-1, d + 1)
        p += nf
        dline = lines[p].split()
    except (ValueError, IndexError) as exc:
        raise MeshParseError(f"malformed mesh dump: {exc}") from None
    if dline[0] != "dirichlet":
        raise MeshParseError("missing dirichlet line", p + 1)
    return Mesh(verts.reshape(nv, d), simp, frows[:, :d], frows[:, d],
                dirichlet_vertices=np.array([int(v) for v in dline[1:]], dtype=np.int64))
