"""Builtin scenarios, field expressions and JSON run configurations.

A run configuration is a JSON object.  Every key is optional when a builtin
``scenario`` supplies it::

    {
      "scenario": "test1",
      "mesh": {"generator": "rect", "n": [32, 4], "bounds": [[0, 1], [0, 0.1]], "refine": 0},
      "species": [{"name": "u1", "D": 1, "z": 2, "initial": "0.2 + 0.1*(x - 1)"}, ...],
      "diffusion": [1, 1], "charge": [2, 1],
      "beta": 1, "lambda2": 0.01,
      "phi_dirichlet": "10*(1 - x)", "source": "0",
      "weight_variant": "mean", "tau": 0.005, "T": 1,
      "newton": {"residual_tol": 1e-10, "reuse_jacobian": true},
      "output": {"dir": "out", "snapshot_stride": 10}
    }

``mesh`` may instead name a file: ``{"file": "channel.msh", "dirichlet_tags": [1, 2]}``
(MSH 2.2 ASCII, or the plain-text dump for files ending in ``.mesh``).
Relative paths are resolved against the configuration file.
"""
from __future__ import annotations

import ast
import copy
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, CVFEError
from .mesh import Mesh, build_box_mesh, build_rect_mesh, load_mesh_dump, parse_gmsh, refine_uniform
from .newton import NewtonOptions
from .scheme import ProblemConfig

logger = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# expressions

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}
_UNARY = {ast.USub: np.negative, ast.UAdd: np.positive}


def _nary(ufunc):
    def f(*args):
        if len(args) < 2:
            raise ValueError("needs at least two arguments")
        out = args[0]
        for a in args[1:]:
            out = ufunc(out, a)
        return out

    return f


def _clip(a, lo, hi):
    return np.minimum(np.maximum(a, lo), hi)


_FUNCS = {"min": _nary(np.minimum), "max": _nary(np.maximum), "clip": _clip, "abs": np.abs}
_COORDS = ("x", "y", "z")


class Expression:
    """A scalar field ``g(x, y, z)`` parsed from a small arithmetic language.

    Supported: numbers, ``x``/``y``/``z``, ``+ - * / **``, parentheses and
    the functions ``min``, ``max``, ``clip(a, lo, hi)`` and ``abs``.
    Instances are callables on ``(P, d)`` point arrays.
    """

    def __init__(self, text, key=None):
        self.text = str(text)
        self.key = key
        try:
            tree = ast.parse(self.text.strip(), mode="eval")
        except SyntaxError as exc:
            raise ConfigurationError(f"cannot parse expression {self.text!r}: {exc.msg}", key) from None
        self._tree = tree.body
        self.names = set()
        self._validate(self._tree)

    def _validate(self, node):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise ConfigurationError(f"unsupported literal {node.value!r} in {self.text!r}", self.key)
        elif isinstance(node, ast.Name):
            if node.id not in _COORDS:
                raise ConfigurationError(f"unknown name {node.id!r} in {self.text!r}", self.key)
            self.names.add(node.id)
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._validate(node.left)
            self._validate(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            self._validate(node.operand)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if node.keywords:
                raise ConfigurationError(f"keyword arguments are not supported in {self.text!r}", self.key)
            nargs = len(node.args)
            name = node.func.id
            if (name == "abs" and nargs != 1) or (name == "clip" and nargs != 3) or (name in ("min", "max") and nargs < 2):
                raise ConfigurationError(f"wrong number of arguments to {name} in {self.text!r}", self.key)
            for a in node.args:
                self._validate(a)
        else:
            raise ConfigurationError(f"unsupported syntax in {self.text!r}", self.key)

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](self._eval(node.operand, env))
        return _FUNCS[node.func.id](*(self._eval(a, env) for a in node.args))

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        d = points.shape[1]
        env = {}
        for k, name in enumerate(_COORDS):
            if k < d:
                env[name] = points[:, k]
            elif name in self.names:
                raise ConfigurationError(f"{self.text!r} uses {name} on a {d}D mesh", self.key)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = np.broadcast_to(np.asarray(self._eval(self._tree, env), dtype=float), (len(points),))
        if not np.all(np.isfinite(out)):
            raise ConfigurationError(f"{self.text!r} is not finite on the mesh", self.key)
        return np.array(out)

    def __repr__(self):
        return f"Expression({self.text!r})"


# --------------------------------------------------------------------------
# builtin scenarios

_OXYGEN = "0.84*clip(min(10*(x - 0.35), 10*(0.65 - x)), 0, 1)"

BUILTIN_SCENARIOS = {
    "test1": {
        "mesh": {"generator": "rect", "n": [32, 4], "bounds": [[0.0, 1.0], [0.0, 0.1]]},
        "species": [
            {"name": "u1", "D": 1.0, "z": 2.0, "initial": "0.2 + 0.1*(x - 1)"},
            {"name": "u2", "D": 1.0, "z": 1.0, "initial": "0.4"},
        ],
        "beta": 1.0,
        "lambda2": 1e-2,
        "phi_dirichlet": "10*(1 - x)",
        "source": "0",
        "weight_variant": "mean",
        "tau": 5e-3,
        "T": 1.0,
    },
    "test2": {
        "mesh": {"generator": "box", "n": [4, 4, 4], "bounds": [[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]},
        "species": [
            {"name": "Ca", "D": 1.0, "z": 2.0, "initial": "0.05 + 0.05*x"},
            {"name": "Na", "D": 1.0, "z": 1.0, "initial": "0.1 - 0.05*x"},
            {"name": "Cl", "D": 1.0, "z": -1.0, "initial": "0.2 + 0.05*x"},
        ],
        "beta": 1.0,
        "lambda2": 1e-2,
        "phi_dirichlet": "1 - x",
        "source": f"-0.5*{_OXYGEN}",
        "weight_variant": "mean",
        "tau": 5e-3,
        "T": 1.0,
    },
}
_neutral = copy.deepcopy(BUILTIN_SCENARIOS["test1"])
for _s in _neutral["species"]:
    _s["z"] = 0.0
BUILTIN_SCENARIOS["test1-neutral"] = _neutral

# fixed-parameter defaults applied to every configuration; the reuse of
# Jacobian factors is switched on because it pays off on every mesh the
# builtins are meant for
_NEWTON_DEFAULTS = {"reuse_jacobian": True}

_TOP_KEYS = {"scenario", "mesh", "species", "diffusion", "charge", "beta", "lambda2", "phi_dirichlet",
             "source", "weight_variant", "tau", "T", "newton", "output", "name"}
_SPECIES_KEYS = {"name", "D", "z", "initial"}
_MESH_KEYS = {"generator", "n", "bounds", "refine", "file", "dirichlet_tags"}
_OUTPUT_KEYS = {"dir", "snapshot_stride"}


@dataclass
class RunConfig:
    """Everything needed to run one scenario from the command line."""

    name: str
    problem: ProblemConfig
    mesh: Mesh
    newton: NewtonOptions
    species_names: tuple
    out_dir: Path | None = None
    snapshot_stride: int = 0
    raw: dict | None = None


def _unknown(keys, allowed, where):
    extra = sorted(set(keys) - allowed)
    if extra:
        raise ConfigurationError(f"unknown key {extra[0]!r}", f"{where}{extra[0]}")


def _number(value, key, positive=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"expected a number, got {value!r}", key)
    if integer and int(value) != value:
        raise ConfigurationError(f"expected an integer, got {value!r}", key)
    if positive and not value > 0:
        raise ConfigurationError(f"must be positive, got {value!r}", key)
    return int(value) if integer else float(value)


def _field(value, key):
    if isinstance(value, bool):
        raise ConfigurationError(f"expected an expression, got {value!r}", key)
    if isinstance(value, (int, float)):
        value = repr(float(value))
    if not isinstance(value, str):
        raise ConfigurationError(f"expected an expression string, got {value!r}", key)
    return Expression(value, key)


def build_mesh(spec: dict, base_dir: Path | None = None) -> Mesh:
    """Create the mesh described by a ``mesh`` configuration entry."""
    if not isinstance(spec, dict):
        raise ConfigurationError("expected an object", "mesh")
    _unknown(spec, _MESH_KEYS, "mesh.")
    refine = _number(spec.get("refine", 0), "mesh.refine", integer=True)
    if refine < 0:
        raise ConfigurationError("must be non-negative", "mesh.refine")
    if "file" in spec:
        path = Path(spec["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        tags = tuple(int(t) for t in spec.get("dirichlet_tags", ()))
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read mesh file {str(path)!r}: {exc.strerror}", "mesh.file") from None
        if path.suffix == ".mesh":
            mesh = load_mesh_dump(text)
            if tags:
                mesh = mesh.with_dirichlet(tags)
        else:
            mesh = parse_gmsh(text, dirichlet_tags=tags)
    else:
        gen = spec.get("generator")
        if gen not in ("rect", "box"):
            raise ConfigurationError(f"expected 'rect' or 'box', got {gen!r}", "mesh.generator")
        dim = 2 if gen == "rect" else 3
        n = spec.get("n")
        if not isinstance(n, list) or len(n) != dim:
            raise ConfigurationError(f"expected {dim} cell counts", "mesh.n")
        n = [_number(v, "mesh.n", positive=True, integer=True) for v in n]
        bounds = spec.get("bounds", [[0.0, 1.0]] * dim)
        if not isinstance(bounds, list) or len(bounds) != dim or any(
                not isinstance(b, list) or len(b) != 2 for b in bounds):
            raise ConfigurationError(f"expected {dim} [lo, hi] pairs", "mesh.bounds")
        bounds = tuple((_number(b[0], "mesh.bounds"), _number(b[1], "mesh.bounds")) for b in bounds)
        try:
            mesh = build_rect_mesh(*n, bounds) if dim == 2 else build_box_mesh(*n, bounds)
        except CVFEError as exc:
            raise ConfigurationError(str(exc), "mesh") from None
    for _ in range(refine):
        mesh = refine_uniform(mesh)
    return mesh


def resolve(raw: dict) -> dict:
    """Merge a raw configuration over its builtin scenario."""
    if not isinstance(raw, dict):
        raise ConfigurationError("configuration must be a JSON object")
    _unknown(raw, _TOP_KEYS, "")
    name = raw.get("scenario", "custom")
    if name == "custom":
        merged = {}
    elif name in BUILTIN_SCENARIOS:
        merged = copy.deepcopy(BUILTIN_SCENARIOS[name])
    else:
        raise ConfigurationError(f"unknown scenario {name!r}", "scenario")
    for key, value in raw.items():
        if key in ("newton", "output") and isinstance(value, dict):
            merged[key] = {**merged.get(key, {}), **value}
        else:
            merged[key] = copy.deepcopy(value)
    merged["scenario"] = name
    return merged


def problem_from_dict(cfg: dict) -> tuple[ProblemConfig, tuple]:
    """Build the :class:`ProblemConfig` (and species names) of a resolved config."""
    species = cfg.get("species")
    if not isinstance(species, list) or not species:
        raise ConfigurationError("need a non-empty list of species", "species")
    names, D, z, init = [], [], [], []
    for k, sp in enumerate(species):
        where = f"species[{k}]"
        if not isinstance(sp, dict):
            raise ConfigurationError("expected an object", where)
        _unknown(sp, _SPECIES_KEYS, where + ".")
        for req in ("z", "initial"):
            if req not in sp:
                raise ConfigurationError("missing", f"{where}.{req}")
        names.append(str(sp.get("name", f"u{k + 1}")))
        D.append(_number(sp.get("D", 1.0), f"{where}.D", positive=True))
        z.append(_number(sp["z"], f"{where}.z"))
        init.append(_field(sp["initial"], f"{where}.initial"))
    for key, target in (("diffusion", D), ("charge", z)):
        if key in cfg:
            vals = cfg[key]
            if not isinstance(vals, list) or len(vals) != len(species):
                raise ConfigurationError("needs one value per species", key)
            target[:] = [_number(v, key, positive=(key == "diffusion")) for v in vals]
    for req in ("tau", "T"):
        if req not in cfg:
            raise ConfigurationError("missing", req)
    problem = ProblemConfig(
        diffusion=D,
        charge=z,
        initial=init,
        beta=_number(cfg.get("beta", 1.0), "beta", positive=True),
        lambda2=_number(cfg.get("lambda2", 1e-2), "lambda2", positive=True),
        phi_dirichlet=_field(cfg.get("phi_dirichlet", "0"), "phi_dirichlet"),
        source=_field(cfg.get("source", "0"), "source"),
        weight_variant=_variant(cfg.get("weight_variant", "mean")),
        final_time=_number(cfg["T"], "T", positive=True),
        time_step=_number(cfg["tau"], "tau", positive=True),
        name=str(cfg.get("name", cfg.get("scenario", "custom"))),
    )
    problem.step_sizes()
    return problem, tuple(names)


def _variant(value):
    from .scheme import WeightVariant

    try:
        return WeightVariant.parse(value)
    except CVFEError as exc:
        raise ConfigurationError(str(exc), "weight_variant") from None


def newton_from_dict(spec) -> NewtonOptions:
    spec = {**_NEWTON_DEFAULTS, **(spec or {})}
    allowed = {f.name for f in fields(NewtonOptions)}
    _unknown(spec, allowed, "newton.")
    try:
        return NewtonOptions(**spec)
    except (TypeError, CVFEError) as exc:
        raise ConfigurationError(str(exc), "newton") from None


def load_config(source, base_dir=None) -> RunConfig:
    """Parse a configuration from a path, a JSON string or a dict."""
    if isinstance(source, dict):
        raw = source
    else:
        path = Path(source)
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigurationError(f"cannot read {str(path)!r}: {exc.strerror}") from None
            base_dir = base_dir or path.parent
        else:
            text = source
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    cfg = resolve(raw)
    if "mesh" not in cfg:
        raise ConfigurationError("missing", "mesh")
    problem, names = problem_from_dict(cfg)
    mesh = build_mesh(cfg["mesh"], Path(base_dir) if base_dir else None)
    if not np.any(mesh.dirichlet_mask):
        logger.warning("mesh has no Dirichlet vertices; the potential is determined only up to the source balance")
    out = cfg.get("output", {}) or {}
    if not isinstance(out, dict):
        raise ConfigurationError("expected an object", "output")
    _unknown(out, _OUTPUT_KEYS, "output.")
    stride = _number(out.get("snapshot_stride", 0), "output.snapshot_stride", integer=True)
    if stride < 0:
        raise ConfigurationError("must be non-negative", "output.snapshot_stride")
    out_dir = Path(out["dir"]) if "dir" in out else None
    if out_dir is not None and base_dir and not out_dir.is_absolute():
        out_dir = Path(base_dir) / out_dir
    return RunConfig(
        name=problem.name,
        problem=problem,
        mesh=mesh,
        newton=newton_from_dict(cfg.get("newton")),
        species_names=names,
        out_dir=out_dir,
        snapshot_stride=stride,
        raw=cfg,
    )


def builtin_config(name, **overrides) -> RunConfig:
    """Shortcut for ``load_config({"scenario": name, **overrides})``."""
    return load_config({"scenario": name, **overrides})
