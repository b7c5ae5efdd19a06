"""File formats: legacy ASCII VTK meshes, history CSV, run configs and summaries."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .mesh import SimplicialMesh

VTK_TRIANGLE = 5
VTK_TETRA = 10
_CELL_TYPE = {2: VTK_TRIANGLE, 3: VTK_TETRA}
_CELL_DIM = {VTK_TRIANGLE: 2, VTK_TETRA: 3}


class MeshFormatError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class ConfigError(ValueError):
    def __init__(self, key, msg):
        self.key = key
        super().__init__(f"{key}: {msg}")


def _fmt(x):
    return format(float(x), ".17g")


# --- VTK ----------------------------------------------------------------


def write_mesh(mesh, path, point_data=None, cell_data=None, title="meshmorph mesh"):
    """Write a legacy ASCII VTK unstructured grid.

    ``point_data`` / ``cell_data`` map field names to per-vertex / per-element
    scalars. 2D meshes are written with ``z = 0``.
    """
    point_data = point_data or {}
    cell_data = cell_data or {}
    V, E = mesh.vertices, mesh.elements
    s = mesh.dim
    for name, vals in point_data.items():
        if len(vals) != len(V):
            raise ValueError(f"point field {name!r} has {len(vals)} values for {len(V)} points")
    for name, vals in cell_data.items():
        if len(vals) != len(E):
            raise ValueError(f"cell field {name!r} has {len(vals)} values for {len(E)} cells")
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " "), "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {len(V)} double"]
    P = V if s == 3 else np.c_[V, np.zeros(len(V))]
    lines += [" ".join(_fmt(c) for c in row) for row in P]
    k = s + 1
    lines.append(f"CELLS {len(E)} {len(E) * (k + 1)}")
    lines += [f"{k} " + " ".join(str(int(i)) for i in row) for row in E]
    lines.append(f"CELL_TYPES {len(E)}")
    lines += [str(_CELL_TYPE[s])] * len(E)
    for header, data, count in (("CELL_DATA", cell_data, len(E)), ("POINT_DATA", point_data, len(V))):
        if not data:
            continue
        lines.append(f"{header} {count}")
        for name, vals in data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [_fmt(v) for v in vals]
    Path(path).write_text("\n".join(lines) + "\n")


class _Lines:
    def __init__(self, text):
        self.rows = text.splitlines()
        self.i = 0

    def next(self):
        while self.i < len(self.rows):
            line = self.rows[self.i].strip()
            self.i += 1
            if line:
                return line
        return None

    @property
    def lineno(self):
        return self.i

    def expect(self, keyword):
        line = self.next()
        if line is None or not line.upper().startswith(keyword):
            raise MeshFormatError(f"expected {keyword}, found {line!r}", self.lineno)
        return line.split()

    def numbers(self, count, conv):
        out = []
        while len(out) < count:
            line = self.next()
            if line is None:
                raise MeshFormatError(f"unexpected end of file, {count - len(out)} values missing",
                                      self.lineno)
            try:
                out.extend(conv(t) for t in line.split())
            except ValueError:
                raise MeshFormatError(f"bad number in {line!r}", self.lineno) from None
        if len(out) != count:
            raise MeshFormatError(f"expected {count} values, found {len(out)}", self.lineno)
        return out


def _count(tokens, pos, lines):
    try:
        return int(tokens[pos])
    except (IndexError, ValueError):
        raise MeshFormatError(f"bad section header {' '.join(tokens)!r}", lines.lineno) from None


def read_mesh(path):
    """Read a file written by :func:`write_mesh`.

    Returns
    -------
    mesh : SimplicialMesh
    point_data, cell_data : dict of name -> array
    """
    lines = _Lines(Path(path).read_text())
    head = lines.next()
    if head is None or not head.startswith("# vtk DataFile"):
        raise MeshFormatError("missing '# vtk DataFile' header", lines.lineno)
    lines.next()  # title
    fmt = lines.next()
    if fmt != "ASCII":
        raise MeshFormatError(f"only ASCII files are supported, got {fmt!r}", lines.lineno)
    tok = lines.expect("DATASET")
    if tok[1:] != ["UNSTRUCTURED_GRID"]:
        raise MeshFormatError("only UNSTRUCTURED_GRID datasets are supported", lines.lineno)
    tok = lines.expect("POINTS")
    n = _count(tok, 1, lines)
    P = np.array(lines.numbers(3 * n, float)).reshape(n, 3)
    tok = lines.expect("CELLS")
    ne, total = _count(tok, 1, lines), _count(tok, 2, lines)
    flat = lines.numbers(total, int)
    cells, pos = [], 0
    for _ in range(ne):
        if pos >= len(flat):
            raise MeshFormatError("CELLS size does not match its cell list", lines.lineno)
        k = flat[pos]
        cells.append(flat[pos + 1:pos + 1 + k])
        pos += k + 1
    if pos != total:
        raise MeshFormatError(f"CELLS size {total} does not match its cell list ({pos})", lines.lineno)
    tok = lines.expect("CELL_TYPES")
    if _count(tok, 1, lines) != ne:
        raise MeshFormatError("CELL_TYPES count differs from CELLS count", lines.lineno)
    types = set(lines.numbers(ne, int))
    if len(types) > 1 or not types <= set(_CELL_DIM):
        raise MeshFormatError(f"unsupported cell types {sorted(types)}", lines.lineno)
    dim = _CELL_DIM[types.pop()] if ne else (2 if np.all(P[:, 2] == 0) else 3)
    if any(len(c) != dim + 1 for c in cells):
        raise MeshFormatError("cell arity does not match its type", lines.lineno)
    point_data, cell_data = {}, {}
    target, size = None, 0
    while (line := lines.next()) is not None:
        tok = line.split()
        key = tok[0].upper()
        if key == "CELL_DATA":
            target, size = cell_data, _count(tok, 1, lines)
        elif key == "POINT_DATA":
            target, size = point_data, _count(tok, 1, lines)
        elif key == "SCALARS":
            if target is None or len(tok) < 2:
                raise MeshFormatError("SCALARS outside a data section", lines.lineno)
            lines.expect("LOOKUP_TABLE")
            target[tok[1]] = np.array(lines.numbers(size, float))
        else:
            raise MeshFormatError(f"unknown section {tok[0]!r}", lines.lineno)
    mesh = SimplicialMesh(P[:, :dim].copy(), np.array(cells, dtype=np.int64).reshape(-1, dim + 1))
    return mesh, point_data, cell_data


# --- history CSV ---------------------------------------------------------

HISTORY_COLUMNS = ("iteration", "norm2_qe", "min_qe", "mean_qe", "inverted_count")


def write_history_csv(reports, path):
    """One row per scored iteration."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for i, rep in enumerate(reports):
            w.writerow([i, repr(rep.norm2_qe), repr(rep.min_qe), repr(rep.mean_qe),
                        rep.inverted_count])


def read_history_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"iteration": int(r["iteration"]), "norm2_qe": float(r["norm2_qe"]),
             "min_qe": float(r["min_qe"]), "mean_qe": float(r["mean_qe"]),
             "inverted_count": int(r["inverted_count"])} for r in rows]


# --- run configuration ---------------------------------------------------

CASES = {
    "square_to_disk": dict(domain="unit_square", map="square_to_disk", h=0.0476, p=0.86,
                           delta=1e-3, sigma=0.1006, alpha=0.001),
    "annulus_to_airfoil": dict(domain="annulus", map="annulus_to_airfoil", h=0.0453, p=0.73,
                               delta=1e-3, sigma=1.3696, alpha=0.01),
    "cube_to_sphere": dict(domain="unit_cube", map="cube_to_sphere", h=0.104, p=0.87,
                           delta=1e-3, sigma=0.0153, alpha=0.001),
}


@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment.

    Missing keys fall back to the defaults of the named ``case``.
    ``n_target > 0`` overrides ``h`` with a spacing chosen to give about that
    many nodes. ``quality_gate = 0`` disables the gate.
    """

    case: str = "square_to_disk"
    domain: str = "unit_square"
    map: str = "square_to_disk"
    h: float = 0.0476
    n_target: int = 0
    p: float = 0.86
    kappa_t: float = 1e12
    bracket_lo: float = 1e-3
    bracket_hi: float = 1e2
    norm_kind: str = "one_norm"
    delta: float = 1e-3
    sigma: float = 0.1006
    alpha: float = 0.001
    max_iterations: int = 50
    quality_gate: float = 0.0
    mu_source: str = "data_sites"
    snap_boundary: bool = False
    seed: int = 0
    r_in: float = 0.5
    r_out: float = 1.0
    joukowsky_cx: float = -0.08
    joukowsky_cy: float = 0.08
    airfoil_scale: float = 0.3
    square_half: float = 1.0
    output_dir: str = "out"

    @classmethod
    def for_case(cls, case="square_to_disk", **overrides):
        if case not in CASES:
            raise ConfigError("case", f"unknown case {case!r}; choose from {sorted(CASES)}")
        return cls.from_dict({"case": case, **CASES[case], **overrides})

    @classmethod
    def from_dict(cls, values):
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in values.items():
            if key not in types:
                raise ConfigError(key, "unknown key")
            out[key] = _coerce(key, val, types[key])
        cfg = cls(**out)
        cfg.validate()
        return cfg

    def validate(self):
        if self.case not in CASES:
            raise ConfigError("case", f"unknown case {self.case!r}")
        for key in ("h", "kappa_t", "bracket_lo", "bracket_hi", "sigma", "alpha"):
            if not getattr(self, key) > 0:
                raise ConfigError(key, "must be positive")
        if not 0 < self.p <= 1:
            raise ConfigError("p", "must lie in (0, 1]")
        if self.delta < 0:
            raise ConfigError("delta", "must be nonnegative")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations", "must be at least 1")
        if self.norm_kind not in ("one_norm", "two_norm", "max_norm"):
            raise ConfigError("norm_kind", f"unknown norm {self.norm_kind!r}")
        if self.mu_source not in ("data_sites", "boundary"):
            raise ConfigError("mu_source", "must be 'data_sites' or 'boundary'")

    def to_dict(self):
        return dataclasses.asdict(self)


def _coerce(key, val, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if isinstance(val, bool):
            return val
    elif typ == "int":
        if isinstance(val, int) and not isinstance(val, bool):
            return val
        if isinstance(val, float) and val.is_integer():
            return int(val)
    elif typ == "float":
        if isinstance(val, (int, float)) and not isinstance(val, bool):
            return float(val)
    elif typ == "str":
        if isinstance(val, str):
            return val
    raise ConfigError(key, f"expected {typ}, got {type(val).__name__} {val!r}")


def parse_value(text):
    """Interpret a command-line ``--set`` value: number, boolean or bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def read_config(path):
    """Read a flat ``key = value`` file (``#`` comments, strings in quotes)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("path", f"cannot read {path}: {exc.strerror}") from None
    try:
        values = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("syntax", str(exc)) from None
    for key, val in values.items():
        if isinstance(val, (dict, list)):
            raise ConfigError(key, "nested values are not supported")
    return RunConfig.for_case(**values) if values else RunConfig.for_case()


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite values cannot be written")
        return repr(v)
    return str(v)


def write_config(cfg, path):
    lines = [f"{k} = {_toml_value(v)}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


# --- summary -------------------------------------------------------------


@dataclass
class RunSummary:
    case: str
    eps_star: float
    kappa: float
    residual: float
    n: int
    n_interior: int
    n_boundary: int
    n_data: int
    norm2_qe: list
    min_qe: list
    mean_qe: list
    min_qy: list
    norm2_qy: list
    inverted_count: list
    iterations: int
    best_index: int
    termination: str
    timings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        return cls(**json.loads(Path(path).read_text()))
