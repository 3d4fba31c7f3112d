"""Scenario files, field snapshots and fracture time series.

A scenario is a TOML document with the tables ``geometry``, ``materials``,
``initial``, ``solver``, ``output`` and an array of ``phases``. Every value
not given falls back to a default, and :func:`dump_scenario` writes the fully
populated document back so a run can be reproduced from its own echo.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .ad import value
from .contact import REGIME_NAMES
from .errors import IoError, ParseError, ValidationError
from .fvm import MaterialParams
from .mdgrid import SIDES
from .solver import SolverControls, StepRecord

KINDS = ("dirichlet", "neumann")


@dataclass
class GeometrySpec:
    domain: tuple = (0.0, 0.0, 1.0, 1.0)
    resolution: tuple = (10, 10)
    fractures: tuple = ()
    perturbation: float = 0.0
    seed: int = 0
    mesh: str | None = None
    fracture_tags: tuple = ()


@dataclass
class InitialSpec:
    pressure: float = 0.0
    temperature: float | None = None  # None: reference temperature


@dataclass
class OutputSpec:
    directory: str = "output"
    every: int = 1
    vtk: bool = True


@dataclass
class PhaseSpec:
    """Boundary data of one phase, keyed by side.

    ``mechanics[side] = ((kind_x, kind_y), (value_x, value_y))``;
    ``flow[side]`` and ``heat[side]`` are ``(kind, value)``. Sides that are
    not listed are homogeneous Neumann.
    """

    name: str
    start: float
    end: float
    dt: float
    mechanics: dict = field(default_factory=dict)
    flow: dict = field(default_factory=dict)
    heat: dict = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    geometry: GeometrySpec
    materials: MaterialParams
    phases: list
    initial: InitialSpec = field(default_factory=InitialSpec)
    solver: SolverControls = field(default_factory=SolverControls)
    output: OutputSpec = field(default_factory=OutputSpec)
    contact_c: float | None = None
    mpfa_eta: float | None = None
    mpsa_eta: float | None = None


# ---------------------------------------------------------------------------
# parsing


def _num(x, where: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ValidationError("must be a number", where)
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError("must be finite", where)
    return x


def _int(x, where: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise ValidationError("must be an integer", where)
    return int(x)


def _table(doc: dict, key: str, where: str = "") -> dict:
    t = doc.get(key, {})
    if not isinstance(t, dict):
        raise ValidationError("must be a table", f"{where}{key}")
    return t


def _no_extra(t: dict, allowed, where: str) -> None:
    extra = sorted(set(t) - set(allowed))
    if extra:
        raise ValidationError(f"unknown key(s) {', '.join(extra)}", where)


def _geometry(t: dict) -> GeometrySpec:
    allowed = [f.name for f in fields(GeometrySpec)]
    _no_extra(t, allowed, "geometry")
    d = GeometrySpec()
    dom = t.get("domain", list(d.domain))
    if not isinstance(dom, list) or len(dom) != 4:
        raise ValidationError("must be [xmin, ymin, xmax, ymax]", "geometry.domain")
    dom = tuple(_num(v, "geometry.domain") for v in dom)
    if not (dom[2] > dom[0] and dom[3] > dom[1]):
        raise ValidationError("box has non-positive extent", "geometry.domain")
    res = t.get("resolution", list(d.resolution))
    if isinstance(res, int) and not isinstance(res, bool):
        res = [res, res]
    if not isinstance(res, list) or len(res) != 2:
        raise ValidationError("must be [nx, ny]", "geometry.resolution")
    res = tuple(_int(v, "geometry.resolution") for v in res)
    if min(res) < 1:
        raise ValidationError("must be positive", "geometry.resolution")
    fr = []
    for k, seg in enumerate(t.get("fractures", [])):
        where = f"geometry.fractures[{k}]"
        if not (isinstance(seg, list) and len(seg) == 2 and all(isinstance(p, list) and len(p) == 2 for p in seg)):
            raise ValidationError("must be [[x0, y0], [x1, y1]]", where)
        fr.append(tuple(tuple(_num(v, where) for v in p) for p in seg))
    pert = _num(t.get("perturbation", d.perturbation), "geometry.perturbation")
    if not 0.0 <= pert < 1.0:
        raise ValidationError("must lie in [0, 1)", "geometry.perturbation")
    mesh = t.get("mesh")
    if mesh is not None and not isinstance(mesh, str):
        raise ValidationError("must be a path string", "geometry.mesh")
    tags = tuple(_int(v, "geometry.fracture_tags") for v in t.get("fracture_tags", []))
    if mesh is not None and fr:
        raise ValidationError("give either fracture segments or a mesh, not both", "geometry")
    return GeometrySpec(dom, res, tuple(fr), pert, _int(t.get("seed", 0), "geometry.seed"), mesh, tags)


def _materials(t: dict) -> MaterialParams:
    names = [f.name for f in fields(MaterialParams)]
    _no_extra(t, names + ["young_modulus", "poisson_ratio"], "materials")
    if "friction_coefficient" not in t:
        raise ValidationError("is required", "materials.friction_coefficient")
    kw = {k: _num(v, f"materials.{k}") for k, v in t.items()}
    young, poisson = kw.pop("young_modulus", None), kw.pop("poisson_ratio", None)
    if (young is None) != (poisson is None):
        raise ValidationError("young_modulus and poisson_ratio go together", "materials")
    if young is not None:
        if "shear_modulus" in kw or "lame_lambda" in kw:
            raise ValidationError("give Young/Poisson or Lame parameters, not both", "materials")
        if not (young > 0 and -1.0 < poisson < 0.5):
            raise ValidationError("need E > 0 and -1 < nu < 0.5", "materials.young_modulus")
        return MaterialParams.from_young(young, poisson, **kw)
    return MaterialParams(**kw)


def _side_entries(t: dict, where: str, vector: bool) -> dict:
    out = {}
    for side, entry in t.items():
        w = f"{where}.{side}"
        if side not in SIDES:
            raise ValidationError(f"unknown side (expected one of {', '.join(SIDES)})", w)
        if not isinstance(entry, dict):
            raise ValidationError("must be a table with kind and value", w)
        _no_extra(entry, ("kind", "value"), w)
        kind = entry.get("kind", "neumann")
        val = entry.get("value", [0.0, 0.0] if vector else 0.0)
        if vector:
            kind = [kind, kind] if isinstance(kind, str) else kind
            val = [val, val] if isinstance(val, (int, float)) and not isinstance(val, bool) else val
            if not (isinstance(kind, list) and len(kind) == 2 and isinstance(val, list) and len(val) == 2):
                raise ValidationError("kind and value need one entry per component", w)
            kind = tuple(str(k).lower() for k in kind)
            val = tuple(_num(v, f"{w}.value") for v in val)
            bad = [k for k in kind if k not in KINDS]
        else:
            if not isinstance(kind, str):
                raise ValidationError("must be a string", f"{w}.kind")
            kind = kind.lower()
            val = _num(val, f"{w}.value")
            bad = [] if kind in KINDS else [kind]
        if bad:
            raise ValidationError(f"unknown condition kind {bad[0]!r}", f"{w}.kind")
        out[side] = (kind, val)
    return out


def _phases(items) -> list:
    if not isinstance(items, list) or not items:
        raise ValidationError("at least one phase is required", "phases")
    out = []
    for k, t in enumerate(items):
        where = f"phases[{k}]"
        if not isinstance(t, dict):
            raise ValidationError("must be a table", where)
        _no_extra(t, ("name", "start", "end", "dt", "mechanics", "flow", "heat"), where)
        for key in ("start", "end", "dt"):
            if key not in t:
                raise ValidationError("is required", f"{where}.{key}")
        start, end, dt = (_num(t[key], f"{where}.{key}") for key in ("start", "end", "dt"))
        if not end > start:
            raise ValidationError("end must exceed start", f"{where}.end")
        if not dt > 0:
            raise ValidationError("must be positive", f"{where}.dt")
        name = str(t.get("name", f"phase{k + 1}"))
        out.append(
            PhaseSpec(
                name,
                start,
                end,
                dt,
                _side_entries(_table(t, "mechanics", where + "."), f"{where}.mechanics", True),
                _side_entries(_table(t, "flow", where + "."), f"{where}.flow", False),
                _side_entries(_table(t, "heat", where + "."), f"{where}.heat", False),
            )
        )
    for k in range(1, len(out)):
        a, b = out[k - 1], out[k]
        tol = 1e-12 * max(abs(a.end), abs(b.start), b.end - b.start)
        if b.start < a.end - tol:
            raise ValidationError("overlaps the previous phase", f"phases[{k}].start")
        if b.start > a.end + tol:
            raise ValidationError("leaves a gap after the previous phase", f"phases[{k}].start")
    return out


def _solver(t: dict):
    names = [f.name for f in fields(SolverControls)]
    extra = ("contact_c", "mpfa_eta", "mpsa_eta")
    _no_extra(t, names + list(extra), "solver")
    kw = {}
    for k, v in t.items():
        if k == "linear_solver":
            kw[k] = str(v)
        elif k in ("max_iterations", "max_cuts"):
            kw[k] = _int(v, f"solver.{k}")
        else:
            kw[k] = _num(v, f"solver.{k}")
    opt = {k: kw.pop(k, None) for k in extra}
    if opt["contact_c"] is not None and not opt["contact_c"] > 0:
        raise ValidationError("must be positive", "solver.contact_c")
    for k in ("mpfa_eta", "mpsa_eta"):
        if opt[k] is not None and not 0.0 <= opt[k] < 1.0:
            raise ValidationError("must lie in [0, 1)", f"solver.{k}")
    return SolverControls(**kw), opt


def _output(t: dict) -> OutputSpec:
    _no_extra(t, [f.name for f in fields(OutputSpec)], "output")
    every = _int(t.get("every", 1), "output.every")
    if every < 1:
        raise ValidationError("must be at least 1", "output.every")
    vtk = t.get("vtk", True)
    if not isinstance(vtk, bool):
        raise ValidationError("must be true or false", "output.vtk")
    return OutputSpec(str(t.get("directory", "output")), every, vtk)


def _initial(t: dict) -> InitialSpec:
    _no_extra(t, ("pressure", "temperature"), "initial")
    temp = t.get("temperature")
    return InitialSpec(
        _num(t.get("pressure", 0.0), "initial.pressure"),
        None if temp is None else _num(temp, "initial.temperature"),
    )


def parse_scenario(text: str) -> Scenario:
    """Parse and validate a scenario document."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ParseError(str(exc).split(" (at")[0], line=line) from None
    _no_extra(doc, ("name", "geometry", "materials", "initial", "solver", "output", "phases"), "scenario")
    if "materials" not in doc:
        raise ValidationError("is required", "materials.friction_coefficient")
    solver, opt = _solver(_table(doc, "solver"))
    return Scenario(
        name=str(doc.get("name", "scenario")),
        geometry=_geometry(_table(doc, "geometry")),
        materials=_materials(_table(doc, "materials")),
        phases=_phases(doc.get("phases", [])),
        initial=_initial(_table(doc, "initial")),
        solver=solver,
        output=_output(_table(doc, "output")),
        **opt,
    )


def load_scenario(path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read scenario {path}: {exc.strerror}") from None
    return parse_scenario(text)


# ---------------------------------------------------------------------------
# normalised dump


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def scenario_to_dict(sc: Scenario) -> dict:
    geo = asdict(sc.geometry)
    geo["domain"] = list(geo["domain"])
    geo["resolution"] = list(geo["resolution"])
    geo["fractures"] = [[list(p) for p in seg] for seg in sc.geometry.fractures]
    geo["fracture_tags"] = list(geo["fracture_tags"])
    solver = _drop_none(asdict(sc.solver))
    solver.update(_drop_none({"contact_c": sc.contact_c, "mpfa_eta": sc.mpfa_eta, "mpsa_eta": sc.mpsa_eta}))
    phases = []
    for ph in sc.phases:
        phases.append(
            {
                "name": ph.name,
                "start": ph.start,
                "end": ph.end,
                "dt": ph.dt,
                "mechanics": {s: {"kind": list(k), "value": list(v)} for s, (k, v) in ph.mechanics.items()},
                "flow": {s: {"kind": k, "value": v} for s, (k, v) in ph.flow.items()},
                "heat": {s: {"kind": k, "value": v} for s, (k, v) in ph.heat.items()},
            }
        )
    return {
        "name": sc.name,
        "geometry": _drop_none(geo),
        "materials": _drop_none(asdict(sc.materials)),
        "initial": _drop_none(asdict(sc.initial)),
        "solver": solver,
        "output": asdict(sc.output),
        "phases": phases,
    }


def dump_scenario(sc: Scenario) -> str:
    """Fully populated TOML echo of ``sc``; parsing it gives ``sc`` back."""
    return tomli_w.dumps(scenario_to_dict(sc))


# ---------------------------------------------------------------------------
# VTK snapshots

_VTK_TYPE = {2: 5, 1: 3, 0: 1}  # triangle, line, vertex


def _fmt(a) -> str:
    return " ".join(format(float(v), ".12e") for v in np.ravel(a))


def _vtk_text(sd, title: str, scalars: dict, vectors: dict) -> str:
    pts = np.zeros((sd.num_nodes, 3))
    pts[:, :2] = sd.nodes
    if sd.dim == 0:
        conn = np.zeros((1, 1), dtype=int)
    else:
        conn = np.asarray(sd.cell_nodes, dtype=int)
    nc, npc = conn.shape
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {pts.shape[0]} double")
    out += [_fmt(p) for p in pts]
    out.append(f"CELLS {nc} {nc * (npc + 1)}")
    out += [" ".join(str(v) for v in [npc, *row]) for row in conn]
    out.append(f"CELL_TYPES {nc}")
    out += [str(_VTK_TYPE[sd.dim])] * nc
    out.append(f"CELL_DATA {nc}")
    for name, arr in scalars.items():
        integer = np.issubdtype(np.asarray(arr).dtype, np.integer)
        out.append(f"SCALARS {name} {'int' if integer else 'double'} 1")
        out.append("LOOKUP_TABLE default")
        out += [str(int(v)) if integer else format(float(v), ".12e") for v in np.ravel(arr)]
    for name, arr in vectors.items():
        out.append(f"VECTORS {name} double")
        v3 = np.zeros((nc, 3))
        v3[:, :2] = np.asarray(arr).reshape(nc, 2)
        out += [_fmt(v) for v in v3]
    return "\n".join(out) + "\n"


def write_vtk_snapshot(model, state, directory, name: str, step: int) -> list:
    """One legacy VTK file per subdomain; returns the written paths.

    Matrix files carry ``p``, ``T``, ``u_magnitude`` and the vector ``u``;
    fracture files ``p``, ``T``, ``aperture``, ``regime`` (0 open, 1 stick,
    2 slide) and ``jump_t_norm``; intersection files ``p`` and ``T``.
    """
    from .physics import Terms

    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {directory}: {exc.strerror}") from None
    t = Terms(model, state.x, state, state, 1.0)
    paths = []
    for sd in model.grid.subdomain_list():
        p, T = state[sd.key, "p"], state[sd.key, "T"]
        vectors = {}
        if sd.dim == 2:
            u = state[sd.key, "u"].reshape(-1, 2)
            scalars = {"p": p, "T": T, "u_magnitude": np.hypot(u[:, 0], u[:, 1])}
            vectors["u"] = u
        elif sd.dim == 1:
            reg = state.regimes.get(sd.key, np.zeros(sd.num_cells, dtype=int))
            scalars = {
                "p": p,
                "T": T,
                "aperture": value(t.aperture(sd)),
                "regime": np.asarray(reg, dtype=int),
                "jump_t_norm": np.abs(value(t.jump_t(sd))),
            }
        else:
            scalars = {"p": p, "T": T}
        path = directory / f"{name}_{sd.dim}_{sd.index}_{step:05d}.vtk"
        text = _vtk_text(sd, f"{name} {sd.name} step {step} time {format(float(state.time), '.12e')}", scalars, vectors)
        try:
            path.write_text(text)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc.strerror}") from None
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# time series

CSV_HEADER = (
    "step",
    "time",
    "dt",
    "phase",
    "fracture_id",
    "jump_n_norm",
    "jump_t_norm",
    "open",
    "stick",
    "slide",
    "newton_iterations",
)


def write_fracture_timeseries(records: list, path) -> Path:
    """One CSV row per (step, fracture id) with the columns of ``CSV_HEADER``."""
    if not records:
        raise IoError("no diagnostics to write")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in records:
                for f in r.fractures:
                    w.writerow(
                        [
                            r.step,
                            format(r.time, ".12e"),
                            format(r.dt, ".12e"),
                            r.phase,
                            f["id"],
                            format(f["jump_n_norm"], ".12e"),
                            format(f["jump_t_norm"], ".12e"),
                            *(f[n] for n in REGIME_NAMES),
                            r.iterations,
                        ]
                    )
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None
    return path


def read_fracture_timeseries(path) -> list:
    try:
        with Path(path).open(newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from None


def write_diagnostics(records: list, path) -> Path:
    """JSON lines, one object per accepted time step."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for r in records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror}") from None
    return path


def read_diagnostics(path) -> list:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from None
    return [StepRecord(**json.loads(ln)) for ln in lines if ln.strip()]
