"""Command-line entry point.

``fracthm run FILE`` simulates a scenario file, ``fracthm demo`` the bundled
four-phase scenario and ``fracthm verify`` the built-in oracle suites.

Exit codes: 0 success, 1 failed check, 2 invalid input, 3 non-convergence,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FracThmError, GeometryError, IoError, NonConvergence, ParseError, ValidationError
from .fvm import side_boundary_conditions
from .io import (
    Scenario,
    dump_scenario,
    load_scenario,
    write_diagnostics,
    write_fracture_timeseries,
    write_vtk_snapshot,
)
from .mdgrid import FractureNetwork, build_structured, import_msh
from .physics import Model
from .solver import TimePhase, run_simulation

logger = logging.getLogger("fracthm")

EXIT_OK, EXIT_CHECK, EXIT_INVALID, EXIT_NONCONVERGENCE, EXIT_USAGE = 0, 1, 2, 3, 64


def build_grid(sc: Scenario, base_dir=None):
    geo = sc.geometry
    if geo.mesh is not None:
        path = Path(geo.mesh)
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        try:
            text = path.read_text()
        except OSError as exc:
            raise IoError(f"cannot read mesh {path}: {exc.strerror}") from None
        return import_msh(text, geo.fracture_tags)
    net = FractureNetwork(geo.fractures, geo.domain) if geo.fractures else None
    return build_structured(geo.domain, geo.resolution, net, geo.perturbation, geo.seed)


def build_phases(sc: Scenario, grid) -> list:
    return [
        TimePhase(
            ph.name,
            ph.start,
            ph.end,
            ph.dt,
            side_boundary_conditions(grid.matrix, mechanics=ph.mechanics, flow=ph.flow, heat=ph.heat),
        )
        for ph in sc.phases
    ]


def with_overrides(sc: Scenario, resolution=None, dt_scale=None, max_newton=None) -> Scenario:
    if resolution is not None:
        sc = replace(sc, geometry=replace(sc.geometry, resolution=(resolution, resolution)))
    if dt_scale is not None:
        sc = replace(sc, phases=[replace(ph, dt=ph.dt * dt_scale) for ph in sc.phases])
    if max_newton is not None:
        sc = replace(sc, solver=replace(sc.solver, max_iterations=max_newton))
    return sc


@dataclass
class RunResult:
    scenario: Scenario
    model: Model
    states: list
    records: list
    out_dir: Path
    runtime: float


def run_scenario(sc: Scenario, out_dir, base_dir=None, vtk: bool | None = None) -> RunResult:
    """Simulate ``sc`` and write its data products into ``out_dir``.

    Products: ``scenario.toml`` (normalised echo), ``fractures.csv``,
    ``diagnostics.jsonl``, ``summary.json`` and, if enabled, VTK snapshots
    every ``output.every`` steps and at every phase end.
    """
    t0 = time.perf_counter()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.toml").write_text(dump_scenario(sc))
    except OSError as exc:
        raise IoError(f"cannot write to {out}: {exc.strerror}") from None
    grid = build_grid(sc, base_dir)
    eta = {k: v for k, v in (("mpfa_eta", sc.mpfa_eta), ("mpsa_eta", sc.mpsa_eta)) if v is not None}
    model = Model(grid, sc.materials, contact_c=sc.contact_c, **eta)
    phases = build_phases(sc, grid)
    initial = model.initial_state(sc.initial.pressure, sc.initial.temperature)
    write_vtk = sc.output.vtk if vtk is None else vtk
    ends = {ph.end for ph in sc.phases}
    vtk_dir = out / "vtk"
    if write_vtk:
        initial.time = sc.phases[0].start
        write_vtk_snapshot(model, initial, vtk_dir, sc.name, 0)

    def callback(rec, state):
        logger.info(
            "step %d  t = %.6g  phase %s  newton %d  %s",
            rec.step,
            rec.time,
            rec.phase,
            rec.iterations,
            rec.regime_counts,
        )
        at_end = any(abs(state.time - e) <= 1e-9 * max(abs(e), 1.0) for e in ends)
        if write_vtk and (rec.step % sc.output.every == 0 or at_end):
            write_vtk_snapshot(model, state, vtk_dir, sc.name, rec.step)

    states, records = run_simulation(model, phases, sc.solver, initial, callback=callback)
    write_fracture_timeseries(records, out / "fractures.csv")
    write_diagnostics(records, out / "diagnostics.jsonl")
    summary = phase_summary(records)
    try:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write summary: {exc.strerror}") from None
    return RunResult(sc, model, states, records, out, time.perf_counter() - t0)


def phase_summary(records: list) -> dict:
    """Per-phase regime changes, opening and Newton statistics.

    A fracture changes regime in a phase when its (open, stick, slide) cell
    counts at any step of the phase differ from those at the end of the
    previous phase. Opening is the sum over fractures of the jump norm.
    """
    phases: list[str] = []
    for r in records:
        if r.phase not in phases:
            phases.append(r.phase)
    out = {"phases": []}
    before = None
    for name in phases:
        recs = [r for r in records if r.phase == name]
        triple = lambda r: {f["id"]: (f["open"], f["stick"], f["slide"]) for f in r.fractures}
        changed, slide_onset = set(), set()
        if before is not None:
            start = triple(before)
            for r in recs:
                for fid, tr in triple(r).items():
                    if tr != start[fid]:
                        changed.add(fid)
                    if tr[2] > 0 and start[fid][2] == 0:
                        slide_onset.add(fid)
        iters = [r.iterations for r in recs]
        out["phases"].append(
            {
                "name": name,
                "steps": len(recs),
                "end_time": recs[-1].time,
                "changed_fractures": sorted(changed),
                "slide_onset_fractures": sorted(slide_onset),
                "opening_end": float(sum(f["jump_n_norm"] for f in recs[-1].fractures)),
                "opening_start": None if before is None else float(sum(f["jump_n_norm"] for f in before.fractures)),
                "iterations_first": iters[0],
                "iterations_max": max(iters),
                "iterations_rest_mean": float(np.mean(iters[1:])) if len(iters) > 1 else None,
                "max_mass_imbalance": max(r.mass_imbalance for r in recs),
                "max_energy_imbalance": max(r.energy_imbalance for r in recs),
            }
        )
        before = recs[-1]
    return out


def demo_scenario() -> Scenario:
    from .verify import scenario_path

    return load_scenario(scenario_path("demo"))


# ---------------------------------------------------------------------------
# CLI


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fracthm", description="Mixed-dimensional thermo-hydro-mechanical fracture simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every time step")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, default_out):
        sp.add_argument("--resolution", type=int, help="cells per side of the structured grid")
        sp.add_argument("--out-dir", default=default_out, help="output directory")
        sp.add_argument("--dt-scale", type=float, help="multiply every phase time step")
        sp.add_argument("--max-newton", type=int, help="Newton iteration limit per step")
        sp.add_argument("--seed-check", action="store_true", help="run twice and compare the CSV diagnostics")
        sp.add_argument("--no-vtk", action="store_true", help="skip VTK snapshots")

    run = sub.add_parser("run", help="simulate a scenario file")
    run.add_argument("scenario")
    common(run, None)
    demo = sub.add_parser("demo", help="four-phase demonstration")
    common(demo, "demo_output")
    ver = sub.add_parser("verify", help="built-in verification suites")
    ver.add_argument("suites", nargs="*", help="subset of suites to run")
    return p


def _simulate(sc, args, base_dir) -> int:
    if args.resolution is not None and args.resolution < 1:
        raise ValidationError("must be positive", "--resolution")
    if args.dt_scale is not None and not args.dt_scale > 0:
        raise ValidationError("must be positive", "--dt-scale")
    if args.max_newton is not None and args.max_newton < 1:
        raise ValidationError("must be at least 1", "--max-newton")
    sc = with_overrides(sc, args.resolution, args.dt_scale, args.max_newton)
    out = Path(args.out_dir or sc.output.directory)
    vtk = False if args.no_vtk else None
    res = run_scenario(sc, out, base_dir, vtk=vtk)
    print(f"{sc.name}: {len(res.records)} steps in {res.runtime:.1f} s, output in {out}")
    for ph in phase_summary(res.records)["phases"]:
        print(
            f"  phase {ph['name']}: {ph['steps']} steps, newton first/max {ph['iterations_first']}/{ph['iterations_max']},"
            f" regime changes in fractures {ph['changed_fractures']}, opening {ph['opening_end']:.3e}"
        )
    if not args.seed_check:
        return EXIT_OK
    again = run_scenario(sc, out / "seed_check", base_dir, vtk=False)
    same = (out / "fractures.csv").read_bytes() == (again.out_dir / "fractures.csv").read_bytes()
    print(f"determinism check: {'identical' if same else 'DIFFERENT'} CSV diagnostics")
    return EXIT_OK if same else EXIT_CHECK


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "verify":
            from .verify import SUITES, run_all

            unknown = [s for s in args.suites if s not in SUITES]
            if unknown:
                print(f"unknown suite(s): {', '.join(unknown)}; available: {', '.join(SUITES)}", file=sys.stderr)
                return EXIT_USAGE
            results = run_all(args.suites or None, echo=print)
            return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK
        if args.command == "demo":
            return _simulate(demo_scenario(), args, None)
        path = Path(args.scenario)
        return _simulate(load_scenario(path), args, path.parent)
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ParseError, ValidationError, GeometryError, IoError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FracThmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
