"""Monolithic semismooth Newton solver and implicit Euler time loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from . import ad
from .ad import AdArray, value
from .contact import (
    REGIME_NAMES,
    SLIDE,
    STICK,
    assemble_contact_equations,
    local_state,
    traction_balance_rows,
)
from .errors import DegenerateBound, LinearSolveFailure, NonConvergence, ValidationError
from .fvm import BoundaryConditionSet
from .physics import (
    Model,
    State,
    Terms,
    assemble_interface_laws,
    assemble_subdomain_h,
    assemble_subdomain_l,
    conservation_audit,
)

logger = logging.getLogger(__name__)


@dataclass
class SolverControls:
    """Newton and time-stepping controls.

    Residuals are scaled row by row with the magnitude of the Jacobian row
    weighted by characteristic variable scales, increments by the larger of
    the block's current magnitude and its characteristic scale.
    """

    tolerance: float = 1e-8
    max_iterations: int = 40
    max_cuts: int = 4
    cut_factor: float = 0.5
    linear_solver: str = "splu"
    displacement_scale: float | None = None  # default: 1e-6 x domain size
    pressure_scale: float = 1e6
    temperature_scale: float = 1.0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValidationError("must be positive", "tolerance")
        if self.max_iterations < 1:
            raise ValidationError("must be at least 1", "max_iterations")
        if self.max_cuts < 0:
            raise ValidationError("must be non-negative", "max_cuts")
        if not 0 < self.cut_factor < 1:
            raise ValidationError("must lie in (0, 1)", "cut_factor")
        if self.linear_solver not in ("splu", "spsolve"):
            raise ValidationError("unknown linear solver", "linear_solver")
        for name in ("pressure_scale", "temperature_scale"):
            if not getattr(self, name) > 0:
                raise ValidationError("must be positive", name)


@dataclass
class TimePhase:
    name: str
    start: float
    end: float
    dt: float
    bc: BoundaryConditionSet


@dataclass
class StepRecord:
    step: int
    time: float
    dt: float
    phase: str
    iterations: int
    cuts: int
    regime_counts: dict
    fractures: list  # dicts: id, jump_n_norm, jump_t_norm, open, stick, slide
    mass_imbalance: float
    energy_imbalance: float
    worst_block: str = ""


# ---------------------------------------------------------------------------
# Block system


@dataclass
class BlockSystem:
    """Monolithic Jacobian and residual with the block layout of ``dofs``."""

    jacobian: sps.csr_matrix
    residual: np.ndarray
    dofs: object
    regimes: dict = field(default_factory=dict)

    def block(self, eq_block: int, var_block: int) -> sps.csr_matrix:
        _, _, r0, r1 = self.dofs.blocks[eq_block]
        _, _, c0, c1 = self.dofs.blocks[var_block]
        return self.jacobian[r0:r1, c0:c1]

    def nonzero_blocks(self) -> set:
        """Pairs of (equation owner, variable owner) with a nonzero coupling."""
        owners = np.empty(self.dofs.num_dofs, dtype=object)
        for k, (o, _, a, b) in enumerate(self.dofs.blocks):
            owners[a:b] = [o] * (b - a)
        coo = self.jacobian.tocoo()
        mask = coo.data != 0
        return {(owners[r], owners[c]) for r, c in zip(coo.row[mask], coo.col[mask])}


def _iterate_state(terms: Terms, sd, c):
    return local_state(terms, sd, c)


def classify(model: Model, state: State, prev: State) -> dict:
    t = Terms(model, state.x, state, prev, 1.0)
    return {sd.key: _iterate_state(t, sd, model.contact_c).regime for sd in model.grid.fractures}


def _contact_indicators(model: Model, state: State, prev: State) -> dict:
    """Per fracture: slide direction sign(w) and whether |lam_t| < b."""
    t = Terms(model, state.x, state, prev, 1.0)
    out = {}
    for sd in model.grid.fractures:
        cs = _iterate_state(t, sd, model.contact_c)
        w = -cs.lam_t + model.contact_c * cs.dut
        out[sd.key] = (np.sign(w), np.abs(cs.lam_t) < cs.bound)
    return out


def guard_regimes(classified: dict, used_before: dict, ind: dict, ind_before: dict) -> dict:
    """Safeguarded active set for the next iterate.

    With a large numerical constant an over-resisting slide iterate produces
    a tangential increment of the wrong sign, and plain reclassification then
    alternates between the two slide directions without visiting Stick. Two
    rules prevent this: a slide cell whose direction reverses is tried as
    Stick, and a stick cell stays Stick while its traction is strictly inside
    the friction cone. Convergence is still judged against ``classified``.
    """
    out = {}
    for key, reg in classified.items():
        reg = reg.copy()
        if key in used_before and key in ind_before:
            before = used_before[key]
            sgn, inside = ind[key]
            flip = (reg == SLIDE) & (before == SLIDE) & (sgn * ind_before[key][0] < 0)
            hold = (reg == SLIDE) & (before == STICK) & inside
            reg[flip | hold] = STICK
        out[key] = reg
    return out


def assemble_system(model: Model, state: State, prev: State, dt: float, regimes: dict) -> BlockSystem:
    n = model.dofs.num_dofs
    x = AdArray(state.x.copy(), sps.identity(n, format="csr"))
    terms = Terms(model, x, state, prev, dt)
    vals = Terms(model, state.x, state, prev, dt)
    g = model.grid
    par = model.params
    c = model.contact_c
    tscale = par.shear_modulus * 1e-6
    eqs: dict = {}
    eqs.update({(g.matrix.key, k): v for k, v in assemble_subdomain_h(terms).items()})
    for sd in g.subdomain_list():
        if sd.dim == 2:
            continue
        eqs.update({(sd.key, k): v for k, v in assemble_subdomain_l(terms, sd).items()})
        if sd.dim == 1:
            it = _iterate_state(vals, sd, c)
            lam = terms.var(sd.key, "lam")
            jn = terms.jump_n(sd)
            dut = terms.jump_t(sd) - terms.prev_jump_t(sd)
            eqs[(sd.key, "lam")] = assemble_contact_equations(
                regimes[sd.key], lam, jn, dut, it, par.friction_coefficient, c, tscale
            )
            eqs[(g.fracture_interface(sd).key, "u_j")] = traction_balance_rows(terms, sd)
    for intf in g.interface_list():
        eqs.update({(intf.key, k): v for k, v in assemble_interface_laws(terms, intf).items()})
    parts = [eqs[(o, v)] for o, v, _, _ in model.dofs.blocks]
    R = ad.concatenate(parts, n)
    return BlockSystem(R.jac.tocsr(), R.val, model.dofs, regimes)


# ---------------------------------------------------------------------------
# Convergence


def variable_scales(model: Model, controls: SolverControls) -> np.ndarray:
    par = model.params
    g = model.grid
    L = max(g.domain[2] - g.domain[0], g.domain[3] - g.domain[1])
    su = controls.displacement_scale if controls.displacement_scale is not None else 1e-6 * L
    sp, sT = controls.pressure_scale, controls.temperature_scale
    h = g.characteristic_size
    sv = par.interface_permeability * h * sp
    sw = par.interface_conductivity * h * sT
    per_var = {
        "u": su,
        "u_j": su,
        "p": sp,
        "T": sT,
        "lam": par.shear_modulus * su / L,
        "v": sv,
        "w": sw,
        "s": par.fluid_volumetric_heat_capacity * sv * sT,
    }
    out = np.empty(model.dofs.num_dofs)
    for _, var, a, b in model.dofs.blocks:
        out[a:b] = per_var[var]
    return out


def scaled_residual_norms(system: BlockSystem, scales: np.ndarray) -> dict:
    J = abs(system.jacobian)
    ref = J @ scales
    ref = np.where(ref > 0, ref, 1.0)
    r = np.abs(system.residual) / ref
    return {
        system.dofs.block_name(o, v): float(np.max(r[a:b], initial=0.0))
        for o, v, a, b in system.dofs.blocks
    }


def scaled_increment_norms(dofs, x: np.ndarray, dx: np.ndarray, scales: np.ndarray) -> dict:
    out = {}
    for o, v, a, b in dofs.blocks:
        if b == a:
            out[dofs.block_name(o, v)] = 0.0
            continue
        ref = max(float(np.max(np.abs(x[a:b]))), float(np.max(scales[a:b])))
        out[dofs.block_name(o, v)] = float(np.max(np.abs(dx[a:b]))) / ref
    return out


def check_convergence(residuals: dict, increments: dict, controls: SolverControls):
    """True iff every block norm is at or below the tolerance.

    The comparison is ``<=``. The report names the worst block.
    """
    tol = controls.tolerance
    worst_name, worst_val = "", -np.inf
    for kind, norms in (("residual", residuals), ("increment", increments)):
        for name, val in norms.items():
            if val > worst_val:
                worst_name, worst_val = f"{kind} {name}", val
    ok = all(v <= tol for v in residuals.values()) and all(v <= tol for v in increments.values())
    return ok, {"worst_block": worst_name, "worst_value": float(max(worst_val, 0.0)), "tolerance": tol}


# ---------------------------------------------------------------------------
# Linear solve


def linear_solve(system: BlockSystem, controls: SolverControls) -> np.ndarray:
    """Solve ``J dx = -r`` after row and column equilibration."""
    J = system.jacobian.tocsr()
    rmax = np.asarray(abs(J).max(axis=1).todense()).ravel()
    if np.any(rmax == 0):
        raise LinearSolveFailure("Jacobian has an empty row")
    Dr = sps.diags(1.0 / rmax)
    Js = (Dr @ J).tocsc()
    cmax = np.asarray(abs(Js).max(axis=0).todense()).ravel()
    if np.any(cmax == 0):
        raise LinearSolveFailure("Jacobian has an empty column")
    Dc = sps.diags(1.0 / cmax)
    Js = (Js @ Dc).tocsc()
    rhs = -(Dr @ system.residual)
    try:
        if controls.linear_solver == "splu":
            y = spla.splu(Js).solve(rhs)
        else:
            y = spla.spsolve(Js, rhs)
    except RuntimeError as exc:
        raise LinearSolveFailure(str(exc)) from None
    dx = Dc @ y
    if not np.all(np.isfinite(dx)):
        raise LinearSolveFailure("non-finite solution of the linear system")
    return dx


# ---------------------------------------------------------------------------
# Newton


def _same(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def newton_solve_timestep(model: Model, prev: State, dt: float, controls: SolverControls):
    """Advance ``prev`` by ``dt``.

    Returns ``(state, iterations, regime_history)``. ``iterations`` counts the
    Newton updates applied before the iterate was accepted, so a linear problem
    reports one.
    """
    state = prev.copy()
    state.time = prev.time + dt
    scales = variable_scales(model, controls)
    history = []
    last = prev.regimes
    ind_before: dict = {}
    report: dict = {}
    for k in range(controls.max_iterations + 1):
        classified = classify(model, state, prev)
        ind = _contact_indicators(model, state, prev)
        regimes = guard_regimes(classified, last, ind, ind_before) if k > 0 else classified
        history.append(regimes)
        system = assemble_system(model, state, prev, dt, regimes)
        res = scaled_residual_norms(system, scales)
        dx = linear_solve(system, controls)
        inc = scaled_increment_norms(model.dofs, state.x, dx, scales)
        ok, report = check_convergence(res, inc, controls)
        stable = _same(regimes, last) and _same(regimes, classified)
        state.x = state.x + dx
        logger.debug("newton %d: %s = %.3e", k, report["worst_block"], report["worst_value"])
        if ok and stable:
            state.regimes = regimes
            state.div_u = value(Terms(model, state.x, state, prev, dt).div_u)
            state.report = report
            return state, k, history
        last, ind_before = regimes, ind
    raise NonConvergence(
        f"no convergence after {controls.max_iterations} iterations "
        f"({report.get('worst_block')} = {report.get('worst_value', np.nan):.3e})"
    )


# ---------------------------------------------------------------------------
# Time loop


def fracture_diagnostics(model: Model, state: State) -> list:
    """Per fracture id: Euclidean norms of the jump components over its cells
    and regime counts."""
    t = Terms(model, state.x, state, state, 1.0)
    acc: dict = {}
    for sd in model.grid.fractures:
        jn, jt = value(t.jump_n(sd)), value(t.jump_t(sd))
        reg = state.regimes.get(sd.key, np.zeros(sd.num_cells, dtype=int))
        e = acc.setdefault(sd.fracture_id, {"n2": 0.0, "t2": 0.0, "counts": np.zeros(3, dtype=int)})
        e["n2"] += float(jn @ jn)
        e["t2"] += float(jt @ jt)
        e["counts"] += np.bincount(reg, minlength=3)
    out = []
    for fid in sorted(acc):
        e = acc[fid]
        row = {"id": fid, "jump_n_norm": float(np.sqrt(e["n2"])), "jump_t_norm": float(np.sqrt(e["t2"]))}
        row.update({name: int(cnt) for name, cnt in zip(REGIME_NAMES, e["counts"])})
        out.append(row)
    return out


def _record(model, state, prev, step, dt, phase, iters, cuts) -> StepRecord:
    audit = conservation_audit(model, state, prev, dt)
    fr = fracture_diagnostics(model, state)
    counts = {name: int(sum(f[name] for f in fr)) for name in REGIME_NAMES}
    return StepRecord(
        step=step,
        time=float(state.time),
        dt=float(dt),
        phase=phase,
        iterations=int(iters),
        cuts=int(cuts),
        regime_counts=counts,
        fractures=fr,
        mass_imbalance=audit["mass"]["relative"],
        energy_imbalance=audit["energy"]["relative"],
        worst_block=getattr(state, "report", {}).get("worst_block", ""),
    )


def run_simulation(model: Model, phases: list, controls: SolverControls, initial: State | None = None, callback=None):
    """Run the phase schedule with implicit Euler steps.

    Each phase installs its boundary data and steps from its start to its end
    with step ``dt`` (the last step shortened if needed). A step that fails is
    retried with ``dt`` multiplied by ``cut_factor``, at most ``max_cuts``
    times. ``callback(record, state)`` is invoked after every accepted step.
    Returns ``(states, records)``; ``states[0]`` is the initial state.
    """
    if not phases:
        raise ValidationError("at least one phase is required", "phases")
    state = initial if initial is not None else model.initial_state()
    state = state.copy()
    state.time = phases[0].start
    states = [state]
    records: list[StepRecord] = []
    step = 0
    for ph in phases:
        model.set_boundary_conditions(ph.bc)
        t_end = ph.end
        eps = 1e-9 * max(abs(ph.end - ph.start), 1e-300)
        while state.time < t_end - eps:
            dt = min(ph.dt, t_end - state.time)
            cuts = 0
            while True:
                try:
                    new, iters, _ = newton_solve_timestep(model, state, dt, controls)
                    break
                except (NonConvergence, DegenerateBound, LinearSolveFailure) as exc:
                    if cuts >= controls.max_cuts:
                        raise NonConvergence(
                            f"step {step + 1} (t = {state.time:g}, phase {ph.name}): {exc}", step=step + 1
                        ) from None
                    cuts += 1
                    dt *= controls.cut_factor
                    logger.info("step %d: cutting dt to %g (%s)", step + 1, dt, exc)
            if abs(new.time - t_end) <= eps:
                new.time = t_end
            step += 1
            rec = _record(model, new, state, step, dt, ph.name, iters, cuts)
            records.append(rec)
            if callback is not None:
                callback(rec, new)
            states.append(new)
            state = new
    return states, records
