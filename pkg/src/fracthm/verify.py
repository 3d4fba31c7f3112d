"""Built-in verification suites backed by closed-form or independent oracles.

Each suite returns a :class:`SuiteResult`; ``run_all`` runs them in order.
The scenario-driven suites read the bundled scenario files, so they check
exactly what ships.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np
from scipy.special import erfc

from . import contact
from .fvm import MaterialParams, ScalarBC, VectorBC, mpfa_discretize, mpsa_biot_discretize, side_boundary_conditions
from .io import load_scenario
from .mdgrid import EXTERNAL, build_from_triangles
from .physics import Model, Terms
from .solver import SolverControls, newton_solve_timestep, run_simulation


@dataclass
class SuiteResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    runtime: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name:<18} {self.value:.3e} (tol {self.tolerance:.1e}, {self.runtime:.1f} s) {self.detail}".rstrip()


def scenario_path(name: str):
    return resources.files("fracthm") / "scenarios" / f"{name}.toml"


# ---------------------------------------------------------------------------
# grids


def lattice(n: int, amplitude: float = 0.0, seed: int = 0, straight_x=None):
    """``n x n`` triangulated unit square with jittered interior nodes.

    Nodes on the vertical line ``x = straight_x`` only move along it, so a
    material interface there stays straight.
    """
    rng = np.random.default_rng(seed)
    h = 1.0 / n
    nodes = []
    for j in range(n + 1):
        for i in range(n + 1):
            x, y = i * h, j * h
            dx, dy = rng.uniform(-amplitude, amplitude, 2) * h
            if 0 < i < n and 0 < j < n:
                if straight_x is not None and abs(x - straight_x) < 1e-12:
                    dx = 0.0
                x, y = x + dx, y + dy
            nodes.append((x, y))
    idx = lambda i, j: j * (n + 1) + i
    tris = []
    for j in range(n):
        for i in range(n):
            tris += [[idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)], [idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]]
    return build_from_triangles(np.array(nodes), np.array(tris)).matrix


def equilateral_lattice(n: int):
    """Parallelogram of equilateral triangles: centroids coincide with
    circumcentres, so the grid is K-orthogonal for isotropic K."""
    nodes = np.array([[i + 0.5 * j, j * np.sqrt(3) / 2] for j in range(n + 1) for i in range(n + 1)])
    idx = lambda i, j: j * (n + 1) + i
    tris = []
    for j in range(n):
        for i in range(n):
            tris += [[idx(i, j), idx(i + 1, j), idx(i, j + 1)], [idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]]
    return build_from_triangles(nodes, np.array(tris)).matrix


# ---------------------------------------------------------------------------
# analytic oracles


def terzaghi_pressure(z, t, height, p0, cv, terms: int = 400):
    """Pressure in a column drained at ``z = height`` and sealed at ``z = 0``."""
    zeta = (height - np.asarray(z, dtype=float)) / height
    out = np.zeros_like(zeta)
    for k in range(terms):
        M = (2 * k + 1) * np.pi / 2
        out += 2.0 / M * np.sin(M * zeta) * np.exp(-M * M * cv * t / height**2)
    return p0 * out


def terzaghi_constants(par: MaterialParams, load: float):
    """Initial undrained pressure and consolidation coefficient."""
    Mv = par.lame_lambda + 2 * par.shear_modulus
    S = par.storativity
    p0 = par.biot_alpha * load / (par.biot_alpha**2 + S * Mv)
    cv = par.fluid_mobility / (S + par.biot_alpha**2 / Mv)
    return p0, cv


def halfspace_temperature(x, t, T_init, T_surface, diffusivity):
    return T_surface + (T_init - T_surface) * (1.0 - erfc(np.asarray(x) / (2.0 * np.sqrt(diffusivity * t))))


def two_point_transmissibilities(g, K):
    """Independent two-point flux matrices ``(flux, bound_flux)`` for all-Dirichlet data."""
    fc = g.face_cells()
    F = np.zeros((g.num_faces, g.num_cells))
    B = np.zeros((g.num_faces, g.num_faces))
    for f in range(g.num_faces):
        c1, c2 = fc[f]
        area = np.linalg.norm(g.face_normals[f])
        t1 = K[c1] * area / np.linalg.norm(g.face_centers[f] - g.cell_centers[c1])
        if c2 >= 0:
            t2 = K[c2] * area / np.linalg.norm(g.face_centers[f] - g.cell_centers[c2])
            T = t1 * t2 / (t1 + t2)
            F[f, c1], F[f, c2] = T, -T
        else:
            F[f, c1], B[f, f] = t1, -t1
    return F, B


# ---------------------------------------------------------------------------
# discretisation suites


def suite_mpfa_patch(n: int = 16, amplitude: float = 0.3, tol: float = 1e-10) -> SuiteResult:
    t0 = time.perf_counter()
    g = lattice(n, amplitude, seed=3, straight_x=0.5)
    K1, K2 = 1.0, 10.0
    K = np.where(g.cell_centers[:, 0] < 0.5, K1, K2)
    a, b = 2.0, -3.0
    left = lambda x: x[:, 0] <= 0.5
    p = lambda x: np.where(left(x), a * x[:, 0] + b * x[:, 1], 0.5 * a + a * K1 / K2 * (x[:, 0] - 0.5) + b * x[:, 1])
    bc = ScalarBC(g.face_kind == EXTERNAL, np.zeros(g.num_faces))
    d = mpfa_discretize(g, K, bc)
    q = d.flux @ p(g.cell_centers) + d.bound_flux @ (p(g.face_centers) * bc.dirichlet)
    c1 = g.face_cells()[:, 0]
    grad = np.where(left(g.cell_centers[c1])[:, None], [a, b], [a * K1 / K2, b])
    exact = -K[c1] * np.sum(grad * g.face_normals, axis=1)
    err = float(np.abs(q - exact).max() / np.abs(exact).max())
    rt = time.perf_counter() - t0
    return SuiteResult("mpfa_patch", err <= tol and rt < 5.0, err, tol, rt)


def suite_mpsa_patch(n: int = 16, amplitude: float = 0.3, tol: float = 1e-9, rigid_tol: float = 1e-10) -> SuiteResult:
    t0 = time.perf_counter()
    g = lattice(n, amplitude, seed=5)
    par = MaterialParams(shear_modulus=16e9, lame_lambda=10e9, friction_coefficient=0.5)
    bc = VectorBC(np.tile((g.face_kind == EXTERNAL)[:, None], (1, 2)), np.zeros((g.num_faces, 2)))
    d = mpsa_biot_discretize(g, par, bc)

    def traction(ufun):
        b = np.where(bc.dirichlet, ufun(g.face_centers), 0.0)
        return (d.stress @ ufun(g.cell_centers).ravel() + d.bound_stress @ b.ravel()).reshape(-1, 2)

    G = np.array([[0.3, -0.7], [0.2, 0.5]]) * 1e-3
    sig = par.shear_modulus * (G + G.T) + par.lame_lambda * np.trace(G) * np.eye(2)
    exact = g.face_normals @ sig.T
    err = float(np.abs(traction(lambda x: x @ G.T + [1e-3, 2e-3]) - exact).max() / np.abs(exact).max())
    # rigid modes, relative to the traction of a unit-size strain on the largest face
    scale = par.shear_modulus * 1e-3 * float(np.abs(g.face_areas).max())
    W = np.array([[0.0, -1e-3], [1e-3, 0.0]])
    modes = (lambda x: x @ W.T, lambda x: 0 * x + [1e-3, 0.0], lambda x: 0 * x + [0.0, 1e-3])
    rigid = max(float(np.abs(traction(f)).max()) for f in modes) / scale
    rt = time.perf_counter() - t0
    ok = err <= tol and rigid <= rigid_tol and rt < 5.0
    return SuiteResult("mpsa_patch", ok, err, tol, rt, f"rigid {rigid:.1e} (tol {rigid_tol:.0e})")


def suite_two_point(n: int = 8, tol: float = 1e-10) -> SuiteResult:
    t0 = time.perf_counter()
    g = equilateral_lattice(n)
    K = np.random.default_rng(0).uniform(0.5, 5.0, g.num_cells)
    d = mpfa_discretize(g, K, ScalarBC(g.face_kind == EXTERNAL, np.zeros(g.num_faces)))
    F, B = two_point_transmissibilities(g, K)
    ref = np.abs(F).max()
    err = max(np.abs(d.flux.toarray() - F).max(), np.abs(d.bound_flux.toarray() - B).max()) / ref
    return SuiteResult("two_point", err <= tol, float(err), tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# scenario suites


def _phase_bc(grid, ph):
    return side_boundary_conditions(grid.matrix, mechanics=ph.mechanics, flow=ph.flow, heat=ph.heat)


def setup_scenario(sc, base_dir=None):
    """``(model, phases, controls, initial_state)`` for a parsed scenario."""
    from .app import build_grid, build_phases

    grid = build_grid(sc, base_dir)
    model = Model(grid, sc.materials, contact_c=sc.contact_c, **_eta_kw(sc))
    initial = model.initial_state(sc.initial.pressure, sc.initial.temperature)
    return model, build_phases(sc, grid), sc.solver, initial


def _eta_kw(sc):
    return {k: v for k, v in (("mpfa_eta", sc.mpfa_eta), ("mpsa_eta", sc.mpsa_eta)) if v is not None}


def suite_terzaghi(tol: float = 0.02) -> SuiteResult:
    t0 = time.perf_counter()
    sc = load_scenario(scenario_path("terzaghi"))
    model, phases, controls, init = setup_scenario(sc)
    load = -phases[0].bc.mechanics.values[model.grid.matrix.external_faces("top"), 1].sum() / float(
        model.grid.matrix.face_areas[model.grid.matrix.external_faces("top")].sum()
    )
    height = sc.geometry.domain[3] - sc.geometry.domain[1]
    p0, cv = terzaghi_constants(sc.materials, load)
    states, records = run_simulation(model, phases, controls, init)
    g = model.grid.matrix
    z = g.cell_centers[:, 1] - sc.geometry.domain[1]
    errs = []
    for ph in sc.phases:
        st = next(s for s in states if abs(s.time - ph.end) <= 1e-9 * ph.end)
        exact = terzaghi_pressure(z, ph.end, height, p0, cv)
        errs.append(float(np.linalg.norm(st[g.key, "p"] - exact) / np.linalg.norm(exact)))
    rt = time.perf_counter() - t0
    tds = ", ".join(f"{cv * ph.end / height**2:.3f}" for ph in sc.phases)
    return SuiteResult("terzaghi", max(errs) <= tol and rt < 60.0, max(errs), tol, rt, f"t_D = {tds}")


# relative temperature change at the far end below which the strip still
# behaves as a half-space
FAR_END_LIMIT = 1e-4


def suite_conduction(tol: float = 0.02) -> SuiteResult:
    t0 = time.perf_counter()
    sc = load_scenario(scenario_path("conduction"))
    model, phases, controls, init = setup_scenario(sc)
    par = sc.materials
    g = model.grid.matrix
    left = g.external_faces("left")
    T_surf = float(phases[0].bc.heat.values[left][0])
    T_init = init[g.key, "T"][0]
    kappa = par.thermal_conductivity / par.volumetric_heat_capacity
    states, _ = run_simulation(model, phases, controls, init)
    x = g.cell_centers[:, 0] - sc.geometry.domain[0]
    length = sc.geometry.domain[2] - sc.geometry.domain[0]
    errs, reach = [], 0.0
    for ph in sc.phases:
        st = next(s for s in states if abs(s.time - ph.end) <= 1e-9 * ph.end)
        exact = halfspace_temperature(x, ph.end, T_init, T_surf, kappa)
        errs.append(float(np.linalg.norm(st[g.key, "T"] - exact) / np.linalg.norm(exact - T_init)))
        reach = max(reach, abs(float(halfspace_temperature(length, ph.end, T_init, T_surf, kappa)) - T_init) / abs(T_surf - T_init))
    rt = time.perf_counter() - t0
    # the comparison only means something while the far end is still undisturbed
    ok = max(errs) <= tol and reach < FAR_END_LIMIT
    return SuiteResult("conduction", ok, max(errs), tol, rt, f"far-end change {reach:.1e}")


def single_fracture_solve(sc, shear: float | None = None, c_factor: float = 1.0, controls=None):
    """One quasi-static step of the single-fracture scenario.

    ``shear`` replaces the tangential top displacement. Returns
    ``(model, state, prev, iterations, regime_history)``.
    """
    from .app import build_grid

    grid = build_grid(sc)
    ph = sc.phases[0]
    if shear is not None:
        kinds, vals = ph.mechanics["top"]
        ph = replace(ph, mechanics={**ph.mechanics, "top": (kinds, (shear, vals[1]))})
    c = c_factor * sc.materials.shear_modulus / grid.characteristic_size
    model = Model(grid, sc.materials, contact_c=c, **_eta_kw(sc))
    model.set_boundary_conditions(_phase_bc(grid, ph))
    prev = model.initial_state(sc.initial.pressure, sc.initial.temperature)
    prev.time = ph.start
    state, iters, hist = newton_solve_timestep(model, prev, ph.end - ph.start, controls or sc.solver)
    return model, state, prev, iters, hist


def _contact_states(model, state, prev):
    t = Terms(model, state.x, state, prev, 1.0)
    return [contact.local_state(t, sd, model.contact_c) for sd in model.grid.fractures]


def kkt_sweep(sc, loads):
    """Converged contact states and KKT reports over a sweep of shear loads."""
    top = sc.phases[0].mechanics["top"][1]
    out = []
    for s in loads:
        model, state, prev, _, _ = single_fracture_solve(sc, shear=s)
        disp = float(np.hypot(s, top[1]))
        cs = _contact_states(model, state, prev)
        F = sc.materials.friction_coefficient
        reports = [contact.kkt_report(c, F, sc.materials.shear_modulus * disp, disp) for c in cs]
        out.append((s, cs, {k: max(r[k] for r in reports) for k in reports[0]}))
    return out


def predicted_slip_load(loads, states, F):
    """Critical shear load from the first two (linear, all-stick) states.

    Contact tractions are affine in the load while every cell sticks, so
    each cell's critical load solves ``|lam_t(s)| = -F lam_n(s)`` on the
    straight line through the two samples.
    """
    (s0, a), (s1, b) = (loads[0], states[0]), (loads[1], states[1])
    best = np.inf
    for ca, cb in zip(a, b):
        dn, dt = (cb.lam_n - ca.lam_n) / (s1 - s0), (cb.lam_t - ca.lam_t) / (s1 - s0)
        for sign in (1.0, -1.0):
            # sign * (lt0 + dt x) = -F (ln0 + dn x), x = s - s0
            den = sign * dt + F * dn
            with np.errstate(divide="ignore", invalid="ignore"):
                x = -(sign * ca.lam_t + F * ca.lam_n) / den
            x = x[np.isfinite(x) & (x > 0)]
            if x.size:
                best = min(best, s0 + float(x.min()))
    return best


def suite_kkt(tol: float = 1e-8, num: int = 10) -> SuiteResult:
    t0 = time.perf_counter()
    sc = load_scenario(scenario_path("single_fracture"))
    smax = sc.phases[0].mechanics["top"][1][0]
    loads = list(np.linspace(smax / num, smax, num))
    sweep = kkt_sweep(sc, loads)
    worst = max(max(r.values()) for _, _, r in sweep)
    sliding = [bool(any(np.any(c.regime == contact.SLIDE) for c in cs)) for _, cs, _ in sweep]
    detail = ""
    bracket = False
    if any(sliding) and not sliding[0] and not sliding[1]:
        k = sliding.index(True)
        s_star = predicted_slip_load(loads, [cs for _, cs, _ in sweep], sc.materials.friction_coefficient)
        bracket = loads[k - 1] < s_star <= loads[k]
        detail = f"slip predicted at {s_star:.4e}, observed in ({loads[k - 1]:.4e}, {loads[k]:.4e}]"
    else:
        detail = "sweep does not bracket a stick-slide transition"
    return SuiteResult("kkt", worst <= tol and bracket, worst, tol, time.perf_counter() - t0, detail)


def coulomb_states(n: int, seed: int = 0):
    """Random local states on the Coulomb cone with slip opposing the traction."""
    rng = np.random.default_rng(seed)
    F = rng.uniform(0.1, 1.0, n)
    c = 10.0 ** rng.uniform(-2, 2, n)
    lam_n = -(10.0 ** rng.uniform(-1, 2, n))
    direction = rng.choice([-1.0, 1.0], n)
    lam_t = direction * (-F * lam_n)
    dut = -direction * 10.0 ** rng.uniform(-3, 1, n)
    jump_n = np.zeros(n)
    return F, c, lam_n, lam_t, jump_n, dut


def slide_row_residual(F, c, lam_n, lam_t, jump_n, dut) -> float:
    it = contact.ContactCellState(lam_n, lam_t, jump_n, np.zeros_like(dut), dut, np.full(1, contact.SLIDE), None)
    lam = np.column_stack([lam_n, lam_t]).ravel()
    r = contact.assemble_contact_equations([contact.SLIDE], lam, jump_n, dut, it, F, c)
    return float(np.abs(r).max() / max(abs(lam_n).max(), 1e-300))


def suite_slide_fixed_point(n: int = 100, tol: float = 1e-12) -> SuiteResult:
    t0 = time.perf_counter()
    worst = 0.0
    for i, row in enumerate(zip(*coulomb_states(n))):
        F, c, *vals = row
        worst = max(worst, slide_row_residual(F, c, *(np.array([v]) for v in vals)))
    return SuiteResult("slide_fixed_point", worst <= tol, worst, tol, time.perf_counter() - t0, f"{n} states")


def partition_ok(history, model) -> bool:
    for regimes in history:
        for sd in model.grid.fractures:
            r = np.asarray(regimes[sd.key])
            if r.shape != (sd.num_cells,) or not np.all(np.isin(r, (contact.OPEN, contact.STICK, contact.SLIDE))):
                return False
    return True


def state_difference(a, b) -> float:
    """Largest block-relative difference between two states."""
    worst = 0.0
    for _, _, i, j in a.dofs.blocks:
        den = float(np.abs(a.x[i:j]).max(initial=0.0))
        if den > 0:
            worst = max(worst, float(np.abs(a.x[i:j] - b.x[i:j]).max()) / den)
    return worst


def suite_c_invariance() -> SuiteResult:
    t0 = time.perf_counter()
    sc = load_scenario(scenario_path("single_fracture"))
    tol = sc.solver.tolerance
    m1, s1, _, _, h1 = single_fracture_solve(sc, c_factor=1.0)
    m2, s2, _, _, h2 = single_fracture_solve(sc, c_factor=10.0)
    diff = state_difference(s1, s2)
    part = partition_ok(h1, m1) and partition_ok(h2, m2)
    same = all(np.array_equal(s1.regimes[k], s2.regimes[k]) for k in s1.regimes)
    ok = diff <= tol and part and same
    return SuiteResult("c_invariance", ok, diff, tol, time.perf_counter() - t0, f"partition {part}, regimes equal {same}")


SUITES = {
    "mpfa_patch": suite_mpfa_patch,
    "mpsa_patch": suite_mpsa_patch,
    "two_point": suite_two_point,
    "terzaghi": suite_terzaghi,
    "conduction": suite_conduction,
    "kkt": suite_kkt,
    "slide_fixed_point": suite_slide_fixed_point,
    "c_invariance": suite_c_invariance,
}


def run_all(names=None, echo=None) -> list:
    out = []
    for name in names or SUITES:
        res = SUITES[name]()
        if echo is not None:
            echo(res.line())
        out.append(res)
    return out
