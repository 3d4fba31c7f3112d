import numpy as np
import pytest

from fracthm.contact import OPEN
from fracthm.errors import ShapeMismatch
from fracthm.fvm import MaterialParams, side_boundary_conditions
from fracthm.mdgrid import FractureNetwork, build_structured
from fracthm.physics import (
    Model,
    State,
    Terms,
    assemble_interface_laws,
    conservation_audit,
    update_geometry,
)
from fracthm.solver import SolverControls, TimePhase, assemble_system, classify, run_simulation

UNIT = (0.0, 0.0, 1.0, 1.0)
HORIZONTAL = [((0.25, 0.5), (0.75, 0.5))]
CROSS = [((0.25, 0.5), (0.75, 0.5)), ((0.5, 0.25), (0.5, 0.75))]


def model_for(segments, n=4, **params):
    grid = build_structured(UNIT, (n, n), FractureNetwork(segments, UNIT))
    return Model(grid, MaterialParams(**params))


def open_regimes(model):
    return {sd.key: np.full(sd.num_cells, OPEN) for sd in model.grid.fractures}


def set_opening(model, state, sd, opening):
    """Displace the plus side so that ``[[u]]_n = -opening`` on every cell of ``sd``."""
    intf = model.grid.fracture_interface(sd)
    u = state[intf.key, "u_j"].reshape(-1, 2)
    for k in range(intf.num_cells):
        if intf.side[k] == 1:
            u[k] = -opening * sd.normals[intf.secondary_cells[k]]
    state[intf.key, "u_j"] = u.ravel()


def test_state_holds_temperature_as_deviation():
    m = model_for(HORIZONTAL)
    st = m.initial_state(pressure=2.0, temperature=300.0)
    key = m.grid.matrix.key
    assert np.allclose(st[key, "T"], 300.0)
    assert np.allclose(st.x[m.dofs.slice(key, "T")], 300.0 - m.params.reference_temperature)
    st[key, "T"] = 250.0
    cp = st.copy()
    assert np.allclose(cp[key, "T"], 250.0) and cp.t_ref == st.t_ref


def test_state_rejects_wrong_length():
    m = model_for([])
    with pytest.raises(ShapeMismatch):
        State(m.dofs, np.zeros(m.dofs.num_dofs + 1))


def test_dof_layout_is_contiguous_and_complete():
    m = model_for(CROSS)
    ends = [(a, b) for _, _, a, b in m.dofs.blocks]
    assert ends[0][0] == 0 and ends[-1][1] == m.dofs.num_dofs
    assert all(b0 == a1 for (_, b0), (a1, _) in zip(ends, ends[1:]))
    assert any(v == "lam" for _, v, _, _ in m.dofs.blocks)
    assert len(set(m.dofs.names())) == len(m.dofs.blocks)


def test_zero_state_has_zero_residual():
    m = model_for(CROSS)
    st = m.initial_state()
    sys_ = assemble_system(m, st, st, 1.0, open_regimes(m))
    assert np.abs(sys_.residual).max() == 0.0


def test_uniform_pressure_with_matching_boundary_is_steady():
    m = model_for(HORIZONTAL)
    sides = ("left", "right", "bottom", "top")
    m.set_boundary_conditions(side_boundary_conditions(m.grid.matrix, flow={s: ("dirichlet", 5.0) for s in sides}))
    st = m.initial_state(pressure=5.0)
    sys_ = assemble_system(m, st, st, 1.0, open_regimes(m))
    for o, v, a, b in m.dofs.blocks:
        if v in ("p", "v"):
            assert np.abs(sys_.residual[a:b]).max() < 1e-12, (o, v)


def test_aperture_from_normal_jump():
    m = model_for(HORIZONTAL, initial_aperture=1e-4, residual_aperture=1e-6)
    st = m.initial_state()
    (sd,) = m.grid.fractures
    t = Terms(m, st.x, st, st, 1.0)
    assert np.allclose(t.aperture(sd), 1e-4)
    set_opening(m, st, sd, 1e-3)
    t = Terms(m, st.x, st, st, 1.0)
    assert np.allclose(t.jump_n(sd), -1e-3)
    assert np.allclose(t.aperture(sd), 1.1e-3)
    # closing beyond the initial aperture hits the floor
    set_opening(m, st, sd, -1.0)
    assert np.allclose(Terms(m, st.x, st, st, 1.0).aperture(sd), 1e-6)


def test_intersection_mean_and_product():
    m = model_for(CROSS, initial_aperture=1e-4, residual_aperture=1e-6)
    st = m.initial_state()
    target = {0: 2e-3, 1: 4e-3}
    for sd in m.grid.fractures:
        set_opening(m, st, sd, target[sd.fracture_id] - 1e-4)
    (pt,) = m.grid.intersections
    geo = update_geometry(m, st)
    assert geo[pt.key]["aperture"][0] == pytest.approx(3e-3)
    assert geo[pt.key]["specific_volume"][0] == pytest.approx(8e-6)
    sd = m.grid.fractures[0]
    a = target[sd.fracture_id]
    assert np.allclose(geo[sd.key]["permeability"], a**3 / (12 * m.params.viscosity))


def test_interface_law_direction_and_magnitude():
    m = model_for(HORIZONTAL)
    (sd,) = m.grid.fractures
    intf = m.grid.fracture_interface(sd)
    # kappa * area = 2 on every interface cell
    m.params.interface_permeability = 2.0 / intf.areas[0]
    sides = ("left", "right", "bottom", "top")
    m.set_boundary_conditions(side_boundary_conditions(m.grid.matrix, flow={s: ("dirichlet", 3.0) for s in sides}))
    st = m.initial_state(pressure=3.0)
    st[sd.key, "p"] = 1.0
    law = assemble_interface_laws(Terms(m, st.x, st, st, 1.0), intf)
    # at v = 0 the law reads 2 (p_l - tr p_h) = -4, so it is satisfied by v = 4 into the fracture
    assert np.allclose(law["v"], -4.0)
    # no fluid flux, no advective flux, whatever the temperatures
    st[sd.key, "T"] = 400.0
    assert np.allclose(assemble_interface_laws(Terms(m, st.x, st, st, 1.0), intf)["s"], 0.0)


def test_matched_pressures_give_zero_interface_flux_law():
    m = model_for(HORIZONTAL)
    sides = ("left", "right", "bottom", "top")
    m.set_boundary_conditions(side_boundary_conditions(m.grid.matrix, flow={s: ("dirichlet", 2.0) for s in sides}))
    st = m.initial_state(pressure=2.0)
    for intf in m.grid.interface_list():
        law = assemble_interface_laws(Terms(m, st.x, st, st, 1.0), intf)
        assert np.abs(law["v"]).max() < 1e-12


def test_jacobian_matches_finite_differences(rng):
    m = model_for(CROSS, permeability=1e-12, thermal_conductivity=1e3)
    m.set_boundary_conditions(
        side_boundary_conditions(
            m.grid.matrix,
            mechanics={"bottom": (("dirichlet", "dirichlet"), (0.0, 0.0)), "top": (("dirichlet", "dirichlet"), (1e-4, -2e-4))},
            flow={"left": ("dirichlet", 1e6)},
            heat={"left": ("dirichlet", 280.0)},
        )
    )
    prev = m.initial_state(pressure=1e5)
    st = prev.copy()
    scale = {"u": 1e-5, "u_j": 1e-5, "p": 1e5, "T": 1.0, "lam": 1e4, "v": 1e-6, "w": 1e-1, "s": 1e-1}
    for o, v, a, b in m.dofs.blocks:
        st.x[a:b] += scale[v] * rng.uniform(-1, 1, b - a)
    regimes = classify(m, st, prev)
    base = assemble_system(m, st, prev, 0.5, regimes)
    J = base.jacobian.toarray()
    skip = np.zeros(m.dofs.num_dofs, bool)
    for o, v, a, b in m.dofs.blocks:
        skip[a:b] = v == "lam"  # contact rows freeze their coefficients at the iterate
    worst = 0.0
    for o, v, a, b in m.dofs.blocks:
        for j in range(a, b, max(1, (b - a) // 3)):
            h = 1e-5 * scale[v]  # large enough to stay clear of round-off in the energy rows
            xp, xm = st.copy(), st.copy()
            xp.x[j] += h
            xm.x[j] -= h
            fd = (assemble_system(m, xp, prev, 0.5, regimes).residual - assemble_system(m, xm, prev, 0.5, regimes).residual) / (2 * h)
            ref = np.abs(J[:, j]).max() + 1e-300
            worst = max(worst, np.abs(fd - J[:, j])[~skip].max() / ref)
    assert worst < 1e-5


def test_coupled_steps_conserve_mass_and_energy():
    m = model_for(CROSS, permeability=1e-12, thermal_conductivity=50.0)
    bc = side_boundary_conditions(
        m.grid.matrix,
        mechanics={"bottom": (("dirichlet", "dirichlet"), (0.0, 0.0)), "top": (("dirichlet", "dirichlet"), (1e-4, -1e-3))},
        flow={"left": ("dirichlet", 1e7), "right": ("dirichlet", 0.0)},
        heat={"left": ("dirichlet", 300.0)},
    )
    phases = [TimePhase("a", 0.0, 3.0, 1.0, bc)]
    states, records = run_simulation(m, phases, SolverControls())
    assert len(records) == 3
    for prev, st, rec in zip(states, states[1:], records):
        audit = conservation_audit(m, st, prev, rec.dt)
        assert audit["mass"]["relative"] <= 1e-8
        assert audit["energy"]["relative"] <= 1e-8
        assert rec.mass_imbalance == audit["mass"]["relative"]
