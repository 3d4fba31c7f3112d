"""Residuals of the coupled balance laws on a mixed-dimensional grid.

All residuals are written once, in terms of the global unknown vector. Passing
an :class:`~fracthm.ad.AdArray` produces the Jacobian alongside, passing a
plain array evaluates values only (used for audits and geometry updates).

Sign conventions
----------------
* Interface fluxes ``v, w, s`` are positive from the higher- into the
  lower-dimensional subdomain.
* The reference normal ``n`` of a fracture cell points out of the plus-side
  matrix cells, so an opening fracture has a negative normal jump
  ``[[u]]_n = n . (u_j+ - u_j-)``.
* Advection transports ``T - T0`` in conservative form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sps

from . import ad
from .ad import AdArray, value
from .errors import NonFiniteResidual, ShapeMismatch
from .fvm import (
    MPFA_ETA,
    MPSA_ETA,
    BoundaryConditionSet,
    MaterialParams,
    divergence,
    mpfa_discretize,
    mpsa_biot_discretize,
    tpfa_half_transmissibilities,
    upwind_discretize,
)
from .mdgrid import EXTERNAL, FRACTURE, INTERIOR, INTERSECTION, MixedDimGrid

SUBDOMAIN_VARIABLES = {
    2: (("u", 2), ("p", 1), ("T", 1)),
    1: (("p", 1), ("T", 1), ("lam", 2)),
    0: (("p", 1), ("T", 1)),
}
INTERFACE_VARIABLES = {
    1: (("u_j", 2), ("v", 1), ("w", 1), ("s", 1)),
    0: (("v", 1), ("w", 1), ("s", 1)),
}


# ---------------------------------------------------------------------------
# Degrees of freedom and state


class DofManager:
    """Contiguous block layout: subdomains in grid order, then interfaces.

    Equations use the same layout, each equation block paired with the
    variable block it is solved for.
    """

    def __init__(self, grid: MixedDimGrid):
        self.blocks: list[tuple] = []
        off = 0
        for sd in grid.subdomain_list():
            for var, k in SUBDOMAIN_VARIABLES[sd.dim]:
                n = k * sd.num_cells
                self.blocks.append((sd.key, var, off, off + n))
                off += n
        for intf in grid.interface_list():
            for var, k in INTERFACE_VARIABLES[intf.dim]:
                n = k * intf.num_cells
                self.blocks.append((intf.key, var, off, off + n))
                off += n
        self.num_dofs = off
        self._index = {(o, v): slice(a, b) for o, v, a, b in self.blocks}

    def slice(self, owner, var) -> slice:
        return self._index[(owner, var)]

    def has(self, owner, var) -> bool:
        return (owner, var) in self._index

    @staticmethod
    def block_name(owner, var) -> str:
        if isinstance(owner[0], tuple):
            (dh, ih), (dl, il) = owner
            return f"intf_{dh}_{ih}_{dl}_{il}:{var}"
        return f"sd_{owner[0]}_{owner[1]}:{var}"

    def names(self) -> list[str]:
        return [self.block_name(o, v) for o, v, _, _ in self.blocks]


@dataclass
class State:
    """All primary unknowns at one time level.

    ``div_u`` caches the matrix cell-integrated discrete divergence of
    displacement at this time level; it depends on the boundary data in force
    when the state was computed, so it is stored rather than recomputed.

    Temperatures are held in ``x`` as deviations from ``t_ref`` so that
    near-uniform fields keep full precision; indexing with ``"T"`` returns
    and accepts absolute values.
    """

    dofs: DofManager
    x: np.ndarray
    time: float = 0.0
    div_u: np.ndarray | None = None
    regimes: dict = field(default_factory=dict)
    t_ref: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.shape != (self.dofs.num_dofs,):
            raise ShapeMismatch(f"state vector has {self.x.size} entries, expected {self.dofs.num_dofs}")

    def __getitem__(self, key) -> np.ndarray:
        owner, var = key
        if var == "T":
            return self.x[self.dofs.slice(owner, var)] + self.t_ref
        return self.x[self.dofs.slice(owner, var)]

    def __setitem__(self, key, val) -> None:
        owner, var = key
        self.x[self.dofs.slice(owner, var)] = np.asarray(val) - self.t_ref if var == "T" else val

    def copy(self) -> State:
        return State(
            self.dofs,
            self.x.copy(),
            self.time,
            None if self.div_u is None else self.div_u.copy(),
            {k: v.copy() for k, v in self.regimes.items()},
            self.t_ref,
        )


# ---------------------------------------------------------------------------
# Model: grid, parameters, boundary data and cached discretisations


# numerical contact constant in units of shear modulus / cell size
CONTACT_C_FACTOR = 1.0


class Model:
    """Owns the discretisation cache for one grid and parameter set."""

    def __init__(
        self,
        grid: MixedDimGrid,
        params: MaterialParams,
        contact_c: float | None = None,
        mpfa_eta: float = MPFA_ETA,
        mpsa_eta: float = MPSA_ETA,
    ):
        self.grid = grid
        self.params = params
        self.dofs = DofManager(grid)
        h = grid.characteristic_size
        self.contact_c = float(contact_c) if contact_c is not None else CONTACT_C_FACTOR * params.shear_modulus / h
        self.mpfa_eta = mpfa_eta
        self.mpsa_eta = mpsa_eta
        self._cache: dict = {}
        self.set_boundary_conditions(BoundaryConditionSet.default(grid.matrix))
        self._fracture_setup()

    # -- boundary conditions -------------------------------------------------

    def set_boundary_conditions(self, bc: BoundaryConditionSet) -> None:
        """Install external boundary data; fracture faces are overridden."""
        g = self.grid.matrix
        bc = bc.copy()
        bc.validate(g)
        frac = g.face_kind == FRACTURE
        bc.mechanics.dirichlet[frac] = True
        bc.mechanics.values[frac] = 0.0
        for sc in (bc.flow, bc.heat):
            sc.dirichlet[frac] = False
            sc.values[frac] = 0.0
        for arr in (bc.mechanics.values, bc.flow.values, bc.heat.values):
            arr[g.face_kind == INTERIOR] = 0.0
        self.bc = bc

    # -- cached discretisations ----------------------------------------------

    def mechanics(self):
        key = ("mech", self.bc.mechanics.dirichlet.tobytes())
        if key not in self._cache:
            self._cache[key] = mpsa_biot_discretize(
                self.grid.matrix, self.params, self.bc.mechanics, eta=self.mpsa_eta
            )
        return self._cache[key]

    def flow(self):
        key = ("flow", self.bc.flow.dirichlet.tobytes())
        if key not in self._cache:
            self._cache[key] = mpfa_discretize(
                self.grid.matrix, self.params.fluid_mobility, self.bc.flow, eta=self.mpfa_eta
            )
        return self._cache[key]

    def heat(self):
        key = ("heat", self.bc.heat.dirichlet.tobytes())
        if key not in self._cache:
            self._cache[key] = mpfa_discretize(
                self.grid.matrix, self.params.thermal_conductivity, self.bc.heat, eta=self.mpfa_eta
            )
        return self._cache[key]

    # -- fracture geometry -----------------------------------------------------

    def _fracture_setup(self) -> None:
        """Static maps from interface displacements to local jumps and from
        fracture tractions to matrix face tractions."""
        self.jump_maps = {}
        self.tpfa_geo = {}
        for sd in self.grid.fractures:
            intf = self.grid.fracture_interface(sd)
            nfc, nic = sd.num_cells, intf.num_cells
            n, t = sd.normals, sd.tangents
            maps = []
            for basis in (n, t):
                rows, cols, vals = [], [], []
                for k in range(nic):
                    c = intf.secondary_cells[k]
                    s = intf.side[k]
                    for d in range(2):
                        rows.append(c)
                        cols.append(2 * k + d)
                        vals.append(s * basis[c, d])
                maps.append(sps.csr_matrix((vals, (rows, cols)), shape=(nfc, 2 * nic)))
            # [[u]] in the global frame, interleaved per fracture cell
            rows, cols, vals = [], [], []
            for k in range(nic):
                c, s = intf.secondary_cells[k], intf.side[k]
                for d in range(2):
                    rows.append(2 * c + d)
                    cols.append(2 * k + d)
                    vals.append(float(s))
            glob = sps.csr_matrix((vals, (rows, cols)), shape=(2 * nfc, 2 * nic))
            self.jump_maps[sd.key] = (maps[0], maps[1], glob)
            f, c, sgn, geo = tpfa_half_transmissibilities(sd, None)
            self.tpfa_geo[sd.key] = (f, c, sgn, geo)

    def initial_state(self, pressure: float = 0.0, temperature: float | None = None) -> State:
        """Homogeneous state with zero displacement and tractions."""
        T = self.params.reference_temperature if temperature is None else temperature
        st = State(self.dofs, np.zeros(self.dofs.num_dofs), t_ref=self.params.reference_temperature)
        for sd in self.grid.subdomain_list():
            st[sd.key, "p"] = pressure
            st[sd.key, "T"] = T
        st.div_u = value(Terms(self, st.x, st, st, 1.0).div_u)
        st.regimes = {sd.key: np.zeros(sd.num_cells, dtype=int) for sd in self.grid.fractures}
        return st


# ---------------------------------------------------------------------------
# Shared term evaluation


def _harmonic(t1, t2):
    return t1 * t2 / (t1 + t2)


class Terms:
    """Lazily evaluated building blocks of all residuals for one iterate.

    ``x`` is either the plain state vector or an AdArray with identity
    Jacobian. ``prev`` is the converged state of the previous time level.
    """

    def __init__(self, model: Model, x, state: State, prev: State, dt: float):
        self.m = model
        self.g = model.grid
        self.par = model.params
        self.x = x
        self.state = state
        self.prev = prev
        self.dt = float(dt)
        self.num_dofs = model.dofs.num_dofs
        self.is_ad = isinstance(x, AdArray)
        self._vars: dict = {}

    def var(self, owner, var):
        """Unknown block at the iterate; temperatures relative to the reference."""
        key = (owner, var)
        if key not in self._vars:
            self._vars[key] = self.x[self.m.dofs.slice(owner, var)]
        return self._vars[key]

    def pvar(self, owner, var) -> np.ndarray:
        return self.prev.x[self.m.dofs.slice(owner, var)]

    def zeros(self, n):
        return ad.as_ad(np.zeros(n), self.num_dofs) if self.is_ad else np.zeros(n)

    def _cat(self, parts):
        if self.is_ad:
            return ad.concatenate(parts, self.num_dofs)
        return np.concatenate([np.atleast_1d(value(p)) for p in parts]) if parts else np.zeros(0)

    # -- matrix ------------------------------------------------------------------

    @property
    def key_h(self):
        return self.g.matrix.key

    @cached_property
    def pi(self):
        par = self.par
        p, T = self.var(self.key_h, "p"), self.var(self.key_h, "T")
        return par.biot_alpha * p + par.thermal_stress_coefficient * T

    def _lifted_interface(self, var, width):
        """Sum of interface variables mapped onto matrix faces."""
        g = self.g.matrix
        out = None
        for intf in self.g.interface_list(1):
            proj = intf.mortar_to_primary
            if width == 2:
                proj = sps.kron(proj, sps.eye(2)).tocsr()
            term = ad.matmul(proj, self.var(intf.key, var))
            out = term if out is None else out + term
        return self.zeros(width * g.num_faces) if out is None else out

    @cached_property
    def mech_bc(self):
        return self.m.bc.mechanics.values.ravel() + self._lifted_interface("u_j", 2)

    @cached_property
    def flow_bc(self):
        return self.m.bc.flow.values + self._lifted_interface("v", 1)

    @cached_property
    def heat_bc(self):
        bc = self.m.bc.heat
        shift = np.where(bc.dirichlet, self.par.reference_temperature, 0.0)
        return (bc.values - shift) + self._lifted_interface("w", 1)

    @cached_property
    def face_traction(self):
        mech = self.m.mechanics()
        u = self.var(self.key_h, "u")
        return ad.matmul(mech.stress, u) + ad.matmul(mech.bound_stress, self.mech_bc) + ad.matmul(mech.grad_p, self.pi)

    @cached_property
    def div_u(self):
        mech = self.m.mechanics()
        u = self.var(self.key_h, "u")
        return (
            ad.matmul(mech.div_u, u)
            + ad.matmul(mech.bound_div_u, self.mech_bc)
            + ad.matmul(mech.stabilization, self.pi)
        )

    @cached_property
    def darcy_flux(self):
        fl = self.m.flow()
        return ad.matmul(fl.flux, self.var(self.key_h, "p")) + ad.matmul(fl.bound_flux, self.flow_bc)

    @cached_property
    def conductive_flux(self):
        ht = self.m.heat()
        return ad.matmul(ht.flux, self.var(self.key_h, "T")) + ad.matmul(ht.bound_flux, self.heat_bc)

    @cached_property
    def pressure_trace(self):
        fl = self.m.flow()
        return ad.matmul(fl.bound_pressure_cell, self.var(self.key_h, "p")) + ad.matmul(
            fl.bound_pressure_face, self.flow_bc
        )

    @cached_property
    def temperature_trace(self):
        ht = self.m.heat()
        return ad.matmul(ht.bound_pressure_cell, self.var(self.key_h, "T")) + ad.matmul(
            ht.bound_pressure_face, self.heat_bc
        )

    @cached_property
    def advective_flux(self):
        g = self.g.matrix
        par = self.par
        q = self.darcy_flux
        bc = self.m.bc.heat
        up = upwind_discretize(
            g,
            value(q),
            inflow_dirichlet=bc.dirichlet & (g.face_kind == EXTERNAL),
            exclude=g.face_kind == FRACTURE,
        )
        T0 = par.reference_temperature
        dT = self.var(self.key_h, "T")
        upstream = ad.matmul(up.cell, dT) + up.bound @ (bc.values - T0)
        return par.fluid_volumetric_heat_capacity * (q * upstream) + self._lifted_interface("s", 1)

    # -- fractures ---------------------------------------------------------------

    def _u_j(self, sd):
        return self.var(self.g.fracture_interface(sd).key, "u_j")

    def jump_n(self, sd):
        return ad.matmul(self.m.jump_maps[sd.key][0], self._u_j(sd))

    def jump_t(self, sd):
        return ad.matmul(self.m.jump_maps[sd.key][1], self._u_j(sd))

    def prev_jump_t(self, sd) -> np.ndarray:
        u = self.prev[self.g.fracture_interface(sd).key, "u_j"]
        return self.m.jump_maps[sd.key][1] @ u

    def aperture(self, sd):
        """Fracture aperture for 1D subdomains, adjacency rule for 0D."""
        return self._geometry(sd)[0]

    def specific_volume(self, sd):
        return self._geometry(sd)[1]

    @cached_property
    def _geom_cache(self) -> dict:
        return {}

    def _geometry(self, sd):
        if sd.key in self._geom_cache:
            return self._geom_cache[sd.key]
        par = self.par
        if sd.dim == 1:
            a = ad.maximum(par.initial_aperture - self.jump_n(sd), par.residual_aperture)
            out = (a, a)
        elif sd.dim == 0:
            by_fid: dict[int, list] = {}
            for intf in self.g.interfaces_of_lower(sd):
                fsd = self.g.subdomains[intf.key[0]]
                fc = fsd.face_cells()[intf.primary_faces, 0]
                a_f = self.aperture(fsd)[fc]
                by_fid.setdefault(fsd.fracture_id, []).append(a_f)
            total, count, V = None, 0, None
            for fid in sorted(by_fid):
                parts = by_fid[fid]
                s = None
                n = 0
                for a_f in parts:
                    sub = _sum(a_f)
                    s = sub if s is None else s + sub
                    n += np.size(value(a_f))
                mean_f = s * (1.0 / n)
                V = mean_f if V is None else V * mean_f
                total = s if total is None else total + s
                count += n
            out = (total * (1.0 / count), V)
        else:
            raise ValueError("geometry is defined for fractures and intersections only")
        self._geom_cache[sd.key] = out
        return out

    def prev_geometry(self, sd):
        t = Terms(self.m, self.prev.x, self.prev, self.prev, self.dt)
        return value(t.aperture(sd)), value(t.specific_volume(sd))

    def _tpfa_1d(self, sd, cond_cell):
        """Interior face transmissibilities of a 1D grid from an AD cell field."""
        f, c, _, geo = self.m.tpfa_geo[sd.key]
        nf = sd.num_faces
        fc = sd.face_cells()
        interior = np.flatnonzero(sd.face_kind == INTERIOR)
        geo_map = {(ff, cc): gg for ff, cc, gg in zip(f, c, geo)}
        c1, c2 = fc[interior, 0], fc[interior, 1]
        g1 = np.array([geo_map[(ff, cc)] for ff, cc in zip(interior, c1)])
        g2 = np.array([geo_map[(ff, cc)] for ff, cc in zip(interior, c2)])
        t1 = cond_cell[c1] * g1 if interior.size else None
        t2 = cond_cell[c2] * g2 if interior.size else None
        return interior, c1, c2, (_harmonic(t1, t2) if interior.size else None)

    def half_transmissibility(self, sd, cond_cell, faces):
        f, c, _, geo = self.m.tpfa_geo[sd.key]
        geo_map = {(ff, cc): gg for ff, cc, gg in zip(f, c, geo)}
        cells = sd.face_cells()[faces, 0]
        g = np.array([geo_map[(ff, cc)] for ff, cc in zip(faces, cells)])
        return cond_cell[cells] * g, cells

    def fracture_permeability(self, sd):
        """Tangential transmissibility per cell: cubic law over viscosity."""
        a = self.aperture(sd)
        return a**3 * (1.0 / (12.0 * self.par.viscosity))

    def fracture_conductivity(self, sd):
        return self.aperture(sd) * self.par.fracture_conductivity

    def _faces_from_interior(self, sd, interior, vals):
        if interior.size == 0:
            return self.zeros(sd.num_faces)
        E = sps.csr_matrix((np.ones(interior.size), (interior, np.arange(interior.size))), shape=(sd.num_faces, interior.size))
        return ad.matmul(E, vals)

    def _lower_interface_sum(self, sd, var):
        """Interface variable of 1D-0D interfaces mapped onto the 1D faces."""
        out = None
        for intf in self.g.interfaces_of_higher(sd):
            term = ad.matmul(intf.mortar_to_primary, self.var(intf.key, var))
            out = term if out is None else out + term
        return self.zeros(sd.num_faces) if out is None else out

    def fracture_fluxes(self, sd):
        """(darcy, conductive, advective) face fluxes of a 1D subdomain."""
        key = ("ffl", sd.key)
        if key in self._geom_cache:
            return self._geom_cache[key]
        par = self.par
        p, T = self.var(sd.key, "p"), self.var(sd.key, "T")
        interior, c1, c2, Tp = self._tpfa_1d(sd, self.fracture_permeability(sd))
        _, _, _, Th = self._tpfa_1d(sd, self.fracture_conductivity(sd))
        if interior.size:
            q_int = Tp * (p[c1] - p[c2])
            w_int = Th * (T[c1] - T[c2])
            up = np.where(value(q_int) > 0, c1, c2)
            s_int = par.fluid_volumetric_heat_capacity * q_int * T[up]
        else:
            q_int = w_int = s_int = None
        q = self._faces_from_interior(sd, interior, q_int) + self._lower_interface_sum(sd, "v")
        w = self._faces_from_interior(sd, interior, w_int) + self._lower_interface_sum(sd, "w")
        s = self._faces_from_interior(sd, interior, s_int) + self._lower_interface_sum(sd, "s")
        out = (q, w, s)
        self._geom_cache[key] = out
        return out

    def interface_inflow(self, sd, var):
        """Sum over all interfaces where ``sd`` is the lower side."""
        out = None
        for intf in self.g.interfaces_of_lower(sd):
            term = ad.matmul(intf.mortar_to_secondary_int, self.var(intf.key, var))
            out = term if out is None else out + term
        return self.zeros(sd.num_cells) if out is None else out


def _sum(a):
    if isinstance(a, AdArray):
        return ad.matmul(sps.csr_matrix(np.ones((1, a.size))), a)
    return np.atleast_1d(np.sum(a))


# ---------------------------------------------------------------------------
# Residual blocks


def _check_finite(name, r):
    if not np.all(np.isfinite(value(r))):
        raise NonFiniteResidual(f"non-finite entries in {name}")
    return r


def assemble_subdomain_h(terms: Terms) -> dict:
    """Momentum, mass and energy rows of the matrix subdomain."""
    g = terms.g.matrix
    par = terms.par
    key = g.key
    dt = terms.dt
    vol = g.cell_volumes
    div = divergence(g)
    p, T = terms.var(key, "p"), terms.var(key, "T")
    pp, Tp = terms.pvar(key, "p"), terms.pvar(key, "T")
    ddiv = terms.div_u - terms.prev.div_u
    momentum = ad.matmul(divergence(g, 2), terms.face_traction)
    mass = (
        vol * (par.storativity * (p - pp) - par.porosity * par.thermal_expansion_fluid * (T - Tp))
        + par.biot_alpha * ddiv
        + dt * ad.matmul(div, terms.darcy_flux)
    )
    T0 = par.reference_temperature
    energy = (
        vol * (par.volumetric_heat_capacity * (T - Tp) - par.porosity * par.thermal_expansion_fluid * T0 * (p - pp))
        + par.thermal_stress_coefficient * T0 * ddiv
        + dt * ad.matmul(div, terms.conductive_flux + terms.advective_flux)
    )
    return {
        "u": _check_finite("momentum", momentum),
        "p": _check_finite("matrix mass", mass),
        "T": _check_finite("matrix energy", energy),
    }


def assemble_subdomain_l(terms: Terms, sd) -> dict:
    """Mass and energy rows of a fracture or intersection subdomain."""
    par = terms.par
    dt = terms.dt
    key = sd.key
    vol = sd.cell_volumes
    p, T = terms.var(key, "p"), terms.var(key, "T")
    pp, Tp = terms.pvar(key, "p"), terms.pvar(key, "T")
    V = terms.specific_volume(sd)
    _, Vp = terms.prev_geometry(sd)
    cf = par.fluid_volumetric_heat_capacity
    beta = par.thermal_expansion_fluid
    T0 = par.reference_temperature
    mass = vol * (V * (par.fluid_compressibility * (p - pp) - beta * (T - Tp)) + (V - Vp))
    energy = vol * (V * (cf * (T - Tp) - beta * T0 * (p - pp)))
    if sd.dim == 1:
        q, w, s = terms.fracture_fluxes(sd)
        div = divergence(sd)
        mass = mass + dt * ad.matmul(div, q)
        energy = energy + dt * ad.matmul(div, w + s)
    mass = mass - dt * terms.interface_inflow(sd, "v")
    energy = energy - dt * (terms.interface_inflow(sd, "w") + terms.interface_inflow(sd, "s"))
    return {
        "p": _check_finite(f"{sd.name} mass", mass),
        "T": _check_finite(f"{sd.name} energy", energy),
    }


def assemble_interface_laws(terms: Terms, intf) -> dict:
    """Fluid, conductive and advective interface flux laws."""
    par = terms.par
    g = terms.g
    v, w, s = terms.var(intf.key, "v"), terms.var(intf.key, "w"), terms.var(intf.key, "s")
    low = g.subdomains[intf.key[1]]
    proj_l = intf.secondary_to_mortar
    p_l = ad.matmul(proj_l, terms.var(low.key, "p"))
    T_l = ad.matmul(proj_l, terms.var(low.key, "T"))
    if intf.dim == 1:
        proj_h = intf.primary_to_mortar
        tr_p = ad.matmul(proj_h, terms.pressure_trace)
        tr_T = ad.matmul(proj_h, terms.temperature_trace)
        area = intf.areas
    else:
        high = g.subdomains[intf.key[0]]
        faces = intf.primary_faces
        p_h, T_h = terms.var(high.key, "p"), terms.var(high.key, "T")
        tp, cells = terms.half_transmissibility(high, terms.fracture_permeability(high), faces)
        th, _ = terms.half_transmissibility(high, terms.fracture_conductivity(high), faces)
        # Neumann traces: cell value minus outward flux over half transmissibility
        tr_p = p_h[cells] - v * tp.reciprocal() if isinstance(tp, AdArray) else p_h[cells] - v / tp
        tr_T = T_h[cells] - w * th.reciprocal() if isinstance(th, AdArray) else T_h[cells] - w / th
        area = terms.aperture(high)[cells]
    v_law = v + par.interface_permeability * area * (p_l - tr_p)
    w_law = w + par.interface_conductivity * area * (T_l - tr_T)
    from_high = value(v) > 0
    sel_h = sps.diags(from_high.astype(float)).tocsr()
    sel_l = sps.diags((~from_high).astype(float)).tocsr()
    T_up = ad.matmul(sel_h, tr_T) + ad.matmul(sel_l, T_l)
    s_law = s - par.fluid_volumetric_heat_capacity * v * T_up
    return {
        "v": _check_finite(f"{intf.name} fluid law", v_law),
        "w": _check_finite(f"{intf.name} conduction law", w_law),
        "s": _check_finite(f"{intf.name} advection law", s_law),
    }


def update_geometry(model: Model, state: State) -> dict:
    """Aperture, specific volume and tangential transmissibility per
    fracture and intersection subdomain for the given state."""
    t = Terms(model, state.x, state, state, 1.0)
    out = {}
    for sd in model.grid.subdomain_list():
        if sd.dim == 2:
            continue
        a, V = value(t.aperture(sd)), value(t.specific_volume(sd))
        entry = {"aperture": np.atleast_1d(a), "specific_volume": np.atleast_1d(V)}
        if sd.dim == 1:
            entry["permeability"] = value(t.fracture_permeability(sd))
        out[sd.key] = entry
    return out


# ---------------------------------------------------------------------------
# Conservation audit


def conservation_audit(model: Model, state: State, prev: State, dt: float) -> dict:
    """Global mass and energy balance of one converged time step.

    Returns, per balance, the accumulation total, the external boundary
    outflow over the step and the imbalance relative to the gross
    throughput (absolute accumulation plus absolute face transport), but never
    to less than the storage of a unit pressure or temperature change over the
    matrix. Interface fluxes cancel identically between the two subdomains
    they connect.
    """
    t = Terms(model, state.x, state, prev, dt)
    g = model.grid.matrix
    ext = g.face_kind == EXTERNAL
    h = assemble_subdomain_h(t)
    div = divergence(g)
    out_mass = dt * float(np.sum(value(t.darcy_flux)[ext]))
    out_energy = dt * float(np.sum(value(t.conductive_flux + t.advective_flux)[ext]))
    acc_m = h["p"] - dt * (div @ value(t.darcy_flux))
    acc_e = h["T"] - dt * (div @ value(t.conductive_flux + t.advective_flux))
    acc_mass, acc_energy = float(np.sum(acc_m)), float(np.sum(acc_e))
    # scale: gross throughput, so quasi-steady steps are not judged by noise
    mag_mass = float(np.sum(np.abs(acc_m))) + dt * float(np.sum(np.abs(value(t.darcy_flux))))
    mag_energy = float(np.sum(np.abs(acc_e))) + dt * float(
        np.sum(np.abs(value(t.conductive_flux))) + np.sum(np.abs(value(t.advective_flux)))
    )
    for sd in model.grid.subdomain_list():
        if sd.dim == 2:
            continue
        lo = assemble_subdomain_l(t, sd)
        inflow_m = dt * value(t.interface_inflow(sd, "v"))
        inflow_e = dt * value(t.interface_inflow(sd, "w") + t.interface_inflow(sd, "s"))
        # Only the accumulation part counts; interior and interface fluxes telescope.
        acc_m = lo["p"] + inflow_m
        acc_e = lo["T"] + inflow_e
        if sd.dim == 1:
            q, w, s = t.fracture_fluxes(sd)
            acc_m = acc_m - dt * (divergence(sd) @ value(q))
            acc_e = acc_e - dt * (divergence(sd) @ value(w + s))
            mag_mass += dt * float(np.sum(np.abs(value(q))))
            mag_energy += dt * float(np.sum(np.abs(value(w))) + np.sum(np.abs(value(s))))
        acc_mass += float(np.sum(acc_m))
        acc_energy += float(np.sum(acc_e))
        mag_mass += float(np.sum(np.abs(acc_m)))
        mag_energy += float(np.sum(np.abs(acc_e)))

    def rel(acc, out, mag, floor):
        scale = max(mag, abs(out), floor)
        return abs(acc + out) / scale

    # floors: storage of a 1 Pa or 1 K change over the whole matrix, so a
    # static field is not judged by round-off over round-off
    total = float(np.sum(g.cell_volumes))
    floor_mass = max(model.params.storativity * total, 1e-300)
    floor_energy = max(model.params.volumetric_heat_capacity * total, 1e-300)
    return {
        "mass": {"accumulation": acc_mass, "outflow": out_mass, "relative": rel(acc_mass, out_mass, mag_mass, floor_mass)},
        "energy": {
            "accumulation": acc_energy,
            "outflow": out_energy,
            "relative": rel(acc_energy, out_energy, mag_energy, floor_energy),
        },
    }
