"""Cell-centred finite-volume operators.

MPFA-O for scalar diffusion, MPSA with weakly symmetric local stresses for
linear elasticity with an isotropic scalar stress coupling, two-point fluxes on
1D grids and first-order upwinding for advection.

Conventions
-----------
Face quantities are integrated over the face and measured along the face
normal; on boundary faces the normal is outward. Boundary-value vectors have
one entry per face (two, interleaved, for vectors): the prescribed value on
Dirichlet faces, the face-integrated flux/traction on Neumann faces. Entries
on interior faces are ignored.

The isotropic stress coupling enters through a single scalar cell field
``pi`` (``alpha*p + beta_s*K*(T - T0)``); total stress is ``C:grad u - pi*I``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sps

from .errors import GeometryError, ShapeMismatch, SingularLocalSystem, ValidationError
from .mdgrid import EXTERNAL, INTERIOR, SIDES, SubdomainGrid

logger = logging.getLogger(__name__)

MPFA_ETA = 0.0
MPSA_ETA = 1.0 / 3.0
COND_LIMIT = 1e14


@dataclass
class MaterialParams:
    """Physical parameters (SI units, temperatures in K)."""

    shear_modulus: float = 16e9
    lame_lambda: float = 16e9
    biot_alpha: float = 0.8
    bulk_modulus: float | None = None  # defaults to lambda + 2/3 mu
    thermal_expansion_solid: float = 3e-5
    thermal_expansion_fluid: float = 4e-4
    porosity: float = 0.01
    fluid_compressibility: float = 4e-10
    permeability: float = 1e-14
    viscosity: float = 1e-3
    fluid_density: float = 1000.0
    fluid_heat_capacity: float = 4200.0
    density: float = 2700.0
    heat_capacity: float = 800.0
    thermal_conductivity: float = 3.0
    fracture_conductivity: float | None = None  # defaults to thermal_conductivity
    reference_temperature: float = 273.15
    friction_coefficient: float = 0.5
    interface_permeability: float = 1e-6
    interface_conductivity: float = 1e3
    residual_aperture: float = 1e-5
    initial_aperture: float = 1e-4

    _positive = (
        "shear_modulus",
        "fluid_compressibility",
        "permeability",
        "viscosity",
        "fluid_density",
        "fluid_heat_capacity",
        "density",
        "heat_capacity",
        "thermal_conductivity",
        "reference_temperature",
        "friction_coefficient",
        "interface_permeability",
        "interface_conductivity",
        "residual_aperture",
        "initial_aperture",
    )

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not np.isfinite(v):
                raise ValidationError("must be finite", f.name)
        for name in self._positive:
            if not getattr(self, name) > 0:
                raise ValidationError("must be strictly positive", name)
        if not 0.0 <= self.biot_alpha <= 1.0:
            raise ValidationError("must lie in [0, 1]", "biot_alpha")
        if not 0.0 <= self.porosity < 1.0:
            raise ValidationError("must lie in [0, 1)", "porosity")
        if self.lame_lambda + self.shear_modulus <= 0:
            raise ValidationError("lambda + mu must be positive", "lame_lambda")
        if self.bulk_modulus is None:
            self.bulk_modulus = self.lame_lambda + 2.0 * self.shear_modulus / 3.0
        if not self.bulk_modulus > 0:
            raise ValidationError("must be strictly positive", "bulk_modulus")
        if self.fracture_conductivity is None:
            self.fracture_conductivity = self.thermal_conductivity
        if self.residual_aperture > self.initial_aperture:
            raise ValidationError("must not exceed initial_aperture", "residual_aperture")

    @classmethod
    def from_young(cls, young: float, poisson: float, **kw) -> MaterialParams:
        mu = young / (2 * (1 + poisson))
        lam = young * poisson / ((1 + poisson) * (1 - 2 * poisson))
        return cls(shear_modulus=mu, lame_lambda=lam, **kw)

    @property
    def storativity(self) -> float:
        """Matrix pressure storage ``phi*c + (alpha - phi)/K``."""
        return self.porosity * self.fluid_compressibility + (
            self.biot_alpha - self.porosity
        ) / self.bulk_modulus

    @property
    def fluid_mobility(self) -> float:
        return self.permeability / self.viscosity

    @property
    def volumetric_heat_capacity(self) -> float:
        return self.density * self.heat_capacity

    @property
    def fluid_volumetric_heat_capacity(self) -> float:
        return self.fluid_density * self.fluid_heat_capacity

    @property
    def thermal_stress_coefficient(self) -> float:
        return self.thermal_expansion_solid * self.bulk_modulus


@dataclass
class ScalarBC:
    dirichlet: np.ndarray
    values: np.ndarray

    @classmethod
    def neumann(cls, nf: int) -> ScalarBC:
        return cls(np.zeros(nf, dtype=bool), np.zeros(nf))

    def copy(self) -> ScalarBC:
        return ScalarBC(self.dirichlet.copy(), self.values.copy())


@dataclass
class VectorBC:
    dirichlet: np.ndarray  # (nf, 2)
    values: np.ndarray  # (nf, 2)

    @classmethod
    def neumann(cls, nf: int) -> VectorBC:
        return cls(np.zeros((nf, 2), dtype=bool), np.zeros((nf, 2)))

    def copy(self) -> VectorBC:
        return VectorBC(self.dirichlet.copy(), self.values.copy())


@dataclass
class BoundaryConditionSet:
    """Per-face condition kinds and values for the three fields of one grid."""

    mechanics: VectorBC
    flow: ScalarBC
    heat: ScalarBC

    @classmethod
    def default(cls, grid: SubdomainGrid) -> BoundaryConditionSet:
        nf = grid.num_faces
        return cls(VectorBC.neumann(nf), ScalarBC.neumann(nf), ScalarBC.neumann(nf))

    def copy(self) -> BoundaryConditionSet:
        return BoundaryConditionSet(self.mechanics.copy(), self.flow.copy(), self.heat.copy())

    def validate(self, grid: SubdomainGrid) -> None:
        nf = grid.num_faces
        for name, bc, shape in (
            ("mechanics", self.mechanics, (nf, 2)),
            ("flow", self.flow, (nf,)),
            ("heat", self.heat, (nf,)),
        ):
            if bc.dirichlet.shape != shape or bc.values.shape != shape:
                raise ValidationError(f"expected arrays of shape {shape}", name)
            if not np.all(np.isfinite(bc.values)):
                raise ValidationError("non-finite boundary value", name)


def _kind(k) -> bool:
    k = str(k).lower()
    if k not in ("dirichlet", "neumann"):
        raise ValidationError(f"unknown condition kind {k!r}", "kind")
    return k == "dirichlet"


def side_boundary_conditions(grid: SubdomainGrid, mechanics=None, flow=None, heat=None) -> BoundaryConditionSet:
    """Boundary data given per domain side.

    ``mechanics`` maps a side name to ``(kinds, values)`` with one kind and one
    value per component; ``flow`` and ``heat`` map a side to ``(kind, value)``.
    Neumann values are per unit face area and get multiplied by the face
    area. Sides that are not listed are homogeneous Neumann.
    """
    bc = BoundaryConditionSet.default(grid)
    area = grid.face_areas
    for side, (kinds, vals) in (mechanics or {}).items():
        faces = _side_faces(grid, side)
        for d in range(2):
            dir_ = _kind(kinds[d])
            bc.mechanics.dirichlet[faces, d] = dir_
            bc.mechanics.values[faces, d] = float(vals[d]) * (1.0 if dir_ else area[faces])
    for target, spec in ((bc.flow, flow), (bc.heat, heat)):
        for side, (kind, val) in (spec or {}).items():
            faces = _side_faces(grid, side)
            dir_ = _kind(kind)
            target.dirichlet[faces] = dir_
            target.values[faces] = float(val) * (1.0 if dir_ else area[faces])
    return bc


def _side_faces(grid: SubdomainGrid, side: str) -> np.ndarray:
    if side not in SIDES:
        raise ValidationError(f"unknown boundary side {side!r}", "side")
    return grid.external_faces(side)


@dataclass
class FluxDiscretization:
    """Sparse operators of a scalar or vector flux discretisation."""

    flux: sps.csr_matrix
    bound_flux: sps.csr_matrix
    bound_pressure_cell: sps.csr_matrix | None = None
    bound_pressure_face: sps.csr_matrix | None = None
    # vector variant only
    grad_p: sps.csr_matrix | None = None
    div_u: sps.csr_matrix | None = None
    bound_div_u: sps.csr_matrix | None = None
    stabilization: sps.csr_matrix | None = None
    extra: dict = field(default_factory=dict)

    @property
    def is_vector(self) -> bool:
        return self.div_u is not None

    @property
    def stress(self) -> sps.csr_matrix:
        return self.flux

    @property
    def bound_stress(self) -> sps.csr_matrix:
        return self.bound_flux


# ---------------------------------------------------------------------------
# helpers


def _node_incidence(grid: SubdomainGrid):
    nc, nn, nf = grid.num_cells, grid.num_nodes, grid.num_faces
    cn = grid.cell_nodes
    node_cells = sps.csr_matrix(
        (np.ones(cn.size), (cn.ravel(), np.repeat(np.arange(nc), cn.shape[1]))), shape=(nn, nc)
    )
    fn = grid.face_nodes
    node_faces = sps.csr_matrix(
        (np.ones(fn.size), (fn.ravel(), np.repeat(np.arange(nf), fn.shape[1]))), shape=(nn, nf)
    )
    return node_cells, node_faces


def _conductivity_tensor(k, nc: int) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.ndim == 0:
        k = np.full(nc, float(k))
    if k.ndim == 1:
        if k.size != nc:
            raise ShapeMismatch("conductivity must have one entry per cell")
        out = np.zeros((nc, 2, 2))
        out[:, 0, 0] = k
        out[:, 1, 1] = k
        return out
    if k.shape != (nc, 2, 2):
        raise ShapeMismatch("conductivity tensor must be (num_cells, 2, 2)")
    if not np.allclose(k, np.transpose(k, (0, 2, 1))):
        raise ValidationError("conductivity tensor must be symmetric", "conductivity")
    return k


def _continuity_point(x_face, x_node, eta, interior):
    # Boundary data lives at face centres, so boundary subfaces use eta = 0.
    return x_face + eta * (x_node - x_face) if interior else x_face


def _solve_local(A: np.ndarray, B: np.ndarray, where: str, null_ok=None) -> np.ndarray:
    # traction and continuity rows differ by the stiffness scale; equilibrate
    r = np.abs(A).max(axis=1)
    r[r == 0] = 1.0
    A, B = A / r[:, None], B / r[:, None]
    cond = np.linalg.cond(A)
    if cond < COND_LIMIT:
        return np.linalg.solve(A, B)
    if null_ok is not None:
        _, s, vt = np.linalg.svd(A)
        null = vt[s < s[0] / COND_LIMIT]
        if null_ok(null):
            logger.debug("%s: rank-deficient local system resolved by pseudo-inverse", where)
            return np.linalg.pinv(A, rcond=1.0 / COND_LIMIT) @ B
    raise SingularLocalSystem(f"{where}: local system condition number {cond:.3e}")


class _Coo:
    def __init__(self, shape):
        self.shape = shape
        self.r: list = []
        self.c: list = []
        self.v: list = []

    def add(self, rows, cols, vals):
        rows = np.broadcast_to(np.asarray(rows), np.shape(vals))
        cols = np.broadcast_to(np.asarray(cols), np.shape(vals))
        self.r.append(np.ravel(rows))
        self.c.append(np.ravel(cols))
        self.v.append(np.ravel(vals))

    def tocsr(self) -> sps.csr_matrix:
        if not self.r:
            return sps.csr_matrix(self.shape)
        m = sps.coo_matrix(
            (np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=self.shape
        ).tocsr()
        m.sum_duplicates()
        m.eliminate_zeros()
        return m


# ---------------------------------------------------------------------------
# MPFA


def mpfa_discretize(grid: SubdomainGrid, conductivity, bc, eta: float = MPFA_ETA) -> FluxDiscretization:
    """Multi-point flux discretisation of ``-div(K grad p)``.

    ``bc`` is a :class:`ScalarBC` (or anything with a boolean ``dirichlet``
    array over faces). 1D grids fall back to two-point fluxes.
    """
    if grid.dim == 1:
        return tpfa_discretize(grid, conductivity, bc)
    if grid.dim != 2:
        raise GeometryError("MPFA needs a 1D or 2D grid")
    nc, nf = grid.num_cells, grid.num_faces
    K = _conductivity_tensor(conductivity, nc)
    dirichlet = np.asarray(bc.dirichlet, dtype=bool)
    if dirichlet.shape != (nf,):
        raise ShapeMismatch("scalar BC must have one entry per face")
    node_cells, node_faces = _node_incidence(grid)
    fcells = grid.face_cells()
    xc, xf, xn = grid.cell_centers, grid.face_centers, grid.nodes
    flux, bflux = _Coo((nf, nc)), _Coo((nf, nf))
    bpc, bpf = _Coo((nf, nc)), _Coo((nf, nf))

    for n in range(grid.num_nodes):
        cells = node_cells.indices[node_cells.indptr[n] : node_cells.indptr[n + 1]]
        faces = node_faces.indices[node_faces.indptr[n] : node_faces.indptr[n + 1]]
        lc = {c: i for i, c in enumerate(cells)}
        m = cells.size
        A = np.zeros((2 * m, 2 * m))
        Bp = np.zeros((2 * m, m))
        Bb = np.zeros((2 * m, faces.size))
        row = 0
        for j, f in enumerate(faces):
            xs = _continuity_point(xf[f], xn[n], eta, fcells[f, 1] >= 0)
            Ns = 0.5 * grid.face_normals[f]
            c1, c2 = fcells[f]
            i1 = lc[c1]
            if c2 >= 0:
                i2 = lc[c2]
                A[row, 2 * i1 : 2 * i1 + 2] = -Ns @ K[c1]
                A[row, 2 * i2 : 2 * i2 + 2] = Ns @ K[c2]
                row += 1
                A[row, 2 * i1 : 2 * i1 + 2] = xs - xc[c1]
                A[row, 2 * i2 : 2 * i2 + 2] = -(xs - xc[c2])
                Bp[row, i1] = -1.0
                Bp[row, i2] = 1.0
                row += 1
            elif dirichlet[f]:
                A[row, 2 * i1 : 2 * i1 + 2] = xs - xc[c1]
                Bp[row, i1] = -1.0
                Bb[row, j] = 1.0
                row += 1
            else:
                A[row, 2 * i1 : 2 * i1 + 2] = -Ns @ K[c1]
                Bb[row, j] = 0.5
                row += 1
        if row != 2 * m:
            raise GeometryError(f"node {n}: interaction region is not closed")
        sol = _solve_local(A, np.hstack([Bp, Bb]), f"MPFA node {n}")
        Gp, Gb = sol[:, :m], sol[:, m:]
        for j, f in enumerate(faces):
            c1 = fcells[f, 0]
            i1 = lc[c1]
            Ns = 0.5 * grid.face_normals[f]
            coeff = -Ns @ K[c1]
            flux.add(f, cells, coeff @ Gp[2 * i1 : 2 * i1 + 2])
            bflux.add(f, faces, coeff @ Gb[2 * i1 : 2 * i1 + 2])
            if fcells[f, 1] < 0:
                dx = xf[f] - xc[c1]
                e = np.zeros(m)
                e[i1] = 1.0
                bpc.add(f, cells, 0.5 * (e + dx @ Gp[2 * i1 : 2 * i1 + 2]))
                bpf.add(f, faces, 0.5 * (dx @ Gb[2 * i1 : 2 * i1 + 2]))
    return FluxDiscretization(
        flux=flux.tocsr(),
        bound_flux=bflux.tocsr(),
        bound_pressure_cell=bpc.tocsr(),
        bound_pressure_face=bpf.tocsr(),
    )


def tpfa_half_transmissibilities(grid: SubdomainGrid, conductivity):
    """Per (face, cell) half transmissibilities ``K_c |f| / d`` with
    ``d = |(x_f - x_c) . n_f| / |n_f|``.

    ``conductivity`` may be an array or an AdArray; the returned list holds,
    for each entry of ``grid.cell_faces`` in COO order, the face, the cell and
    the geometric factor so callers can form the product themselves.
    """
    cf = grid.cell_faces.tocoo()
    d = grid.face_centers[cf.row] - grid.cell_centers[cf.col]
    n = grid.face_normals[cf.row]
    area = np.linalg.norm(n, axis=1)
    dist = np.abs(np.sum(d * n, axis=1)) / area
    return cf.row, cf.col, cf.data, area / dist


def tpfa_discretize(grid: SubdomainGrid, conductivity, bc) -> FluxDiscretization:
    """Two-point flux discretisation with harmonic face averaging."""
    nc, nf = grid.num_cells, grid.num_faces
    k = np.asarray(conductivity, dtype=float)
    if k.ndim == 0:
        k = np.full(nc, float(k))
    if k.ndim == 3:
        k = k[:, 0, 0]
    dirichlet = np.asarray(bc.dirichlet, dtype=bool)
    rows, cols, sgn, geo = tpfa_half_transmissibilities(grid, k)
    t = k[cols] * geo
    inv = np.zeros(nf)
    np.add.at(inv, rows, 1.0 / t)
    T = 1.0 / inv
    boundary = grid.face_kind != INTERIOR
    flux = sps.csr_matrix((sgn * T[rows], (rows, cols)), shape=(nf, nc))
    neu = boundary & ~dirichlet
    dirf = boundary & dirichlet
    bdiag = np.where(neu, 1.0, np.where(dirf, -T, 0.0))
    flux = sps.csr_matrix(sps.diags(np.where(neu, 0.0, 1.0)) @ flux)
    bound_flux = sps.diags(bdiag).tocsr()
    # trace: Dirichlet -> value; Neumann -> p_c - q / t
    bmask = boundary[rows]
    bpc = sps.csr_matrix(
        (np.where(dirf[rows[bmask]], 0.0, 1.0), (rows[bmask], cols[bmask])), shape=(nf, nc)
    )
    bpf_diag = np.zeros(nf)
    bpf_diag[dirf] = 1.0
    tb = np.zeros(nf)
    tb[rows[bmask]] = t[bmask]
    bpf_diag[neu] = -1.0 / tb[neu]
    return FluxDiscretization(
        flux=flux,
        bound_flux=bound_flux,
        bound_pressure_cell=bpc,
        bound_pressure_face=sps.diags(bpf_diag).tocsr(),
    )


# ---------------------------------------------------------------------------
# MPSA


def _traction_op(N: np.ndarray, mu: float, lam: float) -> np.ndarray:
    """2x4 map from a flattened full gradient G to (2 mu G + lam tr(G) I) N."""
    T = np.zeros((2, 4))
    T[0, 0:2] = 2 * mu * N
    T[1, 2:4] = 2 * mu * N
    T[:, 0] += lam * N
    T[:, 3] += lam * N
    return T


def _rotation_op(N: np.ndarray, mu: float) -> np.ndarray:
    """Traction of the skew stress -2 mu r J per unit region rotation r."""
    return -2 * mu * np.array([-N[1], N[0]])


def _skew_only(null: np.ndarray) -> bool:
    # A free rotation is harmless: it changes neither tractions nor divergence.
    g = null.reshape(null.shape[0], -1, 4)
    scale = np.abs(g).max()
    return bool(
        np.all(np.abs(g[:, :, 0]) < 1e-8 * scale)
        and np.all(np.abs(g[:, :, 3]) < 1e-8 * scale)
        and np.all(np.abs(g[:, :, 1] + g[:, :, 2]) < 1e-8 * scale)
    )


# flattened G -> rotation (G - G^T)/2 = r J
_ROT = np.array([0.0, -0.5, 0.5, 0.0])


def _disp_op(dx: np.ndarray) -> np.ndarray:
    """2x4 map from a flattened displacement gradient to G dx."""
    D = np.zeros((2, 4))
    D[0, 0:2] = dx
    D[1, 2:4] = dx
    return D


def mpsa_biot_discretize(grid: SubdomainGrid, params, bc_mech: VectorBC, eta: float = MPSA_ETA) -> FluxDiscretization:
    """Multi-point stress discretisation with isotropic scalar stress coupling.

    ``params`` provides ``shear_modulus`` and ``lame_lambda`` (scalars or per
    cell arrays). Returned operators (``u`` interleaved per cell, faces
    likewise):

    * ``stress``/``bound_stress``: face tractions from cell displacements and
      boundary values,
    * ``grad_p``: face traction from the scalar field ``pi``,
    * ``div_u``/``bound_div_u``: cell-integrated divergence of displacement,
    * ``stabilization``: dependence of that divergence on ``pi``.
    """
    if grid.dim != 2:
        raise GeometryError("MPSA needs a 2D grid")
    nc, nf = grid.num_cells, grid.num_faces
    mu = np.broadcast_to(np.asarray(params.shear_modulus, dtype=float), (nc,))
    lam = np.broadcast_to(np.asarray(params.lame_lambda, dtype=float), (nc,))
    dirichlet = np.asarray(bc_mech.dirichlet, dtype=bool)
    if dirichlet.shape != (nf, 2):
        raise ShapeMismatch("vector BC must have shape (num_faces, 2)")
    node_cells, node_faces = _node_incidence(grid)
    fcells = grid.face_cells()
    cell_faces = grid.cell_faces.tocsr()
    xc, xf, xn = grid.cell_centers, grid.face_centers, grid.nodes
    stress, bstress, gradp = _Coo((2 * nf, 2 * nc)), _Coo((2 * nf, 2 * nf)), _Coo((2 * nf, nc))
    div, bdiv, stab = _Coo((nc, 2 * nc)), _Coo((nc, 2 * nf)), _Coo((nc, nc))

    for n in range(grid.num_nodes):
        cells = node_cells.indices[node_cells.indptr[n] : node_cells.indptr[n + 1]]
        faces = node_faces.indices[node_faces.indptr[n] : node_faces.indptr[n + 1]]
        lc = {c: i for i, c in enumerate(cells)}
        m, k = cells.size, faces.size
        A = np.zeros((4 * m, 4 * m))
        Bu = np.zeros((4 * m, 2 * m))
        Bb = np.zeros((4 * m, 2 * k))
        Bp = np.zeros((4 * m, m))
        # weak symmetry: one rotation per region, the mu-and-volume weighted mean
        wts = mu[cells] * grid.cell_volumes[cells]
        R = np.kron(wts / wts.sum(), _ROT)

        def trac(c, Ns):
            i = lc[c]
            out = np.outer(_rotation_op(Ns, mu[c]), R)
            out[:, 4 * i : 4 * i + 4] += _traction_op(Ns, mu[c], lam[c])
            return out

        row = 0
        for j, f in enumerate(faces):
            xs = _continuity_point(xf[f], xn[n], eta, fcells[f, 1] >= 0)
            Ns = 0.5 * grid.face_normals[f]
            c1, c2 = fcells[f]
            i1 = lc[c1]
            s1 = slice(4 * i1, 4 * i1 + 4)
            if c2 >= 0:
                i2 = lc[c2]
                s2 = slice(4 * i2, 4 * i2 + 4)
                A[row : row + 2] = trac(c1, Ns) - trac(c2, Ns)
                Bp[row : row + 2, i1] = Ns
                Bp[row : row + 2, i2] = -Ns
                row += 2
                A[row : row + 2, s1] = _disp_op(xs - xc[c1])
                A[row : row + 2, s2] = -_disp_op(xs - xc[c2])
                for d in range(2):
                    Bu[row + d, 2 * i1 + d] = -1.0
                    Bu[row + d, 2 * i2 + d] = 1.0
                row += 2
            else:
                T = trac(c1, Ns)
                D = _disp_op(xs - xc[c1])
                for d in range(2):
                    if dirichlet[f, d]:
                        A[row, s1] = D[d]
                        Bu[row, 2 * i1 + d] = -1.0
                        Bb[row, 2 * j + d] = 1.0
                    else:
                        A[row] = T[d]
                        Bp[row, i1] = Ns[d]
                        Bb[row, 2 * j + d] = 0.5
                    row += 1
        if row != 4 * m:
            raise GeometryError(f"node {n}: interaction region is not closed")
        # On the boundary, coinciding traction rows (a roller side meeting a free
        # side) make corner systems rank deficient; take the minimum-norm fit.
        on_boundary = bool(np.any(fcells[faces, 1] < 0))
        accept = (lambda null: True) if on_boundary else _skew_only
        sol = _solve_local(A, np.hstack([Bu, Bb, Bp]), f"MPSA node {n}", null_ok=accept)
        Gu, Gb, Gp = sol[:, : 2 * m], sol[:, 2 * m : 2 * m + 2 * k], sol[:, 2 * m + 2 * k :]
        ucols = np.column_stack([2 * cells, 2 * cells + 1]).ravel()
        bcols = np.column_stack([2 * faces, 2 * faces + 1]).ravel()
        for j, f in enumerate(faces):
            c1 = fcells[f, 0]
            i1 = lc[c1]
            Ns = 0.5 * grid.face_normals[f]
            T = trac(c1, Ns)
            rows = np.array([2 * f, 2 * f + 1])
            stress.add(rows[:, None], ucols[None, :], T @ Gu)
            bstress.add(rows[:, None], bcols[None, :], T @ Gb)
            ep = np.zeros((2, m))
            ep[:, i1] = Ns
            gradp.add(rows[:, None], cells[None, :], T @ Gp - ep)
            # divergence: every cell sharing this subface, with its own reconstruction
            xs = _continuity_point(xf[f], xn[n], eta, fcells[f, 1] >= 0)
            lo, hi = cell_faces.indptr[f], cell_faces.indptr[f + 1]
            for c, sgn in zip(cell_faces.indices[lo:hi], cell_faces.data[lo:hi]):
                i = lc[c]
                si = slice(4 * i, 4 * i + 4)
                w = sgn * (Ns @ _disp_op(xs - xc[c]))
                eu = np.zeros(2 * m)
                eu[2 * i : 2 * i + 2] = sgn * Ns
                div.add(c, ucols, eu + w @ Gu[si])
                bdiv.add(c, bcols, w @ Gb[si])
                stab.add(c, cells, w @ Gp[si])
    return FluxDiscretization(
        flux=stress.tocsr(),
        bound_flux=bstress.tocsr(),
        grad_p=gradp.tocsr(),
        div_u=div.tocsr(),
        bound_div_u=bdiv.tocsr(),
        stabilization=stab.tocsr(),
    )


# ---------------------------------------------------------------------------
# Advection


@dataclass
class UpwindMap:
    """Advective face flux = ``q * (cell @ T + bound @ T_bc)``."""

    cell: sps.csr_matrix
    bound: sps.csr_matrix


def upwind_discretize(grid: SubdomainGrid, face_fluxes, inflow_dirichlet=None, exclude=None) -> UpwindMap:
    """First-order upwind selection for the current face fluxes.

    On boundary faces outflow takes the cell value; inflow takes the boundary
    value where ``inflow_dirichlet`` is set and the cell value otherwise.
    Faces in ``exclude`` (e.g. fracture faces carrying interface advection)
    get zero rows.
    """
    q = np.asarray(face_fluxes, dtype=float)
    nf, nc = grid.num_faces, grid.num_cells
    if q.shape != (nf,):
        raise ShapeMismatch("one flux per face expected")
    fcells = grid.face_cells()
    inflow_dirichlet = np.zeros(nf, bool) if inflow_dirichlet is None else np.asarray(inflow_dirichlet, bool)
    exclude = np.zeros(nf, bool) if exclude is None else np.asarray(exclude, bool)
    rows, cols, brows = [], [], []
    for f in range(nf):
        if exclude[f]:
            continue
        c1, c2 = fcells[f]
        if c2 >= 0:
            rows.append(f)
            cols.append(c1 if q[f] > 0 else c2)
        elif q[f] < 0 and inflow_dirichlet[f]:
            brows.append(f)
        else:
            rows.append(f)
            cols.append(c1)
    cell = sps.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(nf, nc))
    bound = sps.csr_matrix((np.ones(len(brows)), (brows, brows)), shape=(nf, nf))
    return UpwindMap(cell, bound)


# ---------------------------------------------------------------------------
# Reconstruction


def reconstruct_face_quantities(flow: FluxDiscretization, mech: FluxDiscretization, p, flow_bc, u, mech_bc, pi):
    """Face fluxes and face tractions (``(nf, 2)``) from primary variables.

    ``flow_bc``/``mech_bc`` are the complete boundary-value vectors, including
    interface fluxes on fracture faces and interface displacements there.
    """
    nf, nc = flow.flux.shape
    p, flow_bc, pi = (np.asarray(a, dtype=float).ravel() for a in (p, flow_bc, pi))
    u, mech_bc = np.asarray(u, dtype=float).ravel(), np.asarray(mech_bc, dtype=float).ravel()
    if p.size != nc or pi.size != nc or flow_bc.size != nf:
        raise ShapeMismatch("scalar fields do not match the grid")
    if u.size != 2 * nc or mech_bc.size != 2 * nf or mech.flux.shape != (2 * nf, 2 * nc):
        raise ShapeMismatch("vector fields do not match the grid")
    q = flow.flux @ p + flow.bound_flux @ flow_bc
    t = mech.flux @ u + mech.bound_flux @ mech_bc + mech.grad_p @ pi
    return q, t.reshape(-1, 2)


def divergence(grid: SubdomainGrid, dim: int = 1) -> sps.csr_matrix:
    """Cell-wise sum of outward face quantities, (cells x faces*dim)."""
    div = grid.cell_faces.T.tocsr()
    if dim == 1:
        return div
    return sps.kron(div, sps.eye(dim)).tocsr()
