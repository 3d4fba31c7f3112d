"""Fracture contact mechanics: traction balance, active-set classification
and the cell-wise semismooth Newton rows.

Local frame per fracture cell: component 0 is normal, component 1 tangential.
The contact traction ``lam`` is the traction exerted on the plus-side matrix
by contact alone (fluid pressure excluded), so compression means
``lam_n < 0`` and an admissible (open or touching) state has ``[[u]]_n <= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps

from . import ad
from .ad import value
from .errors import DegenerateBound, ShapeMismatch

OPEN, STICK, SLIDE = 0, 1, 2
REGIME_NAMES = ("open", "stick", "slide")

# Stick rows need a strictly positive bound; this is relative to the traction scale.
BOUND_FLOOR = 1e-12


@dataclass
class ContactCellState:
    """Local contact quantities of the fracture cells of one subdomain."""

    lam_n: np.ndarray
    lam_t: np.ndarray
    jump_n: np.ndarray
    jump_t: np.ndarray
    dut: np.ndarray  # tangential jump increment over the current step
    regime: np.ndarray
    bound: np.ndarray


def friction_bound(lam_n, jump_n, F, c=1.0):
    """``b = F (-lam_n + c [[u]]_n)``; works on arrays and AdArrays."""
    return F * (-lam_n + c * jump_n)


def classify_states(lam_n, lam_t, jump_n, dut, F, c) -> np.ndarray:
    lam_n, lam_t, jump_n, dut = (np.asarray(value(a), dtype=float) for a in (lam_n, lam_t, jump_n, dut))
    b = friction_bound(lam_n, jump_n, F, c)
    w = np.abs(-lam_t + c * dut)
    return np.where(b <= 0, OPEN, np.where(w < b, STICK, SLIDE)).astype(int)


def slide_coefficients(lam_n, lam_t, jump_n, dut, F, c):
    """``(L, v, r, b)`` of the slide row for a one-dimensional tangential space.

    ``v`` is the direction opposing ``w = -lam_t + c dut``. The tangential
    projector ``I - v v^T`` vanishes in one dimension, so ``L = 0``, and the
    offset ``r = -b v`` makes the right-hand side vanish: the row then reads
    ``lam_t = -F lam_n v``, which is the Coulomb law once ``[[u]]_n = 0``.
    """
    lam_n, lam_t, jump_n, dut = (np.asarray(a, dtype=float) for a in (lam_n, lam_t, jump_n, dut))
    b = friction_bound(lam_n, jump_n, F, c)
    w = -lam_t + c * dut
    v = -np.sign(w)
    v[v == 0] = -1.0
    L = np.zeros_like(b)
    r = -b * v
    return L, v, r, b


def assemble_contact_equations(regimes, lam, jump_n, dut, iterate: ContactCellState, F, c, traction_scale=1.0):
    """Two rows per fracture cell, interleaved (normal, tangential).

    ``lam`` (interleaved), ``jump_n`` and ``dut`` are the unknown-dependent
    quantities at iterate k+1; ``iterate`` carries their values at iterate k.
    Rows involving jumps are multiplied by ``c`` so every row is a traction.
    """
    regimes = np.asarray(regimes, dtype=int)
    nc = regimes.size
    if value(lam).size != 2 * nc or value(jump_n).size != nc or value(dut).size != nc:
        raise ShapeMismatch("contact quantities do not match the fracture cell count")
    lam_n = lam[0::2] if not isinstance(lam, ad.AdArray) else lam[np.arange(0, 2 * nc, 2)]
    lam_t = lam[1::2] if not isinstance(lam, ad.AdArray) else lam[np.arange(1, 2 * nc, 2)]
    is_open = regimes == OPEN
    stick = regimes == STICK
    slide = regimes == SLIDE
    b_k = friction_bound(iterate.lam_n, iterate.jump_n, F, c)
    if np.any(stick & (b_k < BOUND_FLOOR * traction_scale)):
        raise DegenerateBound("stick row requested with a vanishing friction bound")
    diag = lambda mask, w=1.0: sps.diags(np.where(mask, w, 0.0)).tocsr()
    row_n = ad.matmul(diag(is_open), lam_n) + ad.matmul(diag(~is_open), c * jump_n)

    # Newton linearisation of dut * (-F lam_n) / b about iterate k; with the
    # opposite sign on the lam_n term the iteration doubles dut when lam_n < 0.
    b_safe = np.where(stick, b_k, 1.0)
    coef = np.where(stick, -F * iterate.dut / b_safe, 0.0)
    stick_row = c * (dut + ad.matmul(sps.diags(coef).tocsr(), lam_n) - iterate.dut)
    L, v, r, b = slide_coefficients(iterate.lam_n, iterate.lam_t, iterate.jump_n, iterate.dut, F, c)
    slide_row = lam_t + ad.matmul(sps.diags(L).tocsr(), dut) + ad.matmul(sps.diags(F * v).tocsr(), lam_n) - (r + b * v)
    row_t = ad.matmul(diag(is_open), lam_t) + ad.matmul(diag(stick), stick_row) + ad.matmul(diag(slide), slide_row)
    perm = sps.csr_matrix(
        (np.ones(2 * nc), (np.r_[np.arange(0, 2 * nc, 2), np.arange(1, 2 * nc, 2)], np.arange(2 * nc))),
        shape=(2 * nc, 2 * nc),
    )
    if isinstance(row_n, ad.AdArray) or isinstance(row_t, ad.AdArray):
        num = (row_n if isinstance(row_n, ad.AdArray) else row_t).num_dofs
        stacked = ad.concatenate([row_n, row_t], num)
    else:
        stacked = np.concatenate([row_n, row_t])
    return ad.matmul(perm, stacked)


def traction_balance_rows(terms, sd):
    """Matrix face traction minus the traction carried by the fracture.

    On an interface cell of side ``s`` the matrix face traction must equal
    ``s |f| (lam_n n + lam_t t - p_l n)``.
    """
    g = terms.g
    intf = g.fracture_interface(sd)
    nic, nfc = intf.num_cells, sd.num_cells
    sel = sps.kron(intf.primary_to_mortar, sps.eye(2)).tocsr()
    face_t = ad.matmul(sel, terms.face_traction)
    rows, cols, lv, pv, pcols = [], [], [], [], []
    for k in range(nic):
        c, s, area = intf.secondary_cells[k], intf.side[k], intf.areas[k]
        n, t = sd.normals[c], sd.tangents[c]
        for d in range(2):
            rows += [2 * k + d, 2 * k + d]
            cols += [2 * c, 2 * c + 1]
            lv += [s * area * n[d], s * area * t[d]]
            pv.append(s * area * n[d])
            pcols.append(c)
    lam_map = sps.csr_matrix((lv, (rows, cols)), shape=(2 * nic, 2 * nfc))
    p_map = sps.csr_matrix((pv, (np.arange(2 * nic), pcols)), shape=(2 * nic, nfc))
    lam = terms.var(sd.key, "lam")
    p_l = terms.var(sd.key, "p")
    return face_t - ad.matmul(lam_map, lam) + ad.matmul(p_map, p_l)


def local_state(terms, sd, c) -> ContactCellState:
    """Contact quantities (values) of fracture ``sd`` at the iterate held by ``terms``."""
    F = terms.par.friction_coefficient
    lam = value(terms.var(sd.key, "lam"))
    jn = value(terms.jump_n(sd))
    jt = value(terms.jump_t(sd))
    dut = jt - terms.prev_jump_t(sd)
    reg = classify_states(lam[0::2], lam[1::2], jn, dut, F, c)
    return ContactCellState(lam[0::2], lam[1::2], jn, jt, dut, reg, friction_bound(lam[0::2], jn, F, c))


def kkt_report(cs: ContactCellState, F: float, traction_scale: float, jump_scale: float) -> dict:
    """Scaled violations of the non-penetration and friction conditions.

    Every entry is non-negative; zero means the condition holds exactly.
    """
    ts, js = float(traction_scale), float(jump_scale)
    lt, ln, jn, du = cs.lam_t, cs.lam_n, cs.jump_n, cs.dut
    viol = {
        "no_penetration": np.maximum(jn, 0.0) / js,
        "compressive": np.maximum(ln, 0.0) / ts,
        "complementarity": np.abs(ln * jn) / (ts * js),
        "friction_cone": np.maximum(np.abs(lt) + F * ln, 0.0) / ts,
        "stick_no_slip": np.where(cs.regime == STICK, np.abs(du), 0.0) / js,
    }
    # anti-parallel slip: lam_t * du = -|lam_t| |du| on sliding cells
    mag = np.abs(lt) * np.abs(du)
    anti = np.where(cs.regime == SLIDE, np.abs(lt * du + mag), 0.0)
    viol["slide_direction"] = anti / (ts * js)
    return {k: float(np.max(v, initial=0.0)) for k, v in viol.items()}
