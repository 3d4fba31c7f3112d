"""Mixed-dimensional grids: a 2D simplicial matrix grid slit along fractures,
1D fracture branch grids, 0D intersection grids and the interfaces between them.

All grids are built from a triangle list plus a set of fracture edges. The
structured mesher and the MSH importer only differ in how they produce those.
"""

from __future__ import annotations

import itertools
from functools import cached_property
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps

from .errors import (
    DegenerateGeometry,
    GeometryError,
    NonConformingMesh,
    OrientationError,
    ParseError,
    SegmentNotRepresentable,
)

# Face kinds.
INTERIOR = 0
EXTERNAL = 1
FRACTURE = 2  # slit matrix face facing a fracture
TIP = 3  # 1D end face inside the matrix
INTERSECTION = 4  # 1D end face at a 0D intersection

SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class FractureNetwork:
    """Straight fracture segments inside an axis-aligned box ``(xmin, ymin, xmax, ymax)``."""

    segments: tuple
    domain: tuple

    def __post_init__(self):
        segs = tuple(
            (tuple(map(float, a)), tuple(map(float, b))) for a, b in self.segments
        )
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "domain", tuple(map(float, self.domain)))
        xmin, ymin, xmax, ymax = self.domain
        if not (xmax > xmin and ymax > ymin):
            raise DegenerateGeometry("domain box has non-positive extent")
        tol = 1e-12 * max(xmax - xmin, ymax - ymin)
        for k, (a, b) in enumerate(segs):
            if np.hypot(b[0] - a[0], b[1] - a[1]) <= tol:
                raise DegenerateGeometry(f"segment {k} has zero length")
            for x, y in (a, b):
                if not (xmin - tol <= x <= xmax + tol and ymin - tol <= y <= ymax + tol):
                    raise GeometryError(f"segment {k} leaves the domain box")
        for (i, s), (j, t) in itertools.combinations(enumerate(segs), 2):
            if _collinear_overlap(s, t, tol):
                raise DegenerateGeometry(f"segments {i} and {j} overlap")


def _collinear_overlap(s, t, tol) -> bool:
    p, q = np.asarray(s[0]), np.asarray(s[1])
    d = q - p
    cross = lambda u, v: u[0] * v[1] - u[1] * v[0]
    L = np.linalg.norm(d)
    for r in t:
        if abs(cross(d, np.asarray(r) - p)) / L > tol:
            return False
    u = d / L
    s0, s1 = 0.0, L
    t0, t1 = sorted(((np.asarray(t[0]) - p) @ u, (np.asarray(t[1]) - p) @ u))
    return min(s1, t1) - max(s0, t0) > tol


@dataclass
class SubdomainGrid:
    """Geometry and topology of one subdomain.

    ``cell_faces`` is a signed (faces x cells) incidence: +1 where the face
    normal points out of the cell. Boundary faces (external, fracture, tips)
    always carry outward normals, so their single entry is +1.
    ``face_normals`` are area weighted; in 1D they are unit tangents and the
    face "area" is one.
    """

    dim: int
    index: int
    nodes: np.ndarray
    cell_nodes: np.ndarray
    face_nodes: np.ndarray
    cell_faces: sps.csr_matrix
    face_centers: np.ndarray
    face_normals: np.ndarray
    face_areas: np.ndarray
    cell_centers: np.ndarray
    cell_volumes: np.ndarray
    face_kind: np.ndarray
    face_side: np.ndarray
    fracture_id: int = -1
    tangents: np.ndarray | None = None  # 1D: unit tangent per cell
    normals: np.ndarray | None = None  # 1D: unit reference normal per cell
    parent_nodes: np.ndarray | None = None  # 1D/0D: node ids in the 2D grid

    @property
    def key(self) -> tuple[int, int]:
        return (self.dim, self.index)

    @property
    def name(self) -> str:
        return f"sd_{self.dim}_{self.index}"

    @property
    def num_cells(self) -> int:
        return self.cell_centers.shape[0]

    @property
    def num_faces(self) -> int:
        return self.face_centers.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    def face_cells(self) -> np.ndarray:
        """(num_faces, 2) array of adjacent cells; -1 pads boundary faces.

        Column 0 holds the cell the normal points out of.
        """
        out = -np.ones((self.num_faces, 2), dtype=int)
        cf = self.cell_faces.tocoo()
        for f, c, s in zip(cf.row, cf.col, cf.data):
            out[f, 0 if s > 0 else 1] = c
        return out

    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_kind != INTERIOR)

    def external_faces(self, side: str | None = None) -> np.ndarray:
        mask = self.face_kind == EXTERNAL
        if side is not None:
            mask &= self.face_side == side
        return np.flatnonzero(mask)

    def cell_diameter(self) -> float:
        if self.dim == 0:
            return 0.0
        return float(np.sqrt(self.cell_volumes.mean() * (2.0 if self.dim == 2 else 1.0)))


@dataclass
class Interface:
    """Two-sided interface between a higher and a lower dimensional subdomain.

    Interface cells pair one face of the higher subdomain with one cell of the
    lower. For matrix-fracture interfaces cells are ordered all plus-side
    cells first, then all minus-side cells, each in fracture cell order.
    """

    key: tuple
    dim: int
    primary_faces: np.ndarray
    secondary_cells: np.ndarray
    side: np.ndarray
    areas: np.ndarray
    num_primary_faces: int
    num_secondary_cells: int

    @property
    def num_cells(self) -> int:
        return self.primary_faces.size

    @property
    def name(self) -> str:
        (dh, ih), (dl, il) = self.key
        return f"intf_{dh}_{ih}_{dl}_{il}"

    def _sel(self, cols, ncols) -> sps.csr_matrix:
        n = self.num_cells
        return sps.csr_matrix((np.ones(n), (np.arange(n), cols)), shape=(n, ncols))

    @cached_property
    def primary_to_mortar(self) -> sps.csr_matrix:
        return self._sel(self.primary_faces, self.num_primary_faces)

    @cached_property
    def mortar_to_primary(self) -> sps.csr_matrix:
        return self.primary_to_mortar.T.tocsr()

    @cached_property
    def secondary_to_mortar(self) -> sps.csr_matrix:
        return self._sel(self.secondary_cells, self.num_secondary_cells)

    @cached_property
    def mortar_to_secondary_int(self) -> sps.csr_matrix:
        """Sums interface values onto lower cells (extensive quantities)."""
        return self.secondary_to_mortar.T.tocsr()

    @cached_property
    def mortar_to_secondary_avg(self) -> sps.csr_matrix:
        m = self.mortar_to_secondary_int
        counts = np.asarray(m.sum(axis=1)).ravel()
        counts[counts == 0] = 1.0
        return sps.csr_matrix(sps.diags(1.0 / counts) @ m)

    def side_cells(self, side: int) -> np.ndarray:
        return np.flatnonzero(self.side == side)

    def sided_secondary_to_mortar(self, side: int) -> sps.csr_matrix:
        rows = self.side_cells(side)
        return self.secondary_to_mortar[rows]

    def sided_mortar_to_secondary(self, side: int) -> sps.csr_matrix:
        return self.sided_secondary_to_mortar(side).T.tocsr()


@dataclass
class MixedDimGrid:
    domain: tuple
    subdomains: dict
    interfaces: dict
    order: list = field(default_factory=list)
    interface_order: list = field(default_factory=list)

    @property
    def matrix(self) -> SubdomainGrid:
        return self.subdomains[(2, 0)]

    def subdomain_list(self, dim: int | None = None) -> list[SubdomainGrid]:
        return [self.subdomains[k] for k in self.order if dim is None or k[0] == dim]

    def interface_list(self, dim: int | None = None) -> list[Interface]:
        return [
            self.interfaces[k] for k in self.interface_order if dim is None or self.interfaces[k].dim == dim
        ]

    @property
    def fractures(self) -> list[SubdomainGrid]:
        return self.subdomain_list(1)

    @property
    def intersections(self) -> list[SubdomainGrid]:
        return self.subdomain_list(0)

    def fracture_interface(self, sd: SubdomainGrid) -> Interface:
        return self.interfaces[((2, 0), sd.key)]

    def interfaces_of_lower(self, sd: SubdomainGrid) -> list[Interface]:
        return [i for i in self.interface_list() if i.key[1] == sd.key]

    def interfaces_of_higher(self, sd: SubdomainGrid) -> list[Interface]:
        return [i for i in self.interface_list() if i.key[0] == sd.key]

    @property
    def characteristic_size(self) -> float:
        return self.matrix.cell_diameter()

    def fracture_ids(self) -> list[int]:
        return sorted({sd.fracture_id for sd in self.fractures})


# ---------------------------------------------------------------------------
# Triangle grid construction


def _side_tags(centers: np.ndarray, domain, tol: float) -> np.ndarray:
    xmin, ymin, xmax, ymax = domain
    out = np.full(centers.shape[0], "", dtype=object)
    out[np.abs(centers[:, 0] - xmin) < tol] = "left"
    out[np.abs(centers[:, 0] - xmax) < tol] = "right"
    out[np.abs(centers[:, 1] - ymin) < tol] = "bottom"
    out[np.abs(centers[:, 1] - ymax) < tol] = "top"
    return out


def _matrix_grid(nodes, tris, frac_faces_pairs, domain):
    """Build the slit 2D grid.

    Returns the grid and, for every fracture edge (as a sorted node pair), the
    two face indices carrying it after duplication.
    """
    nodes = np.asarray(nodes, dtype=float)
    tris = np.asarray(tris, dtype=int).copy()
    x = nodes[tris]
    area2 = (x[:, 1, 0] - x[:, 0, 0]) * (x[:, 2, 1] - x[:, 0, 1]) - (
        x[:, 2, 0] - x[:, 0, 0]
    ) * (x[:, 1, 1] - x[:, 0, 1])
    scale = np.max(np.ptp(nodes, axis=0)) ** 2
    if np.any(np.abs(area2) <= 1e-14 * scale):
        raise DegenerateGeometry("triangle with zero area")
    flip = area2 < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    area2 = np.abs(area2)

    nc = tris.shape[0]
    edges = np.sort(np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    face_nodes, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    cell_of_edge = np.tile(np.arange(nc), 3)

    cell_centers = nodes[tris].mean(axis=1)
    cell_volumes = 0.5 * area2

    # face -> list of cells
    fc: list[list[int]] = [[] for _ in range(face_nodes.shape[0])]
    for e, f in enumerate(inv):
        fc[f].append(cell_of_edge[e])
    if any(len(c) > 2 for c in fc):
        raise NonConformingMesh("edge shared by more than two triangles")

    edge_lookup = {tuple(fn): i for i, fn in enumerate(face_nodes)}
    frac_face_ids = []
    for pair in frac_faces_pairs:
        key = tuple(sorted(pair))
        if key not in edge_lookup:
            raise NonConformingMesh(f"fracture edge {key} is not a triangle edge")
        frac_face_ids.append(edge_lookup[key])

    face_nodes = [list(fn) for fn in face_nodes]
    kind = [INTERIOR if len(c) == 2 else EXTERNAL for c in fc]
    duplicates = {}
    for pair, f in zip(frac_faces_pairs, frac_face_ids):
        if len(fc[f]) != 2:
            raise GeometryError("fracture edges on the domain boundary are not supported")
        c1, c2 = fc[f]
        new = len(face_nodes)
        face_nodes.append(list(face_nodes[f]))
        fc.append([c2])
        fc[f] = [c1]
        kind[f] = FRACTURE
        kind.append(FRACTURE)
        duplicates[tuple(sorted(pair))] = (f, new)

    face_nodes = np.array(face_nodes, dtype=int)
    kind = np.array(kind, dtype=int)
    nf = face_nodes.shape[0]
    xa, xb = nodes[face_nodes[:, 0]], nodes[face_nodes[:, 1]]
    face_centers = 0.5 * (xa + xb)
    t = xb - xa
    normals = np.column_stack([t[:, 1], -t[:, 0]])

    rows, cols, vals = [], [], []
    for f in range(nf):
        for c in fc[f]:
            s = np.sign((face_centers[f] - cell_centers[c]) @ normals[f])
            if len(fc[f]) == 1 and s < 0:
                face_nodes[f] = face_nodes[f][::-1]
                normals[f] = -normals[f]
                s = 1.0
            rows.append(f)
            cols.append(c)
            vals.append(s)
        if len(fc[f]) == 2 and vals[-1] == vals[-2]:
            raise OrientationError(f"cells {fc[f][0]} and {fc[f][1]} overlap across face {f} (folded mesh)")
    cell_faces = sps.csr_matrix((vals, (rows, cols)), shape=(nf, nc))
    tol = 1e-9 * np.sqrt(scale)
    side = _side_tags(face_centers, domain, tol)
    side[kind != EXTERNAL] = ""
    grid = SubdomainGrid(
        dim=2,
        index=0,
        nodes=nodes,
        cell_nodes=tris,
        face_nodes=face_nodes,
        cell_faces=cell_faces,
        face_centers=face_centers,
        face_normals=normals,
        face_areas=np.linalg.norm(normals, axis=1),
        cell_centers=cell_centers,
        cell_volumes=cell_volumes,
        face_kind=kind,
        face_side=side,
    )
    return grid, duplicates


def _branches(edge_fid: dict, coords: np.ndarray):
    """Split fracture edges into branches between special nodes.

    Returns ``(branches, intersections)`` where each branch is
    ``(fracture_id, [node chain])`` and intersections is a sorted node list.
    """
    adj: dict[int, list[tuple[int, int]]] = {}
    for (a, b), fid in edge_fid.items():
        adj.setdefault(a, []).append((b, fid))
        adj.setdefault(b, []).append((a, fid))
    key = lambda n: (coords[n][0], coords[n][1])

    def special(n):
        nb = adj[n]
        return len(nb) != 2 or nb[0][1] != nb[1][1]

    intersections = sorted(
        (n for n, nb in adj.items() if len(nb) >= 3 or (len(nb) == 2 and nb[0][1] != nb[1][1])),
        key=key,
    )
    visited: set = set()
    branches = []
    for start in sorted((n for n in adj if special(n)), key=key):
        for nbr, fid in sorted(adj[start], key=lambda t: key(t[0])):
            e = tuple(sorted((start, nbr)))
            if e in visited:
                continue
            chain = [start, nbr]
            visited.add(e)
            while not special(chain[-1]):
                cur, prev = chain[-1], chain[-2]
                nxt = [m for m, _ in adj[cur] if m != prev][0]
                visited.add(tuple(sorted((cur, nxt))))
                chain.append(nxt)
            if key(chain[0]) > key(chain[-1]):
                chain = chain[::-1]
            branches.append((fid, chain))
    if len(visited) != len(edge_fid):
        raise GeometryError("closed fracture loops without intersections are not supported")
    branches.sort(key=lambda b: (b[0], key(b[1][0]), key(b[1][1])))
    return branches, intersections


def _fracture_grid(index, fid, chain, coords, intersections, on_boundary):
    pts = coords[chain]
    k = len(chain) - 1
    seg = pts[1:] - pts[:-1]
    lengths = np.linalg.norm(seg, axis=1)
    tang = seg / lengths[:, None]
    normals = np.column_stack([-tang[:, 1], tang[:, 0]])
    face_normals = np.zeros((k + 1, 2))
    face_normals[0] = -tang[0]
    face_normals[-1] = tang[-1]
    for i in range(1, k):
        v = tang[i - 1] + tang[i]
        face_normals[i] = v / np.linalg.norm(v)
    rows = [0]
    cols = [0]
    vals = [1.0]
    for i in range(1, k):
        rows += [i, i]
        cols += [i - 1, i]
        vals += [1.0, -1.0]
    rows.append(k)
    cols.append(k - 1)
    vals.append(1.0)
    cell_faces = sps.csr_matrix((vals, (rows, cols)), shape=(k + 1, k))
    kind = np.full(k + 1, INTERIOR)
    for f, n in ((0, chain[0]), (k, chain[-1])):
        if n in intersections:
            kind[f] = INTERSECTION
        elif on_boundary(n):
            kind[f] = EXTERNAL
        else:
            kind[f] = TIP
    return SubdomainGrid(
        dim=1,
        index=index,
        nodes=pts.copy(),
        cell_nodes=np.column_stack([np.arange(k), np.arange(1, k + 1)]),
        face_nodes=np.arange(k + 1)[:, None],
        cell_faces=cell_faces,
        face_centers=pts.copy(),
        face_normals=face_normals,
        face_areas=np.ones(k + 1),
        cell_centers=0.5 * (pts[1:] + pts[:-1]),
        cell_volumes=lengths,
        face_kind=kind,
        face_side=np.full(k + 1, "", dtype=object),
        fracture_id=int(fid),
        tangents=tang,
        normals=normals,
        parent_nodes=np.asarray(chain),
    )


def _point_grid(index, node, coords):
    return SubdomainGrid(
        dim=0,
        index=index,
        nodes=coords[[node]].copy(),
        cell_nodes=np.zeros((1, 1), dtype=int),
        face_nodes=np.zeros((0, 1), dtype=int),
        cell_faces=sps.csr_matrix((0, 1)),
        face_centers=np.zeros((0, 2)),
        face_normals=np.zeros((0, 2)),
        face_areas=np.zeros(0),
        cell_centers=coords[[node]].copy(),
        cell_volumes=np.ones(1),
        face_kind=np.zeros(0, dtype=int),
        face_side=np.zeros(0, dtype=object),
        parent_nodes=np.array([node]),
    )


def build_from_triangles(nodes, tris, fracture_edges: dict | None = None, domain=None) -> MixedDimGrid:
    """Assemble a MixedDimGrid from a conforming triangulation.

    ``fracture_edges`` maps node pairs to an integer fracture id.
    """
    nodes = np.asarray(nodes, dtype=float)
    if domain is None:
        domain = (*nodes.min(axis=0), *nodes.max(axis=0))
    fracture_edges = {tuple(sorted(map(int, k))): int(v) for k, v in (fracture_edges or {}).items()}
    matrix, duplicates = _matrix_grid(nodes, tris, list(fracture_edges), domain)

    tol = 1e-9 * max(domain[2] - domain[0], domain[3] - domain[1])

    def on_boundary(n):
        x, y = nodes[n]
        return (
            abs(x - domain[0]) < tol
            or abs(x - domain[2]) < tol
            or abs(y - domain[1]) < tol
            or abs(y - domain[3]) < tol
        )

    subdomains = {(2, 0): matrix}
    interfaces = {}
    if fracture_edges:
        branches, inter_nodes = _branches(fracture_edges, nodes)
    else:
        branches, inter_nodes = [], []
    inter_set = set(inter_nodes)
    points = {n: _point_grid(i, n, nodes) for i, n in enumerate(inter_nodes)}
    for i, (fid, chain) in enumerate(branches):
        g = _fracture_grid(i, fid, chain, nodes, inter_set, on_boundary)
        subdomains[g.key] = g
        plus, minus = [], []
        for c in range(g.num_cells):
            f1, f2 = duplicates[tuple(sorted((chain[c], chain[c + 1])))]
            s1 = matrix.face_normals[f1] @ g.normals[c]
            s2 = matrix.face_normals[f2] @ g.normals[c]
            if s1 > 0 > s2:
                plus.append(f1)
                minus.append(f2)
            elif s2 > 0 > s1:
                plus.append(f2)
                minus.append(f1)
            else:
                raise OrientationError(f"fracture {i}: cell {c} sides cannot be separated")
        faces = np.array(plus + minus)
        intf = Interface(
            key=((2, 0), g.key),
            dim=1,
            primary_faces=faces,
            secondary_cells=np.concatenate([np.arange(g.num_cells)] * 2),
            side=np.concatenate([np.ones(g.num_cells, int), -np.ones(g.num_cells, int)]),
            areas=matrix.face_areas[faces],
            num_primary_faces=matrix.num_faces,
            num_secondary_cells=g.num_cells,
        )
        interfaces[intf.key] = intf
    for n, pg in points.items():
        subdomains[pg.key] = pg
    for g in [subdomains[k] for k in sorted(k for k in subdomains if k[0] == 1)]:
        for f, n in ((0, g.parent_nodes[0]), (g.num_faces - 1, g.parent_nodes[-1])):
            if g.face_kind[f] != INTERSECTION:
                continue
            pg = points[n]
            key = (g.key, pg.key)
            if key in interfaces:
                prev = interfaces[key]
                faces = np.append(prev.primary_faces, f)
            else:
                faces = np.array([f])
            interfaces[key] = Interface(
                key=key,
                dim=0,
                primary_faces=faces,
                secondary_cells=np.zeros(faces.size, dtype=int),
                side=np.ones(faces.size, dtype=int),
                areas=np.ones(faces.size),
                num_primary_faces=g.num_faces,
                num_secondary_cells=1,
            )
    order = sorted(subdomains, key=lambda k: (-k[0], k[1]))
    interface_order = sorted(interfaces, key=lambda k: (-k[0][0], k[0][1], -k[1][0], k[1][1]))
    return MixedDimGrid(
        domain=tuple(map(float, domain)),
        subdomains=subdomains,
        interfaces=interfaces,
        order=order,
        interface_order=interface_order,
    )


def build_interfaces(grid: MixedDimGrid) -> MixedDimGrid:
    """Rebuild the interface set of ``grid`` from its subdomains.

    Interfaces are created together with the subdomains by the builders; this
    entry point re-derives them (and re-checks side orientation), which is
    useful after a grid has been modified by hand.
    """
    matrix = grid.matrix
    tris = matrix.cell_nodes
    edges = {}
    for sd in grid.fractures:
        for c in range(sd.num_cells):
            edges[(int(sd.parent_nodes[c]), int(sd.parent_nodes[c + 1]))] = sd.fracture_id
    # Undo the slit: rebuild from scratch on the same triangulation.
    return build_from_triangles(matrix.nodes, tris, edges, grid.domain)


# ---------------------------------------------------------------------------
# Structured mesher


def build_structured(
    domain_box,
    resolution,
    network: FractureNetwork | None = None,
    perturbation: float = 0.0,
    seed: int = 0,
) -> MixedDimGrid:
    """Triangulated ``nx x ny`` lattice with fractures along lattice edges.

    Each rectangle is split into two triangles along its ``/`` diagonal unless
    a fracture needs the ``\\`` diagonal. ``perturbation`` jitters nodes that
    lie neither on the boundary nor on a fracture by up to that fraction of a
    cell size.
    """
    xmin, ymin, xmax, ymax = map(float, domain_box)
    nx, ny = map(int, resolution)
    if nx < 1 or ny < 1:
        raise DegenerateGeometry("resolution must be positive")
    hx, hy = (xmax - xmin) / nx, (ymax - ymin) / ny
    nid = lambda i, j: j * (nx + 1) + i
    segments = network.segments if network is not None else ()
    if network is not None:
        FractureNetwork(segments, (xmin, ymin, xmax, ymax))

    diag = np.zeros((nx, ny), dtype=int)  # 0: unset, 1: '/', -1: '\'
    edges: dict[tuple[int, int], int] = {}
    for k, (a, b) in enumerate(segments):
        ij = []
        for x, y in (a, b):
            fi, fj = (x - xmin) / hx, (y - ymin) / hy
            i, j = int(round(fi)), int(round(fj))
            if np.hypot((fi - i) * hx, (fj - j) * hy) > 0.5 * np.hypot(hx, hy) + 1e-12:
                raise SegmentNotRepresentable(f"segment {k}: endpoint not snappable")
            ij.append((i, j))
        (i0, j0), (i1, j1) = ij
        di, dj = i1 - i0, j1 - j0
        if di == 0 and dj == 0:
            raise DegenerateGeometry(f"segment {k} collapses to a point on the lattice")
        if not (di == 0 or dj == 0 or abs(di) == abs(dj)):
            raise SegmentNotRepresentable(f"segment {k} is not lattice aligned")
        n = max(abs(di), abs(dj))
        si, sj = di // n, dj // n
        for s in range(n):
            i, j = i0 + s * si, j0 + s * sj
            if si != 0 and sj != 0:
                ri, rj = min(i, i + si), min(j, j + sj)
                want = 1 if si == sj else -1
                if diag[ri, rj] not in (0, want):
                    raise SegmentNotRepresentable(f"segment {k} crosses another diagonal")
                diag[ri, rj] = want
            e = tuple(sorted((nid(i, j), nid(i + si, j + sj))))
            if e in edges and edges[e] != k:
                raise DegenerateGeometry(f"segment {k} overlaps segment {edges[e]}")
            edges[e] = k

    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    nodes = np.column_stack([xmin + ii.ravel() * hx, ymin + jj.ravel() * hy])
    tris = []
    for j in range(ny):
        for i in range(nx):
            ll, lr, ur, ul = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            if diag[i, j] >= 0:
                tris += [(ll, lr, ur), (ll, ur, ul)]
            else:
                tris += [(ll, lr, ul), (lr, ur, ul)]
    if perturbation > 0:
        rng = np.random.default_rng(seed)
        fixed = np.zeros(nodes.shape[0], dtype=bool)
        fixed[[nid(i, j) for i in range(nx + 1) for j in (0, ny)]] = True
        fixed[[nid(i, j) for i in (0, nx) for j in range(ny + 1)]] = True
        for e in edges:
            fixed[list(e)] = True
        jitter = rng.uniform(-0.5, 0.5, size=nodes.shape) * perturbation * np.array([hx, hy])
        nodes = nodes + np.where(fixed[:, None], 0.0, jitter)
    return build_from_triangles(nodes, np.array(tris), edges, (xmin, ymin, xmax, ymax))


# ---------------------------------------------------------------------------
# MSH 2.2 import


def _section(lines, name):
    try:
        start = lines.index(f"${name}")
        end = lines.index(f"$End{name}", start)
    except ValueError:
        raise ParseError(f"missing ${name} section") from None
    return start, lines[start + 1 : end]


def import_msh(text: str, fracture_tags=()) -> MixedDimGrid:
    """Read an ASCII MSH 2.2 triangulation; 1D elements with a physical tag in
    ``fracture_tags`` become fractures."""
    lines = [ln.strip() for ln in text.splitlines()]
    _, fmt = _section(lines, "MeshFormat")
    if not fmt or not fmt[0].split() or not fmt[0].split()[0].startswith("2"):
        raise ParseError("only MSH format 2.x is supported")
    if len(fmt[0].split()) > 1 and fmt[0].split()[1] != "0":
        raise ParseError("binary MSH files are not supported")
    start, block = _section(lines, "Nodes")
    try:
        n = int(block[0])
        ids, coords = [], []
        for k in range(n):
            parts = block[1 + k].split()
            ids.append(int(parts[0]))
            coords.append((float(parts[1]), float(parts[2])))
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed $Nodes section ({exc})", line=start + 2 + len(ids)) from None
    index_of = {nid: k for k, nid in enumerate(ids)}
    start, block = _section(lines, "Elements")
    tris, lines_tagged = [], []
    try:
        m = int(block[0])
        for k in range(m):
            parts = [int(v) for v in block[1 + k].split()]
            etype, ntags = parts[1], parts[2]
            tags = parts[3 : 3 + ntags]
            conn = [index_of[v] for v in parts[3 + ntags :]]
            if etype == 2:
                if len(conn) != 3:
                    raise ValueError("triangle needs 3 nodes")
                tris.append(conn)
            elif etype == 1:
                if len(conn) != 2:
                    raise ValueError("line needs 2 nodes")
                if tags and tags[0] in set(fracture_tags):
                    lines_tagged.append((conn, tags[0]))
            elif etype == 15:
                continue
            else:
                raise ValueError(f"unsupported element type {etype}")
    except (IndexError, ValueError, KeyError) as exc:
        raise ParseError(f"malformed $Elements section ({exc})", line=start + 3 + k) from None
    if not tris:
        raise ParseError("mesh contains no triangles")
    coords = np.array(coords)
    used = np.unique(np.array(tris))
    renum = -np.ones(coords.shape[0], dtype=int)
    renum[used] = np.arange(used.size)
    tri_arr = renum[np.array(tris)]
    tag_ids = {t: i for i, t in enumerate(sorted(set(fracture_tags)))}
    edges = {}
    tri_edges = {tuple(sorted(e)) for t in tri_arr for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))}
    for conn, tag in lines_tagged:
        a, b = renum[conn[0]], renum[conn[1]]
        e = tuple(sorted((int(a), int(b))))
        if a < 0 or b < 0 or e not in tri_edges:
            raise NonConformingMesh(f"tagged line {conn} does not coincide with a triangle edge")
        edges[e] = tag_ids[tag]
    pts = coords[used]
    return build_from_triangles(pts, tri_arr, edges)
