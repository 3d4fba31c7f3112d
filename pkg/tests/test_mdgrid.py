import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fracthm.errors import DegenerateGeometry, GeometryError, NonConformingMesh, ParseError, SegmentNotRepresentable
from fracthm.mdgrid import EXTERNAL, FRACTURE, FractureNetwork, build_structured, import_msh

from oracles import split_segments

UNIT = (0.0, 0.0, 1.0, 1.0)


def grid_with(segments, n=4, **kw):
    return build_structured(UNIT, (n, n), FractureNetwork(segments, UNIT), **kw)


def test_fracture_free_2x2():
    g = build_structured(UNIT, (2, 2))
    assert g.matrix.num_cells == 8
    assert len(g.subdomain_list()) == 1
    assert g.interface_list() == []
    assert np.isclose(g.matrix.cell_volumes.sum(), 1.0)


def test_single_horizontal_fracture_counts():
    g = grid_with([((0.25, 0.5), (0.75, 0.5))])
    (frac,) = g.fractures
    assert frac.num_cells == 2
    (intf,) = g.interface_list()
    assert np.count_nonzero(intf.side == 1) == 2
    assert np.count_nonzero(intf.side == -1) == 2
    assert np.count_nonzero(g.matrix.face_kind == FRACTURE) == 4
    assert g.intersections == []


def test_crossing_fractures_match_splitting_oracle():
    segs = [((0.0, 0.5), (1.0, 0.5)), ((0.5, 0.0), (0.5, 1.0))]
    branches, points = split_segments(segs)
    g = grid_with(segs)
    assert len(g.fractures) == branches == 4
    assert len(g.intersections) == len(points) == 1
    assert np.allclose(g.intersections[0].cell_centers[0], [0.5, 0.5])


@given(
    st.lists(
        st.tuples(st.integers(0, 8), st.integers(0, 8), st.sampled_from([(1, 0), (0, 1), (1, 1), (1, -1)]), st.integers(1, 4)),
        min_size=1,
        max_size=4,
    )
)
def test_random_lattice_networks_match_splitting_oracle(specs):
    h = 1.0 / 8
    segs = []
    for i, j, (di, dj), n in specs:
        i1, j1 = i + n * di, j + n * dj
        if not (0 <= i1 <= 8 and 0 <= j1 <= 8):
            continue
        segs.append(((i * h, j * h), (i1 * h, j1 * h)))
    try:
        g = grid_with(segs, n=8)
    except GeometryError:
        return
    branches, points = split_segments(segs)
    multi = 0
    for p in points:
        hits = sum(1 for a, b in segs if _on_segment(p, a, b))
        multi += hits >= 2
    assert len(g.intersections) == multi
    assert len(g.fractures) == branches
    # every fracture cell sits on a lattice edge shared by exactly two triangles
    for sd in g.fractures:
        assert np.all(sd.cell_volumes > 0)
    assert sum(sd.cell_volumes.sum() for sd in g.fractures) == pytest.approx(sum(np.hypot(b[0] - a[0], b[1] - a[1]) for a, b in segs))


def _on_segment(p, a, b):
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    px, py = float(p[0]), float(p[1])
    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    dot = (px - ax) * (bx - ax) + (py - ay) * (by - ay)
    return abs(cross) < 1e-12 and -1e-12 <= dot <= (bx - ax) ** 2 + (by - ay) ** 2 + 1e-12


def test_projection_round_trip_is_identity():
    g = grid_with([((0.25, 0.5), (0.75, 0.5))])
    for intf in g.interface_list():
        P = (intf.primary_to_mortar @ intf.mortar_to_primary).toarray()
        assert np.array_equal(P, np.eye(intf.num_cells))
        S = (intf.mortar_to_secondary_int @ intf.secondary_to_mortar).toarray()
        assert np.array_equal(S, 2.0 * np.eye(intf.num_secondary_cells))  # one mortar cell per side


def test_two_cell_fracture_selection_matrix_per_side():
    g = grid_with([((0.25, 0.5), (0.75, 0.5))])
    intf = g.interface_list()[0]
    for side in (1, -1):
        rows = intf.side_cells(side)
        Xi = intf.primary_to_mortar[rows].toarray()
        assert Xi.shape == (2, g.matrix.num_faces)
        assert np.array_equal(Xi.sum(axis=1), [1, 1])
        assert set(np.flatnonzero(Xi.sum(axis=0))) <= set(np.flatnonzero(g.matrix.face_kind == FRACTURE))


def test_cell_faces_are_closed():
    g = grid_with([((0.25, 0.5), (0.75, 0.5)), ((0.5, 0.25), (0.5, 0.75))], perturbation=0.3, seed=2)
    for sd in g.subdomain_list():
        if sd.dim == 0:
            continue
        total = sd.cell_faces.T @ sd.face_normals
        assert np.abs(total).max() < 1e-13


def test_structured_build_is_deterministic():
    a = grid_with([((0.25, 0.5), (0.75, 0.5))], perturbation=0.2, seed=7)
    b = grid_with([((0.25, 0.5), (0.75, 0.5))], perturbation=0.2, seed=7)
    assert np.array_equal(a.matrix.nodes, b.matrix.nodes)
    assert np.array_equal(a.matrix.cell_nodes, b.matrix.cell_nodes)


def test_external_sides_cover_boundary():
    g = build_structured(UNIT, (3, 5)).matrix
    sides = [g.external_faces(s) for s in ("left", "right", "bottom", "top")]
    assert [s.size for s in sides] == [5, 5, 3, 3]
    assert sum(s.size for s in sides) == np.count_nonzero(g.face_kind == EXTERNAL)


def test_off_lattice_segment_rejected():
    with pytest.raises(SegmentNotRepresentable):
        grid_with([((0.0, 0.0), (1.0, 0.5))])


def test_zero_length_segment_rejected():
    with pytest.raises(DegenerateGeometry):
        FractureNetwork([((0.3, 0.3), (0.3, 0.3))], UNIT)


def test_overlapping_segments_rejected():
    with pytest.raises(DegenerateGeometry):
        FractureNetwork([((0.0, 0.5), (0.6, 0.5)), ((0.4, 0.5), (1.0, 0.5))], UNIT)


MSH = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
{count}
1 2 2 0 1 1 2 3
2 2 2 0 1 1 3 4
{extra}$EndElements
"""


def msh(extra_lines=()):
    extra = "".join(line + "\n" for line in extra_lines)
    return MSH.format(count=2 + len(extra_lines), extra=extra)


def test_msh_fracture_free():
    g = import_msh(msh())
    assert g.matrix.num_cells == 2
    assert g.fractures == []


def test_msh_tagged_diagonal_is_one_cell_fracture():
    g = import_msh(msh(["3 1 2 7 0 1 3"]), fracture_tags=(7,))
    (frac,) = g.fractures
    assert frac.num_cells == 1
    assert frac.cell_volumes[0] == pytest.approx(np.sqrt(2.0))


def test_msh_untagged_lines_are_ignored():
    g = import_msh(msh(["3 1 2 7 0 1 3"]), fracture_tags=(8,))
    assert g.fractures == []


def test_msh_nonconforming_line():
    with pytest.raises(NonConformingMesh):
        import_msh(msh(["3 1 2 7 0 2 4"]), fracture_tags=(7,))


def test_msh_missing_section():
    with pytest.raises(ParseError):
        import_msh("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")


def test_msh_malformed_element_reports_line():
    text = msh().replace("2 2 2 0 1 1 3 4", "2 2 2 0 1 1 3")
    with pytest.raises(ParseError) as err:
        import_msh(text)
    assert err.value.line is not None


def test_folded_mesh_rejected():
    from fracthm.errors import OrientationError
    from fracthm.mdgrid import build_from_triangles

    # the fourth node sits inside the first triangle, so the second one folds over it
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.2, 0.2]])
    with pytest.raises(OrientationError):
        build_from_triangles(nodes, np.array([[0, 1, 2], [1, 2, 3]]))
