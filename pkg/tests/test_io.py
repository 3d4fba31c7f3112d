import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fracthm.errors import IoError, ParseError, ValidationError
from fracthm.io import (
    CSV_HEADER,
    dump_scenario,
    load_scenario,
    parse_scenario,
    read_diagnostics,
    read_fracture_timeseries,
    write_diagnostics,
    write_fracture_timeseries,
    write_vtk_snapshot,
)
from fracthm.mdgrid import FractureNetwork, build_structured
from fracthm.fvm import MaterialParams
from fracthm.physics import Model
from fracthm.solver import StepRecord, fracture_diagnostics
from fracthm.verify import scenario_path

MINIMAL = """
[geometry]
domain = [0, 0, 2, 1]
resolution = [4, 2]

[materials]
friction_coefficient = 0.6

[[phases]]
start = 0
end = 10
dt = 5
"""


def test_minimal_document_gets_defaults():
    sc = parse_scenario(MINIMAL)
    assert sc.geometry.domain == (0.0, 0.0, 2.0, 1.0)
    assert sc.materials.friction_coefficient == 0.6
    assert sc.materials.shear_modulus == MaterialParams().shear_modulus
    assert len(sc.phases) == 1 and sc.phases[0].name == "phase1"
    assert sc.solver.tolerance == 1e-8
    assert sc.output.every == 1
    echoed = dump_scenario(sc)
    assert "shear_modulus" in echoed and "tolerance" in echoed


def test_missing_friction_coefficient_names_field():
    text = MINIMAL.replace("friction_coefficient = 0.6", "porosity = 0.1")
    with pytest.raises(ValidationError) as err:
        parse_scenario(text)
    assert err.value.field == "materials.friction_coefficient"


def test_bundled_demo_phase_times():
    sc = load_scenario(scenario_path("demo"))
    times = [sc.phases[0].start] + [ph.end for ph in sc.phases]
    assert times == [-10000.0, 0.0, 0.02, 2.5, 5.0]
    assert len(sc.geometry.fractures) == 7


@pytest.mark.parametrize("name", ["demo", "terzaghi", "conduction", "single_fracture"])
def test_bundled_scenarios_round_trip(name):
    sc = load_scenario(scenario_path(name))
    assert parse_scenario(dump_scenario(sc)) == sc


def test_syntax_error_reports_line():
    with pytest.raises(ParseError) as err:
        parse_scenario("[geometry]\nresolution = \n[materials]\n")
    assert err.value.line == 2
    with pytest.raises(ParseError) as err:
        parse_scenario("[geometry]\nresolution = [4, 4\n")
    assert err.value.line is not None


def test_overlapping_phases():
    text = MINIMAL + "\n[[phases]]\nstart = 5\nend = 20\ndt = 5\n"
    with pytest.raises(ValidationError) as err:
        parse_scenario(text)
    assert err.value.field == "phases[1].start"


@pytest.mark.parametrize(
    "old, new, field",
    [
        ("friction_coefficient = 0.6", "friction_coefficient = 0.6\npermeability = -1.0", "permeability"),
        ("resolution = [4, 2]", "resolution = [4, 2]\ncolour = 3", "geometry"),
        ("dt = 5", "dt = 0", "phases[0].dt"),
        ("dt = 5", "dt = 5\n[phases.flow.front]\nkind = \"dirichlet\"", "phases[0].flow.front"),
    ],
)
def test_invalid_values_name_the_field(old, new, field):
    with pytest.raises(ValidationError) as err:
        parse_scenario(MINIMAL.replace(old, new))
    assert err.value.field == field


def test_young_and_poisson_inputs():
    sc = parse_scenario(MINIMAL.replace("friction_coefficient = 0.6", "friction_coefficient = 0.6\nyoung_modulus = 40e9\npoisson_ratio = 0.25"))
    assert sc.materials.shear_modulus == pytest.approx(16e9)
    assert sc.materials.lame_lambda == pytest.approx(16e9)


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        load_scenario(tmp_path / "nope.toml")


positive = st.floats(1e-3, 1e3, allow_nan=False, allow_infinity=False)
sides = st.sampled_from(["left", "right", "bottom", "top"])
kinds = st.sampled_from(["dirichlet", "neumann"])
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def documents(draw):
    nphase = draw(st.integers(1, 3))
    t = draw(st.floats(-100, 100, allow_nan=False))
    lines = [
        f'name = "{draw(st.sampled_from(["a", "demo", "run_1"]))}"',
        "[geometry]",
        f"resolution = [{draw(st.integers(1, 30))}, {draw(st.integers(1, 30))}]",
        f"perturbation = {draw(st.floats(0, 0.9))!r}",
        f"seed = {draw(st.integers(0, 1000))}",
        "[materials]",
        f"friction_coefficient = {draw(positive)!r}",
        f"porosity = {draw(st.floats(0, 0.5))!r}",
        f"shear_modulus = {draw(positive)!r}",
        "[solver]",
        f"tolerance = {draw(st.floats(1e-12, 1e-4))!r}",
        f"max_iterations = {draw(st.integers(1, 99))}",
    ]
    for k in range(nphase):
        dt = draw(positive)
        end = t + draw(positive)
        lines += ["[[phases]]", f"start = {t!r}", f"end = {end!r}", f"dt = {dt!r}"]
        for side in draw(st.sets(sides, max_size=2)):
            lines += [f"[phases.heat.{side}]", f'kind = "{draw(kinds)}"', f"value = {draw(finite)!r}"]
        for side in draw(st.sets(sides, max_size=2)):
            lines += [f"[phases.mechanics.{side}]", f'kind = ["{draw(kinds)}", "{draw(kinds)}"]', f"value = [{draw(finite)!r}, {draw(finite)!r}]"]
        t = end
    return "\n".join(lines) + "\n"


@given(documents())
def test_dump_parse_round_trip(text):
    sc = parse_scenario(text)
    again = parse_scenario(dump_scenario(sc))
    assert again == sc
    assert dump_scenario(again) == dump_scenario(sc)


# -- output products -----------------------------------------------------------


def read_vtk(path):
    lines = path.read_text().splitlines()
    arrays, k = {}, 0
    while k < len(lines):
        parts = lines[k].split()
        if parts and parts[0] == "CELL_DATA":
            nc = int(parts[1])
        if parts and parts[0] == "SCALARS":
            arrays[parts[1]] = np.array([float(v) for v in lines[k + 2 : k + 2 + nc]])
            k += 2 + nc
            continue
        if parts and parts[0] == "VECTORS":
            arrays[parts[1]] = np.array([[float(v) for v in ln.split()] for ln in lines[k + 1 : k + 1 + nc]])
            k += 1 + nc
            continue
        k += 1
    return lines, arrays


def test_vtk_of_zero_state(tmp_path):
    m = Model(build_structured((0, 0, 1, 1), (2, 2)), MaterialParams())
    st_ = m.initial_state()
    (path,) = write_vtk_snapshot(m, st_, tmp_path, "zero", 0)
    assert path.name == "zero_2_0_00000.vtk"
    lines, arrays = read_vtk(path)
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert "DATASET UNSTRUCTURED_GRID" in lines
    assert "POINTS 9 double" in lines and "CELLS 8 32" in lines
    for name in ("p", "u_magnitude", "u"):
        assert not arrays[name].any()
    assert np.allclose(arrays["T"], m.params.reference_temperature)


def fracture_model():
    segs = [((0.25, 0.5), (0.75, 0.5))]
    return Model(build_structured((0, 0, 1, 1), (4, 4), FractureNetwork(segs, (0, 0, 1, 1))), MaterialParams())


def opened_state(m, openings):
    (sd,) = m.grid.fractures
    intf = m.grid.fracture_interface(sd)
    st_ = m.initial_state()
    u = st_[intf.key, "u_j"].reshape(-1, 2)
    for k in range(intf.num_cells):
        c = intf.secondary_cells[k]
        if intf.side[k] == 1:
            u[k] = -openings[c] * sd.normals[c] + 1e-4 * (c + 1) * sd.tangents[c]
    st_[intf.key, "u_j"] = u.ravel()
    st_.regimes = {sd.key: np.array([0, 2])}
    return st_


def test_vtk_regime_codes_match_diagnostics(tmp_path):
    m = fracture_model()
    st_ = opened_state(m, [1e-3, 2e-3])
    paths = write_vtk_snapshot(m, st_, tmp_path, "one", 3)
    frac = next(p for p in paths if p.name.startswith("one_1_"))
    _, arrays = read_vtk(frac)
    (row,) = fracture_diagnostics(m, st_)
    codes = arrays["regime"].astype(int)
    assert [int(np.sum(codes == k)) for k in range(3)] == [row["open"], row["stick"], row["slide"]]
    assert np.allclose(arrays["aperture"], m.params.initial_aperture + np.array([1e-3, 2e-3]))


def record_for(m, st_, step=1):
    return StepRecord(step, 0.5, 0.5, "I", 3, 0, {"open": 1, "stick": 0, "slide": 1}, fracture_diagnostics(m, st_), 1e-15, 2e-15, "")


def test_csv_single_step_hand_computed_norms(tmp_path):
    m = fracture_model()
    st_ = opened_state(m, [1e-3, 2e-3])
    path = write_fracture_timeseries([record_for(m, st_)], tmp_path / "f.csv")
    text = path.read_text().splitlines()
    assert text[0] == ",".join(CSV_HEADER)
    assert len(text) == 2
    (row,) = read_fracture_timeseries(path)
    assert float(row["jump_n_norm"]) == pytest.approx(math.sqrt(1e-6 + 4e-6), rel=1e-12)
    assert float(row["jump_t_norm"]) == pytest.approx(math.sqrt(1e-8 + 4e-8), rel=1e-12)
    assert (row["open"], row["stick"], row["slide"], row["newton_iterations"]) == ("1", "0", "1", "3")


def test_outputs_are_byte_stable(tmp_path):
    m = fracture_model()
    st_ = opened_state(m, [1e-3, 2e-3])
    recs = [record_for(m, st_, 1), record_for(m, st_, 2)]
    a = write_fracture_timeseries(recs, tmp_path / "a.csv").read_bytes()
    b = write_fracture_timeseries(recs, tmp_path / "b.csv").read_bytes()
    assert a == b
    d1 = write_diagnostics(recs, tmp_path / "a.jsonl").read_bytes()
    d2 = write_diagnostics(recs, tmp_path / "b.jsonl").read_bytes()
    assert d1 == d2
    assert read_diagnostics(tmp_path / "a.jsonl") == recs
    v1 = write_vtk_snapshot(m, st_, tmp_path / "v1", "s", 1)
    v2 = write_vtk_snapshot(m, st_, tmp_path / "v2", "s", 1)
    assert [p.read_bytes() for p in v1] == [p.read_bytes() for p in v2]


def test_empty_timeseries_is_an_error(tmp_path):
    with pytest.raises(IoError):
        write_fracture_timeseries([], tmp_path / "x.csv")
