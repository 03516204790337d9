import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lensforge.lens import (
    C_LINE_NM,
    D_LINE_NM,
    F_LINE_NM,
    DispersionError,
    Glass,
    GlassCatalog,
    LensModelError,
    ParamRanges,
    ParamVector,
    SchemaEntry,
    default_catalog,
    denormalize,
    dispersion_coefficients,
    lens_from_dict,
    lens_to_dict,
    load_spec,
    normalize,
    parse_design_form,
    refractive_index,
    save_spec,
    schema_for_form,
    spec_from_dict,
    spec_to_dict,
)
from tests.conftest import triplet_spec


# ---------------------------------------------------------------------------
# Dispersion model
# ---------------------------------------------------------------------------

def test_d_line_index_is_exact():
    g = Glass(1.5168, 64.17)
    assert refractive_index(g, D_LINE_NM) == pytest.approx(1.5168, abs=1e-14)


def test_abbe_relation_is_exact():
    g = Glass(1.5168, 64.17)
    n_f = refractive_index(g, F_LINE_NM)
    n_c = refractive_index(g, C_LINE_NM)
    assert (g.n_d - 1) / (n_f - n_c) == pytest.approx(64.17, rel=1e-12)


def test_bk7_f_line_against_independent_solve():
    # Solve the 2x2 linear system for (A, B) directly: n(lam) = A + B/lam^2
    # constrained at the d line and by the F-C difference.
    n_d, v_d = 1.5168, 64.17
    lam_d, lam_f, lam_c = D_LINE_NM * 1e-3, F_LINE_NM * 1e-3, C_LINE_NM * 1e-3
    mat = np.array([[1.0, 1.0 / lam_d**2], [0.0, 1.0 / lam_f**2 - 1.0 / lam_c**2]])
    rhs = np.array([n_d, (n_d - 1.0) / v_d])
    a, b = np.linalg.solve(mat, rhs)
    expected_nf = a + b / lam_f**2
    assert refractive_index(Glass(n_d, v_d), F_LINE_NM) == pytest.approx(
        expected_nf, rel=1e-14
    )


def test_dispersion_coefficients_reproduce_glass():
    for n_d, v_d in [(1.5168, 64.17), (1.7552, 27.58), (1.62, 36.37)]:
        a, b = dispersion_coefficients(n_d, v_d)
        lam = np.array([F_LINE_NM, D_LINE_NM, C_LINE_NM]) * 1e-3
        n = a + b / lam**2
        assert n[1] == pytest.approx(n_d, rel=1e-12)
        assert (n_d - 1) / (n[0] - n[2]) == pytest.approx(v_d, rel=1e-12)


def test_index_strictly_decreasing_in_wavelength():
    g = Glass(1.6, 45.0)
    lams = np.linspace(400.0, 800.0, 40)
    n = refractive_index(g, lams)
    assert np.all(np.diff(n) < 0)


def test_degenerate_abbe_rejected():
    with pytest.raises(DispersionError):
        Glass(1.5, 0.0)
    with pytest.raises(DispersionError):
        dispersion_coefficients(1.5, 0.0)


def test_air_index_is_one():
    assert refractive_index(None, 550.0) == 1.0


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _schema():
    return schema_for_form("GAGASAGA", ParamRanges(), 16.0)


def test_normalize_curvature_midpoint_and_bounds():
    e = SchemaEntry("curvature", 0, -0.1, 0.1)
    span = e.hi - e.lo
    assert (0.0 - e.lo) / span == pytest.approx(0.5)
    assert (0.1 - e.lo) / span == pytest.approx(1.0)


def test_normalize_spacing_affine():
    # spacing 4.5 mm in [1, 15] -> 0.25
    assert (4.5 - 1.0) / (15.0 - 1.0) == pytest.approx(0.25)
    schema = schema_for_form(
        "GAGASAGA", ParamRanges(air_spacing=(1.0, 15.0)), 16.0
    )
    x = np.full(schema.n, 0.5)
    air_idx = next(
        k for k, e in enumerate(schema.entries)
        if e.role == "spacing" and e.kind == "air"
    )
    x[air_idx] = 0.25
    lens = denormalize(ParamVector(x, schema))
    back = normalize(lens, schema)
    assert back.values[air_idx] == pytest.approx(0.25, abs=1e-15)
    surf = schema.entries[air_idx].surface
    assert lens.surfaces[surf].thickness_after == pytest.approx(4.5)


def test_denormalize_midpoints():
    schema = _schema()
    lens = denormalize(ParamVector(np.full(schema.n, 0.5), schema))
    # symmetric curvature range -> zero curvature at 0.5
    for i, e in enumerate(schema.entries):
        if e.role == "curvature":
            assert lens.surfaces[e.surface].curvature == pytest.approx(0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_round_trip_identity(seed):
    schema = _schema()
    rng = np.random.default_rng(seed)
    x = ParamVector(rng.uniform(0, 1, schema.n), schema)
    back = normalize(denormalize(x), schema)
    np.testing.assert_allclose(back.values, x.values, atol=5e-16)
    assert back.clamped == ()


def test_out_of_range_clamped_and_flagged(triplet):
    schema = schema_for_form(
        "GAGASAGA",
        ParamRanges(curvature=(-0.01, 0.01), air_spacing=(1.0, 15.0),
                    glass_thickness=(1.0, 15.0), image_distance=(10.0, 50.0)),
        16.0,
    )
    pv = normalize(triplet, schema)
    assert pv.clamped   # triplet front curvature 1/26 exceeds 0.01
    assert np.all((pv.values >= 0) & (pv.values <= 1))


def test_shape_mismatch_raises(thick_singlet):
    schema = _schema()
    with pytest.raises(LensModelError):
        normalize(thick_singlet, schema)


# ---------------------------------------------------------------------------
# Design forms
# ---------------------------------------------------------------------------

def test_design_form_layout_counts():
    layout = parse_design_form("GAGASAGA")
    assert len(layout) == 7
    assert sum(s.is_stop for s in layout) == 1
    assert [s.is_stop for s in layout].index(True) == 4


@pytest.mark.parametrize("form", ["SAGAGAGA", "GASAGAGA", "GAGASAGA", "GAGAGASA"])
def test_stop_position_follows_form(form):
    layout = parse_design_form(form)
    schema = schema_for_form(form, ParamRanges(), 16.0)
    assert schema.num_elements == 3
    assert schema.n == 6 + 7 + 6


@pytest.mark.parametrize("form", ["", "GAGA", "GG A", "GGASA", "AGASA", "GASAGS", "GAGAS"])
def test_bad_forms_rejected(form):
    with pytest.raises(LensModelError):
        parse_design_form(form)


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

def test_default_catalog_valid():
    cat = default_catalog()
    assert len(cat.entries) > 10
    for g in cat.entries:
        assert g.n_d > 1 and g.v_d > 0


def test_catalog_nearest_weighted_metric():
    cat = GlassCatalog(
        entries=(Glass(1.5, 60.0, "a"), Glass(1.6, 40.0, "b")),
        alpha_n=100.0,
        alpha_v=0.0004,
    )
    probe = Glass(1.51, 45.0)
    # distances: a: 100*0.01^2 + 0.0004*15^2 = 0.1 ; b: 100*0.09^2 + 0.0004*25 = 0.82
    entry, dist = cat.nearest(probe)
    assert entry.name == "a"
    assert dist == pytest.approx(100 * 0.01**2 + 0.0004 * 15**2, rel=1e-12)


def test_empty_catalog_rejected():
    with pytest.raises(LensModelError):
        GlassCatalog(entries=())


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def test_lens_file_round_trip(triplet, tmp_path):
    d = lens_to_dict(triplet)
    back = lens_from_dict(json.loads(json.dumps(d)))
    assert back.design_form == triplet.design_form
    assert back.image_distance == triplet.image_distance
    assert len(back.surfaces) == len(triplet.surfaces)
    for a, b in zip(back.surfaces, triplet.surfaces):
        assert a.curvature == b.curvature
        assert a.is_stop == b.is_stop
        assert (a.material_after is None) == (b.material_after is None)


def test_spec_file_round_trip(tmp_path):
    spec = triplet_spec()
    path = tmp_path / "spec.json"
    save_spec(spec, path)
    back = load_spec(path)
    assert back.hfov_deg == spec.hfov_deg
    assert back.efl_range == spec.efl_range
    assert back.constraints == spec.constraints
    assert back.search == spec.search
    assert back.working_distances == spec.working_distances


def test_spec_infinity_round_trip():
    spec = triplet_spec()
    d = spec_to_dict(spec)
    assert d["working_distances_mm"] == ["inf"] or d["working_distances_mm"][0] >= 1e10
    back = spec_from_dict(d)
    assert back.working_distances[0] >= 1e8


def test_unknown_search_key_rejected():
    spec = triplet_spec()
    d = spec_to_dict(spec)
    d["search"]["no_such_knob"] = 1
    with pytest.raises(LensModelError):
        spec_from_dict(d)
