import math

import numpy as np
import pytest

from lensforge.lens import Glass, GlassCatalog
from lensforge.merit import (
    BatchEvaluator,
    EvalConfig,
    evaluate_lens,
    glass_variable_loss,
    lateral_chromatic_loss,
    linear_constraint_loss,
    quadratic_constraint_loss,
    spot_loss,
)
from lensforge.raytrace import sphere_sag
from tests.conftest import triplet_spec


# ---------------------------------------------------------------------------
# Spot loss
# ---------------------------------------------------------------------------

def test_spot_zero_when_all_rays_on_chief():
    x = np.full((1, 1, 5), 3.2)
    y = np.zeros((1, 1, 5))
    valid = np.ones((1, 1, 5), dtype=bool)
    assert spot_loss(x, y, valid, chief_x=np.array([[3.2]])) == 0.0


def test_spot_four_ray_hand_case():
    # rays at (chief +/- a, 0) and (chief, +/- a): every radius is a, RMS = a
    a = 0.25
    chief = 1.5
    x = np.array([[[chief + a, chief - a, chief, chief]]])
    y = np.array([[[0.0, 0.0, a, -a]]])
    valid = np.ones((1, 1, 4), dtype=bool)
    assert spot_loss(x, y, valid, np.array([[chief]])) == pytest.approx(a, rel=1e-12)


def test_spot_mean_over_fields():
    # two fields with per-field RMS r1, r2 -> (r1 + r2) / 2
    r1, r2 = 0.1, 0.3
    x = np.array([[[r1, -r1], [r2, -r2]]])   # (1 wavelength, 2 fields, 2 rays)
    y = np.zeros((1, 2, 2))
    valid = np.ones((1, 2, 2), dtype=bool)
    out = spot_loss(x, y, valid, np.zeros((1, 2)))
    assert out == pytest.approx((r1 + r2) / 2, rel=1e-12)


def test_spot_infeasible_marker():
    valid = np.zeros((1, 1, 3), dtype=bool)
    out = spot_loss(np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), valid, np.zeros((1, 1)))
    assert math.isnan(out)


# ---------------------------------------------------------------------------
# Lateral color
# ---------------------------------------------------------------------------

def test_lateral_color_single_wavelength_zero():
    assert lateral_chromatic_loss(np.array([[10.0, 11.0]])) == 0.0


def test_lateral_color_max_minus_min():
    chief = np.array([[10.00], [10.02], [10.05]])   # 3 wavelengths, 1 field
    assert lateral_chromatic_loss(chief) == pytest.approx(0.05, rel=1e-12)


def test_lateral_color_mean_over_fields():
    chief = np.array([[10.00, 5.00], [10.02, 5.04]])
    assert lateral_chromatic_loss(chief) == pytest.approx(0.03, rel=1e-12)


# ---------------------------------------------------------------------------
# Constraint penalties
# ---------------------------------------------------------------------------

def test_linear_penalty_in_bounds_zero():
    assert linear_constraint_loss([5.0], [(0.0, 10.0)], [1.0]) == 0.0


def test_linear_penalty_single_violation():
    assert linear_constraint_loss([12.0], [(0.0, 10.0)], [1.0]) == pytest.approx(2.0)


def test_linear_penalty_weighted_average():
    # TTL over its bound by 1 mm at weight 0.01 and distortion over by 1% at
    # weight 1, two constrained quantities: (0.01 + 1) / 2 = 0.505
    out = linear_constraint_loss(
        [61.0, 3.0], [(0.0, 60.0), (-2.0, 2.0)], [0.01, 1.0]
    )
    assert out == pytest.approx(0.505, rel=1e-12)


def test_quadratic_penalty():
    assert quadratic_constraint_loss([12.0], [(0.0, 10.0)], [1.0]) == pytest.approx(4.0)


def test_quadratic_penalty_ttl_case():
    # violation 1 mm at weight 0.01 contributes 0.01 * 1^2
    assert quadratic_constraint_loss([61.0], [(0.0, 60.0)], [0.01]) == pytest.approx(0.01)


def test_glass_loss_zero_on_catalog_entry():
    cat = GlassCatalog(entries=(Glass(1.5168, 64.17, "bk7"),))
    assert glass_variable_loss([1.5168], [64.17], cat) == 0.0


def test_glass_loss_hand_case():
    # n off by 0.01, v off by 5: 100 * 1e-4 + 0.0004 * 25 = 0.02
    cat = GlassCatalog(entries=(Glass(1.52, 60.0, "x"),))
    out = glass_variable_loss([1.53], [65.0], cat)
    assert out == pytest.approx(0.02, rel=1e-12)


def test_quadratic_plus_glass_hand_case():
    # violation 2.0 at weight 1 with the glass exactly on a catalog entry:
    # 4.0 + 0 = 4.0
    cat = GlassCatalog(entries=(Glass(1.6, 40.0),))
    total = quadratic_constraint_loss([12.0], [(0.0, 10.0)], [1.0])
    total += glass_variable_loss([1.6], [40.0], cat)
    assert total == pytest.approx(4.0, rel=1e-12)


def test_linear_penalty_scaling_in_weight():
    base = linear_constraint_loss([12.0], [(0.0, 10.0)], [1.0])
    assert linear_constraint_loss([12.0], [(0.0, 10.0)], [3.5]) == pytest.approx(3.5 * base)


def test_linear_penalty_continuity_at_bound():
    eps = 1e-9
    inside = linear_constraint_loss([10.0 - eps], [(0.0, 10.0)], [1.0])
    outside = linear_constraint_loss([10.0 + eps], [(0.0, 10.0)], [1.0])
    assert inside == 0.0
    assert outside == pytest.approx(eps, abs=1e-12)


def test_quadratic_penalty_differentiable_at_bound():
    # slope of w*v^2 at the bound is zero: values straddling the bound give
    # second-order small penalties
    h = 1e-6
    out = quadratic_constraint_loss([10.0 + h], [(0.0, 10.0)], [1.0])
    assert out == pytest.approx(h * h, rel=1e-9)


# ---------------------------------------------------------------------------
# Aggregate loss
# ---------------------------------------------------------------------------

def test_total_loss_composition():
    # spot 0.03, lateral color 0.04, zero constraints, defaults:
    # 0.03 + 0.25 * 0.04 = 0.04  (alpha_iq = 1)
    spot, lc, pc = 0.03, 0.04, 0.0
    total = pc + 1.0 * (spot + 0.25 * lc)
    assert total == pytest.approx(0.04, rel=1e-12)


def test_two_distance_mean():
    assert np.mean([0.03, 0.05]) == pytest.approx(0.04, rel=1e-15)


def test_evaluate_lens_breakdown_consistent(triplet, spec3e):
    breakdown, report, res = evaluate_lens(triplet, spec3e)
    assert breakdown.feasible
    expected = breakdown.constraint_mm + 1.0 * (
        breakdown.spot_mm + 0.25 * breakdown.lateral_color_mm
    )
    assert breakdown.total_mm == pytest.approx(expected, rel=1e-12)
    assert breakdown.total_mm > 0
    assert report.total_mm == pytest.approx(breakdown.constraint_mm, rel=1e-9)


def test_evaluate_untraceable_penalized(spec3e):
    # All-flat "lens": zero power, infeasible -> large finite penalty.
    from lensforge.lens import LensSystem, Surface

    flat = LensSystem(
        surfaces=(
            Surface(0.0, 2.0, None),
            Surface(0.0, 2.0, None),
            Surface(0.0, 2.0, None),
            Surface(0.0, 2.0, None),
            Surface(0.0, 2.0, None, is_stop=True),
            Surface(0.0, 2.0, None),
            Surface(0.0, 0.0, None),
        ),
        image_distance=30.0,
        entrance_pupil_diameter=16.0,
        design_form="GAGASAGA",
    )
    breakdown, _, _ = evaluate_lens(flat, spec3e)
    assert not breakdown.feasible
    assert 1e4 <= breakdown.total_mm < 1e4 + 2.0


def test_alpha_weights_scale_loss(triplet):
    base_spec = triplet_spec()
    double_lc = triplet_spec(alpha_lc=0.5)
    b0, _, _ = evaluate_lens(triplet, base_spec)
    b1, _, _ = evaluate_lens(triplet, double_lc)
    # same traces, alpha_lc doubled: total difference = 0.25 * lc
    assert b1.total_mm - b0.total_mm == pytest.approx(
        0.25 * b0.lateral_color_mm, rel=1e-6
    )


# ---------------------------------------------------------------------------
# Edge thickness
# ---------------------------------------------------------------------------

def test_edge_thickness_against_sag_oracle(triplet, spec3e):
    _, _, res = evaluate_lens(triplet, spec3e)
    quantities = res.quantities[0]
    semi = res.semi_diameters[0]
    # Independent oracle: edge gap = center gap - sag_i(sd_i) + sag_{i+1}(sd_{i+1})
    # with the closed-form sag z(r) = c r^2 / (1 + sqrt(1 - c^2 r^2)).
    def sag(c, r):
        return c * r * r / (1.0 + math.sqrt(max(1.0 - c * c * r * r, 0.0)))

    surfaces = triplet.surfaces
    glass_edges = []
    air_edges = []
    for i in range(len(surfaces) - 1):
        edge = (
            surfaces[i].thickness_after
            - sag(surfaces[i].curvature, semi[i])
            + sag(surfaces[i + 1].curvature, semi[i + 1])
        )
        (glass_edges if surfaces[i].material_after is not None else air_edges).append(edge)
    np.testing.assert_allclose(quantities["glass_edge"][0], glass_edges, rtol=1e-10)
    np.testing.assert_allclose(quantities["air_edge"][0], air_edges, rtol=1e-10)


def test_sphere_sag_helper_matches_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = rng.uniform(-0.09, 0.09)
        r = rng.uniform(0.0, 8.0)
        if abs(c) < 1e-12:
            continue
        expected = (1.0 - math.sqrt(1.0 - c * c * r * r)) / c
        assert sphere_sag(c, r) == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# Mapped vs exact grid modes
# ---------------------------------------------------------------------------

def test_mapped_mode_tracks_exact_on_feasible_systems(spec3e, triplet):
    from lensforge.lens import normalize

    schema = spec3e.schema()
    x = normalize(triplet, schema).values
    exact = BatchEvaluator(spec3e, schema, EvalConfig(rings=4, grid_mode="exact"))
    mapped = BatchEvaluator(spec3e, schema, EvalConfig(rings=4, grid_mode="mapped"))
    le = exact.evaluate(x[None, :]).loss[0]
    lm = mapped.evaluate(x[None, :]).loss[0]
    assert lm == pytest.approx(le, rel=0.05)
