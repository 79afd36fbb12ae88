import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bronchosim import airway_model as am
from bronchosim.errors import FormatError, ParameterError
from bronchosim.geometry import segment_segment_distance


# --- independent oracles -----------------------------------------------------


def sweep_min_angle(d_a, d_b, l_a, l_b, n=10_000):
    """Dense-sweep reimplementation of the minimum branching angle: first
    angle whose full-axis clearance reaches (d_a + d_b) / 2."""
    r_a, r_b = d_a / 2.0, d_b / 2.0
    thresh = 0.5 * (d_a + d_b)
    for phi in np.linspace(1e-4, 120.0, n):
        rad = math.radians(phi)
        a0 = np.array([r_a * math.tan(rad / 2), 0.0, r_a])
        ua = np.array([math.sin(rad), 0.0, math.cos(rad)])
        b0 = np.array([-r_b * math.tan(rad / 2), 0.0, r_b])
        ub = np.array([-math.sin(rad), 0.0, math.cos(rad)])
        d = segment_segment_distance(a0, a0 + l_a * ua, b0, b0 + l_b * ub)
        if d >= thresh:
            return phi
    return 120.0


SWEEP_STEP = 120.0 / 10_000

# scipy.stats.truncnorm moments for N(mu, (0.3 mu)^2) truncated to [0.2, 2] mu
TRUNC_MEAN_RATIO = 1.0029687573547532
TRUNC_STD_RATIO = 0.9819469739612834


# --- curvature radius --------------------------------------------------------


def test_curvature_radius_halved_sine():
    assert am.curvature_radius(4.0, 30.0) == pytest.approx(4.0, abs=1e-12)
    assert am.curvature_radius(6.0, 90.0) == pytest.approx(3.0, abs=1e-12)


def test_curvature_radius_matches_reference_value():
    # 5 / (2 sin 47 deg), evaluated with 64-bit math
    assert am.curvature_radius(5.0, 47.0) == pytest.approx(3.418318652746488, abs=1e-12)


def test_curvature_radius_random_pairs_exact():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        d = rng.uniform(0.5, 20.0)
        phi = rng.uniform(1.0, 120.0)
        assert abs(am.curvature_radius(d, phi) - d / (2 * math.sin(math.radians(phi)))) < 1e-9


def test_curvature_radius_domain():
    for d, phi in [(0.0, 30.0), (-1.0, 30.0), (4.0, 0.0), (4.0, -5.0), (4.0, 121.0)]:
        with pytest.raises(ParameterError):
            am.curvature_radius(d, phi)


# --- taper -------------------------------------------------------------------


def test_taper_endpoints_exact():
    taper = am.SigmoidTaper(steepness=8.0, midpoint=0.5, start_ratio=1.6)
    assert am.taper_radius(taper, 3.0, 0.0) == pytest.approx(3.0 * 1.6, abs=0.0)
    assert am.taper_radius(taper, 3.0, 1.0) == pytest.approx(3.0, abs=0.0)


def test_taper_midpoint_is_mean_of_endpoints():
    taper = am.SigmoidTaper(start_ratio=1.6)
    mid = am.taper_radius(taper, 3.0, 0.5)
    assert mid == pytest.approx(0.5 * (3.0 * 1.6 + 3.0), abs=1e-9)


def test_taper_monotone_and_domain():
    taper = am.SigmoidTaper(steepness=5.0, midpoint=0.4, start_ratio=2.0)
    u = np.linspace(0.0, 1.0, 501)
    r = am.taper_radius(taper, 2.0, u)
    assert np.all(np.diff(r) < 0)  # start_ratio > 1 means shrinking
    with pytest.raises(ParameterError):
        am.taper_radius(taper, 2.0, 1.0001)


@given(st.floats(0.5, 20.0), st.floats(0.05, 0.95))
@settings(max_examples=50, deadline=None)
def test_taper_profile_hits_unit_endpoints(steepness, midpoint):
    taper = am.SigmoidTaper(steepness=steepness, midpoint=midpoint)
    assert abs(taper.profile(0.0)) < 1e-6
    assert abs(taper.profile(1.0) - 1.0) < 1e-6


# --- minimum branching angle -------------------------------------------------


def test_min_angle_degenerate_zero_diameter():
    assert am.min_branching_angle(None, 0.0, 0.0, (10.0, 10.0)) == 0.0


def test_min_angle_symmetric_in_arguments():
    a = am.min_branching_angle(None, 3.0, 5.0, (18.0, 25.0))
    b = am.min_branching_angle(None, 5.0, 3.0, (25.0, 18.0))
    assert a == pytest.approx(b, abs=1e-9)


def test_min_angle_matches_sweep_oracle():
    got = am.min_branching_angle(None, 4.0, 4.0, (20.0, 20.0))
    want = sweep_min_angle(4.0, 4.0, 20.0, 20.0)
    assert got == pytest.approx(want, abs=SWEEP_STEP)


def test_min_angle_clearance_is_tight():
    # at the returned angle the clearance just reaches the threshold
    phi = am.min_branching_angle(None, 5.0, 3.0, (30.0, 22.0))
    c = am._axis_clearance(phi, 2.5, 1.5, 30.0, 22.0)
    assert c == pytest.approx(4.0, abs=1e-6)


# --- parameter validation ----------------------------------------------------


def test_params_validation_names_field():
    p = am.default_params(3)
    p.h_range = (0.0, 0.8)
    with pytest.raises(ParameterError) as ei:
        p.validate()
    assert "h_range" in str(ei.value)

    p = am.default_params(3)
    p.ld_ratio_per_gen = [1.0]
    with pytest.raises(ParameterError) as ei:
        p.validate()
    assert "ld_ratio_per_gen" in str(ei.value)

    p = am.default_params(3)
    p.phi_max = 150.0
    with pytest.raises(ParameterError) as ei:
        p.validate()
    assert "phi_max" in str(ei.value)

    with pytest.raises(ParameterError):
        am.default_params(0)


# --- sampling ----------------------------------------------------------------


def test_single_generation_tree():
    t = am.sample_tree(am.default_params(1, seed=9))
    assert len(t.segments) == 1
    assert len(t.bifurcations) == 0
    assert t.root.generation == 0


def test_sampling_deterministic():
    p = am.default_params(4, seed=1234)
    t1 = am.sample_tree(p)
    t2 = am.sample_tree(am.default_params(4, seed=1234))
    assert am.trees_equal(t1, t2)


def test_five_generations_structure():
    t = am.sample_tree(am.default_params(5, seed=2))
    assert len(t.segments) == 31
    assert len(t.bifurcations) == 15
    assert t.max_generation() == 4
    for s in t.segments.values():
        if s.parent_id is not None:
            parent = t.segments[s.parent_id]
            assert s.generation == parent.generation + 1
            ratio = s.diameter / parent.diameter
            lo, hi = t.params.h_range
            assert lo <= ratio <= hi
        assert 0.0 <= s.twist < 360.0
        assert s.length > 0 and s.diameter > 0


def test_sampled_angles_respect_recomputed_minimum():
    for seed in (3, 4, 5):
        t = am.sample_tree(am.default_params(4, seed=seed))
        for bif in t.bifurcations.values():
            a = t.segments[bif.child_a_id]
            b = t.segments[bif.child_b_id]
            phi_min = sweep_min_angle(
                a.diameter, b.diameter, a.length, b.length, n=2000
            )
            tol = 90.0 / 2000
            assert bif.phi_a >= phi_min - tol
            assert bif.phi_b >= phi_min - tol
            assert bif.phi_a <= t.params.phi_max
            assert bif.phi_b <= t.params.phi_max


def test_r_star_exact():
    t = am.sample_tree(am.default_params(5, seed=7))
    for bif in t.bifurcations.values():
        d_a = t.segments[bif.child_a_id].diameter
        d_b = t.segments[bif.child_b_id].diameter
        assert abs(bif.r_star_a - d_a / (2 * math.sin(math.radians(bif.phi_a)))) < 1e-9
        assert abs(bif.r_star_b - d_b / (2 * math.sin(math.radians(bif.phi_b)))) < 1e-9


def test_length_distribution_matches_truncated_normal():
    l_mean = 30.0
    sigma = 0.3 * l_mean
    # draw through the sampler's own length routine, one stream per id
    from bronchosim.rng import TAG_SEGMENT, stream

    vals = np.array(
        [
            am._draw_length(stream(99, TAG_SEGMENT, i), l_mean, 0.3, i)
            for i in range(12_000)
        ]
    )
    assert vals.min() >= 0.2 * l_mean and vals.max() <= 2.0 * l_mean
    # against the exact truncated-normal moments
    assert vals.mean() == pytest.approx(l_mean * TRUNC_MEAN_RATIO, rel=0.01)
    assert vals.std() == pytest.approx(sigma * TRUNC_STD_RATIO, rel=0.03)
    # and against the nominal figures
    assert abs(vals.mean() - l_mean) / l_mean < 0.03
    assert abs(vals.std() - sigma) / sigma < 0.10


def test_no_sibling_subtree_collisions_100_trees():
    for seed in range(1, 101):
        g = 2 + seed % 4
        t = am.sample_tree(am.default_params(g, seed=seed))
        assert am.check_axis_clearance(t) == []


# --- carinal rounding --------------------------------------------------------


def _symmetric_two_level_tree(phi=40.0, d_child=6.0):
    """Hand-built tree with one symmetric bifurcation."""
    from bronchosim.geometry import RigidTransform

    root = am.AirwaySegment(
        id=0, parent_id=None, generation=0, diameter=10.0, length=30.0,
        twist=0.0, frame=RigidTransform(),
    )
    bif_frame = root.end_frame()
    kids = {}
    for seg_id, side in ((1, +1), (2, -1)):
        start = bif_frame.apply(am.daughter_axis_start(d_child / 2, phi, side))
        rot = bif_frame.rotation @ am.rotation_y(side * math.radians(phi))
        kids[seg_id] = am.AirwaySegment(
            id=seg_id, parent_id=0, generation=1, diameter=d_child, length=20.0,
            twist=0.0, frame=RigidTransform(rot, start),
        )
    bif = am._build_bifurcation_geometry(root, kids[1], kids[2], phi, phi, bif_frame)
    params = am.default_params(2)
    return am.AirwayTree(
        segments={0: root, **kids}, bifurcations={0: bif}, params=params
    )


def test_carina_symmetric_mid_tilt_zero():
    t = _symmetric_two_level_tree()
    bif = t.bifurcations[0]
    _, _, tilt = am.carinal_rounding(bif, 0.0)
    assert tilt == pytest.approx(0.0, abs=1e-12)


def test_carina_endpoint_circles_touch_walls():
    t = _symmetric_two_level_tree(phi=35.0)
    bif = t.bifurcations[0]
    for angle in (bif.sagittal_range_b[0], bif.sagittal_range_a[1]):
        center, radius, _ = am.carinal_rounding(bif, angle)
        # endpoint circles shrink onto the wedge apex, which lies on both walls
        assert radius == pytest.approx(0.0, abs=1e-9)
        apex, _, _ = am._wedge_2d(bif)
        assert np.hypot(center[0] - apex[0], center[1] - apex[2]) < 1e-6
    with pytest.raises(ParameterError):
        am.carinal_rounding(bif, bif.sagittal_range_a[1] + 1.0)


def _wall_points_2d(bif, side, n):
    """Dense samples of a daughter's inner wall line in the (x, z) plane."""
    phi = bif.phi_a if side > 0 else bif.phi_b
    r = (bif.r_star_a if side > 0 else bif.r_star_b) * math.sin(math.radians(phi))
    a0 = am.daughter_axis_start(r, phi, side)
    u = am.daughter_axis_direction(phi, side)
    nrm = np.array(
        [side * math.cos(math.radians(phi)), 0.0, -math.sin(math.radians(phi))]
    )
    w0 = a0 - r * nrm
    ts = np.linspace(-5.0, 40.0, n)
    pts = w0[None, :] + ts[:, None] * u[None, :]
    return pts[:, [0, 2]]


def test_carina_radius_matches_min_distance_oracle():
    # asymmetric bifurcation; R_c must equal the closest distance from the
    # rounding-circle center to the wedge boundary (dense-sampling oracle)
    from bronchosim.geometry import RigidTransform

    root = am.AirwaySegment(
        id=0, parent_id=None, generation=0, diameter=10.0, length=30.0,
        twist=0.0, frame=RigidTransform(),
    )
    bif_frame = root.end_frame()
    specs = {1: (5.0, 35.0, +1), 2: (3.5, 60.0, -1)}
    kids = {}
    for seg_id, (d, phi, side) in specs.items():
        start = bif_frame.apply(am.daughter_axis_start(d / 2, phi, side))
        rot = bif_frame.rotation @ am.rotation_y(side * math.radians(phi))
        kids[seg_id] = am.AirwaySegment(
            id=seg_id, parent_id=0, generation=1, diameter=d, length=25.0,
            twist=0.0, frame=RigidTransform(rot, start),
        )
    bif = am._build_bifurcation_geometry(root, kids[1], kids[2], 35.0, 60.0, bif_frame)

    mid = 0.5 * (bif.sagittal_range_b[0] + bif.sagittal_range_a[1])
    center, radius, _ = am.carinal_rounding(bif, mid)
    boundary = np.vstack(
        [_wall_points_2d(bif, +1, 50_000), _wall_points_2d(bif, -1, 50_000)]
    )
    dmin = np.min(np.linalg.norm(boundary - center[None, :], axis=1))
    assert radius == pytest.approx(dmin, abs=1e-4)
    assert radius == pytest.approx(bif.r_c, abs=1e-12)


# --- serialization -----------------------------------------------------------


def test_tree_json_roundtrip_lossless(tmp_path):
    t = am.sample_tree(am.default_params(4, seed=5))
    path = tmp_path / "tree.json"
    am.save_tree(t, path)
    t2 = am.load_tree(path)
    assert am.trees_equal(t, t2)
    # float fields survive exactly
    for sid, seg in t.segments.items():
        seg2 = t2.segments[sid]
        assert seg.length == seg2.length
        assert seg.diameter == seg2.diameter
        assert np.array_equal(seg.frame.rotation, seg2.frame.rotation)


def test_tree_json_rejects_unknown_version(tmp_path):
    t = am.sample_tree(am.default_params(2, seed=5))
    doc = am.tree_to_json_dict(t)
    doc["format_version"] = "999"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        am.load_tree(path)
