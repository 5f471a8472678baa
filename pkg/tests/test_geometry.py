import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condensers.errors import InvalidArgumentError
from condensers.geometry import (
    Condenser,
    Plate,
    RotationProfile,
    build_rotation_body,
    build_rotation_segment,
    build_sphere_plate,
    default_self_radius,
    panel_self_radius,
    validate_condenser,
)


def test_profile_validation():
    with pytest.raises(InvalidArgumentError):
        RotationProfile("stretched_exp", 0.0)
    with pytest.raises(InvalidArgumentError):
        RotationProfile("power", -1.0)
    with pytest.raises(InvalidArgumentError):
        RotationProfile("cone", 1.0)
    assert RotationProfile("power", 0.0).rho(7.0) == 1.0


@given(st.sampled_from(["power", "stretched_exp"]), st.floats(0.1, 3.0), st.floats(0.01, 30.0))
def test_profile_radius_positive(family, s, x):
    prof = RotationProfile(family, s)
    lr = float(prof.log_rho(x))
    assert math.isfinite(lr)
    rho = float(prof.rho(x))
    assert rho == 0.0 or math.log(rho) == pytest.approx(lr, rel=1e-12, abs=1e-12)


def test_rotation_body_first_ring_radius_one():
    body = build_rotation_body(RotationProfile("stretched_exp", 1.0), 5.0, 11, 8)
    first = body.nodes[body.nodes[:, 0] == 0.0]
    assert len(first) == 8
    assert np.allclose(np.hypot(first[:, 1], first[:, 2]), 1.0, rtol=0, atol=1e-15)


def test_rotation_body_single_ring_count():
    body = build_rotation_body(RotationProfile("stretched_exp", 1.0), 2.0, 1, 4)
    assert body.n_nodes == 4
    assert len(np.unique(body.nodes[:, 0])) == 1


def test_cylinder_radii_all_one():
    body = build_rotation_body(RotationProfile("power", 0.0), 5.0, 20, 6)
    assert np.allclose(np.hypot(body.nodes[:, 1], body.nodes[:, 2]), 1.0, atol=1e-14)
    assert body.check() == []


def test_rotation_body_radii_match_profile_on_grid():
    prof = RotationProfile("power", 1.5)
    body = build_rotation_body(prof, 10.0, 15, 5)
    x = body.nodes[:, 0]
    assert x.min() == pytest.approx(1e-3)
    assert np.array_equal(np.hypot(body.nodes[:, 1], body.nodes[:, 2]) > 0, np.ones(body.n_nodes, bool))
    assert np.allclose(np.hypot(body.nodes[:, 1], body.nodes[:, 2]), prof.rho(x), rtol=1e-14)


def test_rotation_body_errors():
    prof = RotationProfile("power", 0.0)
    with pytest.raises(InvalidArgumentError):
        build_rotation_body(prof, 0.0, 3, 3)
    with pytest.raises(InvalidArgumentError):
        build_rotation_body(prof, 1.0, 0, 3)
    with pytest.raises(InvalidArgumentError):
        build_rotation_body(prof, 1.0, 3, 0)


def test_cylinder_area_close_to_analytic():
    body = build_rotation_body(RotationProfile("power", 0.0), 4.0, 40, 40, grid="uniform")
    assert body.cell_weights.sum() == pytest.approx(2 * math.pi * 4.0, rel=5e-3)


def test_segment_collapses_thin_rings_and_keeps_log_radius():
    seg = build_rotation_segment(RotationProfile("stretched_exp", 2.0), 20.0, 24.0, 0.5)
    # radius exp(-400) underflows nowhere in the self radius
    assert seg.n_nodes == 8
    assert np.all(seg.self_radius > 0) and np.all(np.isfinite(seg.self_radius))
    assert np.all(seg.cell_weights > 0)


def test_panel_radius_square_matches_disc_rule():
    h = 0.01
    r = float(panel_self_radius(h, h))
    disc = float(default_self_radius((2 * h) ** 2, 3))
    assert r == pytest.approx(disc, rel=6e-3)


def test_panel_radius_slender_limit_continuous():
    q = 0.1
    p = 1e-9 * q
    slender = float(panel_self_radius(p, q, log_half_width=math.log(p)))
    assert slender == pytest.approx(q / (math.log(2 * q / p) + 1.0))
    # just above the switch the exact formula agrees with the slender limit
    p2 = 1.01e-8 * q
    assert float(panel_self_radius(p2, q)) == pytest.approx(q / (math.log(2 * q / p2) + 1.0), rel=1e-6)


def test_sphere_area_and_radius():
    pl = build_sphere_plate((0, 0, 0), 1.0, 2000)
    assert pl.cell_weights.sum() == pytest.approx(4 * math.pi, rel=1e-12)
    pl2 = build_sphere_plate((1.0, -2.0, 0.5), 2.0, 300)
    assert np.allclose(np.linalg.norm(pl2.nodes - [1.0, -2.0, 0.5], axis=1), 2.0, rtol=0, atol=1e-12)
    assert pl.check() == []


def test_circle_four_nodes_equiangular():
    pl = build_sphere_plate((0, 0), 1.0, 4)
    angles = np.mod(np.arctan2(pl.nodes[:, 1], pl.nodes[:, 0]), 2 * math.pi)
    assert np.allclose(np.sort(angles), [0, math.pi / 2, math.pi, 3 * math.pi / 2], atol=1e-15)
    assert pl.cell_weights.sum() == pytest.approx(2 * math.pi)


def test_sphere_needs_four_nodes():
    with pytest.raises(InvalidArgumentError):
        build_sphere_plate((0, 0, 0), 1.0, 3)
    with pytest.raises(InvalidArgumentError):
        build_sphere_plate((0, 0, 0), 0.0, 10)


def test_validation_opposite_plates_sharing_node():
    a = Plate([[0, 0, 0], [1, 0, 0]], 0.1, sign=1)
    b = Plate([[1, 0, 0], [2, 0, 0]], 0.1, sign=-1)
    rep = validate_condenser(Condenser([a, b]))
    assert not rep.valid
    assert rep.pair_distances == [(0, 1, 0.0)]
    assert rep.to_dict()["opposite_pairs"][0]["plates"] == [0, 1]


def test_validation_coincident_equal_signs_valid():
    a = build_sphere_plate((0, 0, 0), 1.0, 50)
    rep = validate_condenser(Condenser([a, a.replace()]))
    assert rep.valid and rep.pair_distances == []


def test_validation_example_geometry_valid():
    ball = build_sphere_plate((-3, 0, 0), 1.0, 200, sign=1)
    body = build_rotation_segment(RotationProfile("stretched_exp", 1.0), 0.0, 10.0, 0.5, sign=-1)
    rep = validate_condenser(Condenser([ball, body]))
    assert rep.valid
    assert rep.pair_distances[0][2] > 1.0


def test_plate_invariant_failures():
    bad_cap = Plate([[0, 0, 0], [1, 0, 0]], 0.1, cap=[0.2, 0.2], a=1.0)
    assert any("cap" in s for s in bad_cap.check())
    all_inf = Plate([[0, 0, 0]], 0.1, f=[np.inf])
    assert any("+inf" in s for s in all_inf.check())
    assert Plate([[0, 0, 0]], -1.0).check()
    assert Plate([[0, 0, 0]], 1.0, g=[0.0]).check()
    assert not validate_condenser(Condenser([bad_cap])).valid


def test_shared_nodes_map_to_one_support_point():
    a = Plate([[0, 0, 0], [1, 0, 0]], 0.1)
    b = Plate([[1, 0, 0], [0, 0, 2]], 0.1)
    c = Condenser([a, b])
    assert c.points.shape[0] == 3
    assert c.plate_index[0].tolist() == [0, 1]
    assert c.plate_index[1].tolist() == [1, 2]
    assert c.owners()[1] == [(0, 1), (1, 0)]


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 300), st.floats(0.1, 10.0))
def test_generated_spheres_satisfy_invariants(n, r):
    pl = build_sphere_plate((0, 0, 0), r, n)
    assert pl.check() == []
    assert pl.cell_weights.sum() == pytest.approx(4 * math.pi * r * r, rel=1e-12)
