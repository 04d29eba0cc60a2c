import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from switchfermi.curves import (CurveError, UnstableCurve, chop_curve, complexity_scale,
                                complexity_scan, distortion_estimate, geometric_fit,
                                itinerary_measure, push_forward, random_chop, route_proportions)
from switchfermi.hyperbolic import common_cone
from switchfermi.maps import _spans


def sigma_for_phase(u, Hs, p):
    return (_spans(p)["right"] * Hs - u) % 2.0


@pytest.fixture(scope="module")
def cone(large_omega):
    return common_cone(*large_omega[1:])


def test_short_curve_inside_component_stays_whole(large_omega):
    _, p, c = large_omega
    H = 5000.0
    for u in (1.0, 0.5 * p.f2, 2.0 - 0.5 * p.f2):
        curve = UnstableCurve.segment("R1", (sigma_for_phase(u, H, p), H), (0.0, 1.0), 1e-4)
        pieces = push_forward(curve, 1, p, c, half_steps=True)
        assert len(pieces) == 1
        assert pieces[0].strip in ("R2plus", "R2minus")


def test_static_vertical_curve_one_piece(static):
    _, p, c = static
    H = 800.0
    curve = UnstableCurve.segment("R1", (sigma_for_phase(1.0, H, p), H), (0.0, 1.0), 1e-3)
    assert len(push_forward(curve, 1, p, c, half_steps=True)) == 1


def test_complexity_bound(large_omega, cone, rng):
    _, p, c = large_omega
    d0 = complexity_scale(p, c, cone)
    scan = complexity_scan(d0, 300, p, c, cone, rng, levels=(4e3, 4e4))
    assert scan["max"] <= 4
    # negative control: much longer curves cut more often
    big = complexity_scan(20 * d0, 300, p, c, cone, np.random.default_rng(7), levels=(4e3, 4e4))
    assert big["max"] > 4


# one revolution stretches vertical curves by about 4e5 here, so seeds are tiny


def test_measure_conserved(large_omega, cone):
    _, p, c = large_omega
    H = 6000.0
    curve = UnstableCurve.segment("R1", (0.3, H), (0.0, 1.0), 1e-8, n=50)
    m0 = curve.measure
    pieces = push_forward(curve, 2, p, c, cone=cone, max_seg=1.0)
    assert len(pieces) > 1
    assert abs(sum(q.measure for q in pieces) - m0) <= 1e-8 * m0
    assert all(q.strip == "R1" and len(q.itinerary) == 2 for q in pieces)


def test_image_pieces_stay_in_cone(large_omega, cone, rng):
    _, p, c = large_omega
    for _ in range(5):
        d = cone.directions(9)[rng.integers(9)]
        curve = UnstableCurve.segment("R1", (rng.uniform(0, 2), rng.uniform(4e3, 8e3)), d, 1e-7)
        push_forward(curve, 2, p, c, cone=cone, max_seg=1.0)     # raises ConeViolation on failure


def test_distortion_linear_part_is_one(large_omega):
    _, p, c = large_omega
    curve = UnstableCurve.segment("R1", (0.7, 1e3), (0.0, 1.0), 1e-3)
    assert distortion_estimate(curve, 1, p, c, order="G_only", samples=201) == pytest.approx(1.0, abs=1e-9)


def test_distortion_shrinks_with_energy(large_omega):
    _, p, c = large_omega
    K = [distortion_estimate(UnstableCurve.segment("R1", (0.7, lv), (0.0, 1.0), 1e-3), 1, p, c,
                             samples=201) for lv in (1e3, 1e4)]
    assert K[0] > K[1] >= 1.0


def test_route_proportions_long_vertical(default):
    _, p, _ = default
    span = _spans(p)["right"]
    H = 2000.0
    curve = UnstableCurve.segment("R1", (0.4, H), (0.0, 1.0), 40.0 / span)
    plus, minus, info = route_proportions(curve, p)
    assert info["components"] == pytest.approx(20.0, rel=1e-6)
    assert not info["short"]
    assert info["projection_ratio"] == pytest.approx(1.0)
    assert plus == pytest.approx(p.f2, abs=0.02)
    assert plus + minus == pytest.approx(1.0)


def test_route_proportions_rejects_other_strips():
    with pytest.raises(CurveError):
        route_proportions(UnstableCurve.segment("R2plus", (0, 10), (0, 1), 1), None)


def test_itinerary_measure_close_to_product(large_omega, rng):
    _, p, c = large_omega
    span = _spans(p)["right"]
    curve = UnstableCurve.segment("R1", (0.4, 6000.0), (0.0, 1.0), 20.0 / span, n=40)
    table, tv = itinerary_measure(curve, 2, p, c, theta1=1e-4, particles=300, rng=rng, max_seg=1.0)
    assert sum(f for f, _ in table.values()) == pytest.approx(1.0)
    assert table[(1, 1)][1] == pytest.approx(p.f2 ** 2)
    assert tv < 0.1


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 10.0), st.floats(0.01, 3.0), st.integers(2, 30))
def test_chop_parts(length, size, n):
    curve = UnstableCurve.segment("R1", (0.0, 100.0), (0.3, 1.0), length, n=n)
    parts = chop_curve(curve, size)
    lens = np.array([q.length for q in parts])
    assert lens.sum() == pytest.approx(length, rel=1e-9)
    assert sum(q.measure for q in parts) == pytest.approx(curve.measure, rel=1e-9)
    if length > size:
        assert np.all(lens <= size * (1 + 1e-9)) and np.all(lens >= 0.5 * size * (1 - 1e-9))
    assert random_chop(curve, size, np.random.default_rng(0)).length <= max(size, length) * (1 + 1e-9)


def test_geometric_fit_recovers_ratio():
    ns = np.arange(1, 8)
    th, b, r2 = geometric_fit(ns, 3.0 * 0.2 ** ns)
    assert (th, b, r2) == (pytest.approx(0.2), pytest.approx(3.0), pytest.approx(1.0))
    assert math.isnan(geometric_fit([1, 2], [0.5, 0.0])[0])
