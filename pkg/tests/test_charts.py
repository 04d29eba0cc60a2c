import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from switchfermi.charts import (AdiabaticPoint, ChartDomainError, Charts, StripPoint, action_jumps,
                                from_strip, strip_coords)
from switchfermi.maps import fit_loglog_slope


def test_floor_chart_is_linear(default_charts, default):
    p = default[1]
    assert default_charts.action(0.4, 100.0, "F") == pytest.approx(p.L_star * 50.0)
    assert default_charts.speed(0.4, p.L_star * 50.0, "F") == pytest.approx(100.0)


def test_static_upper_angle(static):
    prof, p, _ = static
    ch = Charts(p, prof)
    # (2/5) * int_0^0.25 4 ds
    assert ch.angle(0.25, "U") == pytest.approx(0.4, abs=1e-13)


def test_chart_sign_domain(default_charts):
    with pytest.raises(ChartDomainError):
        default_charts.to_adiabatic(1.5, -3.0, "U")


@pytest.mark.parametrize("chart", ["U", "L", "F"])
def test_round_trip(default_charts, chart, rng):
    ch = default_charts
    n = 10_000
    t = rng.uniform(0.0, 2.0, n)
    A = np.exp(rng.uniform(np.log(1e3), np.log(1e6), n))
    sgn = -1.0 if chart == "L" else 1.0
    v = sgn * np.abs(ch.speed(t, A, chart))
    assert np.max(np.abs(ch.action(t, v, chart) / A - 1.0)) < 1e-9
    ang = ch.angle(t, chart)
    assert np.max(np.abs(ch.time_of_angle(ang, chart) - t)) < 1e-9


def test_point_round_trip_scalar(default_charts):
    ch = default_charts
    p = ch.to_adiabatic(1.6, 2500.0, "U")
    t, v = ch.from_adiabatic(p)
    assert (t, v) == (pytest.approx(1.6, abs=1e-9), pytest.approx(2500.0, rel=1e-9))


def test_strip_examples(default):
    p = default[1]
    sp = strip_coords(AdiabaticPoint("F", p.theta1_star, 777.0), "R1", p)
    assert sp.first == 0.0
    sp = strip_coords(AdiabaticPoint("F", p.theta1_star + 0.002, 500.0), "R1", p)
    assert sp.first == pytest.approx(1.0, abs=1e-12)
    assert sp.second == pytest.approx(500.0 / p.L_star, rel=1e-15)
    with pytest.raises(ChartDomainError):
        strip_coords(AdiabaticPoint("U", 0.1, 10.0), "R1", p)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(["R1", "R2plus", "R2minus"]), st.floats(-0.999, 0.999), st.floats(1e3, 1e6))
def test_strip_round_trip(default, strip, frac, action):
    p = default[1]
    chart = {"R1": "F", "R2plus": "U", "R2minus": "L"}[strip]
    anchor = {"F": p.theta1_star, "U": p.theta2_star, "L": p.zeta2_star}[chart]
    a = AdiabaticPoint(chart, (anchor + frac) % 2.0, action)
    b = from_strip(strip_coords(a, strip, p), p)
    assert b.action == pytest.approx(action, rel=1e-12)
    d = (b.angle - a.angle + 1.0) % 2.0 - 1.0
    assert abs(d) < 1e-12


def test_collision_strip_round_trip(default_charts, rng):
    ch = default_charts
    s = rng.uniform(0.0, 2.0, 200)
    H = rng.uniform(1e3, 1e5, 200)
    t, v = ch.collision_from_strip(StripPoint("R1", s, H))
    back = ch.strip_from_collision(t, v, "R1")
    assert np.allclose(back.first, s, rtol=0, atol=1e-9)
    assert np.allclose(back.second, H, rtol=1e-12)


def test_static_action_invariant(static):
    prof, p, _ = static
    I = action_jumps(500.0, 1.5, 100, p, prof)
    assert np.max(np.abs(I - I[0])) <= 1e-9 * I[0]


def adiabatic_slope(default, levels=(1e3, 2e3, 4e3), starts=(1.3, 1.5, 1.7)):
    prof, p, _ = default
    ch = Charts(p, prof)
    worst = [max(np.max(np.abs(np.diff(action_jumps(A, t0, 50, p, prof, ch)))) for t0 in starts)
             for A in levels]
    return fit_loglog_slope(levels, worst)[0], worst


def test_adiabatic_invariant_slope(default):
    slope, worst = adiabatic_slope(default)
    assert worst[0] > worst[1] > worst[2]
    assert slope == pytest.approx(-3.0, abs=0.5)
