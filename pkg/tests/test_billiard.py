import numpy as np
import pytest
from scipy.optimize import brentq

from switchfermi import billiard as bl

UPPER, LOWER = 1, 2   # chamber codes of the batch functions


def test_static_energy_conserved(static):
    prof, p, _ = static
    s = bl.initial_state(0.3, 0.3, 7.3, p, prof)
    events, final = bl.simulate_events(s, 10_000, p, prof)
    speeds = np.abs([e.v_after for e in events])
    assert np.max(np.abs(speeds - 7.3)) <= 1e-9 * 7.3
    assert final.t > events[0].t


def test_static_right_chamber_ceiling_time(static):
    prof, p, _ = static
    s = bl.initial_state(0.3, 0.3, 1.0, p, prof)
    assert s.chamber == "right"
    ev, _ = bl.next_collision(s, p, prof, walls=False)
    assert ev.surface == "ceiling"
    assert ev.t == pytest.approx(1.0, abs=1e-12)


def test_static_lower_chamber_interaction(static):
    prof, p, _ = static
    # slit underside at height 0.5, speed 4: down to the floor and back takes 2*0.5/4
    t1, v1, ch = bl.interaction_map(1.5, -4.0, p, prof, "lower_left")
    assert ch == "lower_left"
    assert t1 == pytest.approx(1.75, abs=1e-12)
    assert v1 == pytest.approx(-4.0, abs=1e-12)


def test_slit_hit_matches_bisection(default):
    prof, p, _ = default
    t0, y0, v0 = 1.5, 0.9, -5.0
    s = bl.initial_state(t0, y0, v0, p, prof)
    assert s.chamber == "upper_left"
    ev, _ = bl.next_collision(s, p, prof, walls=False)
    assert ev.surface == "slit_top"

    def g(t):
        return y0 + v0 * (t - t0) - prof(t)

    grid = np.linspace(t0, t0 + 0.3, 30001)
    vals = np.array([g(t) for t in grid])
    k = np.argmax(vals <= 0)
    root = brentq(g, grid[k - 1], grid[k], xtol=1e-14, rtol=1e-15)
    assert ev.t == pytest.approx(root, abs=1e-10)


@pytest.mark.parametrize("t", [0.1, 0.77, 1.3, 1.99])
def test_horizontal_motion_has_period_two(default, t):
    p = default[1]
    x, d = bl.horizontal_position(t, p.x0)
    x2, d2 = bl.horizontal_position(t + 2.0, p.x0)
    assert (x2, d2) == (pytest.approx(x, abs=1e-12), d)


def test_static_revolution_keeps_speed(static):
    prof, p, _ = static
    t, v, route = bl.exact_revolution(p.t1_star + 0.3 / 800.0, 800.0, p, prof)
    assert v == pytest.approx(800.0, rel=1e-12)
    assert t - p.t1_star == pytest.approx(2.0, abs=1e-2)


def _r1_hits(p, rng, n, lo, hi):
    Hs = rng.uniform(lo, hi, n)
    sigma = rng.uniform(0.0, 2.0, n)
    v = 2.0 * Hs
    return p.t1_star + sigma / v, v


def test_route_frequencies(default, rng):
    prof, p, _ = default
    t, v = _r1_hits(p, rng, 1000, 250.0, 500.0)
    st, _, _, ch, _ = bl.batch_half_12(t, v, p, prof)
    ok = st == 1
    assert ok.mean() > 0.99
    assert np.mean(ch[ok] == LOWER) == pytest.approx(p.f2, abs=0.05)


def test_route_multipliers_at_high_energy(default, rng):
    # the ell = 0.99 envelopes need energies above the threshold implied by the
    # fitted normal-form envelopes (about 5e3 for this profile)
    from switchfermi.maps import ModifiedSystemConfig, energy_bound_report
    prof, p, c = default
    ell = 0.99
    lo = 1e4
    s0 = rng.uniform(0, 2, 2000)
    rep = energy_bound_report(s0, rng.uniform(lo, 2 * lo, 2000), p, c, ModifiedSystemConfig.default(lo, ell))
    assert max(rep["implied_V_star"].values()) < lo
    t, v = _r1_hits(p, rng, 100, lo, 1.5 * lo)
    st, th, vh, ch, _ = bl.batch_half_12(t, v, p, prof)
    ok = st == 1
    st2, tf, vf, _ = bl.batch_half_21(th[ok], vh[ok], ch[ok], p, prof)
    ratio = vf / v[ok]
    low = ch[ok] == LOWER
    k_lo, k_up = p.f2 / p.f1, (1 - p.f2) / (1 - p.f1)
    assert np.all((ratio[low] >= ell * k_lo) & (ratio[low] <= k_lo / ell))
    assert np.all((ratio[~low] >= ell * k_up) & (ratio[~low] <= k_up / ell))


def test_exact_orbit_matches_single_revolutions(default):
    prof, p, _ = default
    t, v = p.t1_star + 0.7 / 1200.0, 1200.0
    status, ts, vs, routes = bl.exact_orbit(t, v, 3, p, prof)
    assert status == "completed"
    t1, v1, r1 = bl.exact_revolution(t, v, p, prof)
    assert vs[0] == pytest.approx(v1, rel=1e-12)
    assert bl.ROUTES[routes[0]] == r1


def test_checkpoint_round_trip(tmp_path, default):
    prof, p, _ = default
    s = bl.initial_state(1.5, 0.9, -5.0, p, prof)
    path = tmp_path / "s.ckpt"
    bl.save_checkpoint(path, s)
    assert bl.load_checkpoint(path) == s


def test_trace_csv(default, tmp_path):
    prof, p, _ = default
    events, _ = bl.simulate_events(bl.initial_state(0.3, 0.3, 3.0, p, prof), 5, p, prof)
    path = tmp_path / "trace.csv"
    with open(path, "w") as fh:
        bl.write_trace_csv(fh, events)
    rows = path.read_text().splitlines()
    assert rows[0] == "t,surface,v_after,chamber" and len(rows) == 6
    assert float(rows[1].split(",")[0]) == events[0].t
