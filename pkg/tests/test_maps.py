import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from switchfermi import billiard as bl
from switchfermi.charts import StripPoint
from switchfermi.maps import (MAP_IDS, ModifiedSystemConfig, RegionError, apply_half_map, apply_P,
                              apply_P0, classify, classify_arrays, energy_bound_report, entry_phase,
                              fit_loglog_slope, frac2, half_map_arrays, normal_form_errors,
                              revolution_arrays, _spans)


def sigma_for_phase(u, Hs, p):
    return float(frac2(_spans(p)["right"], Hs, u))


@pytest.mark.parametrize("u, tag", [(0.3, "L_en_short"), (1.0, "U_en"), (1.5, "L_en_long")])
def test_entry_classification(default, u, tag):
    _, p, c = default
    s = sigma_for_phase(u, 1234.5, p)
    assert float(entry_phase(s, 1234.5, p)) == pytest.approx(u, abs=1e-9)
    assert classify(StripPoint("R1", s, 1234.5), p, c)[0].tag == tag


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 2.0, exclude_max=True), st.floats(300.0, 1e6))
def test_classifier_agrees_with_phase_inequalities(default, u, Hs):
    _, p, _ = default
    f2 = p.f2
    s = sigma_for_phase(u, Hs, p)
    uu = float(entry_phase(s, Hs, p))
    code = int(classify_arrays(np.array([s]), np.array([Hs]), p)[0][0])
    margin = 1e-7
    if f2 + margin < uu < 2 - f2 - margin:
        assert code == 0
    elif uu < f2 - margin:
        assert code == 2
    elif uu > 2 - f2 + margin:
        assert code == 1


def test_static_upper_entry_is_exact(static):
    _, p, c = static
    s = np.linspace(0.0, 2.0, 400, endpoint=False)
    code = classify_arrays(s, np.full_like(s, 800.0), p)[0]
    up = code == 0
    tau, I = half_map_arrays("U12", s[up], np.full(up.sum(), 800.0), p, c)
    assert np.all(I == (1.0 - p.f2) * 800.0)


def test_correction_only_in_second_coordinate(default):
    _, p, c = default
    s = np.linspace(0.0, 2.0, 2000, endpoint=False)
    H = np.full_like(s, 1000.0)
    up = classify_arrays(s, H, p)[0] == 0
    g = half_map_arrays("U12", s[up], H[up], p, c, "G_only")
    gh = half_map_arrays("U12", s[up], H[up], p, c, "G_plus_H")
    assert np.array_equal(g[0], gh[0])
    d = np.abs(gh[1] - g[1])
    assert 0 < d.max() < 50.0 / 1000.0 * 1000.0 ** 0   # O(1/H) relative to H ~ 1e3


def test_apply_half_map_rejects_wrong_strip(default):
    _, p, c = default
    with pytest.raises(RegionError):
        apply_half_map("U21", StripPoint("R1", 0.1, 1000.0), p, c)


def test_normal_form_slope_upper_entry(default, default_charts, rng):
    prof, p, c = default
    levels = [250.0, 500.0, 1000.0]
    errs = []
    for lev in levels:
        e1, e2, bad = normal_form_errors("U12", lev, 100, p, prof, c, default_charts, rng)
        assert bad == 0
        errs.append(max(e1.max(), e2.max()))
    assert fit_loglog_slope(levels, errs)[0] == pytest.approx(-2.0, abs=0.3)


def _route_agreement(prof, p, c, Hs, n, rng):
    s = rng.uniform(0.0, 2.0, n)
    _, _, route = revolution_arrays(s, np.full(n, Hs), p, c)
    exact = np.empty(n, dtype=int)
    for i in range(n):
        status, _, _, r = bl.exact_orbit(p.t1_star + s[i] / (2.0 * Hs), 2.0 * Hs, 1, p, prof)
        assert status == "completed"
        exact[i] = r[0]
    return route, exact


def test_routes_agree_with_exact(default, rng):
    prof, p, c = default
    route, exact = _route_agreement(prof, p, c, 4000.0, 200, rng)
    assert np.mean(route == exact) >= 0.99


def test_route_mismatch_near_threshold_is_exit_only(default, rng):
    # close to the calibrated threshold a few percent of exits flip between
    # long and short; the entry (upper or lower) always agrees
    prof, p, c = default
    route, exact = _route_agreement(prof, p, c, 1000.0, 200, rng)
    assert np.array_equal(route == 0, exact == 0)
    assert np.mean(route == exact) >= 0.95


def test_prop_envelopes(default, rng):
    _, p, c = default
    cfg = ModifiedSystemConfig.default(1e4)
    s = rng.uniform(0, 2, 4000)
    H = np.exp(rng.uniform(np.log(1e4), np.log(1e5), 4000))
    rep = energy_bound_report(s, H, p, c, cfg)
    assert rep["violations"] == {"upper": 0, "lower": 0}
    # the envelope constants do not grow with the level
    Ds = []
    for lo in (1e3, 1e4, 1e5):
        r = energy_bound_report(s, np.full_like(s, lo) * (1 + 0.5 * rng.random(s.size)), p, c, cfg)
        Ds.append(max(r[k]["D"] for k in ("U12", "U21", "L12", "L21")))
    assert max(Ds) / min(Ds) < 1.5


def test_static_envelope_is_zero(static, rng):
    _, p, c = static
    s = rng.uniform(0, 2, 500)
    rep = energy_bound_report(s, rng.uniform(1e3, 2e3, 500), p, c, ModifiedSystemConfig(2.0, 20.0))
    assert max(rep[k]["D"] for k in ("U12", "U21", "L12", "L21")) < 1e-9


def test_p0_equals_p_above_threshold(default, rng):
    _, p, c = default
    cfg = ModifiedSystemConfig.default(1000.0)
    for _ in range(50):
        pt = StripPoint("R1", rng.uniform(0, 2), rng.uniform(cfg.V_0, 5 * cfg.V_0))
        assert apply_P0(pt, p, c, cfg) == apply_P(pt, p, c)


def test_p0_forces_lower_route_below_threshold(default):
    _, p, c = default
    cfg = ModifiedSystemConfig.default(1000.0)
    H = 3000.0
    s = np.array([sigma_for_phase(1.0, H, p)])
    x, y, r = revolution_arrays(s, np.array([H]), p, c, cfg)
    assert r[0] in (5, 6)
    assert y[0] / H == pytest.approx(p.f2 / p.f1, rel=0.05)
    _, y_free, r_free = revolution_arrays(s, np.array([H]), p, c)
    assert r_free[0] == 0 and y_free[0] / H == pytest.approx((1 - p.f2) / (1 - p.f1), rel=0.05)


def test_p0_never_below_v_star(default, rng):
    from switchfermi.stats import EnsembleConfig, run_ensemble
    _, p, c = default
    cfg = ModifiedSystemConfig.default(1000.0)
    ens = run_ensemble(EnsembleConfig(seed=3, n_orbits=200, v_range=(cfg.V_star, cfg.V_0), horizon=1000),
                       p, c, cfg)
    assert np.all(ens.termination == 0)
    assert np.nanmin(ens.log_energy) >= np.log(cfg.V_star)


@pytest.mark.parametrize("mid", MAP_IDS)
def test_half_maps_run_at_high_energy(default, mid, rng):
    from switchfermi.maps import sample_region
    _, p, c = default
    x, y = sample_region(mid, 1e5, 50, p, c, rng)
    a, b = half_map_arrays(mid, x, y, p, c)
    assert np.all(np.isfinite(a)) and np.all(b > 0)
