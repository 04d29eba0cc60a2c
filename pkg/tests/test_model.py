import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import integrate

from switchfermi.model import (PRESETS, ProfileError, SlitProfile, derive_params, drift_rate,
                               eval_profile, normal_form_constants, preset_setup, tuned_sinusoid)


def test_constant_profile_values():
    assert eval_profile(SlitProfile.constant(0.5), 1.7) == (0.5, 0.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50, allow_nan=False))
def test_profile_periodic(t):
    # t + 2 may round onto the seam, where the one-sided velocity changes
    assume(abs(t - 2.0 * round(t / 2.0)) > 1e-9)
    prof = SlitProfile.sinusoid(0.5, 0.2, 2.37)
    a = np.array(eval_profile(prof, t))
    b = np.array(eval_profile(prof, t + 2.0))
    assert np.allclose(a, b, rtol=0, atol=1e-9)


def test_default_profile_derivatives_match_finite_differences(default):
    prof = default[0]
    t = 0.3
    f, fd, fdd = eval_profile(prof, t)
    h = 1e-6
    assert (prof(t + h) - prof(t - h)) / (2 * h) == pytest.approx(fd, rel=1e-6)

    def d2(h):
        return (prof(t + h) - 2 * f + prof(t - h)) / h ** 2

    # one Richardson step removes the h^2 term
    assert (4 * d2(5e-4) - d2(1e-3)) / 3 == pytest.approx(fdd, rel=1e-6)
    # closed form of the sinusoid
    m = prof.meta
    w = math.pi * m["omega"]
    assert f == pytest.approx(m["h0"] + m["A"] * math.sin(w * t + m["phi0"]), abs=1e-14)


def test_velocity_jumps_only_at_seam(default):
    prof = default[0]
    right = eval_profile(prof, 0.0)[1]
    left = eval_profile(prof, 0.0, left=True)[1]
    assert abs(right - left) > 1.0
    assert eval_profile(prof, 0.9)[1] == pytest.approx(eval_profile(prof, 0.9, left=True)[1])


def test_bad_bound_rejected():
    prof = SlitProfile.sinusoid(0.5, 0.45, 2.37)
    with pytest.raises(ProfileError):
        derive_params(prof, 0.5, 0.25, c_bound=0.2)


def test_static_switch_times_and_integrals(static):
    _, p, _ = static
    assert (p.t1_star, p.t2_star) == (0.25, 1.25)
    # integrand 1/w^2 = 4 where the chamber is occupied, 1 elsewhere
    assert p.L_star == pytest.approx(5.0, abs=1e-12)
    assert p.theta1_star == pytest.approx(0.4, abs=1e-12)


def test_static_constants_vanish(static):
    assert all(v == 0.0 for v in static[2].to_dict().values())


def test_kappa_l_formula(default):
    prof, p, c = default
    f2, fd2 = eval_profile(prof, p.t2_star)[:2]
    assert c.kappa_l == pytest.approx(0.5 * f2 * fd2, rel=1e-9)
    assert c.kappa_l == pytest.approx(-6.0, rel=1e-6)


def test_delta1_matches_width_formula(default):
    # Delta_1 = -(1/2) ldot/l at t1*, l = 1 - f; checked against finite differences of f
    prof, p, c = default
    h = 1e-6
    l = 1.0 - prof(p.t1_star)
    ldot = -(prof(p.t1_star + h) - prof(p.t1_star - h)) / (2 * h)
    assert c.delta1 == pytest.approx(-0.5 * ldot / l, rel=1e-6)


def test_L_star_against_quadrature(default):
    prof, p, _ = default
    t1, t2 = p.t1_star, p.t2_star

    def g(s):
        # upper chamber width where the ball is left of the slit, 1 otherwise
        return 1.0 / (1.0 - prof(s)) ** 2 if (s < t1 or s > t2) else 1.0

    val = sum(integrate.quad(g, a, b, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
              for a, b in ((0, t1), (t1, t2), (t2, 2.0)))
    assert p.L_star == pytest.approx(val, rel=1e-10)


def test_drift_rate_values():
    assert drift_rate(0.5, 0.5) == 0.0
    kl = 0.6 * math.log(0.6 / 0.4) + 0.4 * math.log(0.4 / 0.6)
    assert drift_rate(0.4, 0.6) == pytest.approx(kl, rel=1e-14)
    assert drift_rate(0.4, 0.6) == pytest.approx(0.2 * math.log(1.5), rel=1e-14)
    assert drift_rate(0.6, 0.4) == pytest.approx(0.081093, abs=1e-6)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_drift_rate_nonnegative(f1, f2):
    assert drift_rate(f1, f2) >= -1e-15


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name):
    prof, p, c = preset_setup(name)
    assert 0 < p.t1_star < p.t2_star < 2
    assert np.isfinite(list(c.to_dict().values())).all()


def test_tuner_rejects_extremal_targets():
    with pytest.raises(ValueError):
        tuned_sinusoid(fdot=2.0, f1=0.4, f2=0.6, A=0.1)
