"""Adiabatic coordinates and strip variables.

Three charts are used.  ``U`` (upper chamber) and ``F`` (right floor) share
the angle ``theta(t) = (2/L*) int_0^t l^-2`` and ``L`` (lower chamber) uses
``zeta(t)`` built from ``m``.  Actions are

    I = (L*/2) (l v + l l' + l^2 l'' / (3 v))
    J = (M*/2) (m v + m m' + m^2 m'' / (3 v))
    H = L* v / 2

Angles come from a table of cumulative integrals at Chebyshev-Lobatto nodes
plus an exact Gauss-Legendre integral from the nearest node, so the table
carries no interpolation error.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

from .model import PERIOD, chamber_widths

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_GL16_X, _GL16_W = np.polynomial.legendre.leggauss(16)


class ChartDomainError(ValueError):
    pass


@dataclass(frozen=True)
class AdiabaticPoint:
    chart: str
    angle: float
    action: float


@dataclass(frozen=True)
class StripPoint:
    strip: str
    first: float
    second: float


STRIP_CHART = {"R1": "F", "R2plus": "U", "R2minus": "L"}


class AngleTable:
    """Cumulative ``int_0^t w(s)^-2 ds`` for one chamber over one period."""

    def __init__(self, profile, t1, t2, chamber, n_nodes=4096):
        self.profile = profile
        self.t1, self.t2 = t1, t2
        self.chamber = "U" if chamber in ("U", "F") else "L"
        pts = np.unique(np.concatenate([profile.breakpoints, [t1, t2]]))
        nodes, inside = [], []
        for a, b in zip(pts[:-1], pts[1:]):
            k = np.arange(n_nodes)
            cheb = a + (b - a) * 0.5 * (1.0 - np.cos(np.pi * k / (n_nodes - 1)))
            cheb[0], cheb[-1] = a, b
            nodes.append(cheb[:-1])
            mid = 0.5 * (a + b)
            inside.append(np.full(n_nodes - 1, mid < t1 or mid > t2))
        nodes.append([PERIOD])
        self.nodes = np.concatenate(nodes)
        self.inside = np.concatenate(inside)
        inc = self._gl(self.nodes[:-1], self.nodes[1:], self.inside)
        self.cum = np.concatenate([[0.0], np.cumsum(inc)])
        self.total = float(self.cum[-1])

    def _integrand(self, s, inside):
        f = self.profile(s)
        w = (1.0 - f) if self.chamber == "U" else f
        return np.where(inside, 1.0 / (w * w), 1.0)

    def _gl(self, a, b, inside, order=8):
        x, w = (_GL_X, _GL_W) if order == 8 else (_GL16_X, _GL16_W)
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
        s = 0.5 * (a + b) + 0.5 * (b - a) * x
        vals = self._integrand(s, np.asarray(inside)[..., None])
        return 0.5 * (b - a)[..., 0] * np.sum(vals * w, axis=-1)

    def integral(self, t):
        """``int_0^t w^-2`` for ``t`` in any period (unwrapped)."""
        t = np.asarray(t, dtype=float)
        k = np.floor(t / PERIOD)
        tau = t - PERIOD * k
        idx = np.clip(np.searchsorted(self.nodes, tau, side="right") - 1, 0, len(self.nodes) - 2)
        part = self._gl(self.nodes[idx], tau, self.inside[idx])
        out = k * self.total + self.cum[idx] + part
        return float(out) if out.ndim == 0 else out

    def local(self, a, b):
        """``int_a^b w^-2`` for short spans that do not cross a switch time."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        mid = np.mod(0.5 * (a + b), PERIOD)
        inside = (mid < self.t1) | (mid > self.t2)
        out = self._gl(a, b, inside, order=16)
        return float(out) if np.ndim(out) == 0 else out

    def invert(self, value, tol=1e-13):
        """Time ``t`` with ``integral(t) == value`` (unwrapped)."""
        value = np.asarray(value, dtype=float)
        k = np.floor(value / self.total)
        rem = value - k * self.total
        idx = np.clip(np.searchsorted(self.cum, rem, side="right") - 1, 0, len(self.nodes) - 2)
        lo = self.nodes[idx].copy()
        hi = self.nodes[idx + 1].copy()
        target = rem - self.cum[idx]
        inside = self.inside[idx]
        t = lo + (hi - lo) * np.clip(target / (self.cum[idx + 1] - self.cum[idx]), 0, 1)
        for _ in range(60):
            g = self._gl(lo * 0 + self.nodes[idx], t, inside) - target
            lo = np.where(g < 0, t, lo)
            hi = np.where(g >= 0, t, hi)
            dg = self._integrand(t, inside)
            tn = t - g / dg
            bad = (tn <= lo) | (tn >= hi)
            tn = np.where(bad, 0.5 * (lo + hi), tn)
            done = np.all(np.abs(tn - t) <= tol * np.maximum(1.0, np.abs(t)))
            t = tn
            if done:
                break
        else:
            from .billiard import NumericalError
            raise NumericalError("angle inversion did not converge")
        out = t + k * PERIOD
        return float(out) if out.ndim == 0 else out


class Charts:
    """Angle tables and action formulas for one configuration."""

    def __init__(self, params, profile, n_nodes=4096):
        self.params = params
        self.profile = profile
        self.upper = AngleTable(profile, params.t1_star, params.t2_star, "U", n_nodes)
        self.lower = AngleTable(profile, params.t1_star, params.t2_star, "L", n_nodes)

    def norm(self, chart):
        return self.params.L_star if chart in ("U", "F") else self.params.M_star

    def table(self, chart):
        return self.upper if chart in ("U", "F") else self.lower

    # -- angles -----------------------------------------------------------
    def angle(self, t, chart):
        """Unwrapped angle; strictly increasing in ``t`` with ``angle(t+2) = angle(t) + 2``."""
        tab = self.table(chart)
        return 2.0 * tab.integral(t) / tab.total

    def time_of_angle(self, angle, chart):
        tab = self.table(chart)
        return tab.invert(np.asarray(angle) * tab.total / 2.0)

    # -- actions ----------------------------------------------------------
    def action(self, t, v, chart):
        if chart == "F":
            return self.params.L_star * np.asarray(v) / 2.0
        w, wd, wdd = chamber_widths(self.profile, self.params, t, chart)
        return 0.5 * self.norm(chart) * (w * v + w * wd + w * w * wdd / (3.0 * v))

    def speed(self, t, action, chart):
        """Invert the action formula for ``v`` (the large root of a quadratic)."""
        if chart == "F":
            return 2.0 * np.asarray(action) / self.params.L_star
        w, wd, wdd = chamber_widths(self.profile, self.params, t, chart)
        # w v^2 + (w w' - 2A/N) v + w^2 w''/3 = 0
        b = w * wd - 2.0 * np.asarray(action) / self.norm(chart)
        c = w * w * wdd / 3.0
        disc = np.sqrt(b * b - 4.0 * w * c)
        big = (-b - np.sign(b) * disc) / (2.0 * w)
        return big

    # -- points -----------------------------------------------------------
    def to_adiabatic(self, t, v, chart):
        v = float(v)
        if chart in ("U", "F") and v <= 0 or chart == "L" and v >= 0:
            raise ChartDomainError(f"chart {chart} needs {'v > 0' if chart != 'L' else 'v < 0'}, got v={v}")
        a = self.action(t, v, chart)
        if not a > 0:
            raise ChartDomainError(f"non-positive action {a} in chart {chart}")
        return AdiabaticPoint(chart, float(self.angle(t, chart) % PERIOD), float(a))

    def from_adiabatic(self, p, period_index=0):
        t = float(self.time_of_angle(p.angle, p.chart)) + PERIOD * period_index
        return t, float(self.speed(t, p.action, p.chart))

    # -- strips -----------------------------------------------------------
    def _anchor(self, strip):
        p = self.params
        return p.t1_star if strip == "R1" else p.t2_star

    def strip_from_collision(self, t, v, strip):
        """Strip coordinates of the collision ``(t, v)`` taken just after the anchor time.

        The rescaled angle offset is integrated directly from the anchor, so
        no table round-off enters the first coordinate.
        """
        chart = STRIP_CHART[strip]
        t = np.asarray(t, dtype=float)
        anchor = self._anchor(strip)
        t_a = anchor + PERIOD * np.floor((t - anchor) / PERIOD)
        if strip == "R1":
            first = np.asarray(v) * (t - t_a)
            second = np.asarray(v) / 2.0
        else:
            a = self.action(t, v, chart)
            dang = 2.0 * self.table(chart).local(t_a, t) / self.norm(chart)
            first = a * dang
            second = a / self.norm(chart)
        return StripPoint(strip, first, second) if np.ndim(first) else StripPoint(strip, float(first), float(second))

    def collision_from_strip(self, sp, period_index=0):
        """Inverse of :meth:`strip_from_collision`; returns ``(t, v)``."""
        chart = STRIP_CHART[sp.strip]
        anchor = self._anchor(sp.strip) + PERIOD * period_index
        if sp.strip == "R1":
            v = 2.0 * np.asarray(sp.second)
            return anchor + np.asarray(sp.first) / v, v
        N = self.norm(chart)
        action = np.asarray(sp.second) * N
        target = np.asarray(sp.first) / action * N / 2.0   # required local integral
        tab = self.table(chart)
        # Newton on the local integral; the integrand is w^-2 near the anchor
        w0 = chamber_widths(self.profile, self.params, anchor, chart)[0]
        t = anchor + target * w0 * w0
        for _ in range(50):
            g = tab.local(anchor, t) - target
            w = chamber_widths(self.profile, self.params, t, chart)[0]
            step = g * w * w
            t = t - step
            if np.all(np.abs(step) <= 1e-16 * max(1.0, abs(anchor))):
                break
        return t, self.speed(t, action, chart)


def strip_coords(p, strip, params, charts=None, t=None):
    """Strip point from an adiabatic point: ``first = A (angle - anchor)``, ``second = A / N``.

    ``chart`` and ``strip`` must match (F with R1, U with R2plus, L with
    R2minus).  The angle offset is reduced into ``[-1, 1)``.
    """
    if STRIP_CHART.get(strip) != p.chart:
        raise ChartDomainError(f"chart {p.chart} cannot carry strip {strip}")
    if p.chart == "F":
        N, anchor = params.L_star, params.theta1_star
    elif p.chart == "U":
        N, anchor = params.L_star, params.theta2_star
    else:
        N, anchor = params.M_star, params.zeta2_star
    d = (p.angle - anchor + 1.0) % PERIOD - 1.0
    return StripPoint(strip, p.action * d, p.action / N)


def from_strip(sp, params):
    """Inverse of :func:`strip_coords`."""
    chart = STRIP_CHART[sp.strip]
    if chart == "F":
        N, anchor = params.L_star, params.theta1_star
    elif chart == "U":
        N, anchor = params.L_star, params.theta2_star
    else:
        N, anchor = params.M_star, params.zeta2_star
    action = sp.second * N
    return AdiabaticPoint(chart, (anchor + sp.first / action) % PERIOD, action)


@lru_cache(maxsize=16)
def charts_for(params, profile):
    return Charts(params, profile)


def to_adiabatic(t, v, chart, params, profile):
    return charts_for(params, profile).to_adiabatic(t, v, chart)


def from_adiabatic(p, params, profile):
    return charts_for(params, profile).from_adiabatic(p)


def action_jumps(level, t0, n, params, profile, charts=None, chamber="upper_left"):
    """Actions at ``n`` successive slit collisions inside one left chamber.

    The orbit starts on the slit at ``t0`` with action ``level``; the
    chamber must stay occupied for the whole run.  Returns the action
    sequence (length ``n + 1``).
    """
    from .billiard import interaction_map
    ch = charts_for(params, profile) if charts is None else charts
    chart = "U" if chamber == "upper_left" else "L"
    v = float(ch.speed(t0, level, chart))
    t = t0
    out = [float(ch.action(t, v, chart))]
    for _ in range(n):
        t, v, c = interaction_map(t, v, params, profile, chamber)
        if c != chamber:
            raise ChartDomainError(f"orbit left {chamber} at t={t}")
        out.append(float(ch.action(t, v, chart)))
    return np.array(out)
