"""Derivative matrices of the linear parts, eigenstructure and the common unstable cone.

Tangent vectors are written ``(d first, d second)`` in strip coordinates.  A
cone is stored by the two slopes ``d second / d first`` of its edges; it is
the set of directions between the edges that contains the vertical.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .maps import _spans, half_map_arrays, sample_region, MAP_IDS

MATRIX_IDS = ("U12", "U21", "L12", "L21")
MAP_MATRIX = {"U12": "U12", "U21": "U21", "Ll12": "L12", "Ls12": "L12", "Ll21": "L21", "Ls21": "L21"}


class NotHyperbolic(ValueError):
    pass


class ConeConstructionFailed(RuntimeError):
    def __init__(self, msg, matrix_id=None):
        super().__init__(msg)
        self.matrix_id = matrix_id


@dataclass(frozen=True)
class ConeSpec:
    slope_low: float     # negative edge (d second / d first)
    slope_high: float    # positive edge
    gauge: int
    margins: dict = field(default_factory=dict, compare=False)

    @property
    def inverse_bounds(self):
        """The cone as ``d first / d second`` in ``[lo, hi]`` with ``lo < 0 < hi``."""
        return 1.0 / self.slope_low, 1.0 / self.slope_high

    def contains(self, vecs, strict=True):
        vecs = np.atleast_2d(vecs)
        lo, hi = self.inverse_bounds
        dy = vecs[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = vecs[:, 0] / dy
        ok = (r > lo) & (r < hi) if strict else (r >= lo) & (r <= hi)
        return ok & (dy != 0)

    def directions(self, n):
        """``n`` unit vectors spanning the cone, edges included."""
        lo, hi = self.inverse_bounds
        r = np.linspace(lo, hi, n)
        v = np.stack([r, np.ones_like(r)], axis=1)
        return v / np.linalg.norm(v, axis=1)[:, None]


def vertical_cone(width=1e-6):
    """A thin cone around the vertical direction.

    Not invariant in general; it stands in for the common cone when
    measuring curve statistics of vertical families on profiles where
    :func:`common_cone` fails.
    """
    return ConeSpec(-1.0 / width, 1.0 / width, 0, {"vertical_only": True})


@dataclass(frozen=True)
class ExpansionRates:
    per_map: dict            # map id -> (lambda_P, Lambda_P)
    lambda_F: float
    Lambda_F: float


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

def _shear(w, delta, span):
    """Derivative of ``(x, y) -> (-(span*y - x)/w + c, w*y + delta*(x' - 1))``."""
    return np.array([[1.0 / w, -span / w],
                     [delta / w, w - delta * span / w]])


def _exit(w, delta, span):
    """Derivative of ``(x, y) -> (-w*(span*y - x) + c, y/w + delta*(x' - 1))``."""
    return np.array([[w, -w * span],
                     [delta * w, 1.0 / w - delta * w * span]])


def dg_matrix(matrix_id, params, consts, mode="verbatim"):
    """Derivative of a linear part G.

    ``mode="verbatim"`` gives the four displayed matrices.  ``mode="derived"``
    composes the exit matrices with the seam kick that the derived maps
    apply on the way from R2 to R1; both versions have unit determinant.
    Map ids ``Ll12``/``Ls12`` and ``Ll21``/``Ls21`` share one matrix.
    """
    matrix_id = MAP_MATRIX.get(matrix_id, matrix_id)
    sp = _spans(params)
    f1, f2 = params.f1, params.f2
    if matrix_id == "U12":
        return _shear(1.0 - f2, consts.delta2, sp["right"])
    if matrix_id == "L12":
        return _shear(f2, consts.kappa_l, sp["right"])
    if matrix_id == "U21":
        if mode == "verbatim":
            return _exit(1.0 - f1, consts.delta1, sp["upper"])
        return _exit(1.0 - f1, consts.delta1, sp["upper_post"]) @ _seam_matrix(consts.seam_u, sp["upper_pre"])
    if matrix_id == "L21":
        if mode == "verbatim":
            return _exit(f1, consts.chi_l, sp["lower"])
        return _exit(f1, consts.chi_l, sp["lower_post"]) @ _seam_matrix(consts.seam_l, sp["lower_pre"])
    raise ValueError(f"unknown matrix id {matrix_id!r}")


def _seam_matrix(kick, pre):
    # (x, y) -> (b, y + kick (b - 1)),  b = 2 - (pre*y - x)
    return np.array([[1.0, -pre], [kick, 1.0 - kick * pre]])


def eigen(m):
    """Unstable eigenvalue (modulus) and unit eigenvectors ``e_u``, ``e_s``.

    Eigenvectors are oriented with non-negative second component.
    """
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1]
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    disc = tr * tr - 4.0 * det
    if disc <= 0:
        raise NotHyperbolic(f"trace {tr} gives no real eigenvalue off the unit circle")
    root = math.sqrt(disc)
    lam_u = 0.5 * (tr + math.copysign(root, tr))
    lam_s = det / lam_u
    if abs(lam_u) <= 1.0:
        raise NotHyperbolic(f"no expanding eigenvalue (|lambda| = {abs(lam_u)})")

    def vec(lam):
        a, b, c, d = m[0, 0], m[0, 1], m[1, 0], m[1, 1]
        # pick the better-conditioned row of (m - lam I) v = 0
        if abs(b) + abs(a - lam) >= abs(c) + abs(d - lam):
            v = np.array([b, lam - a])
        else:
            v = np.array([lam - d, c])
        v = v / np.linalg.norm(v)
        return -v if v[1] < 0 or (v[1] == 0 and v[0] < 0) else v

    return abs(lam_u), vec(lam_u), vec(lam_s)


def _angle(v):
    """Direction angle mod pi in ``[0, pi)``."""
    return math.atan2(v[1], v[0]) % math.pi


def _eigen_cone(m, k):
    """Edges (angles mod pi) of ``{|c_u| > k |c_s|}`` around ``e_u``."""
    _, eu, es = eigen(m)
    # edges are c_u e_u +- (1/k) e_s
    e1 = eu + es / k
    e2 = eu - es / k
    return _angle(e1), _angle(e2), _angle(eu)


def _interval_around(center, a, b):
    """Signed offsets of edges ``a``, ``b`` relative to ``center`` on the circle mod pi."""
    def off(x):
        d = (x - center + 0.5 * math.pi) % math.pi - 0.5 * math.pi
        return d
    lo, hi = sorted((off(a), off(b)))
    return lo, hi


def common_cone(params, consts, mode="derived", k_max=64, n_check=360):
    """Intersect the eigen-cones of the four matrices and verify invariance.

    The gauge ``k`` is the smallest integer from 2 to ``k_max`` for which
    the intersection contains the vertical and every unstable eigenvector,
    excludes every stable one, and is mapped into itself by each matrix
    (checked on ``n_check`` directions).
    """
    mats = {mid: dg_matrix(mid, params, consts, mode) for mid in MATRIX_IDS}
    try:
        eig = {mid: eigen(m) for mid, m in mats.items()}
    except NotHyperbolic as exc:
        bad = next(mid for mid, m in mats.items() if not _is_hyp(m))
        raise ConeConstructionFailed(f"matrix {bad} is not hyperbolic: {exc}", bad) from exc
    vertical = 0.5 * math.pi
    last = None
    for k in range(2, k_max + 1):
        lo, hi = -0.5 * math.pi, 0.5 * math.pi
        for mid, m in mats.items():
            a, b, _ = _eigen_cone(m, k)
            ilo, ihi = _interval_around(vertical, a, b)
            # the eigen-cone must itself contain the vertical for a common cone to exist
            if not ilo < 0.0 < ihi:
                lo, hi = 1.0, -1.0
                last = mid
                break
            lo, hi = max(lo, ilo), min(hi, ihi)
        if not lo < 0.0 < hi:
            continue
        cone = _cone_from_offsets(lo, hi, k)
        ok, offender, margins = _check_cone(cone, mats, eig, n_check)
        if ok:
            return ConeSpec(cone.slope_low, cone.slope_high, k, margins)
        last = offender
    raise ConeConstructionFailed(f"no invariant common cone for gauges 2..{k_max}", last)


def _is_hyp(m):
    try:
        eigen(m)
        return True
    except NotHyperbolic:
        return False


def _cone_from_offsets(lo, hi, k):
    # offsets are angles relative to the vertical; slope of direction at angle pi/2 + d is -cot(d)
    s_low = -1.0 / math.tan(hi) if hi != 0 else -math.inf      # left of vertical -> negative slope
    s_high = -1.0 / math.tan(lo) if lo != 0 else math.inf
    return ConeSpec(s_low, s_high, k)


def _check_cone(cone, mats, eig, n_check):
    dirs = cone.directions(n_check)
    margins = {}
    for mid, m in mats.items():
        img = dirs @ m.T
        if not np.all(cone.contains(img)):
            return False, mid, margins
        _, eu, es = eig[mid]
        if not cone.contains(eu[None, :])[0] or cone.contains(es[None, :], strict=False)[0]:
            return False, mid, margins
        lo, hi = cone.inverse_bounds
        # angular distance of e_s from the cone
        a_s = math.atan2(es[1], es[0])
        edges = [math.atan2(1.0, lo), math.atan2(1.0, hi)]
        margins[mid] = float(min(abs((a_s - e + 0.5 * math.pi) % math.pi - 0.5 * math.pi) for e in edges))
    return True, None, margins


def cone_expansion_bound(lam, k):
    """Lower bound ``(k*lam - 1/lam)/(k + 1)`` on expansion inside ``C_{u,k}``."""
    return (k * lam - 1.0 / lam) / (k + 1.0)


def expansion_rates(cone, params, consts, mode="derived", n=721):
    """Minimal and maximal Euclidean stretch of each linear part inside ``cone``."""
    dirs = cone.directions(n)
    per = {}
    for mid in MAP_IDS:
        m = dg_matrix(mid, params, consts, mode)
        s = np.linalg.norm(dirs @ m.T, axis=1)
        per[mid] = (float(s.min()), float(s.max()))
    lam_f = min(per["U12"][0] * per["U21"][0], per["Ll12"][0] * per["Ll21"][0])
    Lam_f = max(per["U12"][1] * per["U21"][1], per["Ll12"][1] * per["Ll21"][1])
    return ExpansionRates(per, lam_f, Lam_f)


# ---------------------------------------------------------------------------
# invariance for the full maps
# ---------------------------------------------------------------------------

def numerical_jacobian(map_id, x, y, params, consts, order="G_plus_H", mode="derived", rel=1e-6):
    """Central-difference Jacobians of a half map at arrays of points.

    Returns an array of shape ``(n, 2, 2)``.  Both steps are ``rel``: the
    exit maps stretch the energy direction by ``O(10^4)``, so a step
    proportional to the energy would wrap the periodic coordinate.
    Differences of the periodic coordinate are unwrapped mod 2.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = rel
    out = np.empty(x.shape + (2, 2))

    def dphase(a1, a0):
        return (a1 - a0 + 1.0) % 2.0 - 1.0

    a1, b1 = half_map_arrays(map_id, x + h, y, params, consts, order, mode)
    a0, b0 = half_map_arrays(map_id, x - h, y, params, consts, order, mode)
    out[..., 0, 0] = dphase(a1, a0) / (2 * h)
    out[..., 1, 0] = (b1 - b0) / (2 * h)
    a1, b1 = half_map_arrays(map_id, x, y + h, params, consts, order, mode)
    a0, b0 = half_map_arrays(map_id, x, y - h, params, consts, order, mode)
    out[..., 0, 1] = dphase(a1, a0) / (2 * h)
    out[..., 1, 1] = (b1 - b0) / (2 * h)
    return out


def verify_cone_invariance(cone, params, consts, V_star, n=100_000, rng=None,
                           use_full_P=True, mode="derived", levels=None):
    """Monte Carlo check that the half maps send cone vectors into the cone.

    Points are drawn in each map's region at energies log-uniform on
    ``[V_star, 8 V_star]`` (or the given ``levels``) away from singular
    lines; tangents are uniform in angle inside the cone.  Returns a report
    with violation counts and the minimal stretch per map.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    order = "G_plus_H" if use_full_P else "G_only"
    per_map = -(-n // len(MAP_IDS))
    lo, hi = cone.inverse_bounds
    rep = {"n": 0, "violations": 0, "min_stretch": math.inf, "per_map": {}}
    for mid in MAP_IDS:
        if levels is None:
            lv = V_star * np.exp(rng.uniform(0.0, math.log(8.0), size=8))
        else:
            lv = np.asarray(levels, dtype=float)
        xs, ys = [], []
        for L in lv:
            x, y = sample_region(mid, L, max(1, -(-per_map // len(lv))), params, consts, rng,
                                 margin=0.02, mode=mode)
            xs.append(x)
            ys.append(y)
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        jac = numerical_jacobian(mid, x, y, params, consts, order, mode)
        ang = rng.uniform(np.arctan(lo), np.arctan(hi), size=x.size)
        v = np.stack([np.tan(ang), np.ones_like(ang)], axis=1)
        v /= np.linalg.norm(v, axis=1)[:, None]
        img = np.einsum("nij,nj->ni", jac, v)
        inside = cone.contains(img)
        stretch = np.linalg.norm(img, axis=1)
        viol = int((~inside).sum())
        rep["per_map"][mid] = {"n": int(x.size), "violations": viol,
                               "min_stretch": float(stretch.min())}
        rep["n"] += int(x.size)
        rep["violations"] += viol
        rep["min_stretch"] = min(rep["min_stretch"], float(stretch.min()))
    return rep
