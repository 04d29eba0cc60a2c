"""Normal-form half-revolution maps, the phase-cylinder classifier and P0.

Every function accepts scalars or numpy arrays in the strip coordinates:
``(sigma, Hs)`` on R1, ``(tau, Is)`` on R2plus and ``(rho, Js)`` on R2minus,
where the second coordinate is the action divided by its normalising
integral.

Two flavours of the correction terms exist (``mode``):

``"derived"`` (default)
    Adds the action kick from the slit's velocity jump at ``t = 0 (mod 2)``,
    which the ball always meets inside a left chamber on the way from R2 to
    R1, and uses the constant correction ``C = -(1/24)(w- w+)^2 X`` at every
    switch.  This is the version that agrees with exact dynamics to
    ``O(E^-2)``.
``"verbatim"``
    The displayed formulas with no seam kick and the original constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .charts import StripPoint

MAP_IDS = ("U12", "U21", "Ll12", "Ls12", "Ll21", "Ls21")
REGION_TAGS = ("U_en", "L_en_long", "L_en_short", "L_ex_long", "L_ex_short")

# route codes shared with the exact simulator (entry_exit), plus forced entries of P0
ROUTE_UPPER, ROUTE_LL, ROUTE_LS, ROUTE_SL, ROUTE_SS, ROUTE_FL, ROUTE_FS = range(7)
ROUTE_NAMES = ("upper", "lower_long_long", "lower_long_short", "lower_short_long",
               "lower_short_short", "forced_long", "forced_short")
# composition labels (exit after entry)
ROUTE_LABELS = ("U", "Ll∘Ll", "Ls∘Ll", "Ll∘Ls", "Ls∘Ls", "Ll∘F", "Ls∘F")

EPS_REGION = 10.0


class RegionError(ValueError):
    """A point was handed to a map outside that map's region."""

    def __init__(self, requested, found):
        super().__init__(f"map {requested} requested for a point classified as {found}")
        self.requested = requested
        self.found = found


@dataclass(frozen=True)
class Region:
    tag: str
    component_index: int
    ambiguous: bool = False


@dataclass(frozen=True)
class ModifiedSystemConfig:
    V_star: float
    V_0: float
    ell: float = 0.99

    def check(self, params):
        if not self.V_0 > self.V_star >= 1.0:
            raise ValueError("need V_0 > V_star >= 1")
        if not 0.0 < self.ell < 1.0:
            raise ValueError("ell must lie in (0, 1)")
        f1, f2 = params.f1, params.f2
        if not (self.ell * f2 / f1 > 1.0 and self.ell * (1 - f2) / (1 - f1) < 1.0):
            raise ValueError("ell violates ell*f2/f1 > 1 > ell*(1-f2)/(1-f1)")
        return self

    @classmethod
    def default(cls, V_star, ell=0.99):
        return cls(float(V_star), 10.0 * float(V_star), ell)


# ---------------------------------------------------------------------------
# compensated phase arithmetic
# ---------------------------------------------------------------------------

_SPLIT = 134217729.0  # 2**27 + 1


def _two_prod(a, b):
    """``a*b = p + e`` exactly (Dekker)."""
    p = a * b
    ah = a * _SPLIT
    ah = ah - (ah - a)
    al = a - ah
    bh = b * _SPLIT
    bh = bh - (bh - b)
    bl = b - bh
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def frac2(a, b, c=0.0):
    """``{a*b - c}_2`` in ``[0, 2)`` with the product carried in double-double.

    The integer part of ``a*b`` can be huge; ``fmod`` of the leading part is
    exact so only the fractional signal survives rounding.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    p, e = _two_prod(a, b)
    r = np.fmod(p, 2.0) + (e - np.asarray(c, dtype=float))
    r = np.mod(r, 2.0)
    r = np.where(r >= 2.0, 0.0, r)
    return float(r) if r.ndim == 0 else r


# ---------------------------------------------------------------------------
# spans
# ---------------------------------------------------------------------------

def _spans(params):
    L, M = params.L_star, params.M_star
    return {
        "right": 2.0 * (params.t2_star - params.t1_star),   # = L*(theta2* - theta1*) exactly
        "upper": L * (2.0 + params.theta1_star - params.theta2_star),
        "lower": M * (2.0 + params.zeta1_star - params.zeta2_star),
        "upper_pre": L * (2.0 - params.theta2_star),
        "upper_post": L * params.theta1_star,
        "lower_pre": M * (2.0 - params.zeta2_star),
        "lower_post": M * params.zeta1_star,
    }


def entry_phase(sigma, Hs, params):
    """``u = {L*(theta2* - theta1*) Hs - sigma}_2``."""
    return frac2(_spans(params)["right"], Hs, sigma)


def _seam(first, second, pre, post, kick, kick_q, kick_c, order):
    """Cross t = 0 inside a chamber.  Returns the post-seam phase ``b``,
    the kicked action and the exit phase ``w``."""
    a = frac2(pre, second, first)
    b = 2.0 - a
    s2 = second + kick * (b - 1.0)
    if order == "G_plus_H":
        s2 = s2 + (kick_q * (b - 1.0) ** 2 + kick_c) / second
    w = frac2(post, s2, b)
    return b, s2, w


def exit_phase(first, second, params, consts, chamber="L", mode="derived", order="G_plus_H"):
    """Phase since the last slit hit at the moment the ball leaves the chamber.

    For the lower chamber this is the ``w`` that splits Long from Short exit.
    """
    sp = _spans(params)
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float)
    if mode == "verbatim":
        span = sp["upper"] if chamber == "U" else sp["lower"]
        return frac2(span, second, first)
    if chamber == "U":
        return _seam(first, second, sp["upper_pre"], sp["upper_post"],
                     consts.seam_u, consts.seam_u_p, consts.seam_u_c, order)[2]
    return _seam(first, second, sp["lower_pre"], sp["lower_post"],
                 consts.seam_l, consts.seam_l_p, consts.seam_l_c, order)[2]


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def classify_arrays(sigma, Hs, params):
    """Vectorised R1 classifier.

    Returns ``(tag_code, component_index, ambiguous)`` where tag codes are
    0 = U_en, 1 = L_en_long, 2 = L_en_short.
    """
    f2 = params.f2
    Hs = np.asarray(Hs, dtype=float)
    u = np.asarray(entry_phase(sigma, Hs, params))
    code = np.where(u < f2, 2, np.where(u > 2.0 - f2, 1, 0))
    eps = EPS_REGION / Hs
    amb = (np.abs(u - f2) < eps) | (np.abs(u - (2.0 - f2)) < eps) | (u < eps) | (u > 2.0 - eps)
    comp = np.floor((_spans(params)["right"] * Hs - np.asarray(sigma, dtype=float)) / 2.0).astype(np.int64)
    return code, comp, amb


def classify(p, params, consts=None, V_star=None, mode="derived"):
    """Region and signed class of a strip point on R1 or R2minus.

    The signed class is ``-1`` exactly for points of an ``U_en`` component
    lying entirely above ``V_star`` (``+1`` when ``V_star`` is not given and
    the point is not in ``U_en``).
    """
    if p.strip == "R2plus":
        raise ValueError("R2plus carries no choice of route; classification undefined")
    if p.strip == "R1":
        code, comp, amb = classify_arrays(p.first, p.second, params)
        tag = ("U_en", "L_en_long", "L_en_short")[int(code)]
        s = 1
        if tag == "U_en":
            lowest = (2.0 * int(comp) + params.f2) / _spans(params)["right"]
            s = -1 if V_star is None or lowest >= V_star else 1
        return Region(tag, int(comp), bool(amb)), s
    if p.strip == "R2minus":
        if consts is None and mode == "derived":
            raise ValueError("classifying R2minus in derived mode needs the constants")
        w = exit_phase(p.first, p.second, params, consts, "L", mode)
        amb = min(abs(w - 1.0), w, 2.0 - w) < EPS_REGION / p.second
        tag = "L_ex_short" if w < 1.0 else "L_ex_long"
        comp = int(np.floor(_spans(params)["lower"] * p.second / 2.0))
        return Region(tag, comp, bool(amb)), 1
    raise ValueError(f"unknown strip {p.strip!r}")


def signed_class_arrays(sigma, Hs, params, V_star):
    code, comp, _ = classify_arrays(sigma, Hs, params)
    lowest = (2.0 * comp + params.f2) / _spans(params)["right"]
    return np.where((code == 0) & (lowest >= V_star), -1, 1)


# ---------------------------------------------------------------------------
# half maps
# ---------------------------------------------------------------------------

def half_map_arrays(map_id, first, second, params, consts, order="G_plus_H", mode="derived"):
    """Apply one normal-form half map to coordinate arrays (no region check)."""
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float)
    f1, f2 = params.f1, params.f2
    c = consts
    h = order == "G_plus_H"
    if map_id in ("U12", "Ll12", "Ls12"):
        u = entry_phase(first, second, params)
        if map_id == "U12":
            x = -u / (1.0 - f2) + (2.0 - f2) / (1.0 - f2)
            y = (1.0 - f2) * second + c.delta2 * (x - 1.0)
            if h:
                cst = c.delta2_c if mode == "derived" else c.delta2_pp
                y = y + (c.delta2_p * (x - 1.0) ** 2 + cst) / second
            return x, y
        x = -u / f2 + ((f2 + 2.0) / f2 if map_id == "Ll12" else 1.0)
        y = f2 * second + c.kappa_l * (x - 1.0)
        if h:
            if mode == "derived":
                y = y + (c.entry_l_q * (x - 1.0) ** 2 + c.entry_l_c) / second
            elif map_id == "Ll12":
                y = y + (c.kappa_l_p * (x - 1.0) - c.kappa_l_pp * (x - 1.0) ** 3) / second
            else:
                y = y + (-c.kappa_s_p * (x - 1.0) ** 2 - c.kappa_s_pp) / second
        return x, y
    if map_id == "U21":
        w = exit_phase(first, second, params, c, "U", mode, order)
        act = second
        if mode == "derived":
            sp = _spans(params)
            _, act, _ = _seam(first, second, sp["upper_pre"], sp["upper_post"],
                              c.seam_u, c.seam_u_p, c.seam_u_c, order)
        x = -(1.0 - f1) * w + 2.0 - f1
        y = act / (1.0 - f1) + c.delta1 * (x - 1.0)
        if h:
            cst = c.delta1_c if mode == "derived" else c.delta1_pp
            y = y + (c.delta1_p * (x - 1.0) ** 2 + cst) / act
        return x, y
    if map_id in ("Ll21", "Ls21"):
        act = second
        if mode == "derived":
            sp = _spans(params)
            _, act, w = _seam(first, second, sp["lower_pre"], sp["lower_post"],
                              c.seam_l, c.seam_l_p, c.seam_l_c, order)
        else:
            w = exit_phase(first, second, params, c, "L", "verbatim")
        if map_id == "Ll21":
            x = -f1 * w + 2.0 + f1
            s = x - 2.0          # phase to the first ceiling hit, minus one
            y = act / f1 + c.chi_l * s
            if h:
                if mode == "derived":
                    y = y + (c.exit_l_q * s * s + c.exit_l_c) / act
                else:
                    y = y + (c.chi_l_p + c.chi_l_pp * (x - 1.0)
                             - 0.5 * c.chi_l_pp * (x - 1.0) ** 2) / act
        else:
            x = -f1 * w + f1
            s = x
            y = act / f1 + c.chi_l * s
            if h:
                if mode == "derived":
                    y = y + (c.exit_l_q * s * s + c.exit_l_c) / act
                else:
                    y = y + (c.chi_s_p * (x - 1.0) + 0.5 * c.chi_s_p * (x - 1.0) ** 2
                             - c.chi_s_pp) / act
        return x, y
    raise ValueError(f"unknown map id {map_id!r}")


_SOURCE = {"U12": "R1", "Ll12": "R1", "Ls12": "R1", "U21": "R2plus", "Ll21": "R2minus", "Ls21": "R2minus"}
_TARGET = {"U12": "R2plus", "Ll12": "R2minus", "Ls12": "R2minus", "U21": "R1", "Ll21": "R1", "Ls21": "R1"}
_REGION = {"U12": "U_en", "Ll12": "L_en_long", "Ls12": "L_en_short", "Ll21": "L_ex_long", "Ls21": "L_ex_short"}


def apply_half_map(map_id, p, params, consts, order="G_plus_H", mode="derived", check=True):
    """Apply the half map ``map_id`` to the strip point ``p``.

    The first output coordinate is computed first and substituted into the
    second.  With ``check`` the classifier must agree with ``map_id``.
    """
    if map_id not in MAP_IDS:
        raise ValueError(f"unknown map id {map_id!r}")
    if p.strip != _SOURCE[map_id]:
        raise RegionError(map_id, p.strip)
    if check and map_id in _REGION and np.ndim(p.first) == 0:
        region, _ = classify(p, params, consts, mode=mode)
        if region.tag != _REGION[map_id]:
            raise RegionError(map_id, region.tag)
    x, y = half_map_arrays(map_id, p.first, p.second, params, consts, order, mode)
    return StripPoint(_TARGET[map_id], x, y)


# ---------------------------------------------------------------------------
# revolutions
# ---------------------------------------------------------------------------

def revolution_arrays(sigma, Hs, params, consts, cfg=None, order="G_plus_H", mode="derived"):
    """One revolution R1 -> R1 on arrays.

    With ``cfg`` the modified system P0 is used: on ``U_en`` components that
    lie entirely below ``cfg.V_0`` the linear lower entry replaces the upper
    route.  Returns ``(sigma', Hs', route_code)``.
    """
    sigma = np.asarray(sigma, dtype=float)
    Hs = np.asarray(Hs, dtype=float)
    f2 = params.f2
    span = _spans(params)["right"]
    code, comp, _ = classify_arrays(sigma, Hs, params)
    upper = code == 0
    forced = np.zeros_like(upper)
    if cfg is not None:
        top = (2.0 * comp + 4.0 - f2) / span     # highest energy on the component
        forced = upper & (top < cfg.V_0)
        upper = upper & ~forced
    out_s = np.empty_like(Hs)
    out_h = np.empty_like(Hs)
    route = np.empty(Hs.shape, dtype=np.int64)

    if np.any(upper):
        x, y = half_map_arrays("U12", sigma[upper], Hs[upper], params, consts, order, mode)
        x, y = half_map_arrays("U21", x, y, params, consts, order, mode)
        out_s[upper], out_h[upper] = x, y
        route[upper] = ROUTE_UPPER
    lower = ~upper
    if np.any(lower):
        rho = np.empty(int(lower.sum()))
        js = np.empty_like(rho)
        lc = code[lower]
        lf = forced[lower]
        sl, hl = sigma[lower], Hs[lower]
        for c_id, mid in ((1, "Ll12"), (2, "Ls12")):
            m = (lc == c_id) & ~lf
            if np.any(m):
                rho[m], js[m] = half_map_arrays(mid, sl[m], hl[m], params, consts, order, mode)
        if np.any(lf):
            # forced entry: linear long-entry formula, phase wrapped into [0, 2)
            u = entry_phase(sl[lf], hl[lf], params)
            r = np.mod(-u / f2 + (f2 + 2.0) / f2, 2.0)
            rho[lf] = r
            js[lf] = f2 * hl[lf] + consts.kappa_l * (r - 1.0)
        if mode == "derived":
            sp = _spans(params)
            _, _, w = _seam(rho, js, sp["lower_pre"], sp["lower_post"],
                            consts.seam_l, consts.seam_l_p, consts.seam_l_c, order)
        else:
            w = exit_phase(rho, js, params, consts, "L", "verbatim")
        w = np.asarray(w)
        short = w < 1.0
        xs = np.empty_like(rho)
        ys = np.empty_like(rho)
        for flag, mid in ((False, "Ll21"), (True, "Ls21")):
            m = short == flag
            if np.any(m):
                xs[m], ys[m] = half_map_arrays(mid, rho[m], js[m], params, consts, order, mode)
        out_s[lower], out_h[lower] = xs, ys
        ent = np.where(lf, 2, np.where(lc == 1, 0, 1))   # 0 long, 1 short, 2 forced
        rc = np.where(ent == 2, ROUTE_FL + short, 1 + 2 * ent + short)
        route[lower] = rc
    return out_s, out_h, route


def apply_P(p, params, consts, order="G_plus_H", mode="derived"):
    """Full revolution of the normal-form dynamics from R1 to R1.

    Returns ``(StripPoint on R1, label)`` with the label written as the
    composition exit∘entry, e.g. ``"Ls∘Ll"`` for a long entry then a short
    exit, or ``"U"`` for the upper route.
    """
    if p.strip != "R1":
        raise RegionError("P", p.strip)
    x, y, r = revolution_arrays(p.first, p.second, params, consts, None, order, mode)
    return StripPoint("R1", float(x), float(y)), ROUTE_LABELS[int(r)]


def apply_P0(p, params, consts, cfg, order="G_plus_H", mode="derived"):
    """As :func:`apply_P`, with the forced lower entry below ``cfg.V_0``."""
    if p.strip != "R1":
        raise RegionError("P0", p.strip)
    x, y, r = revolution_arrays(p.first, p.second, params, consts, cfg, order, mode)
    return StripPoint("R1", float(x), float(y)), ROUTE_LABELS[int(r)]


def route_sign(route_code):
    """``+1`` for any lower (accelerating) route, ``-1`` for the upper route."""
    return np.where(np.asarray(route_code) == ROUTE_UPPER, -1, 1)


# ---------------------------------------------------------------------------
# energy envelopes
# ---------------------------------------------------------------------------

def energy_bound_report(sigma, Hs, params, consts, cfg, order="G_plus_H", mode="derived"):
    """Fit the affine envelopes ``|y1 - k y0| <= D`` for the four half routes.

    ``k`` is the leading multiplier of each half route.  Also reports the
    energy above which the fitted envelopes imply the multiplicative bounds
    with ``cfg.ell`` for both full routes, and the violations of those bounds
    among the samples above ``cfg.V_star``.
    """
    f1, f2 = params.f1, params.f2
    sigma = np.asarray(sigma, dtype=float)
    Hs = np.asarray(Hs, dtype=float)
    code, _, _ = classify_arrays(sigma, Hs, params)
    rep = {}

    def fit(name, k, y0, y1):
        if y0.size == 0:
            rep[name] = {"k": k, "D": float("nan"), "n": 0}
            return float("nan")
        D = float(np.max(np.abs(y1 - k * y0)))
        rep[name] = {"k": k, "D": D, "n": int(y0.size)}
        return D

    up = code == 0
    tu, iu = half_map_arrays("U12", sigma[up], Hs[up], params, consts, order, mode)
    d_u12 = fit("U12", 1.0 - f2, Hs[up], iu)
    su, hu = half_map_arrays("U21", tu, iu, params, consts, order, mode)
    d_u21 = fit("U21", 1.0 / (1.0 - f1), iu, hu)
    lo = ~up
    rho = np.empty(int(lo.sum()))
    js = np.empty_like(rho)
    for c_id, mid in ((1, "Ll12"), (2, "Ls12")):
        m = code[lo] == c_id
        rho[m], js[m] = half_map_arrays(mid, sigma[lo][m], Hs[lo][m], params, consts, order, mode)
    d_l12 = fit("L12", f2, Hs[lo], js)
    w = np.asarray(exit_phase(rho, js, params, consts, "L", mode, order))
    hl = np.empty_like(rho)
    for flag, mid in ((False, "Ll21"), (True, "Ls21")):
        m = (w < 1.0) == flag
        _, hl[m] = half_map_arrays(mid, rho[m], js[m], params, consts, order, mode)
    d_l21 = fit("L21", 1.0 / f1, js, hl)

    ell = cfg.ell
    k_up = (1 - f2) / (1 - f1)
    k_lo = f2 / f1
    # z1 >= k z0 - (k21 D12 + D21) >= ell k z0 once z0 >= (k21 D12 + D21)/((1-ell) k)
    v_up = (d_u12 / (1 - f1) + d_u21) / ((1 - ell) * k_up)
    v_lo = (d_l12 / f1 + d_l21) / ((1 - ell) * k_lo)
    rep["implied_V_star"] = {"upper": v_up, "lower": v_lo}
    above_u = Hs[up] >= cfg.V_star
    above_l = Hs[lo] >= cfg.V_star
    r_u = hu / Hs[up]
    r_l = hl / Hs[lo]
    rep["violations"] = {
        "upper": int(np.sum(((r_u < ell * k_up) | (r_u > k_up / ell)) & above_u)),
        "lower": int(np.sum(((r_l < ell * k_lo) | (r_l > k_lo / ell)) & above_l)),
    }
    return rep


# ---------------------------------------------------------------------------
# comparison with exact dynamics
# ---------------------------------------------------------------------------

def _singular_distance(map_id, first, second, params, consts, mode):
    """Distance (in phase units) of input points from the map's singular lines."""
    f2 = params.f2
    if map_id.endswith("12"):
        u = np.asarray(entry_phase(first, second, params))
        cuts = np.array([0.0, f2, 2.0 - f2, 2.0])
        return np.min(np.abs(u[:, None] - cuts[None, :]), axis=1)
    chamber = "U" if map_id == "U21" else "L"
    sp = _spans(params)
    d = np.minimum(first, 2.0 - first)
    if mode == "derived":
        pre = sp["upper_pre"] if chamber == "U" else sp["lower_pre"]
        a = frac2(pre, second, first)
        d = np.minimum(d, np.minimum(a, 2.0 - a))
    w = np.asarray(exit_phase(first, second, params, consts, chamber, mode))
    d = np.minimum(d, np.minimum(w, 2.0 - w))
    if chamber == "L":
        d = np.minimum(d, np.abs(w - 1.0))
    return d


def sample_region(map_id, level, n, params, consts, rng, margin=0.15, mode="derived"):
    """``n`` strip points at energy ``level`` inside the region of ``map_id``.

    The first coordinate is uniform; points closer than ``margin`` (phase
    units) to a singular line are rejected.
    """
    firsts = []
    got = 0
    while got < n:
        x = rng.uniform(0.0, 2.0, size=4 * n)
        y = np.full_like(x, float(level))
        keep = _singular_distance(map_id, x, y, params, consts, mode) > margin
        if map_id.endswith("12"):
            code, _, _ = classify_arrays(x, y, params)
            keep &= code == {"U12": 0, "Ll12": 1, "Ls12": 2}[map_id]
        elif map_id != "U21":
            w = np.asarray(exit_phase(x, y, params, consts, "L", mode))
            keep &= (w < 1.0) == (map_id == "Ls21")
        firsts.append(x[keep])
        got += int(keep.sum())
    return np.concatenate(firsts)[:n], np.full(n, float(level))


def exact_half_map(map_id, first, second, params, profile, charts):
    """Exact image of strip points under the half revolution ``map_id``.

    Returns ``(first', second', ok)``; ``ok`` is false where the orbit was
    aborted or took a different route than ``map_id`` names.
    """
    from . import billiard

    src = _SOURCE[map_id]
    t, v = charts.collision_from_strip(StripPoint(src, first, second))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if map_id.endswith("12"):
        st, th, vh, ch, short = billiard.batch_half_12(t, v, params, profile)
        want = billiard.UPPER if map_id == "U12" else billiard.LOWER
        ok = (st == 1) & (ch == want)
        if map_id != "U12":
            ok &= short == (map_id == "Ls12")
        tgt = _TARGET[map_id]
        th = np.where(ok, th, params.t2_star + 1e-3)
        vh = np.where(ok, vh, 1.0 if tgt == "R2plus" else -1.0)
        out = charts.strip_from_collision(th, vh, tgt)
        return np.asarray(out.first), np.asarray(out.second), ok
    ch = billiard.UPPER if map_id == "U21" else billiard.LOWER
    st, tf, vf, short = billiard.batch_half_21(t, v, ch, params, profile)
    ok = st == 1
    if map_id != "U21":
        ok &= short == (map_id == "Ls21")
    out = charts.strip_from_collision(tf, vf, "R1")
    return np.asarray(out.first), np.asarray(out.second), ok


def normal_form_errors(map_id, level, n, params, profile, consts, charts, rng,
                       order="G_plus_H", mode="derived", margin=0.15):
    """Per-point discrepancies between the normal form and exact dynamics."""
    x, y = sample_region(map_id, level, n, params, consts, rng, margin, mode)
    gx, gy = half_map_arrays(map_id, x, y, params, consts, order, mode)
    ex, ey, ok = exact_half_map(map_id, x, y, params, profile, charts)
    return np.abs(ex - gx)[ok], np.abs(ey - gy)[ok], int((~ok).sum())


def fit_loglog_slope(levels, errs):
    """Least-squares slope of ``log err`` against ``log level``."""
    lx = np.log(np.asarray(levels, dtype=float))
    ly = np.log(np.asarray(errs, dtype=float))
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(np.exp(intercept))


def relative_errors(map_id, level, n, params, profile, consts, charts, rng,
                    order="G_plus_H", mode="derived", margin=0.15):
    """``(phase error / 2, energy error / level, mismatch fraction)`` maxima at one level."""
    ex, ey, bad = normal_form_errors(map_id, level, n, params, profile, consts, charts, rng,
                                     order, mode, margin)
    if ex.size == 0:
        return np.inf, np.inf, 1.0
    return float(ex.max() / 2.0), float(ey.max() / level), bad / n


def calibrate_v_star(params, profile, consts, charts=None, levels=None, n=200, rel=0.01,
                     rng=None, order="G_plus_H", mode="derived"):
    """Smallest level at which every half map's normal form is within ``rel``.

    The error at a level is the largest of the phase error over the period
    2, the energy error over the level, and the fraction of sampled points
    whose exact orbit took another route.  The level must pass and so must
    every larger level of the grid.  Returns ``(V_star or None, rows)``
    with rows ``(level, map_id, phase_rel, energy_rel, mismatch)``.
    """
    from .charts import charts_for
    charts = charts_for(params, profile) if charts is None else charts
    rng = np.random.default_rng(0) if rng is None else rng
    levels = [125.0 * 2 ** k for k in range(7)] if levels is None else sorted(levels)
    rows, ok = [], []
    for lev in levels:
        worst = 0.0
        for mid in MAP_IDS:
            a, b, c = relative_errors(mid, lev, n, params, profile, consts, charts, rng, order, mode)
            rows.append((float(lev), mid, a, b, c))
            worst = max(worst, a, b, c)
        ok.append(worst < rel)
    v = None
    for i in range(len(levels) - 1, -1, -1):
        if not ok[i]:
            break
        v = float(levels[i])
    return v, rows
