"""Unstable curves under the normal-form dynamics.

A curve is a polyline on one strip with a measure weight per segment.  A
half step maps every vertex, refines segments whose images are long or bent,
and cuts wherever the branch label of the half map changes.  Branch labels
are the integer parts discarded by the phase reductions (entry component,
seam wrap, exit wrap) together with the route, so two points with equal
labels lie on the same smooth branch.  For exact dynamics only the route is
known and cuts are found by jump detection.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import math

import numpy as np

from .maps import (
    _spans, _seam, classify_arrays, entry_phase, frac2, half_map_arrays,
)

STRIPS = ("R1", "R2plus", "R2minus")


class RefinementOverflow(RuntimeError):
    pass


class ConeViolation(RuntimeError):
    def __init__(self, msg, segments=None):
        super().__init__(msg)
        self.segments = segments


class CurveError(ValueError):
    pass


@dataclass
class UnstableCurve:
    strip: str
    points: np.ndarray              # (n, 2) strip coordinates
    weights: np.ndarray             # (n-1,) measure carried by each segment
    complete: tuple = (False, False)   # endpoint lies on a cut
    itinerary: tuple = ()           # +1 lower route / -1 upper route per revolution
    entry: int = -1                 # entry label of the half revolution in progress

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 2:
            raise CurveError("a curve needs at least two vertices")
        if self.weights is None:
            self.weights = self.segment_lengths()
        self.weights = np.asarray(self.weights, dtype=float)

    @classmethod
    def segment(cls, strip, center, direction, length, n=2):
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        s = np.linspace(-0.5, 0.5, n)[:, None] * length
        pts = np.asarray(center, dtype=float)[None, :] + s * d[None, :]
        return cls(strip, pts, None)

    def segment_lengths(self):
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def length(self):
        return float(self.segment_lengths().sum())

    @property
    def measure(self):
        return float(self.weights.sum())

    def check(self, cone=None, V_star=None, max_seg=None):
        """Raise if an invariant of unstable curves is broken."""
        if V_star is not None and np.min(self.points[:, 1]) <= V_star:
            raise CurveError(f"energy {np.min(self.points[:, 1])} not above V_* = {V_star}")
        if cone is not None:
            _check_cone(self, cone)
        if max_seg is not None and np.max(self.segment_lengths()) > max_seg * (1 + 1e-9):
            raise CurveError("vertex spacing exceeds max_seg")


def _check_cone(curve, cone):
    d = np.diff(curve.points, axis=0)
    keep = np.linalg.norm(d, axis=1) > 0
    ok = cone.contains(d[keep]) | cone.contains(-d[keep])
    if not np.all(ok):
        bad = np.where(keep)[0][~ok]
        raise ConeViolation(f"{bad.size} segment(s) on {curve.strip} leave the cone", bad)


# ---------------------------------------------------------------------------
# half steps with branch labels
# ---------------------------------------------------------------------------

def _wrap_count(a, b, c, reduced):
    """Integer ``k`` with ``a*b - c = reduced + 2k``."""
    return np.rint((np.asarray(a) * np.asarray(b) - np.asarray(c) - reduced) / 2.0).astype(np.int64)


class NormalFormStep:
    """Half steps of P (or P0 with ``cfg``) with branch labels."""

    def __init__(self, params, consts, cfg=None, order="G_plus_H", mode="derived"):
        self.params, self.consts, self.cfg = params, consts, cfg
        self.order, self.mode = order, mode
        self.sp = _spans(params)

    def entry(self, x, y):
        """R1 -> R2.  Returns images, target strip codes (1 upper, 2 lower) and labels."""
        p = self.params
        code, comp, _ = classify_arrays(x, y, p)
        kind = code.copy()                        # 0 upper, 1 long, 2 short, 3 forced
        if self.cfg is not None:
            top = (2.0 * comp + 4.0 - p.f2) / self.sp["right"]
            kind = np.where((code == 0) & (top < self.cfg.V_0), 3, kind)
        ox = np.empty_like(x)
        oy = np.empty_like(y)
        for k, mid in ((0, "U12"), (1, "Ll12"), (2, "Ls12")):
            m = kind == k
            if np.any(m):
                ox[m], oy[m] = half_map_arrays(mid, x[m], y[m], p, self.consts, self.order, self.mode)
        m = kind == 3
        if np.any(m):
            u = entry_phase(x[m], y[m], p)
            r = np.mod(-u / p.f2 + (p.f2 + 2.0) / p.f2, 2.0)
            ox[m] = r
            oy[m] = p.f2 * y[m] + self.consts.kappa_l * (r - 1.0)
        strip = np.where(kind == 0, 1, 2)
        labels = np.stack([kind, comp], axis=1)
        return ox, oy, strip, labels

    def exit(self, x, y, chamber):
        """R2 -> R1 from the upper (``"U"``) or lower (``"L"``) strip."""
        p, c = self.params, self.consts
        if chamber == "U":
            pre, post, kick, kq, kc = (self.sp["upper_pre"], self.sp["upper_post"],
                                       c.seam_u, c.seam_u_p, c.seam_u_c)
            span = self.sp["upper"]
        else:
            pre, post, kick, kq, kc = (self.sp["lower_pre"], self.sp["lower_post"],
                                       c.seam_l, c.seam_l_p, c.seam_l_c)
            span = self.sp["lower"]
        if self.mode == "derived":
            a = frac2(pre, y, x)
            na = _wrap_count(pre, y, x, a)
            b, s2, w = _seam(x, y, pre, post, kick, kq, kc, self.order)
            nw = _wrap_count(post, s2, b, w)
        else:
            w = frac2(span, y, x)
            na = np.zeros(x.shape, dtype=np.int64)
            nw = _wrap_count(span, y, x, w)
        if chamber == "U":
            ox, oy = half_map_arrays("U21", x, y, p, c, self.order, self.mode)
            short = np.zeros(x.shape, dtype=np.int64)
        else:
            short = (np.asarray(w) < 1.0).astype(np.int64)
            ox = np.empty_like(x)
            oy = np.empty_like(y)
            for flag, mid in ((0, "Ll21"), (1, "Ls21")):
                m = short == flag
                if np.any(m):
                    ox[m], oy[m] = half_map_arrays(mid, x[m], y[m], p, c, self.order, self.mode)
        return ox, oy, np.stack([short, na, nw], axis=1)

    def __call__(self, strip, pts):
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        if strip == "R1":
            ox, oy, tgt, lab = self.entry(x, y)
        else:
            ox, oy, lab = self.exit(x, y, "U" if strip == "R2plus" else "L")
            tgt = np.zeros(x.shape, dtype=np.int64)
        return np.stack([ox, oy], axis=1), tgt, lab


class ExactStep:
    """Half steps of the billiard itself; labels carry the route only."""

    jumps = True

    def __init__(self, params, profile, charts=None):
        from .charts import charts_for
        self.params, self.profile = params, profile
        self.charts = charts if charts is not None else charts_for(params, profile)

    def __call__(self, strip, pts):
        from . import billiard
        from .charts import StripPoint
        ch = self.charts
        t, v = ch.collision_from_strip(StripPoint(strip, pts[:, 0], pts[:, 1]))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        out = np.full(pts.shape, np.nan)
        if strip == "R1":
            st, th, vh, chm, short = billiard.batch_half_12(t, v, self.params, self.profile)
            ok = st == 1
            tgt = np.where(chm == billiard.UPPER, 1, 2)
            for code, name in ((1, "R2plus"), (2, "R2minus")):
                m = ok & (tgt == code)
                if np.any(m):
                    sp = ch.strip_from_collision(th[m], vh[m], name)
                    out[m, 0], out[m, 1] = sp.first, sp.second
            lab = np.stack([np.where(ok, chm * 2 + short, -1)], axis=1).astype(np.int64)
            return out, tgt, lab
        chamber = billiard.UPPER if strip == "R2plus" else billiard.LOWER
        st, tf, vf, short = billiard.batch_half_21(t, v, np.full(t.shape, chamber), self.params, self.profile)
        ok = st == 1
        if np.any(ok):
            sp = ch.strip_from_collision(tf[ok], vf[ok], "R1")
            out[ok, 0], out[ok, 1] = sp.first, sp.second
        lab = np.stack([np.where(ok, short, -1)], axis=1).astype(np.int64)
        return out, np.zeros(t.shape, dtype=np.int64), lab


# ---------------------------------------------------------------------------
# pushforward
# ---------------------------------------------------------------------------

def _half_step(curve, step, max_seg, tol, budget):
    """Map one curve through one half step; returns the list of pieces."""
    P = curve.points
    W = curve.weights
    Q, T, K = step(curve.strip, P)
    done = np.zeros(len(P) - 1, dtype=bool)
    cut = np.zeros(len(P) - 1, dtype=bool)
    scale = np.maximum(1.0, np.abs(P).max())
    eps = max(1e-10 * curve.length, 64 * np.finfo(float).eps * scale)
    jumps = getattr(step, "jumps", False)
    for _ in range(400):
        idx = np.where(~done)[0]
        if idx.size == 0:
            break
        a, b = P[idx], P[idx + 1]
        diff = np.any(K[idx] != K[idx + 1], axis=1)
        qa, qb = Q[idx], Q[idx + 1]
        ilen = np.linalg.norm(qb - qa, axis=1)
        small = np.linalg.norm(b - a, axis=1) <= eps
        mid = 0.5 * (a + b)
        Qm, Tm, Km = step(curve.strip, mid)
        dev = np.linalg.norm(Qm - 0.5 * (qa + qb), axis=1)
        same_m = ~np.any(Km != K[idx], axis=1) & ~diff
        need = diff | (ilen > max_seg) | ((dev > tol) & same_m) | ~np.isfinite(ilen)
        fin = need & small
        if jumps:
            cut[idx[fin]] = True
        else:
            cut[idx[fin & diff]] = True
        done[idx[~need | small]] = True
        ins = idx[need & ~small]
        if ins.size == 0:
            continue
        if len(P) + ins.size > budget:
            raise RefinementOverflow(f"refinement needs more than {budget} vertices")
        sel = need & ~small
        P = np.insert(P, ins + 1, mid[sel], axis=0)
        Q = np.insert(Q, ins + 1, Qm[sel], axis=0)
        T = np.insert(T, ins + 1, Tm[sel])
        K = np.insert(K, ins + 1, Km[sel], axis=0)
        half = 0.5 * W[ins]
        W = W.copy()
        W[ins] = half
        W = np.insert(W, ins + 1, half)
        done = np.insert(done, ins + 1, False)
        cut = np.insert(cut, ins + 1, False)
    else:
        raise RefinementOverflow("refinement did not settle")
    return _split(curve, Q, T, K, W, cut)


def _split(curve, Q, T, K, W, cut):
    pieces = []
    start = 0
    carry = 0.0
    n = len(Q)
    cuts = list(np.where(cut)[0]) + [n - 1]
    for j, c in enumerate(cuts):
        last = c if j < len(cuts) - 1 else n - 1
        seg_w = W[start:last].copy()
        # a cut segment is dropped; its weight goes half to each neighbour
        cw = W[c] if j < len(cuts) - 1 else 0.0
        if seg_w.size == 0:
            carry += cw + 0.0
            if pieces:
                pieces[-1].weights[-1] += carry
                carry = 0.0
            start = c + 1
            continue
        seg_w[0] += carry
        seg_w[-1] += 0.5 * cw
        carry = 0.5 * cw
        strip = STRIPS[int(T[start])] if curve.strip == "R1" else "R1"
        comp = (curve.complete[0] if start == 0 else True,
                curve.complete[1] if last == n - 1 else True)
        pieces.append(UnstableCurve(strip, Q[start:last + 1].copy(), seg_w, comp,
                                    curve.itinerary, int(K[start, 0]) if curve.strip == "R1" else curve.entry))
        start = c + 1
    if carry and pieces:
        pieces[-1].weights[-1] += carry
    return pieces


def _finish_revolution(piece):
    # itinerary sign: +1 when the entry went to the lower chamber
    sign = -1 if piece.entry == 0 else 1
    return replace(piece, itinerary=piece.itinerary + (sign,), entry=-1)


def push_forward(curve, steps, params, consts, cfg=None, dynamics="P0_normal_form",
                 order="G_plus_H", mode="derived", max_seg=0.05, tol=1e-4, cone=None,
                 half_steps=False, profile=None, budget=2_000_000, chop=None, workers=1):
    """Images of ``curve`` under ``steps`` revolutions (or half steps), cut at singularities.

    ``dynamics="P0_normal_form"`` uses P0 when ``cfg`` is given and P
    otherwise; ``"exact"`` needs ``profile``.  With ``chop`` every piece
    longer than ``chop`` is split into equal parts of length in
    ``[chop/2, chop]`` after each revolution.  With ``cone`` each output
    piece is checked and :class:`ConeViolation` is raised on failure.
    """
    if dynamics == "exact":
        if profile is None:
            raise ValueError("exact dynamics needs the profile")
        step = ExactStep(params, profile)
    else:
        step = NormalFormStep(params, consts, cfg, order, mode)
    n_half = steps if half_steps else 2 * steps
    if curve.strip != "R1" and not half_steps:
        raise CurveError("revolutions start on R1")
    cur = [curve]
    for k in range(n_half):
        nxt = []
        run = (lambda c: _half_step(c, step, max_seg, tol, budget))
        if workers > 1 and len(cur) > 1:
            with ThreadPoolExecutor(workers) as ex:
                results = list(ex.map(run, cur))
        else:
            results = [run(c) for c in cur]
        for res in results:
            nxt.extend(res)
        if all(p.strip == "R1" for p in nxt) and any(c.strip != "R1" for c in cur):
            nxt = [_finish_revolution(p) for p in nxt]
            if chop is not None:
                nxt = [q for p in nxt for q in chop_curve(p, chop)]
        if cone is not None:
            for p in nxt:
                _check_cone(p, cone)
        cur = nxt
    return cur


def chop_curve(curve, size):
    """Split a curve longer than ``size`` into equal-length parts in ``[size/2, size]``."""
    L = curve.length
    if L <= size:
        return [curve]
    k = int(math.ceil(L / size))
    seg = curve.segment_lengths()
    s = np.concatenate([[0.0], np.cumsum(seg)])
    out = []
    for j in range(k):
        a, b = L * j / k, L * (j + 1) / k
        out.append(_sub_curve(curve, s, a, b, j == 0, j == k - 1))
    return out


def random_chop(curve, size, rng):
    """One part of :func:`chop_curve` drawn with probability proportional to its measure."""
    L = curve.length
    if L <= size:
        return curve
    k = int(math.ceil(L / size))
    seg = curve.segment_lengths()
    s = np.concatenate([[0.0], np.cumsum(seg)])
    cm = np.concatenate([[0.0], np.cumsum(curve.weights)])
    # measure is linear in arclength inside each segment
    target = rng.uniform(0.0, cm[-1])
    i = int(np.clip(np.searchsorted(cm, target, side="right") - 1, 0, len(seg) - 1))
    frac = 0.0 if curve.weights[i] == 0 else (target - cm[i]) / curve.weights[i]
    j = min(int((s[i] + frac * seg[i]) / L * k), k - 1)
    return _sub_curve(curve, s, L * j / k, L * (j + 1) / k, j == 0, j == k - 1)


def _sub_curve(curve, s, a, b, first, last):
    P, W = curve.points, curve.weights
    seg = np.diff(s)

    def at(x):
        i = int(np.clip(np.searchsorted(s, x, side="right") - 1, 0, len(seg) - 1))
        f = 0.0 if seg[i] == 0 else (x - s[i]) / seg[i]
        return i, f, P[i] + f * (P[i + 1] - P[i])

    ia, fa, pa = at(a)
    ib, fb, pb = at(b)
    if last:
        ib, fb, pb = len(seg) - 1, 1.0, P[-1]
    if ia == ib:
        pts = np.array([pa, pb])
        w = np.array([W[ia] * (fb - fa)])
    else:
        pts = np.vstack([pa, P[ia + 1:ib + 1], pb])
        w = np.concatenate([[W[ia] * (1.0 - fa)], W[ia + 1:ib], [W[ib] * fb]])
    comp = (curve.complete[0] if first else False, curve.complete[1] if last else False)
    return UnstableCurve(curve.strip, pts, w, comp, curve.itinerary, curve.entry)


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------

def _cone_direction(cone, rng, n):
    lo, hi = cone.inverse_bounds
    ang = rng.uniform(np.arctan(lo), np.arctan(hi), size=n)
    d = np.stack([np.tan(ang), np.ones(n)], axis=1)
    return d / np.linalg.norm(d, axis=1)[:, None]


def singular_spacing(params, consts, mode="derived"):
    """Smallest spacing, in the second coordinate, between parallel singular lines.

    Returns ``(s_R1, s_R2)``; along a near-vertical curve these bound how
    far one can travel before meeting a second line of the same family.
    """
    sp = _spans(params)
    f2 = params.f2
    s1 = min(f2, 2.0 - 2.0 * f2) / sp["right"]
    out = []
    for ch, kick in (("upper", consts.seam_u), ("lower", consts.seam_l)):
        pre, post = sp[ch + "_pre"], sp[ch + "_post"]
        if mode == "derived":
            rate_w = abs(post * (1.0 - kick * pre) + pre)
            out.append(2.0 / pre)
        else:
            rate_w = sp[ch]
        gap = 2.0 if ch == "upper" else 1.0
        out.append(gap / rate_w)
    return s1, min(out)


def complexity_scale(params, consts, cone, mode="derived"):
    """Complexity scale ``delta0``.

    Half the smallest of the R1 line spacing and the R2 line spacing pulled
    back by the entry expansion; this is below ``min 1/Lambda_12``.
    """
    from .hyperbolic import expansion_rates
    rates = expansion_rates(cone, params, consts, mode)
    Lam = max(rates.per_map["U12"][1], rates.per_map["Ll12"][1])
    s1, s2 = singular_spacing(params, consts, mode)
    return 0.5 * min(s1, s2 / Lam, 1.0 / Lam)


def complexity_scan(delta0, trials, params, consts, cone, rng=None, levels=(1e3, 1e4),
                    cfg=None, order="G_plus_H", mode="derived", workers=1):
    """Piece counts after one revolution for random short curves.

    Curves have uniform random length below ``delta0``, a direction uniform
    in angle inside the cone and a centre uniform in phase with log-uniform
    energy on ``levels``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    dirs = _cone_direction(cone, rng, trials)
    lens = rng.uniform(0.0, 1.0, size=trials) * delta0
    xs = rng.uniform(0.0, 2.0, size=trials)
    ys = np.exp(rng.uniform(math.log(levels[0]), math.log(levels[1]), size=trials))
    curves = [UnstableCurve.segment("R1", (xs[i], ys[i]), dirs[i], max(lens[i], 1e-12))
              for i in range(trials)]

    def count(c):
        return len(push_forward(c, 1, params, consts, cfg, order=order, mode=mode, max_seg=1.0))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            counts = np.array(list(ex.map(count, curves)))
    else:
        counts = np.array([count(c) for c in curves])
    hist = np.bincount(counts)
    return {"max": int(counts.max()), "hist": hist, "counts": counts, "delta0": float(delta0)}


_ENTRY_IDS = ("U12", "Ll12", "Ls12", "Ll12")


def _jacobians(map_ids, x, y, params, consts, order, mode):
    """Analytic derivative of G plus a central-difference derivative of H."""
    from .hyperbolic import dg_matrix, numerical_jacobian
    J = np.empty((x.size, 2, 2))
    for mid in set(map_ids):
        m = map_ids == mid
        J[m] = dg_matrix(mid, params, consts, mode)
        if order == "G_plus_H":
            full = numerical_jacobian(mid, x[m], y[m], params, consts, "G_plus_H", mode)
            lin = numerical_jacobian(mid, x[m], y[m], params, consts, "G_only", mode)
            J[m] += full - lin
    return J


def track_tangents(points, tangent, n, params, consts, cfg=None, order="G_plus_H", mode="derived",
                   return_tangent=False):
    """Follow points of R1 and a common tangent through ``n`` revolutions.

    Returns ``(log_stretch, keys)``: the log of the one-dimensional
    Jacobian along the curve and an integer array of branch labels per half
    step (equal rows lie on the same piece of the image curve).  The
    forced entry of P0 has the long-entry derivative.  ``tangent`` is one
    vector or one per point; ``return_tangent`` appends the final unit
    tangents to the result.
    """
    step = NormalFormStep(params, consts, cfg, order, mode)
    x, y = np.array(points[:, 0], dtype=float), np.array(points[:, 1], dtype=float)
    t = np.asarray(tangent, dtype=float)
    t = np.tile(t, (x.size, 1)) if t.ndim == 1 else t.copy()
    t /= np.linalg.norm(t, axis=1)[:, None]
    logj = np.zeros(x.size)
    keys = []
    for _ in range(n):
        ox, oy, tgt, lab = step.entry(x, y)
        ids = np.array(_ENTRY_IDS)[lab[:, 0]]
        J = _jacobians(ids, x, y, params, consts, order, mode)
        keys.append(lab)
        x, y, t, logj = _advance(J, t, ox, oy, logj)
        lower = tgt == 2
        ex, ey = np.empty_like(x), np.empty_like(y)
        exl = np.empty((x.size, 3), dtype=np.int64)
        for flag, ch in ((False, "U"), (True, "L")):
            m = lower == flag
            if np.any(m):
                ex[m], ey[m], exl[m] = step.exit(x[m], y[m], ch)
        ids = np.where(lower, np.where(exl[:, 0] == 1, "Ls21", "Ll21"), "U21")
        J = _jacobians(ids, x, y, params, consts, order, mode)
        keys.append(np.column_stack([lower.astype(np.int64), exl]))
        x, y, t, logj = _advance(J, t, ex, ey, logj)
    keys = np.concatenate(keys, axis=1) if keys else np.zeros((x.size, 0), np.int64)
    return (logj, keys, t) if return_tangent else (logj, keys)


def _advance(J, t, ox, oy, logj):
    v = np.einsum("nij,nj->ni", J, t)
    s = np.linalg.norm(v, axis=1)
    return ox, oy, v / s[:, None], logj + np.log(s)


def distortion_estimate(curve, n, params, consts, cfg=None, order="G_plus_H", mode="derived",
                        samples=2001):
    """Sup-ratio distortion ``K`` of ``P^n`` along a straight curve on R1.

    The one-dimensional Jacobian is tracked at ``samples`` points; on each
    piece of the image (points sharing all branch labels) the ratio of the
    largest to the smallest Jacobian is formed and the maximum over pieces
    is returned (always ``>= 1``).
    """
    P = curve.points
    s = np.linspace(0.0, 1.0, samples)
    pts = P[0][None, :] + s[:, None] * (P[-1] - P[0])[None, :]
    logj, keys = track_tangents(pts, P[-1] - P[0], n, params, consts, cfg, order, mode)
    _, grp = np.unique(keys, axis=0, return_inverse=True)
    grp = grp.ravel()
    K = 1.0
    for g in np.unique(grp):
        lj = logj[grp == g]
        if lj.size >= 2:
            K = max(K, float(math.exp(lj.max() - lj.min())))
    return K


def _choose(pieces, rng):
    m = np.array([p.measure for p in pieces])
    return pieces[int(rng.choice(len(pieces), p=m / m.sum()))]


def sample_lineage(curve, depth, params, consts, theta1, rng, cfg=None, order="G_plus_H",
                   mode="derived", max_seg=0.05, half_steps=False):
    """Follow one measure-distributed point of ``curve`` for ``depth`` steps.

    Before each step the current curve is chopped into parts of length in
    ``[theta1/2, theta1]`` and one part is drawn with probability
    proportional to its measure; after the step one image piece is drawn
    the same way.  This draws the point from the curve's measure without
    tracking every piece.  Returns the list of chosen pieces.
    """
    out = []
    c = curve
    for _ in range(depth):
        c = random_chop(c, theta1, rng)
        pieces = push_forward(c, 1, params, consts, cfg, order=order, mode=mode,
                              max_seg=max_seg, half_steps=half_steps)
        c = _choose(pieces, rng)
        out.append(c)
    return out


def route_proportions(curve, params, n_points=None):
    """Measure fractions of a curve on R1 in the lower (``S_{+1}``) and upper (``S_{-1}``) entries.

    Integrates the classifier over each segment at ``n_points`` nodes per
    unit of phase.  Returns ``(frac_plus, frac_minus, info)`` where ``info``
    holds the number of components spanned, a short-curve flag and the
    projection ratio ``|curve| / |y_1 - y_2|``.
    """
    if curve.strip != "R1":
        raise CurveError("route proportions are defined on R1")
    span = _spans(params)["right"]
    P = curve.points
    u0 = span * P[:, 1] - P[:, 0]
    comps = abs(u0[-1] - u0[0]) / 2.0
    plus = 0.0
    for i in range(len(P) - 1):
        nn = int(max(64, (n_points or 20000) * max(1.0, abs(u0[i + 1] - u0[i]) / 2.0)))
        s = (np.arange(nn) + 0.5) / nn
        pts = P[i][None, :] + s[:, None] * (P[i + 1] - P[i])[None, :]
        code, _, _ = classify_arrays(pts[:, 0], pts[:, 1], params)
        plus += curve.weights[i] * np.mean(code != 0)
    total = curve.measure
    dy = abs(P[-1, 1] - P[0, 1])
    info = {"components": comps, "short": comps < 2.0,
            "projection_ratio": curve.length / dy if dy > 0 else math.inf}
    return plus / total, 1.0 - plus / total, info


def itinerary_measure(curve, depth, params, consts, theta1, cfg=None, particles=2000, rng=None,
                      order="G_plus_H", mode="derived", max_seg=0.05):
    """Measure-weighted frequencies of route-sign sequences of length ``depth``.

    Frequencies are Monte Carlo estimates from ``particles`` lineages (see
    :func:`sample_lineage`).  Returns ``(table, tv)`` with ``table[pattern]
    = (frequency, product prediction)`` and the total-variation distance to
    the Bernoulli product.
    """
    from itertools import product
    rng = np.random.default_rng(0) if rng is None else rng
    freq = {}
    for _ in range(particles):
        last = sample_lineage(curve, depth, params, consts, theta1, rng, cfg, order, mode, max_seg)[-1]
        freq[last.itinerary] = freq.get(last.itinerary, 0) + 1.0 / particles
    q = {1: params.f2, -1: 1.0 - params.f2}
    table = {}
    tv = 0.0
    for pat in product((1, -1), repeat=depth):
        pred = float(np.prod([q[s] for s in pat]))
        emp = freq.get(pat, 0.0)
        table[pat] = (emp, pred)
        tv += abs(emp - pred)
    return table, 0.5 * tv


# ---------------------------------------------------------------------------
# growth statistics
# ---------------------------------------------------------------------------

@dataclass
class GrowthConstants:
    delta0: float
    kappa1: int
    K_dist: float
    theta1: float
    theta2: float = float("nan")
    theta3: float = float("nan")
    theta4: float = float("nan")
    theta5: float = float("nan")
    C2: float = float("nan")
    C3: float = float("nan")
    b: float = float("nan")
    b1: float = float("nan")
    b2: float = float("nan")
    a: float = float("nan")
    eps0: float = float("nan")
    lambda_min: float = float("nan")

    @classmethod
    def from_measurements(cls, delta0, kappa1, K_dist, lambda_min):
        th1 = kappa1 * K_dist ** 2 / lambda_min
        # k_* = 2 choice: theta2 = theta1^(1/2)
        return cls(delta0, kappa1, K_dist, th1, theta2=math.sqrt(th1), lambda_min=lambda_min)

    @property
    def long_window(self):
        return 0.5 * self.theta1, self.theta1


def measure_growth_constants(params, consts, cone, cfg=None, rng=None, trials=200,
                             levels=(1e3, 1e4), order="G_plus_H", mode="derived"):
    """Measure ``delta0``, ``kappa1``, ``K`` and ``lambda_min`` and build :class:`GrowthConstants`.

    ``kappa1`` is the largest piece count of :func:`complexity_scan`,
    ``K`` the distortion of one revolution of a ``delta0``-curve at the
    lowest level and ``lambda_min`` the smallest half-map stretch in the
    cone.  Returns ``(constants, scan)``.
    """
    from .hyperbolic import expansion_rates
    rng = np.random.default_rng(0) if rng is None else rng
    delta0 = complexity_scale(params, consts, cone, mode)
    scan = complexity_scan(delta0, trials, params, consts, cone, rng, levels, cfg, order, mode)
    rates = expansion_rates(cone, params, consts, mode)
    lam = min(v[0] for v in rates.per_map.values())
    c = UnstableCurve.segment("R1", (0.7, levels[0]), (0.0, 1.0), delta0)
    K = max(distortion_estimate(c, 1, params, consts, cfg, order, mode), 1.0)
    return GrowthConstants.from_measurements(delta0, scan["max"], K, lam), scan


def geometric_fit(ns, mass):
    """Fit ``log mass = c + n log theta``; returns ``(theta, b, r2)``."""
    ns = np.asarray(ns, dtype=float)
    mass = np.asarray(mass, dtype=float)
    keep = mass > 0
    ns, lm = ns[keep], np.log(mass[keep])
    if ns.size < 2:
        return float("nan"), float("nan"), float("nan")
    slope, icpt = np.polyfit(ns, lm, 1)
    pred = icpt + slope * ns
    ss = np.sum((lm - lm.mean()) ** 2)
    r2 = 1.0 - np.sum((lm - pred) ** 2) / ss if ss > 0 else 1.0
    return float(math.exp(slope)), float(math.exp(icpt)), float(r2)


def first_hit_distribution(curves, theta1, horizon, params, consts, cfg=None,
                           order="G_plus_H", mode="derived", max_seg=1.0, min_len=None):
    """Exact measure of ``{N_bar = n}`` for ``n = 1..horizon`` half steps.

    Only pieces that are still short are pushed further, so the cost is set
    by the short fraction.  Pieces below ``min_len`` (default: 1e3 ulp of
    their energy) can no longer be resolved and are reported as ``lost``.
    """
    total = sum(c.measure for c in curves)
    hit = np.zeros(horizon + 1)
    active = list(curves)
    lost = 0.0
    for n in range(1, horizon + 1):
        nxt = []
        for c in active:
            for p in push_forward(c, 1, params, consts, cfg, order=order, mode=mode,
                                  max_seg=max_seg, half_steps=True):
                if p.length >= 0.5 * theta1:
                    hit[n] += p.measure
                else:
                    floor = min_len if min_len is not None else 1e3 * np.spacing(np.abs(p.points).max())
                    if p.length < floor:
                        lost += p.measure
                    else:
                        nxt.append(p)
        active = nxt
        if not active:
            break
    rest = sum(c.measure for c in active)
    return {"mass": hit[1:] / total, "unresolved": (lost + rest) / total}


def delayed_times(curves, theta1, N0, renewals, params, consts, cfg=None, rng=None,
                  order="G_plus_H", mode="derived", max_seg=1.0, max_steps=50):
    """Monte Carlo samples of successive delayed stopping times, in half steps.

    Each particle follows one measure-distributed point (see
    :func:`sample_lineage`, chopping at ``theta1``).  A renewal happens at
    the first half step ``n >= N0`` since the last one whose piece is long.  Returns an array ``(particles, renewals)`` of
    stopping times (``max_steps + 1`` when not reached).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    out = np.full((len(curves), renewals), max_steps + 1, dtype=np.int64)
    for i, c0 in enumerate(curves):
        c = c0
        for r in range(renewals):
            for n in range(1, max_steps + 1):
                c = sample_lineage(c, 1, params, consts, theta1, rng, cfg, order, mode, max_seg,
                                   half_steps=True)[0]
                if n >= N0 and c.length >= 0.5 * theta1:
                    out[i, r] = n
                    break
            else:
                break
    return out


def growth_statistics(curves, horizon, params, consts, theta1, cfg=None, N0=2, renewals=8,
                      particles=None, rng=None, order="G_plus_H", mode="derived", max_seg=1.0):
    """Tail reports for the first-hit, delayed and summed stopping times.

    Returns a dict with the first-hit masses and their geometric fit
    (``theta4_hat``, ``b2_hat``, ``r2``), the delayed-time histogram with
    its fit, and the quantiles of ``N_hat_n / n``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    fh = first_hit_distribution(curves, theta1, horizon, params, consts, cfg, order, mode, max_seg)
    ns = np.arange(1, horizon + 1)
    th4, b2, r2 = geometric_fit(ns, fh["mass"])
    parts = curves if particles is None else [curves[i % len(curves)] for i in range(particles)]
    times = delayed_times(parts, theta1, N0, renewals, params, consts, cfg, rng, order, mode, max_seg)
    first = times[:, 0]
    hist = np.bincount(first, minlength=N0 + 2)[N0:]
    th4d, bd, r2d = geometric_fit(np.arange(len(hist)), hist / hist.sum())
    sums = np.cumsum(times, axis=1)
    q99 = np.quantile(sums / np.arange(1, renewals + 1)[None, :], 0.99, axis=0)
    return {
        "first_hit": fh, "theta4_hat": th4, "b2_hat": b2, "r2": r2,
        "delayed_hist": hist, "theta4_delayed": th4d, "b_hat": bd, "r2_delayed": r2d,
        "q99_per_n": q99, "a_hat": float(q99[-1]),
    }
