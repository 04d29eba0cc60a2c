"""Exact event-driven dynamics of the ball in the square with the moving slit.

The horizontal motion is the 2-periodic zigzag fixed by ``x0`` (speed 1,
starting rightwards at ``t = 0``), so the ball is left of the slit edge
exactly on ``[t2*, 2 + t1*]`` mod 2.  Only the vertical motion is integrated.
Flights are straight lines; slit impacts are roots of ``y(t) - f(t)`` found
by a scan whose cells are certified root-free from a bound on ``|f''|``,
followed by safeguarded Newton iteration.

The compiled kernels work on packed arrays (see :class:`Table`).  Python
wrappers convert to and from :class:`BallState` / :class:`CollisionEvent`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math
import struct

import numpy as np
from numba import njit

# event codes
FLOOR, CEILING, SLIT_TOP, SLIT_BOTTOM, LEFT_WALL, RIGHT_WALL, ENTER_LEFT, EXIT_LEFT = range(8)
ERR_EDGE, ERR_GRAZE, ERR_NUMERIC = -1, -2, -3
# chambers
RIGHT, UPPER, LOWER = 0, 1, 2

SURFACES = ("floor", "ceiling", "slit_top", "slit_bottom", "left_wall", "right_wall")
CHAMBERS = ("right", "upper_left", "lower_left")
ROUTES = ("upper", "lower_long_long", "lower_long_short", "lower_short_long", "lower_short_short")

EDGE_TOL = 1e-12
GRAZE_TOL = 1e-9


class OrbitAborted(RuntimeError):
    """The orbit hit the slit edge or grazed the slit; such orbits are excluded."""

    def __init__(self, reason, t=float("nan")):
        super().__init__(f"orbit aborted ({reason}) at t={t!r}")
        self.reason = reason
        self.t = t


class NumericalError(RuntimeError):
    """The collision-time solver failed to converge."""


# ---------------------------------------------------------------------------
# compiled profile evaluation
# ---------------------------------------------------------------------------

@njit(cache=True)
def _feval(t, left, brk, poly, sines):
    tau = t - 2.0 * math.floor(0.5 * t)
    if tau >= 2.0:
        tau -= 2.0
    if left and tau == 0.0:
        tau = 2.0
    n = brk.shape[0] - 1
    i = 0
    if left:
        while i < n - 1 and tau > brk[i + 1]:
            i += 1
    else:
        while i < n - 1 and tau >= brk[i + 1]:
            i += 1
    f = 0.0
    fd = 0.0
    fdd = 0.0
    for j in range(poly.shape[1] - 1, -1, -1):
        fdd = fdd * tau + fd
        fd = fd * tau + f
        f = f * tau + poly[i, j]
    fdd *= 2.0
    for j in range(sines.shape[1]):
        a = sines[i, j, 0]
        if a == 0.0:
            continue
        k = sines[i, j, 1]
        arg = k * tau + sines[i, j, 2]
        s = math.sin(arg)
        c = math.cos(arg)
        f += a * s
        fd += a * k * c
        fdd -= a * k * k * s
    return f, fd, fdd


@njit(cache=True)
def _next_anchor(t, a):
    """Smallest ``s > t`` with ``s = a (mod 2)``."""
    s = a + 2.0 * math.floor((t - a) * 0.5)
    while s <= t:
        s += 2.0
    return s


# ---------------------------------------------------------------------------
# slit impact solver
# ---------------------------------------------------------------------------

@njit(cache=True)
def _gap(t, y0, v0, t0, sgn, brk, poly, sines):
    f, fd, _ = _feval(t, False, brk, poly, sines)
    return sgn * (y0 + v0 * (t - t0) - f), sgn * (v0 - fd)


@njit(cache=True)
def _may_vanish(ga, sa, gb, sb, h, F2):
    """Can a function with ``|g''| <= F2`` vanish on a cell of width ``h``?

    Both ends are positive here.  Taylor bounds from each end give the
    earliest and latest possible zero; the cell is clean if they cannot meet.
    """
    if F2 <= 0.0:
        return False
    da = (sa + math.sqrt(sa * sa + 2.0 * F2 * ga)) / F2
    db = (-sb + math.sqrt(sb * sb + 2.0 * F2 * gb)) / F2
    return da + db <= h


@njit(cache=True)
def _slit_root(t0, y0, v0, t_end, sgn, brk, poly, sines, F1, F2):
    """First zero of ``sgn*(y(t) - f(t))`` in ``(t0, t_end]``.

    Returns ``(status, t)`` with status 1 for a hit, 0 for none, and the
    error codes for grazing or solver failure.
    """
    h0 = min(0.01, 0.1 / (abs(v0) + F1 + 1.0))
    a = t0
    ga, sa = _gap(a, y0, v0, t0, sgn, brk, poly, sines)
    if ga < 0.0:
        ga = 0.0
    # explicit stack of pending sub-cells for the certification step
    st_a = np.empty(64)
    st_b = np.empty(64)
    while a < t_end:
        b = min(a + h0, t_end)
        seam = 2.0 * math.floor(0.5 * a) + 2.0
        if a < seam < b:
            b = seam
        gb, sb = _gap(b, y0, v0, t0, sgn, brk, poly, sines)
        lo = a
        hi = b
        found = False
        if gb <= 0.0:
            found = True
        elif _may_vanish(ga, sa, gb, sb, b - a, F2):
            # refine in time order with an explicit stack
            top = 0
            st_a[0] = a
            st_b[0] = b
            ca, cga, csa = a, ga, sa
            while top >= 0:
                ca = st_a[top]
                cb = st_b[top]
                top -= 1
                cga, csa = _gap(ca, y0, v0, t0, sgn, brk, poly, sines)
                if ca == t0 and cga < 0.0:
                    cga = 0.0
                cgb, csb = _gap(cb, y0, v0, t0, sgn, brk, poly, sines)
                if cgb <= 0.0:
                    lo = ca
                    hi = cb
                    found = True
                    break
                if _may_vanish(cga, csa, cgb, csb, cb - ca, F2):
                    if cb - ca < 1e-13 * max(1.0, abs(ca)) or top >= 60:
                        return ERR_GRAZE, ca
                    m = 0.5 * (ca + cb)
                    top += 1
                    st_a[top] = m
                    st_b[top] = cb
                    top += 1
                    st_a[top] = ca
                    st_b[top] = m
        if found:
            return _polish(lo, hi, y0, v0, t0, sgn, brk, poly, sines)
        a = b
        ga, sa = gb, sb
    return 0, t_end


@njit(cache=True)
def _polish(a, b, y0, v0, t0, sgn, brk, poly, sines):
    """Safeguarded Newton on a bracket with ``g(a) > 0 >= g(b)``."""
    t = b
    g, s = _gap(t, y0, v0, t0, sgn, brk, poly, sines)
    if g == 0.0:
        return 1, t
    for _ in range(200):
        if g > 0.0:
            a = t
        else:
            b = t
        tn = t - g / s if s != 0.0 else 0.5 * (a + b)
        if not (a < tn < b):
            tn = 0.5 * (a + b)
        if abs(tn - t) <= 2e-16 * max(1.0, abs(t)) or b - a <= 4e-16 * max(1.0, abs(t)):
            # settle on the side where the ball has reached the slit
            gb, _ = _gap(b, y0, v0, t0, sgn, brk, poly, sines)
            gt, _ = _gap(tn, y0, v0, t0, sgn, brk, poly, sines)
            return 1, tn if abs(gt) <= abs(gb) else b
        t = tn
        g, s = _gap(t, y0, v0, t0, sgn, brk, poly, sines)
        if g == 0.0:
            return 1, t
    return ERR_NUMERIC, t


# ---------------------------------------------------------------------------
# single event
# ---------------------------------------------------------------------------

@njit(cache=True)
def _event(t, y, v, ch, walls, geo, brk, poly, sines, F1, F2):
    """Advance to the next event.  Returns ``(code, t, y, v, ch)``.

    ``geo = (t1*, t2*, x0)``.  Chamber crossings are events (ENTER_LEFT,
    EXIT_LEFT); side walls are reported only when ``walls`` is set.
    """
    t1 = geo[0]
    t2 = geo[1]
    x0 = geo[2]
    if ch == RIGHT:
        t_sw = _next_anchor(t, t2)
        if v > 0.0:
            t_hit = t + (1.0 - y) / v
            code = CEILING
        elif v < 0.0:
            t_hit = t + y / (-v)
            code = FLOOR
        else:
            t_hit = np.inf
            code = FLOOR
        if walls:
            t_w = _next_anchor(t, 1.0 - x0)
            if t_w < t_sw and t_w < t_hit:
                return RIGHT_WALL, t_w, y + v * (t_w - t), v, ch
        if t_hit < t_sw:
            return code, t_hit, (1.0 if code == CEILING else 0.0), -v, ch
        ysw = y + v * (t_sw - t)
        f, _, _ = _feval(t_sw, False, brk, poly, sines)
        if abs(ysw - f) < EDGE_TOL:
            return ERR_EDGE, t_sw, ysw, v, ch
        return ENTER_LEFT, t_sw, ysw, v, (UPPER if ysw > f else LOWER)

    t_ex = _next_anchor(t, t1)
    if ch == UPPER:
        sgn = 1.0
        if v > 0.0:
            t_wall = t + (1.0 - y) / v
            wcode = CEILING
        else:
            t_wall = np.inf
            wcode = CEILING
        scode = SLIT_TOP
    else:
        sgn = -1.0
        if v < 0.0:
            t_wall = t + y / (-v)
            wcode = FLOOR
        else:
            t_wall = np.inf
            wcode = FLOOR
        scode = SLIT_BOTTOM
    t_lim = min(t_wall, t_ex)
    if walls:
        t_w = _next_anchor(t, 2.0 - x0)
        if t_w < t_lim:
            t_lim = t_w
    status, ts = _slit_root(t, y, v, t_lim, sgn, brk, poly, sines, F1, F2)
    if status < 0:
        return status, ts, y + v * (ts - t), v, ch
    if status == 1:
        f, fd, _ = _feval(ts, False, brk, poly, sines)
        if abs(v - fd) < GRAZE_TOL:
            return ERR_GRAZE, ts, f, v, ch
        return scode, ts, f, 2.0 * fd - v, ch
    # no slit impact before t_lim
    if walls and t_lim < t_wall and t_lim < t_ex:
        return LEFT_WALL, t_lim, y + v * (t_lim - t), v, ch
    if t_wall <= t_ex:
        return wcode, t_wall, (1.0 if wcode == CEILING else 0.0), -v, ch
    yex = y + v * (t_ex - t)
    f, _, _ = _feval(t_ex, True, brk, poly, sines)
    if abs(yex - f) < EDGE_TOL:
        return ERR_EDGE, t_ex, yex, v, ch
    return EXIT_LEFT, t_ex, yex, v, RIGHT


@njit(cache=True)
def _fold(y, v, dt):
    """Free flight between the static floor and ceiling for time ``dt``."""
    Y = y + v * dt
    Y = Y - 2.0 * math.floor(0.5 * Y)
    if Y <= 1.0:
        return Y, v
    return 2.0 - Y, -v


@njit(cache=True)
def _first_floor(t, y, v):
    """Time and speed of the first floor hit in the right region."""
    if v < 0.0:
        return t + y / (-v), -v
    return t + (2.0 - y) / v, v


# ---------------------------------------------------------------------------
# half revolutions
# ---------------------------------------------------------------------------

@njit(cache=True)
def _half12(t, v, geo, brk, poly, sines, F1, F2):
    """From a floor hit ``(t, v)`` after t1* to the first slit hit after t2*.

    Returns ``(status, chamber, t_hit, v_after, short_entry)``.
    """
    t2 = _next_anchor(t, geo[1])
    y, vv = _fold(0.0, v, t2 - t)
    f, _, _ = _feval(t2, False, brk, poly, sines)
    if abs(y - f) < EDGE_TOL:
        return ERR_EDGE, RIGHT, t2, vv, False
    ch = UPPER if y > f else LOWER
    short = ch == LOWER and vv > 0.0
    tc, yc, vc = t2, y, vv
    target = SLIT_TOP if ch == UPPER else SLIT_BOTTOM
    for _ in range(100000000):
        code, tc, yc, vc, ch2 = _event(tc, yc, vc, ch, False, geo, brk, poly, sines, F1, F2)
        if code < 0:
            return code, ch, tc, vc, short
        if code == target:
            return 1, ch, tc, vc, short
        if code == EXIT_LEFT:
            # cannot happen at high energy; report as numeric failure
            return ERR_NUMERIC, ch, tc, vc, short
    return ERR_NUMERIC, ch, tc, vc, short


@njit(cache=True)
def _half21(t, v, ch, geo, brk, poly, sines, F1, F2):
    """From a slit hit in chamber ``ch`` to the first floor hit after t1*.

    Returns ``(status, t_floor, v_floor, short_exit)``.
    """
    f, _, _ = _feval(t, False, brk, poly, sines)
    tc, yc, vc = t, f, v
    for _ in range(100000000):
        code, tc, yc, vc, ch2 = _event(tc, yc, vc, ch, False, geo, brk, poly, sines, F1, F2)
        if code < 0:
            return code, tc, vc, False
        if code == EXIT_LEFT:
            short = ch == LOWER and vc < 0.0
            tf, vf = _first_floor(tc, yc, vc)
            return 1, tf, vf, short
    return ERR_NUMERIC, tc, vc, False


@njit(cache=True)
def _revolutions(t, v, n, geo, brk, poly, sines, F1, F2, rebase, out_t, out_v, out_route):
    """Iterate ``n`` revolutions from the floor hit ``(t, v)`` on R1.

    Fills the output arrays and returns ``(status, n_done)``.  With
    ``rebase`` the time is kept in one period by subtracting multiples of 2.
    Route codes index :data:`ROUTES`.
    """
    for k in range(n):
        st, ch, th, vh, s_en = _half12(t, v, geo, brk, poly, sines, F1, F2)
        if st < 0:
            return st, k
        st, tf, vf, s_ex = _half21(th, vh, ch, geo, brk, poly, sines, F1, F2)
        if st < 0:
            return st, k
        if ch == UPPER:
            r = 0
        else:
            r = 1 + (2 if s_en else 0) + (1 if s_ex else 0)
        if rebase:
            tf -= 2.0
        t, v = tf, vf
        out_t[k] = t
        out_v[k] = v
        out_route[k] = r
    return 1, n


@njit(cache=True)
def _batch_half12(ts, vs, geo, brk, poly, sines, F1, F2, out_t, out_v, out_ch, out_short, out_st):
    for i in range(ts.shape[0]):
        st, ch, th, vh, sh = _half12(ts[i], vs[i], geo, brk, poly, sines, F1, F2)
        out_st[i] = st
        out_ch[i] = ch
        out_t[i] = th
        out_v[i] = vh
        out_short[i] = sh


@njit(cache=True)
def _batch_half21(ts, vs, chs, geo, brk, poly, sines, F1, F2, out_t, out_v, out_short, out_st):
    for i in range(ts.shape[0]):
        st, tf, vf, sh = _half21(ts[i], vs[i], chs[i], geo, brk, poly, sines, F1, F2)
        out_st[i] = st
        out_t[i] = tf
        out_v[i] = vf
        out_short[i] = sh


# ---------------------------------------------------------------------------
# Python-facing layer
# ---------------------------------------------------------------------------

@dataclass
class BallState:
    t: float
    x: float
    dir_x: int
    y: float
    v: float
    chamber: str = "right"


@dataclass(frozen=True)
class CollisionEvent:
    t: float
    surface: str
    v_after: float
    chamber: str


def horizontal_position(t, x0):
    """``(x, dir_x)`` of the resonant zigzag at time ``t``."""
    s = x0 + (t % 2.0)
    if s <= 1.0:
        return s, 1
    if s <= 2.0:
        return 2.0 - s, -1
    return s - 2.0, 1


class Table:
    """Packed geometry and profile arrays shared by all compiled kernels."""

    def __init__(self, params, profile):
        self.params = params
        self.profile = profile
        self.brk, self.poly, self.sines = profile.as_arrays()
        self.geo = np.array([params.t1_star, params.t2_star, params.x0])
        self.F1 = float(profile.velocity_bound())
        # bound on |f''|
        F2 = 0.0
        for p in profile.pieces:
            tmax = max(abs(p.start), abs(p.end))
            F2 = max(F2, sum(i * (i - 1) * abs(c) * tmax ** (i - 2) for i, c in enumerate(p.poly) if i > 1)
                     + sum(abs(a) * k * k for a, k, _ in p.sines))
        self.F2 = F2

    def args(self):
        return self.geo, self.brk, self.poly, self.sines, self.F1, self.F2

    def left_of_slit(self, t):
        tau = t % 2.0
        return tau < self.params.t1_star or tau > self.params.t2_star


@lru_cache(maxsize=32)
def table_for(params, profile):
    return Table(params, profile)


def _raise_for(code, t):
    if code == ERR_EDGE:
        raise OrbitAborted("edge", t)
    if code == ERR_GRAZE:
        raise OrbitAborted("grazing", t)
    raise NumericalError(f"collision solver failed near t={t!r}")


def initial_state(t, y, v, params, profile):
    """A :class:`BallState` at time ``t`` with the chamber inferred from ``y``."""
    x, d = horizontal_position(t, params.x0)
    if x < params.lambda_slit:
        f = profile(t)
        if abs(y - f) < EDGE_TOL:
            raise OrbitAborted("edge", t)
        ch = "upper_left" if y > f else "lower_left"
    else:
        ch = "right"
    return BallState(t, x, d, y, v, ch)


def next_collision(state, params, profile, walls=True):
    """Earliest future collision from ``state``.

    Chamber crossings at the slit edge are handled internally.  Side-wall
    events are reported when ``walls`` is true; they change only ``dir_x``.
    """
    tab = table_for(params, profile)
    t, y, v = state.t, state.y, state.v
    ch = CHAMBERS.index(state.chamber)
    while True:
        code, t, y, v, ch = _event(t, y, v, ch, walls, *tab.args())
        if code < 0:
            _raise_for(code, t)
        if code in (ENTER_LEFT, EXIT_LEFT):
            continue
        x, d = horizontal_position(t, params.x0)
        if code == LEFT_WALL:
            x, d = 0.0, 1
        elif code == RIGHT_WALL:
            x, d = 1.0, -1
        ev = CollisionEvent(t, SURFACES[code], v, CHAMBERS[ch])
        return ev, BallState(t, x, d, y, v, CHAMBERS[ch])


def interaction_map(t, v, params, profile, chamber=None):
    """Next collision with the interacting region: slit on the left, floor on the right.

    ``(t, v)`` must itself be a collision with the interacting region;
    ``chamber`` disambiguates slit impacts and defaults to ``upper_left``
    for ``v > 0`` on the slit.  Returns ``(t_next, v_next, chamber)``.
    """
    tab = table_for(params, profile)
    if not tab.left_of_slit(t):
        y, ch = 0.0, RIGHT
    else:
        if chamber is None:
            chamber = "upper_left" if v > 0 else "lower_left"
        ch = CHAMBERS.index(chamber)
        y = profile(t)
    while True:
        code, t, y, v, ch = _event(t, y, v, ch, False, *tab.args())
        if code < 0:
            _raise_for(code, t)
        if code in (FLOOR, SLIT_TOP, SLIT_BOTTOM) and not (code == FLOOR and ch != RIGHT):
            return t, v, CHAMBERS[ch]


def half_map_12(t, v, params, profile):
    """Exact passage from the R1 floor hit ``(t, v)`` to the first slit hit after t2*.

    Returns ``(t_hit, v_after, chamber, short_entry)``.
    """
    tab = table_for(params, profile)
    st, ch, th, vh, short = _half12(t, v, *tab.args())
    if st < 0:
        _raise_for(st, th)
    return th, vh, CHAMBERS[ch], bool(short)


def half_map_21(t, v, chamber, params, profile):
    """Exact passage from a slit hit to the first floor hit after t1*.

    Returns ``(t_floor, v_floor, short_exit)``.
    """
    tab = table_for(params, profile)
    st, tf, vf, short = _half21(t, v, CHAMBERS.index(chamber), *tab.args())
    if st < 0:
        _raise_for(st, tf)
    return tf, vf, bool(short)


def exact_revolution(t, v, params, profile):
    """One revolution from the R1 floor hit ``(t, v)``.

    Returns ``(t_next, v_next, route)`` where ``t_next`` is the next R1 floor
    hit, two time units later up to the phase shift, and ``route`` is one
    of :data:`ROUTES`.
    """
    th, vh, ch, s_en = half_map_12(t, v, params, profile)
    tf, vf, s_ex = half_map_21(th, vh, ch, params, profile)
    if ch == "upper_left":
        return tf, vf, "upper"
    return tf, vf, f"lower_{'short' if s_en else 'long'}_{'short' if s_ex else 'long'}"


def exact_orbit(t, v, n, params, profile, rebase=True):
    """Iterate ``n`` exact revolutions.

    Returns ``(status, times, speeds, routes)`` where ``status`` is
    ``"completed"``, ``"aborted_edge"``, ``"aborted_grazing"`` or
    ``"numerical"`` and the arrays hold the completed revolutions.
    """
    tab = table_for(params, profile)
    ot = np.empty(n)
    ov = np.empty(n)
    orr = np.empty(n, dtype=np.int64)
    st, k = _revolutions(t, v, n, *tab.args(), rebase, ot, ov, orr)
    status = {1: "completed", ERR_EDGE: "aborted_edge", ERR_GRAZE: "aborted_grazing"}.get(st, "numerical")
    return status, ot[:k], ov[:k], orr[:k]


def simulate_events(state, n_events, params, profile, walls=True):
    """List of the next ``n_events`` collision events and the final state."""
    out = []
    for _ in range(n_events):
        ev, state = next_collision(state, params, profile, walls=walls)
        out.append(ev)
    return out, state


def write_trace_csv(fh, events):
    """Stream events as ``t,surface,v_after,chamber`` rows."""
    fh.write("t,surface,v_after,chamber\n")
    for e in events:
        fh.write(f"{e.t:.17g},{e.surface},{e.v_after:.17g},{e.chamber}\n")


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# little-endian: 8-byte magic, uint32 version, uint32 chamber, then
# float64 t, x, y, v and int32 dir_x.

CKPT_MAGIC = b"SWFERMI\0"
CKPT_VERSION = 1
_CKPT = struct.Struct("<8sII4di")


def save_checkpoint(path, state):
    with open(path, "wb") as fh:
        fh.write(_CKPT.pack(CKPT_MAGIC, CKPT_VERSION, CHAMBERS.index(state.chamber),
                            state.t, state.x, state.y, state.v, state.dir_x))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != _CKPT.size:
        raise ValueError("checkpoint has wrong size")
    magic, version, ch, t, x, y, v, d = _CKPT.unpack(raw)
    if magic != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return BallState(t, x, d, y, v, CHAMBERS[ch])


def batch_half_12(ts, vs, params, profile):
    """Vectorised :func:`half_map_12`.

    Returns ``(status, t_hit, v_after, chamber_code, short_entry)``; status 1
    means success, negative values are the abort codes.
    """
    tab = table_for(params, profile)
    ts = np.ascontiguousarray(ts, dtype=float)
    vs = np.ascontiguousarray(vs, dtype=float)
    n = ts.shape[0]
    ot, ov = np.empty(n), np.empty(n)
    och, ost = np.empty(n, np.int64), np.empty(n, np.int64)
    osh = np.empty(n, np.bool_)
    _batch_half12(ts, vs, *tab.args(), ot, ov, och, osh, ost)
    return ost, ot, ov, och, osh


def batch_half_21(ts, vs, chambers, params, profile):
    """Vectorised :func:`half_map_21`; ``chambers`` holds chamber codes.

    Returns ``(status, t_floor, v_floor, short_exit)``.
    """
    tab = table_for(params, profile)
    ts = np.ascontiguousarray(ts, dtype=float)
    vs = np.ascontiguousarray(vs, dtype=float)
    chs = np.ascontiguousarray(np.broadcast_to(chambers, ts.shape), dtype=np.int64)
    n = ts.shape[0]
    ot, ov = np.empty(n), np.empty(n)
    ost = np.empty(n, np.int64)
    osh = np.empty(n, np.bool_)
    _batch_half21(ts, vs, chs, *tab.args(), ot, ov, osh, ost)
    return ost, ot, ov, osh
