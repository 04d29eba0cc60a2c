"""Slit motion profiles and the scalar constants derived from them.

The slit height ``f(t)`` is 2-periodic and piecewise smooth.  Each piece is a
polynomial in absolute time plus a finite sum of sinusoids, so every
derivative up to third order is available in closed form.  Only the periodic
seam ``t = 0 (mod 2)`` may carry a jump of the velocity.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
import math

import numpy as np

PERIOD = 2.0


class ProfileError(ValueError):
    """A slit profile is malformed or violates its height bounds."""


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Piece:
    """One smooth piece on ``[start, end)``.

    ``poly`` holds coefficients of powers of absolute time ``t`` and
    ``sines`` holds ``(amplitude, angular_frequency, phase)`` triples for
    terms ``amplitude * sin(angular_frequency * t + phase)``.
    """

    start: float
    end: float
    poly: tuple = ()
    sines: tuple = ()

    def derivatives(self, t):
        t = np.asarray(t, dtype=float)
        out = [np.zeros_like(t) for _ in range(4)]
        for i, c in enumerate(self.poly):
            for d in range(4):
                if i - d < 0:
                    break
                out[d] = out[d] + c * math.perm(i, d) * t ** (i - d)
        for amp, k, phi in self.sines:
            arg = k * t + phi
            s, c = np.sin(arg), np.cos(arg)
            out[0] = out[0] + amp * s
            out[1] = out[1] + amp * k * c
            out[2] = out[2] - amp * k * k * s
            out[3] = out[3] - amp * k ** 3 * c
        return out

    def velocity_bound(self):
        """Upper bound on ``|f'|`` over the piece."""
        tmax = max(abs(self.start), abs(self.end))
        bound = sum(i * abs(c) * tmax ** (i - 1) for i, c in enumerate(self.poly) if i > 0)
        return bound + sum(abs(a * k) for a, k, _ in self.sines)


@dataclass(frozen=True)
class SlitProfile:
    """Periodic (period 2) piecewise-smooth slit height."""

    pieces: tuple
    kind: str = "pieces"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.pieces:
            raise ProfileError("profile has no pieces")
        prev = 0.0
        for p in self.pieces:
            if abs(p.start - prev) > 1e-15 or not p.end > p.start:
                raise ProfileError(f"pieces must tile [0, 2) contiguously; gap at t={prev}")
            prev = p.end
        if abs(prev - PERIOD) > 1e-15:
            raise ProfileError(f"pieces end at {prev}, expected 2")

    # -- constructors -----------------------------------------------------
    @classmethod
    def constant(cls, h):
        return cls((Piece(0.0, PERIOD, (float(h),)),), kind="constant", meta={"h0": float(h)})

    @classmethod
    def sinusoid(cls, h0, A, omega, phi0=None):
        """``h0 + A sin(pi*omega*t + phi0)`` on ``[0, 2)``.

        With ``phi0 = pi/2 - pi*omega`` (the default) the profile is
        continuous across the seam and, for non-integer ``omega``, its
        velocity jumps there by ``-2*pi*omega*A*sin(pi*omega)``.
        """
        if phi0 is None:
            phi0 = 0.5 * math.pi - math.pi * omega
        piece = Piece(0.0, PERIOD, (float(h0),), ((float(A), math.pi * omega, float(phi0)),))
        meta = {"h0": float(h0), "A": float(A), "omega": float(omega), "phi0": float(phi0)}
        return cls((piece,), kind="sinusoid", meta=meta)

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind", "sinusoid")
        if kind == "constant":
            return cls.constant(d["h0"])
        if kind == "sinusoid":
            return cls.sinusoid(d["h0"], d["A"], d["omega"], d.get("phi0"))
        if kind == "pieces":
            pieces = []
            for p in d["pieces"]:
                sines = tuple(tuple(map(float, s)) for s in p.get("sines", ()))
                pieces.append(Piece(float(p["start"]), float(p["end"]),
                                    tuple(map(float, p.get("poly", ()))), sines))
            return cls(tuple(pieces))
        raise ProfileError(f"unknown profile kind {kind!r}")

    def to_dict(self):
        if self.kind in ("constant", "sinusoid"):
            return {"kind": self.kind, **self.meta}
        return {"kind": "pieces", "pieces": [
            {"start": p.start, "end": p.end, "poly": list(p.poly), "sines": [list(s) for s in p.sines]}
            for p in self.pieces]}

    # -- evaluation -------------------------------------------------------
    @property
    def breakpoints(self):
        return np.array([p.start for p in self.pieces] + [PERIOD])

    def _locate(self, tau, left):
        starts = self.breakpoints[:-1]
        if left:
            # piece with start < tau <= end; tau == 0 belongs to the last piece
            tau = np.where(tau == 0.0, PERIOD, tau)
            idx = np.searchsorted(starts, tau, side="left") - 1
        else:
            idx = np.searchsorted(starts, tau, side="right") - 1
        return tau, np.clip(idx, 0, len(self.pieces) - 1)

    def derivatives(self, t, left=False, order=2):
        """Return ``[f, f', ..., f^(order)]`` at ``t`` (scalar or array).

        Right limits are returned at breakpoints unless ``left`` is set.
        """
        scalar = np.ndim(t) == 0
        tau = np.mod(np.asarray(t, dtype=float), PERIOD)
        tau, idx = self._locate(tau, left)
        out = [np.empty_like(tau) for _ in range(order + 1)]
        for k, piece in enumerate(self.pieces):
            mask = idx == k
            if not np.any(mask):
                continue
            vals = piece.derivatives(tau[mask])
            for d in range(order + 1):
                out[d][mask] = vals[d]
        if scalar:
            return [float(o) for o in out]
        return out

    def __call__(self, t, left=False):
        return self.derivatives(t, left, order=0)[0]

    def velocity_bound(self):
        return max(p.velocity_bound() for p in self.pieces)

    def seam_jump(self):
        """``f'(0+) - f'(2-)``."""
        return eval_profile(self, 0.0)[1] - eval_profile(self, 0.0, left=True)[1]

    def as_arrays(self):
        """Packed coefficient arrays for the compiled simulator."""
        n = len(self.pieces)
        deg = max(len(p.poly) for p in self.pieces)
        ns = max([len(p.sines) for p in self.pieces] + [1])
        poly = np.zeros((n, max(deg, 1)))
        sines = np.zeros((n, ns, 3))
        for i, p in enumerate(self.pieces):
            poly[i, :len(p.poly)] = p.poly
            for j, s in enumerate(p.sines):
                sines[i, j] = s
        return self.breakpoints, poly, sines

    def validate(self, c_bound, n_grid=20001, tol=1e-9):
        """Check continuity, seam structure and ``c <= f <= 1 - c``.

        The bound check samples a uniform grid and widens every sample by the
        worst-case excursion ``max|f'| * h / 2`` inside its cell.
        """
        if not 0.0 < c_bound < 0.5:
            raise ProfileError(f"c_bound must lie in (0, 1/2), got {c_bound}")
        # internal breakpoints must be C^2
        for a, b in zip(self.pieces[:-1], self.pieces[1:]):
            left = a.derivatives(b.start)
            right = b.derivatives(b.start)
            for d in range(3):
                if abs(left[d] - right[d]) > tol * max(1.0, abs(left[d])):
                    raise ProfileError(
                        f"derivative {d} discontinuous at internal breakpoint t={b.start}")
        f_left, f_right = self(0.0, left=True), self(0.0)
        if abs(f_left - f_right) > tol:
            raise ProfileError(f"profile is discontinuous at the seam: {f_left} vs {f_right}")
        grid = np.linspace(0.0, PERIOD, n_grid)
        h = grid[1] - grid[0]
        f = self(grid)
        slack = self.velocity_bound() * h / 2
        bad = grid[(f - slack < c_bound) | (f + slack > 1.0 - c_bound)]
        if bad.size:
            # refine the suspect cells before declaring a violation
            fine = np.unique(np.concatenate([np.linspace(max(b - h, 0), min(b + h, PERIOD), 201) for b in bad[:200]]))
            ff = self(fine)
            viol = fine[(ff < c_bound) | (ff > 1.0 - c_bound)]
            if viol.size or self.velocity_bound() * (fine[1] - fine[0]) > 1e-3 * c_bound:
                where = viol if viol.size else bad
                raise ProfileError(
                    f"profile leaves [c, 1-c] = [{c_bound}, {1 - c_bound}] near t = "
                    + ", ".join(f"{x:.6g}" for x in where[:8]))
        return True


def eval_profile(profile, t, left=False):
    """Height, velocity and acceleration of the slit at time ``t``.

    Evaluation is reduced mod 2.  At a breakpoint the right limit is returned
    unless ``left`` is true.
    """
    f, fd, fdd = profile.derivatives(t, left=left, order=2)
    return f, fd, fdd


# ---------------------------------------------------------------------------
# adaptive Simpson quadrature
# ---------------------------------------------------------------------------

def adaptive_simpson(func, a, b, tol=1e-12, max_level=50):
    """Integrate a vectorised ``func`` over ``[a, b]`` by adaptive Simpson.

    All pending cells are refined level by level so each sweep is one
    vectorised call.  The absolute tolerance is split in proportion to
    cell width.
    """
    if b <= a:
        return 0.0
    width = b - a
    lo = np.array([a])
    hi = np.array([b])
    mid = 0.5 * (lo + hi)
    flo, fmid, fhi = func(lo), func(mid), func(hi)
    whole = (hi - lo) / 6.0 * (flo + 4 * fmid + fhi)
    total = 0.0
    for _ in range(max_level):
        lm = 0.5 * (lo + mid)
        rm = 0.5 * (mid + hi)
        flm, frm = func(lm), func(rm)
        left = (mid - lo) / 6.0 * (flo + 4 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4 * frm + fhi)
        err = left + right - whole
        cell_tol = 15.0 * tol * (hi - lo) / width
        done = np.abs(err) <= cell_tol
        total += np.sum((left + right + err / 15.0)[done])
        keep = ~done
        if not np.any(keep):
            return float(total)
        lo2 = np.concatenate([lo[keep], mid[keep]])
        hi2 = np.concatenate([mid[keep], hi[keep]])
        flo2 = np.concatenate([flo[keep], fmid[keep]])
        fmid2 = np.concatenate([flm[keep], frm[keep]])
        fhi2 = np.concatenate([fmid[keep], fhi[keep]])
        whole = np.concatenate([left[keep], right[keep]])
        lo, hi, flo, fmid, fhi = lo2, hi2, flo2, fmid2, fhi2
        mid = 0.5 * (lo + hi)
    raise ArithmeticError("adaptive Simpson did not converge")


# ---------------------------------------------------------------------------
# derived parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    lambda_slit: float
    x0: float
    t1_star: float
    t2_star: float
    f1: float
    f2: float
    fdot1: float
    fdot2: float
    L_star: float
    M_star: float
    theta1_star: float
    theta2_star: float
    zeta1_star: float
    zeta2_star: float
    c_bound: float

    @property
    def right_span(self):
        """``L_*(theta2* - theta1*)``: phase gained on the right floor per unit action."""
        return self.L_star * (self.theta2_star - self.theta1_star)

    @property
    def upper_span(self):
        """``L_*(2 + theta1* - theta2*)``."""
        return self.L_star * (2.0 + self.theta1_star - self.theta2_star)

    @property
    def lower_span(self):
        """``M_*(2 + zeta1* - zeta2*)``."""
        return self.M_star * (2.0 + self.zeta1_star - self.zeta2_star)

    def to_dict(self):
        return asdict(self)


def chamber_widths(profile, params_or_times, t, chamber, left=False, order=2):
    """Signed chamber width ``l`` (upper) or ``m`` (lower) and its derivatives.

    ``l = 1 - f`` and ``m = -f`` while the ball is left of the slit edge,
    ``l = 1`` and ``m = -1`` otherwise.  Returns a list ``[w, w', ...]``.
    """
    t1, t2 = _switch_times(params_or_times)
    tau = np.mod(np.asarray(t, dtype=float), PERIOD)
    vals = profile.derivatives(tau, left=left, order=order)
    if left:
        inside = (tau <= t1) | (tau > t2) | (tau == 0.0)
    else:
        inside = (tau < t1) | (tau >= t2)
    out = []
    for d, v in enumerate(vals):
        if chamber == "U":
            w = np.where(inside, (1.0 - v) if d == 0 else -v, 1.0 if d == 0 else 0.0)
        elif chamber == "L":
            w = np.where(inside, -v, -1.0 if d == 0 else 0.0)
        else:
            raise ValueError(f"chamber must be 'U' or 'L', got {chamber!r}")
        out.append(float(w) if np.ndim(w) == 0 else w)
    return out


def _switch_times(p):
    if isinstance(p, ModelParams):
        return p.t1_star, p.t2_star
    return p


def _smooth_cells(profile, t1, t2):
    pts = np.unique(np.concatenate([profile.breakpoints, [t1, t2]]))
    return list(zip(pts[:-1], pts[1:]))


def derive_params(profile, lambda_slit, x0, c_bound=None, tol=1e-12):
    """Switch times, switch-time slit data and the normalising integrals."""
    if not 0.0 < x0 < lambda_slit < 1.0:
        raise ValueError(f"need 0 < x0 < lambda < 1, got x0={x0}, lambda={lambda_slit}")
    if c_bound is not None:
        profile.validate(c_bound)
    t1 = lambda_slit - x0
    t2 = 2.0 - lambda_slit - x0
    f1, fd1, _ = eval_profile(profile, t1, left=True)
    f2, fd2, _ = eval_profile(profile, t2)

    def inv_sq(chamber):
        return lambda s: chamber_widths(profile, (t1, t2), s, chamber, order=0)[0] ** -2.0

    cells = _smooth_cells(profile, t1, t2)
    iu, il = inv_sq("U"), inv_sq("L")
    # cell midpoints pick the right branch of the piecewise integrand
    parts_u = [adaptive_simpson(_branch(iu, a, b), a, b, tol / len(cells)) for a, b in cells]
    parts_l = [adaptive_simpson(_branch(il, a, b), a, b, tol / len(cells)) for a, b in cells]
    L_star, M_star = math.fsum(parts_u), math.fsum(parts_l)
    before1 = [i for i, (a, b) in enumerate(cells) if b <= t1 + 1e-15]
    before2 = [i for i, (a, b) in enumerate(cells) if b <= t2 + 1e-15]
    theta1 = 2.0 / L_star * math.fsum(parts_u[i] for i in before1)
    theta2 = 2.0 / L_star * math.fsum(parts_u[i] for i in before2)
    zeta1 = 2.0 / M_star * math.fsum(parts_l[i] for i in before1)
    zeta2 = 2.0 / M_star * math.fsum(parts_l[i] for i in before2)
    return ModelParams(lambda_slit, x0, t1, t2, f1, f2, fd1, fd2, L_star, M_star,
                       theta1, theta2, zeta1, zeta2,
                       float("nan") if c_bound is None else c_bound)


def _branch(func, a, b):
    """Evaluate ``func`` on the open cell ``(a, b)`` so endpoints use the cell's own branch."""
    eps = 1e-15 * max(1.0, abs(b))

    def g(s):
        return func(np.clip(s, a + eps, b - eps))
    return g


# ---------------------------------------------------------------------------
# normal-form constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalFormConstants:
    delta1: float
    delta2: float
    delta1_p: float
    delta2_p: float
    delta1_pp: float
    delta2_pp: float
    kappa_l: float
    kappa_l_p: float
    kappa_l_pp: float
    kappa_s_p: float
    kappa_s_pp: float
    chi_l: float
    chi_l_p: float
    chi_l_pp: float
    chi_s_p: float
    chi_s_pp: float
    # constant terms of the correction measured against exact dynamics,
    # -(1/24) (w- w+)^2 (w- w''+ - w+ w''-) at each switch
    delta1_c: float = 0.0
    delta2_c: float = 0.0
    entry_l_q: float = 0.0      # (1/8) m+^2 (m- m''+ - m+ m''-) at t2*
    entry_l_c: float = 0.0
    exit_l_q: float = 0.0       # same at t1*
    exit_l_c: float = 0.0
    # the velocity jump of the slit at t = 0 (mod 2), upper and lower chamber
    seam_u: float = 0.0
    seam_u_p: float = 0.0
    seam_u_c: float = 0.0
    seam_l: float = 0.0
    seam_l_p: float = 0.0
    seam_l_c: float = 0.0

    def to_dict(self):
        return asdict(self)


def switch_kick_constants(w_minus, w_plus):
    """Switch constants from one-sided ``[w, w', w'']`` limits of a chamber width.

    Returns ``(D, D', D'', C)`` with ``X = w- w''+ - w+ w''-`` and

    * ``D   = 1/2  (w+/w-) (w- w'+ - w+ w'-)``
    * ``D'  = 1/8  w+^2 X``
    * ``D'' = 1/24 w- w+ X``
    * ``C   = -1/24 (w- w+)^2 X``

    ``C`` is the constant correction that matches exact dynamics; ``D''``
    is kept for comparison.  All four are invariant under ``w -> -w``, so
    they apply to the lower chamber with ``m`` as well.
    """
    wm, wdm, wddm = w_minus
    wp, wdp, wddp = w_plus
    d = 0.5 * (wp / wm) * (wm * wdp - wp * wdm)
    x = wm * wddp - wp * wddm
    return d, wp * wp * x / 8.0, wm * wp * x / 24.0, -(wm * wp) ** 2 * x / 24.0


def normal_form_constants(params, profile):
    """All switch constants, evaluated from one-sided limits at the switch times."""
    t1, t2 = params.t1_star, params.t2_star
    lu1m = chamber_widths(profile, params, t1, "U", left=True)
    lu1p = chamber_widths(profile, params, t1, "U")
    lu2m = chamber_widths(profile, params, t2, "U", left=True)
    lu2p = chamber_widths(profile, params, t2, "U")
    d1, d1p, d1pp, d1c = switch_kick_constants(lu1m, lu1p)
    d2, d2p, d2pp, d2c = switch_kick_constants(lu2m, lu2p)

    lm1m = chamber_widths(profile, params, t1, "L", left=True)
    lm1p = chamber_widths(profile, params, t1, "L")
    lm2m = chamber_widths(profile, params, t2, "L", left=True)
    lm2p = chamber_widths(profile, params, t2, "L")
    m_p, md_p, mdd_p = lm2p     # m_+ at t2*
    m_m, md_m, mdd_m = lm1m     # m_- at t1*
    kappa_l = 0.5 * m_p * md_p
    kappa_l_p = m_p ** 2 * mdd_p / 24.0
    kappa_l_pp = m_p ** 2 * mdd_p / 8.0
    kappa_s_p = m_p ** 2 * mdd_p / 8.0
    kappa_s_pp = -m_p * m_p * mdd_p / 24.0
    chi_l = -0.5 * md_m / m_m
    chi_l_p = mdd_m * (1.0 - m_m ** 2 / 3.0) / 8.0
    chi_l_pp = -0.25 * mdd_m
    chi_s_p = 0.25 * mdd_m
    chi_s_pp = m_m * (m_m ** 2 * mdd_m - 3.0 * mdd_m) / 24.0
    _, en_q, _, en_c = switch_kick_constants(lm2m, lm2p)
    _, ex_q, _, ex_c = switch_kick_constants(lm1m, lm1p)

    su = switch_kick_constants(chamber_widths(profile, params, 0.0, "U", left=True),
                               chamber_widths(profile, params, 0.0, "U"))
    sl = switch_kick_constants(chamber_widths(profile, params, 0.0, "L", left=True),
                               chamber_widths(profile, params, 0.0, "L"))
    return NormalFormConstants(d1, d2, d1p, d2p, d1pp, d2pp,
                               kappa_l, kappa_l_p, kappa_l_pp, kappa_s_p, kappa_s_pp,
                               chi_l, chi_l_p, chi_l_pp, chi_s_p, chi_s_pp,
                               d1c, d2c, en_q, en_c, ex_q, ex_c,
                               su[0], su[1], su[3], sl[0], sl[1], sl[3])


# ---------------------------------------------------------------------------
# drift rate
# ---------------------------------------------------------------------------

def drift_rate(f1, f2):
    """Kullback-Leibler divergence of Bernoulli(f2) from Bernoulli(f1), in nats.

    This is the expected log-energy gain per revolution when the lower route
    is taken with probability ``f2``.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if np.any((f1 <= 0) | (f1 >= 1) | (f2 <= 0) | (f2 >= 1)):
        raise ValueError("drift_rate needs f1, f2 in (0, 1)")
    e = (1.0 - f2) * np.log((1.0 - f2) / (1.0 - f1)) + f2 * np.log(f2 / f1)
    # the divergence is non-negative; clip cancellation noise near the diagonal
    e = np.maximum(e, 0.0)
    return float(e) if e.ndim == 0 else e


# ---------------------------------------------------------------------------
# shipped configurations
# ---------------------------------------------------------------------------

def tuned_sinusoid(fdot=20.0, f1=0.4, f2=0.6, h0=0.5, A=0.2, t1_guess=0.25, t2_guess=1.25):
    """Sinusoidal profile and slit geometry hitting prescribed switch data.

    Builds ``f(t) = h0 + A cos(p (t - 1))`` on ``[0, 2)`` (the continuous
    seam branch of :meth:`SlitProfile.sinusoid`) with ``p`` chosen so that
    ``|f'(t2*)| = fdot``, then picks the switch times nearest the guesses
    with ``f(t1*) = f1``, ``f(t2*) = f2``, ``f'(t2*) < 0 < f'(t1*)``.

    Returns ``(profile, lambda_slit, x0)``.
    """
    c1, c2 = (f1 - h0) / A, (f2 - h0) / A
    # at an extremum the required frequency blows up
    if not (abs(c1) < 1 - 1e-6 and abs(c2) < 1 - 1e-6):
        raise ValueError("targets f1, f2 unreachable with this amplitude")
    p = fdot / (A * math.sqrt(1.0 - c2 * c2))
    a2, a1 = math.acos(c2), math.acos(c1)
    k = round((p * (t2_guess - 1.0) - a2) / (2 * math.pi))
    j = round((p * (t1_guess - 1.0) + a1) / (2 * math.pi))
    t2 = 1.0 + (a2 + 2 * math.pi * k) / p
    t1 = 1.0 + (-a1 + 2 * math.pi * j) / p
    lam = (2.0 + t1 - t2) / 2.0
    x0 = (2.0 - t1 - t2) / 2.0
    omega = p / math.pi
    if abs(omega - round(omega)) < 1e-6:
        raise ValueError("integer omega gives no velocity jump at the seam")
    return SlitProfile.sinusoid(h0, A, omega), lam, x0


DEFAULT_C_BOUND = 0.25


def default_setup(fdot=20.0, f1=0.4, f2=0.6, h0=0.5, A=0.2, c_bound=None):
    """``(profile, params, consts)`` for the shipped sinusoidal configuration."""
    profile, lam, x0 = tuned_sinusoid(fdot=fdot, f1=f1, f2=f2, h0=h0, A=A)
    cb = DEFAULT_C_BOUND if c_bound is None else c_bound
    params = derive_params(profile, lam, x0, c_bound=min(cb, h0 - A - 1e-9, 1.0 - h0 - A - 1e-9))
    return profile, params, normal_form_constants(params, profile)


# named configurations used by the experiments
PRESETS = {
    "default": dict(fdot=20.0),
    "large_omega": dict(fdot=40.0),
    # wide route split: the escape experiment needs drift large against its spread
    "desk": dict(fdot=40.0, f1=0.15, f2=0.85, A=0.4),
    "null": dict(fdot=40.0, f1=0.5, f2=0.5),
    "mirrored": dict(fdot=40.0, f1=0.6, f2=0.4),
}


def preset_setup(name):
    return default_setup(**PRESETS[name])
