"""Orbit ensembles and the statistics built on them.

Energies are the R1 strip energy ``z = Hs``.  Normal-form ensembles are run
vectorised over orbits.  Above ``RENORM_CAP`` the working energy is shifted
down by a whole number of entry-phase periods; this keeps the entry phase,
keeps enough fractional digits for the later phases to stay meaningful,
and the discarded amount is carried in a per-orbit log offset.  The
normal-form corrections at the working energy are below 1e-9.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
import math

import numpy as np

from .maps import ModifiedSystemConfig, _spans, revolution_arrays
from .model import drift_rate

DYNAMICS = ("exact", "normal_form_P", "modified_P0")
TERMINATIONS = ("completed", "aborted_edge", "fell_below_threshold")
RNG_ALGORITHM = "numpy Philox4x64 seeded by SeedSequence(seed, spawn_key=(orbit_index,))"
RENORM_CAP = 2.0 ** 40
RENORM_BASE = 2.0 ** 30


class StatisticalError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    seed: int = 0
    n_orbits: int = 1000
    v_range: tuple = (1e3, 2e3)
    horizon: int = 50
    dynamics: str = "modified_P0"
    alpha: float | None = None
    T: int = 20
    init: str = "uniform"        # "uniform" in (sigma, Hs) or "curve" (vertical segment)
    curve_sigma: float = 1.0

    def validate(self):
        if self.dynamics not in DYNAMICS:
            raise ValueError(f"dynamics must be one of {DYNAMICS}")
        if self.init not in ("uniform", "curve"):
            raise ValueError("init must be 'uniform' or 'curve'")
        v1, v2 = self.v_range
        if not 0 < v1 <= v2:
            raise ValueError("need 0 < V1 <= V2")
        if self.n_orbits < 1 or self.horizon < 1:
            raise ValueError("n_orbits and horizon must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        return self


@dataclass
class OrbitRecord:
    initial: tuple
    itinerary: np.ndarray
    log_energy: np.ndarray
    termination: str


@dataclass
class Ensemble:
    """Arrays for a whole ensemble; row ``i`` is orbit ``i``.

    ``log_energy`` has ``horizon + 1`` columns and holds NaN after an orbit
    stops; ``itinerary`` holds 0 there.  ``states`` keeps the working strip
    coordinates at every revolution (normal-form dynamics only).
    """
    config: EnsembleConfig
    initial: np.ndarray
    log_energy: np.ndarray
    itinerary: np.ndarray
    termination: np.ndarray
    n_done: np.ndarray
    states: np.ndarray | None = None

    def records(self):
        for i in range(len(self.initial)):
            k = int(self.n_done[i])
            yield OrbitRecord(tuple(self.initial[i]), self.itinerary[i, :k].copy(),
                              self.log_energy[i, :k + 1].copy(), TERMINATIONS[self.termination[i]])

    @property
    def completed(self):
        return self.termination == 0


def orbit_generator(seed, index):
    """Independent stream for one orbit; depends only on ``(seed, index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def initial_points(cfg):
    v1, v2 = cfg.v_range
    out = np.empty((cfg.n_orbits, 2))
    for i in range(cfg.n_orbits):
        g = orbit_generator(cfg.seed, i)
        h = g.uniform(v1, v2)
        s = g.uniform(0.0, 2.0) if cfg.init == "uniform" else cfg.curve_sigma
        out[i] = s, h
    return out


def run_ensemble(cfg, params, consts, modcfg=None, profile=None, order="G_plus_H", mode="derived",
                 keep_states=False, threads=1):
    """Run every orbit of ``cfg`` for ``cfg.horizon`` revolutions.

    ``modified_P0`` needs ``modcfg``; ``exact`` needs ``profile``.  Orbits
    of ``normal_form_P`` that drop below ``modcfg.V_star`` (when given) stop
    with ``fell_below_threshold``.  Results depend only on ``(seed, orbit
    index)``, so any split of the orbits gives identical rows.
    """
    cfg.validate()
    init = initial_points(cfg)
    if cfg.dynamics == "exact":
        if profile is None:
            raise ValueError("exact dynamics needs the profile")
        return _run_exact(cfg, init, params, profile, threads)
    if cfg.dynamics == "modified_P0" and modcfg is None:
        raise ValueError("modified_P0 needs a ModifiedSystemConfig")
    return _run_normal_form(cfg, init, params, consts, modcfg, order, mode, keep_states)


def _run_normal_form(cfg, init, params, consts, modcfg, order, mode, keep_states):
    n, H = cfg.n_orbits, cfg.horizon
    period = 2.0 / _spans(params)["right"]
    s = init[:, 0].copy()
    h = init[:, 1].copy()
    off = np.zeros(n)
    logz = np.full((n, H + 1), np.nan)
    itin = np.zeros((n, H), dtype=np.int8)
    term = np.zeros(n, dtype=np.int8)
    done = np.full(n, H, dtype=np.int64)
    states = np.full((n, H + 1, 2), np.nan) if keep_states else None
    logz[:, 0] = np.log(h)
    if keep_states:
        states[:, 0, 0], states[:, 0, 1] = s, h
    alive = np.ones(n, dtype=bool)
    use_cfg = modcfg if cfg.dynamics == "modified_P0" else None
    floor = modcfg.V_star if (modcfg is not None and cfg.dynamics == "normal_form_P") else 1.0
    for k in range(H):
        idx = np.where(alive)[0]
        if idx.size == 0:
            break
        s2, h2, route = revolution_arrays(s[idx], h[idx], params, consts, use_cfg, order, mode)
        big = h2 > RENORM_CAP
        if np.any(big):
            m = np.floor((h2[big] - RENORM_BASE) / period)
            hw = h2[big] - m * period
            off[idx[big]] += np.log(h2[big]) - np.log(hw)
            h2[big] = hw
        s[idx], h[idx] = s2, h2
        itin[idx, k] = np.where(route == 0, -1, 1)
        bad = ~(h2 > floor) | ~np.isfinite(h2)
        logz[idx[~bad], k + 1] = np.log(h2[~bad]) + off[idx[~bad]]
        if keep_states:
            states[idx, k + 1, 0], states[idx, k + 1, 1] = s2, h2
        if np.any(bad):
            j = idx[bad]
            term[j] = 2
            done[j] = k
            itin[j, k] = 0
            alive[j] = False
    return Ensemble(cfg, init, logz, itin, term, done, states)


def _run_exact(cfg, init, params, profile, threads=1):
    from concurrent.futures import ThreadPoolExecutor
    from .billiard import exact_orbit
    n, H = cfg.n_orbits, cfg.horizon
    logz = np.full((n, H + 1), np.nan)
    itin = np.zeros((n, H), dtype=np.int8)
    term = np.zeros(n, dtype=np.int8)
    done = np.full(n, H, dtype=np.int64)

    def one(i):
        sig, hs = init[i]
        v = 2.0 * hs
        return exact_orbit(params.t1_star + sig / v, v, H, params, profile)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    for i, (status, ts, vs, routes) in enumerate(results):
        k = len(vs)
        logz[i, 0] = math.log(init[i, 1])
        logz[i, 1:k + 1] = np.log(0.5 * vs)
        itin[i, :k] = np.where(routes == 0, -1, 1)
        if status != "completed":
            term[i] = 1
            done[i] = k
    return Ensemble(cfg, init, logz, itin, term, done)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def _bootstrap_ci(x, stat=np.mean, n_boot=1000, seed=0, level=0.95):
    g = np.random.default_rng(seed)
    idx = g.integers(0, x.size, size=(n_boot, x.size))
    bs = np.array([stat(x[r]) for r in idx]) if stat is not np.mean else x[idx].mean(axis=1)
    a = 0.5 * (1.0 - level)
    return float(np.quantile(bs, a)), float(np.quantile(bs, 1.0 - a))


def drift_estimate(ens, N0, n_boot=1000, seed=0, min_records=10):
    """Mean of ``(ln z_N0 - ln z_0)/N0`` over orbits that reached ``N0``, with bootstrap CI."""
    ok = ens.n_done >= N0
    g = (ens.log_energy[ok, N0] - ens.log_energy[ok, 0]) / N0
    g = g[np.isfinite(g)]
    if g.size < min_records:
        raise StatisticalError(f"only {g.size} records reached N0 = {N0}")
    lo, hi = _bootstrap_ci(g, n_boot=n_boot, seed=seed)
    return {"mean": float(g.mean()), "ci": (lo, hi), "n": int(g.size),
            "stderr": float(g.std(ddof=1) / math.sqrt(g.size))}


def bernoulli_walk(ell, f1, f2, N, n_walks, seed=0):
    """I.i.d. multiplier walk ``lambda_{n+1} = lambda_n d_n``.

    ``d = ell f2/f1`` with probability ``f2`` and ``ell (1-f2)/(1-f1)``
    otherwise.  Returns the samples of ``ln lambda_N - ln lambda_0``, the
    mean step ``E ln d`` and the step range.
    """
    up, down = math.log(ell * f2 / f1), math.log(ell * (1.0 - f2) / (1.0 - f1))
    g = np.random.default_rng(seed)
    ups = g.binomial(N, f2, size=n_walks)
    sums = ups * up + (N - ups) * down
    return {"samples": sums, "mean_step": f2 * up + (1.0 - f2) * down,
            "range": abs(up - down), "up": up, "down": down}


def hoeffding_envelope(n, r, width=1.0):
    """``Pr(sum - n h < -r n) <= exp(-2 n r^2 / width^2)``; ``width=1`` gives the plain form."""
    return np.exp(-2.0 * np.asarray(n, dtype=float) * r * r / (width * width))


def walk_tail(ell, f1, f2, r, ns, n_walks, seed=0):
    """Empirical ``Pr(sum ln d < (h - r) n)`` for each ``n`` in ``ns`` next to the envelope."""
    out = []
    for n in ns:
        w = bernoulli_walk(ell, f1, f2, int(n), n_walks, seed)
        h = w["mean_step"]
        out.append((int(n), float(np.mean(w["samples"] < (h - r) * n)), float(hoeffding_envelope(n, r))))
    return out


def itinerary_stats(ens, depth, f2=None, start=0):
    """Frequencies of route-sign patterns over revolutions ``start .. start+depth-1``.

    Returns ``(table, tv)`` with ``table[pattern] = (frequency, product
    prediction)`` using ``q(+1) = f2`` and ``q(-1) = 1 - f2``.
    """
    from itertools import product
    if depth > 6:
        raise ValueError("depth must be at most 6")
    if f2 is None:
        raise ValueError("itinerary_stats needs f2 for the product prediction")
    ok = ens.n_done >= start + depth
    pats = ens.itinerary[ok, start:start + depth]
    code = ((pats > 0).astype(np.int64) * (1 << np.arange(depth)[::-1])).sum(axis=1)
    counts = np.bincount(code, minlength=1 << depth) / max(1, pats.shape[0])
    table, tv = {}, 0.0
    for pat in product((1, -1), repeat=depth):
        c = sum((1 << (depth - 1 - j)) for j, s in enumerate(pat) if s > 0)
        pred = float(np.prod([f2 if s > 0 else 1.0 - f2 for s in pat]))
        table[pat] = (float(counts[c]), pred)
        tv += abs(counts[c] - pred)
    return table, 0.5 * tv


def tangent_stopping_times(ens, params, consts, modcfg, theta1, N0, ell0=None,
                           order="G_plus_H", mode="derived", direction=(0.0, 1.0)):
    """Cheap proxy for the delayed stopping time of each orbit.

    A tangent of length ``ell0`` (default ``theta1 / 100``) is carried
    along the orbit by the derivative of each revolution; ``N_hat`` is the
    first ``n >= N0`` at which its length reaches ``theta1``, or -1.
    Needs an ensemble run with ``keep_states=True``.
    """
    from .curves import track_tangents
    if ens.states is None:
        raise ValueError("run the ensemble with keep_states=True")
    ell0 = theta1 / 100.0 if ell0 is None else ell0
    n, H = ens.itinerary.shape
    cum = np.zeros((n, H + 1))
    cfg = modcfg if ens.config.dynamics == "modified_P0" else None
    t = np.tile(np.asarray(direction, dtype=float), (n, 1))
    for k in range(H):
        lj = np.full(n, -np.inf)
        good = np.isfinite(ens.states[:, k + 1, :]).all(axis=1)
        if np.any(good):
            lj[good], _, t[good] = track_tangents(ens.states[good, k, :], t[good], 1, params, consts,
                                                  cfg, order, mode, return_tangent=True)
        cum[:, k + 1] = cum[:, k] + lj
    return _first_reach(cum, math.log(theta1 / ell0), N0)


def _first_reach(cum, need, N0):
    H = cum.shape[1] - 1
    hit = (cum >= need) & (np.arange(H + 1)[None, :] >= N0)
    return np.where(hit.any(axis=1), hit.argmax(axis=1), -1)


def curve_stopping_times(ens, params, consts, modcfg, theta1, N0, orbits=None, ell0=None,
                         order="G_plus_H", mode="derived", max_seg=0.05):
    """Delayed stopping time from a short curve co-evolved around each orbit.

    A vertical segment of length ``ell0`` (default ``theta1 / 100``) centred
    on the initial point is pushed one revolution at a time.  The image
    piece through the orbit's next point is kept and cut back to at most
    ``theta1`` around that point.  ``N_hat`` is the first ``n >= N0`` at
    which the kept piece is long, i.e. of length at least ``theta1/2``
    before the cut.  Slower than :func:`tangent_stopping_times`, which it
    cross-validates.
    """
    from .curves import UnstableCurve, push_forward, _sub_curve
    if ens.states is None:
        raise ValueError("run the ensemble with keep_states=True")
    ell0 = theta1 / 100.0 if ell0 is None else ell0
    cfg = modcfg if ens.config.dynamics == "modified_P0" else None
    orbits = range(len(ens.initial)) if orbits is None else orbits
    H = ens.itinerary.shape[1]
    out = []
    for i in orbits:
        c = UnstableCurve.segment("R1", ens.states[i, 0], (0.0, 1.0), ell0, n=3)
        nh = -1
        for k in range(min(H, int(ens.n_done[i]))):
            pieces = push_forward(c, 1, params, consts, cfg, order=order, mode=mode, max_seg=max_seg)
            target = ens.states[i, k + 1]
            dist = [np.min(np.linalg.norm(p.points - target, axis=1)) for p in pieces]
            c = pieces[int(np.argmin(dist))]
            L = c.length
            if k + 1 >= N0 and L >= theta1 / 2:
                nh = k + 1
                break
            if L > theta1:
                seg = c.segment_lengths()
                s = np.concatenate([[0.0], np.cumsum(seg)])
                j = int(np.argmin(np.linalg.norm(c.points - target, axis=1)))
                a = min(max(s[j] - theta1 / 2, 0.0), L - theta1)
                c = _sub_curve(c, s, a, a + theta1, a == 0.0, a + theta1 >= L)
        out.append(nh)
    return np.array(out)


def moment_check(ens, kappa, N0, stopping=None, n_boot=1000, seed=0):
    """Estimate ``E[exp(-kappa * Delta)]`` with ``Delta = ln z_{N_hat} - ln z_0``.

    ``stopping`` gives ``N_hat`` per orbit (default ``N0`` for all).  The
    estimate is accepted when the upper end of the 95% CI is below 1.
    """
    n = len(ens.initial)
    nh = np.full(n, N0) if stopping is None else np.asarray(stopping)
    ok = (nh >= 0) & (nh <= ens.n_done)
    d = ens.log_energy[np.arange(n)[ok], nh[ok]] - ens.log_energy[ok, 0]
    d = d[np.isfinite(d)]
    if d.size < 10:
        raise StatisticalError("too few orbits reached the stopping time")
    x = np.exp(-kappa * d)
    lo, hi = _bootstrap_ci(x, n_boot=n_boot, seed=seed)
    return {"estimate": float(x.mean()), "ci": (lo, hi), "accepted": hi < 1.0, "n": int(d.size),
            "kappa": float(kappa)}


def escape_fraction(ens, alpha, T, Ts=None, V0=None):
    """Fraction of orbits with ``z_n >= exp(alpha n) z_0`` for all ``T <= n <= horizon``.

    Also returns the fraction for each ``T`` in ``Ts``, a linear fit of
    ``log(1 - fraction)`` against ``T`` over those values, and (with
    ``V0``) the fraction that never drops below ``V0``.  Orbits that did
    not complete count as failures.
    """
    H = ens.log_energy.shape[1] - 1
    if H < T:
        raise ValueError("horizon shorter than T")
    n = np.arange(H + 1)
    gain = ens.log_energy - ens.log_energy[:, :1]
    above = np.where(np.isfinite(gain), gain >= alpha * n[None, :], False)
    # suffix "all": ok_from[i, k] is true when the condition holds for every n >= k
    ok_from = np.flip(np.cumprod(np.flip(above, axis=1), axis=1), axis=1).astype(bool)
    comp = ens.completed

    def frac(t):
        return float(np.mean(ok_from[:, t] & comp))

    out = {"fraction": frac(T), "alpha": float(alpha), "T": int(T)}
    if Ts is not None:
        fr = np.array([frac(t) for t in Ts])
        out["per_T"] = list(zip([int(t) for t in Ts], fr.tolist()))
        y = np.log(np.clip(1.0 - fr, 1e-300, None))
        good = fr < 1.0
        if good.sum() >= 2:
            tt = np.asarray(Ts, dtype=float)[good]
            slope, icpt = np.polyfit(tt, y[good], 1)
            pred = icpt + slope * tt
            ss = np.sum((y[good] - y[good].mean()) ** 2)
            out["fit_slope"] = float(slope)
            out["fit_r2"] = float(1.0 - np.sum((y[good] - pred) ** 2) / ss) if ss > 0 else 1.0
            out["beta_hat"] = float(-slope)
    if V0 is not None:
        never = np.all(np.where(np.isfinite(ens.log_energy), ens.log_energy >= math.log(V0), False), axis=1)
        out["never_below_V0"] = float(np.mean(never & comp))
    return out


def increment_bound_report(ens, params, modcfg, slack=0.05):
    """Largest one-revolution log-energy jump against ``ln(f2/(ell f1))`` plus slack."""
    d = np.abs(np.diff(ens.log_energy, axis=1))
    d = d[np.isfinite(d)]
    bound = math.log(params.f2 / (modcfg.ell * params.f1)) + slack
    return {"max_increment": float(d.max()) if d.size else 0.0, "bound": bound,
            "violations": int(np.sum(d > bound))}


def iota(V_star, V0, N, ell, f1, f2):
    """``iota`` with ``V0 (1/d)^N = V_star iota^N`` and ``d = ell (1-f2)/(1-f1)``."""
    d = ell * (1.0 - f2) / (1.0 - f1)
    return (V0 / V_star) ** (1.0 / N) / d


def exact_guard(cfg, V_star, V0, ell, f1, f2):
    """``V1 > V_star iota^T`` for the exact escape experiment."""
    return cfg.v_range[0] > V_star * iota(V_star, V0, cfg.T, ell, f1, f2) ** cfg.T


@dataclass
class AccelConstants:
    kappa: float
    theta_hat: float
    alpha: float
    beta: float
    N0: int
    E: float

    def to_dict(self):
        return asdict(self)
