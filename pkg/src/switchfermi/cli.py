"""Command line entry point: one subcommand per experiment.

Every output file starts with ``#`` comment lines carrying the package
version, the subcommand, the configuration as given, the seed and the RNG
algorithm.  Files are written to a temporary name and renamed, so a failed
run leaves no partial outputs.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import datetime
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
ALPHA_NO_DRIFT = 1e-3
COMMANDS = ("simulate", "validate-normal-forms", "cone-report", "curve-growth", "ensemble",
            "drift", "itinerary", "moment", "escape", "calibrate-vstar", "dump-charts")


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------

def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


class Output:
    """Collects files and commits them together at the end of a run."""

    def __init__(self, outdir, header):
        self.outdir = outdir
        self.header = header
        self.files = {}

    def csv(self, name, columns, rows):
        lines = [f"# {h}" for h in self.header]
        lines.append(",".join(columns))
        lines.extend(",".join(fmt(v) for v in r) for r in rows)
        self.files[name] = "\n".join(lines) + "\n"

    def json(self, name, obj):
        meta = {"header": self.header}
        doc = _finite(json.loads(json.dumps({"meta": meta, **obj}, default=_jsonable)))
        self.files[name] = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"

    def commit(self):
        os.makedirs(self.outdir, exist_ok=True)
        staged = []
        try:
            for name, text in self.files.items():
                fd, tmp = tempfile.mkstemp(dir=self.outdir, prefix="." + name, suffix=".tmp")
                with os.fdopen(fd, "w") as fh:
                    fh.write(text)
                staged.append((tmp, os.path.join(self.outdir, name)))
            for tmp, final in staged:
                os.replace(tmp, final)
        finally:
            for tmp, _ in staged:
                if os.path.exists(tmp):
                    os.unlink(tmp)
        return [final for _, final in staged]


def _finite(o):
    # NaN and infinities become null so the files stay valid JSON
    if isinstance(o, float):
        return o if math.isfinite(o) else None
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_finite(v) for v in o]
    return o


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


# ---------------------------------------------------------------------------
# subcommands; each fills ``out`` and returns nothing
# ---------------------------------------------------------------------------

def cmd_simulate(rc, out, threads):
    from .billiard import initial_state, simulate_events
    prof, params, _ = rc.setup()
    a = rc.sections["analysis"]
    t0, y0, v0 = a["initial"]
    state = initial_state(t0, y0, v0, params, prof)
    events, final = simulate_events(state, int(a["n_events"]), params, prof)
    out.csv("events.csv", ["t", "surface", "v_after", "chamber"],
            [(e.t, e.surface, e.v_after, e.chamber) for e in events])
    out.json("simulate.json", {"n_events": len(events),
                               "final": {"t": final.t, "x": final.x, "y": final.y, "v": final.v,
                                         "chamber": final.chamber}})


def cmd_validate_normal_forms(rc, out, threads):
    from .charts import charts_for
    from .maps import MAP_IDS, fit_loglog_slope, normal_form_errors
    prof, params, consts = rc.setup()
    a = rc.sections["analysis"]
    ch = charts_for(params, prof)
    rng = np.random.default_rng(rc.seed)
    rows, summary = [], {}
    for mid in MAP_IDS:
        errs = []
        block = []
        for lev in a["levels"]:
            e1, e2, bad = normal_form_errors(mid, lev, int(a["n_points"]), params, prof, consts, ch,
                                             rng, a["order"], a["mode"], a["margin"])
            m1 = float(e1.max()) if e1.size else math.nan
            m2 = float(e2.max()) if e2.size else math.nan
            errs.append(max(m1, m2))
            block.append([mid, float(lev), m1, m2, bad])
        slope = fit_loglog_slope(a["levels"], errs)[0] if len(a["levels"]) > 1 else math.nan
        for r in block:
            rows.append(r + [slope])
        summary[mid] = slope
    out.csv("normal_forms.csv", ["map_id", "level", "max_err_first", "max_err_second",
                                 "mismatches", "slope"], rows)
    out.json("normal_forms.json", {"slopes": summary})


def cmd_cone_report(rc, out, threads):
    from .hyperbolic import common_cone, expansion_rates, verify_cone_invariance
    _, params, consts = rc.setup()
    a = rc.sections["analysis"]
    cone = common_cone(params, consts, a["mode"])
    rates = expansion_rates(cone, params, consts, a["mode"])
    ver = verify_cone_invariance(cone, params, consts, rc.modified().V_star, n=int(a["n_samples"]),
                                 rng=np.random.default_rng(rc.seed), mode=a["mode"])
    out.csv("cone_rates.csv", ["map_id", "min_stretch", "max_stretch"],
            [(k, v[0], v[1]) for k, v in rates.per_map.items()])
    out.json("cone_report.json", {
        "cone": {"slope_low": cone.slope_low, "slope_high": cone.slope_high, "gauge": cone.gauge},
        "rates": {"per_map": rates.per_map, "lambda_F": rates.lambda_F, "Lambda_F": rates.Lambda_F},
        "verification": {k: v for k, v in ver.items() if k != "per_map"},
    })


def cmd_curve_growth(rc, out, threads):
    from . import curves as cv
    from .hyperbolic import ConeConstructionFailed, common_cone, vertical_cone
    _, params, consts = rc.setup()
    a = rc.sections["analysis"]
    mc = rc.modified()
    try:
        cone = common_cone(params, consts, a["mode"])
    except ConeConstructionFailed:
        cone = vertical_cone()
    rng = np.random.default_rng(rc.seed)
    lv = (max(mc.V_0, 1e3), 10 * max(mc.V_0, 1e3))
    gc, scan = cv.measure_growth_constants(params, consts, cone, mc, rng, int(a["curves"]), lv,
                                           a["order"], a["mode"])
    th = gc.theta1
    fam = [cv.UnstableCurve.segment("R1", (rng.uniform(0, 2), lv[0] * math.exp(rng.uniform(0, math.log(10)))),
                                    (0.0, 1.0), rng.uniform(0.5, 1.0) * th) for _ in range(int(a["curves"]))]
    H = int(a["growth_horizon"])
    fh = cv.first_hit_distribution(fam, th, H, params, consts, mc, a["order"], a["mode"])
    ns = np.arange(1, H + 1)
    th4, b2, r2 = cv.geometric_fit(ns, fh["mass"])
    out.csv("fragmentation.csv", ["pieces", "count"], list(enumerate(scan["hist"].tolist())))
    out.csv("first_hit.csv", ["N", "mass", "fitted_bound"],
            [(int(n), m, b2 * th4 ** n if np.isfinite(th4) else math.nan) for n, m in zip(ns, fh["mass"])])
    out.json("curve_growth.json", {"delta0": gc.delta0, "kappa1": gc.kappa1, "K": gc.K_dist,
                                   "lambda_min": gc.lambda_min, "theta1": th, "theta4_hat": th4,
                                   "b2_hat": b2, "r2": r2, "nonzero_bins": int(np.sum(fh["mass"] > 0)),
                                   "unresolved": fh["unresolved"],
                                   "cone_is_vertical_stand_in": bool(cone.margins.get("vertical_only", False))})


def _ensemble(rc, threads, **over):
    from .stats import run_ensemble
    prof, params, consts = rc.setup()
    ec = rc.ensemble_config(**over)
    mc = rc.modified()
    return run_ensemble(ec, params, consts, mc, profile=prof, order=rc.sections["analysis"]["order"],
                        mode=rc.sections["analysis"]["mode"], threads=threads)


def cmd_ensemble(rc, out, threads):
    ens = _ensemble(rc, threads)
    rows = []
    for i, rec in enumerate(ens.records()):
        itin = "".join("+" if s > 0 else "-" for s in rec.itinerary)
        rows.append((i, rec.initial[0], rec.initial[1], rec.termination, len(rec.itinerary),
                     rec.log_energy[-1], itin))
    out.csv("orbits.csv", ["orbit", "sigma0", "H0", "termination", "revolutions", "log_energy_final",
                           "itinerary"], rows)
    out.json("ensemble.json", {"n_orbits": len(rows),
                               "terminations": {t: int(np.sum(ens.termination == k))
                                                for k, t in enumerate(("completed", "aborted_edge",
                                                                       "fell_below_threshold"))}})


def cmd_drift(rc, out, threads):
    from .model import drift_rate
    from .stats import bernoulli_walk, drift_estimate
    _, params, _ = rc.setup()
    a = rc.sections["analysis"]
    N0 = int(a["N0"])
    ens = _ensemble(rc, threads, horizon=N0)
    d = drift_estimate(ens, N0, n_boot=int(a["n_boot"]), seed=rc.seed)
    ell = rc.modified().ell
    w = bernoulli_walk(1.0, params.f1, params.f2, N0, 1, rc.seed)
    E = drift_rate(params.f1, params.f2)
    out.csv("drift.csv", ["N0", "mean", "ci_low", "ci_high", "n", "E", "walk_mean_ell1", "walk_mean_ell"],
            [(N0, d["mean"], d["ci"][0], d["ci"][1], d["n"], E, w["mean_step"], E + math.log(ell))])
    out.json("drift.json", {"drift": d, "E": E, "E_over_3": E / 3, "relative_error": abs(d["mean"] - E) / E
                            if E > 0 else None})


def cmd_itinerary(rc, out, threads):
    from .stats import itinerary_stats
    _, params, _ = rc.setup()
    depth = int(rc.sections["analysis"]["depth"])
    ens = _ensemble(rc, threads, horizon=depth)
    table, tv = itinerary_stats(ens, depth, params.f2)
    out.csv("itinerary.csv", ["pattern", "frequency", "predicted"],
            [("".join("+" if s > 0 else "-" for s in k), f, p) for k, (f, p) in table.items()])
    out.json("itinerary.json", {"depth": depth, "tv": tv})


def cmd_moment(rc, out, threads):
    from . import curves as cv
    from .hyperbolic import ConeConstructionFailed, common_cone, vertical_cone
    from .stats import moment_check, run_ensemble, tangent_stopping_times
    _, params, consts = rc.setup()
    a = rc.sections["analysis"]
    N0 = int(a["N0"])
    kappa = 1.0 / N0 if a["kappa"] is None else float(a["kappa"])
    mc = rc.modified()
    ec = rc.ensemble_config(horizon=2 * N0)
    ens = run_ensemble(ec, params, consts, mc, order=a["order"], mode=a["mode"], keep_states=True)
    try:
        cone = common_cone(params, consts, a["mode"])
    except ConeConstructionFailed:
        cone = vertical_cone()
    gc, _ = cv.measure_growth_constants(params, consts, cone, mc, np.random.default_rng(rc.seed), 50,
                                        order=a["order"], mode=a["mode"])
    nh = tangent_stopping_times(ens, params, consts, mc, gc.theta1, N0, order=a["order"], mode=a["mode"])
    m = moment_check(ens, kappa, N0, nh, n_boot=int(a["n_boot"]), seed=rc.seed)
    m0 = moment_check(ens, kappa, N0, None, n_boot=int(a["n_boot"]), seed=rc.seed)
    out.csv("moment.csv", ["stopping", "kappa", "estimate", "ci_low", "ci_high", "n", "accepted"],
            [("delayed", m["kappa"], m["estimate"], m["ci"][0], m["ci"][1], m["n"], m["accepted"]),
             ("fixed_N0", m0["kappa"], m0["estimate"], m0["ci"][0], m0["ci"][1], m0["n"], m0["accepted"])])
    out.json("moment.json", {"delayed": m, "fixed_N0": m0, "theta1": gc.theta1,
                             "stopping_hist": np.bincount(nh[nh >= 0]).tolist()})


def cmd_escape(rc, out, threads):
    from .config import ConfigError
    from .stats import drift_estimate, escape_fraction, exact_guard
    _, params, _ = rc.setup()
    a = rc.sections["analysis"]
    ec = rc.ensemble_config()
    mc = rc.modified()
    if ec.dynamics == "exact" and not exact_guard(ec, mc.V_star, mc.V_0, mc.ell, params.f1, params.f2):
        raise ConfigError("V1 must exceed V_star * iota**T for the exact escape experiment")
    ens = _ensemble(rc, threads)
    alpha, source, drift = ec.alpha, "config", None
    if alpha is None:
        drift = drift_estimate(ens, min(int(a["N0"]), ec.horizon), n_boot=int(a["n_boot"]), seed=rc.seed)
        if drift["ci"][0] > 0:
            alpha, source = drift["mean"] / 2.0, "half_drift"
        else:
            # no measurable drift: test a fixed small rate instead
            alpha, source = ALPHA_NO_DRIFT, "no_drift_fallback"
    Ts = [t for t in a["T_values"] if t <= ec.horizon]
    res = escape_fraction(ens, alpha, ec.T, Ts=Ts,
                          V0=mc.V_0 if ec.dynamics == "exact" else None)
    out.csv("escape.csv", ["T", "fraction"], res.get("per_T", [(ec.T, res["fraction"])]))
    out.json("escape.json", {"escape": res, "drift": drift, "alpha_source": source})


def cmd_calibrate_vstar(rc, out, threads):
    from .maps import calibrate_v_star
    prof, params, consts = rc.setup()
    a = rc.sections["analysis"]
    v, rows = calibrate_v_star(params, prof, consts, levels=None, n=min(int(a["n_points"]), 200),
                               rng=np.random.default_rng(rc.seed), order=a["order"], mode=a["mode"])
    out.csv("calibration.csv", ["level", "map_id", "phase_rel", "energy_rel", "mismatch"], rows)
    out.json("calibration.json", {"V_star": v, "criterion": "relative error below 0.01"})


def cmd_dump_charts(rc, out, threads):
    from .charts import Charts
    prof, params, _ = rc.setup()
    ch = Charts(params, prof, n_nodes=int(rc.sections["analysis"]["chart_nodes"]))
    t = np.linspace(0.0, 2.0, 2001)
    au, al = ch.angle(t, "U"), ch.angle(t, "L")
    f = np.array([prof(s) for s in t])
    out.csv("charts.csv", ["t", "f", "angle_upper", "angle_lower"], zip(t, f, au, al))
    out.json("charts.json", {"L_star": params.L_star, "M_star": params.M_star,
                             "t1_star": params.t1_star, "t2_star": params.t2_star,
                             "f1": params.f1, "f2": params.f2, "fdot1": params.fdot1, "fdot2": params.fdot2})


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="switchfermi", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=None, help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (env FERMI_THREADS)")
    ap.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    ap.add_argument("--no-timestamp", action="store_true", help="omit the creation time from headers")
    return ap


def _numeric_errors():
    from .billiard import NumericalError, OrbitAborted
    from .curves import ConeViolation, CurveError, RefinementOverflow
    from .hyperbolic import ConeConstructionFailed, NotHyperbolic
    from .stats import StatisticalError
    return (NumericalError, OrbitAborted, ConeViolation, CurveError, RefinementOverflow,
            ConeConstructionFailed, NotHyperbolic, StatisticalError, FloatingPointError,
            ArithmeticError)


def main(argv=None):
    from .config import ConfigError, RunConfig
    from .stats import RNG_ALGORITHM
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        rc = RunConfig.load(args.config)
        if args.seed is not None:
            rc = rc.with_seed(args.seed)
        threads = args.threads if args.threads is not None else int(os.environ.get("FERMI_THREADS", "1"))
        if threads < 1:
            raise ConfigError("threads must be positive")
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    header = [f"switchfermi {__version__}", f"command: {args.command}", f"config: {rc.echo()}",
              f"seed: {rc.seed}", f"rng: {RNG_ALGORITHM}"]
    if not args.no_timestamp:
        header.append("created: " + datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"))
    out = Output(args.out or rc.sections["output"]["dir"], header)
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            HANDLERS[args.command](rc, out, threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except _numeric_errors() as e:
        print(f"numerical failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    for path in out.commit():
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
