"""JSON run configuration shared by every CLI subcommand."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .maps import ModifiedSystemConfig
from .model import PRESETS, SlitProfile, default_setup, derive_params, normal_form_constants
from .stats import EnsembleConfig


class ConfigError(ValueError):
    pass


# section -> {key: default}; None means "not set"
SCHEMA = {
    "profile": {"preset": None, "kind": "tuned", "fdot": 20.0, "f1": 0.4, "f2": 0.6,
                "h0": 0.5, "A": 0.2, "omega": None},
    "model": {"lambda": None, "x0": None, "c": None},
    "thresholds": {"V_star": 1000.0, "V_0": None, "ell": 0.99},
    "ensemble": {"n_orbits": 10000, "v_range": [1e5, 2e5], "horizon": 200,
                 "dynamics": "modified_P0", "alpha": None, "T": 20, "init": "uniform",
                 "curve_sigma": 1.0},
    "analysis": {"order": "G_plus_H", "mode": "derived", "levels": [250.0, 500.0, 1000.0],
                 "n_points": 500, "margin": 0.15, "n_samples": 100000, "N0": 50,
                 "kappa": None, "depth": 3, "T_values": [5, 10, 15, 20, 25], "n_boot": 1000,
                 "curves": 300, "growth_horizon": 8, "n_events": 10000,
                 "initial": [0.3, 0.7, 50.0], "chart_nodes": 512},
    "output": {"dir": "out"},
}
TOP_LEVEL = set(SCHEMA) | {"seed"}


@dataclass
class RunConfig:
    raw: dict
    sections: dict
    seed: int = 0
    _setup: tuple | None = field(default=None, repr=False)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(raw) - TOP_LEVEL
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        sections = {}
        for name, defaults in SCHEMA.items():
            given = raw.get(name, {})
            if not isinstance(given, dict):
                raise ConfigError(f"section '{name}' must be an object")
            bad = set(given) - set(defaults)
            if bad:
                raise ConfigError(f"unknown keys in '{name}': {sorted(bad)}")
            sec = dict(defaults)
            sec.update(given)
            sections[name] = sec
        seed = raw.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an integer in [0, 2**64)")
        cfg = cls(raw, sections, seed)
        cfg._validate()
        return cfg

    @classmethod
    def load(cls, path):
        if path is None:
            return cls.from_dict({})
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read {path}: {e}") from e
        return cls.from_dict(raw)

    def _validate(self):
        p, a = self.sections["profile"], self.sections["analysis"]
        if p["preset"] is not None and p["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {p['preset']!r}; choose from {sorted(PRESETS)}")
        if p["kind"] not in ("tuned", "sinusoid"):
            raise ConfigError("profile.kind must be 'tuned' or 'sinusoid'")
        if p["kind"] == "sinusoid" and (p["omega"] is None or self.sections["model"]["lambda"] is None
                                        or self.sections["model"]["x0"] is None):
            raise ConfigError("a sinusoid profile needs profile.omega, model.lambda and model.x0")
        if a["order"] not in ("G_only", "G_plus_H"):
            raise ConfigError("analysis.order must be G_only or G_plus_H")
        if a["mode"] not in ("derived", "verbatim"):
            raise ConfigError("analysis.mode must be derived or verbatim")
        try:
            self.ensemble_config()
            t = self.sections["thresholds"]
            ModifiedSystemConfig(float(t["V_star"]), float(self.V_0), float(t["ell"]))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    # -- accessors ------------------------------------------------------
    @property
    def V_0(self):
        t = self.sections["thresholds"]
        return 10.0 * float(t["V_star"]) if t["V_0"] is None else float(t["V_0"])

    def modified(self):
        t = self.sections["thresholds"]
        return ModifiedSystemConfig(float(t["V_star"]), self.V_0, float(t["ell"]))

    def ensemble_config(self, **over):
        e = dict(self.sections["ensemble"])
        e["v_range"] = tuple(float(v) for v in e["v_range"])
        e.update(over)
        return EnsembleConfig(seed=self.seed, **e).validate()

    def setup(self):
        """``(profile, params, consts)``, built once."""
        if self._setup is None:
            try:
                self._setup = self._build()
            except ValueError as e:
                raise ConfigError(f"model construction failed: {e}") from e
        return self._setup

    def _build(self):
        p, m = self.sections["profile"], self.sections["model"]
        if p["preset"] is not None:
            kw = dict(PRESETS[p["preset"]])
            if m["c"] is not None:
                kw["c_bound"] = m["c"]
            return default_setup(**kw)
        if p["kind"] == "tuned":
            return default_setup(fdot=p["fdot"], f1=p["f1"], f2=p["f2"], h0=p["h0"], A=p["A"],
                                 c_bound=m["c"])
        prof = SlitProfile.sinusoid(p["h0"], p["A"], p["omega"])
        c = m["c"] if m["c"] is not None else min(0.25, p["h0"] - p["A"] - 1e-9)
        params = derive_params(prof, m["lambda"], m["x0"], c_bound=c)
        return prof, params, normal_form_constants(params, prof)

    def with_seed(self, seed):
        raw = dict(self.raw)
        raw["seed"] = seed
        return RunConfig.from_dict(raw)

    def echo(self):
        """Canonical one-line JSON of the configuration as given."""
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
