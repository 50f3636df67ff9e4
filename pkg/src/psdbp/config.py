"""YAML experiment configuration with line-aware validation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import yaml

from .offspring import OffspringSpec, OffspringSpecError

EXPERIMENTS = ("simulate", "histogram_mz", "gap_profile", "gw_drift",
               "estimator_comparison", "spectrum", "coupling_error_table")
METHODS = ("none", "splitting", "hybrid")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class Conditioning:
    method: str = "none"
    k: int | None = None
    target_error: float = 1e-6


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.  See ``README.md`` for the schema."""

    experiment: str
    offspring: OffspringSpec
    z0: int = 1
    n: int = 0
    replications: int = 1
    conditioning: Conditioning = Conditioning()
    seed: int = 0
    zmax: int | None = None
    min_zmax: int = 1
    spectral_tol: float = 1e-12
    states: tuple[int, ...] = ()
    ks: tuple[int, ...] = ()
    horizons: tuple[int, ...] = ()
    record_tree: bool = False
    extra: dict = field(default_factory=dict)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


def _lines(node, prefix=()) -> dict[tuple, int]:
    """Map each mapping key path to the 1-based line of its value."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            out.update(_lines(v, path))
    return out


class _Checker:
    def __init__(self, data: dict, lines: dict, source: str):
        self.data = data
        self.lines = lines
        self.source = source

    def fail(self, msg, *path):
        line = self.lines.get(tuple(path)) if path else None
        raise ConfigError(msg, line, self.source)

    def get(self, key, kind, default=None, required=False, check=None, what=""):
        if key not in self.data:
            if required:
                self.fail(f"missing required key {key!r}")
            return default
        val = self.data[key]
        if kind is int:
            if isinstance(val, bool) or not isinstance(val, int):
                self.fail(f"{key} must be an integer, got {val!r}", key)
        elif kind is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self.fail(f"{key} must be a number, got {val!r}", key)
            val = float(val)
        elif kind is bool:
            if not isinstance(val, bool):
                self.fail(f"{key} must be true or false, got {val!r}", key)
        elif kind == "intlist":
            if not isinstance(val, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in val):
                self.fail(f"{key} must be a list of integers", key)
            val = tuple(val)
        if check is not None and not check(val):
            self.fail(f"{key} {what}, got {val!r}", key)
        return val


def _parse_conditioning(c: _Checker):
    raw = c.data.get("conditioning", "none")
    if isinstance(raw, str):
        raw = {"method": raw}
    if not isinstance(raw, dict):
        c.fail("conditioning must be a method name or a mapping", "conditioning")
    sub = _Checker(raw, {k[1:]: v for k, v in c.lines.items() if k[:1] == ("conditioning",)}, c.source)
    sub.lines.setdefault(("method",), c.lines.get(("conditioning",)))
    unknown = set(raw) - {"method", "k", "target_error"}
    if unknown:
        sub.fail(f"unknown conditioning key {sorted(unknown)[0]!r}", sorted(unknown)[0])
    method = raw.get("method", "none")
    if method not in METHODS:
        sub.fail(f"conditioning method must be one of {METHODS}, got {method!r}", "method")
    k = sub.get("k", int, None, check=lambda v: v >= 1, what="must be >= 1")
    target = sub.get("target_error", float, 1e-6, check=lambda v: 0 < v < 1, what="must lie in (0, 1)")
    return Conditioning(method, k, target)


_TOP_KEYS = {"experiment", "offspring", "z0", "n", "replications", "conditioning", "seed",
             "zmax", "min_zmax", "spectral_tol", "states", "ks", "horizons", "record_tree"}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate YAML text; errors carry ``source:line`` prefixes."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    lines = _lines(node)
    c = _Checker(data, lines, source)
    for key in data:
        if key not in _TOP_KEYS:
            c.fail(f"unknown key {key!r}", key)
    exp = c.get("experiment", str, required=True)
    if exp not in EXPERIMENTS:
        c.fail(f"experiment must be one of {EXPERIMENTS}, got {exp!r}", "experiment")
    off = c.get("offspring", dict, required=True)
    if not isinstance(off, dict):
        c.fail("offspring must be a mapping", "offspring")
    try:
        spec = OffspringSpec.from_dict(off)
    except (OffspringSpecError, KeyError, TypeError) as exc:
        line = lines.get(("offspring",))
        # point at the most specific offending key when possible
        for key in ("parameters", "mean_model", "family"):
            if ("offspring", key) in lines and key in str(exc):
                line = lines[("offspring", key)]
        if isinstance(exc, KeyError):
            exc = f"missing key {exc}"
        raise ConfigError(f"invalid offspring law: {exc}", line, source) from None
    z0 = c.get("z0", int, 1, check=lambda v: v >= 1, what="must be >= 1")
    n = c.get("n", int, 0, check=lambda v: v >= 0, what="must be >= 0")
    reps = c.get("replications", int, 1, check=lambda v: v >= 1, what="must be >= 1")
    cond = _parse_conditioning(c)
    seed = c.get("seed", int, 0, check=lambda v: 0 <= v < 2**64, what="must be an unsigned 64-bit integer")
    zmax = c.get("zmax", int, None, check=lambda v: v >= 1, what="must be >= 1")
    min_zmax = c.get("min_zmax", int, 1, check=lambda v: v >= 1, what="must be >= 1")
    tol = c.get("spectral_tol", float, 1e-12, check=lambda v: 0 < v < 1, what="must lie in (0, 1)")
    states = c.get("states", "intlist", (), check=lambda v: all(x >= 1 for x in v), what="must be >= 1")
    ks = c.get("ks", "intlist", (), check=lambda v: all(x >= 0 for x in v), what="must be >= 0")
    horizons = c.get("horizons", "intlist", (), check=lambda v: all(x >= 1 for x in v), what="must be >= 1")
    tree = c.get("record_tree", bool, False)
    if cond.method != "none" and exp in ("simulate", "histogram_mz", "gw_drift") and n < 1:
        c.fail("conditioned simulation needs n >= 1", "n")
    if cond.method == "hybrid" and cond.k is not None and exp != "estimator_comparison" and cond.k > n:
        c.fail(f"hybrid tail length k={cond.k} exceeds horizon n={n}", "conditioning")
    if exp == "histogram_mz" and not states:
        c.fail("histogram_mz needs a non-empty 'states' list")
    if exp == "coupling_error_table" and not ks:
        c.fail("coupling_error_table needs a non-empty 'ks' list")
    if exp == "estimator_comparison" and not horizons:
        c.fail("estimator_comparison needs a non-empty 'horizons' list")
    if exp in ("gw_drift", "estimator_comparison") and not spec.is_constant:
        c.fail(f"{exp} needs a size-independent offspring law", "offspring")
    if zmax is not None and z0 > zmax:
        c.fail(f"z0={z0} lies beyond zmax={zmax}", "zmax")
    return ExperimentConfig(exp, spec, z0, n, reps, cond, seed, zmax, min_zmax, tol,
                            states, ks, horizons, tree)


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    d = {
        "experiment": cfg.experiment,
        "offspring": cfg.offspring.to_dict(),
        "z0": cfg.z0, "n": cfg.n, "replications": cfg.replications,
        "conditioning": {"method": cfg.conditioning.method, "k": cfg.conditioning.k,
                         "target_error": cfg.conditioning.target_error},
        "seed": cfg.seed, "zmax": cfg.zmax, "min_zmax": cfg.min_zmax,
        "spectral_tol": cfg.spectral_tol,
        "states": list(cfg.states), "ks": list(cfg.ks), "horizons": list(cfg.horizons),
        "record_tree": cfg.record_tree,
    }
    if d["conditioning"]["k"] is None:
        del d["conditioning"]["k"]
    if d["zmax"] is None:
        del d["zmax"]
    return d


# desk-scale configurations for the reproduce subcommand
_RICKER = {"family": "two_point_binary", "mean_model": "ricker", "parameters": {"r": 1.2, "K": 30}}
_GEOM = lambda m: {"family": "geometric", "mean_model": "constant", "parameters": {"m": m}}  # noqa: E731

FIGURES = {
    "fig2": {"experiment": "histogram_mz", "offspring": _RICKER, "z0": 30, "n": 2000,
             "replications": 2000, "conditioning": {"method": "hybrid"}, "states": [28], "seed": 2},
    "fig3": {"experiment": "gap_profile", "offspring": _RICKER, "states": [8, 28]},
    "fig4": {"experiment": "histogram_mz", "offspring": _RICKER, "z0": 30, "n": 2000,
             "replications": 2000, "conditioning": {"method": "hybrid"}, "states": [8], "seed": 4},
    "fig5": {"experiment": "gw_drift", "offspring": _GEOM(0.9), "z0": 100, "n": 1000,
             "replications": 200, "conditioning": {"method": "hybrid"}, "min_zmax": 400,
             "horizons": [10, 50, 100, 250, 500, 1000], "seed": 5},
    "fig6": {"experiment": "estimator_comparison", "offspring": _GEOM(0.8), "z0": 1,
             "replications": 500, "conditioning": {"method": "hybrid"}, "min_zmax": 400,
             "horizons": [1000], "seed": 6},
    "fig7": {"experiment": "estimator_comparison", "offspring": _GEOM(0.8), "z0": 100,
             "replications": 500, "conditioning": {"method": "hybrid"}, "min_zmax": 400,
             "horizons": [10, 15, 20, 25, 30, 40, 50, 60, 80, 100], "seed": 7},
    "spectrum": {"experiment": "spectrum", "offspring": _RICKER, "states": [8, 28]},
    "coupling": {"experiment": "coupling_error_table", "offspring": _GEOM(0.8), "min_zmax": 400,
                 "spectral_tol": 1e-15, "ks": [0, 50, 100, 150, 200, 500]},
}


def figure_config(name: str) -> ExperimentConfig:
    if name not in FIGURES:
        raise ConfigError(f"unknown figure {name!r}; choose from {sorted(FIGURES)}")
    return parse_config(yaml.safe_dump(FIGURES[name], sort_keys=False), f"<builtin {name}>")
