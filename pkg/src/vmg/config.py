"""Strict scenario configuration.

A scenario file is TOML (``key = value`` with ``[section]`` headers).  Every
key is checked against a fixed schema before any computation starts, and
anything outside it raises :class:`ConfigError`.

Example::

    scenario = "control-stall"

    [model]
    b_param = 1.8

    [solver]
    n_grid = 64
    t_end = 1500

    [initial]
    kind = "stall-seed"
    gamma = 0.4

    [controller]
    law = ["basic", "surrogate"]
    gamma_target = 0.65
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import CompressorParams, CubicCharacteristic, Frame
from .solver import Scheme, SolverConfig

SCENARIOS = ("simulate", "bifurcate", "control-stall", "control-surge", "lqr-design")
LAWS = ("constant", "basic", "surrogate", "lqr")
INITIAL_KINDS = ("equilibrium", "stall-seed", "surge-seed", "profile")


class ConfigError(ValueError):
    """Invalid scenario configuration (reported with exit status 2)."""


# -- value checkers ------------------------------------------------------------------

def _number(key, v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite")
    return v


def real(lo=-math.inf, hi=math.inf, lo_open=False):
    def check(key, v):
        v = _number(key, v)
        if v < lo or (lo_open and v == lo) or v > hi:
            bound = f"> {lo}" if lo_open else f">= {lo}"
            raise ConfigError(f"{key}: {v} out of range (needs {bound}, <= {hi})")
        return v
    return check


positive = real(0.0, lo_open=True)


def integer(lo):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{key}: expected an integer, got {v!r}")
        if v < lo:
            raise ConfigError(f"{key}: {v} below minimum {lo}")
        return v
    return check


def choice(options):
    def check(key, v):
        if v not in options:
            raise ConfigError(f"{key}: {v!r} not one of {', '.join(options)}")
        return v
    return check


def text(key, v):
    if not isinstance(v, str) or not v:
        raise ConfigError(f"{key}: expected a non-empty string")
    return v


def flag(key, v):
    if not isinstance(v, bool):
        raise ConfigError(f"{key}: expected true or false")
    return v


def laws(key, v):
    items = [v] if isinstance(v, str) else v
    if not isinstance(items, list) or not items:
        raise ConfigError(f"{key}: expected a law name or a list of names")
    for item in items:
        choice(LAWS)(key, item)
    if len(set(items)) != len(items):
        raise ConfigError(f"{key}: duplicate law names")
    return list(items)


def matrix2(key, v):
    try:
        m = np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a 2x2 array of numbers") from None
    if m.shape != (2, 2) or not np.all(np.isfinite(m)):
        raise ConfigError(f"{key}: expected a finite 2x2 array")
    if not np.allclose(m, m.T, rtol=0, atol=1e-14):
        raise ConfigError(f"{key}: must be symmetric")
    if np.linalg.eigvalsh(m).min() < -1e-12:
        raise ConfigError(f"{key}: must be positive semidefinite")
    return m


def number_list(key, v):
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{key}: expected a non-empty list of numbers")
    out = [positive(key, x) for x in v]
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ConfigError(f"{key}: values must be strictly increasing")
    return out


SCHEMA: dict[str, dict[str, Callable[[str, Any], Any]]] = {
    "": {"scenario": choice(SCENARIOS)},
    "model": {
        "nu": positive, "l_c": positive, "b_param": positive,
        "throttle_eps": positive, "gamma_min": positive, "gamma_max": positive,
    },
    "model.cubic": {"psi_c0": real(), "h": positive, "w": positive},
    "solver": {
        "n_grid": integer(8), "dt": positive, "frame": choice(tuple(f.value for f in Frame)),
        "scheme": choice(tuple(s.value for s in Scheme)), "t_end": positive,
        "record_every": integer(1),
    },
    "initial": {
        "kind": choice(INITIAL_KINDS), "gamma": positive, "amplitude": real(0.0),
        "mode": integer(1), "flow": real(), "pressure": real(), "file": text,
        "index": integer(0),
    },
    "controller": {
        "law": laws, "gamma": positive, "gamma1": positive, "gamma_target": positive,
        "r_u": positive, "r_phi": positive, "track_duration": positive,
        "r_weight": positive, "s_weight": matrix2, "s_final": matrix2,
        "riccati_dt": positive, "gain": positive, "horizon": positive,
        "wait_warning": positive,
    },
    "scan": {
        "gamma_start": positive, "gamma_stop": positive, "gamma_step": positive,
        "gammas": number_list, "n_grid": integer(8), "surge": flag,
        "margin": real(1.0),
    },
    "output": {
        "trajectory": text, "log": text, "summary": text, "branch": text, "plot": text,
        "state_dump": text, "riccati": text,
    },
}

OUTPUT_DEFAULTS = {
    "trajectory": "trajectory.csv",
    "log": "controller_log.csv",
    "summary": "summary.json",
    "branch": "branch.csv",
    "plot": "phase.svg",
    "state_dump": "last_state.csv",
    "riccati": "riccati.csv",
}


def _flatten(doc: dict, prefix: str = "") -> dict[str, dict]:
    """Split a parsed TOML document into ``{section: {key: value}}``."""
    sections: dict[str, dict] = {prefix: {}}
    for key, value in doc.items():
        if isinstance(value, dict):
            name = f"{prefix}.{key}" if prefix else key
            sections.update(_flatten(value, name))
        else:
            sections[prefix][key] = value
    return sections


def validate(doc: dict) -> dict[str, dict]:
    checked = {}
    for section, items in _flatten(doc).items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        allowed = SCHEMA[section]
        out = {}
        for key, value in items.items():
            where = f"{section}.{key}" if section else key
            if key not in allowed:
                raise ConfigError(f"unknown key {where}")
            out[key] = allowed[key](where, value)
        checked[section] = out
    return checked


@dataclass
class ScenarioConfig:
    scenario: str
    params: CompressorParams
    solver: SolverConfig
    initial: dict = field(default_factory=dict)
    controller: dict = field(default_factory=dict)
    scan: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    source: Optional[Path] = None
    solver_keys: frozenset = frozenset()

    def output_path(self, name: str, out_dir: Path, suffix: str = "") -> Path:
        base = Path(self.output[name])
        if suffix:
            base = base.with_name(f"{base.stem}_{suffix}{base.suffix}")
        return base if base.is_absolute() else out_dir / base

    def scan_grid(self) -> list[float]:
        sc = self.scan
        if "gammas" in sc:
            if {"gamma_start", "gamma_stop", "gamma_step"} & sc.keys():
                raise ConfigError("scan: give either gammas or a start/stop/step range")
            return list(sc["gammas"])
        start = sc.get("gamma_start", 0.30)
        stop = sc.get("gamma_stop", 0.80)
        step = sc.get("gamma_step", 0.05)
        if stop <= start:
            raise ConfigError("scan.gamma_stop must exceed scan.gamma_start")
        n = int(math.floor((stop - start) / step + 1e-9))
        return [round(start + i * step, 12) for i in range(n + 1)]


def parse_config(text_or_doc, scenario: Optional[str] = None, source=None) -> ScenarioConfig:
    """Validate a TOML string (or parsed mapping) into a :class:`ScenarioConfig`."""
    if isinstance(text_or_doc, str):
        try:
            doc = tomllib.loads(text_or_doc)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
    else:
        doc = dict(text_or_doc)
    sections = validate(doc)
    top = sections.get("", {})
    declared = top.get("scenario")
    if scenario is not None:
        choice(SCENARIOS)("scenario", scenario)
        if declared is not None and declared != scenario:
            raise ConfigError(f"config declares scenario {declared!r}, command line asks for "
                              f"{scenario!r}")
    scenario = scenario or declared
    if scenario is None:
        raise ConfigError("no scenario given")

    try:
        cubic = CubicCharacteristic(**sections.get("model.cubic", {}))
        params = CompressorParams(cubic=cubic, **sections.get("model", {}))
        solver = SolverConfig(**sections.get("solver", {}))
        solver.resolved_dt(params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    output = dict(OUTPUT_DEFAULTS)
    output.update(sections.get("output", {}))
    names = [str(Path(v)) for v in output.values()]
    if len(set(names)) != len(names):
        raise ConfigError("output paths must be distinct")

    cfg = ScenarioConfig(scenario, params, solver, sections.get("initial", {}),
                         sections.get("controller", {}), sections.get("scan", {}), output,
                         Path(source) if source else None,
                         frozenset(sections.get("solver", {})))
    _check_scenario(cfg)
    return cfg


def load_config(path, scenario: Optional[str] = None) -> ScenarioConfig:
    path = Path(path)
    try:
        content = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(content, scenario, source=path)
    if "file" in cfg.initial and not Path(cfg.initial["file"]).is_absolute():
        cfg.initial["file"] = str(path.parent / cfg.initial["file"])
    return cfg


def _check_scenario(cfg: ScenarioConfig):
    """Cross-field checks that do not need any computation."""
    ctl, ini, p = cfg.controller, cfg.initial, cfg.params
    for key in ("gamma", "gamma1", "gamma_target"):
        if key in ctl and not p.gamma_min <= ctl[key] <= p.gamma_max:
            raise ConfigError(f"controller.{key}={ctl[key]} outside [{p.gamma_min}, {p.gamma_max}]")
    if "gamma" in ini and ini["gamma"] < p.gamma_min:
        raise ConfigError(f"initial.gamma below gamma_min={p.gamma_min}")
    if ini.get("kind") == "profile" and not {"file", "flow", "pressure"} <= ini.keys():
        raise ConfigError("initial kind 'profile' needs file, flow and pressure")
    if "mode" in ini and not ini["mode"] < cfg.solver.n_grid / 2:
        raise ConfigError("initial.mode must be below n_grid/2")
    if cfg.scenario in ("control-stall", "control-surge"):
        expected = "stall-seed" if cfg.scenario == "control-stall" else "surge-seed"
        if ini.get("kind", expected) != expected:
            raise ConfigError(f"{cfg.scenario} needs initial.kind = {expected!r}")
        if "constant" in ctl.get("law", []):
            raise ConfigError("control scenarios take feedback laws (basic, surrogate, lqr)")
        g1, gt = ctl.get("gamma1"), ctl.get("gamma_target")
        if g1 is not None and gt is not None and not gt < g1:
            raise ConfigError("controller.gamma_target must be below controller.gamma1")
        if "track_duration" in ctl and ctl["track_duration"] < 50.0:
            raise ConfigError("controller.track_duration below 50 is not adiabatic")
    if cfg.scenario == "bifurcate" or cfg.scan:
        cfg.scan_grid()
