"""Scenario runner: ``vmg <scenario> --config <path> [--out <dir>] [--plot] [--full-profile]``.

Exit status 0 on success, 2 on a configuration error, 3 on a numerical
failure (the last valid state is dumped next to the other outputs) and 1
when an output file cannot be written.  Errors are reported on stderr as a
one-line JSON record.  ``VMG_THREADS`` caps the number of worker threads
used by bifurcation scans.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .attractor import (
    NoSignChange,
    bifurcation_scan,
    classify_regime,
    find_stall_wave,
    find_surge_cycle,
    hopf_point,
)
from .config import SCENARIOS, ConfigError, ScenarioConfig, load_config
from .control import (
    BasicControlConfig,
    ConstantThrottle,
    NoStallFreeGamma,
    basic_controller,
    baseline_surrogate,
    closed_loop_matrix,
    linearize_design,
    lqr_controller,
    select_gamma1,
    solve_riccati,
    stall_uncontrollability_check,
    steady_riccati,
)
from .io import (
    emit_phase_plot,
    read_profile,
    write_branch_csv,
    write_log_csv,
    write_riccati_csv,
    write_state_csv,
    write_trajectory_csv,
)
from .model import AnnulusState, ModelError, design_equilibrium, grid
from .solver import NonFinite, SolverConfig, Trajectory, integrate

__all__ = ["main", "run_scenario", "emit_phase_plot", "recovery_metrics", "excursion_area"]

log = logging.getLogger("vmg")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# defaults for the control experiments (coarser grid, long horizon)
CONTROL_SOLVER = {"n_grid": 64, "t_end": 1500.0, "record_every": 10}
STALL_GAMMA, SURGE_GAMMA, TARGET_GAMMA = 0.4, 0.5, 0.65
RECOVERY_TOL = 1e-3


class ScenarioFailure(Exception):
    """Numerical failure carrying whatever partial results exist."""

    def __init__(self, cause, state=None, trajectory=None):
        super().__init__(str(cause))
        self.cause = cause
        self.state = state
        self.trajectory = trajectory


# -- metrics -----------------------------------------------------------------------

def excursion_area(flow, press) -> float:
    """Area of the convex hull of the (Phi, Psi) orbit (0 for degenerate orbits)."""
    pts = np.column_stack([np.asarray(flow, float), np.asarray(press, float)])
    pts = np.unique(pts, axis=0)
    if len(pts) < 3:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)
    except QhullError:
        return 0.0


def recovery_metrics(traj: Trajectory, target, tol: float = RECOVERY_TOL) -> dict:
    """Recovery time and pressure floor of a controlled run.

    The run counts as recovered at the first recorded time from which every
    later sample has ``max|phi| < tol`` and ``(Phi, Psi)`` within ``tol`` of
    ``target``.
    """
    err = np.maximum(np.abs(traj.avg_flow - target[0]), np.abs(traj.pressure_rise - target[1]))
    ok = (err < tol) & (traj.phi_sup < tol)
    bad = np.nonzero(~ok)[0]
    if not ok[-1]:
        t_rec = None
    else:
        first = 0 if bad.size == 0 else int(bad[-1]) + 1
        t_rec = float(traj.times[first] - traj.times[0])
    psi0 = float(traj.pressure_rise[0])
    psi_min = float(traj.pressure_rise.min())
    return {
        "recovered": t_rec is not None,
        "recovery_time": t_rec,
        "min_Psi": psi_min,
        "initial_Psi": psi0,
        "min_Psi_ratio": psi_min / psi0 if psi0 != 0 else None,
        "excursion_area": excursion_area(traj.avg_flow, traj.pressure_rise),
        "final_Phi": float(traj.avg_flow[-1]),
        "final_Psi": float(traj.pressure_rise[-1]),
        "final_phi_sup": float(traj.phi_sup[-1]),
        "gamma_min_applied": float(traj.gamma.min()),
        "gamma_max_applied": float(traj.gamma.max()),
    }


# -- scenario helpers -----------------------------------------------------------------

def _solver(cfg: ScenarioConfig, control: bool) -> SolverConfig:
    if not control:
        return cfg.solver
    given = cfg.solver_keys
    changes = {k: v for k, v in CONTROL_SOLVER.items() if k not in given}
    try:
        solver = cfg.solver.with_(**changes)
        solver.resolved_dt(cfg.params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return solver


def _seed(n_grid, amplitude, mode):
    return amplitude * np.cos(mode * grid(n_grid))


def initial_state(cfg: ScenarioConfig, n_grid: int, default_kind: str,
                  default_gamma: Optional[float]) -> tuple[AnnulusState, dict]:
    ini = cfg.initial
    kind = ini.get("kind", default_kind)
    gamma = ini.get("gamma", default_gamma)
    info = {"kind": kind}
    p = cfg.params
    if kind == "profile":
        try:
            phi = read_profile(ini["file"])
        except ValueError as exc:
            raise ConfigError(f"initial.file: {exc}") from None
        if phi.size != n_grid:
            raise ConfigError(f"profile has {phi.size} samples, solver.n_grid is {n_grid}")
        state = AnnulusState.from_profile(phi, ini["flow"], ini["pressure"])
        return state, info
    if gamma is None:
        raise ConfigError(f"initial kind {kind!r} needs initial.gamma")
    info["gamma"] = gamma
    if kind == "surge-seed":
        cycle = find_surge_cycle(p, gamma)
        index = ini.get("index", 0) % len(cycle.times)
        info.update(period=cycle.period, index=index, cycle_min_Phi=cycle.min_flow)
        return cycle.state(n_grid, index), info
    amplitude = ini.get("amplitude", 0.3 if kind == "stall-seed" else 0.0)
    mode = ini.get("mode", 1)
    flow0, press0 = design_equilibrium(p, gamma)
    flow = ini.get("flow", flow0)
    press = ini.get("pressure", press0)
    if kind == "stall-seed" and cfg.scenario == "control-stall":
        wave = find_stall_wave(p, gamma, amplitude, n_grid,
                               seed_profile=_seed(n_grid, amplitude, mode))
        info.update(stall_amplitude=wave.amplitude, stall_speed=wave.wave_speed,
                    stall_residual=wave.residual)
        return wave.state(), info
    return AnnulusState.from_profile(_seed(n_grid, amplitude, mode), flow, press), info


def _gamma1(cfg: ScenarioConfig, threads: int) -> tuple[float, dict]:
    ctl = cfg.controller
    if "gamma1" in ctl:
        return ctl["gamma1"], {"source": "config"}
    table = bifurcation_scan(cfg.params, cfg.scan_grid(), cfg.scan.get("n_grid", 64),
                             with_surge=False, workers=threads)
    try:
        g1 = select_gamma1(cfg.params, table, cfg.scan.get("margin", 1.02))
    except NoStallFreeGamma as exc:
        raise ScenarioFailure(exc) from exc
    return g1, {"source": "scan", "first_stall_free": table.gamma1_candidate}


def _basic_config(ctl: dict) -> BasicControlConfig:
    keys = ("r_u", "r_phi", "track_duration", "r_weight", "s_weight", "s_final",
            "riccati_dt", "wait_warning")
    return BasicControlConfig(**{k: ctl[k] for k in keys if k in ctl})


def make_law(cfg: ScenarioConfig, name: str, gamma_target: float, gamma1: Optional[float] = None):
    ctl, p = cfg.controller, cfg.params
    if name == "constant":
        gamma = ctl.get("gamma", cfg.initial.get("gamma"))
        if gamma is None:
            raise ConfigError("constant law needs controller.gamma")
        return ConstantThrottle(p, gamma)
    if name == "surrogate":
        return baseline_surrogate(p, gamma_target, ctl.get("gain", 5.0))
    if name == "lqr":
        system = linearize_design(p, gamma_target)
        ricc = steady_riccati(system, ctl.get("s_weight", np.eye(2)), ctl.get("r_weight", 10.0))
        return lqr_controller(p, system, ricc, gamma_target)
    if name == "basic":
        if gamma1 is None:
            raise ConfigError("basic law needs controller.gamma1 or a scan")
        return basic_controller(p, gamma1, gamma_target, _basic_config(ctl))
    raise ConfigError(f"unknown law {name!r}")


def _law_label(law) -> str:
    return getattr(law, "label", "") or getattr(law, "name", type(law).__name__)


def _integrate(p, state, law, solver):
    try:
        return integrate(p, state, law, solver)
    except NonFinite as exc:
        raise ScenarioFailure(exc, exc.last_state, exc.trajectory) from exc


def _write_run(cfg, out_dir, traj, suffix, plot, full_profile, title=""):
    files = {
        "trajectory": str(write_trajectory_csv(traj, cfg.output_path("trajectory", out_dir, suffix),
                                               full_profile)),
        "log": str(write_log_csv(traj.log, cfg.output_path("log", out_dir, suffix))),
    }
    if plot:
        files["plot"] = str(emit_phase_plot(traj, cfg.output_path("plot", out_dir, suffix),
                                            cfg.params, title))
    return files


# -- scenarios ----------------------------------------------------------------------

def _simulate(cfg, out_dir, plot, full_profile, threads):
    solver = cfg.solver
    laws = cfg.controller.get("law", ["constant"])
    if len(laws) != 1:
        raise ConfigError("simulate runs exactly one law")
    target = cfg.controller.get("gamma_target", cfg.controller.get("gamma"))
    state, info = initial_state(cfg, solver.n_grid, "equilibrium",
                                cfg.initial.get("gamma", cfg.controller.get("gamma")))
    law = make_law(cfg, laws[0], target if target is not None else info.get("gamma"))
    traj = _integrate(cfg.params, state, law, solver)
    summary = {"scenario": "simulate", "law": _law_label(law), "initial": info,
               "final_time": float(traj.times[-1]), "samples": len(traj)}
    tail_len = max(20.0, 0.25 * traj.duration)
    if traj.duration >= 20.0:
        label = classify_regime(traj.tail(tail_len))
        summary["regime"] = label.regime.value
        summary["regime_detail"] = {"phi_amplitude": label.phi_amplitude,
                                    "flow_oscillation": label.flow_oscillation,
                                    "wave_speed": label.wave_speed, "period": label.period}
    else:
        summary["regime"] = None
        summary["regime_detail"] = "run shorter than the 20-unit classification tail"
    summary["files"] = _write_run(cfg, out_dir, traj, "", plot, full_profile)
    return summary


def _bifurcate(cfg, out_dir, plot, full_profile, threads):
    gammas = cfg.scan_grid()
    table = bifurcation_scan(cfg.params, gammas, cfg.scan.get("n_grid", 64),
                             with_surge=cfg.scan.get("surge", True), workers=threads)
    path = write_branch_csv(table, cfg.output_path("branch", out_dir))
    summary = {"scenario": "bifurcate", "gammas": gammas,
               "first_stall_free": table.gamma1_candidate, "files": {"branch": str(path)}}
    try:
        summary["gamma1"] = select_gamma1(cfg.params, table, cfg.scan.get("margin", 1.02))
    except (NoStallFreeGamma, ModelError) as exc:
        summary["gamma1"] = None
        summary["gamma1_error"] = str(exc)
    try:
        summary["hopf_gamma"] = hopf_point(cfg.params, (gammas[0], gammas[-1]))
    except NoSignChange as exc:
        summary["hopf_gamma"] = None
        summary["hopf_error"] = str(exc)
    summary["notes"] = {f"{r.gamma:.12g}": r.notes for r in table.rows if r.notes}
    return summary


def _control(cfg, out_dir, plot, full_profile, threads):
    stall = cfg.scenario == "control-stall"
    solver = _solver(cfg, control=True)
    ctl = cfg.controller
    gamma_target = ctl.get("gamma_target", TARGET_GAMMA)
    laws = ctl.get("law", ["basic", "surrogate"])
    gamma1 = None
    g1_info = None
    if "basic" in laws:
        gamma1, g1_info = _gamma1(cfg, threads)
        if not gamma_target < gamma1:
            raise ConfigError(f"gamma_target {gamma_target} must be below gamma1 {gamma1:.6g}")
    state, info = initial_state(cfg, solver.n_grid, "stall-seed" if stall else "surge-seed",
                                STALL_GAMMA if stall else SURGE_GAMMA)
    target = design_equilibrium(cfg.params, gamma_target)
    runs = {}
    for name in laws:
        law = make_law(cfg, name, gamma_target, gamma1)
        traj = _integrate(cfg.params, state, law, solver)
        metrics = recovery_metrics(traj, target)
        metrics["label"] = _law_label(law)
        if hasattr(law, "phase_times"):
            metrics["phase_times"] = {str(k): v for k, v in sorted(law.phase_times.items())}
        metrics["files"] = _write_run(cfg, out_dir, traj, name, plot, full_profile,
                                      f"{cfg.scenario}: {metrics['label']}")
        runs[name] = metrics
    summary = {"scenario": cfg.scenario, "initial": info, "gamma_target": gamma_target,
               "target": list(target), "gamma1": gamma1, "gamma1_info": g1_info,
               "t_end": solver.t_end, "n_grid": solver.n_grid, "runs": runs}
    if "basic" in runs and "surrogate" in runs:
        a, b = runs["basic"]["excursion_area"], runs["surrogate"]["excursion_area"]
        summary["comparison"] = {"basic_area": a, "surrogate_area": b,
                                 "basic_smaller": bool(a < b)}
    return summary


def _lqr_design(cfg, out_dir, plot, full_profile, threads):
    ctl = cfg.controller
    gamma0 = ctl.get("gamma_target", ctl.get("gamma", TARGET_GAMMA))
    s_w = ctl.get("s_weight", np.eye(2))
    s_f = ctl.get("s_final", np.eye(2))
    r_w = ctl.get("r_weight", 10.0)
    horizon = ctl.get("horizon", 50.0)
    system = linearize_design(cfg.params, gamma0, cfg.solver.n_grid)
    ricc = solve_riccati(system, s_w, r_w, s_f, horizon, dt=ctl.get("riccati_dt", 0.01))
    steady = steady_riccati(system, s_w, r_w)
    path = write_riccati_csv(ricc, cfg.output_path("riccati", out_dir))

    def eig_list(m):
        ev = sorted(np.linalg.eigvals(m), key=lambda z: (z.real, z.imag))
        return [[float(z.real), float(z.imag)] for z in ev]

    n_show = min(8, len(ricc.times))
    picks = np.unique(np.linspace(0, len(ricc.times) - 1, n_show).astype(int))
    return {
        "scenario": "lqr-design",
        "gamma0": gamma0,
        "equilibrium": [system.flow0, system.press0],
        "A": system.a_mat.tolist(),
        "b": system.b_vec.tolist(),
        "decoupled_growth": system.decoupled_growth[:4].tolist(),
        "stall_uncontrollable": stall_uncontrollability_check(system),
        "open_loop_eigenvalues": eig_list(system.a_mat),
        "Q_samples": [{"t": ricc.times[i], "Q": ricc.q[i].tolist()} for i in picks],
        "Q_infinity": steady.q[0].tolist(),
        "closed_loop_eigenvalues_Q0": eig_list(closed_loop_matrix(system, ricc.q[0], r_w)),
        "closed_loop_eigenvalues_Qinf": eig_list(closed_loop_matrix(system, steady.q[0], r_w)),
        "files": {"riccati": str(path)},
    }


_RUNNERS = {
    "simulate": _simulate,
    "bifurcate": _bifurcate,
    "control-stall": _control,
    "control-surge": _control,
    "lqr-design": _lqr_design,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def run_scenario(cfg: ScenarioConfig, out_dir, plot: bool = False, full_profile: bool = False,
                 threads: int = 1) -> dict:
    """Run one configured scenario, write its files under ``out_dir`` and
    return the summary (also written as JSON)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        summary = _RUNNERS[cfg.scenario](cfg, out_dir, plot, full_profile, threads)
    except ScenarioFailure:
        raise
    except ModelError as exc:
        raise ScenarioFailure(exc) from exc
    summary = _jsonable(summary)
    path = cfg.output_path("summary", out_dir)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def threads_from_env(env=None) -> int:
    raw = (env if env is not None else os.environ).get("VMG_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"VMG_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"VMG_THREADS must be a positive integer, got {raw!r}")
    return value


def _error_record(code, exc, **extra):
    record = {"status": "error", "exit_code": code, "error": type(exc).__name__,
              "message": str(exc)}
    record.update(extra)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmg", description=(
        "Simulate and control the viscous Moore-Greitzer compressor model."))
    parser.add_argument("scenario", choices=SCENARIOS)
    parser.add_argument("--config", required=True, help="scenario file (TOML)")
    parser.add_argument("--out", default=".", help="output directory (default: .)")
    parser.add_argument("--plot", action="store_true", help="also write SVG phase plots")
    parser.add_argument("--full-profile", action="store_true",
                        help="include every phi sample in trajectory CSVs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = threads_from_env()
        cfg = load_config(args.config, args.scenario)
    except ConfigError as exc:
        return _error_record(EXIT_CONFIG, exc)
    out_dir = Path(args.out)
    try:
        summary = run_scenario(cfg, out_dir, args.plot, args.full_profile, threads)
    except ConfigError as exc:
        return _error_record(EXIT_CONFIG, exc)
    except ScenarioFailure as exc:
        extra = {"cause": type(exc.cause).__name__}
        if exc.state is not None:
            extra["state_dump"] = str(write_state_csv(exc.state,
                                                      cfg.output_path("state_dump", out_dir)))
            extra["last_time"] = exc.state.time
        if exc.trajectory is not None and len(exc.trajectory):
            extra["partial_trajectory"] = str(write_trajectory_csv(
                exc.trajectory, cfg.output_path("trajectory", out_dir, "partial"), True))
        return _error_record(EXIT_NUMERIC, exc, **extra)
    except OSError as exc:
        return _error_record(EXIT_IO, exc)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
