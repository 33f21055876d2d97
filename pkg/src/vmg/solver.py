"""Time integration of the coupled disturbance / mean-flow / plenum system.

Two schemes are provided:

* ``LAX_WENDROFF``: two-step (Richtmyer) Lax-Wendroff transport of the
  disturbance with centered explicit diffusion and a midpoint-sampled source,
  coupled to classical RK4 for ``(Phi, Psi)``.
* ``MOL_RK4``: method of lines with centered differences, everything advanced
  together by RK4.  Used as an independent reference.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import (
    AnnulusState,
    CompressorParams,
    Frame,
    ModelError,
    derivative_first,
    derivative_second,
    mean_free,
    periodic_mean,
    scalar_rhs,
    shift_left,
    shift_right,
)

log = logging.getLogger(__name__)

CFL_SAFETY = 0.8


class Scheme(str, enum.Enum):
    LAX_WENDROFF = "lax-wendroff"
    MOL_RK4 = "mol-rk4"


class NonFinite(ModelError):
    """Blow-up guard: the integration produced non-finite values.

    ``last_state`` is the last finite state; ``trajectory`` the samples
    recorded so far (when raised from :func:`integrate`).
    """

    def __init__(self, message, last_state=None, trajectory=None):
        super().__init__(message)
        self.last_state = last_state
        self.trajectory = trajectory


def advection_speed(frame) -> float:
    return 0.5 if Frame(frame) is Frame.LAB else 0.0


def reaction_dt_cap(params: CompressorParams, flow_range=None) -> float:
    """``0.5 / max|psi_c'|`` over a flow range (default ``[-w, 3w]``)."""
    w = params.cubic.w
    lo, hi = flow_range if flow_range is not None else (-w, 3 * w)
    flows = np.linspace(lo, hi, 401)
    slope = float(np.max(np.abs(params.cubic.prime(flows))))
    return 0.5 / slope if slope > 0 else math.inf


def cfl_check(params: CompressorParams, n_grid: int, frame=Frame.LAB) -> float:
    """Largest stable time step for the explicit schemes on ``n_grid`` points."""
    if n_grid < 8:
        raise ValueError("n_grid must be at least 8")
    dtheta = 2.0 * np.pi / n_grid
    c_adv = advection_speed(frame)
    adv = dtheta / c_adv if c_adv > 0 else math.inf
    diff = dtheta**2 / (2.0 * params.nu) if params.nu > 0 else math.inf
    grid_bound = CFL_SAFETY * min(adv, diff)
    return min(grid_bound, reaction_dt_cap(params))


@dataclass(frozen=True)
class SolverConfig:
    n_grid: int = 128
    dt: Optional[float] = None
    frame: Frame = Frame.LAB
    scheme: Scheme = Scheme.LAX_WENDROFF
    t_end: float = 100.0
    record_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "frame", Frame(self.frame))
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.n_grid < 8:
            raise ValueError("n_grid must be at least 8")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")

    def resolved_dt(self, params: CompressorParams) -> float:
        limit = cfl_check(params, self.n_grid, self.frame)
        if self.dt is None:
            return limit
        if self.dt > limit * (1 + 1e-12):
            raise ValueError(f"dt={self.dt} exceeds stability limit {limit:.6g}")
        return self.dt

    def with_(self, **changes) -> "SolverConfig":
        from dataclasses import replace
        return replace(self, **changes)


# -- Lax-Wendroff step -------------------------------------------------------

def lax_wendroff_transport(phi, speed, dt, reaction=None, reaction_half=None):
    """One Richtmyer Lax-Wendroff step of ``phi_t + (speed*phi)_theta = R``.

    ``reaction(u)`` returns the nodal reaction-diffusion term at ``t``; it
    feeds both predictors.  The corrector samples ``reaction_half`` (default
    ``reaction``) at the nodal half step.  Returns ``(phi_new, phi_half)``.
    """
    if reaction_half is None:
        reaction_half = reaction
    n = phi.size
    dtheta = 2.0 * np.pi / n
    nu_c = speed * dt / dtheta
    right = shift_left(phi)
    r0 = reaction(phi) if reaction is not None else 0.0
    # staggered predictor at j + 1/2
    stag = 0.5 * (phi + right) - 0.5 * nu_c * (right - phi)
    if reaction is not None:
        stag = stag + 0.25 * dt * (r0 + shift_left(r0))
    # nodal predictor, used only to sample the reaction at the half step
    half = phi + 0.5 * dt * r0
    if speed != 0.0:
        half = half - 0.5 * dt * speed * derivative_first(phi)
    new = phi - nu_c * (stag - shift_right(stag))
    if reaction is not None:
        new = new + dt * reaction_half(half)
    return new, half


def _rk4_scalars(params, flow, press, gamma, dt, psi_bar_of):
    """Classical RK4 for (Phi, Psi); ``psi_bar_of(stage, flow)`` supplies the
    averaged characteristic at stage times 0, 1/2, 1/2, 1."""
    k1 = scalar_rhs(params, flow, press, gamma, psi_bar_of(0, flow))
    f2, p2 = flow + 0.5 * dt * k1[0], press + 0.5 * dt * k1[1]
    k2 = scalar_rhs(params, f2, p2, gamma, psi_bar_of(1, f2))
    f3, p3 = flow + 0.5 * dt * k2[0], press + 0.5 * dt * k2[1]
    k3 = scalar_rhs(params, f3, p3, gamma, psi_bar_of(1, f3))
    f4, p4 = flow + dt * k3[0], press + dt * k3[1]
    k4 = scalar_rhs(params, f4, p4, gamma, psi_bar_of(2, f4))
    flow_new = flow + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    press_new = press + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return flow_new, press_new


def _step_lax_wendroff(params, phi, flow, press, gamma, dt, frame):
    speed = advection_speed(frame)
    cubic = params.cubic
    nu = params.nu

    d_flow0, d_press0 = scalar_rhs(params, flow, press, gamma, periodic_mean(cubic(flow + phi)))
    flow_half = flow + 0.5 * dt * d_flow0

    def reaction_at(avg_flow):
        def reaction(u):
            values = cubic(avg_flow + u)
            return nu * derivative_second(u) + mean_free(values)
        return reaction

    phi_new, phi_half = lax_wendroff_transport(
        phi, speed, dt, reaction_at(flow), reaction_at(flow_half))

    samples = (phi, phi_half, phi_new)
    flow_new, press_new = _rk4_scalars(
        params, flow, press, gamma, dt,
        lambda stage, f: periodic_mean(cubic(f + samples[stage])))
    phi_new = phi_new - periodic_mean(phi_new)
    return phi_new, flow_new, press_new


def _step_mol_rk4(params, phi, flow, press, gamma, dt, frame):
    nu, lab = params.nu, frame is Frame.LAB

    def f(u, fl, pr):
        values = params.cubic(fl + u)
        du = nu * derivative_second(u) + mean_free(values)
        if lab:
            du = du - 0.5 * derivative_first(u)
        return (du,) + scalar_rhs(params, fl, pr, gamma, periodic_mean(values))

    k1 = f(phi, flow, press)
    k2 = f(phi + 0.5 * dt * k1[0], flow + 0.5 * dt * k1[1], press + 0.5 * dt * k1[2])
    k3 = f(phi + 0.5 * dt * k2[0], flow + 0.5 * dt * k2[1], press + 0.5 * dt * k2[2])
    k4 = f(phi + dt * k3[0], flow + dt * k3[1], press + dt * k3[2])
    new = [
        y + dt / 6.0 * (a + 2 * b + 2 * c + d)
        for y, a, b, c, d in zip((phi, flow, press), k1, k2, k3, k4)
    ]
    phi_new = new[0] - periodic_mean(new[0])
    return phi_new, float(new[1]), float(new[2])


_STEPPERS = {
    Scheme.LAX_WENDROFF: _step_lax_wendroff,
    Scheme.MOL_RK4: _step_mol_rk4,
}


def step_arrays(params, phi, flow, press, gamma, dt, frame=Frame.LAB,
                scheme=Scheme.LAX_WENDROFF):
    """Array-level single step; returns ``(phi, Phi, Psi)`` or raises NonFinite."""
    phi_new, flow_new, press_new = _STEPPERS[Scheme(scheme)](
        params, phi, float(flow), float(press), float(gamma), dt, Frame(frame))
    if not (np.all(np.isfinite(phi_new)) and math.isfinite(flow_new) and math.isfinite(press_new)):
        raise NonFinite("state left the finite range")
    return phi_new, flow_new, press_new


def step(params: CompressorParams, state: AnnulusState, gamma, config: SolverConfig) -> AnnulusState:
    """Advance ``state`` by one time step of ``config``."""
    gamma = getattr(gamma, "gamma", gamma)
    dt = config.resolved_dt(params)
    phi, flow, press = step_arrays(params, state.phi, state.avg_flow, state.pressure_rise,
                                   gamma, dt, config.frame, config.scheme)
    return AnnulusState(phi, flow, press, state.time + dt)


# -- trajectories ------------------------------------------------------------

@dataclass
class Trajectory:
    """Recorded samples of an integration.

    ``phi`` has shape ``(n_samples, n_grid)``.  ``log`` holds controller log
    rows ``(t, phase, gamma_command, gamma_applied, err_Phi, err_Psi)``.
    """

    times: np.ndarray
    phi: np.ndarray
    avg_flow: np.ndarray
    pressure_rise: np.ndarray
    gamma: np.ndarray
    params: Optional[CompressorParams] = None
    config: Optional[SolverConfig] = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        self.avg_flow = np.asarray(self.avg_flow, dtype=float)
        self.pressure_rise = np.asarray(self.pressure_rise, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self):
        return self.times.size

    def state(self, i: int) -> AnnulusState:
        return AnnulusState(self.phi[i], self.avg_flow[i], self.pressure_rise[i], self.times[i])

    @property
    def final_state(self) -> AnnulusState:
        return self.state(-1)

    def tail(self, duration: float) -> "Trajectory":
        """Final stretch spanning at least ``duration`` (when the run is long enough).

        Starts at the last sample at or before ``t_final - duration``.
        """
        cutoff = self.times[-1] - duration
        start = max(int(np.searchsorted(self.times, cutoff, side="right")) - 1, 0)
        mask = np.arange(len(self)) >= start
        return self.select(mask)

    def select(self, mask) -> "Trajectory":
        return Trajectory(self.times[mask], self.phi[mask], self.avg_flow[mask],
                          self.pressure_rise[mask], self.gamma[mask], self.params, self.config,
                          [row for row, keep in zip(self.log, mask) if keep] if self.log else [])

    @property
    def phi_sup(self) -> np.ndarray:
        return np.max(np.abs(self.phi), axis=1)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self) else 0.0

    def concat(self, other: "Trajectory") -> "Trajectory":
        start = 1 if len(self) and len(other) and other.times[0] <= self.times[-1] else 0
        return Trajectory(
            np.concatenate([self.times, other.times[start:]]),
            np.concatenate([self.phi, other.phi[start:]]),
            np.concatenate([self.avg_flow, other.avg_flow[start:]]),
            np.concatenate([self.pressure_rise, other.pressure_rise[start:]]),
            np.concatenate([self.gamma, other.gamma[start:]]),
            self.params, self.config, list(self.log) + list(other.log[start:]))


def _as_controller(controller):
    if callable(controller):
        return controller
    value = float(controller)
    return lambda t, state: value


def integrate(params: CompressorParams, state0: AnnulusState, controller,
              config: SolverConfig, stop: Optional[Callable] = None) -> Trajectory:
    """Integrate from ``state0`` to ``state0.time + config.t_end``.

    ``controller`` is a control law ``(t, state) -> gamma`` (or a constant).
    It is sampled at the start of every step and held over the step.  Values
    outside ``[gamma_min, gamma_max]`` are clamped with a warning.  ``stop``,
    if given, is called on each recorded state and ends the run early when
    it returns true.
    """
    if state0.n_grid != config.n_grid:
        raise ValueError(f"state has {state0.n_grid} grid points, config expects {config.n_grid}")
    dt = config.resolved_dt(params)
    law = _as_controller(controller)
    n_steps = int(math.ceil(config.t_end / dt - 1e-9))
    stepper = _STEPPERS[config.scheme]
    frame = config.frame
    every = config.record_every
    t0 = state0.time

    times, phis, flows, presses, gammas, log_rows = [], [], [], [], [], []
    phi, flow, press = state0.phi.copy(), state0.avg_flow, state0.pressure_rise
    warned = False

    def query(t, state):
        nonlocal warned
        command = float(law(t, state))
        applied = min(max(command, params.gamma_min), params.gamma_max)
        if applied != command and not warned:
            log.warning("controller output %.6g clamped to %.6g", command, applied)
            warned = True
        return command, applied

    def record(t, state, command, applied):
        times.append(t)
        phis.append(state.phi)
        flows.append(state.avg_flow)
        presses.append(state.pressure_rise)
        gammas.append(applied)
        log_rows.append(_log_row(law, t, state, command, applied))

    def build():
        return Trajectory(np.array(times), np.array(phis) if phis else np.zeros((0, config.n_grid)),
                          np.array(flows), np.array(presses), np.array(gammas), params, config,
                          log_rows)

    state = state0
    for k in range(n_steps):
        t = t0 + k * dt
        command, applied = query(t, state)
        if k % every == 0:
            record(t, state, command, applied)
            if stop is not None and stop(state):
                return build()
        try:
            phi, flow, press = stepper(params, phi, flow, press, applied, dt, frame)
            if not (np.all(np.isfinite(phi)) and math.isfinite(flow) and math.isfinite(press)):
                raise NonFinite("state left the finite range")
            state = AnnulusState(phi, flow, press, t0 + (k + 1) * dt)
        except (NonFinite, FloatingPointError, OverflowError, ValueError) as exc:
            raise NonFinite(f"integration failed at t={t:.6g}: {exc}", state, build()) from exc
    t_final = t0 + n_steps * dt
    command, applied = query(t_final, state)
    if times and times[-1] == t_final:
        return build()
    record(t_final, state, command, applied)
    return build()


def _log_row(law, t, state, command, applied):
    phase = getattr(law, "phase", "")
    ref = getattr(law, "reference", None)
    if ref is not None:
        ref_flow, ref_press = ref(t)
        err = (state.avg_flow - ref_flow, state.pressure_rise - ref_press)
    else:
        err = (math.nan, math.nan)
    return (t, str(phase), command, applied, err[0], err[1])


def fourier_mode_amplitudes(state, n_max: int):
    """Amplitudes ``|c_n|`` of modes ``1..n_max``, scaled so that
    ``a*cos(n*theta)`` has amplitude ``a``."""
    phi = state.phi if isinstance(state, AnnulusState) else np.asarray(state, dtype=float)
    n = phi.size
    if not n_max < n / 2:
        raise ValueError("n_max must be below N/2")
    theta = 2.0 * np.pi * np.arange(n) / n
    out = []
    for mode in range(1, n_max + 1):
        c = np.sum(phi * np.cos(mode * theta)) * 2.0 / n
        s = np.sum(phi * np.sin(mode * theta)) * 2.0 / n
        out.append((mode, float(math.hypot(c, s))))
    return out
