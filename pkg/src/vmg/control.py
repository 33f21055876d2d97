"""Throttle control laws.

* LQR regulation of the linearization about a design-flow point.
* The three-phase basic controller: clear the stall branch with a large
  throttle setting, wait for design flow, then track the design branch back
  to the high-pressure target with a time-varying LQR.
* A saturated high-gain proportional law (``SURROGATE``) used only as a
  forceful comparison baseline.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .attractor import BranchTable, first_stall_free, jacobian_2d
from .model import (
    AnnulusState,
    CompressorParams,
    ModelError,
    derivative_second,
    design_equilibrium,
    throttle_inverse,
    throttle_inverse_prime,
)

log = logging.getLogger(__name__)


class ControlError(ModelError):
    pass


class WeightNotPSD(ControlError):
    pass


class StepTooLarge(ControlError):
    pass


class NoStallFreeGamma(ControlError):
    pass


class UnstableTarget(ControlError):
    pass


# -- control law contract ------------------------------------------------------

class ControlLaw:
    """Maps ``(t, state)`` to a throttle setting inside ``[gamma_min, gamma_max]``.

    Subclasses implement :meth:`command`; calling the law clamps the command
    and keeps the last raw and applied values for logging.
    """

    name = "law"
    label = ""

    def __init__(self, params: CompressorParams):
        self.params = params
        self.last_command = math.nan
        self.last_applied = math.nan

    def command(self, t: float, state: AnnulusState) -> float:
        raise NotImplementedError

    def reference(self, t: float) -> tuple[float, float]:
        """Reference ``(Phi, Psi)`` used for error logging."""
        return (math.nan, math.nan)

    def __call__(self, t: float, state: AnnulusState) -> float:
        raw = float(self.command(t, state))
        self.last_command = raw
        self.last_applied = min(max(raw, self.params.gamma_min), self.params.gamma_max)
        return self.last_applied


class ConstantThrottle(ControlLaw):
    name = "constant"

    def __init__(self, params, gamma):
        super().__init__(params)
        self.gamma = float(gamma)
        try:
            self._ref = design_equilibrium(params, self.gamma)
        except ModelError:
            self._ref = (math.nan, math.nan)

    def command(self, t, state):
        return self.gamma

    def reference(self, t):
        return self._ref


# -- linearization ---------------------------------------------------------------

@dataclass(frozen=True)
class LinearizedSystem:
    """Block-diagonal linearization about design flow.

    ``a_mat``/``b_vec`` act on ``(Phi - Phi0, Psi - Psi0)``.  The disturbance
    block is diagonal in Fourier modes with ``decoupled_growth[n-1]`` the rate
    of mode ``n``; ``phi_input`` is its (zero) input column on an
    ``n_grid``-point grid.
    """

    a_mat: np.ndarray
    b_vec: np.ndarray
    decoupled_growth: np.ndarray
    phi_input: np.ndarray
    flow0: float
    press0: float
    gamma0: float
    slope: float
    nu: float

    @property
    def n_grid(self) -> int:
        return self.phi_input.size


def input_vector(params: CompressorParams, press0: float) -> np.ndarray:
    """Derivative of ``(dPhi/dt, dPsi/dt)`` with respect to the throttle."""
    return np.array([0.0, -params.plenum_factor * throttle_inverse(params, press0)])


def linearize_design(params: CompressorParams, gamma0: float, n_grid: int = 64) -> LinearizedSystem:
    flow0, press0 = design_equilibrium(params, gamma0)
    slope = float(params.cubic.prime(flow0))
    modes = np.arange(1, n_grid // 2 + 1)
    return LinearizedSystem(
        a_mat=jacobian_2d(params, (flow0, press0), gamma0),
        b_vec=input_vector(params, press0),
        decoupled_growth=slope - params.nu * modes.astype(float) ** 2,
        phi_input=np.zeros(n_grid),
        flow0=flow0,
        press0=press0,
        gamma0=float(gamma0),
        slope=slope,
        nu=params.nu,
    )


def stall_uncontrollability_check(system: LinearizedSystem) -> bool:
    """True when the throttle has no direct path into the disturbance block."""
    return bool(np.all(np.asarray(system.phi_input) == 0.0))


def simulate_linearized(system: LinearizedSystem, phi0, y0, inputs: Callable[[float], float],
                        t_end: float, dt: float = 0.01):
    """RK4 on the linearized equations (disturbance on the grid).

    Returns ``(times, phi_history, y_history, u_history)``.
    """
    phi = np.asarray(phi0, dtype=float).copy()
    y = np.asarray(y0, dtype=float).copy()
    a, b, e = system.a_mat, system.b_vec, system.phi_input

    def f(t, phi, y):
        u = inputs(t)
        d_phi = system.nu * derivative_second(phi) + system.slope * phi + e * u
        return d_phi, a @ y + b * u

    n = int(math.ceil(t_end / dt))
    times = dt * np.arange(n + 1)
    phis = np.empty((n + 1, phi.size))
    ys = np.empty((n + 1, 2))
    us = np.empty(n + 1)
    phis[0], ys[0], us[0] = phi, y, inputs(0.0)
    for i in range(n):
        t = times[i]
        k1 = f(t, phi, y)
        k2 = f(t + dt / 2, phi + dt / 2 * k1[0], y + dt / 2 * k1[1])
        k3 = f(t + dt / 2, phi + dt / 2 * k2[0], y + dt / 2 * k2[1])
        k4 = f(t + dt, phi + dt * k3[0], y + dt * k3[1])
        phi = phi + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y = y + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        phis[i + 1], ys[i + 1], us[i + 1] = phi, y, inputs(times[i + 1])
    return times, phis, ys, us


# -- Riccati ---------------------------------------------------------------------

@dataclass(frozen=True)
class RiccatiSolution:
    times: np.ndarray
    q: np.ndarray          # (n_times, 2, 2)
    s_weight: np.ndarray
    r_weight: float
    s_final: np.ndarray

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    def at(self, t: float) -> np.ndarray:
        """Q(t), linearly interpolated; held constant outside the grid."""
        times = self.times
        if t <= times[0]:
            return self.q[0]
        if t >= times[-1]:
            return self.q[-1]
        i = int(np.searchsorted(times, t, side="right")) - 1
        w = (t - times[i]) / (times[i + 1] - times[i])
        return (1.0 - w) * self.q[i] + w * self.q[i + 1]


def _check_psd(mat, name):
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (2, 2) or not np.allclose(mat, mat.T, atol=1e-12):
        raise WeightNotPSD(f"{name} must be a symmetric 2x2 matrix")
    if np.min(np.linalg.eigvalsh(mat)) < -1e-12:
        raise WeightNotPSD(f"{name} is not positive semidefinite")
    return mat


def _system_at(system):
    if callable(system):
        return system
    a, b = np.asarray(system.a_mat, dtype=float), np.asarray(system.b_vec, dtype=float)
    return lambda t: (a, b)


def riccati_rhs(a, b, q, s, r):
    """``dQ/dt = -A'Q - QA + Q b b' Q / R - S``."""
    qb = q @ b
    return -a.T @ q - q @ a + np.outer(qb, qb) / r - s


def riccati_residual(system, ricc: RiccatiSolution) -> np.ndarray:
    """Max-norm residual at interior grid points, with dQ/dt by centered
    differences of the stored samples."""
    sys_at = _system_at(system)
    t, q = ricc.times, ricc.q
    out = np.empty(t.size - 2)
    for i in range(1, t.size - 1):
        dq = (q[i + 1] - q[i - 1]) / (t[i + 1] - t[i - 1])
        a, b = sys_at(t[i])
        out[i - 1] = np.max(np.abs(dq - riccati_rhs(a, b, q[i], ricc.s_weight, ricc.r_weight)))
    return out


def solve_riccati(system, s_weight, r_weight: float, s_final, t_final: float,
                  dt: float = 0.01, residual_tol: Optional[float] = 1e-6) -> RiccatiSolution:
    """Integrate the matrix Riccati equation backward from ``Q(t_final) = s_final``.

    ``system`` is a :class:`LinearizedSystem` or a callable ``t -> (A, b)``
    for time-varying problems.  Classical RK4 on a uniform grid of step
    at most ``dt``; each step is symmetrized.  Raises :class:`StepTooLarge`
    if the stored samples violate the equation by more than ``residual_tol``.
    """
    s_weight = _check_psd(s_weight, "S")
    s_final = _check_psd(s_final, "S_f")
    if not r_weight > 0:
        raise ValueError("R must be positive")
    if not t_final > 0:
        raise ValueError("t_final must be positive")
    sys_at = _system_at(system)
    n = max(2, int(math.ceil(t_final / dt)))
    times = np.linspace(0.0, t_final, n + 1)
    h = times[1] - times[0]
    q = np.empty((n + 1, 2, 2))
    q[n] = s_final

    def f(t, mat):
        a, b = sys_at(t)
        return riccati_rhs(a, b, mat, s_weight, r_weight)

    # overflow is caught by the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n, 0, -1):
            t, cur = times[i], q[i]
            k1 = f(t, cur)
            k2 = f(t - h / 2, cur - h / 2 * k1)
            k3 = f(t - h / 2, cur - h / 2 * k2)
            k4 = f(t - h, cur - h * k3)
            nxt = cur - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            q[i - 1] = 0.5 * (nxt + nxt.T)
    if not np.all(np.isfinite(q)):
        raise StepTooLarge("Riccati integration blew up")
    q[n] = s_final
    ricc = RiccatiSolution(times, q, s_weight, float(r_weight), s_final)
    if residual_tol is not None and n >= 2:
        worst = float(np.max(riccati_residual(system, ricc)))
        if worst > residual_tol:
            raise StepTooLarge(f"Riccati residual {worst:.3g} exceeds {residual_tol:.3g}; reduce dt")
    return ricc


def steady_riccati(system: LinearizedSystem, s_weight, r_weight: float) -> RiccatiSolution:
    """Infinite-horizon gain as a constant :class:`RiccatiSolution`."""
    s_weight = _check_psd(s_weight, "S")
    b = np.asarray(system.b_vec, dtype=float).reshape(2, 1)
    q = scipy.linalg.solve_continuous_are(system.a_mat, b, s_weight, np.array([[r_weight]]))
    q = 0.5 * (q + q.T)
    return RiccatiSolution(np.array([0.0, 1.0]), np.array([q, q]), s_weight, float(r_weight), q)


def closed_loop_matrix(system: LinearizedSystem, q: np.ndarray, r_weight: float) -> np.ndarray:
    b = np.asarray(system.b_vec, dtype=float)
    return system.a_mat - np.outer(b, b @ q) / r_weight


class LQRController(ControlLaw):
    """``gamma = gamma0 - b' Q(t - t_start) y / R`` about a fixed design point."""

    name = "lqr"

    def __init__(self, params, system: LinearizedSystem, ricc: RiccatiSolution,
                 gamma0: Optional[float] = None, t_start: float = 0.0):
        super().__init__(params)
        self.system = system
        self.ricc = ricc
        self.gamma0 = system.gamma0 if gamma0 is None else float(gamma0)
        self.t_start = t_start

    def command(self, t, state):
        y = np.array([state.avg_flow - self.system.flow0, state.pressure_rise - self.system.press0])
        if not y.any():
            return self.gamma0
        q = self.ricc.at(t - self.t_start)
        return self.gamma0 - float(self.system.b_vec @ q @ y) / self.ricc.r_weight

    def reference(self, t):
        return self.system.flow0, self.system.press0


def lqr_controller(params, system, ricc, gamma0=None, t_start=0.0) -> LQRController:
    return LQRController(params, system, ricc, gamma0, t_start)


# -- stall clearing and tracking ---------------------------------------------------

def design_is_stable(params: CompressorParams, gamma: float) -> bool:
    flow, press = design_equilibrium(params, gamma)
    ev = np.linalg.eigvals(jacobian_2d(params, (flow, press), gamma))
    # all disturbance modes decay iff psi_c'(Phi0) - nu < 0
    return bool(np.all(ev.real < 0) and params.cubic.prime(flow) - params.nu < 0)


def select_gamma1(params: CompressorParams, scan: BranchTable, margin: float = 1.02) -> float:
    """Throttle setting that clears the stall branch, with a safety margin."""
    candidate = first_stall_free(scan)
    if candidate is None:
        raise NoStallFreeGamma("every scanned gamma has a stall solution")
    gamma1 = margin * candidate
    if not design_is_stable(params, gamma1):
        raise UnstableTarget(f"design flow at gamma1={gamma1:.6g} is not stable")
    return float(gamma1)


def _smoothstep(tau):
    tau = min(max(tau, 0.0), 1.0)
    return tau * tau * (3.0 - 2.0 * tau), 6.0 * tau * (1.0 - tau)


def _newton_equilibrium(params, gamma, flow):
    """Polish a design-flow guess with Newton steps on the intersection residual."""
    cubic = params.cubic
    for _ in range(30):
        press = cubic(flow)
        g = flow - gamma * throttle_inverse(params, press)
        dg = 1.0 - gamma * throttle_inverse_prime(params, press) * cubic.prime(flow)
        step = g / dg
        flow = flow - step
        if abs(step) < 1e-15 * max(1.0, abs(flow)):
            break
    return float(flow), float(cubic(flow))


class Xi1Path:
    """Quasi-static path of design-flow points from ``gamma1`` to ``gamma_target``.

    ``gamma_bar(t)`` follows a smoothstep over ``[0, duration]``; ``point(t)``
    is the exact design-flow equilibrium at ``gamma_bar(t)`` and ``rate(t)``
    its time derivative along the branch.
    """

    def __init__(self, params, gamma1, gamma_target, duration, n_fine=2001, fd_step=1e-6):
        self.params = params
        self.gamma1 = float(gamma1)
        self.gamma_target = float(gamma_target)
        self.duration = float(duration)
        self.fd_step = fd_step
        self.fine_times = np.linspace(0.0, self.duration, n_fine)
        flows = []
        flow = design_equilibrium(params, self.gamma1)[0]
        for t in self.fine_times:
            flow, _ = _newton_equilibrium(params, self.gamma_bar(t), flow)
            flows.append(flow)
        self.fine_flows = np.array(flows)

    def gamma_bar(self, t):
        s, _ = _smoothstep(t / self.duration)
        return self.gamma1 + (self.gamma_target - self.gamma1) * s

    def gamma_bar_rate(self, t):
        if not 0.0 < t < self.duration:
            return 0.0
        _, ds = _smoothstep(t / self.duration)
        return (self.gamma_target - self.gamma1) * ds / self.duration

    def point(self, t):
        guess = float(np.interp(t, self.fine_times, self.fine_flows))
        return _newton_equilibrium(self.params, self.gamma_bar(t), guess)

    def branch_slope(self, gamma, flow_guess):
        """``d(Phi0, Psi0)/d gamma`` by centered differences along the branch."""
        h = self.fd_step
        up = np.array(_newton_equilibrium(self.params, gamma + h, flow_guess))
        down = np.array(_newton_equilibrium(self.params, gamma - h, flow_guess))
        return (up - down) / (2.0 * h)

    def rate(self, t):
        flow, _ = self.point(t)
        return self.branch_slope(self.gamma_bar(t), flow) * self.gamma_bar_rate(t)


def trajectory_xi1(params: CompressorParams, gamma1: float, gamma_target: float,
                   duration: float, n_fine: int = 2001) -> Xi1Path:
    if gamma_target > gamma1:
        raise ValueError("gamma_target must not exceed gamma1")
    if not duration > 0:
        raise ValueError("duration must be positive")
    path = Xi1Path(params, gamma1, gamma_target, duration, n_fine)
    for t in path.fine_times[:: max(1, n_fine // 200)].tolist() + [duration]:
        g = path.gamma_bar(t)
        if not design_is_stable(params, g):
            raise UnstableTarget(f"design flow at gamma={g:.6g} on the path is unstable")
    return path


class TrackingLQR(ControlLaw):
    """Time-varying LQR about the moving design point ``xi1(t - t_start)``."""

    name = "tracking-lqr"

    def __init__(self, params, path: Xi1Path, ricc: RiccatiSolution, t_start: float = 0.0):
        super().__init__(params)
        self.path = path
        self.ricc = ricc
        self.t_start = t_start

    def command(self, t, state):
        tau = t - self.t_start
        gamma_bar = self.path.gamma_bar(tau)
        flow, press = self.path.point(tau)
        y = np.array([state.avg_flow - flow, state.pressure_rise - press])
        if not y.any():
            return gamma_bar
        b = input_vector(self.params, press)
        return gamma_bar - float(b @ self.ricc.at(tau) @ y) / self.ricc.r_weight

    def reference(self, t):
        return self.path.point(t - self.t_start)


def path_system(params, path: Xi1Path):
    """Callable ``t -> (A(t), b(t))`` along the path."""
    def at(t):
        g = path.gamma_bar(t)
        flow, press = path.point(t)
        return jacobian_2d(params, (flow, press), g), input_vector(params, press)
    return at


def tracking_lqr(params, path: Xi1Path, s_weight=None, r_weight=10.0, s_final=None,
                 t_start: float = 0.0, dt: float = 0.01) -> TrackingLQR:
    s_weight = np.eye(2) if s_weight is None else s_weight
    s_final = np.eye(2) if s_final is None else s_final
    ricc = solve_riccati(path_system(params, path), s_weight, r_weight, s_final, path.duration, dt)
    return TrackingLQR(params, path, ricc, t_start)


# -- basic controller --------------------------------------------------------------

class Phase(enum.IntEnum):
    CLEAR = 0
    WAIT = 1
    TRACK = 2
    HOLD = 3

    def __str__(self):
        return self.name.lower()


@dataclass
class BasicControlConfig:
    r_u: float = 0.05
    r_phi: float = 0.02
    track_duration: float = 100.0
    s_weight: np.ndarray = field(default_factory=lambda: np.eye(2))
    r_weight: float = 10.0
    s_final: np.ndarray = field(default_factory=lambda: np.eye(2))
    wait_warning: float = 500.0
    riccati_dt: float = 0.01


class BasicController(ControlLaw):
    """Clear stall at ``gamma1``, wait for design flow, track back to target.

    Phases only move forward: CLEAR -> WAIT (immediately) -> TRACK (once the
    state enters the neighbourhood U of the ``gamma1`` design point) -> HOLD
    (after the tracking horizon; infinite-horizon LQR at the target).
    """

    name = "basic"

    def __init__(self, params, gamma1, gamma_target, config: Optional[BasicControlConfig] = None):
        super().__init__(params)
        self.config = config or BasicControlConfig()
        cfg = self.config
        self.gamma1 = float(gamma1)
        self.gamma_target = float(gamma_target)
        self.start = design_equilibrium(params, self.gamma1)
        self.path = trajectory_xi1(params, self.gamma1, self.gamma_target, cfg.track_duration)
        self.tracker = tracking_lqr(params, self.path, cfg.s_weight, cfg.r_weight, cfg.s_final,
                                    dt=cfg.riccati_dt)
        target_system = linearize_design(params, self.gamma_target)
        self.holder = LQRController(params, target_system,
                                    steady_riccati(target_system, cfg.s_weight, cfg.r_weight))
        self.target = (target_system.flow0, target_system.press0)
        self.phase = Phase.CLEAR
        self.phase_times: dict = {}
        self._t_first: Optional[float] = None
        self._warned = False

    def _enter(self, phase, t):
        if phase > self.phase:
            self.phase = phase
            self.phase_times[phase] = t
            log.info("basic controller: %s at t=%.6g", phase, t)

    def in_neighbourhood(self, state) -> bool:
        d = math.hypot(state.avg_flow - self.start[0], state.pressure_rise - self.start[1])
        return d < self.config.r_u and float(np.max(np.abs(state.phi))) < self.config.r_phi

    def command(self, t, state):
        if self._t_first is None:
            self._t_first = t
            self.phase_times[Phase.CLEAR] = t
        if self.phase is Phase.CLEAR:
            self._enter(Phase.WAIT, t)
        if self.phase is Phase.WAIT:
            if self.in_neighbourhood(state):
                self._enter(Phase.TRACK, t)
                self.tracker.t_start = t
            else:
                if not self._warned and t - self._t_first > self.config.wait_warning:
                    log.warning("basic controller still waiting for design flow at t=%.6g", t)
                    self._warned = True
                return self.gamma1
        if self.phase is Phase.TRACK and t - self.tracker.t_start >= self.config.track_duration:
            self._enter(Phase.HOLD, t)
        if self.phase is Phase.TRACK:
            return self.tracker.command(t, state)
        return self.holder.command(t, state)

    def reference(self, t):
        if self.phase <= Phase.WAIT:
            return self.start
        if self.phase is Phase.TRACK:
            return self.tracker.reference(t)
        return self.target


def basic_controller(params, gamma1, gamma_target, config=None) -> BasicController:
    return BasicController(params, gamma1, gamma_target, config)


class SurrogateController(ControlLaw):
    """SURROGATE high-gain baseline: ``gamma = gamma_t + gain * (Psi - Psi_t)``.

    A saturated proportional law used only to contrast control effort and
    state excursion.  It is not a backstepping design.
    """

    name = "surrogate"
    label = "SURROGATE"

    def __init__(self, params, gamma_target, gain):
        super().__init__(params)
        if not gain > 0:
            raise ValueError("gain must be positive")
        self.gamma_target = float(gamma_target)
        self.gain = float(gain)
        self.target = design_equilibrium(params, self.gamma_target)

    def command(self, t, state):
        return self.gamma_target + self.gain * (state.pressure_rise - self.target[1])

    def reference(self, t):
        return self.target


def baseline_surrogate(params, gamma_target, gain=5.0) -> SurrogateController:
    return SurrogateController(params, gamma_target, gain)
