"""Components of the basic attractor: design flow, stall waves, surge cycles.

Also the throttle scans that map where each component exists.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import (
    AnnulusState,
    CompressorParams,
    Frame,
    ModelError,
    NoIntersection,
    derivative_second,
    design_equilibria,
    design_equilibrium,
    grid,
    mean_free,
    periodic_mean,
    rhs,
    scalar_rhs,
    throttle_inverse,
    throttle_inverse_prime,
)
from .solver import (
    SolverConfig,
    Trajectory,
    cfl_check,
    integrate,
    lax_wendroff_transport,
)

log = logging.getLogger(__name__)


class TailTooShort(ModelError):
    pass


class NoStall(ModelError):
    pass


class NoCycle(ModelError):
    pass


class NoSignChange(ModelError):
    pass


class Regime(str, enum.Enum):
    DESIGN = "design"
    STALL = "stall"
    SURGE = "surge"
    TRANSIENT = "transient"


@dataclass(frozen=True)
class RegimeLabel:
    regime: Regime
    phi_amplitude: float
    flow_oscillation: float
    wave_speed: Optional[float] = None
    period: Optional[float] = None

    def __post_init__(self):
        if self.phi_amplitude < 0 or self.flow_oscillation < 0:
            raise ValueError("diagnostics must be nonnegative")


# -- traveling-wave diagnostics ----------------------------------------------

def _dominant_mode(phi_samples, n_max=8):
    n = phi_samples.shape[1]
    power = np.abs(np.fft.rfft(phi_samples, axis=1))[:, 1:min(n_max, n // 2 - 1) + 1]
    return int(np.argmax(power.mean(axis=0))) + 1


def wave_speed(times, phi_samples, frame=Frame.LAB):
    """Lab-frame speed of a traveling profile from its Fourier phase drift.

    The cross-spectrum phase of the dominant mode between successive
    snapshots gives the shift per sample; the speed is the least-squares
    slope of the accumulated shift.  Returns ``(speed, coherence)`` where
    coherence is the smallest normalized correlation between successive
    snapshots after undoing the fitted shift (1 for a rigid wave).
    """
    times = np.asarray(times, dtype=float)
    phi_samples = np.atleast_2d(phi_samples)
    if times.size < 2:
        raise ValueError("need at least two snapshots")
    mode = _dominant_mode(phi_samples)
    coeffs = np.fft.rfft(phi_samples, axis=1)
    c = coeffs[:, mode]
    increments = np.angle(c[1:] * np.conj(c[:-1]))
    shift = np.concatenate([[0.0], np.cumsum(increments)]) / (-mode)
    speed = float(np.polyfit(times - times[0], shift, 1)[0])
    n = phi_samples.shape[1]
    k = np.fft.rfftfreq(n, 1.0 / n)
    coherence = 1.0
    for i in range(1, times.size):
        dt = times[i] - times[i - 1]
        moved = np.fft.irfft(coeffs[i - 1] * np.exp(-1j * k * speed * dt), n)
        denom = np.linalg.norm(moved) * np.linalg.norm(phi_samples[i])
        if denom > 0:
            coherence = min(coherence, float(np.dot(moved, phi_samples[i]) / denom))
    if Frame(frame) is Frame.ROTATING:
        speed += 0.5
    return speed, coherence


def _upward_crossing_times(times, values, level):
    below = values[:-1] < level
    above = values[1:] >= level
    idx = np.nonzero(below & above)[0]
    frac = (level - values[idx]) / (values[idx + 1] - values[idx])
    return times[idx] + frac * (times[idx + 1] - times[idx])


def classify_regime(tail: Trajectory, eps_phi=0.05, eps_flow=0.02, min_duration=20.0,
                    coherence_min=0.99) -> RegimeLabel:
    """Label a trajectory tail as design flow, stall, surge or transient."""
    if tail.duration < min_duration - 1e-9:
        raise TailTooShort(f"tail spans {tail.duration:.3g} < {min_duration}")
    sup = tail.phi_sup
    phi_amp = float(sup.max())
    osc = float(np.ptp(tail.avg_flow))
    frame = tail.config.frame if tail.config is not None else Frame.LAB

    if phi_amp < eps_phi and osc < eps_flow:
        return RegimeLabel(Regime.DESIGN, phi_amp, osc)
    if osc < eps_flow:
        if sup.min() >= eps_phi:
            speed, coherence = wave_speed(tail.times, tail.phi, frame)
            if coherence >= coherence_min:
                return RegimeLabel(Regime.STALL, phi_amp, osc, wave_speed=speed)
        return RegimeLabel(Regime.TRANSIENT, phi_amp, osc)
    level = 0.5 * (tail.avg_flow.max() + tail.avg_flow.min())
    crossings = _upward_crossing_times(tail.times, tail.avg_flow, level)
    if crossings.size >= 2:
        return RegimeLabel(Regime.SURGE, phi_amp, osc, period=float(np.mean(np.diff(crossings))))
    return RegimeLabel(Regime.TRANSIENT, phi_amp, osc)


# -- stall waves ---------------------------------------------------------------

@dataclass(frozen=True)
class StallWave:
    """Settled stall solution; ``profile`` is over the rotating coordinate."""

    profile: np.ndarray
    wave_speed: float
    avg_flow: float
    pressure_rise: float
    gamma: float
    residual: float

    @property
    def amplitude(self) -> float:
        return float(np.max(np.abs(self.profile)))

    def state(self, time=0.0) -> AnnulusState:
        return AnnulusState.from_profile(self.profile, self.avg_flow, self.pressure_rise, time)


def _settle_profile(params, flow, phi, dt, tol, max_time):
    """Time-settle the rotating-frame disturbance equation at frozen ``flow``."""
    cubic, nu = params.cubic, params.nu

    def reaction(u):
        values = cubic(flow + u)
        return nu * derivative_second(u) + mean_free(values)

    chunk = 50
    max_steps = int(max_time / dt)
    taken = 0
    while taken < max_steps:
        for _ in range(chunk):
            phi, _ = lax_wendroff_transport(phi, 0.0, dt, reaction)
            phi = phi - periodic_mean(phi)
        taken += chunk
        if np.max(np.abs(phi)) < 1e-8:
            return phi, False
        if np.max(np.abs(reaction(phi))) < tol:
            return phi, True
    return phi, None


def find_stall_wave(params: CompressorParams, gamma: float, seed_amplitude: float = 0.3,
                    n_grid: int = 64, seed_profile=None, tol: float = 1e-8,
                    max_iter: int = 60, settle_time: float = 2000.0,
                    check_window: float = 5.0) -> StallWave:
    """Settle a rotating stall cell for throttle ``gamma``.

    The disturbance is time-settled in the rotating frame with the mean flow
    frozen; the mean flow is then moved along the throttle line
    ``Phi = gamma * F_T^-1(Psi)`` by a Steffensen-accelerated fixed-point
    iteration until the profile, ``Phi`` and ``Psi`` are jointly stationary.
    A final free run of the full rotating-frame system over ``check_window``
    must move the state by less than ``tol``.

    Raises :class:`NoStall` when the disturbance decays or nothing settles.
    """
    theta = grid(n_grid)
    if seed_profile is not None:
        phi = np.asarray(seed_profile, dtype=float)
        if phi.size != n_grid:
            raise ValueError("seed profile has the wrong grid size")
    else:
        phi = seed_amplitude * np.cos(theta)
    phi = phi - phi.mean()
    dt = cfl_check(params, n_grid, Frame.ROTATING)
    settle_tol = 1e-11

    state = {"phi": phi}

    def g(flow):
        settled, ok = _settle_profile(params, flow, state["phi"], dt, settle_tol, settle_time)
        if ok is False:
            raise NoStall(f"disturbance decayed at Phi={flow:.6g} (gamma={gamma:.6g})")
        if ok is None:
            raise NoStall(f"profile did not settle at Phi={flow:.6g}")
        state["phi"] = settled
        psi_bar = periodic_mean(params.cubic(flow + settled))
        return float(gamma * throttle_inverse(params, psi_bar)), psi_bar

    cubic = params.cubic
    flow = float(gamma * throttle_inverse(params, cubic.psi_c0 + cubic.h))
    converged = False
    for _ in range(max_iter):
        x1, _ = g(flow)
        if abs(x1 - flow) < 1e-13:
            flow = x1
            converged = True
            break
        x2, _ = g(x1)
        denom = x2 - 2.0 * x1 + flow
        nxt = flow - (x1 - flow) ** 2 / denom if abs(denom) > 1e-300 else x2
        # Steffensen steps may overshoot past the end of the branch
        if not math.isfinite(nxt) or abs(nxt - x2) > 4.0 * abs(x2 - x1) + 1e-12:
            nxt = x2
        if abs(nxt - flow) < 1e-13:
            flow = nxt
            converged = True
            break
        flow = nxt
    if not converged:
        raise NoStall(f"stall iteration did not converge for gamma={gamma:.6g}")
    _, psi_bar = g(flow)
    phi = state["phi"]
    if np.max(np.abs(phi)) < 1e-6:
        raise NoStall("settled profile is trivial")

    settled = AnnulusState.from_profile(phi, flow, psi_bar)
    d_phi, d_flow, d_press = rhs(params, settled, gamma, Frame.ROTATING)
    residual = float(max(np.max(np.abs(d_phi)), abs(d_flow), abs(d_press)))

    cfg = SolverConfig(n_grid=n_grid, frame=Frame.ROTATING, t_end=check_window,
                       record_every=max(1, int(0.5 / dt)))
    traj = integrate(params, settled, gamma, cfg)
    end = traj.final_state
    moved = max(float(np.max(np.abs(end.phi - settled.phi))),
                abs(end.avg_flow - settled.avg_flow),
                abs(end.pressure_rise - settled.pressure_rise))
    if moved >= tol:
        raise NoStall(f"stall state drifts by {moved:.3g} over {check_window}")
    speed, _ = wave_speed(traj.times, traj.phi, Frame.ROTATING)
    return StallWave(settled.phi.copy(), speed, flow, psi_bar, float(gamma), residual)


# -- surge cycles ----------------------------------------------------------------

@dataclass(frozen=True)
class SurgeCycle:
    period: float
    times: np.ndarray
    avg_flow: np.ndarray
    pressure_rise: np.ndarray
    gamma: float

    @property
    def min_flow(self) -> float:
        return float(self.avg_flow.min())

    def state(self, n_grid: int, index: int = 0, time: float = 0.0) -> AnnulusState:
        return AnnulusState.uniform(n_grid, self.avg_flow[index], self.pressure_rise[index], time)


def _ode2(params, gamma, y):
    flow, press = y
    return np.array(scalar_rhs(params, flow, press, gamma, float(params.cubic(flow))))


def _rk4(params, gamma, y, h):
    k1 = _ode2(params, gamma, y)
    k2 = _ode2(params, gamma, y + 0.5 * h * k1)
    k3 = _ode2(params, gamma, y + 0.5 * h * k2)
    k4 = _ode2(params, gamma, y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_scalar_subsystem(params, gamma, y0, t_end, dt=0.05):
    """RK4 for the axisymmetric (phi = 0) subsystem.  Returns ``(t, Y)``."""
    n = int(math.ceil(t_end / dt))
    ys = np.empty((n + 1, 2))
    ys[0] = y0
    for i in range(n):
        ys[i + 1] = _rk4(params, gamma, ys[i], dt)
    return dt * np.arange(n + 1), ys


def _refine_crossing(params, gamma, y, level, h):
    """Fractional RK4 step landing on ``Phi = level`` (secant on the step length)."""
    a, fa = 0.0, y[0] - level
    b = h
    fb = _rk4(params, gamma, y, b)[0] - level
    for _ in range(50):
        if fb == fa:
            break
        c = b - fb * (b - a) / (fb - fa)
        a, fa = b, fb
        b = c
        fb = _rk4(params, gamma, y, b)[0] - level
        if abs(fb) < 1e-15:
            break
    return b


def find_surge_cycle(params: CompressorParams, gamma: float, y0=None, dt: float = 0.05,
                     t_max: float = 20000.0, tol: float = 1e-6, n_samples: int = 400) -> SurgeCycle:
    """Detect a stable surge limit cycle of the ``phi = 0`` subsystem.

    The Poincare section is the upward crossing of ``Phi = Phi0(gamma)``.
    The period is accepted once three consecutive return times, and the
    section hits in ``Psi``, agree to ``tol``.  The default start is the upper-left knee of the characteristic,
    which lies on or near any large relaxation cycle.
    """
    flow0, press0 = design_equilibrium(params, gamma)
    if y0 is None:
        w = params.cubic.w
        y0 = (-w, float(params.cubic(-w)))
    y = np.array(y0, dtype=float)
    t = 0.0
    crossings: list[tuple[float, np.ndarray]] = []
    while t < t_max:
        y_new = _rk4(params, gamma, y, dt)
        if y[0] < flow0 <= y_new[0]:
            tau = _refine_crossing(params, gamma, y, flow0, dt)
            crossings.append((t + tau, _rk4(params, gamma, y, tau)))
            if len(crossings) >= 4:
                periods = np.diff([c[0] for c in crossings[-4:]])
                # a slowly decaying spiral also has near-constant return times
                hits = np.array([c[1][1] for c in crossings[-3:]])
                if np.max(np.abs(hits - press0)) < 1e3 * tol:
                    raise NoCycle(f"orbit spirals into design flow for gamma={gamma:.6g}")
                if np.ptp(periods) < tol and np.ptp(hits) < tol:
                    break
        y, t = y_new, t + dt
        if np.hypot(y[0] - flow0, y[1] - press0) < 1e-8:
            raise NoCycle(f"orbit converged to design flow for gamma={gamma:.6g}")
    else:
        raise NoCycle(f"no periodic orbit detected within t={t_max} for gamma={gamma:.6g}")

    period = crossings[-1][0] - crossings[-2][0]
    start = crossings[-1][1]
    h = period / n_samples
    samples = np.empty((n_samples + 1, 2))
    samples[0] = start
    for i in range(n_samples):
        samples[i + 1] = _rk4(params, gamma, samples[i], h)
    times = h * np.arange(n_samples + 1)
    return SurgeCycle(float(period), times, samples[:, 0].copy(), samples[:, 1].copy(), float(gamma))


# -- equilibria ----------------------------------------------------------------

def jacobian_2d(params: CompressorParams, equilibrium, gamma: float) -> np.ndarray:
    """Jacobian of the axisymmetric ``(Phi, Psi)`` equations at an equilibrium."""
    flow, press = equilibrium
    k = params.plenum_factor
    return np.array([
        [params.cubic.prime(flow) / params.l_c, -1.0 / params.l_c],
        [k, -gamma * throttle_inverse_prime(params, press) * k],
    ], dtype=float)


def _trace_at(params, gamma):
    eq = design_equilibrium(params, gamma)
    return float(np.trace(jacobian_2d(params, eq, gamma)))


def hopf_point(params: CompressorParams, gamma_range=(None, None), tol: float = 1e-14) -> float:
    """Throttle value where the 2x2 Jacobian trace vanishes on the design branch."""
    lo, hi = gamma_range
    if lo is None or hi is None:
        peak_flow, peak_press = params.cubic.peak
        g_peak = peak_flow / throttle_inverse(params, peak_press)
        lo = params.gamma_min if lo is None else lo
        hi = 2.0 * g_peak if hi is None else hi
    f_lo, f_hi = _trace_at(params, lo), _trace_at(params, hi)
    if f_lo * f_hi > 0:
        raise NoSignChange(f"trace keeps sign on [{lo}, {hi}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = _trace_at(params, mid)
        if f_mid == 0.0:
            lo = hi = mid
            break
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
        if hi - lo <= tol * mid:
            break
    # pick the endpoint with the smaller |trace|
    gamma_h = lo if abs(_trace_at(params, lo)) <= abs(_trace_at(params, hi)) else hi
    jac = jacobian_2d(params, design_equilibrium(params, gamma_h), gamma_h)
    if not np.linalg.det(jac) > 0:
        raise NoSignChange(f"trace zero at gamma={gamma_h:.9g} is a saddle, not a Hopf point")
    return float(gamma_h)


# -- scans -----------------------------------------------------------------------

@dataclass
class BranchRow:
    gamma: float
    equilibria: list = field(default_factory=list)   # [(Phi0, Psi0, eigvals)]
    stall_exists: bool = False
    stall_amp: float = 0.0
    stall_flow: float = math.nan
    stall_pressure: float = math.nan
    surge_exists: bool = False
    period: float = math.nan
    notes: list = field(default_factory=list)


@dataclass
class BranchTable:
    rows: list
    n_grid: int
    gamma1_candidate: Optional[float] = None

    def __post_init__(self):
        gammas = [r.gamma for r in self.rows]
        if any(b <= a for a, b in zip(gammas, gammas[1:])):
            raise ValueError("rows must be sorted by strictly increasing gamma")

    @property
    def gammas(self) -> np.ndarray:
        return np.array([r.gamma for r in self.rows])

    @property
    def stall_column(self) -> np.ndarray:
        return np.array([bool(r.stall_exists) for r in self.rows], dtype=bool)

    def csv_rows(self):
        """Rows for ``gamma,Phi0,Psi0,re_ev1,im_ev1,re_ev2,im_ev2,...`` export
        (one line per equilibrium)."""
        out = []
        for r in self.rows:
            eqs = r.equilibria or [(math.nan, math.nan, np.array([math.nan, math.nan]))]
            for flow, press, ev in eqs:
                ev = sorted(np.asarray(ev, dtype=complex), key=lambda z: (-z.real, -z.imag))
                out.append([r.gamma, flow, press, ev[0].real, ev[0].imag, ev[1].real, ev[1].imag,
                            int(r.stall_exists), r.stall_amp, int(r.surge_exists), r.period])
        return out


def bifurcation_scan(params: CompressorParams, gamma_grid: Sequence[float], n_grid: int = 64,
                     seed_amplitude: float = 0.3, with_surge: bool = True,
                     with_stall: bool = True, workers: int = 1) -> BranchTable:
    """Scan equilibria, stall existence and surge existence over ``gamma_grid``.

    Stall rows use continuation: each settled profile seeds the next gamma,
    so that column runs serially.  The surge column is independent per row
    and is spread over ``workers`` threads.  Failures are stored as row
    notes; the scan never aborts.
    """
    gammas = [float(g) for g in gamma_grid]
    if any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise ValueError("gamma grid must be sorted ascending")
    rows = []
    seed = None
    for gamma in gammas:
        row = BranchRow(gamma)
        try:
            for flow, press in design_equilibria(params, gamma):
                ev = np.linalg.eigvals(jacobian_2d(params, (flow, press), gamma))
                row.equilibria.append((flow, press, ev))
        except (NoIntersection, ValueError) as exc:
            row.notes.append(f"equilibria: {exc}")
        if with_stall:
            try:
                wave = find_stall_wave(params, gamma, seed_amplitude, n_grid, seed_profile=seed)
                row.stall_exists = True
                row.stall_amp = wave.amplitude
                row.stall_flow, row.stall_pressure = wave.avg_flow, wave.pressure_rise
                seed = wave.profile
            except ModelError as exc:
                row.notes.append(f"stall: {exc}")
        rows.append(row)
    if with_surge:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda g: _surge_probe(params, g), gammas))
        else:
            results = [_surge_probe(params, g) for g in gammas]
        for row, (period, note) in zip(rows, results):
            if note is None:
                row.surge_exists, row.period = True, period
            else:
                row.notes.append(note)
    for row in rows:
        log.info("scan gamma=%.6g stall=%s surge=%s", row.gamma, row.stall_exists,
                 row.surge_exists)
    table = BranchTable(rows, n_grid)
    if with_stall:
        table.gamma1_candidate = first_stall_free(table)
    return table


def _surge_probe(params, gamma):
    try:
        return find_surge_cycle(params, gamma).period, None
    except ModelError as exc:
        return math.nan, f"surge: {exc}"


def first_stall_free(table: BranchTable) -> Optional[float]:
    """Smallest gamma past the stall branch with no stall (None if all stall).

    Rows below the first stall row are skipped; with no stall rows at all the
    smallest scanned gamma is returned.
    """
    stall = table.stall_column
    if stall.size == 0 or stall.all():
        return None
    start = int(np.argmax(stall)) if stall.any() else 0
    free = np.nonzero(~stall[start:])[0]
    return float(table.rows[start + free[0]].gamma) if free.size else None
