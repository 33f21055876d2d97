"""Viscous Moore-Greitzer compressor model.

State is a zero-mean circumferential flow disturbance ``phi`` sampled on an
equispaced periodic grid over [0, 2*pi), the annulus-averaged flow ``Phi`` and
the plenum pressure rise ``Psi``.  All quantities are nondimensional.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np


class ModelError(Exception):
    """Base class for model-level failures."""


class NoIntersection(ModelError):
    """The throttle parabola does not cross the compressor characteristic."""


class NonFiniteState(ModelError):
    """A state contains NaN or infinite values."""


class Frame(str, enum.Enum):
    LAB = "lab"
    ROTATING = "rotating"


@dataclass(frozen=True)
class CubicCharacteristic:
    """Cubic compressor characteristic.

    ``psi_c(Phi) = psi_c0 + h * (1 + 1.5*(Phi/w - 1) - 0.5*(Phi/w - 1)**3)``,
    with its valley at ``Phi = 0`` and its peak at ``Phi = 2*w``.
    """

    psi_c0: float = 0.3
    h: float = 0.18
    w: float = 0.25

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0):
            raise ValueError("characteristic needs h > 0 and w > 0")
        if not math.isfinite(self.psi_c0):
            raise ValueError("psi_c0 must be finite")

    @property
    def leading_coefficient(self) -> float:
        return -self.h / (2.0 * self.w**3)

    def __call__(self, flow):
        if not isinstance(flow, np.ndarray):
            flow = float(flow)
        s = flow / self.w - 1.0
        return self.psi_c0 + self.h * (1.0 + s * (1.5 - 0.5 * s * s))

    def prime(self, flow):
        if not isinstance(flow, np.ndarray):
            flow = float(flow)
        s = flow / self.w - 1.0
        return 1.5 * self.h / self.w * (1.0 - s * s)

    def second(self, flow):
        s = np.asarray(flow) / self.w - 1.0
        return -3.0 * self.h / self.w**2 * s

    @property
    def peak(self) -> tuple[float, float]:
        return 2.0 * self.w, self.psi_c0 + 2.0 * self.h


@dataclass(frozen=True)
class CompressorParams:
    """Physical constants of the compression system.

    ``gamma_max`` is the saturation ceiling for every control law; it lives
    here so a single object carries the whole actuator envelope.
    """

    nu: float = 0.1
    l_c: float = 8.0
    b_param: float = 1.8
    cubic: CubicCharacteristic = field(default_factory=CubicCharacteristic)
    throttle_eps: float = 1e-3
    gamma_min: float = 0.05
    gamma_max: float = 2.0

    def __post_init__(self):
        for name in ("nu", "l_c", "b_param", "throttle_eps", "gamma_min"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value!r}")
        if not self.gamma_max > self.gamma_min:
            raise ValueError("gamma_max must exceed gamma_min")
        if not self.cubic.leading_coefficient < 0:
            raise ValueError("compressor characteristic must have a negative leading coefficient")

    @property
    def plenum_factor(self) -> float:
        """``1 / (4 l_c B^2)``, the prefactor of the pressure equation."""
        return 1.0 / (4.0 * self.l_c * self.b_param**2)

    def with_(self, **changes) -> "CompressorParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class AnnulusState:
    phi: np.ndarray
    avg_flow: float
    pressure_rise: float
    time: float = 0.0

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 1 or phi.size < 8:
            raise ValueError("phi must be a 1-D grid with at least 8 samples")
        if not (np.all(np.isfinite(phi)) and math.isfinite(self.avg_flow)
                and math.isfinite(self.pressure_rise) and math.isfinite(self.time)):
            raise NonFiniteState("state contains non-finite values")
        scale = max(1.0, float(np.max(np.abs(phi))))
        if abs(phi.mean()) > 1e-10 * scale:
            raise ValueError(f"phi must have zero mean (mean = {phi.mean():.3e})")
        phi.flags.writeable = False
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "avg_flow", float(self.avg_flow))
        object.__setattr__(self, "pressure_rise", float(self.pressure_rise))
        object.__setattr__(self, "time", float(self.time))

    @property
    def n_grid(self) -> int:
        return self.phi.size

    @classmethod
    def from_profile(cls, phi, avg_flow, pressure_rise, time=0.0) -> "AnnulusState":
        """Build a state after projecting ``phi`` onto zero mean."""
        phi = np.asarray(phi, dtype=float)
        return cls(phi - phi.mean(), avg_flow, pressure_rise, time)

    @classmethod
    def uniform(cls, n_grid, avg_flow, pressure_rise, time=0.0) -> "AnnulusState":
        return cls(np.zeros(n_grid), avg_flow, pressure_rise, time)


@dataclass(frozen=True)
class ThrottleSetting:
    gamma: float
    gamma_min: float

    def __post_init__(self):
        if not self.gamma >= self.gamma_min:
            raise ValueError(f"throttle {self.gamma} below lower bound {self.gamma_min}")


def grid(n_grid: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n_grid) / n_grid


def psi_c(params: CompressorParams, flow):
    return params.cubic(flow)


def psi_c_prime(params: CompressorParams, flow):
    return params.cubic.prime(flow)


def _hermite_coeffs(eps: float) -> tuple[float, float]:
    # odd cubic a*x + b*x**3 matching sqrt(eps) and 1/(2 sqrt(eps)) at x = eps
    r = math.sqrt(eps)
    a = 1.25 / r
    b = -0.25 / (r * eps * eps)
    return a, b


def throttle_inverse(params: CompressorParams, psi):
    """Inverse throttle characteristic ``sign(Psi) * sqrt(|Psi|)``.

    Inside ``|Psi| < throttle_eps`` an odd cubic blend keeps the map C1 and
    monotone.
    """
    eps = params.throttle_eps
    if not isinstance(psi, np.ndarray):
        psi = float(psi)
        if abs(psi) >= eps:
            return math.copysign(math.sqrt(abs(psi)), psi)
        a, b = _hermite_coeffs(eps)
        return a * psi + b * psi**3
    psi = np.asarray(psi, dtype=float)
    a, b = _hermite_coeffs(eps)
    outer = np.sign(psi) * np.sqrt(np.abs(psi))
    inner = a * psi + b * psi**3
    out = np.where(np.abs(psi) >= eps, outer, inner)
    return out if out.ndim else float(out)


def throttle_inverse_prime(params: CompressorParams, psi):
    psi = np.asarray(psi, dtype=float)
    eps = params.throttle_eps
    a, b = _hermite_coeffs(eps)
    mag = np.maximum(np.abs(psi), eps)
    outer = 0.5 / np.sqrt(mag)
    inner = a + 3.0 * b * psi**2
    out = np.where(np.abs(psi) >= eps, outer, inner)
    return out if out.ndim else float(out)


def mean_characteristic(params: CompressorParams, state: AnnulusState) -> float:
    """Annulus average of ``psi_c(Phi + phi)`` by the periodic trapezoid rule."""
    return _mean_char(params, state.phi, state.avg_flow)


def _mean_char(params, phi, avg_flow) -> float:
    return periodic_mean(params.cubic(avg_flow + phi))


def _check_finite(phi, avg_flow, pressure_rise):
    if not (np.all(np.isfinite(phi)) and math.isfinite(avg_flow) and math.isfinite(pressure_rise)):
        raise NonFiniteState("non-finite state passed to rhs")


def shift_left(u: np.ndarray) -> np.ndarray:
    """``u[j+1]`` with periodic wrap (a cheaper ``np.roll(u, -1)``)."""
    return np.concatenate((u[1:], u[:1]))


def shift_right(u: np.ndarray) -> np.ndarray:
    """``u[j-1]`` with periodic wrap."""
    return np.concatenate((u[-1:], u[:-1]))


def periodic_mean(u: np.ndarray) -> float:
    return float(np.add.reduce(u)) / u.size


def derivative_first(phi: np.ndarray) -> np.ndarray:
    """Second-order centered periodic first derivative."""
    dtheta = 2.0 * np.pi / phi.size
    return (shift_left(phi) - shift_right(phi)) / (2.0 * dtheta)


def derivative_second(phi: np.ndarray) -> np.ndarray:
    dtheta = 2.0 * np.pi / phi.size
    return (shift_left(phi) - 2.0 * phi + shift_right(phi)) / dtheta**2


def mean_free(values: np.ndarray) -> np.ndarray:
    """``values - mean(values)``, exactly zero when all values are equal."""
    dev = values - values[0]
    return dev - periodic_mean(dev)


def phi_rhs(params, phi, avg_flow, frame=Frame.LAB):
    """Right-hand side of the disturbance equation on the grid."""
    out = params.nu * derivative_second(phi) + mean_free(params.cubic(avg_flow + phi))
    if Frame(frame) is Frame.LAB:
        out -= 0.5 * derivative_first(phi)
    return out


def scalar_rhs(params, avg_flow, pressure_rise, gamma, psi_bar):
    """Mean-flow and plenum equations given the averaged characteristic."""
    d_flow = (psi_bar - pressure_rise) / params.l_c
    d_press = params.plenum_factor * (avg_flow - gamma * throttle_inverse(params, pressure_rise))
    return d_flow, d_press


def rhs(params: CompressorParams, state: AnnulusState, gamma, frame=Frame.LAB):
    """Time derivative ``(dphi/dt, dPhi/dt, dPsi/dt)`` of the full system.

    ``gamma`` may be a float or a :class:`ThrottleSetting`.  In the rotating
    frame the advective ``-phi_theta / 2`` term is absent.
    """
    gamma = gamma.gamma if isinstance(gamma, ThrottleSetting) else float(gamma)
    _check_finite(state.phi, state.avg_flow, state.pressure_rise)
    if not math.isfinite(gamma):
        raise NonFiniteState("non-finite throttle passed to rhs")
    psi_bar = mean_characteristic(params, state)
    dphi = phi_rhs(params, state.phi, state.avg_flow, frame)
    d_flow, d_press = scalar_rhs(params, state.avg_flow, state.pressure_rise, gamma, psi_bar)
    return dphi, d_flow, d_press


def _equilibrium_residual(params, gamma, flow):
    return flow - gamma * throttle_inverse(params, params.cubic(flow))


def _bisect(fun, lo, hi, tol=1e-14, max_iter=200):
    f_lo = fun(lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = fun(mid)
        if f_mid == 0.0:
            return mid
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def _search_bracket(params: CompressorParams) -> tuple[float, float]:
    # right end: far enough that psi_c has gone negative so the residual is positive
    w = params.cubic.w
    hi = 4.0 * w
    while params.cubic(hi) > 0:
        hi *= 1.5
    return 1e-9 * w, hi


def design_equilibria(params: CompressorParams, gamma: float, n_scan: int = 1000):
    """All intersections of throttle and compressor characteristics with Phi > 0.

    Returned sorted by increasing flow.
    """
    if not gamma >= params.gamma_min:
        raise ValueError(f"gamma={gamma} below gamma_min={params.gamma_min}")
    lo, hi = _search_bracket(params)
    xs = np.linspace(lo, hi, n_scan + 1)
    gs = _equilibrium_residual(params, gamma, xs)
    roots = []
    fun = lambda x: float(_equilibrium_residual(params, gamma, x))
    for i in range(n_scan):
        if gs[i] == 0.0:
            roots.append(float(xs[i]))
        elif gs[i] * gs[i + 1] < 0:
            roots.append(_bisect(fun, float(xs[i]), float(xs[i + 1])))
    if not roots:
        raise NoIntersection(f"no design equilibrium for gamma={gamma}")
    return [(phi0, float(params.cubic(phi0))) for phi0 in roots]


def design_equilibrium(params: CompressorParams, gamma: float) -> tuple[float, float]:
    """Right-most design-flow equilibrium ``(Phi0, Psi0)`` for throttle ``gamma``."""
    return design_equilibria(params, gamma)[-1]


def equilibrium_state(params, gamma, n_grid, time=0.0) -> AnnulusState:
    flow, press = design_equilibrium(params, gamma)
    return AnnulusState.uniform(n_grid, flow, press, time)


def gamma_for_flow(params: CompressorParams, flow: float) -> float:
    """Throttle setting whose parabola passes through ``(flow, psi_c(flow))``."""
    return float(flow / throttle_inverse(params, params.cubic(flow)))
