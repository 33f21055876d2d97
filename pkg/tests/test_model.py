import math

import numpy as np
import pytest
from numpy.polynomial import Polynomial
from scipy.optimize import brentq

from vmg.model import (
    AnnulusState,
    CompressorParams,
    CubicCharacteristic,
    Frame,
    NoIntersection,
    NonFiniteState,
    ThrottleSetting,
    derivative_first,
    design_equilibria,
    design_equilibrium,
    grid,
    mean_characteristic,
    psi_c,
    psi_c_prime,
    rhs,
    throttle_inverse,
    throttle_inverse_prime,
)

PEAK_GAMMA = 0.5 / math.sqrt(0.66)


def expanded_cubic(c: CubicCharacteristic) -> Polynomial:
    """Monomial-basis expansion of the characteristic (independent evaluation path)."""
    s = Polynomial([-1.0, 1.0 / c.w])
    return c.psi_c0 + c.h * (1.0 + 1.5 * s - 0.5 * s**3)


# -- characteristic ----------------------------------------------------------------

def test_cubic_valley_and_peak_values(params):
    assert psi_c(params, 0.0) == pytest.approx(0.3, abs=1e-15)
    assert psi_c(params, 0.5) == pytest.approx(0.66, abs=1e-15)
    assert psi_c_prime(params, 0.0) == 0.0
    assert psi_c_prime(params, 0.5) == 0.0
    assert params.cubic.peak == pytest.approx((0.5, 0.66))


def test_cubic_midpoint_against_expanded_polynomial(params):
    poly = expanded_cubic(params.cubic)
    assert psi_c(params, 0.25) == pytest.approx(0.48, abs=1e-15)
    assert psi_c_prime(params, 0.25) == pytest.approx(1.08, abs=1e-14)
    assert poly(0.25) == pytest.approx(0.48, abs=1e-14)
    assert poly.deriv()(0.25) == pytest.approx(1.08, abs=1e-13)
    xs = np.linspace(-1.0, 1.5, 101)
    np.testing.assert_allclose(psi_c(params, xs), poly(xs), atol=1e-13)
    np.testing.assert_allclose(psi_c_prime(params, xs), poly.deriv()(xs), atol=1e-12)
    assert params.cubic.leading_coefficient == pytest.approx(poly.coef[-1], rel=1e-13)


def test_cubic_derivative_matches_centered_differences_to_second_order(params):
    x = 0.37
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3):
        fd = (psi_c(params, x + h) - psi_c(params, x - h)) / (2 * h)
        errs.append(abs(fd - psi_c_prime(params, x)))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.05)


def test_characteristic_rejects_degenerate_shape():
    with pytest.raises(ValueError):
        CubicCharacteristic(h=0.0)
    with pytest.raises(ValueError):
        CubicCharacteristic(w=-1.0)


# -- throttle ----------------------------------------------------------------------

def test_throttle_inverse_examples(params):
    assert throttle_inverse(params, 4.0) == 2.0
    assert throttle_inverse(params, 0.0) == 0.0
    assert throttle_inverse(params, -1.0) == -1.0
    np.testing.assert_array_equal(throttle_inverse(params, np.array([4.0, -1.0])), [2.0, -1.0])


def test_throttle_blend_is_c1_and_monotone(params):
    eps = params.throttle_eps
    inside, outside = eps * (1 - 1e-12), eps
    assert throttle_inverse(params, inside) == pytest.approx(math.sqrt(eps), rel=1e-9)
    assert throttle_inverse_prime(params, inside) == pytest.approx(0.5 / math.sqrt(eps), rel=1e-9)
    assert throttle_inverse(params, outside) == pytest.approx(math.sqrt(eps), rel=1e-15)
    xs = np.linspace(-2 * eps, 2 * eps, 4001)
    assert np.all(np.diff(throttle_inverse(params, xs)) > 0)
    assert np.all(throttle_inverse_prime(params, xs) > 0)


def test_throttle_derivative_matches_differences_away_from_origin(params):
    for psi in (0.05, 0.4, 3.0):
        h = 1e-5
        fd = (throttle_inverse(params, psi + h) - throttle_inverse(params, psi - h)) / (2 * h)
        assert fd == pytest.approx(throttle_inverse_prime(params, psi), rel=1e-8)
        assert throttle_inverse_prime(params, psi) == pytest.approx(0.5 / math.sqrt(psi))


def test_scalar_and_array_paths_agree(params):
    xs = np.array([-3.0, -0.5, -1e-4, 0.0, 2e-4, 0.7, 5.0])
    arr = throttle_inverse(params, xs)
    for x, y in zip(xs, arr):
        assert throttle_inverse(params, float(x)) == y


# -- parameters and state -------------------------------------------------------------

@pytest.mark.parametrize("field", ["nu", "l_c", "b_param", "throttle_eps", "gamma_min"])
def test_params_reject_nonpositive(field):
    with pytest.raises(ValueError):
        CompressorParams(**{field: 0.0})


def test_state_invariants():
    theta = grid(16)
    AnnulusState(np.cos(theta), 0.5, 0.6)
    with pytest.raises(ValueError):
        AnnulusState(np.cos(theta) + 1e-6, 0.5, 0.6)
    with pytest.raises(ValueError):
        AnnulusState(np.zeros(4), 0.5, 0.6)
    with pytest.raises(NonFiniteState):
        AnnulusState(np.full(16, np.nan), 0.5, 0.6)
    s = AnnulusState.from_profile(np.cos(theta) + 3.0, 0.5, 0.6)
    assert abs(s.phi.mean()) < 1e-15
    with pytest.raises(ValueError):
        s.phi[0] = 1.0


def test_throttle_setting_lower_bound(params):
    ThrottleSetting(0.5, params.gamma_min)
    with pytest.raises(ValueError):
        ThrottleSetting(0.01, params.gamma_min)


# -- averaged characteristic ----------------------------------------------------------

def test_mean_characteristic_constant_profile(params):
    state = AnnulusState.uniform(32, 0.5, 0.0)
    assert mean_characteristic(params, state) == pytest.approx(0.66, abs=1e-15)


@pytest.mark.parametrize("amp,flow", [(0.2, 0.3), (0.45, 0.5), (0.1, -0.1)])
def test_mean_characteristic_against_fine_quadrature(params, amp, flow):
    fine = np.linspace(0.0, 2 * np.pi, 4096, endpoint=False)
    oracle = np.mean(params.cubic(flow + amp * np.cos(fine)))
    # for a cubic, the average over a cosine is psi_c + psi_c'' * a^2 / 4
    analytic = psi_c(params, flow) + params.cubic.second(flow) * amp**2 / 4
    assert oracle == pytest.approx(analytic, abs=1e-14)
    state = AnnulusState.from_profile(amp * np.cos(grid(64)), flow, 0.0)
    assert mean_characteristic(params, state) == pytest.approx(oracle, abs=1e-14)


def test_mean_characteristic_small_amplitude_limit(params):
    errs = []
    for amp in (1e-2, 5e-3):
        state = AnnulusState.from_profile(amp * np.cos(grid(64)), 0.3, 0.0)
        errs.append(abs(mean_characteristic(params, state) - psi_c(params, 0.3)))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=1e-6)


# -- right-hand side ------------------------------------------------------------------

def test_rhs_vanishes_at_design_equilibrium(params):
    flow, press = design_equilibrium(params, 0.6)
    d_phi, d_flow, d_press = rhs(params, AnnulusState.uniform(64, flow, press), 0.6)
    assert np.max(np.abs(d_phi)) == 0.0
    assert max(abs(d_flow), abs(d_press)) <= 1e-10


def test_rhs_scalar_values_by_hand(params):
    d_phi, d_flow, d_press = rhs(params, AnnulusState.uniform(32, 0.5, 0.4), 0.6154)
    assert d_flow == pytest.approx((0.66 - 0.4) / 8.0, rel=1e-14)
    expected = (0.5 - 0.6154 * math.sqrt(0.4)) / (4 * 8.0 * 1.8**2)
    assert d_press == pytest.approx(expected, rel=1e-13)
    assert np.all(d_phi == 0.0)


def test_rhs_linearization_in_rotating_frame(params):
    theta = grid(128)
    flow = 0.3
    dtheta = theta[1]
    # centered second difference of cos theta gives (2cos(dtheta) - 2)/dtheta^2
    lap = (2 * math.cos(dtheta) - 2) / dtheta**2
    expected = (psi_c_prime(params, flow) + params.nu * lap) * np.cos(theta)
    for eps in (1e-4, 1e-6):
        state = AnnulusState.from_profile(eps * np.cos(theta), flow, 0.5)
        d_phi, _, _ = rhs(params, state, 0.5, Frame.ROTATING)
        np.testing.assert_allclose(d_phi / eps, expected, atol=30 * eps)
    # continuous limit of the discrete coefficient
    assert lap == pytest.approx(-1.0, abs=1e-3)


def test_frame_consistency(params):
    theta = grid(64)
    phi = 0.3 * np.cos(theta) + 0.1 * np.sin(3 * theta)
    state = AnnulusState.from_profile(phi, 0.35, 0.5)
    lab, _, _ = rhs(params, state, 0.5, Frame.LAB)
    rot, _, _ = rhs(params, state, 0.5, Frame.ROTATING)
    np.testing.assert_allclose(rot, lab + 0.5 * derivative_first(state.phi), atol=1e-14)


def test_rhs_rejects_nonfinite(params):
    with pytest.raises(NonFiniteState):
        rhs(params, AnnulusState.uniform(16, 0.5, 0.4), math.nan)


# -- equilibria -------------------------------------------------------------------------

def test_equilibrium_at_peak(params):
    flow, press = design_equilibrium(params, PEAK_GAMMA)
    assert flow == pytest.approx(0.5, abs=1e-12)
    assert press == pytest.approx(0.66, abs=1e-12)
    assert psi_c_prime(params, flow) == pytest.approx(0.0, abs=1e-10)


def test_equilibrium_matches_independent_root_finder(params):
    for gamma in (0.3, 0.5, PEAK_GAMMA, 0.8, 1.5):
        def g(f):
            p = psi_c(params, f)
            return f - gamma * math.copysign(math.sqrt(abs(p)), p)
        roots = []
        xs = np.linspace(1e-9, 4 * params.cubic.w + 1.0, 2001)
        vals = [g(x) for x in xs]
        for a, b, fa, fb in zip(xs, xs[1:], vals, vals[1:]):
            if fa * fb < 0:
                roots.append(brentq(g, a, b, xtol=1e-14))
        flow, press = design_equilibrium(params, gamma)
        assert flow == pytest.approx(max(roots), abs=1e-12)
        assert abs(flow - gamma * throttle_inverse(params, press)) <= 1e-12
        assert press == psi_c(params, flow)


def test_all_equilibria_sorted_with_residuals(params):
    for gamma in np.linspace(0.1, 2.0, 39):
        eqs = design_equilibria(params, gamma)
        assert eqs, gamma
        flows = [f for f, _ in eqs]
        assert flows == sorted(flows)
        for f, p in eqs:
            assert abs(f - gamma * throttle_inverse(params, p)) <= 1e-12


def test_right_branch_monotone_in_gamma(params):
    gammas = np.linspace(0.62, 2.0, 60)
    flows = [design_equilibrium(params, g)[0] for g in gammas]
    assert np.all(np.diff(flows) > 0)


def test_no_intersection_reported():
    flat = CompressorParams(cubic=CubicCharacteristic(psi_c0=-2.0, h=0.1, w=0.25))
    with pytest.raises(NoIntersection):
        design_equilibrium(flat, 0.5)
