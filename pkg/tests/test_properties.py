"""Property checks over randomly drawn inputs."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vmg.control import baseline_surrogate
from vmg.model import (
    AnnulusState,
    CompressorParams,
    Frame,
    periodic_mean,
    rhs,
    throttle_inverse,
)

PARAMS = CompressorParams()
finite = st.floats(-50, 50, allow_nan=False)


@given(finite)
def test_throttle_inverse_is_odd(psi):
    assert throttle_inverse(PARAMS, -psi) == -throttle_inverse(PARAMS, psi)


@given(st.floats(0, 50, allow_nan=False), st.floats(0, 50, allow_nan=False))
def test_throttle_inverse_is_monotone(a, b):
    lo, hi = sorted((a, b))
    assert throttle_inverse(PARAMS, lo) <= throttle_inverse(PARAMS, hi)


@settings(max_examples=60)
@given(arrays(np.float64, 32, elements=st.floats(-1, 1)), st.floats(-0.5, 1.0),
       st.floats(0.05, 1.0), st.floats(0.1, 1.5), st.sampled_from(list(Frame)))
def test_disturbance_rate_is_mean_free(phi, flow, press, gamma, frame):
    state = AnnulusState.from_profile(phi, flow, press)
    d_phi, _, _ = rhs(PARAMS, state, gamma, frame)
    assert abs(periodic_mean(d_phi)) <= 1e-14


@given(st.floats(-20, 20, allow_nan=False), st.floats(-1, 2, allow_nan=False),
       st.floats(0.1, 50))
def test_surrogate_output_always_in_bounds(press, flow, gain):
    law = baseline_surrogate(PARAMS, 0.65, gain)
    out = law(0.0, AnnulusState.uniform(8, flow, press))
    assert PARAMS.gamma_min <= out <= PARAMS.gamma_max
