import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsumm.accountant import (CalibrationError, DEFAULT_ORDERS, PrivacySpec,
                               RdpCurve, account, calibrate_sigma, compose,
                               rdp_curve, rdp_gaussian, rdp_subsampled_gaussian,
                               to_dp)

# high-precision value computed with 60-digit mpmath summation of the
# binomial series, frozen before the implementation existed
ORACLE_A8_Q005_S1 = 0.6012689139892540641980076


def test_gaussian_trivial_values():
    assert rdp_gaussian(4, 2.0) == pytest.approx(0.5, abs=0)
    assert rdp_gaussian(2, 1.0) == pytest.approx(1.0, abs=0)
    assert rdp_gaussian(32, 0.5) == pytest.approx(64.0, abs=0)


def test_gaussian_domain_errors():
    with pytest.raises(ValueError):
        rdp_gaussian(1.0, 1.0)
    with pytest.raises(ValueError):
        rdp_gaussian(2.0, 0.0)
    with pytest.raises(ValueError):
        rdp_gaussian(2.0, -1.0)


def test_subsampled_trivial_values():
    assert rdp_subsampled_gaussian(2, 0.0, 1.0) == 0.0
    assert rdp_subsampled_gaussian(2, 1.0, 1.0) == pytest.approx(1.0, rel=1e-12)


def test_subsampled_frozen_oracle_value():
    got = rdp_subsampled_gaussian(8, 0.05, 1.0)
    assert abs(got - ORACLE_A8_Q005_S1) / ORACLE_A8_Q005_S1 < 1e-12


def test_subsampled_matches_gaussian_at_q1():
    for alpha in range(2, 65):
        full = rdp_gaussian(alpha, 1.3)
        sub = rdp_subsampled_gaussian(alpha, 1.0, 1.3)
        assert abs(sub - full) / full < 1e-12


def test_subsampled_domain_errors():
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(2.5, 0.1, 1.0)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(1, 0.1, 1.0)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(2, 0.1, 0.0)
    with pytest.raises(ValueError):
        rdp_subsampled_gaussian(2, 1.5, 1.0)


@settings(max_examples=60, deadline=None)
@given(alpha=st.integers(2, 64),
       q=st.floats(1e-4, 0.5),
       sigma=st.floats(0.4, 5.0),
       q_bump=st.floats(1.01, 2.0),
       sigma_bump=st.floats(1.01, 2.0))
def test_monotonicity_properties(alpha, q, sigma, q_bump, sigma_bump):
    base = rdp_subsampled_gaussian(alpha, q, sigma)
    assert base >= 0
    more_data = rdp_subsampled_gaussian(alpha, min(1.0, q * q_bump), sigma)
    assert more_data >= base - 1e-12            # nondecreasing in q
    more_noise = rdp_subsampled_gaussian(alpha, q, sigma * sigma_bump)
    assert more_noise <= base + 1e-12           # nonincreasing in sigma


@settings(max_examples=30, deadline=None)
@given(q=st.floats(1e-3, 0.3), sigma=st.floats(0.5, 3.0),
       steps=st.integers(1, 500), extra=st.integers(1, 500))
def test_composed_epsilon_nondecreasing_in_steps(q, sigma, steps, extra):
    curve = rdp_curve(q, sigma)
    delta = 1e-4
    shorter, _ = to_dp(compose(curve, steps), delta)
    longer, _ = to_dp(compose(curve, steps + extra), delta)
    assert longer >= shorter - 1e-12


def test_compose_additivity_and_identity():
    curve = RdpCurve(orders=(2.0,), epsilons=(0.1,))
    assert compose(curve, 10).epsilons[0] == pytest.approx(1.0)
    same = compose(curve, 1)
    assert same.orders == curve.orders and same.epsilons == curve.epsilons
    with pytest.raises(ValueError):
        compose(curve, 0)


def test_compose_matches_per_order_oracle():
    per_step = rdp_curve(0.05, 1.0)
    steps = 1000
    composed = compose(per_step, steps)
    for alpha, eps in zip(composed.orders, composed.epsilons):
        direct = rdp_subsampled_gaussian(int(alpha), 0.05, 1.0) * steps
        assert eps == pytest.approx(direct, rel=1e-12)


def test_to_dp_single_order_analytic():
    curve = RdpCurve(orders=(2.0,), epsilons=(0.0,))
    eps, order = to_dp(curve, 0.5)
    assert eps == pytest.approx(math.log(2.0), rel=1e-12)
    assert order == 2.0


def test_to_dp_delta_near_one_limit():
    c = 0.37
    curve = RdpCurve(orders=tuple(float(a) for a in range(2, 20)),
                     epsilons=tuple(c for _ in range(2, 20)))
    eps, _ = to_dp(curve, 1 - 1e-12)
    assert eps == pytest.approx(c, abs=1e-9)


def test_to_dp_is_minimum_and_ties_to_smallest_order():
    curve = compose(rdp_curve(0.05, 1.2), 500)
    delta = 1.0 / (2 * 690)
    eps, best = to_dp(curve, delta)
    log_inv = math.log(1 / delta)
    per_order = [e + log_inv / (a - 1) for a, e in zip(curve.orders, curve.epsilons)]
    assert eps == pytest.approx(min(per_order), rel=1e-12)
    assert all(eps <= v + 1e-12 for v in per_order)
    # exact tie: both orders give the same bound; the smaller one wins
    tied = RdpCurve(orders=(2.0, 3.0), epsilons=(1.0, 1.0 + log_inv / 2))
    _, order = to_dp(tied, delta)
    assert order == 2.0


def test_to_dp_errors():
    with pytest.raises(ValueError):
        to_dp(RdpCurve(orders=(), epsilons=()), 0.1)
    with pytest.raises(ValueError):
        to_dp(RdpCurve(orders=(2.0,), epsilons=(0.1,)), 1.5)


def test_calibrate_round_trip_paper_settings():
    # 690 training pairs, batch 4, 20 epochs
    n = 690
    q = 4 / n
    steps = 20 * math.ceil(n / 4)
    delta = 1.0 / (2 * n)
    sigmas = {}
    for target in (8.0, 3.0):
        sigma = calibrate_sigma(target, delta, q, steps)
        eps, _ = account(sigma, q, steps, delta)
        assert target - 1e-3 <= eps <= target
        sigmas[target] = sigma
    assert sigmas[3.0] > sigmas[8.0]   # stricter budget needs more noise


def test_calibrate_degenerate_and_unreachable():
    assert calibrate_sigma(8.0, 1e-3, 0.0, 1000) == 0.3
    with pytest.raises(CalibrationError) as exc:
        calibrate_sigma(1e-6, 1e-6, 0.5, 100000)
    assert "0.3" in str(exc.value) and "100" in str(exc.value)


def test_q_zero_gives_zero_epsilon_after_conversion():
    curve = compose(rdp_curve(0.0, 5.0), 10000)
    assert all(e == 0.0 for e in curve.epsilons)


def test_privacy_spec_validation():
    good = dict(target_epsilon=8.0, delta=1e-3, sample_rate=0.01, steps=100,
                noise_multiplier=1.0, clipping_norm=0.1)
    PrivacySpec(**good)
    for key, bad in [("target_epsilon", 0.0), ("delta", 0.0), ("delta", 1.0),
                     ("sample_rate", -0.1), ("sample_rate", 1.1), ("steps", 0),
                     ("noise_multiplier", -1.0), ("clipping_norm", 0.0)]:
        with pytest.raises(ValueError):
            PrivacySpec(**{**good, key: bad})


def test_rdp_curve_invariants():
    with pytest.raises(ValueError):
        RdpCurve(orders=(2.0, 2.0), epsilons=(0.1, 0.1))
    with pytest.raises(ValueError):
        RdpCurve(orders=(2.0, 3.0), epsilons=(0.1, -0.1))
    with pytest.raises(ValueError):
        RdpCurve(orders=(2.0,), epsilons=(0.1, 0.2))


def test_default_order_grid():
    assert DEFAULT_ORDERS[0] == 2
    assert DEFAULT_ORDERS[-2:] == (128, 256)
    assert list(DEFAULT_ORDERS[:63]) == list(range(2, 65))
