import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from hflsim.dpcore import (
    DpPolicy,
    PrivacyLedger,
    RoundEntry,
    accountant_compose,
    accountant_epsilon,
    amplify_by_fanin,
    amplify_by_shuffling,
    classic_gm_epsilon,
    config_budget,
    gaussian_noise,
    level_epsilons,
    sigma_for_zone,
    user_weight,
)
from hflsim.errors import ConfigurationError
from hflsim.numkit import ClipMode
from hflsim.rdp import DEFAULT_ORDERS, rdp_subsampled_gaussian, rdp_to_epsilon

# Computed once with the quadrature oracle below over the full order grid and frozen.
EPS_Q01_Z11_T200 = 9.263966794256767


def rdp_by_quadrature(q, z, order):
    """RDP of the Poisson-subsampled Gaussian by direct numerical integration.

    log E_{x ~ N(0, z^2)} [((1 - q) + q exp((2x - 1) / (2 z^2)))^order] / (order - 1),
    evaluated around the integrand's peak with a log-scale shift.
    """

    def log_integrand(x):
        log_ratio = np.logaddexp(math.log1p(-q), math.log(q) + (2 * x - 1) / (2 * z * z))
        return order * log_ratio - x * x / (2 * z * z) - math.log(z * math.sqrt(2 * math.pi))

    grid = np.linspace(-50 * z, 50 * z + order, 200001)
    values = log_integrand(grid)
    shift, peak = values.max(), grid[values.argmax()]
    pieces = [(-np.inf, peak - 20 * z), (peak - 20 * z, peak), (peak, peak + 20 * z), (peak + 20 * z, np.inf)]
    total = sum(
        integrate.quad(lambda x: math.exp(log_integrand(x) - shift), lo, hi, limit=500, epsabs=0, epsrel=1e-12)[0]
        for lo, hi in pieces
    )
    return (math.log(total) + shift) / (order - 1)


def test_gaussian_noise_zero_sigma_is_zero():
    out = gaussian_noise(50, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.values, 0.0)


def test_gaussian_noise_unit_variance():
    out = gaussian_noise(10**6, 1.0, np.random.default_rng(0))
    assert abs(out.values.var() - 1.0) < 0.005


def test_gaussian_sum_variance_additivity():
    rng = np.random.default_rng(1)
    total = np.zeros(10**5)
    for _ in range(100):
        total += gaussian_noise(10**5, 0.2, rng).values
    assert abs(total.var() / 4.0 - 1.0) < 0.05


def test_sigma_for_zone_examples():
    flat = DpPolicy("C2", ClipMode("flat", 2.0), z=1.0, q=0.1)
    assert sigma_for_zone(flat, 100.0) == pytest.approx(0.2, rel=1e-15)
    per_layer = DpPolicy("C2", ClipMode("per-layer", (2.0,)), z=1.0, q=0.1)
    assert sigma_for_zone(per_layer, 100.0) == pytest.approx(0.4, rel=1e-15)
    assert sigma_for_zone(DpPolicy("C2", ClipMode("flat", 2.0), z=0.0, q=0.1), 100.0) == 0.0
    with pytest.raises(ConfigurationError):
        sigma_for_zone(flat, 0.0)


def test_user_weight():
    assert user_weight(50, 100) == 0.5
    assert user_weight(200, 100) == 1.0
    assert user_weight(0, 100) == 0.0


def test_classic_gm_epsilon():
    assert classic_gm_epsilon(1.0, 1e-5) == pytest.approx(math.sqrt(2 * math.log(1.25e5)), rel=1e-15)
    # the four-decimal reference value is truncated, not rounded (exact 4.84481)
    assert classic_gm_epsilon(1.0, 1e-5) == pytest.approx(4.8447, abs=1.5e-4)
    assert classic_gm_epsilon(2.0, 1e-5) == pytest.approx(classic_gm_epsilon(1.0, 1e-5) / 2, rel=1e-15)
    assert math.isinf(classic_gm_epsilon(0.0, 1e-5))


@given(st.floats(0.05, 50), st.floats(0.05, 50), st.floats(1e-12, 0.5))
def test_classic_gm_monotone(z1, z2, delta):
    if z1 <= z2:
        assert classic_gm_epsilon(z1, delta) >= classic_gm_epsilon(z2, delta)
    # strict only when z differs by more than float resolution of the quotient
    if z1 * (1 + 1e-12) < z2:
        assert classic_gm_epsilon(z1, delta) > classic_gm_epsilon(z2, delta)
    assert classic_gm_epsilon(z1, delta / 2) > classic_gm_epsilon(z1, delta)


def test_amplification_examples():
    assert amplify_by_fanin(1.0, [4, 9]) == pytest.approx(1 / 6, rel=1e-15)
    assert amplify_by_fanin(1.7, [1, 1, 1]) == 1.7
    assert amplify_by_shuffling(1.0, 100) == pytest.approx(0.01, rel=1e-15)
    assert amplify_by_shuffling(3.0, 1) == 3.0
    assert amplify_by_shuffling(2.48, 100) == pytest.approx(0.0248, rel=1e-15)


@given(st.floats(1e-3, 1e3), st.integers(1, 1000), st.integers(1, 1000))
def test_fanin_composition(eps, a, b):
    joint = amplify_by_fanin(eps, [a * b])
    nested = amplify_by_fanin(amplify_by_fanin(eps, [a]), [b])
    # one rounding step per square root and division
    assert joint == pytest.approx(nested, rel=1e-14)
    assert amplify_by_fanin(eps, [a, b]) == pytest.approx(joint, rel=1e-14)


def test_config_budget_rows():
    assert config_budget("C1", 1.0, k=100) == pytest.approx(0.1, rel=1e-15)
    assert config_budget("C4", 1.0) == 1.0
    hand = 1 / math.sqrt(10) + 1 / math.sqrt(3) + 1
    assert abs(config_budget("C7", 1.0, s=10, m=5, alpha=0.3, beta=0.2) - hand) < 1e-12
    assert config_budget("C2", 1.0, s=10, shuffling=True) == pytest.approx(0.1, rel=1e-15)


def test_config_budget_degenerate_identities_exact():
    s, m = 10, 7
    assert config_budget("C3", 2.0, s=s, m=m, beta=1.0) == config_budget("C1", 2.0, k=s * m)
    assert config_budget("C3", 2.0, s=s, m=m, beta=0.0) == config_budget("C2", 2.0, s=s)
    assert config_budget("C6", 2.0, s=s, beta=0.0) == config_budget("C4", 2.0)
    assert config_budget("C5", 2.0, k=s * m, alpha=0.0) == config_budget("C4", 2.0)


def test_config_budget_errors():
    with pytest.raises(ConfigurationError):
        config_budget("C3", 1.0, s=10, m=5)
    with pytest.raises(ConfigurationError):
        config_budget("C7", 1.0, s=10, m=5, alpha=0.7, beta=0.6)
    with pytest.raises(ConfigurationError):
        config_budget("C1", 1.0)


def test_policy_validation():
    with pytest.raises(ConfigurationError):
        DpPolicy("C7", alpha=0.6, beta=0.5)
    with pytest.raises(ConfigurationError):
        DpPolicy("C2", z=-1.0)
    with pytest.raises(ConfigurationError):
        DpPolicy("C2", delta=1.0)
    with pytest.raises(ConfigurationError):
        DpPolicy("C9")


@pytest.mark.parametrize("z", [0.5, 1.0, 2.0, 4.0])
@pytest.mark.parametrize("q", [0.01, 0.1, 0.5])
def test_rdp_matches_quadrature(q, z):
    orders = [1.5, 2.0, 3.0, 8.0, 32.0]
    fast = rdp_subsampled_gaussian(q, z, orders)
    for order, value in zip(orders, fast):
        assert value == pytest.approx(rdp_by_quadrature(q, z, order), rel=1e-8)


def test_rdp_full_batch_closed_form():
    orders = np.array([1.5, 2.0, 10.0])
    np.testing.assert_allclose(rdp_subsampled_gaussian(1.0, 1.3, orders), orders / (2 * 1.3**2), rtol=1e-15)


def test_accountant_regression_value_against_oracle():
    oracle = np.array([rdp_by_quadrature(0.1, 1.1, a) for a in DEFAULT_ORDERS])
    eps_oracle, _ = rdp_to_epsilon(DEFAULT_ORDERS, 200 * oracle, 1e-5)
    assert eps_oracle == pytest.approx(EPS_Q01_Z11_T200, rel=1e-9)
    assert accountant_epsilon(0.1, 1.1, 200) == pytest.approx(EPS_Q01_Z11_T200, rel=1e-12)


def test_accountant_monotone_in_rounds_and_z():
    eps_t = [accountant_epsilon(0.1, 1.0, t) for t in (1, 10, 100, 1000)]
    assert eps_t == sorted(eps_t)
    eps_z = [accountant_epsilon(0.1, z, 50) for z in (0.6, 1.0, 2.0, 4.0)]
    assert eps_z == sorted(eps_z, reverse=True)


@pytest.mark.parametrize("z", [1.0, 2.0])
def test_accountant_tighter_than_classic_single_round(z):
    assert accountant_epsilon(1.0, z, 1) <= classic_gm_epsilon(z, 1e-5)


def ledger_after(placement, rounds, k=100, s=10, **kw):
    ledger = PrivacyLedger(placement=placement, **kw)
    for t in range(rounds):
        ledger = accountant_compose(ledger, RoundEntry(t, 0.2, 1.0, 1, k, s, k // s))
    return ledger


def test_ledger_levels_for_hdp():
    ledger = ledger_after("C2", 5)
    assert ledger.eps_aggregator == pytest.approx(ledger.eps_supernode / math.sqrt(10), rel=1e-14)
    assert math.isinf(ledger.eps_client)


def test_ledger_ratio_pattern_across_placements():
    ldp, hdp, cdp = (ledger_after(p, 3).eps_aggregator for p in ("C1", "C2", "C4"))
    assert cdp / ldp == pytest.approx(10.0, rel=1e-12)
    assert cdp / hdp == pytest.approx(math.sqrt(10), rel=1e-12)
    assert ldp <= hdp <= cdp


def test_ledger_nondecreasing_and_serializable():
    ledger = ledger_after("C1", 6)
    series = [h["aggregator"] for h in ledger.history]
    assert series == sorted(series)
    assert ledger.eps_aggregator <= ledger.eps_supernode <= ledger.eps_client
    data = json.loads(json.dumps(ledger.to_dict()))
    assert data["rounds"] == 6
    assert data["eps"]["aggregator"] == pytest.approx(ledger.eps_aggregator)


def test_ledger_shuffling_is_reporting_only():
    ledger = ledger_after("C1", 2)
    assert ledger.shuffled_aggregator() == pytest.approx(ledger.eps_site / 100, rel=1e-14)
    assert ledger.eps_aggregator == pytest.approx(ledger.eps_site / 10, rel=1e-14)


def test_level_epsilons_unprotected_levels_are_infinite():
    lv = level_epsilons("C4", 2.0, k=100, s=10, m_min=10)
    assert math.isinf(lv["client"]) and math.isinf(lv["supernode"])
    assert lv["aggregator"] == 2.0
