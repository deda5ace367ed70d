import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import comb

from switchlab.core import ResourcePolytope
from switchlab.errors import CapacityError, DomainError, InstabilityError
from switchlab.sfa import (
    PhiEvaluator,
    SfaRates,
    analytic_report,
    log_phi,
    lower_bound_exponents,
    md1_lower_bound,
    mean_workload,
    normalizer,
    phi_bruteforce,
    phi_dp,
    report_csv,
    resource_levels_by_enumeration,
    resource_marginals,
    sfa_rates,
    stationary_pi,
    tail_exponent,
    total_count_by_enumeration,
    total_count_distribution,
    truncation_remainder,
)
from switchlab.topologies import iq_switch, parallel_vs_pooled

SINGLE = ResourcePolytope([[1.0]], [1.0])
SHARED = ResourcePolytope([[1.0, 1.0]], [1.0])
TWO_BY_TWO = ResourcePolytope([[1.0, 1.0], [0.0, 1.0]], [1.0, 1.0])


def random_polytope(rng, max_routes=4, max_resources=3):
    n = int(rng.integers(1, max_routes + 1))
    J = int(rng.integers(1, max_resources + 1))
    R = rng.choice([0.0, 0.0, 0.5, 1.0, 2.0], size=(J, n))
    for i in range(n):
        if not R[:, i].any():
            R[rng.integers(J), i] = 1.0
    return ResourcePolytope(R, rng.choice([1.0, 1.5, 2.0], size=J))


def theta_oracle(rho):
    return brentq(lambda t: rho * math.expm1(t) - t, 1e-6, 50.0, xtol=1e-14)


# ---------------------------------------------------------------- Phi
@pytest.mark.parametrize("m", [0, 1, 5, 12])
def test_single_resource_single_route_phi_is_one(m):
    assert phi_bruteforce([m], SINGLE) == 1.0
    assert phi_dp([m], SINGLE) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("m", [(0, 0), (1, 2), (3, 4), (6, 6)])
def test_shared_resource_phi_is_binomial(m):
    expected = comb(m[0] + m[1], m[0], exact=True)
    assert phi_bruteforce(m, SHARED) == expected
    assert phi_dp(m, SHARED) == pytest.approx(expected, rel=1e-12)


def test_negative_occupancy_gives_zero():
    assert phi_bruteforce([-1, 2], SHARED) == 0.0
    assert phi_dp([2, -1], SHARED) == 0.0


def test_phi_of_empty_network_is_one():
    assert phi_dp([0, 0, 0, 0], iq_switch(2).polytope) == 1.0


def test_switch_phi_matches_bruteforce():
    P = iq_switch(2).polytope
    assert phi_dp([1, 1, 1, 1], P) == pytest.approx(phi_bruteforce([1, 1, 1, 1], P), rel=1e-12)


def test_bruteforce_capacity_cap():
    with pytest.raises(CapacityError):
        phi_bruteforce([13], SINGLE)


def test_phi_dp_overflow_guard():
    P = iq_switch(2).polytope
    assert math.isfinite(log_phi([400, 400, 400, 400], P))
    with pytest.raises(CapacityError):
        phi_dp([400, 400, 400, 400], P)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_phi_dp_matches_bruteforce_on_random_polytopes(seed):
    rng = np.random.default_rng(seed)
    P = random_polytope(rng)
    m = rng.multinomial(int(rng.integers(0, 9)), np.ones(P.n_routes) / P.n_routes)
    assert phi_dp(m, P) == pytest.approx(phi_bruteforce(m, P), rel=1e-9)


CHAIN_CASES = {
    "iq2": iq_switch(2).polytope,
    "pooled3": parallel_vs_pooled(3)[1].polytope,
    "parallel3": parallel_vs_pooled(3)[0].polytope,
    "path_with_singles": ResourcePolytope(
        [[1, 0, 0, 1, 0], [1, 1, 0, 0, 0], [0, 1, 1, 0, 1], [0, 0, 1, 0, 0]], [1.0, 2.0, 1.5, 1.0]
    ),
    "two_cycle": ResourcePolytope([[1, 1], [1, 2]], [1.0, 3.0]),
    "three_cycle": ResourcePolytope([[1, 0, 1], [1, 1, 0], [0, 1, 1]], [1.0, 1.0, 2.0]),
}


@pytest.mark.parametrize("name", sorted(CHAIN_CASES))
def test_chain_kernel_agrees_with_einsum_and_bruteforce(name):
    P = CHAIN_CASES[name]
    chain, tensor = PhiEvaluator(P, method="chain"), PhiEvaluator(P, method="einsum")
    assert chain.method == "chain"
    rng = np.random.default_rng(3)
    for _ in range(40):
        m = rng.integers(0, 4, P.n_routes)
        if m.sum() <= 8:
            assert math.exp(chain.log_phi(m)) == pytest.approx(phi_bruteforce(m, P), rel=1e-9)
        big = rng.integers(0, 60, P.n_routes)
        assert chain.log_phi(big) == pytest.approx(tensor.log_phi(big), rel=1e-12, abs=1e-9)
        np.testing.assert_allclose(chain.rates(big), tensor.rates(big), rtol=1e-10)


def test_chain_kernel_beyond_table_cap():
    P = iq_switch(2).polytope
    chain, tensor = PhiEvaluator(P, method="chain"), PhiEvaluator(P, method="einsum")
    m = [170, 5, 90, 200]
    assert chain.log_phi(m) == pytest.approx(tensor.log_phi(m), rel=1e-12)
    np.testing.assert_allclose(chain.rates(m), tensor.rates(m), rtol=1e-10)


def test_chain_method_refused_when_ineligible():
    with pytest.raises(DomainError):
        PhiEvaluator(iq_switch(3).polytope, method="chain")


# ---------------------------------------------------------------- rates
def test_rates_vanish_on_empty_routes():
    phi = sfa_rates([0, 3, 0, 1], iq_switch(2).polytope)
    assert phi[0] == 0 and phi[2] == 0 and phi[1] > 0 and phi[3] > 0


@pytest.mark.parametrize("m", [1, 4, 30])
def test_single_route_rate_is_one(m):
    assert sfa_rates([m], SINGLE)[0] == pytest.approx(1.0)


@pytest.mark.parametrize("m", [(1, 1), (2, 5), (7, 0)])
def test_shared_resource_is_processor_sharing(m):
    np.testing.assert_allclose(sfa_rates(m, SHARED), np.array(m) / sum(m), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rates_are_admissible(seed):
    rng = np.random.default_rng(seed)
    P = random_polytope(rng)
    m = rng.integers(0, 6, P.n_routes)
    phi = sfa_rates(m, P)
    assert np.all(P.r_matrix @ phi <= P.capacities + 1e-9)
    assert np.all((phi > 0) == (m > 0))


def test_rate_cache_reuses_results():
    rates = SfaRates(iq_switch(2).polytope)
    a = rates((1, 2, 3, 4))
    b = rates((1, 2, 3, 4))
    assert a == b and rates.cache_info().hits == 1


# ---------------------------------------------------------------- stationary measure
@pytest.mark.parametrize("m", [0, 1, 4])
def test_single_queue_stationary_is_geometric(m):
    assert stationary_pi([m], [0.7], SINGLE) == pytest.approx(0.3 * 0.7**m, rel=1e-12)


def test_empty_state_probability_is_inverse_normalizer():
    lam = [0.1, 0.2, 0.15, 0.3]
    P = iq_switch(2).polytope
    assert stationary_pi([0, 0, 0, 0], lam, P) == pytest.approx(1 / normalizer(lam, P), rel=1e-12)


def test_truncated_stationary_mass_sums_to_one():
    lam = [0.2, 0.3]
    total = sum(stationary_pi(m, lam, SHARED) for L in range(31) for m in [(k, L - k) for k in range(L + 1)])
    remainder = truncation_remainder(30, lam, SHARED)
    assert remainder < 1e-6
    assert total == pytest.approx(1.0, abs=1e-6)
    assert 1.0 - total == pytest.approx(remainder, abs=1e-12)


def test_unstable_rates_raise():
    with pytest.raises(InstabilityError):
        stationary_pi([0, 0], [0.6, 0.5], SHARED)


def test_detailed_balance_on_small_network():
    lam = np.array([0.25, 0.4])
    for m in itertools.product(range(6), repeat=2):
        phi = sfa_rates(m, TWO_BY_TWO)
        for i in range(2):
            if m[i] >= 1:
                down = list(m)
                down[i] -= 1
                lhs = stationary_pi(m, lam, TWO_BY_TWO) * phi[i]
                rhs = stationary_pi(down, lam, TWO_BY_TWO) * lam[i]
                assert lhs == pytest.approx(rhs, rel=1e-10)


# ---------------------------------------------------------------- product-form identities
def test_resource_marginal_examples():
    assert resource_marginals([0, 0], [0.5, 0.25]) == pytest.approx(0.5 * 0.75)
    assert resource_marginals([3], [0.5]) == pytest.approx(0.0625)
    assert resource_marginals([1, 1], [0.5, 0.25]) == pytest.approx(0.046875)


def test_resource_marginal_needs_stability():
    with pytest.raises(InstabilityError):
        resource_marginals([1], [1.0])


def test_total_count_examples():
    P1 = ResourcePolytope([[1.0]], [1.0])
    assert total_count_distribution(0, [0.5], P1) == pytest.approx(0.5)
    assert total_count_distribution(2, [0.5], P1) == pytest.approx(0.125)
    P2 = ResourcePolytope([[1.0, 0.0], [0.0, 1.0]], [1.0, 1.0])
    assert total_count_distribution(1, [0.5, 0.25], P2) == pytest.approx(0.28125)


@pytest.mark.parametrize("L", range(6))
def test_total_count_convolution_matches_enumeration(L):
    lam = [0.1, 0.2, 0.15, 0.25]
    P = iq_switch(2).polytope
    assert total_count_by_enumeration(L, lam, P) == pytest.approx(total_count_distribution(L, lam, P), rel=1e-10)


@pytest.mark.parametrize("levels", [(0, 0), (1, 0), (2, 1), (3, 3)])
def test_resource_levels_match_geometric_product(levels):
    lam = [0.3, 0.2]
    rho = TWO_BY_TWO.resource_loads(lam)
    assert resource_levels_by_enumeration(levels, lam, TWO_BY_TWO) == pytest.approx(
        resource_marginals(levels, rho), rel=1e-10)


# ---------------------------------------------------------------- workload and exponents
def test_mean_workload_examples():
    assert mean_workload([0.0]) == 0.0
    assert mean_workload([0.5]) == pytest.approx(0.5)
    assert mean_workload([0.5, 0.25]) == pytest.approx(2 / 3)


def test_mean_workload_is_half_mean_count():
    lam = [0.2, 0.3]
    mean_count = sum(
        (a + b) * stationary_pi((a, b), lam, SHARED) for a in range(80) for b in range(80 - a)
    )
    assert mean_workload(SHARED.resource_loads(lam)) == pytest.approx(0.5 * mean_count, rel=1e-8)


@pytest.mark.parametrize("rho, approx", [(0.5, 1.2564), (0.9, 0.207)])
def test_tail_exponent_examples(rho, approx):
    theta = tail_exponent(rho)
    assert abs(rho * math.expm1(theta) - theta) < 1e-10
    assert theta == pytest.approx(theta_oracle(rho), abs=1e-9)
    assert theta == pytest.approx(approx, abs=5e-4)


def test_tail_exponent_decreases_to_zero():
    values = [tail_exponent(r) for r in np.linspace(0.05, 0.999, 40)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert tail_exponent(0.999) < tail_exponent(0.99) < tail_exponent(0.9) < 0.21


@pytest.mark.parametrize("rho", [0.0, 1.0, 1.5])
def test_tail_exponent_domain(rho):
    with pytest.raises(DomainError):
        tail_exponent(rho)


def test_lower_bound_exponents_on_uniform_switch_equal_theta_star():
    thetas, low = lower_bound_exponents([0.35] * 4, iq_switch(2).polytope)
    assert low == pytest.approx(tail_exponent(0.7), abs=1e-9)
    np.testing.assert_allclose(thetas, low, atol=1e-9)


def test_lower_bound_exponent_single_resource():
    _, low = lower_bound_exponents([0.5], SINGLE)
    assert low == pytest.approx(1.2564, abs=5e-4)


def test_lower_bound_exponent_grows_at_vanishing_load():
    _, low = lower_bound_exponents([1e-4], SINGLE)
    assert low > 10


def test_md1_bound_examples():
    assert md1_lower_bound(3, 0.9) == pytest.approx(13.5)
    assert md1_lower_bound(1, 0.5) == pytest.approx(0.5)
    assert md1_lower_bound(2, 0.0) == 0.0
    with pytest.raises(DomainError):
        md1_lower_bound(2, 1.0)


def test_analytic_report_rows():
    rows = analytic_report([0.4] * 4, iq_switch(2).polytope, k_max=2, uniform_ports=2)
    values = {(q, p): v for q, p, v in rows}
    assert values[("mean_queue_bound", "K=2;N=4")] == pytest.approx(20.0)
    assert values[("md1_lower_bound", "n=2;rho=0.8")] == pytest.approx(4.0)
    text = report_csv(rows)
    assert text.splitlines()[0] == "quantity,parameters,value"
