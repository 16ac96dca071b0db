import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from dpabc.mechanisms import (
    BudgetMismatchError,
    DegenerateSensitivityError,
    IncompleteProfileError,
    MechanismError,
    PrivacyBudget,
    SensitivityProfile,
    ShapeError,
    UnverifiableSensitivityError,
    AdditiveMechanism,
    gaussian_bandwidth,
    gaussian_kernel,
    laplace_kernel,
    make_epsilon_laplace,
    make_gaussian,
    make_smooth_laplace,
    mechanism_from_descriptor,
    perturb,
    smooth_sensitivity,
    smoothing_rate,
    verify_dp_bound,
)
from dpabc.rngkit import RngStream

COUNT = SensitivityProfile.counting_query()


# budgets and sensitivity

@pytest.mark.parametrize("eps,delta", [(0, 0), (-1, 0), (1, -0.1), (1, 1.0), (math.inf, 0)])
def test_budget_validation(eps, delta):
    with pytest.raises(MechanismError):
        PrivacyBudget(eps, delta)


@pytest.mark.parametrize("xi", [0.01, 1.0, 7.0])
def test_smooth_counting_query(xi):
    value, valid = smooth_sensitivity(COUNT, xi, 50)
    assert value == 1.0 and valid


def test_smooth_constant_query():
    prof = SensitivityProfile(global_=0.0, radius_max=lambda k: 0.0)
    assert smooth_sensitivity(prof, 0.5, 20)[0] == 0.0


def test_smooth_enumeration():
    prof = SensitivityProfile.from_sequence([2, 5, 1], global_=5.0)
    value, _ = smooth_sensitivity(prof, math.log(2), 2)
    assert value == pytest.approx(2.5, rel=1e-15)


def test_smooth_incomplete_profile():
    prof = SensitivityProfile.from_sequence([2, 5, 1])
    with pytest.raises(IncompleteProfileError):
        smooth_sensitivity(prof, 0.1, 10)
    with pytest.raises(IncompleteProfileError):
        smooth_sensitivity(SensitivityProfile(global_=1.0), 0.1, 3)


def test_smooth_truncation_flag():
    growing = SensitivityProfile(global_=1e6, radius_max=lambda k: float(k + 1))
    assert smooth_sensitivity(growing, 0.01, 5)[1] is False
    unknown_global = SensitivityProfile(radius_max=lambda k: 1.0)
    assert smooth_sensitivity(unknown_global, 1.0, 5)[1] is False


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=12), st.floats(0.01, 5))
def test_smooth_dominates_local(values, xi):
    prof = SensitivityProfile.from_sequence(values)
    value, _ = smooth_sensitivity(prof, xi, len(values) - 1)
    assert value >= values[0]
    assert value <= max(values)


# builders

def test_eps_laplace_count_setting():
    m = make_epsilon_laplace(PrivacyBudget(0.2), 1.0)
    assert m.bandwidth == pytest.approx(5.0, rel=1e-15)
    assert m.kernel.mode_density == 0.5


def test_eps_laplace_unit():
    assert make_epsilon_laplace(PrivacyBudget(1.0), 1.0).bandwidth == 1.0


def test_eps_laplace_multivariate():
    m = make_epsilon_laplace(PrivacyBudget(0.5), 2.0, p=3)
    assert m.bandwidth == 4.0
    assert m.kernel.mode_density == 0.125


def test_eps_laplace_rejects_delta():
    with pytest.raises(BudgetMismatchError):
        make_epsilon_laplace(PrivacyBudget(1.0, 0.01), 1.0)


def test_eps_laplace_rejects_zero_gs():
    with pytest.raises(DegenerateSensitivityError):
        make_epsilon_laplace(PrivacyBudget(1.0), 0.0)


def test_smooth_laplace_counting():
    b = PrivacyBudget(1.0, 0.01)
    assert smoothing_rate(b, 1) == pytest.approx(1.0 / (4.0 * (1.0 + math.log(200.0))), rel=1e-15)
    m = make_smooth_laplace(b, COUNT)
    assert m.bandwidth == 1.0


def test_smooth_laplace_constant_query():
    prof = SensitivityProfile(global_=0.0, radius_max=lambda k: 0.0)
    with pytest.raises(DegenerateSensitivityError):
        make_smooth_laplace(PrivacyBudget(1.0, 0.01), prof)


def test_smooth_laplace_composes_with_oracle():
    b = PrivacyBudget(1.0, 0.1)
    prof = SensitivityProfile.from_sequence([2, 5, 1], global_=5.0)
    xi = smoothing_rate(b, 1)
    expected = max(2.0, 5.0 * math.exp(-xi), math.exp(-2 * xi))
    m = make_smooth_laplace(b, prof, k_max=2)
    assert m.bandwidth == pytest.approx(expected, rel=1e-14)


def test_smooth_laplace_unverifiable():
    prof = SensitivityProfile(global_=100.0, radius_max=lambda k: 1.0)
    with pytest.raises(UnverifiableSensitivityError):
        make_smooth_laplace(PrivacyBudget(1.0, 0.01), prof, k_max=2)


def test_smooth_needs_delta():
    with pytest.raises(BudgetMismatchError):
        make_smooth_laplace(PrivacyBudget(1.0), COUNT)
    with pytest.raises(BudgetMismatchError):
        make_gaussian(PrivacyBudget(1.0), COUNT)


def test_gaussian_counting():
    m = make_gaussian(PrivacyBudget(1.0, 0.01), COUNT)
    assert m.bandwidth == pytest.approx(5.0 * math.sqrt(2.0 * math.log(200.0)), rel=1e-15)
    assert m.bandwidth == pytest.approx(16.28, abs=0.005)
    assert m.kernel.mode_density == pytest.approx((2 * math.pi) ** -0.5)


def test_gaussian_delta_limit():
    h = gaussian_bandwidth(PrivacyBudget(2.0, 1 - 1e-12), 3.0)
    assert h == pytest.approx(5.0 * math.sqrt(2.0 * math.log(2.0)) * 3.0 / 2.0, rel=1e-10)


def test_gaussian_linear_in_ss():
    b = PrivacyBudget(0.7, 0.05)
    assert gaussian_bandwidth(b, 2.4) == pytest.approx(2 * gaussian_bandwidth(b, 1.2), rel=1e-15)


def test_zero_bandwidth_rejected():
    with pytest.raises(DegenerateSensitivityError):
        AdditiveMechanism(laplace_kernel(1), 0.0, PrivacyBudget(1.0), "laplace-eps")


# perturbation

def test_perturb_moments():
    m = make_epsilon_laplace(PrivacyBudget(0.2), 1.0)
    s = np.full((10**6, 1), 37.0)
    out = perturb(m, s, RngStream(3))[:, 0]
    assert abs(out.mean() - 37.0) < 0.05
    assert abs(out.var() - 50.0) < 0.5


def test_perturb_single_and_shape_error():
    m = make_epsilon_laplace(PrivacyBudget(1.0), 1.0, p=2)
    assert perturb(m, np.array([1.0, 2.0]), RngStream(1)).shape == (2,)
    with pytest.raises(ShapeError):
        perturb(m, np.array([1.0, 2.0, 3.0]), RngStream(1))


def test_perturb_gaussian_moments():
    m = make_gaussian(PrivacyBudget(1.0, 0.01), COUNT)
    out = perturb(m, np.zeros((10**6, 1)), RngStream(4))[:, 0]
    h = m.bandwidth
    assert abs(out.mean()) < 5 * h / 1000
    assert abs(out.var() / h**2 - 1.0) < 5 * math.sqrt(2.0 / 10**6)


# kernels and densities

@pytest.mark.parametrize("kernel", [laplace_kernel(1), gaussian_kernel(1)])
def test_kernel_normalized(kernel):
    total, _ = integrate.quad(lambda u: kernel.density(np.array([[u]]))[0], -60, 60, points=[0.0], limit=200)
    assert total == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_kernel_mode_dominates(u):
    for kernel in (laplace_kernel(3), gaussian_kernel(3)):
        assert kernel.density(np.array(u)) <= kernel.mode_density * (1 + 1e-15)


def test_obs_density_proper():
    m = make_epsilon_laplace(PrivacyBudget(0.2), 1.0)
    f = lambda x: math.exp(m.log_obs_density([x], np.array([[37.0]]))[0])
    total, _ = integrate.quad(f, -400, 500, points=[37.0], limit=200)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_general_view_unnormalized():
    m = make_epsilon_laplace(PrivacyBudget(0.2), 1.0)
    g = m.as_general()
    assert g.conditional_density(np.array([37.4]), np.array([[37.4]]))[0] == 0.5
    assert g.density_bound == 0.5


# descriptors

@pytest.mark.parametrize(
    "mech",
    [
        make_epsilon_laplace(PrivacyBudget(0.2), 1.0),
        make_epsilon_laplace(PrivacyBudget(0.5), 2.0, p=3),
        make_smooth_laplace(PrivacyBudget(1.0, 0.1), SensitivityProfile.from_sequence([2, 5, 1], 5.0), k_max=2),
        make_gaussian(PrivacyBudget(1.0, 0.01), COUNT, p=2),
    ],
)
def test_descriptor_round_trip(mech):
    d = json.loads(json.dumps(mech.descriptor()))
    assert set(d) == {"kind", "epsilon", "delta", "gs", "p"}
    back = mechanism_from_descriptor(d)
    assert back.bandwidth == mech.bandwidth
    assert back.kernel.name == mech.kernel.name
    assert back.dimension == mech.dimension


@pytest.mark.parametrize(
    "d",
    [
        {"kind": "laplace-eps", "epsilon": 1.0},
        {"kind": "cauchy", "epsilon": 1.0, "delta": 0.1, "gs": 1.0, "p": 1},
        {"kind": "gaussian", "epsilon": 1.0, "delta": 0.0, "gs": 1.0, "p": 1},
    ],
)
def test_descriptor_errors(d):
    with pytest.raises(MechanismError):
        mechanism_from_descriptor(d)


# DP bound

def _grid(m, gs):
    h = m.bandwidth
    return np.linspace(-3 * h, gs + 3 * h, 601)


def test_dp_bound_count_setting():
    m = make_epsilon_laplace(PrivacyBudget(0.2), 1.0)
    res = verify_dp_bound(m, 1.0, _grid(m, 1.0))
    assert res.passed
    assert res.max_ratio == pytest.approx(math.exp(0.2), abs=1e-12)


def test_dp_bound_identical_measures():
    m = make_epsilon_laplace(PrivacyBudget(0.2), 1.0)
    assert verify_dp_bound(m, 0.0, _grid(m, 0.0)).max_ratio == 1.0


def test_dp_bound_gaussian_fails():
    b = PrivacyBudget(1.0)
    gauss = AdditiveMechanism(gaussian_kernel(1), 1.0, b, "gaussian")
    res = verify_dp_bound(gauss, 1.0, np.linspace(-20, 20, 401))
    assert not res.passed and res.max_ratio > math.exp(1.0)


def test_dp_bound_needs_univariate():
    m = make_epsilon_laplace(PrivacyBudget(1.0), 1.0, p=2)
    with pytest.raises(ShapeError):
        verify_dp_bound(m, 1.0, np.linspace(-1, 1, 5))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.1, 10.0))
def test_dp_bound_holds(eps, gs):
    m = make_epsilon_laplace(PrivacyBudget(eps), gs)
    assert verify_dp_bound(m, gs, _grid(m, gs)).passed
