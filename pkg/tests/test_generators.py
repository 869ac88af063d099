import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robust2bsde import (
    CLAIMS,
    GENERATORS,
    InvalidParametersError,
    affine_generator,
    butterfly,
    call,
    constant_claim,
    linear_pricing_generator,
    put,
    risk_premium,
    two_rate_generator,
    uncertain_volatility_family,
    zero_generator,
)
from robust2bsde.generators import (
    asset,
    check_lipschitz,
    check_moment,
    constant_generator,
    family_sampler,
    linear_claim,
    random_tuples,
    sqrt_pseudoinverse,
)


def _tuple(n=5, d=1, seed=0):
    rng = np.random.default_rng(seed)
    t, x, a, b = random_tuples(rng, n, d)
    return t, x, rng.normal(size=n), rng.normal(size=(n, d)), a, b


def test_zero_linear_generator_is_zero():
    t, x, y, z, a, b = _tuple()
    np.testing.assert_array_equal(linear_pricing_generator(0.0)(t, x, y, z, a, b), 0.0)
    np.testing.assert_array_equal(zero_generator()(t, x, y, z, a, b), 0.0)


def test_linear_generator_value():
    t, x, _, z, a, b = _tuple()
    y = np.full(5, 2.0)
    np.testing.assert_allclose(linear_pricing_generator(0.05)(t, x, y, z, a, b), 0.1)


def test_risk_premium_value():
    theta = risk_premium(0.02)
    out = theta(0.0, np.ones((1, 1)), np.full((1, 1, 1), 0.04), np.full((1, 1), 0.07))
    np.testing.assert_allclose(out, [[0.25]])


def test_risk_premium_state_reference_and_degenerate_a():
    theta = risk_premium(0.02, "state")
    x = np.array([[100.0]])
    out = theta(0.0, x, np.full((1, 1, 1), (0.2 * 100) ** 2), np.zeros((1, 1)))
    np.testing.assert_allclose(out, [[-0.1]])
    assert theta(0.0, x, np.zeros((1, 1, 1)), np.ones((1, 1)))[0, 0] == 0.0
    with pytest.raises(InvalidParametersError):
        risk_premium(0.02, "percent")


def test_linear_generator_with_premium_needs_bound():
    with pytest.raises(InvalidParametersError):
        linear_pricing_generator(0.01, risk_premium(0.01))
    with pytest.raises(InvalidParametersError):
        linear_pricing_generator(float("nan"))


def test_two_rate_examples():
    t, x, a, b = 0.0, np.ones((1, 1)), np.full((1, 1, 1), 0.04), np.zeros((1, 1))
    g = two_rate_generator(0.02, 0.05)
    np.testing.assert_allclose(g(t, x, np.array([1.0]), np.array([[2.0]]), a, b), -0.01)
    np.testing.assert_allclose(g(t, x, np.array([3.0]), np.array([[1.0]]), a, b), 0.06)
    with pytest.raises(InvalidParametersError):
        two_rate_generator(0.05, 0.02)


def test_two_rate_collapse():
    t, x, y, z, a, b = _tuple(n=1000)
    np.testing.assert_array_equal(two_rate_generator(0.03, 0.03)(t, x, y, z, a, b),
                                  linear_pricing_generator(0.03)(t, x, y, z, a, b))


@given(st.floats(0.0, 0.1), st.floats(0.0, 0.1), st.integers(0, 10_000))
def test_two_rate_midpoint_concavity(r_lend, spread, seed):
    g = two_rate_generator(r_lend, r_lend + spread, dim=2)
    t, x, y1, z1, a, b = _tuple(200, 2, seed)
    _, _, y2, z2, _, _ = _tuple(200, 2, seed + 1)
    mid = g(t, x, 0.5 * (y1 + y2), 0.5 * (z1 + z2), a, b)
    avg = 0.5 * (g(t, x, y1, z1, a, b) + g(t, x, y2, z2, a, b))
    assert np.all(mid >= avg - 1e-12)


@pytest.mark.parametrize("gen", [
    zero_generator(),
    constant_generator(0.3),
    affine_generator(0.05, [0.1], 0.2),
    linear_pricing_generator(0.03),
    two_rate_generator(0.01, 0.04),
])
def test_shipped_generators_pass_lipschitz_check(gen):
    assert check_lipschitz(gen) <= 1.0 + 1e-9


def test_premium_generators_lipschitz_on_family_support():
    fam = uncertain_volatility_family([0.2])
    theta = risk_premium(0.02, "state")
    sampler = family_sampler(fam, 50.0, 200.0)
    assert check_lipschitz(linear_pricing_generator(0.02, theta, 0.1), sampler=sampler) <= 1 + 1e-9
    assert check_lipschitz(two_rate_generator(0.02, 0.05, theta, 0.1), sampler=sampler) <= 1 + 1e-9


def test_lipschitz_check_catches_understated_constant():
    from robust2bsde import GeneratorSpec
    bad = GeneratorSpec(lambda t, x, y, z, a, b: 2.0 * y, 1.0, 0.0, "bad")
    with pytest.raises(InvalidParametersError):
        check_lipschitz(bad)


def test_intercept():
    g = affine_generator(0.5, [1.0], lambda t, x: x[:, 0] ** 2)
    t, x, _, _, a, b = _tuple()
    np.testing.assert_allclose(g.intercept(t, x, a, b), x[:, 0] ** 2)


def test_sqrt_pseudoinverse():
    a = np.array([np.diag([4.0, 0.0])])
    np.testing.assert_allclose(sqrt_pseudoinverse(a)[0], np.diag([0.5, 0.0]))


def test_claims():
    x = np.array([80.0, 95.0, 100.0, 105.0, 120.0])
    np.testing.assert_allclose(call(100)(x), [0, 0, 0, 5, 20])
    np.testing.assert_allclose(put(100)(x), [20, 5, 0, 0, 0])
    np.testing.assert_allclose(butterfly(90, 100, 110)(x), [0, 5, 10, 5, 0])
    np.testing.assert_allclose(constant_claim(3.0)(x), 3.0)
    np.testing.assert_allclose(asset()(x), x)
    np.testing.assert_allclose(linear_claim(1.0, 2.0)(x), 1 + 2 * x)
    np.testing.assert_allclose(call(100).scaled(2.0)(x), 2 * call(100)(x))
    np.testing.assert_allclose(call(100).shifted(1.0)(x), call(100)(x) + 1)
    with pytest.raises(InvalidParametersError):
        butterfly(100, 90, 110)


def test_registries():
    assert {"zero", "linear", "two_rate"} <= set(GENERATORS)
    assert {"call", "put", "butterfly", "constant"} <= set(CLAIMS)


def test_check_moment():
    rng = np.random.default_rng(0)
    samples = rng.normal(size=(20_000, 1))
    assert abs(check_moment(linear_claim(0.0, 1.0), samples) - 1.0) < 0.05
    with pytest.raises(InvalidParametersError):
        check_moment(linear_claim(0.0, 1.0), np.array([[1e200]]), p=4)
