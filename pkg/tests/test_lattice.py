import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robust2bsde import InvalidParametersError, Lattice, TimeGrid, uncertain_volatility_family


@pytest.fixture(scope="module")
def lat():
    return Lattice(uncertain_volatility_family([0.1, 0.3], rate=0.02), TimeGrid(1.0, 20), 100.0,
                   nodes=201)


def test_layout(lat):
    assert lat.size == 201
    assert lat.x[lat.center, 0] == 100.0
    assert np.all(np.diff(lat.x[:, 0]) > 0)
    np.testing.assert_allclose(np.diff(np.log(lat.x[:, 0])), lat.h, rtol=1e-9)


def test_even_node_count_is_made_odd():
    lat = Lattice(uncertain_volatility_family([0.2]), TimeGrid(1.0, 4), 100.0, nodes=100)
    assert lat.size == 101


def test_rejects_bad_input():
    with pytest.raises(InvalidParametersError):
        Lattice(uncertain_volatility_family([0.2]), TimeGrid(1.0, 4), -1.0)
    with pytest.raises(InvalidParametersError):
        Lattice(uncertain_volatility_family([0.2]), TimeGrid(1.0, 4), 1.0, nodes=2)


def test_interpolation_is_linear_in_state(lat):
    xs = np.linspace(lat.x[0, 0] * 0.5, lat.x[-1, 0] * 1.5, 1000)
    vals = 3.0 - 0.5 * lat.x[:, 0]
    np.testing.assert_allclose(lat.interpolate(vals, xs), 3.0 - 0.5 * xs, rtol=1e-12, atol=1e-9)
    held = lat.interpolate(vals, xs, extend=False)
    np.testing.assert_allclose(held[xs > lat.x[-1, 0]], vals[-1])
    np.testing.assert_allclose(held[xs < lat.x[0, 0]], vals[0])


def test_nearest(lat):
    np.testing.assert_array_equal(lat.nearest(lat.x[:, 0]), np.arange(lat.size))
    assert lat.nearest([1e-9])[0] == 0
    assert lat.nearest([1e9])[0] == lat.size - 1


def test_children_mean_is_euler_drift(lat):
    # the identity is reproduced exactly by state-linear interpolation
    for u in (0, 1):
        mean, cov, a, b = lat.moments(3, u, lat.x[:, 0])
        np.testing.assert_allclose(mean, lat.x[:, 0] * (1 + 0.02 * lat.grid.dt), rtol=1e-12)
        np.testing.assert_allclose(cov, a, rtol=1e-10)


@given(st.integers(0, 1), st.integers(0, 19))
def test_expectation_is_convex_combination_inside(u, k):
    lat = Lattice(uncertain_volatility_family([0.1, 0.3]), TimeGrid(1.0, 20), 100.0, nodes=201)
    tr = lat.transition(k, u)
    inside = (tr.w_up >= 0) & (tr.w_up <= 1) & (tr.w_dn >= 0) & (tr.w_dn <= 1)
    # only children that leave the grid carry extrapolation weights
    assert inside[20:-20].all()


def test_truncate_shares_nodes(lat):
    short = lat.truncate(10)
    assert short.grid == TimeGrid(0.5, 10)
    np.testing.assert_array_equal(short.x, lat.x)


def test_expect_under_constant_matches_repeated_expectation(lat):
    from robust2bsde import ControlPolicy
    vals = np.maximum(lat.x[:, 0] - 100, 0)
    v = vals
    for k in reversed(range(lat.grid.steps)):
        v = lat.expectation(k, 1, v)
    np.testing.assert_allclose(lat.expect_under(ControlPolicy.constant(1), vals), v, rtol=1e-12)


def test_node_bucket_policy(lat):
    table = np.tile(np.arange(lat.size) % 2, (lat.grid.steps, 1))
    pol = lat.node_bucket_policy(table)
    np.testing.assert_array_equal(pol.lookup(0, lat.x), table[0])
