import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats
from sklearn.base import clone

from robust2bsde import (
    BSDESolver,
    ControlPolicy,
    GeneratorSpec,
    Lattice,
    PreconditionError,
    RegressionBasis,
    StepDivergenceError,
    TimeGrid,
    affine_generator,
    call,
    constant_claim,
    linear_pricing_generator,
    simulate,
    solve_bsde,
    two_rate_generator,
    uncertain_volatility_family,
    verify_comparison,
    verify_stability,
    verify_tower,
    zero_generator,
)
from robust2bsde.bsde_solver import picard_step
from robust2bsde.generators import constant_generator


def lognormal_call(x0, strike, sigma, T):
    """E[(X_T - K)^+] for driftless GBM by quadrature against the lognormal density."""
    s = sigma * math.sqrt(T)
    dens = stats.lognorm(s=s, scale=x0 * math.exp(-0.5 * s * s)).pdf
    val, _ = integrate.quad(lambda x: (x - strike) * dens(x), strike, np.inf, epsabs=1e-12,
                            epsrel=1e-12, limit=200)
    return val


# frozen from lognormal_call(100, 100, 0.2, 1)
BS_CALL_20 = 7.965567455405798


def test_frozen_oracle():
    assert abs(lognormal_call(100.0, 100.0, 0.2, 1.0) - BS_CALL_20) < 1e-9


@pytest.fixture(scope="module")
def fam():
    return uncertain_volatility_family([0.2])


@pytest.fixture(scope="module")
def lat(fam):
    return Lattice(fam, TimeGrid(1.0, 50), 100.0, nodes=801)


@pytest.fixture(scope="module")
def ens(fam):
    return simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 20), 20_000, 100.0, seed=5)


def test_constant_claim_is_fixed_point(lat, ens):
    sol = solve_bsde(lat, zero_generator(), constant_claim(5.0))
    assert np.all(sol.Y == 5.0) and np.all(sol.Z == 0.0)
    # least squares on a constant target is exact up to rounding
    sol = solve_bsde(ens, zero_generator(), constant_claim(5.0))
    np.testing.assert_allclose(sol.Y, 5.0, rtol=1e-11)
    np.testing.assert_allclose(sol.Z, 0.0, atol=1e-11)


@pytest.mark.parametrize("N", [25, 50, 100])
def test_linear_discounting_tree(fam, N):
    lat = Lattice(fam, TimeGrid(1.0, N), 100.0, nodes=101)
    y = solve_bsde(lat, linear_pricing_generator(0.05), constant_claim(1.0)).y0
    assert abs(y - (1 + 0.05 / N) ** -N) < 1e-13
    assert abs(y - math.exp(-0.05)) < 2e-3
    # the other sign of the driver grows the value
    y = solve_bsde(lat, affine_generator(-0.05), constant_claim(1.0)).y0
    assert abs(y - math.exp(0.05)) < 2e-3


def test_gbm_call_path_matches_black_scholes(fam):
    M = 200_000
    e = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 50), M, 100.0, seed=11)
    sol = solve_bsde(e, zero_generator(), call(100.0))
    assert abs(sol.y0 - BS_CALL_20) <= 3 * sol.stderr0


def test_terminal_exactness(lat, ens):
    for source, xT in ((lat, lat.x), (ens, ens.X[:, -1])):
        sol = solve_bsde(source, linear_pricing_generator(0.03), call(100.0))
        assert sol.Y[:, -1].tobytes() == call(100.0)(xT).tobytes()


def test_picard_iteration_bound(lat):
    gen = two_rate_generator(0.5, 3.0)
    tol = 1e-12
    sol = solve_bsde(lat, gen, call(100.0), picard_tol=tol)
    Ldt = gen.lipschitz * lat.grid.dt
    assert Ldt < 0.5
    assert sol.picard_iters.max() <= math.ceil(math.log(tol) / math.log(Ldt)) + 2


def test_picard_divergence():
    gen = affine_generator(-300.0)
    with pytest.raises(StepDivergenceError) as exc:
        picard_step(gen, 0.0, np.zeros((3, 1)), np.ones(3), np.zeros((3, 1)),
                    np.ones((3, 1, 1)), np.zeros((3, 1)), 0.01, 7)
    assert exc.value.step == 7
    assert exc.value.lipschitz_dt == pytest.approx(3.0)


def test_zero_generator_is_plain_regression(ens):
    basis = RegressionBasis()
    sol = solve_bsde(ens, zero_generator(), call(100.0), basis)
    y = call(100.0)(ens.X[:, -1])
    for k in reversed(range(ens.grid.steps)):
        y = basis.make().fit(ens.X[:, k], y).predict(ens.X[:, k])
    assert np.max(np.abs(sol.Y[:, 0] - y)) <= 1e-12


def test_z_covariation_identity(lat):
    sol = solve_bsde(lat, linear_pricing_generator(0.02), call(100.0))
    sq = math.sqrt(lat.grid.dt)
    for k in (0, 10, 49):
        up, dn = lat.children_values(k, 0, sol.Y[:, k + 1])
        sig = lat.transition(k, 0).sigma
        covariation = 0.5 * (up - dn) * sig * sq
        np.testing.assert_allclose(sig ** 2 * sol.Z[:, k, 0] * lat.grid.dt, covariation,
                                   atol=1e-10)


def test_clipping_consistency(lat):
    a = solve_bsde(lat, linear_pricing_generator(0.03), call(100.0))
    b = solve_bsde(lat, linear_pricing_generator(0.03), call(100.0), clip_m=1e9)
    assert a.Y.tobytes() == b.Y.tobytes()
    c = solve_bsde(lat, zero_generator(), call(100.0), clip_m=10.0)
    assert c.Y.max() <= 10.0


def test_degenerate_volatility_gives_zero_z():
    fam = uncertain_volatility_family([0.0])
    lat = Lattice(fam, TimeGrid(1.0, 10), 100.0, nodes=51)
    sol = solve_bsde(lat, zero_generator(), call(90.0))
    assert np.all(sol.Z == 0.0)
    assert sol.y0 == pytest.approx(10.0)


def test_tower_tree(lat):
    gen = two_rate_generator(0.01, 0.05)
    rep = verify_tower(solve_bsde(lat, gen, call(100.0)), gen, lat, 25)
    assert rep.passed and rep.value <= 1e-10
    rep = verify_tower(solve_bsde(lat, zero_generator(), constant_claim(2.0)), zero_generator(),
                       lat, 10)
    assert rep.value == 0.0


def test_tower_path_within_tolerance(fam):
    gen = linear_pricing_generator(0.02)
    deltas, tols = [], []
    for M in (10_000, 100_000):
        e = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 20), M, 100.0, seed=21)
        rep = verify_tower(solve_bsde(e, gen, call(100.0)), gen, e, 10, fresh_seed=22)
        assert rep.passed, rep
        deltas.append(rep.value)
        tols.append(rep.tolerance)
    assert tols[1] < tols[0]


def test_comparison_shift_and_bump(lat):
    rep = verify_comparison(zero_generator(), call(100.0).shifted(1.0), zero_generator(),
                            call(100.0), lat)
    assert rep.passed
    assert rep.value == pytest.approx(1.0, abs=1e-12)
    rep = verify_comparison(constant_generator(0.0), call(100.0), constant_generator(0.01),
                            call(100.0), lat)
    assert rep.passed
    assert rep.value == pytest.approx(0.01 * lat.grid.horizon, abs=1e-12)


def test_comparison_rejects_unordered_data(lat):
    with pytest.raises(PreconditionError):
        verify_comparison(zero_generator(), call(100.0), zero_generator(), call(90.0), lat)
    with pytest.raises(PreconditionError):
        verify_comparison(constant_generator(0.1), call(100.0), zero_generator(), call(100.0), lat)


@given(st.floats(0.0, 1.0), st.floats(0.0, 0.3), st.floats(-0.05, 0.05), st.floats(80, 120))
def test_comparison_property(bump, shift, slope, strike):
    fam = uncertain_volatility_family([0.25])
    lat = Lattice(fam, TimeGrid(1.0, 10), 100.0, nodes=201)
    high = affine_generator(slope, 0.0, 0.0)
    low = affine_generator(slope, 0.0, -shift)
    rep = verify_comparison(low, call(strike).shifted(bump), high, call(strike), lat)
    assert rep.passed
    assert rep.details["min_pointwise"] >= -1e-10


def test_comparison_path(ens):
    rep = verify_comparison(affine_generator(0.02, 0.0, -0.1), call(100.0).shifted(0.5),
                            linear_pricing_generator(0.02), call(100.0), ens)
    assert rep.passed


def test_stability(lat):
    zero = verify_stability(linear_pricing_generator(0.03), call(100.0), lambda x: 0 * x[:, 0], lat)
    assert zero.details["sup_diff"] == [0.0, 0.0, 0.0]
    shift = verify_stability(zero_generator(), call(100.0), lambda x: np.ones(len(x)), lat)
    np.testing.assert_allclose(shift.details["sup_diff"], [0.1, 0.01, 0.001], rtol=0, atol=1e-10)
    rep = verify_stability(linear_pricing_generator(0.03), call(100.0), lambda x: x[:, 0], lat)
    assert rep.passed
    assert rep.details["linear_within_10pct"] and rep.details["ratio_flat_within_1.5"]


@given(st.floats(-3, 3), st.floats(80, 120), st.floats(80, 120))
def test_zero_driver_is_linear_in_claim(alpha, k1, k2):
    fam = uncertain_volatility_family([0.2])
    lat = Lattice(fam, TimeGrid(1.0, 10), 100.0, nodes=201)
    combo = GeneratorSpec  # keep the generator fixed: f = 0
    del combo
    y1 = solve_bsde(lat, zero_generator(), call(k1)).Y
    y2 = solve_bsde(lat, zero_generator(), call(k2)).Y
    from robust2bsde import TerminalClaim
    c = TerminalClaim(lambda x: alpha * call(k1)(x) + call(k2)(x), "combo")
    y = solve_bsde(lat, zero_generator(), c).Y
    np.testing.assert_allclose(y, alpha * y1 + y2, atol=1e-10 * (1 + abs(alpha)) * 100)


def test_estimator_api(lat):
    est = BSDESolver(linear_pricing_generator(0.05), constant_claim(1.0))
    assert set(clone(est).get_params()) == {"generator", "claim", "basis", "picard_tol", "clip_m"}
    est.fit(lat)
    assert est.predict([100.0, 120.0]) == pytest.approx([est.y0_] * 2)
    assert est.predict([100.0], k=50)[0] == pytest.approx(1.0)


def test_outputs(tmp_path, lat, ens):
    sol = solve_bsde(lat, zero_generator(), call(100.0))
    sol.to_csv(tmp_path / "s.csv", stride=25)
    sol.write_diagnostics(tmp_path / "d.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "k,bucket,state,V,ustar,Z"
    assert len(rows) == 1 + 3 * lat.size
    assert (tmp_path / "d.csv").read_text().startswith("step,picard_iters,residual,y_mean,y_stderr")
    psol = solve_bsde(ens, zero_generator(), call(100.0))
    psol.to_csv(tmp_path / "p.csv", stride=10)
    prow = (tmp_path / "p.csv").read_text().splitlines()
    assert prow[1].split(",")[2] == "100.0"
