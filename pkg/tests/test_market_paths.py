import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robust2bsde import (
    ControlPolicy,
    ControlSet,
    DiffusionFamily,
    InvalidMatrixError,
    InvalidParametersError,
    SimulationDivergedError,
    TimeGrid,
    simulate,
    uncertain_volatility_family,
)
from robust2bsde.market_paths import (
    BLOCK_SIZE,
    check_family_lipschitz,
    pseudoinverse_sqrt,
    random_feedback_policies,
)
from robust2bsde.validation import check_psd


def test_time_grid():
    g = TimeGrid(2.0, 4)
    assert g.dt == 0.5
    np.testing.assert_allclose(g.nodes, [0, 0.5, 1, 1.5, 2])
    assert g.truncate(2) == TimeGrid(1.0, 2)
    with pytest.raises(ValueError):
        g.truncate(0)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_control_set_rejects_empty_and_duplicates():
    with pytest.raises(InvalidParametersError):
        ControlSet([])
    with pytest.raises(InvalidParametersError):
        ControlSet([0.1, 0.1])
    with pytest.raises(InvalidParametersError):
        ControlSet([0.1, 0.2], labels=["a"])
    assert ControlSet([0.1, 0.2]).subset([1]).labels == ["0.2"]


def test_uvm_family_labels_and_negative_sigma():
    fam = uncertain_volatility_family([0.1, 0.3])
    assert fam.control_set.labels == ["sigma=0.1", "sigma=0.3"]
    assert fam.state_domain == "positive"
    with pytest.raises(InvalidParametersError):
        uncertain_volatility_family([-0.1])
    assert check_family_lipschitz(fam) <= fam.lipschitz_L


def test_policy_validation():
    fam = uncertain_volatility_family([0.1, 0.2])
    with pytest.raises(InvalidParametersError):
        ControlPolicy.constant(2).validate(fam.control_set)
    with pytest.raises(InvalidParametersError):
        ControlPolicy.from_table(np.zeros((3, 2)), [1.0, 2.0])
    with pytest.raises(InvalidParametersError):
        ControlPolicy.from_table(np.zeros((3, 3)), [2.0, 1.0])
    short = ControlPolicy.from_table(np.zeros((2, 2)), [100.0])
    with pytest.raises(InvalidParametersError):
        short.validate(fam.control_set, steps=5)
    with pytest.raises(InvalidParametersError):
        ControlPolicy("unknown")


def test_table_policy_lookup():
    pol = ControlPolicy.from_table(np.array([[0, 1, 2]]), [90.0, 110.0])
    np.testing.assert_array_equal(pol.lookup(0, np.array([80.0, 90.0, 100.0, 110.0, 120.0])),
                                  [0, 1, 1, 2, 2])


def test_degenerate_diffusion_stays_put():
    fam = uncertain_volatility_family([0.0], geometric=False)
    ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 10), 50, 1.0, seed=1)
    assert np.all(ens.X == 1.0)
    assert np.all(ens.a_hat == 0.0)


def test_driftless_geometric_mean():
    fam = uncertain_volatility_family([0.2])
    M = 100_000
    ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 50), M, 1.0, seed=2)
    xT = ens.X[:, -1, 0]
    se = xT.std(ddof=1) / np.sqrt(M)
    assert abs(xT.mean() - 1.0) <= 3 * se


def test_arithmetic_variance():
    # exact law of X_T is N(0, 0.09 T); var of the sample variance is 2 s^4 / (M - 1)
    fam = uncertain_volatility_family([0.3], geometric=False)
    M, T = 50_000, 1.0
    ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(T, 20), M, 0.0, seed=3)
    var = ens.X[:, -1, 0].var(ddof=1)
    se = 0.09 * T * np.sqrt(2.0 / (M - 1))
    assert abs(var - 0.09 * T) <= 3 * se


def test_euler_weak_order_geometric_drift():
    # Euler mean is x0 (1 + r dt)^N, so the bias to x0 e^{rT} halves with N
    r, x0 = 0.5, 1.0
    fam = uncertain_volatility_family([0.2], rate=r)
    M = 100_000
    bias = []
    for N in (25, 50, 100):
        ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, N), M, x0, seed=4)
        xT = ens.X[:, -1, 0]
        se = xT.std(ddof=1) / np.sqrt(M)
        exact_bias = x0 * (np.exp(r) - (1 + r / N) ** N)
        assert abs(xT.mean() - x0 * np.exp(r)) <= exact_bias + 3 * se
        bias.append(exact_bias)
    assert bias[0] > bias[1] > bias[2]
    assert bias[0] <= 0.5 / 25


def test_determinism_across_threads_and_sizes():
    fam = uncertain_volatility_family([0.1, 0.3])
    pols = random_feedback_policies(fam.control_set, 10, [90.0, 100.0, 110.0], 1, seed=5)
    M = 2 * BLOCK_SIZE + 17
    a = simulate(fam, pols[0], TimeGrid(1.0, 10), M, 100.0, seed=9, n_jobs=1)
    b = simulate(fam, pols[0], TimeGrid(1.0, 10), M, 100.0, seed=9, n_jobs=3)
    for name in ("X", "dW", "a_hat", "drift_b", "controls"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    # path m does not depend on M
    c = simulate(fam, pols[0], TimeGrid(1.0, 10), 100, 100.0, seed=9)
    assert c.X.tobytes() == a.X[:100].tobytes()
    d = simulate(fam, pols[0], TimeGrid(1.0, 10), 100, 100.0, seed=10)
    assert not np.array_equal(c.X, d.X)


def test_rademacher_increments():
    fam = uncertain_volatility_family([0.2])
    ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 4), 1000, 100.0, seed=1,
                   increments="rademacher")
    np.testing.assert_allclose(np.abs(ens.dW), 0.5)
    with pytest.raises(InvalidParametersError):
        simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 4), 10, 100.0, 1, increments="x")


def test_simulation_divergence_reports_path():
    fam = DiffusionFamily(1, lambda t, x, u: x ** 4, lambda t, x, u: np.zeros((len(x), 1, 1)),
                          ControlSet([0.0]), 1.0)
    with pytest.raises(SimulationDivergedError) as exc, np.errstate(over="ignore"):
        simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 50), 3, 100.0, seed=0)
    assert exc.value.path == 0
    assert 0 < exc.value.step <= 50


def test_seed_validation():
    fam = uncertain_volatility_family([0.2])
    with pytest.raises(ValueError):
        simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 4), 10, 100.0, seed=-1)
    with pytest.raises(ValueError):
        simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 4), 10, 100.0, seed=1.5)


def test_a_hat_is_psd(uvm):
    pols = random_feedback_policies(uvm.control_set, 8, [95.0, 105.0], 2, seed=0)
    ens = simulate(uvm, pols[1], TimeGrid(1.0, 8), 500, 100.0, seed=0)
    check_psd(ens.a_hat)
    np.testing.assert_allclose(ens.a_hat[..., 0, 0],
                               (uvm.control_set.points[ens.controls, 0] * ens.X[:, :-1, 0]) ** 2)


def test_to_csv(tmp_path):
    fam = uncertain_volatility_family([0.2])
    ens = simulate(fam, ControlPolicy.constant(0), TimeGrid(1.0, 3), 2, 100.0, seed=0)
    path = tmp_path / "paths.csv"
    ens.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "path,step,x_0,dw_0"
    assert len(lines) == 1 + 2 * 4
    assert lines[4].endswith(",")


@pytest.mark.parametrize("a, half, pinv", [
    (np.eye(2), np.eye(2), np.eye(2)),
    (np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))),
    (np.diag([4.0, 0.0]), np.diag([2.0, 0.0]), np.diag([0.25, 0.0])),
])
def test_pseudoinverse_sqrt_examples(a, half, pinv):
    h, p = pseudoinverse_sqrt(a)
    np.testing.assert_allclose(h, half, atol=1e-14)
    np.testing.assert_allclose(p, pinv, atol=1e-14)


def test_pseudoinverse_sqrt_rejects_bad_input():
    with pytest.raises(InvalidMatrixError):
        pseudoinverse_sqrt(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(InvalidMatrixError):
        pseudoinverse_sqrt(np.diag([1.0, -1.0]))
    with pytest.raises(InvalidMatrixError):
        pseudoinverse_sqrt(np.ones((2, 3)))


@given(st.lists(st.floats(-3, 3), min_size=9, max_size=9), st.integers(0, 2))
def test_pseudoinverse_sqrt_properties(entries, rank_cut):
    b = np.array(entries).reshape(3, 3)
    b[:, 3 - rank_cut:] = 0.0
    a = b @ b.T
    half, pinv = pseudoinverse_sqrt(a)
    np.testing.assert_allclose(half @ half, a, atol=1e-8 * (1 + np.abs(a).max()))
    np.testing.assert_allclose(half, half.T, atol=1e-12 * (1 + np.abs(a).max()))
    # Moore-Penrose identities, up to the relative eigenvalue cutoff
    scale = 1 + np.abs(a).max() * np.abs(pinv).max()
    np.testing.assert_allclose(a @ pinv @ a, a, atol=1e-7 * scale * (1 + np.abs(a).max()))
    np.testing.assert_allclose(pinv @ a @ pinv, pinv, atol=1e-7 * scale * (1 + np.abs(pinv).max()))


@given(st.integers(1, 5), st.integers(1, 20), st.integers(0, 2**32))
def test_random_policies_stay_in_control_set(n_controls, steps, seed):
    cs = ControlSet(np.arange(n_controls) * 0.1 + 0.1)
    pols = random_feedback_policies(cs, steps, [1.0, 2.0], 3, seed)
    for p in pols:
        p.validate(cs, steps)
        assert p.table.shape == (steps, 3)
