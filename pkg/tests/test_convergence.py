import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tapfl.autodiff import backward
from tapfl.convergence import (BoundViolation, LearningRateError, QuadraticFederation, bound_rhs,
                               diminishing_schedule, f_graph, lr_cap, make_quadratic_federation,
                               power_iteration, run_component_fedavg_quadratic, step_ratios,
                               verify_bound)


def _two_owner_identity():
    e1 = np.array([1.0, 0.0])
    return QuadraticFederation([np.eye(2)], [np.stack([e1, -e1])], [[0, 1]], num_clients=2)


def test_zeta_hand_example():
    fed = _two_owner_identity()
    assert fed.zeta_sq == [pytest.approx(1.0)]
    assert fed.Z == pytest.approx(1.0)
    assert fed.L == pytest.approx(1.0)


def test_equal_centers_have_zero_heterogeneity():
    fed = make_quadratic_federation(3, 4, 5, "all", seed=1, zeta=0.0)
    assert fed.Z == pytest.approx(0.0, abs=1e-24)


def test_C_K_full_ownership():
    fed = make_quadratic_federation(3, 2, 4, "all")
    assert fed.C_K == pytest.approx((3 + 1) / 4)


@pytest.mark.parametrize("zeta", [0.3, 1.0, 2.0])
def test_requested_zeta_is_exact(zeta):
    fed = make_quadratic_federation(4, 3, 5, "random", seed=2, zeta=zeta)
    for z in fed.zeta_sq:
        assert z == pytest.approx(zeta**2, rel=1e-12)


def test_L_is_top_of_spectrum():
    fed = make_quadratic_federation(5, 6, 3, seed=3)
    assert fed.L == pytest.approx(1.0, rel=1e-9)
    q = fed.curvatures[0]
    assert power_iteration(q) == pytest.approx(np.linalg.eigvalsh(q).max(), rel=1e-9)


def test_lr_cap_examples():
    assert lr_cap(1.0, 1) == pytest.approx(1 / 48)
    assert lr_cap(1.0, 10) == pytest.approx(1 / 480)
    branches = (1 / 48, 1 / math.sqrt(8), (1 / 96) ** (1 / 3))
    assert branches == pytest.approx((0.0208333, 0.3535534, 0.2183951), abs=1e-6)
    assert lr_cap(1.0, 20) == pytest.approx(lr_cap(1.0, 10) / 2)
    with pytest.raises(ValueError):
        lr_cap(0.0, 1)


def test_bound_rhs_spot_value():
    for c_k in (1.0, 0.5):
        terms = bound_rhs(1.0, [0.01], tau=2, L=1.0, sigma=1.0, Z=0.0, R=0, C_K=c_k)
        expected = (8 * 1 / 0.01
                    + 16 * (1 / 3) * 8 * 1 * 0.01**3 / 0.01
                    + 0.0
                    + 16 * 1 * 2 * 1 * c_k * 0.01**2 / 0.01)
        assert terms.total == pytest.approx(expected, rel=1e-14)


def test_bound_rhs_homogeneous_noiseless():
    terms = bound_rhs(2.5, [0.1, 0.05], 3, 1.0, 0.0, 0.0, 4, 1.0)
    assert terms.total == terms.optimality_gap == pytest.approx(8 * 2.5 / 0.15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 20), st.floats(0.01, 2.0), st.floats(0.0, 5.0))
def test_drift_term_increases_with_R(R, sigma, Z):
    e = diminishing_schedule(0.01, 50)
    a = bound_rhs(1.0, e, 2, 1.0, sigma, Z, R, 1.0)
    b = bound_rhs(1.0, e, 2, 1.0, sigma, Z, 2 * R + 1, 1.0)
    assert b.drift > a.drift


def test_bound_rhs_requires_positive_steps():
    with pytest.raises(ValueError):
        bound_rhs(1.0, [0.0], 1, 1.0, 0.0, 0.0, 0, 1.0)


def test_learning_rate_above_cap_refused():
    fed = make_quadratic_federation(1, 2, 2)
    with pytest.raises(LearningRateError):
        run_component_fedavg_quadratic(fed, 1, [0.5], trials=1)


def test_single_block_noiseless_gd_monotone():
    fed = make_quadratic_federation(0, 4, 1, "all", seed=4)
    traj = run_component_fedavg_quadratic(fed, 1, [lr_cap(fed.L, 1)] * 200, trials=1)
    assert np.all(np.diff(traj.grad_sq[0]) < 0)


def test_two_owners_match_gd_on_average_objective():
    fed = make_quadratic_federation(2, 3, 2, "all", seed=5, zeta=1.0)
    eta = lr_cap(fed.L, 1)
    traj = run_component_fedavg_quadratic(fed, 1, [eta] * 50, trials=1)
    w = fed.initial_point()
    for _ in range(50):
        w = w - eta * fed.grad_f(w[None, :])[0]
    np.testing.assert_allclose(traj.final[0], w, atol=1e-10)


def test_single_owner_blocks_are_isolated_sgd():
    # client k owns block k alone: aggregation is the identity
    fed = make_quadratic_federation(2, 3, 3, [[0], [1], [2]], seed=6)
    eta, tau = lr_cap(fed.L, 3), 3
    traj = run_component_fedavg_quadratic(fed, tau, [eta] * 10, trials=1)
    for r in range(3):
        w = fed.init[r].copy()
        for _ in range(10 * tau):
            w = w - eta * fed.curvatures[r] @ (w - fed.centers[r][0])
        np.testing.assert_allclose(traj.final[0][fed.offsets[r]:fed.offsets[r + 1]], w, atol=1e-12)


def test_analytic_gradient_matches_autodiff():
    fed = make_quadratic_federation(3, 4, 4, seed=7, zeta=0.5)
    w = np.random.default_rng(0).normal(size=int(fed.offsets[-1]))
    g, root, leaf = f_graph(fed, w)
    assert float(g.value(root)) == pytest.approx(float(fed.f(w[None, :])[0]), rel=1e-12)
    np.testing.assert_allclose(backward(g, root)[leaf][0], fed.grad_f(w[None, :])[0], atol=1e-10)


def test_noise_variance_per_client_is_sigma_squared():
    fed = make_quadratic_federation(0, 4, 1, "all", sigma=0.5, seed=8)
    fed.centers[0][...] = fed.init[0]        # gradient zero at the start
    eta = lr_cap(fed.L, 1)
    traj = run_component_fedavg_quadratic(fed, 1, [eta], trials=4000, seed=1)
    step = (traj.final - fed.initial_point()) / eta
    assert np.mean(np.sum(step**2, axis=1)) == pytest.approx(0.25, rel=0.05)


def test_verify_bound_heterogeneous_noisy():
    fed = make_quadratic_federation(2, 4, 4, sigma=0.1, seed=0, zeta=1.0)
    rep = verify_bound(fed, tau=2, T=400, trials=20)
    assert rep.holds and rep.rhs_decreasing
    assert [c.T for c in rep.checkpoints] == [100, 200, 400]
    assert set(rep.to_json()) >= {"checkpoints", "Z", "C_K", "L"}


def test_verify_bound_reports_violation():
    # start at the minimizer with noise and an understated L: f rises, so the
    # bound's right-hand side goes negative and the check must fail
    fed = make_quadratic_federation(0, 2, 2, "all", sigma=1.0, seed=0)
    fed.init = [fed.mean_centers[0].copy()]
    fed.L = 1e-6
    with pytest.raises(BoundViolation) as info:
        verify_bound(fed, tau=1, T=40, trials=4, alpha=0.1)
    assert info.value.report.checkpoints


def test_homogeneous_noiseless_lhs_vanishes():
    fed = make_quadratic_federation(1, 3, 3, "all", seed=9)
    rep = verify_bound(fed, 1, 4000, trials=2)
    assert rep.holds
    traj = run_component_fedavg_quadratic(fed, 1, diminishing_schedule(rep.alpha, 4000), 1)
    assert np.all(np.diff(traj.grad_sq[0]) < 0)
    assert rep.checkpoints[-1].lhs_mean < rep.checkpoints[0].lhs_mean


def test_step_ratios_decrease_with_T():
    r = [step_ratios(1.0, T) for T in (100, 1000, 10_000)]
    assert r[0][0] > r[1][0] > r[2][0]
    assert r[0][1] > r[1][1] > r[2][1]
