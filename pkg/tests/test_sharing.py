from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ncadmm.bench import GeneratorSpec, generate
from ncadmm.calibration import (calibrate_sharing, calibrate_two_block, sharing_params,
                                two_block_params)
from ncadmm.consensus import SolverConfig
from ncadmm.diagnostics import (eval_lagrangian_sharing, eval_lagrangian_two_block,
                                stationarity_residuals_sharing,
                                stationarity_residuals_two_block)
from ncadmm.errors import CalibrationError, CheckViolation
from ncadmm.problems import (SharingBlock, SharingProblem, TwoBlockProblem, box, cosine_coupling,
                             l1_regularizer, quadratic_block, sigmoid_block, zero_regularizer)
from ncadmm.schedules import cyclic, randomized
from ncadmm.sharing import (initial_state_sharing, initial_state_two_block, run_sharing,
                            run_two_block, update_dual_sharing, update_x0_sharing,
                            update_xk_sharing)
from ncadmm.state import SharingState

from oracles import lagrangian_sharing, sharing_oracle, two_block_oracle

SHARING = "sharing-quadratic-coupling"
TWO_BLOCK = "two-block-lasso-like"


def _params(rho, prob):
    return sharing_params(rho, prob, override=True)


def _sstate(xs, x0, y, prob):
    xs = [np.atleast_1d(np.asarray(x, float)) for x in xs]
    return SharingState(xs, np.asarray(x0, float), np.asarray(y, float), prob.shared(xs), 0)


# -- sharing updates -------------------------------------------------------

def test_xk_least_squares_block(rng):
    M = 3
    prob = SharingProblem([SharingBlock(zero_regularizer(M), np.eye(M)),
                           SharingBlock(quadratic_block(np.eye(M)), np.eye(M))],
                          quadratic_block(np.eye(M)))
    other = rng.standard_normal(M)
    x0 = rng.standard_normal(M)
    st_ = _sstate([rng.standard_normal(M), other], x0, np.zeros(M), prob)
    x = update_xk_sharing(st_, prob, 0, _params(1.0, prob))
    np.testing.assert_allclose(x, x0 - other, atol=1e-12)


def test_xk_scalar_quadratic():
    prob = SharingProblem([SharingBlock(quadratic_block([[1.0]]), np.eye(1))],
                          quadratic_block([[1.0]]))
    st_ = _sstate([[0.0]], [2.0], [0.0], prob)
    assert update_xk_sharing(st_, prob, 0, _params(3.0, prob))[0] == pytest.approx(1.5)


def test_xk_already_stationary(rng):
    A = rng.standard_normal((4, 2))
    blk = quadratic_block(np.diag([1.0, 0.5]), [0.2, -0.4])
    prob = SharingProblem([SharingBlock(blk, A)], quadratic_block(np.eye(4)))
    xk = rng.standard_normal(2)
    # A'y = grad g(xk), r = A xk
    y = np.linalg.lstsq(A.T, blk.grad(xk), rcond=None)[0]
    assert np.allclose(A.T @ y, blk.grad(xk))
    st_ = _sstate([xk], A @ xk, y, prob)
    np.testing.assert_allclose(update_xk_sharing(st_, prob, 0, _params(2.0, prob)), xk, atol=1e-12)


def test_xk_respects_box_and_generic_blocks(rng):
    A = rng.standard_normal((6, 3))
    blk = SharingBlock(sigmoid_block(rng.standard_normal((8, 3))), A, box(-0.2, 0.2, 3))
    prob = SharingProblem([blk], quadratic_block(np.eye(6)))
    st_ = _sstate([np.zeros(3)], 5 * rng.standard_normal(6), rng.standard_normal(6), prob)
    p = calibrate_sharing(prob)
    x = update_xk_sharing(st_, prob, 0, p)
    assert blk.fset.contains(x, 1e-12)

    def obj(z):
        return blk.fn.value(z) - st_.y @ (A @ z) + 0.5 * p.rho_scalar * np.sum((st_.x0 - A @ z) ** 2)

    for z in blk.fset.sample(rng, 500):
        assert obj(x) <= obj(z) + 1e-9


@pytest.mark.parametrize("coupling, expected", [
    (quadratic_block([[1.0]]), 1.0),            # (1 + rho) x0 = rho s - y - b
    (quadratic_block([[0.0]]), 2.0),
])
def test_x0_examples(coupling, expected):
    prob = SharingProblem([SharingBlock(zero_regularizer(1), np.eye(1))], coupling)
    st_ = _sstate([[2.0]], [0.0], [0.0], prob)
    assert update_x0_sharing(st_, prob, _params(1.0, prob))[0] == pytest.approx(expected)


def test_x0_closed_forms(rng):
    M = 3
    blocks = [SharingBlock(zero_regularizer(M), np.eye(M))]
    s, y, c = rng.standard_normal((3, M))
    rho = 2.5
    prob0 = SharingProblem(blocks, quadratic_block(np.zeros((M, M))))
    st_ = _sstate([s], np.zeros(M), y, prob0)
    np.testing.assert_allclose(update_x0_sharing(st_, prob0, _params(rho, prob0)), s - y / rho)
    prob1 = SharingProblem(blocks, quadratic_block(np.zeros((M, M)), c))
    np.testing.assert_allclose(update_x0_sharing(st_, prob1, _params(rho, prob1)),
                               s - (y + c) / rho)


def test_x0_generic_coupling_identity(rng):
    M = 4
    prob = SharingProblem([SharingBlock(zero_regularizer(M), np.eye(M))], cosine_coupling(M, 0.6))
    st_ = _sstate([rng.standard_normal(M)], np.zeros(M), rng.standard_normal(M), prob)
    p = calibrate_sharing(prob)
    st_.x0 = update_x0_sharing(st_, prob, p)
    y = update_dual_sharing(st_, p.rho_scalar)
    assert np.linalg.norm(prob.coupling.grad(st_.x0) + y) <= 1e-8


def test_dual_examples():
    prob = SharingProblem([SharingBlock(zero_regularizer(2), np.eye(2))],
                          quadratic_block(np.zeros((2, 2))))
    st_ = _sstate([[1.0, 1.0]], [1.0, 1.0], [0.3, 0.4], prob)
    np.testing.assert_array_equal(update_dual_sharing(st_, 2.0), [0.3, 0.4])
    st_ = _sstate([[0.0, 0.0]], [1.0, -1.0], [0.0, 0.0], prob)
    np.testing.assert_array_equal(update_dual_sharing(st_, 2.0), [2.0, -2.0])


def test_dual_identity_after_quadratic_x0(rng):
    inst = generate(GeneratorSpec(SHARING, seed=1, K=3, M=6, N=2))
    prob = inst.problem
    p = calibrate_sharing(prob)
    st_ = initial_state_sharing(prob)
    st_.xs = [rng.standard_normal(b.dim) for b in prob.blocks]
    st_.s = prob.shared(st_.xs)
    st_.x0 = update_x0_sharing(st_, prob, p)
    y = update_dual_sharing(st_, p.rho_scalar)
    assert np.linalg.norm(prob.coupling.grad(st_.x0) + y) <= 1e-10


def test_initial_state_sharing():
    inst = generate(GeneratorSpec(SHARING, seed=2))
    st_ = initial_state_sharing(inst.problem)
    np.testing.assert_array_equal(st_.x0, inst.problem.shared(st_.xs))
    np.testing.assert_allclose(inst.problem.coupling.grad(st_.x0), -st_.y)


# -- sharing runs ----------------------------------------------------------

def test_sharing_lagrangian_matches_oracle():
    inst = generate(GeneratorSpec(SHARING, seed=3, K=3, M=5, N=2))
    prob = inst.problem
    p = calibrate_sharing(prob)
    res = run_sharing(prob, SolverConfig(p, max_iters=25, stop_tol=0.0, record_states=True))
    cuts = np.cumsum([b.dim for b in prob.blocks])[:-1]
    S = res.states
    for i in range(len(res.trace)):
        xs = np.split(S["xs"][i], cuts)
        want = lagrangian_sharing(prob, S["x0"][i], xs, S["y"][i], p.rho_scalar)
        assert res.trace.L[i] == pytest.approx(want, rel=1e-12, abs=1e-12)
    assert eval_lagrangian_sharing(res.state, prob, p.rho_scalar) == pytest.approx(res.trace.L[-1])


def test_sharing_convex_matches_oracle():
    inst = generate(GeneratorSpec(SHARING, seed=4, K=3, M=8, N=3, nu=0.0, radius=1.0))
    prob = inst.problem
    p = calibrate_sharing(prob)
    res = run_sharing(prob, SolverConfig(p, max_iters=20000, stop_tol=1e-20))
    f_star, _ = sharing_oracle(prob)
    f = sum(b.value(x) for b, x in zip(prob.blocks, res.state.xs)) \
        + prob.coupling.value(prob.shared(res.state.xs))
    assert abs(f - f_star) <= 1e-4 * max(1.0, abs(f_star))


def test_sharing_seed7_residuals():
    inst = generate(GeneratorSpec(SHARING, seed=7))
    res = run_sharing(inst.problem, SolverConfig(calibrate_sharing(inst.problem),
                                                 max_iters=20000, stop_tol=1e-14,
                                                 check_level="full"))
    assert res.violations == 0
    r = stationarity_residuals_sharing(res.state, inst.problem)
    assert max(r["blocks"]) <= 1e-5 and r["coupling"] <= 1e-5 and r["feasibility"] <= 1e-5


def test_sharing_max_iters_zero():
    inst = generate(GeneratorSpec(SHARING, seed=5))
    res = run_sharing(inst.problem, SolverConfig(calibrate_sharing(inst.problem), max_iters=0))
    s0 = initial_state_sharing(inst.problem)
    np.testing.assert_array_equal(res.state.x0, s0.x0)
    np.testing.assert_array_equal(res.state.y, s0.y)
    for a, b in zip(res.state.xs, s0.xs):
        np.testing.assert_array_equal(a, b)
    assert len(res.trace) == 1


def test_sharing_partial_sum_coherent():
    inst = generate(GeneratorSpec(SHARING, seed=6, K=4, M=7, N=3))
    s = randomized(4, p=0.5, seed=1)
    res = run_sharing(inst.problem, SolverConfig(calibrate_sharing(inst.problem), s,
                                                 max_iters=250, stop_tol=0.0))
    np.testing.assert_allclose(res.state.s, inst.problem.shared(res.state.xs), atol=1e-12)


def test_sharing_y_and_x0_fire_together():
    inst = generate(GeneratorSpec(SHARING, seed=8, K=3, M=5, N=2))
    s = cyclic(3, T=2)
    res = run_sharing(inst.problem, SolverConfig(calibrate_sharing(inst.problem), s,
                                                 max_iters=40, stop_tol=0.0, record_states=True))
    S, fired = res.states, res.trace.fired
    for i in range(1, len(res.trace)):
        if not fired[i, 0]:
            np.testing.assert_array_equal(S["y"][i], S["y"][i - 1])
            np.testing.assert_array_equal(S["x0"][i], S["x0"][i - 1])


def test_sharing_uncalibrated_refused():
    inst = generate(GeneratorSpec(SHARING, seed=0))
    with pytest.raises(CalibrationError):
        sharing_params(0.1, inst.problem)


def test_sharing_full_check_raises():
    # nonconvex coupling with rho just above L: block moduli stay positive but
    # monotone descent breaks late in the run
    inst = generate(GeneratorSpec(SHARING, seed=0, mu=5.0, nu=1.0))
    prob = inst.problem
    p = sharing_params(1.05 * prob.coupling.lipschitz, prob, override=True)
    assert not p.calibrated and p.gamma.min() > 0
    res = run_sharing(prob, SolverConfig(p, max_iters=300, stop_tol=0.0))
    assert not res.checks["monotone"].passed
    strict = replace(p, override=False, calibrated=True)
    with pytest.raises(CheckViolation) as info:
        run_sharing(prob, SolverConfig(strict, max_iters=300, stop_tol=0.0, check_level="full"))
    assert info.value.iteration == res.checks["monotone"].first_failure


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), K=st.integers(1, 4), mu=st.sampled_from([0.0, 0.5]),
       kind=st.sampled_from(["full", "cyclic", "randomized"]))
def test_sharing_calibrated_checks_pass(seed, K, mu, kind):
    inst = generate(GeneratorSpec(SHARING, seed=seed, K=K, M=6, N=2, mu=mu))
    sched = {"full": None, "cyclic": cyclic(K, T=K + 1),
             "randomized": randomized(K, p=0.5, seed=seed)}[kind]
    res = run_sharing(inst.problem, SolverConfig(calibrate_sharing(inst.problem), sched,
                                                 max_iters=60, stop_tol=0.0))
    for name, rep in res.checks.items():
        assert rep.passed, rep.summary()


# -- two-block -------------------------------------------------------------

def _concave_two_block(c=(0.3, -0.2)):
    return TwoBlockProblem(zero_regularizer(2), quadratic_block(-np.eye(2)), np.eye(2), np.eye(2),
                           np.array(c), box(-1.0, 1.0, 2))


def test_two_block_feasibility_only():
    prob = TwoBlockProblem(zero_regularizer(2), quadratic_block(np.zeros((2, 2))), np.eye(2),
                           np.eye(2), np.ones(2))
    p = two_block_params(calibrate_two_block(0.0, np.eye(2)), prob)
    res = run_two_block(prob, SolverConfig(p, max_iters=1000, stop_tol=1e-20))
    r = prob.B @ res.state.x1 + prob.A @ res.state.x2 - prob.c
    assert np.linalg.norm(r) <= 1e-8


def test_two_block_initial_state_feasible():
    inst = generate(GeneratorSpec(TWO_BLOCK, seed=1))
    s = initial_state_two_block(inst.problem)
    prob = inst.problem
    np.testing.assert_allclose(prob.B @ s.x1 + prob.A @ s.x2, prob.c, atol=1e-12)
    np.testing.assert_allclose(prob.A.T @ s.y, -prob.g.grad(s.x2), atol=1e-12)


def test_two_block_concave_rho_1_5_monotone():
    """Documented example: rho = 1.5 > L_g / lambda_min(AA') = 1 should descend.

    It does not: with A = B = I the x2 step amplifies by rho / (rho - 1) > 1
    whenever rho < 2 L_g, and the Lagrangian rises from the first iteration.
    Kept failing on purpose; see the decisions ledger.
    """
    prob = _concave_two_block()
    p = two_block_params(1.5, prob)
    assert p.calibrated
    res = run_two_block(prob, SolverConfig(p, max_iters=200, stop_tol=0.0))
    assert res.checks["monotone"].passed, res.checks["monotone"].summary()


def test_two_block_concave_monotone_above_twice_lg():
    prob = _concave_two_block()
    rho = calibrate_two_block(1.0, prob.A, margin=1.25, monotone=True)
    assert rho == pytest.approx(2.5)
    res = run_two_block(prob, SolverConfig(two_block_params(rho, prob), max_iters=200,
                                           stop_tol=0.0, check_level="full"))
    assert res.checks["monotone"].passed and res.checks["descent"].passed
    assert res.checks["dual_bound"].passed
    assert eval_lagrangian_two_block(res.state, prob, rho) == pytest.approx(res.trace.L[-1])


@pytest.mark.parametrize("seed", range(3))
def test_two_block_l1_convex_matches_oracle(seed):
    inst = generate(GeneratorSpec(TWO_BLOCK, seed=seed, nu=0.0, M=8, n=5, lam=0.2, radius=2.0))
    prob = inst.problem
    rho = calibrate_two_block(prob.g.lipschitz, prob.A, margin=1.5)
    res = run_two_block(prob, SolverConfig(two_block_params(rho, prob), max_iters=20000,
                                           stop_tol=1e-22))
    f_star, _ = two_block_oracle(prob)
    f = prob.objective(res.state.x1, res.state.x2)
    r = stationarity_residuals_two_block(res.state, prob)
    assert r["feasibility"] <= 1e-6
    assert abs(f - f_star) <= 1e-4 * max(1.0, abs(f_star))


def test_two_block_max_iters_zero():
    inst = generate(GeneratorSpec(TWO_BLOCK, seed=2))
    prob = inst.problem
    rho = calibrate_two_block(prob.g.lipschitz, prob.A)
    res = run_two_block(prob, SolverConfig(two_block_params(rho, prob), max_iters=0))
    s0 = initial_state_two_block(prob)
    np.testing.assert_array_equal(res.state.x1, s0.x1)
    np.testing.assert_array_equal(res.state.y, s0.y)
    assert len(res.trace) == 1


def test_two_block_uncalibrated_refused():
    prob = _concave_two_block()
    with pytest.raises(CalibrationError):
        two_block_params(0.9, prob)


def test_two_block_l1_problem_is_accepted():
    prob = TwoBlockProblem(l1_regularizer(2, 0.5), quadratic_block(np.eye(2)), np.eye(2),
                           np.eye(2), np.array([1.0, -2.0]), box(-3, 3, 2))
    p = two_block_params(calibrate_two_block(1.0, prob.A), prob)
    res = run_two_block(prob, SolverConfig(p, max_iters=3000, stop_tol=1e-20))
    # x2 = c - x1, minimize 0.5||c - x1||^2 + 0.5||x1||_1: soft-threshold c by 0.5
    np.testing.assert_allclose(res.state.x1, [0.5, -1.5], atol=1e-6)
