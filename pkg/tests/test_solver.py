import numpy as np
import pytest

from sfmkit.se3 import Pose, exp_map, log_map, se3_left_jacobian_inv
from sfmkit.solver import (Problem, RobustLoss, SolverOptions, check_jacobian,
                           information_sqrt, solve)

from conftest import random_pose


def _linear_problem(rng, m=20, n=5):
    A = rng.normal(size=(m, n)) + np.eye(m, n) * 3.0
    b = rng.normal(size=m)
    p = Problem()
    p.add_parameter_block("x", np.zeros(n))

    def res(x):
        return A @ x - b, [A]

    p.add_residual_block(res, ["x"])
    return p, A, b


def test_linear_least_squares_two_iterations(rng):
    p, A, b = _linear_problem(rng)
    report = solve(p, SolverOptions(initial_lambda=1e-8))
    x_ref = np.linalg.lstsq(A, b, rcond=None)[0]
    assert report.iterations <= 2
    assert np.linalg.norm(p.value("x") - x_ref) < 1e-9
    assert report.final_cost <= report.initial_cost


def test_rosenbrock():
    p = Problem()
    p.add_parameter_block("x", np.array([-1.2, 1.0]))

    def res(x):
        r = np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])
        J = np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])
        return r, [J]

    p.add_residual_block(res, ["x"])
    report = solve(p, SolverOptions(max_iters=200))
    assert np.allclose(p.value("x"), [1.0, 1.0], atol=1e-8)
    assert report.final_cost < 1e-16


def test_all_fixed_returns_initial(rng):
    p, A, b = _linear_problem(rng)
    p.set_fixed("x")
    cost0, _ = p.evaluate()
    report = solve(p)
    assert report.iterations == 0
    assert report.final_cost == cost0
    assert report.termination == "all_fixed"


def test_fixed_block_bit_identical(rng):
    p = Problem()
    p.add_parameter_block("a", np.array([1.0, 2.0]), fixed=True)
    p.add_parameter_block("b", np.array([5.0, -3.0]))
    target = np.array([0.5, 0.25])

    def res(a, b):
        return b - a - target, [-np.eye(2), np.eye(2)]

    p.add_residual_block(res, ["a", "b"])
    before = p.value("a").tobytes()
    solve(p)
    assert p.value("a").tobytes() == before
    assert np.allclose(p.value("b"), np.array([1.0, 2.0]) + target, atol=1e-10)


def test_whitening_equals_information_quadratic(rng):
    omega = rng.normal(size=(4, 4))
    omega = omega @ omega.T + 4 * np.eye(4)
    r = rng.normal(size=4)
    W = information_sqrt(omega)
    assert abs((W @ r) @ (W @ r) - r @ omega @ r) < 1e-10


def test_sparse_equals_dense_reference(rng):
    # block-chain linear problem, 160 parameters
    nb, d = 40, 4
    blocks = [rng.normal(size=d) for _ in range(nb)]
    p = Problem()
    for i, v in enumerate(blocks):
        p.add_parameter_block(f"x{i}", np.zeros(d))
    mats = []
    for i in range(nb - 1):
        # unit-gain chain keeps the stacked system well conditioned
        A = np.eye(d) + 0.1 * rng.normal(size=(d, d))
        B = -np.eye(d) + 0.1 * rng.normal(size=(d, d))
        b = A @ blocks[i] + B @ blocks[i + 1]
        mats.append((i, A, B, b))

        def res(x, y, A=A, B=B, b=b):
            return A @ x + B @ y - b, [A, B]

        p.add_residual_block(res, [f"x{i}", f"x{i + 1}"])
    # anchor the gauge-free chain
    p.add_residual_block(lambda x: (x - blocks[0], [np.eye(d)]), ["x0"])
    solve(p, SolverOptions(initial_lambda=1e-10, max_iters=10))

    # dense reference: stack the full linear system and solve by lstsq
    n = nb * d
    rows = []
    rhs = []
    for i, A, B, b in mats:
        row = np.zeros((d, n))
        row[:, i * d:(i + 1) * d] = A
        row[:, (i + 1) * d:(i + 2) * d] = B
        rows.append(row)
        rhs.append(b)
    anchor = np.zeros((d, n))
    anchor[:, :d] = np.eye(d)
    rows.append(anchor)
    rhs.append(blocks[0])
    x_ref = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    got = np.concatenate([p.value(f"x{i}") for i in range(nb)])
    assert np.linalg.norm(got - x_ref, ord=np.inf) < 1e-8


# --- robust losses ----------------------------------------------------------

@pytest.mark.parametrize("loss", [RobustLoss("trivial"), RobustLoss("huber", 1.3),
                                  RobustLoss("cauchy", 0.7)])
def test_loss_basic_properties(loss):
    assert loss.rho(0.0) == 0.0
    s = np.linspace(1e-6, 25, 200)
    rho = np.array([loss.rho(v) for v in s])
    assert np.all(np.diff(rho) > 0)  # monotone increasing
    for v in s:
        assert 0 < loss.rho_prime(v) <= 1.0
        if loss.kind != "trivial":
            assert loss.rho(v) <= v + 1e-12


def test_huber_quadratic_region():
    loss = RobustLoss("huber", 5.0)
    r = np.array([1.0, 2.0])
    assert loss.rho(float(r @ r)) == pytest.approx(float(r @ r))


def test_evaluate_matches_term_sum_oracle(rng):
    p = Problem()
    p.add_parameter_block("x", rng.normal(size=3))
    losses = [RobustLoss("trivial"), RobustLoss("huber", 0.5), RobustLoss("cauchy", 1.0)]
    residuals = [rng.normal(size=k + 1) for k in range(3)]
    for r0, loss in zip(residuals, losses):
        p.add_residual_block(lambda x, r0=r0: (r0 + 0.0 * x[:1], [np.zeros((len(r0), 3))]),
                             ["x"], loss=loss)
    cost, stacked = p.evaluate()
    expected = sum(loss.rho(float(r @ r)) for r, loss in zip(residuals, losses))
    assert cost == pytest.approx(expected, abs=1e-12)
    assert np.allclose(stacked, np.concatenate(residuals))


# --- jacobian checking ------------------------------------------------------

def test_check_jacobian_linear_is_exact(rng):
    p, _, _ = _linear_problem(rng)
    assert check_jacobian(p) < 1e-9


def test_check_jacobian_flags_wrong_jacobian(rng):
    p = Problem()
    p.add_parameter_block("x", rng.normal(size=3))
    A = rng.normal(size=(3, 3))

    def res(x):
        return A @ x, [A + 0.05]  # deliberately wrong

    p.add_residual_block(res, ["x"])
    assert check_jacobian(p) > 1e-3


# --- SE(3) manifold blocks --------------------------------------------------

def _prior_residual(target):
    def res(T):
        r = log_map(T @ target.inverse())
        return r, [se3_left_jacobian_inv(r)]
    return res


def test_se3_prior_jacobian(rng):
    target = random_pose(rng, 0.8, 2.0)
    p = Problem()
    p.add_parameter_block("T", random_pose(rng, 0.5, 1.0), manifold="se3")
    p.add_residual_block(_prior_residual(target), ["T"])
    assert check_jacobian(p, "T") < 1e-5


def test_se3_solve_converges_to_prior(rng):
    target = random_pose(rng, 0.8, 2.0)
    p = Problem()
    p.add_parameter_block("T", random_pose(rng, 0.5, 1.0), manifold="se3")
    p.add_residual_block(_prior_residual(target), ["T"])
    report = solve(p, SolverOptions(max_iters=50))
    assert p.value("T").almost_equal(target, tol=1e-8)
    assert report.final_cost < 1e-16
