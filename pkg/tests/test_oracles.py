import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levybsde.bsde import Generator, SchemeParams, TerminalFunctional, solve_bsde
from levybsde.errors import CapabilityError, ParameterError, TreeSizeError
from levybsde.levy import JumpComponent, LevyModel
from levybsde.oracles import (
    TreeModel,
    closed_form_linear,
    gronwall_check,
    tree_backward,
    tree_representation_residual,
)


def sine_generator():
    return Generator(lambda s, t, y, z, w: np.sin(y) + 0.5 * z + 0.5 * w, lipschitz_f=math.sqrt(1.5))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 4), sigma=st.floats(0.2, 2.0), lam=st.floats(0.0, 0.95), x=st.floats(0.2, 2.0),
       drift=st.floats(-1, 1))
def test_tree_moments_match_model(n, sigma, lam, x, drift):
    model = LevyModel(drift, sigma, (JumpComponent(lam, [x], [1.0]),), 1.0)
    tree = TreeModel.from_model(model, n)
    b = tree.as_batch()
    assert abs(math.fsum(b.path_weights) - 1.0) <= 1e-12
    mean, var = tree.step_moments()
    dt = 1.0 / n
    assert mean == pytest.approx(model.mean_rate() * dt, abs=1e-12)
    assert var == pytest.approx(model.variance_rate() * dt, rel=1e-12, abs=1e-14)


def test_tree_budget_and_probability_guard():
    with pytest.raises(TreeSizeError):
        TreeModel(6, 1.0, 0.0, 1.0, np.array([-1.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ParameterError):
        TreeModel(1, 1.0, 0.0, 1.0, np.array([1.0]), np.array([1.0]))


def test_deterministic_tree_recursion():
    # sigma = 0 and no jump nodes: both coin outcomes give the same path
    tree = TreeModel(3, 1.0, 0.5, 0.0, np.array([]), np.array([]))
    gen = Generator(lambda s, t, y, z, w: 0.1 * t + 0.2 * s.x, lipschitz_f=0.0)
    sol = tree_backward(tree, TerminalFunctional.identity(), gen)
    grid = tree.grid
    x = 0.5 * grid
    expect = x[-1] + sum(0.1 * grid[i] + 0.2 * x[i] for i in range(3)) / 3
    assert sol.Y0 == pytest.approx(expect, abs=1e-14)


def test_one_step_brownian_by_hand():
    tree = TreeModel(1, 1.0, 0.0, 1.0, np.array([]), np.array([]))
    sol = tree_backward(tree, TerminalFunctional.identity(), Generator.zero())
    assert sol.Y0 == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(sol.Z[:, 0], 1.0, atol=1e-15)


def test_regression_on_tree_paths_reproduces_tree():
    tree = TreeModel(4, 1.0, 0.0, 1.0, np.array([1.0]), np.array([1.0]))
    xi, gen = TerminalFunctional.of_terminal(np.sin), sine_generator()
    exact = tree_backward(tree, xi, gen)
    reg = solve_bsde(xi, gen, tree.as_batch(), SchemeParams(basis="indicator", picard_tol=1e-14))
    assert abs(reg.Y0 - exact.Y0) <= 1e-10
    assert np.max(np.abs(reg.Z[:, 0] - exact.Z[:, 0])) <= 1e-10
    assert np.max(np.abs(reg.U[:, 0] - exact.U[:, 0])) <= 1e-10


def test_tree_representation_is_exact():
    tree = TreeModel(3, 1.0, 0.0, 1.0, np.array([-1.0, 1.0]), np.array([1.0, 1.0]))
    sol = tree_backward(tree, TerminalFunctional.of_terminal(np.tanh), sine_generator())
    rz, ru = tree_representation_residual(tree, sol)
    assert rz <= 1e-12 and ru <= 1e-12


def test_closed_form_martingale_case():
    model = LevyModel(0.2, 1.0, (JumpComponent(1.0, [1.5], [1.0]),), 2.0)
    cf = closed_form_linear(model, 0.0)
    m = model.mean_rate()
    assert cf.Y(0.5, 1.0) == pytest.approx(1.0 + m * 1.5)
    assert cf.Z(0.3) == pytest.approx(1.0)
    assert cf.U(0.3, 1.5) == pytest.approx(1.5)


def test_closed_form_constant_terminal():
    model = LevyModel(0.0, 1.0, (), 1.0)
    cf = closed_form_linear(model, 0.4, "constant", 2.0)
    assert cf.Y(0.25, 7.0) == pytest.approx(2.0 * math.exp(0.4 * 0.75))
    assert cf.Z(0.25) == 0.0 and cf.U(0.25, 1.0) == 0.0
    with pytest.raises(CapabilityError):
        closed_form_linear(model, 0.4, "X_T^2")


def test_closed_form_derivative_and_locality():
    model = LevyModel(0.0, 1.0, (JumpComponent.symmetric(2.0),), 1.0)
    cf = closed_form_linear(model, 0.5)
    t = np.array([0.1, 0.4, 0.9])
    assert np.allclose(cf.D(t, 0.3, -1.0), [0.0, -math.exp(0.3), -math.exp(0.05)])
    assert np.allclose(cf.D(t, 0.3, 0.0), [0.0, math.exp(0.3), math.exp(0.05)])


def test_closed_form_against_four_step_tree():
    model = LevyModel(0.0, 1.0, (JumpComponent.symmetric(2.0),), 1.0)
    alpha = 0.2
    tree = TreeModel.from_model(model, 4)
    sol = tree_backward(tree, TerminalFunctional.identity(), Generator.linear(alpha))
    cf = closed_form_linear(model, alpha)
    b = tree.as_batch()
    Y, _, _ = cf.on_batch(b)
    assert np.max(np.abs(sol.Y - Y)) <= 0.02 * np.max(np.abs(Y))
    # controls of step i carry the discount of Y_{i+1}, so compare at the step end
    t1 = b.grid[1:]
    assert np.max(np.abs(sol.Z - cf.Z(t1)) / cf.Z(t1)) <= 0.02
    for j, x in enumerate(b.marks):
        assert np.max(np.abs(sol.U[:, :, j] - cf.U(t1, x)) / abs(cf.U(t1, x))) <= 0.02


def test_closed_form_one_step_residual_is_second_order():
    model = LevyModel(0.0, 1.0, (JumpComponent.symmetric(2.0),), 1.0)
    alpha, x0 = 0.5, 1.0
    cf = closed_form_linear(model, alpha)
    marks, weights = model.nodes()
    res = []
    for n in (4, 8, 16):
        dt = 1.0 / n
        # one implicit step on the tree from t = T - dt, starting at X = x0
        b = TreeModel(1, dt, 0.0, 1.0, marks, weights).as_batch()
        ey = float(b.path_weights @ cf.Y(1.0, x0 + b.values[:, -1]))
        y = ey / (1 - alpha * dt)
        res.append(abs(y - float(cf.Y(1.0 - dt, x0))))
    assert 3.0 <= res[0] / res[1] <= 5.0 and 3.0 <= res[1] / res[2] <= 5.0


def test_gronwall_geometric_example():
    eps = 1e-3
    g = [0.0]
    for _ in range(30):
        g.append(eps + g[-1] / 2)
    v = gronwall_check(g, eps)
    assert v.passed and v.hypothesis_ok
    assert max(g) <= 2 * eps


@settings(max_examples=50, deadline=None)
@given(eps=st.floats(1e-6, 1.0), fr=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40))
def test_gronwall_hypothesis_implies_bound(eps, fr):
    g = [0.0]
    for a in fr:
        g.append(a * (eps + g[-1] / 2))
    assert gronwall_check(g, eps).passed


def test_gronwall_decaying_perturbation():
    eps = 1e-4
    C = [1.0 / (n + 1) for n in range(40)]
    g = [0.0]
    for n in range(40):
        g.append(eps + C[n] + g[-1] / 2)
    # decaying C lags by one step: g_n - 2 C_n is about 2 (C_{n-1} - C_n) + 2^-n terms
    start = (3 * len(g)) // 4
    slack = 4 * (C[start - 2] - C[start - 1])
    v = gronwall_check(g, eps, C, slack=slack)
    assert v.passed
    assert v.tail_max <= v.tail_bound


def test_gronwall_reports_violation():
    v = gronwall_check([0.0, 1.0, 2.0], 0.1)
    assert not v.passed and not v.hypothesis_ok
    assert v.failed_at == 0
    with pytest.raises(ParameterError):
        gronwall_check([0.5, 0.1], 0.1)
