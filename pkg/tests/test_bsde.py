import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import zscore
from levybsde.bsde import (
    BsdeSolution,
    Generator,
    SchemeParams,
    TerminalFunctional,
    g_alpha,
    g_nu_functional,
    make_fit,
    picard_iterate,
    picard_step,
    solve_bsde,
    stability_gap,
    truncate_g_alpha,
    utility_generator,
)
from levybsde.errors import BasisError, ContractionError, ParameterError, RegressionConditioningWarning, ShapeError
from levybsde.levy import sample_paths
from levybsde.oracles import TreeModel, closed_form_linear


@pytest.fixture(scope="module")
def batch():
    from levybsde.levy import JumpComponent, LevyModel

    model = LevyModel(0.0, 1.0, (JumpComponent.symmetric(2.0),), 1.0)
    return sample_paths(model, 20, 20_000, seed=2024)


def sine_generator():
    return Generator(lambda s, t, y, z, w: np.sin(y) + 0.5 * z + 0.5 * w, lipschitz_f=math.sqrt(1.5),
                     df_dy=lambda s, t, y, z, w: np.cos(y),
                     df_dz=lambda s, t, y, z, w: np.full_like(y, 0.5),
                     df_dw=lambda s, t, y, z, w: np.full_like(y, 0.5))


def test_g_nu_linear_quadrature():
    gen = Generator.zero()
    assert g_nu_functional(gen, [3.0, 1.0], [-1.0, 1.0], [1.0, 1.0]) == pytest.approx(4.0)


@pytest.mark.parametrize("alpha", [0.3, 1.0, 2.5])
def test_g_nu_vanishes_at_zero_for_utility(alpha):
    gen = utility_generator(alpha)
    assert g_nu_functional(gen, np.zeros(3), [-1.0, 0.5, 2.0], [1.0, 2.0, 0.1]) == 0.0


def test_g_nu_shape_mismatch():
    with pytest.raises(ShapeError):
        g_nu_functional(Generator.zero(), [1.0, 2.0, 3.0], [-1.0, 1.0], [1.0, 1.0])


def test_g_nu_quadrature_refinement():
    # nu = uniform density on [-1, 1] with mass 2, midpoint nodes; u smooth
    gen = utility_generator(1.0)
    u = lambda x: 0.5 * np.sin(2 * x)

    def value(n):
        x = -1 + (np.arange(n) + 0.5) * (2.0 / n)
        return float(g_nu_functional(gen, u(x), x, np.full(n, 2.0 / n)))

    coarse, fine, finest = value(50), value(100), value(1000)
    assert abs(coarse - fine) <= 1e-3
    assert abs(fine - finest) <= abs(coarse - finest)


def test_constant_terminal_exact(batch):
    sol = solve_bsde(TerminalFunctional.constant(2.5), Generator.zero(), batch)
    assert np.allclose(sol.Y, 2.5, rtol=0, atol=1e-12)
    assert np.allclose(sol.Z, 0.0, atol=1e-12)
    assert np.allclose(sol.U, 0.0, atol=1e-12)


def test_terminal_exactness_bitwise(batch):
    xi = TerminalFunctional.of_terminal(np.tanh)
    sol = solve_bsde(xi, sine_generator(), batch)
    assert np.array_equal(sol.Y[:, -1], xi(batch))


def test_martingale_terminal(batch):
    sol = solve_bsde(TerminalFunctional.identity(), Generator.zero(), batch)
    assert zscore(batch.values[:, -1], sol.Y0) <= 3
    assert np.sqrt(np.mean((sol.Z - 1.0) ** 2)) <= 0.05
    for j, x in enumerate(batch.marks):
        assert np.sqrt(np.mean((sol.U[:, :, j] - x) ** 2)) / abs(x) <= 0.08


def test_linear_driver_matches_closed_form(batch, jump_model):
    alpha = 0.5
    sol = solve_bsde(TerminalFunctional.identity(), Generator.linear(alpha), batch)
    # the scheme discounts by (1 - alpha dt)^-N, the sample mean of X_T is the unbiased reference
    dt = 1.0 / batch.n_steps
    target = (1 - alpha * dt) ** (-batch.n_steps) * batch.values[:, -1].mean()
    assert sol.Y0 == pytest.approx(target, abs=1e-10)
    cf = closed_form_linear(jump_model, alpha)
    assert cf.Y0() == pytest.approx(0.0)
    assert np.sqrt(np.mean((sol.Z[:, 0] - cf.Z(0.0)) ** 2)) / cf.Z(0.0) < 0.1


def test_comparison_shift_by_constant(batch):
    xi = TerminalFunctional.of_terminal(lambda x: np.cos(x))
    xi_up = TerminalFunctional.of_terminal(lambda x: np.cos(x) + 0.3)
    a = solve_bsde(xi, Generator.zero(), batch)
    b = solve_bsde(xi_up, Generator.zero(), batch)
    assert np.allclose(b.Y - a.Y, 0.3, atol=1e-10)
    assert np.allclose(b.Z, a.Z, atol=1e-10)


def test_controls_are_functions_of_step_features():
    tree = TreeModel(3, 1.0, 0.0, 1.0, np.array([1.0]), np.array([1.0]))
    b = tree.as_batch()
    sol = solve_bsde(TerminalFunctional.of_terminal(np.sin), sine_generator(), b,
                     SchemeParams(basis="indicator", picard_tol=1e-14))
    for i in range(b.n_steps):
        keys = np.round(b.values[:, i], 9)
        for k in np.unique(keys):
            sel = keys == k
            assert np.ptp(sol.Z[sel, i]) == 0 and np.ptp(sol.U[sel, i, 0]) == 0


def test_contraction_error_for_large_step(jump_model):
    b = sample_paths(jump_model, 2, 200, seed=3)
    with pytest.raises(ContractionError, match="smaller time step"):
        solve_bsde(TerminalFunctional.identity(), Generator.linear(5.0), b)


def test_inner_picard_contracts_geometrically(batch):
    sol = solve_bsde(TerminalFunctional.of_terminal(np.sin), sine_generator(), batch)
    for res in sol.inner_residuals:
        res = [r for r in res if r > 1e-13]
        for a, b in zip(res, res[1:]):
            assert b <= 0.5 * a


def test_singular_design_raises_and_degenerate_warns():
    w = np.full(4, 0.25)
    with pytest.raises(BasisError):
        make_fit(np.zeros((4, 1)) * np.nan, w, SchemeParams())
    feats = np.array([0.0, 1e-9, 2e-9, 1.0])
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        make_fit(feats, w, SchemeParams(basis_degree=3, cond_warn=10.0))
    assert any(issubclass(r.category, RegressionConditioningWarning) for r in rec)


def test_minimum_norm_projection_reproduces_basis_functions(rng):
    x = rng.normal(size=500)
    fit = make_fit(x, np.full(500, 1 / 500), SchemeParams(basis_degree=3))
    target = 1 - 2 * x + 0.5 * x**3
    proj, _ = fit.project(target)
    assert np.allclose(proj, target, atol=1e-9)


def test_picard_step_for_exogenous_generator(batch):
    gen = Generator(lambda s, t, y, z, w: np.cos(s.x), lipschitz_f=0.0)
    xi = TerminalFunctional.identity()
    first = picard_step(BsdeSolution.zeros(batch), xi, gen, batch)
    second = picard_step(first, xi, gen, batch)
    assert np.array_equal(first.Y, second.Y)
    assert second.picard_gaps[-1] == 0.0


def test_picard_step_with_zero_driver_matches_solver(batch):
    xi = TerminalFunctional.of_terminal(np.tanh)
    one = picard_step(BsdeSolution.zeros(batch), xi, Generator.zero(), batch)
    direct = solve_bsde(xi, Generator.zero(), batch)
    assert np.allclose(one.Y, direct.Y, atol=1e-12)
    assert np.allclose(one.Z, direct.Z, atol=1e-12)
    assert np.allclose(one.U, direct.U, atol=1e-12)


def test_global_picard_converges_to_step_solver(batch):
    xi = TerminalFunctional.of_terminal(np.tanh)
    gen = sine_generator()
    scheme = SchemeParams(picard_tol=1e-9)
    glob = picard_iterate(xi, gen, batch, scheme)
    gaps = glob.picard_gaps
    assert gaps[-1] <= 1e-9
    assert all(b < a for a, b in zip(gaps[1:], gaps[2:]))


def test_stability_identical_and_constant_shift(batch):
    xi = TerminalFunctional.of_terminal(np.sin)
    a = solve_bsde(xi, Generator.zero(), batch)
    rep = stability_gap(a, a)
    assert rep.lhs == 0.0 and rep.rhs == 0.0
    delta = 0.2
    b = solve_bsde(TerminalFunctional.of_terminal(lambda x: np.sin(x) + delta), Generator.zero(), batch)
    rep = stability_gap(a, b)
    assert np.allclose(a.Y - b.Y, -delta, atol=1e-10)
    assert rep.lhs == pytest.approx(delta**2, rel=1e-8)
    assert rep.rhs == pytest.approx(delta**2, rel=1e-12)


def test_stability_shape_mismatch(batch, jump_model):
    a = BsdeSolution.zeros(batch)
    b = BsdeSolution.zeros(sample_paths(jump_model, 5, 10, seed=0))
    with pytest.raises(ShapeError):
        stability_gap(a, b)


def test_g_alpha_values():
    g, dg, _ = g_alpha(1.0)
    assert g(0.0) == 0.0 and dg(0.0) == 0.0
    assert g(1.0) == pytest.approx(math.e - 2.0)
    with pytest.raises(ParameterError):
        g_alpha(0.0)


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.1, 3.0), K=st.floats(0.1, 3.0), s=st.floats(-1.0, 1.0))
def test_truncation_matches_inside_and_vanishes_outside(alpha, K, s):
    tg = truncate_g_alpha(alpha, K)
    g, _, _ = g_alpha(alpha)
    x = 2 * K * s
    assert tg(x) == g(x)
    assert tg(3 * K * (1 + abs(s))) == 0.0
    assert tg(-3 * K * (1 + abs(s))) == 0.0


@pytest.mark.parametrize("alpha,K", [(1.0, 0.7), (2.0, 1.5), (0.5, 3.0)])
def test_truncation_derivative_second_order_at_seams(alpha, K):
    tg = truncate_g_alpha(alpha, K)
    for seam in (-3 * K, -2 * K, 2 * K, 3 * K, 2.5 * K, -2.5 * K):
        errs = []
        for h in (1e-2 * K, 5e-3 * K, 2.5e-3 * K):
            fd = (tg(seam + h) - tg(seam - h)) / (2 * h)
            errs.append(abs(fd - tg.derivative(seam)))
        if errs[0] > 1e-9:
            assert 3.0 <= errs[0] / errs[1] <= 5.0
            assert 3.0 <= errs[1] / errs[2] <= 5.0


def test_truncation_lipschitz_bounds_derivative():
    tg = truncate_g_alpha(1.0, 1.2)
    x = np.linspace(-5, 5, 20001)
    assert np.max(np.abs(tg.derivative(x))) <= tg.lipschitz * (1 + 1e-9)


def test_generator_lipschitz_probe(rng):
    gen = sine_generator()
    ratio, dg = gen.check_lipschitz(rng)
    assert ratio <= gen.lipschitz_f + 1e-12
    assert dg <= gen.lipschitz_g


def test_to_csv_layout(batch, tmp_path):
    small = batch.subset(np.arange(3))
    sol = solve_bsde(TerminalFunctional.identity(), Generator.zero(), small, SchemeParams(basis_degree=1))
    path = tmp_path / "sol.csv"
    with path.open("w") as fh:
        sol.to_csv(fh, {"seed": 1})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed: 1"
    assert lines[2] == "path_id,t,Y,Z,U_-1,U_1"
    assert len(lines) == 3 + 3 * (small.n_steps + 1)
