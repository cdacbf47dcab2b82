import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import zscore
from levybsde.errors import GridError, ParameterError, RangeError, SamplerError, DivergenceError
from levybsde.levy import (
    CameronMartinDirection,
    ForwardSdeSpec,
    JumpComponent,
    LevyModel,
    cameron_martin_shift,
    girsanov_density,
    sample_paths,
    shift_batch,
    shift_path,
    simulate_forward,
)


def test_pure_brownian_terminal_mean(brownian_model):
    batch = sample_paths(brownian_model, 20, 20_000, seed=1)
    assert batch.jump_time.size == 0
    assert zscore(batch.values[:, -1], 0.0) <= 3


def test_mean_jump_count_matches_intensity():
    model = LevyModel(0.0, 0.0, (JumpComponent.symmetric(2.0),), 1.0)
    batch = sample_paths(model, 10, 20_000, seed=2)
    counts = np.bincount(batch.jump_path, minlength=batch.n_paths)
    assert zscore(counts, 2.0) <= 3


def test_terminal_variance_matches_levy_ito(jump_model):
    batch = sample_paths(jump_model, 10, 50_000, seed=3)
    x = batch.values[:, -1]
    target = jump_model.sigma**2 + 2.0 * 1.0
    # variance estimator's standard error from the fourth central moment
    c = x - x.mean()
    se = math.sqrt((np.mean(c**4) - np.mean(c**2) ** 2) / x.size)
    assert abs(x.var(ddof=1) - target) / se <= 3


def test_mean_rate_counts_only_large_jumps():
    comp = JumpComponent(1.5, [0.5, 2.0], [0.5, 0.5])
    model = LevyModel(0.3, 0.0, (comp,), 1.0)
    assert model.mean_rate() == pytest.approx(0.3 + 1.5 * 0.5 * 2.0)


def test_sampling_is_deterministic(jump_model):
    a = sample_paths(jump_model, 8, 5000, seed=7)
    b = sample_paths(jump_model, 8, 5000, seed=7, workers=3)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.dW, b.dW)
    assert np.array_equal(a.jump_time, b.jump_time)


def test_values_rebuild_from_increments(jump_model):
    batch = sample_paths(jump_model, 16, 500, seed=4)
    assert np.allclose(batch.rebuilt_values(), batch.values, atol=1e-12)
    assert np.all(batch.values[:, 0] == 0)
    assert np.all((batch.jump_time > 0) & (batch.jump_time <= 1.0))


def test_brownian_and_jump_counts_uncorrelated(jump_model):
    batch = sample_paths(jump_model, 10, 40_000, seed=5)
    w = batch.dW.sum(axis=1)
    n = np.bincount(batch.jump_path, minlength=batch.n_paths).astype(float)
    prod = (w - w.mean()) * (n - n.mean())
    assert zscore(prod, 0.0) <= 3


def test_invalid_model_parameters():
    with pytest.raises(ParameterError):
        LevyModel(float("nan"), 1.0, (), 1.0)
    with pytest.raises(ParameterError):
        LevyModel(0.0, -1.0, (), 1.0)
    with pytest.raises(ParameterError):
        JumpComponent(float("inf"), [1.0], [1.0])


def test_sampler_failure_is_reported():
    bad = JumpComponent(5.0, [1.0], [1.0], sampler=lambda rng, n: np.full(n + 1, 1.0))
    with pytest.raises(SamplerError):
        sample_paths(LevyModel(0.0, 1.0, (bad,), 1.0), 4, 100, seed=0)


def test_shift_adds_v_at_terminal(jump_model):
    path = sample_paths(jump_model, 10, 3, seed=6).path(1)
    shifted = shift_path(path, 0.35, 0.7)
    assert shifted.values[-1] == pytest.approx(path.values[-1] + 0.7, abs=1e-15)
    assert (0.35, 0.7) in shifted.jump_events
    assert len(shifted.jump_events) == len(path.jump_events) + 1


def test_shift_and_unshift_recover_values(jump_model):
    batch = sample_paths(jump_model, 10, 50, seed=6)
    back = shift_batch(shift_batch(batch, 0.4, 1.3), 0.4, -1.3)
    assert np.allclose(back.values, batch.values, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(r=st.floats(0.0, 1.0), v=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-6))
def test_shift_commutes_with_grid_functionals(r, v):
    model = LevyModel(0.1, 1.0, (JumpComponent.symmetric(1.0),), 1.0)
    batch = sample_paths(model, 12, 40, seed=9)
    shifted = shift_batch(batch, r, v)
    external = batch.values + v * (batch.grid >= r)
    assert np.array_equal(shifted.values, external)
    # running max is 1-Lipschitz under the uniform perturbation
    assert np.all(np.abs(shifted.values.max(axis=1) - batch.values.max(axis=1)) <= abs(v) + 1e-12)


def test_shift_outside_horizon(jump_model):
    path = sample_paths(jump_model, 4, 1, seed=0).path(0)
    with pytest.raises(RangeError):
        shift_path(path, 1.5, 1.0)


def test_cameron_martin_identity_and_linear_shift(brownian_model):
    batch = sample_paths(brownian_model, 10, 100, seed=10)
    h = CameronMartinDirection.constant(batch.grid)
    same = cameron_martin_shift(batch, h, 0.0)
    assert np.array_equal(same.values, batch.values)
    moved = cameron_martin_shift(batch, h, 0.25)
    assert np.allclose(moved.values[:, -1] - batch.values[:, -1], 0.25, atol=1e-14)


def test_cameron_martin_leaves_jumps(jump_model):
    batch = sample_paths(jump_model, 10, 200, seed=11)
    h = CameronMartinDirection.from_function(batch.grid, lambda t: math.sin(3 * t))
    moved = cameron_martin_shift(batch, h, 0.8)
    assert np.array_equal(moved.jump_time, batch.jump_time)
    assert np.array_equal(moved.jump_size, batch.jump_size)


def test_cameron_martin_grid_mismatch(brownian_model):
    batch = sample_paths(brownian_model, 10, 5, seed=0)
    h = CameronMartinDirection.constant(np.linspace(0, 1, 6))
    with pytest.raises(GridError):
        cameron_martin_shift(batch, h, 1.0)


def test_direction_running_integral():
    grid = np.linspace(0, 1, 5)
    h = CameronMartinDirection(grid, [1.0, -2.0, 0.5, 3.0])
    assert h.g_h[0] == 0.0
    assert np.allclose(h.g_h, [0, 0.25, -0.25, -0.125, 0.625])
    assert h.norm_sq == pytest.approx(0.25 * (1 + 4 + 0.25 + 9))


def test_girsanov_density(brownian_model):
    batch = sample_paths(brownian_model, 20, 50_000, seed=12)
    zero = CameronMartinDirection.constant(batch.grid, 0.0)
    assert np.all(girsanov_density(batch, zero) == 1.0)
    h = CameronMartinDirection.from_function(batch.grid, lambda t: 1.0 - t)
    dens = girsanov_density(batch, h)
    assert np.all(dens > 0)
    assert zscore(dens, 1.0) <= 3
    pull = girsanov_density(batch, h, convention="pullback")
    assert np.allclose(pull, np.exp(-h.norm_sq) / dens)


def test_girsanov_two_sides_independent_runs(jump_model):
    a = sample_paths(jump_model, 20, 50_000, seed=13)
    b = sample_paths(jump_model, 20, 50_000, seed=14)
    h = CameronMartinDirection.constant(a.grid, 0.5)
    lhs = cameron_martin_shift(a, h, 1.0).values[:, -1]
    rhs = b.values[:, -1] * girsanov_density(b, h)
    se = math.sqrt(lhs.var(ddof=1) / lhs.size + rhs.var(ddof=1) / rhs.size)
    assert abs(lhs.mean() - rhs.mean()) / se <= 3


def test_forward_trivial_cases(jump_model):
    batch = sample_paths(jump_model, 10, 50, seed=15)
    zero = lambda psi: np.zeros_like(psi)
    spec = ForwardSdeSpec(zero, zero, lambda psi, x: np.zeros(np.broadcast(psi, x).shape), 1.5)
    assert np.all(simulate_forward(spec, batch) == 1.5)
    spec = ForwardSdeSpec.zero_jumps(zero, lambda psi: np.ones_like(psi), 0.5)
    assert np.allclose(simulate_forward(spec, batch), 0.5 + batch.W, atol=1e-14)


def test_forward_geometric_mean_refines(brownian_model):
    mu, s = 0.8, 0.3
    spec = ForwardSdeSpec.zero_jumps(lambda p: mu * p, lambda p: s * p, 1.0)
    errs = []
    for n in (4, 8, 16):
        batch = sample_paths(brownian_model, n, 40_000, seed=16)
        psi_T = simulate_forward(spec, batch)[:, -1]
        # Euler mean is (1 + mu dt)^n exactly, so the MC check has no bias
        assert zscore(psi_T, (1 + mu / n) ** n) <= 3
        errs.append(math.exp(mu) - (1 + mu / n) ** n)
    assert 1.6 < errs[0] / errs[1] < 2.2 and 1.6 < errs[1] / errs[2] < 2.2


def test_forward_divergence_names_step(brownian_model):
    batch = sample_paths(brownian_model, 10, 5, seed=0)
    spec = ForwardSdeSpec.zero_jumps(lambda p: np.where(np.abs(p) > 0, np.inf, 1.0), lambda p: 0 * p, 0.0)
    with pytest.raises(DivergenceError) as err:
        simulate_forward(spec, batch)
    assert err.value.step == 2


def test_forward_beta_bound_enforced(jump_model):
    batch = sample_paths(jump_model, 10, 500, seed=17)
    zero = lambda psi: np.zeros_like(psi)
    spec = ForwardSdeSpec(zero, zero, lambda psi, x: 2.0 * x + 0 * psi, 0.0, beta_bound=1.0)
    with pytest.raises(ParameterError):
        simulate_forward(spec, batch)
