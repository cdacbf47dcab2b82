import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import zscore
from levybsde.chaos import (
    Box,
    Kernel1,
    Kernel2,
    MeasureSpec,
    integrate_M1,
    integrate_M2,
    m_integral,
    symmetrized_norm_sq,
)
from levybsde.errors import KernelError, MarkError
from levybsde.levy import sample_paths


@pytest.fixture
def spec(jump_model):
    return MeasureSpec.from_model(jump_model)


def test_total_mass(spec):
    assert spec.total_mass() == pytest.approx(1.0 * (1.0 + 2.0))
    assert np.all(spec.mu >= 0)


def test_brownian_indicator_integral(spec):
    f = Kernel1.indicator(Box(0.0, 1.0, (0.0,)), spec)
    assert m_integral(f) == pytest.approx(1.0)


def test_identity_on_jump_marks(spec):
    f = Kernel1.from_function([0.0, 1.0], spec, lambda t, x: x)
    assert m_integral(f) == pytest.approx(2.0)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 7), vals=st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_refinement_leaves_integral_unchanged(n, vals):
    spec = MeasureSpec(1.0, np.array([-1.0, 1.0]), np.array([1.0, 1.0]), 1.0)
    f = Kernel1(np.array([0.0, 0.5, 1.0]), np.reshape(vals, (2, 3)), spec)
    assert m_integral(f.refine(n)) == pytest.approx(m_integral(f), rel=1e-12, abs=1e-12)
    assert m_integral(f.refine(n), squared=False) == pytest.approx(m_integral(f, squared=False), abs=1e-12)


def test_unknown_mark(spec):
    with pytest.raises(MarkError):
        Kernel1.indicator(Box(0.0, 1.0, (2.0,)), spec)


def test_M1_brownian_channel_is_sigma_W(jump_model, spec):
    batch = sample_paths(jump_model, 10, 200, seed=1)
    f = Kernel1.indicator(Box(0.0, 1.0, (0.0,)), spec)
    assert np.allclose(integrate_M1(f, batch, jump_model), batch.sigma * batch.W[:, -1], atol=1e-13)


def test_M1_jump_identity_is_compensated_sum(jump_model, spec):
    batch = sample_paths(jump_model, 10, 200, seed=2)
    f = Kernel1.from_function([0.0, 1.0], spec, lambda t, x: x if x != 0 else 0.0)
    compensator = 1.0 * float(spec.marks @ spec.weights)
    assert np.allclose(integrate_M1(f, batch, jump_model), batch.jump_sum[:, -1] - compensator, atol=1e-13)


def test_M1_rejects_off_mark_jumps(spec):
    from levybsde.levy import JumpComponent, LevyModel

    other = LevyModel(0.0, 1.0, (JumpComponent.symmetric(2.0, 0.5),), 1.0)
    batch = sample_paths(other, 10, 200, seed=3)
    f = Kernel1.indicator(Box(0.0, 1.0, (1.0,)), spec)
    with pytest.raises(MarkError):
        integrate_M1(f, batch)


def test_M1_isometry(jump_model, spec):
    batch = sample_paths(jump_model, 20, 50_000, seed=4)
    f = Kernel1.from_function(np.linspace(0, 1, 5), spec, lambda t, x: 1 + t + 0.5 * x)
    assert zscore(integrate_M1(f, batch, jump_model) ** 2, m_integral(f)) <= 3


def test_M1_is_bilinear_exactly(jump_model, spec):
    batch = sample_paths(jump_model, 10, 500, seed=5)
    f = Kernel1.from_function([0.0, 0.5, 1.0], spec, lambda t, x: t + x)
    g = Kernel1.from_function([0.0, 0.5, 1.0], spec, lambda t, x: 1.0 - x * x)
    lhs = integrate_M1(2.0 * f + g, batch)
    rhs = 2.0 * integrate_M1(f, batch) + integrate_M1(g, batch)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_M2_single_product(jump_model, spec):
    batch = sample_paths(jump_model, 10, 300, seed=6)
    b1, b2 = Box(0.0, 0.5, (0.0, 1.0)), Box(0.5, 1.0, (-1.0,))
    f = Kernel2(((1.0, b1, b2),), spec)
    expect = integrate_M1(Kernel1.indicator(b1, spec), batch) * integrate_M1(Kernel1.indicator(b2, spec), batch)
    assert np.allclose(integrate_M2(f, batch), expect, atol=1e-13)


def test_M2_overlap_rejected(spec):
    with pytest.raises(KernelError):
        Kernel2(((1.0, Box(0.0, 0.6, (0.0,)), Box(0.5, 1.0, (0.0, 1.0))),), spec)


def test_M2_moments(jump_model, spec):
    batch = sample_paths(jump_model, 20, 60_000, seed=7)
    f = Kernel2(((1.0, Box(0.0, 0.5, (0.0,)), Box(0.5, 1.0, (0.0, 1.0))),
                 (2.0, Box(0.0, 0.25, (1.0, -1.0)), Box(0.25, 1.0, (0.0,)))), spec)
    g = Kernel1.from_function([0.0, 1.0], spec, lambda t, x: 1.0 + x)
    i2 = integrate_M2(f, batch, jump_model)
    assert zscore(i2, 0.0) <= 3
    assert zscore(integrate_M1(g, batch, jump_model) * i2, 0.0) <= 3
    assert zscore(i2**2, 2 * symmetrized_norm_sq(f)) <= 3
