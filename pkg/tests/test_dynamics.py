import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PHYSICS
from deepempc.dynamics import (DiscreteModel, FurutaParams, LinearModel, SingularMassMatrixError,
                               euler_step, furuta_rhs, linearize, mass_matrix, mechanical_energy,
                               wrap_angle, wrap_state)

# Euler-Lagrange equations derived symbolically from the kinetic/potential
# energy with the frozen parameters, evaluated in exact arithmetic.
RHS_ORACLE = np.array([1.0, -2.0, 15.250702052021198910, 9.7960537636307346251])


def test_equilibria_have_zero_derivative(params):
    assert np.array_equal(furuta_rhs(params, np.zeros(4), 0.0), np.zeros(4))
    np.testing.assert_allclose(furuta_rhs(params, [0.0, math.pi, 0.0, 0.0], 0.0), 0.0, atol=1e-12)


def test_rhs_matches_lagrangian_oracle(params):
    d = furuta_rhs(params, np.array([0.3, 0.5, 1.0, -2.0]), 2.0)
    np.testing.assert_allclose(d, RHS_ORACLE, rtol=1e-12)


def test_scalar_and_vector_paths_agree(model, rng):
    X = rng.uniform(-3, 3, (50, 4))
    U = rng.uniform(-6, 6, 50)
    batch = model.step(X, U)
    for x, u, b in zip(X, U, batch):
        np.testing.assert_allclose(model.step(x, u), b, rtol=1e-13, atol=1e-13)


def test_euler_step_arithmetic(model):
    x = np.array([0.3, 0.5, 1.0, -2.0])
    np.testing.assert_allclose(euler_step(model, x, 2.0), x + 0.01 * RHS_ORACLE, rtol=1e-12)


def test_zero_dt_is_identity(params):
    x = np.array([0.2, -1.0, 3.0, 4.0])
    assert np.array_equal(euler_step(DiscreteModel(params, 0.0), x, 5.0), x)


def test_origin_is_fixed_point(model):
    assert np.array_equal(euler_step(model, np.zeros(4), 0.0), np.zeros(4))


def test_mass_matrix_spd_on_grid(params):
    M = mass_matrix(params, np.linspace(-math.pi, math.pi, 721))
    assert np.allclose(M, np.swapaxes(M, -1, -2))
    assert np.linalg.eigvalsh(M).min() > 0


def test_linearize_recovers_linear_model(rng):
    A0 = rng.normal(size=(4, 4))
    B0 = rng.normal(size=(4, 1))
    A, B = linearize(LinearModel(A0, B0), rng.normal(size=4), 0.7)
    np.testing.assert_allclose(A, A0, atol=1e-8)
    np.testing.assert_allclose(B, B0, atol=1e-8)


def test_linearization_structure_at_origin(model):
    A, _ = linearize(model, np.zeros(4), 0.0)
    np.testing.assert_allclose(A[:2, 2:], 0.01 * np.eye(2), atol=1e-9)


def test_linearize_richardson(model):
    x, v = np.array([0.1, 0.4, -0.5, 1.0]), 1.5
    A1, B1 = linearize(model, x, v, h=1e-3)
    A2, B2 = linearize(model, x, v, h=5e-4)
    Aex, Bex = model.jacobians(x[None], [v])
    # central differences: error ~ C h^2, so halving h cuts it about four times
    e1, e2 = np.abs(A1 - Aex[0]).max(), np.abs(A2 - Aex[0]).max()
    assert e2 < 0.3 * e1
    assert np.abs(A2 - Aex[0]).max() < 1e-6 and np.abs(B2 - Bex[0]).max() < 1e-8


def test_complex_step_jacobians_match_finite_differences(model, rng):
    for _ in range(5):
        x, v = rng.uniform(-2, 2, 4), rng.uniform(-6, 6)
        A, B = model.jacobians(x[None], [v])
        Afd, Bfd = linearize(model, x, v)
        np.testing.assert_allclose(A[0], Afd, atol=1e-7)
        np.testing.assert_allclose(B[0], Bfd, atol=1e-7)


def test_energy_conserved_without_dissipation():
    p = dict(PHYSICS, c1=0.0, c2=0.0, Kv=0.0)
    params = FurutaParams.from_dict(p)
    x = np.array([0.0, 0.5, 1.0, 0.0])
    e0 = mechanical_energy(params, x)
    # semi-analytic: integrate the continuous system finely with RK4
    h = 1e-4
    for _ in range(2000):
        k1 = furuta_rhs(params, x, 0.0)
        k2 = furuta_rhs(params, x + 0.5 * h * k1, 0.0)
        k3 = furuta_rhs(params, x + 0.5 * h * k2, 0.0)
        k4 = furuta_rhs(params, x + h * k3, 0.0)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert abs(mechanical_energy(params, x) - e0) < 1e-9 * max(1.0, abs(e0))


def test_friction_dissipates_energy(params):
    x = np.array([0.0, 0.5, 1.0, 0.0])
    e0 = mechanical_energy(params, x)
    m = DiscreteModel(params, 0.001)
    for _ in range(500):
        x = m.step(x, 0.0)
    assert mechanical_energy(params, x) < e0


@pytest.mark.parametrize("field,value", [("m1", 0.0), ("L2", -1.0), ("eta_m", 1.5), ("eta_g", 0.0),
                                         ("Rm", 0.0), ("c1", -0.1)])
def test_invalid_params_rejected(field, value):
    with pytest.raises(ValueError):
        FurutaParams.from_dict(dict(PHYSICS, **{field: value}))


def test_missing_and_unknown_fields():
    d = dict(PHYSICS)
    del d["Kg"]
    with pytest.raises(KeyError, match="Kg"):
        FurutaParams.from_dict(d)
    with pytest.raises(KeyError, match="mass3"):
        FurutaParams.from_dict(dict(PHYSICS, mass3=1.0))


def test_singular_mass_matrix_detected():
    # a massless, inertia-free arm with a pendulum aligned with it makes M singular at q2 = 0
    p = FurutaParams.from_dict(dict(PHYSICS, m1=1e-30, I1=1e-30, l1=1e-30, I2=1e-30))
    with pytest.raises(SingularMassMatrixError):
        furuta_rhs(p, np.zeros(4), 0.0)


def test_negative_dt_rejected(params):
    with pytest.raises(ValueError):
        DiscreteModel(params, -0.01)


@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range_and_equivalence(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


def test_wrap_boundaries():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    x = wrap_state([0.1, 3 * math.pi / 2, 0.0, 0.0])
    assert x[1] == pytest.approx(-math.pi / 2) and x[0] == 0.1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(-6, 6))
def test_step_finite_for_finite_inputs(x, u):
    m = DiscreteModel(FurutaParams.from_dict(PHYSICS))
    assert np.all(np.isfinite(m.step(np.array(x), u)))
