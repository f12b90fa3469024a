import numpy as np
import pytest
from hypothesis import given, strategies as st

from kgreduce.fourier_core import LatticeBox, TorusFunction
from kgreduce.toeplitz_ops import ToeplitzOperator, apply, compose
from kgreduce.torus_diffeo import (
    build_L, compose_function, composition_operator, diffeo_couple, dx_sup, invert_diffeo,
    roundtrip_residual, szego_commutator,
)

BOX = LatticeBox(1, 4, 8)


def odd_alpha(eps, box=BOX):
    return TorusFunction.from_callable(box, lambda phi, x: eps * (np.sin(x) + 0.5 * np.cos(phi[0]) * np.sin(2 * x)))


def test_inverse_roundtrip_improves_with_box():
    coarse = roundtrip_residual(invert_diffeo(odd_alpha(0.05)))
    fine = roundtrip_residual(invert_diffeo(odd_alpha(0.05, LatticeBox(1, 8, 16))))
    assert fine < 1e-3 * coarse


def test_constant_shift_inverts_to_negative_shift():
    alpha = TorusFunction.constant(BOX, 0.3)
    d = invert_diffeo(alpha)
    assert np.allclose(d.alpha_inv.coeffs, (-alpha).coeffs, atol=1e-12)


def test_complex_alpha_rejected():
    with pytest.raises(ValueError):
        invert_diffeo(TorusFunction.constant(BOX, 0.1j))


def test_dx_sup_of_sine():
    alpha = TorusFunction.from_callable(BOX, lambda phi, x: 0.2 * np.sin(3 * x))
    assert np.isclose(dx_sup(alpha), 0.6, rtol=1e-6)


def test_compose_function_with_shift():
    u = TorusFunction.from_callable(BOX, lambda phi, x: np.cos(x) * np.cos(phi[0]))
    shifted = compose_function(u, TorusFunction.constant(BOX, 0.4))
    expected = TorusFunction.from_callable(BOX, lambda phi, x: np.cos(x + 0.4) * np.cos(phi[0]))
    assert np.allclose(shifted.coeffs, expected.coeffs, atol=1e-13)


def test_composition_operator_acts_by_composition():
    box = LatticeBox(1, 4, 24)
    alpha = odd_alpha(0.01, box)
    C = composition_operator(invert_diffeo(alpha))
    u = TorusFunction.from_callable(box, lambda phi, x: np.cos(2 * x))
    got = apply(C, u)
    want = compose_function(u, alpha)
    K = box.K_x
    assert np.max(np.abs((got.coeffs - want.coeffs)[..., K - 6:K + 7])) < 1e-10


def test_composition_inverse():
    box = LatticeBox(1, 3, 24)
    d = invert_diffeo(odd_alpha(0.01, box))
    C = composition_operator(d)
    Ci = composition_operator(d, direction="inv")
    prod = compose(C, Ci)
    K = box.K_x
    gap = prod.entries - ToeplitzOperator.identity(box, prod.band).entries
    assert np.max(np.abs(gap[..., K - 8:K + 9, K - 8:K + 9])) < 1e-9


def test_build_L_inverse_and_conjugate():
    box = LatticeBox(1, 3, 16)
    ap = odd_alpha(1e-3, box)
    L, L_inv, report = build_L(ap, -ap.reflect_x())
    prod = compose(L, L_inv)
    gap = prod.entries - type(prod).identity(box, prod.band).entries
    assert np.max(np.abs(gap)) < 1e-10
    assert report["conj_L_gap"] < 1e-12


def test_build_L_rejects_bad_parity():
    ap = TorusFunction.from_callable(BOX, lambda phi, x: 1e-3 * (np.sin(x) + np.cos(x) * np.sin(phi[0])))
    with pytest.raises(ValueError, match="parity"):
        build_L(ap, ap)


def test_szego_commutator_support():
    d = invert_diffeo(odd_alpha(1e-2, LatticeBox(1, 3, 16)))
    _, info = szego_commutator(d, sigma=1)
    assert info["support_ok"]
    # the commutator only lives on columns with small |j|
    prof = info["xi_profile"]
    assert np.max(prof[8:]) < 1e-6 * np.max(prof)


def test_diffeo_couple_exponent_condition():
    d = invert_diffeo(odd_alpha(1e-2))
    with pytest.raises(ValueError, match="exponent"):
        diffeo_couple(d, 1.0, 1.0, 1.0, 0.0)
    _, rep = diffeo_couple(d, 1.0, 3.0, 2.0, 0.0)
    assert rep["norm_q0"] > 0


@given(st.floats(-0.2, 0.2), st.floats(-0.1, 0.1))
def test_inverse_of_inverse_is_original(a, b):
    alpha = TorusFunction.from_callable(BOX, lambda phi, x: a * np.sin(x) + b * np.cos(phi[0]) * np.cos(x))
    d = invert_diffeo(alpha)
    back = invert_diffeo(d.alpha_inv)
    assert np.allclose(back.alpha_inv.coeffs, alpha.coeffs, atol=1e-6)


@given(st.floats(-0.2, 0.2))
def test_composition_of_diffeo_and_inverse(a):
    alpha = TorusFunction.from_callable(BOX, lambda phi, x: a * np.sin(x) * (1 + 0.3 * np.cos(phi[0])))
    d = invert_diffeo(alpha)
    u = TorusFunction.from_callable(BOX, lambda phi, x: np.sin(x) + np.cos(2 * x))
    # (u o (id + alpha)) o (id + alpha_inv) = u, checked on the grid
    round_trip = compose_function(compose_function(u, alpha, (33, 129)), d.alpha_inv, (33, 129))
    assert np.allclose(round_trip.coeffs, u.coeffs, atol=1e-6)
