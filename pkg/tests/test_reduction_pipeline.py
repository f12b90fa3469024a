import numpy as np
import pytest
from hypothesis import given, strategies as st

from kgreduce.fourier_core import LatticeBox, TorusFunction
from kgreduce.reduction_pipeline import (
    KGCoefficients, assemble_conjugator, basis_labels, build_system, cos_sin_basis, eigen_diagonal,
    inner, min_divisor, outer, residue_closed_form, residue_symbol, run_pipeline, structure_report,
    GENERATOR_KINDS,
)
from kgreduce.toeplitz_ops import BlockOperator2x2, structure_check

SMALL = LatticeBox(1, 4, 6)
OMEGA = (0.1657528764382191,)


def test_parity_violation_rejected():
    bad = TorusFunction.from_callable(SMALL, lambda p, x: 1e-3 * np.sin(x))
    z = TorusFunction.zeros(SMALL)
    with pytest.raises(ValueError, match="a2"):
        KGCoefficients(bad, z, z)


def test_mass_must_be_positive():
    with pytest.raises(ValueError):
        KGCoefficients.zero(SMALL, 0.0)


def test_zero_coefficients_reduce_trivially():
    res = run_pipeline(KGCoefficients.zero(SMALL), OMEGA)
    lp, lm = res.normal.eigenvalues()
    dm = np.sqrt(np.arange(SMALL.K_x + 1) ** 2 + 1.0)
    assert res.normal.c_frak == 0
    assert np.max(np.abs(res.normal.r)) == 0
    assert np.allclose(lp, dm, atol=1e-15) and np.allclose(lm, dm, atol=1e-15)
    assert res.report["conjugator_identity_gap"] < 1e-12


def test_inner_outer_are_inverse():
    G = build_system(KGCoefficients.reference(SMALL, 1e-3), OMEGA).generator
    assert np.allclose(outer(inner(G)).entries, G.entries)


def test_initial_generator_is_reversible():
    G = build_system(KGCoefficients.reference(SMALL, 1e-3), OMEGA).generator
    assert structure_report(G, GENERATOR_KINDS)["ok"]


def test_cos_sin_basis_is_orthogonal():
    U = cos_sin_basis(5)
    assert np.allclose(U.T @ U, np.eye(11))
    assert len(basis_labels(5)) == 11


def test_residue_closed_form():
    xi = np.arange(-20, 21)
    for sigma in (1, -1):
        assert np.allclose(residue_symbol(xi, sigma, 1.3), residue_closed_form(xi, sigma, 1.3), atol=1e-15)


def test_min_divisor_vanishes_at_resonance():
    # omega = lambda_1 - lambda_0 makes l = 1 resonant
    w = np.sqrt(2) - 1
    assert min_divisor((w,), SMALL) < 1e-12
    assert min_divisor(OMEGA, SMALL) > 1e-3


def test_small_instance_reduces(ref_omega):
    c = KGCoefficients.reference(SMALL, 1e-3)
    res = run_pipeline(c, ref_omega, tol=1e-30, max_steps=5)
    eps = res.report["eps_sequence"]
    assert eps[-1] < 1e-25
    assert res.report["conjugation_residual"] < 1e-12
    F, F_inv = assemble_conjugator(res.transforms)
    prod = F @ F_inv
    assert np.max(np.abs(prod.entries - BlockOperator2x2.identity(SMALL, prod.band).entries)) < 1e-10


def test_eigenvalue_shift_is_second_order(ref_omega):
    lam = []
    for eps in (1e-3, 2e-3):
        res = run_pipeline(KGCoefficients.reference(SMALL, eps), ref_omega, tol=1e-25, max_steps=4, check_residual=False)
        lam.append(eigen_diagonal(res.normal) - eigen_diagonal(run_pipeline(KGCoefficients.zero(SMALL), ref_omega).normal))
    ratio = np.max(np.abs(lam[1])) / np.max(np.abs(lam[0]))
    assert 3.5 < ratio < 4.5


def test_reference_stages_preserve_structure(ref_result):
    for stage, diag in ref_result.report["stages"].items():
        for part in diag["structure"].values():
            assert part["ok"], stage
            assert max(part["violations"].values()) <= 1e-10
    assert ref_result.report["conjugator_structure"]["ok"]


@given(st.floats(1e-4, 2e-3))
def test_final_generator_is_structured(eps):
    box = LatticeBox(1, 3, 4)
    res = run_pipeline(KGCoefficients.reference(box, eps), OMEGA, tol=1e-20, max_steps=3, check_residual=False)
    rep = structure_check(res.state.generator, 1e-10)
    assert rep["real_to_real"] and rep["reversible"] and rep["parity_preserving"]
    lp, lm = res.normal.eigenvalues()
    assert np.all(np.isfinite(lp)) and np.all(lp > 0) and np.all(lm > 0)
