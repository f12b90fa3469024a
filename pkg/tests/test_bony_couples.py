import numpy as np
import pytest
from hypothesis import given, strategies as st

from kgreduce.bony_couples import (
    bony_split, couple_commutator, couple_from_pseudo, couple_invert, couple_norm, couple_product,
    exp_couple, identity_couple, resplit, symmetrize_couple,
)
from kgreduce.fourier_core import LatticeBox, TorusFunction
from kgreduce.pseudo_ops import dm_symbol
from kgreduce.toeplitz_ops import BlockOperator2x2, ToeplitzOperator

BOX = LatticeBox(1, 2, 4)


def random_op(rng, cls=ToeplitzOperator, band=1, scale=1.0):
    n = cls.ncomp * BOX.n_x
    shape = (2 * band + 1,) + (n, n)
    return cls(BOX, scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)), band)


def test_split_is_a_partition(rng):
    A = random_op(rng)
    cpl = bony_split(A)
    assert np.array_equal(cpl.total, A.section())
    assert not np.any((cpl.M != 0) & (cpl.R != 0))


def test_diagonal_multiplier_is_paraproduct_off_the_zero_mode():
    D = dm_symbol(BOX, 1.0)
    cpl, _ = couple_from_pseudo(D, 0.5, 0.5)
    # only the (l, j) = (0, 0) diagonal entry has no frequency to dominate
    assert np.count_nonzero(cpl.R) == 1


def test_couple_from_pseudo_order_mismatch():
    with pytest.raises(ValueError):
        couple_from_pseudo(dm_symbol(BOX, 1.0), 0.0, 0.0)


def test_identity_couple_matches_split_identity():
    cpl = bony_split(ToeplitzOperator.identity(BOX))
    ident = identity_couple(cpl.section)
    assert np.array_equal(cpl.M, ident.M) and np.array_equal(cpl.R, ident.R)
    assert 1.0 - 1e-9 <= couple_norm(ident, ident.s_star) <= 2.0 + 1e-9


def smooth_multiplier(scale):
    u = TorusFunction.from_callable(BOX, lambda phi, x: scale * np.cos(phi[0]) * np.cos(x))
    return ToeplitzOperator.multiplication(u, band=1)


def test_invert_small_perturbation():
    A = bony_split(ToeplitzOperator.identity(BOX, 1) + smooth_multiplier(1e-3))
    inv, info = couple_invert(A)
    assert info["residual"] < 1e-12
    assert np.allclose(inv.total @ A.total, np.eye(A.section.size), atol=1e-12)


def test_invert_rejects_large_perturbation():
    A = bony_split(ToeplitzOperator.identity(BOX, 1) + smooth_multiplier(2.0))
    with pytest.raises(ValueError, match="smallness"):
        couple_invert(A)


def test_exp_of_commuting_parts(rng):
    Q = bony_split(random_op(rng, scale=1e-2))
    E = exp_couple(Q)
    from scipy.linalg import expm
    assert np.allclose(E.total, expm(Q.total), atol=1e-13)


def test_symmetrize_projects_onto_structure(rng):
    A = random_op(rng, BlockOperator2x2)
    kinds = ["real_to_real", "reversibility_preserving", "parity_preserving"]
    sym = symmetrize_couple(bony_split(A), kinds)
    again = symmetrize_couple(sym, kinds)
    assert np.allclose(sym.total, again.total, atol=1e-14)


@given(st.integers(0, 2 ** 31))
def test_product_represents_matrix_product(seed):
    rng = np.random.default_rng(seed)
    A, B = bony_split(random_op(rng)), bony_split(random_op(rng))
    assert np.allclose(couple_product(A, B).total, A.total @ B.total, atol=1e-10)


@given(st.integers(0, 2 ** 31))
def test_commutator_is_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    A, B = bony_split(random_op(rng)), bony_split(random_op(rng))
    assert np.allclose(couple_commutator(A, B).total, -couple_commutator(B, A).total, atol=1e-10)


@given(st.integers(0, 2 ** 31))
def test_resplit_preserves_operator(seed):
    rng = np.random.default_rng(seed)
    A, B = bony_split(random_op(rng)), bony_split(random_op(rng))
    P = couple_product(A, B)
    assert np.allclose(resplit(P).total, P.total)


@given(st.integers(0, 2 ** 31), st.floats(0.0, 1.0))
def test_norm_is_subadditive(seed, t):
    rng = np.random.default_rng(seed)
    A, B = bony_split(random_op(rng)), bony_split(random_op(rng))
    s = A.s_star
    lhs = couple_norm(A * t + B * (1 - t), s)
    rhs = t * couple_norm(A, s) + (1 - t) * couple_norm(B, s)
    assert lhs <= rhs * (1 + 1e-6) + 1e-12
