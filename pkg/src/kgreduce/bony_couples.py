"""Bony-smoothing couples (M, R) on a finite section of the (l, j) lattice.

The split keeps in M the entries with
``|l - l'| + |j - j'| < (|l| + |j|) / 2`` (row index ``(l, j)``).  That condition
depends on the absolute frequencies, so M and R are not Toeplitz in time; both
are held as dense matrices on the section ``|l|_inf <= K_sec`` with rows
ordered like :meth:`ToeplitzOperator.section`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fourier_core import LatticeBox, centered, s_star as default_s_star
from .toeplitz_ops import NormEstimate, _Toeplitz, decay_norm, filter_ops, weighted_norm

P_GRID = 5


@dataclass(frozen=True)
class Section:
    """Finite section |l|_inf <= K_sec of the lattice, with ncomp components per mode."""

    box: LatticeBox
    K_sec: int
    ncomp: int = 1

    @property
    def size(self) -> int:
        return len(self.box.ells(self.K_sec)) * self.ncomp * self.box.n_x

    def _grid(self):
        ells = self.box.ells(self.K_sec)
        n = self.box.n_x
        ell_idx = np.repeat(np.arange(len(ells)), self.ncomp * n)
        j = np.tile(np.tile(centered(self.box.K_x), self.ncomp), len(ells))
        comp = np.tile(np.repeat(np.arange(self.ncomp), n), len(ells))
        return ells[ell_idx], j, comp

    def ell_abs(self) -> np.ndarray:
        ell, _, _ = self._grid()
        return np.abs(ell).sum(axis=1)

    def weights(self) -> np.ndarray:
        ell, j, _ = self._grid()
        return np.maximum(1, np.maximum(np.abs(ell).sum(axis=1), np.abs(j))).astype(float)

    def bony_mask(self) -> np.ndarray:
        ell, j, _ = self._grid()
        dl = np.abs(ell[:, None, :] - ell[None, :, :]).sum(axis=-1)
        dj = np.abs(j[:, None] - j[None, :])
        size = np.abs(ell).sum(axis=1) + np.abs(j)
        return (dl + dj) < 0.5 * size[:, None]

    def component_mask(self, sigma: int, sigma_p: int):
        _, _, comp = self._grid()
        r = comp == (0 if sigma > 0 else 1)
        c = comp == (0 if sigma_p > 0 else 1)
        return r, c

    def involutions(self):
        """Index permutations for l -> -l, j -> -j and the component swap."""
        count = len(self.box.ells(self.K_sec))
        n = self.box.n_x
        idx = np.arange(self.size).reshape(count, self.ncomp, n)
        flip_l = idx[::-1].ravel()
        flip_j = idx[:, :, ::-1].ravel()
        swap = idx[:, ::-1, :].ravel()
        return flip_l, flip_j, swap


def section_of(op: _Toeplitz, K_sec: int | None = None) -> tuple[np.ndarray, Section]:
    K_sec = op.box.K_phi if K_sec is None else K_sec
    return op.section(K_sec), Section(op.box, K_sec, op.ncomp)


@dataclass(frozen=True, eq=False)
class BonyCouple:
    """A pair (M, R) representing the operator M + R on a finite section."""

    M: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)
    section: Section
    s_star: float
    s1: float

    def __post_init__(self):
        n = self.section.size
        if self.M.shape != (n, n) or self.R.shape != (n, n):
            raise ValueError("couple components must match the section size")
        if not self.s_star <= self.s1:
            raise ValueError("need s_star <= s1")

    @property
    def total(self) -> np.ndarray:
        """The represented operator M + R."""
        return self.M + self.R

    def _like(self, M, R) -> "BonyCouple":
        return type(self)(M, R, self.section, self.s_star, self.s1)

    def __add__(self, other: "BonyCouple") -> "BonyCouple":
        _check(self, other)
        return self._like(self.M + other.M, self.R + other.R)

    def __neg__(self):
        return self._like(-self.M, -self.R)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, scalar):
        return self._like(self.M * scalar, self.R * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return couple_product(self, other)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.total @ vec

    def block(self, sigma: int, sigma_p: int) -> "BonyCouple":
        if self.section.ncomp != 2:
            raise ValueError("not a 2x2 couple")
        r, c = self.section.component_mask(sigma, sigma_p)
        sec = Section(self.section.box, self.section.K_sec, 1)
        return BonyCouple(self.M[np.ix_(r, c)], self.R[np.ix_(r, c)], sec, self.s_star, self.s1)

    def weighted(self, left: float = 0.0, right: float = 0.0) -> "BonyCouple":
        """<D>^{left} (M, R) <D>^{right} with <D> = max(1, |j|) the space weight."""
        _, j, _ = self.section._grid()
        w = np.maximum(1, np.abs(j)).astype(float)
        scale = (w[:, None] ** left) * (w[None, :] ** right)
        return self._like(self.M * scale, self.R * scale)


class BonyCouple2x2(BonyCouple):
    """A couple on the doubled section carrying the (sigma, sigma') blocks."""

    @classmethod
    def from_blocks(cls, blocks: dict) -> "BonyCouple2x2":
        pp = blocks[(1, 1)]
        sec = Section(pp.section.box, pp.section.K_sec, 2)
        M = np.zeros((sec.size, sec.size), dtype=complex)
        R = np.zeros_like(M)
        for (s, sp), cpl in blocks.items():
            r, c = sec.component_mask(s, sp)
            M[np.ix_(r, c)] = cpl.M
            R[np.ix_(r, c)] = cpl.R
        return cls(M, R, sec, pp.s_star, pp.s1)


def _check(a: BonyCouple, b: BonyCouple):
    if a.section != b.section or (a.s_star, a.s1) != (b.s_star, b.s1):
        raise ValueError("couples live on different sections or windows")


def _window(box: LatticeBox, s_star: float | None, s1: float | None) -> tuple[float, float]:
    s_star = default_s_star(box.nu) if s_star is None else s_star
    s1 = s_star + 2.0 if s1 is None else s1
    return s_star, s1


def bony_split(L, K_sec: int | None = None, s_star: float | None = None, s1: float | None = None, section: Section | None = None) -> BonyCouple:
    """Split an operator (Toeplitz, block, or a dense section matrix with ``section``) into (L^B, L^U)."""
    if isinstance(L, _Toeplitz):
        mat, section = section_of(L, K_sec)
    else:
        if section is None:
            raise ValueError("a dense matrix needs its section")
        mat = np.asarray(L, dtype=complex)
    s_star, s1 = _window(section.box, s_star, s1)
    mask = section.bony_mask()
    M = np.where(mask, mat, 0)
    R = np.where(mask, 0, mat)
    cls = BonyCouple2x2 if section.ncomp == 2 else BonyCouple
    return cls(M, R, section, s_star, s1)


def identity_couple(section: Section, s_star: float | None = None, s1: float | None = None) -> BonyCouple:
    s_star, s1 = _window(section.box, s_star, s1)
    return bony_split(np.eye(section.size, dtype=complex), section=section, s_star=s_star, s1=s1)


def majorant_norm(mat: np.ndarray, section: Section, s: float, s_p: float) -> NormEstimate:
    """|A|_{s,s'} on the section; for 2x2 sections the max over the four blocks."""
    w = section.weights()
    if section.ncomp == 1:
        return weighted_norm(mat, w, s, s_p, majorant=True)
    best = NormEstimate(0.0)
    for s_ in (1, -1):
        for sp in (1, -1):
            r, c = section.component_mask(s_, sp)
            est = weighted_norm(mat[np.ix_(r, c)], w[c], s, s_p, majorant=True) if np.any(r) else NormEstimate(0.0)
            # rows and columns share weights because the blocks have identical index sets
            if float(est) > float(best):
                best = est
    return best


def p_grid(A: BonyCouple) -> np.ndarray:
    return np.linspace(A.s_star, A.s1, P_GRID)


def couple_norm(A: BonyCouple, s: float, gamma: float | None = None, family: Sequence[tuple[Sequence[float], BonyCouple]] | None = None) -> float:
    """sup_{p in [s*, s1]} |M|_{p,p} + |R|_{s*,s}, plus the sampled Lipschitz part when a family is given."""
    if not A.s_star - 1e-12 <= s <= A.s1 + 1e-12:
        raise ValueError(f"s={s} outside the window [{A.s_star}, {A.s1}]")
    sup = max(float(majorant_norm(A.M, A.section, p, p)) for p in p_grid(A))
    value = sup + float(majorant_norm(A.R, A.section, A.s_star, s))
    if family:
        if gamma is None:
            raise ValueError("a Lipschitz family needs gamma")
        sup_f = max(couple_norm(c, s) for _, c in family)
        lip = 0.0
        for a in range(len(family)):
            for b in range(a + 1, len(family)):
                (wa, ca), (wb, cb) = family[a], family[b]
                lip = max(lip, _lip_pair(ca - cb, s) / float(np.linalg.norm(np.subtract(wa, wb))))
        value = max(value, sup_f) + gamma * lip
    return value


def _lip_pair(diff: BonyCouple, s: float) -> float:
    s_low = max(diff.s_star, s - 1.0)
    return couple_norm(diff, s_low)


def couple_product(A: BonyCouple, B: BonyCouple) -> BonyCouple:
    """(M1 M2, M1 R2 + R1 M2 + R1 R2)."""
    _check(A, B)
    return A._like(A.M @ B.M, A.M @ B.R + A.R @ B.M + A.R @ B.R)


def couple_commutator(A: BonyCouple, B: BonyCouple) -> BonyCouple:
    return couple_product(A, B) - couple_product(B, A)


def resplit(A: BonyCouple) -> BonyCouple:
    """The Bony-split representative of the operator carried by A."""
    return bony_split(A.total, section=A.section, s_star=A.s_star, s1=A.s1)


def couple_invert(A: BonyCouple, threshold: float = 0.5, tol: float = 1e-15, max_terms: int = 200) -> tuple[BonyCouple, dict]:
    """Inverse of Id + Q by the Neumann series in the couple algebra."""
    ident = identity_couple(A.section, A.s_star, A.s1)
    Q = A - ident
    q = couple_norm(Q, A.s_star)
    if q >= threshold:
        raise ValueError(f"smallness violated: |||Q|||_s* = {q:.3g} >= {threshold}")
    term = ident
    inv = ident
    for k in range(1, max_terms):
        term = couple_product(-Q, term)
        inv = inv + term
        if np.max(np.abs(term.total)) <= tol * (1 + q):
            break
    else:
        raise ValueError("Neumann series did not converge")
    residual = float(np.max(np.abs(inv.total @ A.total - np.eye(A.section.size))))
    s = A.s1
    bound = {
        "q_s_star": q,
        "q_s": couple_norm(Q, s),
        "inverse_minus_id_s": couple_norm(inv - ident, s),
        "residual": residual,
        "terms": k,
    }
    return inv, bound


def exp_couple(Q: BonyCouple, tol: float = 1e-16, max_terms: int = 200) -> BonyCouple:
    """sum_k Q^k / k! in the couple algebra."""
    ident = identity_couple(Q.section, Q.s_star, Q.s1)
    term = ident
    out = ident
    for k in range(1, max_terms):
        term = couple_product(Q, term) * (1.0 / k)
        out = out + term
        if np.max(np.abs(term.total)) <= tol:
            return out
    raise ValueError("exponential series did not converge")


def symmetrize_couple(A: BonyCouple, kinds: Sequence[str]) -> BonyCouple:
    """Average both components over the involutions encoding the requested structures.

    kinds: ``real_to_real``, ``reversible``, ``reversibility_preserving``, ``parity_preserving``.
    """
    flip_l, flip_j, swap = A.section.involutions()
    lj = flip_l[swap][flip_j] if A.section.ncomp == 2 else flip_l[flip_j]
    ls = flip_l[swap] if A.section.ncomp == 2 else flip_l

    def perm(X, p):
        return X[np.ix_(p, p)]

    ops = {
        "real_to_real": lambda X: np.conj(perm(X, lj)),
        "reversible": lambda X: -perm(X, ls),
        "reversibility_preserving": lambda X: perm(X, ls),
        "parity_preserving": lambda X: perm(X, flip_j),
    }
    M, R = A.M, A.R
    for k in kinds:
        f = ops[k]
        M, R = 0.5 * (M + f(M)), 0.5 * (R + f(R))
    return A._like(M, R)


def couple_from_pseudo(a, n1: float, n2: float, K_sec: int | None = None, s_star: float | None = None, s1: float | None = None) -> tuple[BonyCouple, dict]:
    """The couple of <D>^{-n1} Op(a) <D>^{-n2}; needs n1 + n2 equal to the order of a."""
    from .pseudo_ops import quantize

    if abs(n1 + n2 - a.order_m) > 1e-12:
        raise ValueError(f"order mismatch: n1 + n2 = {n1 + n2} but the symbol has order {a.order_m}")
    op = quantize(a)
    op = filter_ops(op, "japD_pow", n=-n1, side="left")
    op = filter_ops(op, "japD_pow", n=-n2, side="right")
    cpl = bony_split(op, K_sec, s_star, s1)
    report = {"decay_norm_s_star": decay_norm(op, cpl.s_star), "decay_norm_s1": decay_norm(op, cpl.s1)}
    return cpl, report


def operator_couple(op: _Toeplitz, K_sec: int | None = None, s_star: float | None = None, s1: float | None = None) -> BonyCouple:
    """Bony split of a Toeplitz or block operator (alias used by the pipeline)."""
    return bony_split(op, K_sec, s_star, s1)
