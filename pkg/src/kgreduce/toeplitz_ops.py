"""Toeplitz-in-time operators on the truncated lattice and their 2x2 block matrices.

An operator is stored by its matrix-valued Fourier coefficients in time:
``entries[l_1+L, ..., l_nu+L, a, b] = A_{j_a}^{j_b}(l)`` with band ``L``
(twice the function box by default).  Block operators use the same layout
with rows and columns ordered ``(+, j=-K..K), (-, j=-K..K)``.

Compositions, inverses and exponentials are computed pointwise in time on a
uniform phi-grid and transformed back, which is exact up to the band
truncation whose discarded mass is accumulated in ``budget``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .fourier_core import (
    LatticeBox,
    TorusFunction,
    centered,
    coeffs_to_grid,
    grid_to_coeffs,
    omega_dot_ell,
    pad_centered,
)


class NormEstimate(float):
    """A float carrying the convergence flag of the iteration that produced it."""

    def __new__(cls, value: float, converged: bool = True, iterations: int = 0):
        obj = super().__new__(cls, value)
        obj.converged = converged
        obj.iterations = iterations
        return obj


def jap_j(K: int) -> np.ndarray:
    """<j> = max(1, |j|) for |j| <= K."""
    return np.maximum(1, np.abs(centered(K))).astype(float)


def dm_values(K: int, mass: float) -> np.ndarray:
    return np.sqrt(centered(K).astype(float) ** 2 + mass)


class _Toeplitz:
    ncomp = 1

    def __init__(self, box: LatticeBox, entries: np.ndarray, band: int | None = None, budget: float = 0.0):
        band = 2 * box.K_phi if band is None else int(band)
        n = self.ncomp * box.n_x
        shape = (2 * band + 1,) * box.nu + (n, n)
        entries = np.array(entries, dtype=complex)
        if entries.shape != shape:
            raise ValueError(f"entries shape {entries.shape} does not match {shape}")
        entries.flags.writeable = False
        self.box = box
        self.band = band
        self.entries = entries
        self.budget = float(budget)

    # constructors ------------------------------------------------------------
    @classmethod
    def zeros(cls, box: LatticeBox, band: int | None = None):
        band = 2 * box.K_phi if band is None else band
        n = cls.ncomp * box.n_x
        return cls(box, np.zeros((2 * band + 1,) * box.nu + (n, n), dtype=complex), band)

    @classmethod
    def identity(cls, box: LatticeBox, band: int | None = None):
        return cls.constant(box, np.eye(cls.ncomp * box.n_x), band)

    @classmethod
    def constant(cls, box: LatticeBox, matrix: np.ndarray, band: int | None = None):
        """Time-independent operator with the given matrix at l = 0."""
        out = cls.zeros(box, band)
        entries = np.array(out.entries)
        entries[(out.band,) * box.nu] = matrix
        return cls(box, entries, out.band)

    def _new(self, entries, budget=None, band=None):
        return type(self)(self.box, entries, self.band if band is None else band, self.budget if budget is None else budget)

    @property
    def n(self) -> int:
        return self.ncomp * self.box.n_x

    @property
    def phi_axes(self) -> tuple[int, ...]:
        return tuple(range(self.box.nu))

    def zero_index(self) -> tuple:
        return (self.band,) * self.box.nu

    def time_average(self) -> np.ndarray:
        return np.array(self.entries[self.zero_index()])

    def _check(self, other):
        if type(other) is not type(self) or other.box != self.box:
            raise ValueError("box mismatch")

    # linear structure ------------------------------------------------------------
    def __add__(self, other):
        self._check(other)
        band = max(self.band, other.band)
        a = self.with_band(band)
        b = other.with_band(band)
        return a._new(a.entries + b.entries, a.budget + b.budget)

    def __neg__(self):
        return self._new(-self.entries)

    def __sub__(self, other):
        return self + (-other)

    def __mul__(self, scalar):
        return self._new(self.entries * scalar, self.budget * abs(scalar))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return compose(self, other)

    def with_band(self, band: int):
        if band == self.band:
            return self
        out = pad_centered(self.entries, [band] * self.box.nu, self.phi_axes)
        lost = math.sqrt(max(float(np.sum(np.abs(self.entries) ** 2) - np.sum(np.abs(out) ** 2)), 0.0))
        return type(self)(self.box, out, band, self.budget + lost)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.entries)))

    def ell_profile(self) -> np.ndarray:
        """max |entry| for each |l|_1 from 0 to nu*band."""
        ell = self.box.ell_norm(self.band)
        mags = np.max(np.abs(self.entries), axis=(-1, -2))
        return np.array([np.max(mags[ell == k]) if np.any(ell == k) else 0.0 for k in range(self.box.nu * self.band + 1)])

    # time grid ---------------------------------------------------------------
    def default_grid(self) -> int:
        return 4 * self.band + 1

    def to_phi_grid(self, M: int | None = None) -> np.ndarray:
        M = self.default_grid() if M is None else M
        return coeffs_to_grid(self.entries, [M] * self.box.nu, self.phi_axes)

    @classmethod
    def from_phi_grid(cls, box: LatticeBox, values: np.ndarray, band: int | None = None, budget: float = 0.0):
        band = 2 * box.K_phi if band is None else band
        axes = tuple(range(box.nu))
        M = values.shape[0]
        K_full = (M - 1) // 2
        full = grid_to_coeffs(values, [K_full] * box.nu, axes)
        kept = pad_centered(full, [band] * box.nu, axes)
        lost = math.sqrt(max(float(np.sum(np.abs(full) ** 2) - np.sum(np.abs(kept) ** 2)), 0.0)) if band < K_full else 0.0
        return cls(box, kept, band, budget + lost)

    def evaluate(self, phi: Sequence[float]) -> np.ndarray:
        """The matrix A(phi) = sum_l A(l) exp(i l.phi)."""
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        ells = self.box.ells(self.band)
        phases = np.exp(1j * ells @ phi)
        return np.tensordot(phases, self.entries.reshape(len(ells), self.n, self.n), axes=(0, 0))

    # calculus ----------------------------------------------------------------
    def omega_dphi(self, omega: Sequence[float]):
        """Time derivative omega . d_phi, i.e. entries multiplied by i omega.l."""
        w = omega_dot_ell(self.box, omega, self.band)
        return self._new(self.entries * (1j * w)[..., None, None])

    def inverse(self, M: int | None = None):
        vals = np.linalg.inv(self.to_phi_grid(M))
        return type(self).from_phi_grid(self.box, vals, self.band, self.budget)

    def expm(self, M: int | None = None):
        vals = scipy.linalg.expm(self.to_phi_grid(M))
        return type(self).from_phi_grid(self.box, vals, self.band, self.budget)

    def adjoint_pointwise(self):
        """A(phi)^* pointwise in time: entries conj-transposed and l -> -l."""
        flip = (slice(None, None, -1),) * self.box.nu
        return self._new(np.conj(np.swapaxes(self.entries[flip], -1, -2)))

    # sections ----------------------------------------------------------------
    def section(self, K_sec: int | None = None) -> np.ndarray:
        """Dense matrix on the finite section |l|_inf <= K_sec (default K_phi) of the lattice."""
        K_sec = self.box.K_phi if K_sec is None else K_sec
        ells = self.box.ells(K_sec)
        diff = ells[:, None, :] - ells[None, :, :]
        valid = np.all(np.abs(diff) <= self.band, axis=-1)
        idx = tuple(np.clip(diff[..., h], -self.band, self.band) + self.band for h in range(self.box.nu))
        blocks = self.entries[idx] * valid[..., None, None]
        count = len(ells)
        return blocks.transpose(0, 2, 1, 3).reshape(count * self.n, count * self.n)

    def section_weights(self, K_sec: int | None = None) -> np.ndarray:
        """<l,j> on the rows of :meth:`section`."""
        K_sec = self.box.K_phi if K_sec is None else K_sec
        ell = self.box.ell_norm(K_sec).ravel()
        j = np.tile(np.abs(centered(self.box.K_x)), self.ncomp)
        return np.maximum(1, np.maximum(ell[:, None], j[None, :])).astype(float).ravel()

    def section_vector(self, u, K_sec: int | None = None) -> np.ndarray:
        return _section_vector(self, u, K_sec)

    def entry(self, ell, j: int, jp: int, sigma: int = 1, sigma_p: int = 1) -> complex:
        ell = (ell,) if np.isscalar(ell) else tuple(ell)
        if max(abs(e) for e in ell) > self.band:
            return 0j
        a = _row(self, j, sigma)
        b = _row(self, jp, sigma_p)
        return complex(self.entries[tuple(e + self.band for e in ell) + (a, b)])


def _row(op: _Toeplitz, j: int, sigma: int) -> int:
    K = op.box.K_x
    if abs(j) > K:
        raise IndexError("mode outside the box")
    offset = 0 if (op.ncomp == 1 or sigma > 0) else op.box.n_x
    return offset + j + K


class ToeplitzOperator(_Toeplitz):
    """Scalar Toeplitz-in-time operator A_j^{j'}(l)."""

    ncomp = 1

    @classmethod
    def multiplication(cls, u: TorusFunction, band: int | None = None) -> "ToeplitzOperator":
        """Multiplication by u: entries u_{l, j-j'}."""
        box = u.box
        band = 2 * box.K_phi if band is None else band
        c = pad_centered(u.coeffs, [band] * box.nu + [2 * box.K_x], range(box.nu + 1))
        j = centered(box.K_x)
        h = j[:, None] - j[None, :] + 2 * box.K_x
        return cls(box, c[..., h], band, u.budget)

    @classmethod
    def multiplier(cls, box: LatticeBox, values: np.ndarray, band: int | None = None) -> "ToeplitzOperator":
        """Fourier multiplier diag(values[j]) in x, time independent."""
        return cls.constant(box, np.diag(np.asarray(values, dtype=complex)), band)

    def conj(self) -> "ToeplitzOperator":
        """The operator u -> conj(A conj(u)): entries conj(A_{-j}^{-j'}(-l))."""
        flip = (slice(None, None, -1),) * (self.box.nu + 2)
        return self._new(np.conj(self.entries[flip]))

    def to_records(self, tol: float = 0.0) -> list[dict]:
        return _op_records(self, tol)

    @classmethod
    def from_records(cls, box: LatticeBox, records: Iterable[Mapping], band: int | None = None):
        return _op_from_records(cls, box, records, band)


class BlockOperator2x2(_Toeplitz):
    """2x2 matrix (T_sigma^sigma') of Toeplitz operators, stored as one (2n x 2n) array."""

    ncomp = 2

    @classmethod
    def from_blocks(cls, pp: ToeplitzOperator, pm: ToeplitzOperator, mp: ToeplitzOperator, mm: ToeplitzOperator):
        box = pp.box
        band = max(b.band for b in (pp, pm, mp, mm))
        for b in (pm, mp, mm):
            if b.box != box:
                raise ValueError("box mismatch")
        pp, pm, mp, mm = (b.with_band(band) for b in (pp, pm, mp, mm))
        top = np.concatenate([pp.entries, pm.entries], axis=-1)
        bottom = np.concatenate([mp.entries, mm.entries], axis=-1)
        budget = pp.budget + pm.budget + mp.budget + mm.budget
        return cls(box, np.concatenate([top, bottom], axis=-2), band, budget)

    @classmethod
    def diag(cls, a: ToeplitzOperator, b: ToeplitzOperator):
        z = ToeplitzOperator.zeros(a.box, a.band)
        return cls.from_blocks(a, z, z, b)

    @classmethod
    def sigma3(cls, box: LatticeBox, band: int | None = None):
        """E = diag(1, -1)."""
        one = np.ones(box.n_x)
        return cls.constant(box, np.diag(np.concatenate([one, -one])), band)

    @classmethod
    def ones(cls, a: ToeplitzOperator):
        """The operator [[a, a], [a, a]]."""
        return cls.from_blocks(a, a, a, a)

    def block(self, sigma: int, sigma_p: int) -> ToeplitzOperator:
        n = self.box.n_x
        r = slice(0, n) if sigma > 0 else slice(n, 2 * n)
        c = slice(0, n) if sigma_p > 0 else slice(n, 2 * n)
        return ToeplitzOperator(self.box, self.entries[..., r, c], self.band)

    def blocks(self) -> dict:
        return {(s, sp): self.block(s, sp) for s in (1, -1) for sp in (1, -1)}

    def to_records(self, tol: float = 0.0) -> list[dict]:
        return _op_records(self, tol)

    @classmethod
    def from_records(cls, box: LatticeBox, records: Iterable[Mapping], band: int | None = None):
        return _op_from_records(cls, box, records, band)


# ---------------------------------------------------------------------------
# operations


def compose(A: _Toeplitz, B: _Toeplitz, M: int | None = None) -> _Toeplitz:
    """Operator product AB, computed pointwise on a time grid and truncated to the band."""
    A._check(B)
    band = max(A.band, B.band)
    M = M if M is not None else 4 * band + 1
    vals = A.with_band(band).to_phi_grid(M) @ B.with_band(band).to_phi_grid(M)
    return type(A).from_phi_grid(A.box, vals, band, A.budget + B.budget)


def commutator(A: _Toeplitz, B: _Toeplitz) -> _Toeplitz:
    return compose(A, B) - compose(B, A)


def _section_vector(op: _Toeplitz, u, K_sec: int | None = None) -> np.ndarray:
    parts = u if isinstance(u, (tuple, list)) else (u,)
    if len(parts) != op.ncomp:
        raise ValueError(f"expected {op.ncomp} component(s)")
    K_sec = op.box.K_phi if K_sec is None else K_sec
    vecs = []
    for p in parts:
        if p.box.nu != op.box.nu or p.box.K_x != op.box.K_x:
            raise ValueError("box mismatch")
        c = pad_centered(p.coeffs, [K_sec] * op.box.nu, range(op.box.nu))
        vecs.append(c.reshape(-1, op.box.n_x))
    return np.concatenate(vecs, axis=-1).ravel()


def apply(A: _Toeplitz, u):
    """(Au)_{l,j} = sum A_j^{j'}(l-l') u_{l',j'}, truncated to the function box.

    ``u`` is a TorusFunction for a scalar operator and a pair for a block operator.
    """
    parts = u if isinstance(u, (tuple, list)) else (u,)
    if len(parts) != A.ncomp:
        raise ValueError(f"expected {A.ncomp} component(s)")
    for p in parts:
        if p.box != A.box:
            raise ValueError("box mismatch")
    box = A.box
    M = 2 * (A.band + box.K_phi) + 1
    axes = tuple(range(box.nu))
    vec = np.concatenate([p.coeffs for p in parts], axis=-1)
    vals = np.einsum("...ab,...b->...a", A.to_phi_grid(M), coeffs_to_grid(vec, [M] * box.nu, axes))
    out = grid_to_coeffs(vals, [box.K_phi] * box.nu, axes)
    n = box.n_x
    budget = A.budget + sum(p.budget for p in parts)
    results = [TorusFunction(box, out[..., k * n:(k + 1) * n], budget) for k in range(A.ncomp)]
    return results[0] if A.ncomp == 1 else tuple(results)


def conjugate(Phi: _Toeplitz, G: _Toeplitz, omega: Sequence[float], Phi_inv: _Toeplitz | None = None, M: int | None = None):
    """Transform the generator G of omega.d_phi - G under the change of variables Phi.

    Returns ``(G_new, Phi_inv)`` with ``G_new = Phi G Phi^{-1} + (omega.d_phi Phi) Phi^{-1}``.
    The inverse is the exact pointwise matrix inverse unless supplied.
    """
    Phi._check(G)
    band = max(Phi.band, G.band)
    Phi = Phi.with_band(band)
    M = 4 * band + 1 if M is None else M
    P = Phi.to_phi_grid(M)
    if Phi_inv is None:
        Pinv = np.linalg.inv(P)
        Phi_inv = type(Phi).from_phi_grid(Phi.box, Pinv, band, Phi.budget)
    else:
        Pinv = Phi_inv.with_band(band).to_phi_grid(M)
    dP = Phi.omega_dphi(omega).to_phi_grid(M)
    vals = P @ G.with_band(band).to_phi_grid(M) @ Pinv + dP @ Pinv
    return type(G).from_phi_grid(G.box, vals, band, G.budget + Phi.budget), Phi_inv


# ---------------------------------------------------------------------------
# norms


def power_norm(mat: np.ndarray, max_iters: int = 50, rtol: float = 1e-8, seed: int = 0, positive: bool = False) -> NormEstimate:
    """Spectral norm of a dense matrix by power iteration on mat^H mat."""
    if not mat.size or not np.any(mat):
        return NormEstimate(0.0, True, 0)
    rng = np.random.default_rng(seed)
    v = np.ones(mat.shape[1]) if positive else rng.standard_normal(mat.shape[1]) + 1j * rng.standard_normal(mat.shape[1])
    v = v / np.linalg.norm(v)
    est = 0.0
    for it in range(1, max_iters + 1):
        w = mat @ v
        new = float(np.linalg.norm(w))
        z = mat.conj().T @ w
        nz = np.linalg.norm(z)
        if nz == 0:
            return NormEstimate(new, True, it)
        v = z / nz
        if it > 1 and abs(new - est) <= rtol * new:
            return NormEstimate(new, True, it)
        est = new
    return NormEstimate(est, False, max_iters)


def weighted_norm(mat: np.ndarray, weights: np.ndarray, s: float, s_p: float, majorant: bool = False, **kw) -> NormEstimate:
    """||W^{s'} A W^{-s}|| for a dense section matrix with row/column weights ``weights``."""
    B = np.abs(mat) if majorant else mat
    B = (weights[:, None] ** s_p) * B / (weights[None, :] ** s)
    return power_norm(B, positive=majorant, **kw)


def decay_norm(A: _Toeplitz, s: float) -> float:
    """(sum_{p,h} <p,h>^{2s} sup_{j-j'=h} |A_j^{j'}(p)|^2)^{1/2}, max over blocks."""
    box = A.box
    n = box.n_x
    ell = box.ell_norm(A.band)
    j = centered(box.K_x)
    h = (j[:, None] - j[None, :]).ravel()
    hs = centered(2 * box.K_x)
    best = 0.0
    for r in range(A.ncomp):
        for c in range(A.ncomp):
            blk = np.abs(A.entries[..., r * n:(r + 1) * n, c * n:(c + 1) * n]).reshape(ell.shape + (n * n,))
            sup = np.zeros(ell.shape + (len(hs),))
            for k, hv in enumerate(hs):
                sel = h == hv
                sup[..., k] = np.max(blk[..., sel], axis=-1)
            w = np.maximum(1, np.maximum(ell[..., None], np.abs(hs))) ** s
            best = max(best, float(np.sqrt(np.sum((w * sup) ** 2))))
    return best


def operator_norms(A: _Toeplitz, s: float, s_p: float, mode: str = "op", K_sec: int | None = None, **kw) -> NormEstimate:
    """Operator, majorant or decay norm of A from H^s to H^{s'}.

    ``op`` and ``majorant`` act on the finite section |l| <= K_sec; for block
    operators the majorant is the max over the four blocks.
    """
    if s < 0 or s_p < 0:
        raise ValueError("s and s' must be nonnegative")
    if mode == "decay":
        return NormEstimate(decay_norm(A, s))
    if mode not in ("op", "majorant"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "majorant" and A.ncomp == 2:
        ests = [operator_norms(b, s, s_p, mode, K_sec, **kw) for b in A.blocks().values()]
        top = max(ests, key=float)
        return NormEstimate(float(top), all(e.converged for e in ests), max(e.iterations for e in ests))
    mat = A.section(K_sec)
    return weighted_norm(mat, A.section_weights(K_sec), s, s_p, majorant=(mode == "majorant"), **kw)


def filter_ops(A: _Toeplitz, kind: str, **params) -> _Toeplitz:
    """Entrywise reweightings: d_x, d_phi(h), jap_dphi_pow(b), Pi_N(N), Pi_N_perp(N), japD_pow(n, side)."""
    box = A.box
    ell = box.ell_norm(A.band)
    j = np.tile(centered(box.K_x), A.ncomp)
    if kind == "d_x":
        w = np.broadcast_to(1j * (j[:, None] - j[None, :]), A.entries.shape)
    elif kind == "d_phi":
        h = params["h"]
        shape = [1] * box.nu
        shape[h] = -1
        w = (1j * centered(A.band)).reshape(shape)[..., None, None]
    elif kind == "jap_dphi_pow":
        b = params["b"]
        if b < 0:
            raise ValueError("b must be nonnegative")
        w = (np.maximum(1, ell) ** float(b))[..., None, None]
    elif kind in ("Pi_N", "Pi_N_perp"):
        N = params["N"]
        if N < 1:
            raise ValueError("N must be >= 1")
        keep = (ell <= N) if kind == "Pi_N" else (ell > N)
        w = keep.astype(float)[..., None, None]
    elif kind == "japD_pow":
        npow = params["n"]
        jj = np.maximum(1, np.abs(j)) ** float(npow)
        w = jj[:, None] if params.get("side", "left") == "left" else jj[None, :]
    else:
        raise ValueError(f"unknown filter {kind!r}")
    return A._new(A.entries * w)


# ---------------------------------------------------------------------------
# structure


def _blocks_view(T: BlockOperator2x2) -> np.ndarray:
    n = T.box.n_x
    return T.entries.reshape(T.entries.shape[:-2] + (2, n, 2, n))


def structure_violations(T: BlockOperator2x2) -> dict:
    e = _blocks_view(T)
    nu = T.box.nu
    flip_l = (slice(None, None, -1),) * nu
    swap = flip_l + (slice(None, None, -1), slice(None), slice(None, None, -1), slice(None))
    swap_flip_j = flip_l + (slice(None, None, -1),) * 4
    flip_j = (slice(None),) * nu + (slice(None), slice(None, None, -1), slice(None), slice(None, None, -1))
    return {
        "real_to_real": float(np.max(np.abs(e - np.conj(e[swap_flip_j])))),
        "reversible": float(np.max(np.abs(e + e[swap]))),
        "reversibility_preserving": float(np.max(np.abs(e - e[swap]))),
        "parity_preserving": float(np.max(np.abs(e - e[flip_j]))),
    }


def structure_check(T: BlockOperator2x2, tol: float | None = None) -> dict:
    """Entrywise real-to-real, reversible, reversibility-preserving and parity identities."""
    if not isinstance(T, BlockOperator2x2):
        raise TypeError("structure_check expects a BlockOperator2x2")
    tol = 1e-12 * (1.0 + T.max_abs()) if tol is None else tol
    viol = structure_violations(T)
    report = {k: v <= tol for k, v in viol.items()}
    report["violations"] = viol
    return report


@dataclass(frozen=True, eq=False)
class NormalForm:
    """Diagonal normal form: per j >= 0 the pair (r_j^j, r_j^{-j}) and the constant c.

    The ``l = 0`` entries of the (+,+) block are
    ``(1+c) D_m(j) + r_j^j`` on the diagonal and ``r_j^{-j}`` on the anti-diagonal.
    """

    c_frak: float
    mass: float
    r: np.ndarray = field(repr=False)

    def __post_init__(self):
        r = np.array(self.r, dtype=float)
        if r.ndim != 2 or r.shape[1] != 2:
            raise ValueError("r must have shape (K_x+1, 2)")
        r.flags.writeable = False
        object.__setattr__(self, "r", r)

    @property
    def K_x(self) -> int:
        return self.r.shape[0] - 1

    def dm(self) -> np.ndarray:
        return np.sqrt(np.arange(self.K_x + 1) ** 2 + self.mass)

    def eigenvalues(self) -> tuple[np.ndarray, np.ndarray]:
        """(lambda_{j,+}, lambda_{j,-}) for j = 0..K_x."""
        base = (1 + self.c_frak) * self.dm() + self.r[:, 0]
        return base + self.r[:, 1], base - self.r[:, 1]

    def scaled_r(self) -> np.ndarray:
        """r multiplied by <j>."""
        return self.r * np.maximum(1, np.arange(self.K_x + 1))[:, None]

    def plus_block(self) -> np.ndarray:
        """The (n x n) matrix of the (+,+) block at l = 0."""
        K = self.K_x
        n = 2 * K + 1
        mat = np.zeros((n, n))
        for j in range(-K, K + 1):
            a = abs(j)
            mat[j + K, j + K] = (1 + self.c_frak) * self.dm()[a] + self.r[a, 0]
            if j != 0:
                mat[j + K, -j + K] = self.r[a, 1]
        return mat

    def to_operator(self, box: LatticeBox, band: int | None = None) -> BlockOperator2x2:
        """[T] as a block operator (both diagonal blocks equal, real)."""
        if box.K_x != self.K_x:
            raise ValueError("box mismatch")
        blk = self.plus_block()
        z = np.zeros_like(blk)
        return BlockOperator2x2.constant(box, np.block([[blk, z], [z, blk]]), band)

    def generator(self, box: LatticeBox, band: int | None = None) -> BlockOperator2x2:
        """i E [T], the constant generator of the normal-form dynamics."""
        return compose(BlockOperator2x2.sigma3(box, band) * 1j, self.to_operator(box, band))


def normal_form_project(T: BlockOperator2x2, c_frak: float = 0.0, mass: float = 1.0, tol: float | None = None, check: bool = True):
    """Split T into its diagonal normal form [T] and the remainder T - [T]."""
    if check:
        rep = structure_check(T, tol)
        bad = [k for k in ("real_to_real", "reversibility_preserving", "parity_preserving") if not rep[k]]
        if bad:
            raise ValueError(f"normal-form projection needs a structured operator; violated: {bad} {rep['violations']}")
    K = T.box.K_x
    avg = T.time_average()[:T.box.n_x, :T.box.n_x]
    dm = np.sqrt(np.arange(K + 1) ** 2 + mass)
    r = np.zeros((K + 1, 2))
    for j in range(K + 1):
        r[j, 0] = avg[j + K, j + K].real - (1 + c_frak) * dm[j]
        if j:
            r[j, 1] = avg[j + K, -j + K].real
    nf = NormalForm(float(c_frak), float(mass), r)
    # the projection keeps the exact complex entries (imaginary parts vanish by structure)
    mask = np.zeros((T.box.n_x, T.box.n_x), dtype=bool)
    for j in range(-K, K + 1):
        mask[j + K, j + K] = True
        mask[j + K, -j + K] = True
    full_mask = np.zeros(T.entries.shape[-2:], dtype=bool)
    full_mask[:T.box.n_x, :T.box.n_x] = mask
    full_mask[T.box.n_x:, T.box.n_x:] = mask
    proj = np.zeros_like(T.entries)
    zi = T.zero_index()
    proj[zi] = np.where(full_mask, T.entries[zi], 0)
    return nf, T._new(T.entries - proj)


# ---------------------------------------------------------------------------
# serialization


def _op_records(A: _Toeplitz, tol: float) -> list[dict]:
    box = A.box
    ells = box.ells(A.band)
    n = box.n_x
    flat = A.entries.reshape(len(ells), A.n, A.n)
    js = centered(box.K_x)
    out = []
    nz = np.argwhere(np.abs(flat) > tol)
    for a, r, c in nz:
        value = flat[a, r, c]
        rec = {}
        if A.ncomp == 2:
            rec["sigma"] = "+" if r < n else "-"
            rec["sigma_p"] = "+" if c < n else "-"
        rec.update({"l": [int(e) for e in ells[a]], "j": int(js[r % n]), "jp": int(js[c % n]), "re": float(value.real), "im": float(value.imag)})
        out.append(rec)
    return out


def _op_from_records(cls, box: LatticeBox, records, band):
    op = cls.zeros(box, band)
    entries = np.array(op.entries)
    for k, rec in enumerate(records):
        try:
            ell = tuple(int(e) for e in rec["l"])
            j, jp = int(rec["j"]), int(rec["jp"])
            s = 1 if rec.get("sigma", "+") == "+" else -1
            sp = 1 if rec.get("sigma_p", "+") == "+" else -1
            value = complex(float(rec["re"]), float(rec.get("im", 0.0)))
            if len(ell) != box.nu or max(abs(e) for e in ell) > op.band:
                raise ValueError("l outside the band")
            a, b = _row(op, j, s), _row(op, jp, sp)
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValueError(f"malformed operator record at index {k}: {exc}") from exc
        entries[tuple(e + op.band for e in ell) + (a, b)] += value
    return cls(box, entries, op.band)
