"""Symbols a(phi, x, xi) sampled at integer xi, their quantization and the # calculus.

A :class:`Symbol` for an operator box ``(nu, K_phi, K_x)`` stores, for each
integer ``xi`` with ``|xi| <= K_xi``, the Fourier coefficients of
``a(., ., xi)`` on the doubled box ``(nu, 2K_phi, 2K_x)``; this is the range of
``(l, j - k)`` an operator on the box can see, so :func:`dequantize` is
lossless.  Data layout: ``data[xi + K_xi, l..., h]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import fftconvolve

from .fourier_core import LatticeBox, TorusFunction, centered, coeffs_to_grid, grid_points, grid_to_coeffs, pad_centered
from .toeplitz_ops import BlockOperator2x2, ToeplitzOperator, operator_norms

P_MAX = 4


def jap(xi) -> np.ndarray:
    """<xi> = max(1, |xi|) on integers."""
    return np.maximum(1.0, np.abs(np.asarray(xi, dtype=float)))


def _fbox(box: LatticeBox) -> LatticeBox:
    return LatticeBox(box.nu, 2 * box.K_phi, 2 * box.K_x)


@dataclass(frozen=True, eq=False)
class Symbol:
    box: LatticeBox
    order_m: float
    K_xi: int
    data: np.ndarray = field(repr=False)
    tail_model: str = "power_law"
    exact: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.K_xi < 2 * self.box.K_x:
            raise ValueError("K_xi must be at least 2*K_x")
        if self.tail_model not in ("power_law", "zero"):
            raise ValueError(f"unknown tail model {self.tail_model!r}")
        shape = (2 * self.K_xi + 1,) + _fbox(self.box).shape
        data = np.array(self.data, dtype=complex)
        if data.shape != shape:
            raise ValueError(f"data shape {data.shape} does not match {shape}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def fbox(self) -> LatticeBox:
        return _fbox(self.box)

    def _zero_mode(self) -> tuple:
        fb = self.fbox
        return (fb.K_phi,) * fb.nu + (fb.K_x,)

    # constructors ----------------------------------------------------------
    @classmethod
    def zeros(cls, box: LatticeBox, order_m: float = 0.0, K_xi: int | None = None) -> "Symbol":
        K_xi = 2 * box.K_x if K_xi is None else K_xi
        return cls(box, order_m, K_xi, np.zeros((2 * K_xi + 1,) + _fbox(box).shape, dtype=complex))

    @classmethod
    def multiplier(cls, box: LatticeBox, fn: Callable[[np.ndarray], np.ndarray], order_m: float, K_xi: int | None = None) -> "Symbol":
        """x- and phi-independent symbol fn(xi), evaluated in closed form at every xi."""
        K_xi = 2 * box.K_x if K_xi is None else K_xi
        out = cls.zeros(box, order_m, K_xi)
        data = np.array(out.data)
        data[(slice(None),) + out._zero_mode()] = fn(centered(K_xi))
        return cls(box, order_m, K_xi, data, exact=fn)

    @classmethod
    def from_function(cls, u: TorusFunction, order_m: float = 0.0, K_xi: int | None = None, box: LatticeBox | None = None) -> "Symbol":
        """xi-independent symbol u(phi, x)."""
        box = u.box if box is None else box
        K_xi = 2 * box.K_x if K_xi is None else K_xi
        c = u.with_box(_fbox(box)).coeffs
        return cls(box, order_m, K_xi, np.broadcast_to(c, (2 * K_xi + 1,) + c.shape))

    @classmethod
    def from_slices(cls, box: LatticeBox, order_m: float, slices: np.ndarray, K_xi: int | None = None, tail_model: str = "power_law") -> "Symbol":
        K_xi = (slices.shape[0] - 1) // 2 if K_xi is None else K_xi
        return cls(box, order_m, K_xi, slices, tail_model)

    @classmethod
    def from_callable(cls, box: LatticeBox, fn: Callable, order_m: float, K_xi: int | None = None) -> "Symbol":
        """Sample ``fn(phi, x, xi)`` at integer xi on a uniform (phi, x) grid."""
        K_xi = 2 * box.K_x if K_xi is None else K_xi
        fb = _fbox(box)
        sizes = (2 * fb.K_phi + 1,) * fb.nu + (2 * fb.K_x + 1,)
        mesh = np.meshgrid(*[grid_points(M) for M in sizes], indexing="ij")
        phi = np.stack(mesh[:-1])
        slices = [grid_to_coeffs(np.asarray(fn(phi, mesh[-1], xi), dtype=complex) * np.ones(sizes), [fb.K_phi] * fb.nu + [fb.K_x], range(fb.nu + 1)) for xi in centered(K_xi)]
        return cls(box, order_m, K_xi, np.stack(slices))

    def times_multiplier(self, fn: Callable[[np.ndarray], np.ndarray], order_shift: float) -> "Symbol":
        """a(phi,x,xi) * g(xi) for a closed-form multiplier g."""
        xi = centered(self.K_xi).astype(float)
        g = np.asarray(fn(xi), dtype=complex).reshape((-1,) + (1,) * (self.data.ndim - 1))
        return Symbol(self.box, self.order_m + order_shift, self.K_xi, self.data * g, self.tail_model)

    def times_function(self, u: TorusFunction) -> "Symbol":
        """Pointwise product with u(phi, x) in every xi slice."""
        c = u.with_box(self.fbox).coeffs
        return Symbol(self.box, self.order_m, self.K_xi, _slice_products(self.data, c[None]), self.tail_model)

    # evaluation --------------------------------------------------------------
    def table(self, lo: int, hi: int) -> np.ndarray:
        """Slices for integer xi in [lo, hi], extended beyond the table by the tail model."""
        xi = np.arange(lo, hi + 1)
        if self.exact is not None:
            out = np.zeros((len(xi),) + self.data.shape[1:], dtype=complex)
            out[(slice(None),) + self._zero_mode()] = self.exact(xi)
            return out
        inside = np.clip(xi, -self.K_xi, self.K_xi)
        out = self.data[inside + self.K_xi].copy()
        outside = np.abs(xi) > self.K_xi
        if np.any(outside):
            if self.tail_model == "zero":
                out[outside] = 0
            else:
                factor = (jap(xi[outside]) / jap(self.K_xi)) ** self.order_m
                out[outside] *= factor.reshape((-1,) + (1,) * (out.ndim - 1))
        return out

    def slice(self, xi: int) -> TorusFunction:
        return TorusFunction(self.fbox, self.table(xi, xi)[0])

    def with_order(self, order_m: float) -> "Symbol":
        return Symbol(self.box, order_m, self.K_xi, self.data, self.tail_model, self.exact)

    def __add__(self, other: "Symbol") -> "Symbol":
        _check(self, other)
        return Symbol(self.box, max(self.order_m, other.order_m), self.K_xi, self.data + other.data, self.tail_model)

    def __neg__(self) -> "Symbol":
        exact = None if self.exact is None else (lambda xi, f=self.exact: -f(xi))
        return Symbol(self.box, self.order_m, self.K_xi, -self.data, self.tail_model, exact)

    def __sub__(self, other: "Symbol") -> "Symbol":
        return self + (-other)

    def __mul__(self, scalar) -> "Symbol":
        exact = None if self.exact is None else (lambda xi, f=self.exact: scalar * f(xi))
        return Symbol(self.box, self.order_m, self.K_xi, self.data * scalar, self.tail_model, exact)

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.data)))

    def conj_reflect(self) -> "Symbol":
        """conj a(phi, x, -xi), the symbol of the conjugate operator."""
        flip = (slice(None, None, -1),) * self.data.ndim
        exact = None if self.exact is None else (lambda xi, f=self.exact: np.conj(f(-np.asarray(xi))))
        return Symbol(self.box, self.order_m, self.K_xi, np.conj(self.data[flip]), self.tail_model, exact)

    def dxi(self, n: int = 1) -> "Symbol":
        """n-th xi derivative by fourth-order central differences on the integer grid."""
        if n > P_MAX or 2 * n > self.K_xi:
            raise ValueError(f"derivative order {n} exceeds the finite-difference stencil (p_max={P_MAX})")
        lo, hi = -self.K_xi - 2 * n, self.K_xi + 2 * n
        tab = self.table(lo, hi)
        for _ in range(n):
            tab = (-tab[4:] + 8 * tab[3:-1] - 8 * tab[1:-3] + tab[:-4]) / 12.0
        return Symbol(self.box, self.order_m - n, self.K_xi, tab, self.tail_model)

    def dx(self, n: int = 1) -> "Symbol":
        h = centered(self.fbox.K_x)
        return Symbol(self.box, self.order_m, self.K_xi, self.data * (1j * h) ** n, self.tail_model)

    def structure_violations(self, K: int | None = None) -> dict:
        """Symbol-level reversibility and parity identities on |xi| <= K (default K_x)."""
        K = self.box.K_x if K is None else K
        d = self.data[self.K_xi - K:self.K_xi + K + 1]
        refl = d[(slice(None, None, -1),) + (slice(None),) * self.fbox.nu + (slice(None, None, -1),)]
        return {
            "reversible": float(np.max(np.abs(d + np.conj(refl)))),
            "reversibility_preserving": float(np.max(np.abs(d - np.conj(refl)))),
            "parity_preserving": float(np.max(np.abs(d - refl))),
        }

    # serialization ---------------------------------------------------------
    def to_dict(self, tol: float = 0.0) -> dict:
        return {
            "order_m": float(self.order_m),
            "slices": [{"xi": int(xi), "fn": TorusFunction(self.fbox, self.data[k]).to_records(tol)} for k, xi in enumerate(centered(self.K_xi))],
        }

    @classmethod
    def from_dict(cls, box: LatticeBox, payload: dict) -> "Symbol":
        slices = payload["slices"]
        K_xi = max(abs(int(s["xi"])) for s in slices)
        out = np.zeros((2 * K_xi + 1,) + _fbox(box).shape, dtype=complex)
        for s in slices:
            out[int(s["xi"]) + K_xi] = TorusFunction.from_records(_fbox(box), s["fn"]).coeffs
        return cls(box, float(payload["order_m"]), K_xi, out)


def _check(a: Symbol, b: Symbol):
    if a.box != b.box or a.K_xi != b.K_xi:
        raise ValueError("symbol boxes differ")


def _slice_products(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-xi products of (phi, x) coefficient arrays, truncated to the same shape."""
    axes = tuple(range(1, a.ndim))
    full = fftconvolve(a, b, mode="full", axes=axes)
    K = [(n - 1) // 2 for n in a.shape[1:]]
    cut = (slice(None),) + tuple(slice(k, k + n) for k, n in zip(K, a.shape[1:]))
    return full[cut]


@dataclass(frozen=True, eq=False)
class SymbolMatrix2x2:
    pp: Symbol
    pm: Symbol
    mp: Symbol
    mm: Symbol

    @classmethod
    def real_to_real(cls, a: Symbol, b: Symbol) -> "SymbolMatrix2x2":
        """[[a, b], [conj b(-xi), conj a(-xi)]]."""
        return cls(a, b, b.conj_reflect(), a.conj_reflect())

    @classmethod
    def diagonal(cls, a: Symbol, d: Symbol) -> "SymbolMatrix2x2":
        z = Symbol.zeros(a.box, 0.0, a.K_xi)
        return cls(a, z, z, d)

    def quantize(self) -> BlockOperator2x2:
        return BlockOperator2x2.from_blocks(quantize(self.pp), quantize(self.pm), quantize(self.mp), quantize(self.mm))


# ---------------------------------------------------------------------------


def quantize(a: Symbol, band: int | None = None) -> ToeplitzOperator:
    """Op(a) with entries A_j^k(l) = a_hat(l, j - k, xi = k)."""
    box = a.box
    band = 2 * box.K_phi if band is None else band
    fb = a.fbox
    data = pad_centered(a.table(-box.K_x, box.K_x), [band] * box.nu, range(1, box.nu + 1))
    j = centered(box.K_x)
    h = j[:, None] - j[None, :] + fb.K_x
    k = np.broadcast_to(j[None, :] + box.K_x, h.shape)
    ent = data[k, ..., h]  # (n, n, ell..., ) after advanced indexing
    ent = np.moveaxis(ent, (0, 1), (-2, -1))
    return ToeplitzOperator(box, ent, band)


def dequantize(A: ToeplitzOperator, order_m: float = 0.0, K_xi: int | None = None, tail_model: str = "power_law") -> Symbol:
    """The symbol whose quantization is A on the box; xi beyond K_x follows the tail model."""
    box = A.box
    K_xi = 2 * box.K_x if K_xi is None else K_xi
    fb = _fbox(box)
    ent = pad_centered(A.entries, [fb.K_phi] * box.nu, range(box.nu))
    out = np.zeros((2 * K_xi + 1,) + fb.shape, dtype=complex)
    K = box.K_x
    for k in range(-K, K + 1):
        for jrow in range(-K, K + 1):
            out[(k + K_xi,) + (slice(None),) * box.nu + (jrow - k + fb.K_x,)] = ent[..., jrow + K, k + K]
    sym = Symbol(box, order_m, K_xi, out, tail_model)
    if K_xi > K:
        xi = centered(K_xi)
        far = np.abs(xi) > K
        edge = np.where(xi[far] > 0, K, -K)
        data = np.array(out)
        factor = (jap(xi[far]) / jap(K)) ** order_m if tail_model == "power_law" else np.zeros(far.sum())
        data[far] = out[edge + K_xi] * factor.reshape((-1,) + (1,) * (out.ndim - 1))
        sym = Symbol(box, order_m, K_xi, data, tail_model)
    return sym


def symbol_norm(a: Symbol, s: float, p: int = 0) -> float:
    """max_{beta <= p} sup_xi ||d_xi^beta a(., ., xi)||_s <xi>^{-m+beta} over the table."""
    if p > P_MAX:
        raise ValueError(f"p={p} exceeds p_max={P_MAX}")
    w = a.fbox.weights() ** s
    xi = centered(a.K_xi)
    best = 0.0
    for beta in range(p + 1):
        d = a if beta == 0 else a.dxi(beta)
        norms = np.sqrt(np.sum((np.abs(d.data) * w) ** 2, axis=tuple(range(1, d.data.ndim))))
        best = max(best, float(np.max(norms * jap(xi) ** (-a.order_m + beta))))
    return best


def _full_sharp(a: Symbol, b: Symbol) -> np.ndarray:
    box = a.box
    fb = a.fbox
    Hb = fb.K_x
    K_xi = a.K_xi
    axes = tuple(range(1, box.nu + 1))
    M = 4 * fb.K_phi + 1
    a_ext = coeffs_to_grid(a.table(-K_xi - Hb, K_xi + Hb), [M] * box.nu, axes)
    b_g = coeffs_to_grid(b.data, [M] * box.nu, axes)
    out = np.zeros_like(b_g)
    n = 2 * Hb + 1
    for h in range(-Hb, Hb + 1):
        bh = b_g[..., h + Hb][..., None]
        a_shift = a_ext[Hb + h:Hb + h + 2 * K_xi + 1]
        # result x-index j uses a at x-index j - h
        if h >= 0:
            out[..., h:] += a_shift[..., :n - h] * bh
        else:
            out[..., :n + h] += a_shift[..., -h:] * bh
    return grid_to_coeffs(out, [fb.K_phi] * box.nu, axes)


def _graded(a: Symbol, b: Symbol, n: int) -> np.ndarray:
    da = a.dxi(n).data if n else a.data
    db = b.dx(n).data if n else b.data
    return _slice_products(da, db) / (math.factorial(n) * (1j ** n))


def compose_sharp(a: Symbol, b: Symbol, mode: str = "full", n: int = 0) -> Symbol:
    """a # b in mode ``full``, ``graded`` (the n-th term), ``below`` (terms 0..n-1) or ``remainder`` (full - below)."""
    _check(a, b)
    m = a.order_m + b.order_m
    if mode == "full":
        return Symbol(a.box, m, a.K_xi, _full_sharp(a, b))
    if mode == "graded":
        return Symbol(a.box, m - n, a.K_xi, _graded(a, b, n))
    if mode == "below":
        return Symbol(a.box, m, a.K_xi, sum(_graded(a, b, k) for k in range(n)))
    if mode == "remainder":
        return Symbol(a.box, m - n, a.K_xi, _full_sharp(a, b) - sum(_graded(a, b, k) for k in range(n)))
    raise ValueError(f"unknown mode {mode!r}")


def star_commutator(a: Symbol, b: Symbol, mode: str = "full", n: int = 0) -> Symbol:
    """a # b - b # a in the requested mode; graded with n=1 gives -i{a, b}."""
    out = compose_sharp(a, b, mode, n) - compose_sharp(b, a, mode, n)
    m = a.order_m + b.order_m
    return out.with_order(m - n if mode in ("graded", "remainder") else m - 1)


def poisson_bracket(a: Symbol, b: Symbol) -> Symbol:
    """{a, b} = d_xi a d_x b - d_x a d_xi b."""
    first = _slice_products(a.dxi(1).data, b.dx(1).data)
    second = _slice_products(a.dx(1).data, b.dxi(1).data)
    return Symbol(a.box, a.order_m + b.order_m - 1, a.K_xi, first - second)


def neumann_inverse(a: Symbol, rho: int, tol: float = 1e-14, threshold: float = 0.5, max_terms: int = 200):
    """Symbols g_low, g_high with (Id - Op a)^{-1} = Id + Op a + Op g_low + Op g_high.

    g_low sums the powers a^{#k} for 2 <= k < rho, g_high the remaining
    powers until they fall below ``tol`` relative to a.
    """
    if a.order_m > -1:
        raise ValueError("neumann_inverse needs a symbol of order <= -1")
    if rho < 1:
        raise ValueError("rho must be a positive integer")
    size = float(operator_norms(quantize(a), 0.0, 0.0, "op", K_sec=0))
    if size > threshold:
        raise ValueError(f"contraction threshold violated: ||Op(a)|| ~ {size:.3g} > {threshold}")
    zero = Symbol.zeros(a.box, 2 * a.order_m, a.K_xi)
    g_low, g_high = zero, zero.with_order(-rho)
    scale = max(a.max_abs(), 1e-300)
    power = a
    for k in range(2, max_terms):
        power = compose_sharp(power, a, "full").with_order(k * a.order_m)
        if k < rho:
            g_low = g_low + power
        else:
            g_high = Symbol(a.box, -rho, a.K_xi, g_high.data + power.data)
            if power.max_abs() <= tol * scale:
                break
    return g_low.with_order(2 * a.order_m), g_high.with_order(-rho)


def neumann_residual(a: Symbol, g_low: Symbol, g_high: Symbol, interior: int | None = None) -> float:
    """max entry of (Id - Op a)(Id + Op a + Op g_low + Op g_high) - Id on interior modes."""
    box = a.box
    ident = ToeplitzOperator.identity(box)
    A = quantize(a)
    prod = (ident - A) @ (ident + A + quantize(g_low) + quantize(g_high))
    return _interior_max(prod - ident, interior)


def _interior_max(T: ToeplitzOperator, interior: int | None) -> float:
    K = T.box.K_x
    interior = K // 2 if interior is None else interior
    sl = slice(K - interior, K + interior + 1)
    return float(np.max(np.abs(T.entries[..., sl, sl])))


def exp_symbol(a: Symbol, tau: float = 1.0, threshold: float = 10.0) -> ToeplitzOperator:
    """exp(tau Op(a)) on the truncated box (scaling and squaring pointwise in time)."""
    A = quantize(a) * tau
    size = float(operator_norms(A, 0.0, 0.0, "op", K_sec=0))
    if size > threshold:
        raise ValueError(f"exponential threshold violated: ||tau Op(a)|| ~ {size:.3g}")
    return A.expm()


# ---------------------------------------------------------------------------
# multipliers


def chi(xi) -> np.ndarray:
    return (np.abs(np.asarray(xi)) >= 1).astype(float)


def chi_plus(xi) -> np.ndarray:
    xi = np.asarray(xi)
    return np.where(xi >= 1, 1.0, np.where(xi <= -1, 0.0, 0.5))


def chi_minus(xi) -> np.ndarray:
    return chi_plus(-np.asarray(xi))


def sign_cut(xi) -> np.ndarray:
    return chi_plus(xi) - chi_minus(xi)


_CUTOFFS = {"chi": chi, "chi_plus": chi_plus, "chi_minus": chi_minus, "sign": sign_cut}


def cutoffs(kind: str, box: LatticeBox, K_xi: int | None = None) -> Symbol:
    """Cutoff multipliers on the integer grid: chi, chi_plus, chi_minus or sign."""
    if kind not in _CUTOFFS:
        raise ValueError(f"unknown cutoff {kind!r}")
    return Symbol.multiplier(box, _CUTOFFS[kind], 0.0, K_xi)


def dm_symbol(box: LatticeBox, mass: float, K_xi: int | None = None) -> Symbol:
    return Symbol.multiplier(box, lambda xi: np.sqrt(np.asarray(xi, dtype=float) ** 2 + mass), 1.0, K_xi)


def jap_symbol(box: LatticeBox, power: float = 1.0, K_xi: int | None = None) -> Symbol:
    return Symbol.multiplier(box, lambda xi: jap(xi) ** power, power, K_xi)


def abs_chi_symbol(box: LatticeBox, K_xi: int | None = None) -> Symbol:
    """|xi| chi(xi), which vanishes at xi = 0."""
    return Symbol.multiplier(box, lambda xi: np.abs(np.asarray(xi, dtype=float)) * chi(xi), 1.0, K_xi)


def projector(box: LatticeBox, sigma: int, band: int | None = None) -> ToeplitzOperator:
    """Szego projector Pi_sigma = Op(chi_sigma)."""
    fn = chi_plus if sigma > 0 else chi_minus
    return ToeplitzOperator.multiplier(box, fn(centered(box.K_x)), band)
