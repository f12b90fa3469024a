"""Truncated Fourier series on the torus T^nu x T, Sobolev norms and products.

Coefficients are stored in dense centered arrays: a function on the box
``(nu, K_phi, K_x)`` has shape ``(2K_phi+1,)*nu + (2K_x+1,)`` and the entry
``c[l_1+K_phi, ..., l_nu+K_phi, j+K_x]`` multiplies ``exp(i(l.phi + j x))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.signal import fftconvolve


def s_star(nu: int) -> float:
    """Smallest half-integer regularity above (nu+5)/2 used for couple norms."""
    return math.ceil((nu + 5) / 2) + 0.5


def s_zero(nu: int) -> float:
    """Base regularity, one above ``s_star``; recorded in reports, never enforced."""
    return s_star(nu) + 1.0


def default_tau(nu: int) -> float:
    return 2.0 * nu + 5.0


# ---------------------------------------------------------------------------
# grid transforms shared by functions, operators and symbols


def centered(K: int) -> np.ndarray:
    return np.arange(-K, K + 1)


def coeffs_to_grid(coeffs: np.ndarray, sizes: Sequence[int], axes: Sequence[int]) -> np.ndarray:
    """Evaluate centered coefficients on uniform grids of the given sizes along ``axes``."""
    arr = np.asarray(coeffs, dtype=complex)
    for ax, M in zip(axes, sizes):
        K = (arr.shape[ax] - 1) // 2
        if M < 2 * K + 1:
            raise ValueError(f"grid of size {M} cannot carry {2 * K + 1} modes")
        shape = list(arr.shape)
        shape[ax] = M
        out = np.zeros(shape, dtype=complex)
        index = [slice(None)] * arr.ndim
        index[ax] = centered(K) % M
        out[tuple(index)] = arr
        arr = out
    scale = float(np.prod(sizes)) if len(sizes) else 1.0
    return np.fft.ifftn(arr, axes=tuple(axes)) * scale if len(axes) else arr


def grid_to_coeffs(values: np.ndarray, Ks: Sequence[int], axes: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`coeffs_to_grid`, keeping modes ``|k| <= K`` on each axis."""
    if not len(axes):
        return np.asarray(values, dtype=complex)
    arr = np.fft.fftn(values, axes=tuple(axes))
    arr /= float(np.prod([values.shape[ax] for ax in axes]))
    for ax, K in zip(axes, Ks):
        M = arr.shape[ax]
        if 2 * K + 1 > M:
            raise ValueError(f"cannot extract {2 * K + 1} modes from a grid of size {M}")
        arr = np.take(arr, centered(K) % M, axis=ax)
    return arr


def grid_points(M: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(M) / M


def pad_centered(arr: np.ndarray, target: Sequence[int], axes: Sequence[int]) -> np.ndarray:
    """Zero-pad or crop centered coefficient axes to the half-widths in ``target``."""
    out = arr
    for ax, K_new in zip(axes, target):
        K_old = (out.shape[ax] - 1) // 2
        if K_new == K_old:
            continue
        if K_new < K_old:
            out = np.take(out, np.arange(K_old - K_new, K_old + K_new + 1), axis=ax)
        else:
            widths = [(0, 0)] * out.ndim
            widths[ax] = (K_new - K_old, K_new - K_old)
            out = np.pad(out, widths)
    return out


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeBox:
    """Index set ``|l|_inf <= K_phi``, ``|j| <= K_x`` with ``l`` in Z^nu."""

    nu: int
    K_phi: int
    K_x: int

    def __post_init__(self):
        for name in ("nu", "K_phi", "K_x"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def n_phi(self) -> int:
        return 2 * self.K_phi + 1

    @property
    def n_x(self) -> int:
        return 2 * self.K_x + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_phi,) * self.nu + (self.n_x,)

    @property
    def phi_axes(self) -> tuple[int, ...]:
        return tuple(range(self.nu))

    def ells(self, K: int | None = None) -> np.ndarray:
        """All l vectors with ``|l|_inf <= K`` in storage order, shape (count, nu)."""
        K = self.K_phi if K is None else K
        grids = np.meshgrid(*([centered(K)] * self.nu), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def ell_norm(self, K: int | None = None) -> np.ndarray:
        """|l|_1 on the phi part of the box, shape (2K+1,)*nu."""
        K = self.K_phi if K is None else K
        grids = np.meshgrid(*([np.abs(centered(K))] * self.nu), indexing="ij")
        return sum(grids) if self.nu > 1 else grids[0]

    def weights(self) -> np.ndarray:
        """<l,j> = max(1, |l|_1, |j|) on the box."""
        ell = self.ell_norm()[..., None]
        j = np.abs(centered(self.K_x))
        return np.maximum(1, np.maximum(ell, j)).astype(float)

    def with_K(self, K_phi: int | None = None, K_x: int | None = None) -> "LatticeBox":
        return LatticeBox(self.nu, self.K_phi if K_phi is None else K_phi, self.K_x if K_x is None else K_x)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=complex)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class TorusFunction:
    """Truncated Fourier series on a :class:`LatticeBox`.

    ``budget`` accumulates the l2 mass discarded by truncations that produced
    this function.
    """

    box: LatticeBox
    coeffs: np.ndarray
    budget: float = field(default=0.0)

    def __post_init__(self):
        c = np.asarray(self.coeffs)
        if c.shape != self.box.shape:
            raise ValueError(f"coefficient shape {c.shape} does not match box {self.box.shape}")
        object.__setattr__(self, "coeffs", _frozen(c))

    # constructors ----------------------------------------------------------
    @classmethod
    def zeros(cls, box: LatticeBox) -> "TorusFunction":
        return cls(box, np.zeros(box.shape, dtype=complex))

    @classmethod
    def constant(cls, box: LatticeBox, value: complex) -> "TorusFunction":
        c = np.zeros(box.shape, dtype=complex)
        c[(box.K_phi,) * box.nu + (box.K_x,)] = value
        return cls(box, c)

    @classmethod
    def from_modes(cls, box: LatticeBox, modes: Mapping[tuple, complex]) -> "TorusFunction":
        """Build from ``{(l, j): value}`` where ``l`` is a tuple of length nu (or an int when nu=1)."""
        c = np.zeros(box.shape, dtype=complex)
        for (ell, j), value in modes.items():
            ell = (ell,) if np.isscalar(ell) else tuple(ell)
            c[_index(box, ell, j)] += value
        return cls(box, c)

    @classmethod
    def from_callable(cls, box: LatticeBox, fn: Callable[..., np.ndarray], grid: Sequence[int] | None = None) -> "TorusFunction":
        """Sample ``fn(phi, x)`` on a uniform grid and keep the modes inside ``box``.

        ``phi`` is passed as an array of shape ``(nu, *grid)``.
        """
        sizes = tuple(grid) if grid is not None else (4 * box.K_phi + 1,) * box.nu + (4 * box.K_x + 1,)
        axes = [grid_points(M) for M in sizes]
        mesh = np.meshgrid(*axes, indexing="ij")
        phi = np.stack(mesh[:-1])
        values = np.asarray(fn(phi, mesh[-1]), dtype=complex) * np.ones(sizes)
        full = np.fft.fftn(values) / values.size
        kept = grid_to_coeffs(values, [box.K_phi] * box.nu + [box.K_x], range(box.nu + 1))
        lost = max(float(np.sum(np.abs(full) ** 2) - np.sum(np.abs(kept) ** 2)), 0.0)
        return cls(box, kept, math.sqrt(lost))

    @classmethod
    def from_grid(cls, box: LatticeBox, values: np.ndarray) -> "TorusFunction":
        return cls(box, grid_to_coeffs(values, [box.K_phi] * box.nu + [box.K_x], range(box.nu + 1)))

    # accessors -------------------------------------------------------------
    def coeff(self, ell, j: int) -> complex:
        ell = (ell,) if np.isscalar(ell) else tuple(ell)
        if max(abs(e) for e in ell) > self.box.K_phi or abs(j) > self.box.K_x:
            return 0j
        return complex(self.coeffs[_index(self.box, ell, j)])

    def to_grid(self, sizes: Sequence[int] | None = None) -> np.ndarray:
        box = self.box
        sizes = tuple(sizes) if sizes is not None else (2 * box.K_phi + 1,) * box.nu + (2 * box.K_x + 1,)
        return coeffs_to_grid(self.coeffs, sizes, range(box.nu + 1))

    def evaluate(self, phi: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Point evaluation; ``phi`` has shape ``(..., nu)`` and ``x`` shape ``(...)``."""
        phi = np.asarray(phi, dtype=float)
        x = np.asarray(x, dtype=float)
        if self.box.nu == 1 and phi.shape == x.shape:
            phi = phi[..., None]
        ells = self.box.ells()
        js = centered(self.box.K_x)
        flat = self.coeffs.reshape(len(ells), len(js))
        phase_phi = np.exp(1j * np.tensordot(phi, ells.T, axes=(-1, 0)))
        phase_x = np.exp(1j * x[..., None] * js)
        return np.einsum("...a,ab,...b->...", phase_phi, flat, phase_x)

    def with_box(self, box: LatticeBox) -> "TorusFunction":
        """Embed into (or truncate onto) another box with the same nu."""
        if box.nu != self.box.nu:
            raise ValueError("boxes must share nu")
        out = pad_centered(self.coeffs, [box.K_phi] * box.nu + [box.K_x], range(box.nu + 1))
        lost = math.sqrt(max(float(np.sum(np.abs(self.coeffs) ** 2) - np.sum(np.abs(out) ** 2)), 0.0))
        return TorusFunction(box, out, self.budget + lost)

    # algebra -----------------------------------------------------------------
    def _check(self, other: "TorusFunction"):
        if not isinstance(other, TorusFunction) or other.box != self.box:
            raise ValueError("box mismatch")

    def __add__(self, other):
        if isinstance(other, TorusFunction):
            self._check(other)
            return TorusFunction(self.box, self.coeffs + other.coeffs, self.budget + other.budget)
        return self + TorusFunction.constant(self.box, other)

    __radd__ = __add__

    def __neg__(self):
        return TorusFunction(self.box, -self.coeffs, self.budget)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, TorusFunction):
            return multiply(self, other)
        return TorusFunction(self.box, self.coeffs * other, self.budget * abs(other))

    __rmul__ = __mul__

    def conj(self) -> "TorusFunction":
        """Pointwise complex conjugate: coefficient (l,j) becomes conj of (-l,-j)."""
        return TorusFunction(self.box, np.conj(self.coeffs[_flip_all(self.box.nu + 1)]), self.budget)

    def real(self) -> "TorusFunction":
        return (self + self.conj()) * 0.5

    def reflect_x(self) -> "TorusFunction":
        """u(phi, -x)."""
        return TorusFunction(self.box, self.coeffs[..., ::-1], self.budget)

    def reflect_phi(self) -> "TorusFunction":
        """u(-phi, x)."""
        return TorusFunction(self.box, self.coeffs[_flip_phi(self.box.nu)], self.budget)

    def dx(self, order: int = 1) -> "TorusFunction":
        return TorusFunction(self.box, self.coeffs * (1j * centered(self.box.K_x)) ** order, self.budget)

    def dphi(self, h: int) -> "TorusFunction":
        shape = [1] * (self.box.nu + 1)
        shape[h] = -1
        return TorusFunction(self.box, self.coeffs * (1j * centered(self.box.K_phi)).reshape(shape), self.budget)

    def omega_dphi(self, omega: Sequence[float]) -> "TorusFunction":
        """omega . d_phi u."""
        return TorusFunction(self.box, self.coeffs * (1j * omega_dot_ell(self.box, omega))[..., None], self.budget)

    def mean(self) -> complex:
        return complex(self.coeffs[(self.box.K_phi,) * self.box.nu + (self.box.K_x,)])

    def x_mean(self) -> "TorusFunction":
        """Average in x, kept as a function of phi."""
        c = np.zeros_like(self.coeffs)
        c[..., self.box.K_x] = self.coeffs[..., self.box.K_x]
        return TorusFunction(self.box, c, self.budget)

    def norm(self, s: float) -> float:
        return sobolev_norm(self, s)

    def majorant(self) -> "TorusFunction":
        return TorusFunction(self.box, np.abs(self.coeffs), self.budget)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.coeffs))) if self.coeffs.size else 0.0

    # serialization ---------------------------------------------------------
    def to_records(self, tol: float = 0.0) -> list[dict]:
        records = []
        ells = self.box.ells()
        js = centered(self.box.K_x)
        flat = self.coeffs.reshape(len(ells), len(js))
        for a, ell in enumerate(ells):
            for b, j in enumerate(js):
                value = flat[a, b]
                if abs(value) > tol:
                    records.append({"l": [int(e) for e in ell], "j": int(j), "re": float(value.real), "im": float(value.imag)})
        return records

    @classmethod
    def from_records(cls, box: LatticeBox, records: Iterable[Mapping]) -> "TorusFunction":
        c = np.zeros(box.shape, dtype=complex)
        for k, rec in enumerate(records):
            try:
                ell = tuple(int(e) for e in rec["l"])
                j = int(rec["j"])
                value = complex(float(rec["re"]), float(rec.get("im", 0.0)))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"malformed coefficient record at index {k}: {exc}") from exc
            if len(ell) != box.nu:
                raise ValueError(f"malformed coefficient record at index {k}: l has length {len(ell)}, expected {box.nu}")
            if max(abs(e) for e in ell) > box.K_phi or abs(j) > box.K_x:
                raise ValueError(f"malformed coefficient record at index {k}: mode {ell, j} outside the box")
            if not np.isfinite(value):
                raise ValueError(f"malformed coefficient record at index {k}: non-finite value")
            c[_index(box, ell, j)] += value
        return cls(box, c)


def _index(box: LatticeBox, ell: tuple, j: int) -> tuple:
    if len(ell) != box.nu:
        raise ValueError(f"l must have length {box.nu}")
    return tuple(e + box.K_phi for e in ell) + (j + box.K_x,)


def _flip_all(ndim: int) -> tuple:
    return (slice(None, None, -1),) * ndim


def _flip_phi(nu: int) -> tuple:
    return (slice(None, None, -1),) * nu + (slice(None),)


def omega_dot_ell(box: LatticeBox, omega: Sequence[float], K: int | None = None) -> np.ndarray:
    """omega . l on the phi part of a box, shape (2K+1,)*nu."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if omega.shape != (box.nu,):
        raise ValueError(f"omega must have {box.nu} components")
    K = box.K_phi if K is None else K
    grids = np.meshgrid(*([centered(K)] * box.nu), indexing="ij")
    return sum(w * g for w, g in zip(omega, grids))


@dataclass(frozen=True, eq=False)
class ParamFamily:
    """Samples ``omega -> value`` of a Lipschitz family (TorusFunctions or scalars)."""

    omegas: tuple
    values: tuple

    def __post_init__(self):
        omegas = tuple(tuple(np.atleast_1d(np.asarray(w, dtype=float))) for w in self.omegas)
        if len(omegas) != len(self.values):
            raise ValueError("omegas and values must have equal length")
        if len(set(omegas)) != len(omegas):
            raise ValueError("omegas must be pairwise distinct")
        boxes = {v.box for v in self.values if isinstance(v, TorusFunction)}
        if len(boxes) > 1:
            raise ValueError("all samples must share one box")
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "values", tuple(self.values))

    @classmethod
    def from_mapping(cls, samples: Mapping) -> "ParamFamily":
        return cls(tuple(samples.keys()), tuple(samples.values()))


def _value_norm(u, s: float) -> float:
    if isinstance(u, TorusFunction):
        return sobolev_norm(u, s)
    return float(abs(u))


def sobolev_norm(u: TorusFunction, s: float) -> float:
    """(sum <l,j>^{2s} |u_{l,j}|^2)^{1/2}."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    if u.coeffs.size == 0:
        return 0.0
    w = u.box.weights() ** s
    return float(np.sqrt(np.sum((w * np.abs(u.coeffs)) ** 2)))


def lip_norm(fam: ParamFamily, s: float, gamma: float) -> float:
    """sup_omega ||u||_s + gamma * max pairwise ||du||_{s-1} / |domega| over the samples."""
    if not 0 < gamma < 0.5:
        raise ValueError("gamma must lie in (0, 1/2)")
    if not fam.values:
        raise ValueError("family has no samples")
    if len(fam.values) >= 2 and s < 1:
        raise ValueError("s must be >= 1 for the Lipschitz part")
    sup = max(_value_norm(v, s) for v in fam.values)
    lip = 0.0
    pts = [np.asarray(w) for w in fam.omegas]
    for a in range(len(pts)):
        for b in range(a + 1, len(pts)):
            diff = fam.values[a] - fam.values[b]
            lip = max(lip, _value_norm(diff, s - 1) / float(np.linalg.norm(pts[a] - pts[b])))
    return sup + gamma * lip


def multiply(u: TorusFunction, v: TorusFunction) -> TorusFunction:
    """Exact coefficient convolution truncated back to the box."""
    u._check(v)
    box = u.box
    full = fftconvolve(u.coeffs, v.coeffs, mode="full")
    cut = tuple(slice(k, k + n) for k, n in zip([box.K_phi] * box.nu + [box.K_x], box.shape))
    kept = full[cut]
    lost = math.sqrt(max(float(np.sum(np.abs(full) ** 2) - np.sum(np.abs(kept) ** 2)), 0.0))
    return TorusFunction(box, kept, u.budget + v.budget + lost)


def default_tol(u: TorusFunction) -> float:
    return 1e-12 * (1.0 + sobolev_norm(u, s_zero(u.box.nu)))


def symmetry_check(u: TorusFunction, tol: float | None = None) -> dict:
    """Coefficient-level parity and reality flags, with the largest violation of each."""
    tol = default_tol(u) if tol is None else tol
    c = u.coeffs
    nu = u.box.nu
    flipped_x = c[..., ::-1]
    flipped_phi = c[_flip_phi(nu)]
    both = np.conj(c[_flip_all(nu + 1)])
    violations = {
        "even_phi": np.max(np.abs(c - flipped_phi)),
        "odd_phi": np.max(np.abs(c + flipped_phi)),
        "even_x": np.max(np.abs(c - flipped_x)),
        "odd_x": np.max(np.abs(c + flipped_x)),
        "real": np.max(np.abs(c - both)),
    }
    report = {name: bool(v <= tol) for name, v in violations.items()}
    report["violations"] = {name: float(v) for name, v in violations.items()}
    return report
