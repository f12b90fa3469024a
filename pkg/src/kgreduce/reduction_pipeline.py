"""Reduction of the quasi-periodic Klein-Gordon operator to a diagonal constant normal form.

Every stage is an exact change of variables on the truncated lattice:
``G -> Phi G Phi^{-1} + (omega.d_phi Phi) Phi^{-1}`` for the generator ``G`` of
``omega.d_phi - G``. The stages are

* ``L``    the system in complex coordinates, ``G = iE D``;
* ``L2``   symmetrization of the first order by ``U^{-1}``;
* ``L3``   removal of the off-diagonal blocks, one order per sweep;
* ``L4``   straightening of the first order by ``diag(L, conj L)``;
* ``L5``   removal of the order-zero diagonal part by ``exp(Op(d))``;
* ``Mn`` / ``Minf``  the KAM iteration.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .bony_couples import BonyCouple2x2, bony_split, couple_norm
from .fourier_core import LatticeBox, TorusFunction, centered, default_tau, omega_dot_ell, s_zero, symmetry_check
from .pseudo_ops import SymbolMatrix2x2, dequantize, projector
from .toeplitz_ops import (
    BlockOperator2x2,
    NormalForm,
    ToeplitzOperator,
    compose,
    conjugate,
    dm_values,
    filter_ops,
    structure_violations,
)
from .torus_diffeo import build_L, compose_function
from .transport_straightening import SmallDivisorError, solve_transport, transport_divisors

log = logging.getLogger(__name__)

STAGES = ("L", "L2", "L3", "L4", "L5", "Mn", "Minf")
STRUCTURE_TOL = 1e-10


class MelnikovError(ValueError):
    """A divisor below its threshold; ``mode`` is (l, j, k, eta, sigma, sigma')."""

    def __init__(self, mode, divisor, threshold):
        self.mode = mode
        self.divisor = float(divisor)
        self.threshold = float(threshold)
        super().__init__(f"Melnikov condition fails at (l, j, k, eta, sigma, sigma')={mode}: {divisor:.3g} < {threshold:.3g}")


@dataclass(frozen=True, eq=False)
class KGCoefficients:
    """Real coefficients of psi_tt - a2 psi_xx - a1 psi_x ... with the parities checked at construction."""

    a2: TorusFunction
    a1: TorusFunction
    a0: TorusFunction
    mass_m: float = 1.0

    def __post_init__(self):
        if not self.mass_m > 0:
            raise ValueError("the mass must be positive")
        box = self.a2.box
        if self.a1.box != box or self.a0.box != box:
            raise ValueError("coefficients must share a box")
        wanted = {"a2": ("even_phi", "even_x"), "a1": ("even_phi", "odd_x"), "a0": ("even_phi", "even_x")}
        for name, flags in wanted.items():
            rep = symmetry_check(getattr(self, name), 1e-12 * (1 + getattr(self, name).max_abs()))
            bad = [f for f in flags + ("real",) if not rep[f]]
            if bad:
                raise ValueError(f"parity violation in {name}: {bad} {rep['violations']}")

    @property
    def box(self) -> LatticeBox:
        return self.a2.box

    @property
    def nu(self) -> int:
        return self.box.nu

    @classmethod
    def zero(cls, box: LatticeBox, mass_m: float = 1.0) -> "KGCoefficients":
        z = TorusFunction.zeros(box)
        return cls(z, z, z, mass_m)

    @classmethod
    def reference(cls, box: LatticeBox, eps: float, mass_m: float = 1.0) -> "KGCoefficients":
        """a2 = 2 eps cos(phi_1) cos x, a1 = 2 eps cos(phi_1) sin x, a0 = 0."""
        a2 = TorusFunction.from_callable(box, lambda p, x: 2 * eps * np.cos(p[0]) * np.cos(x))
        a1 = TorusFunction.from_callable(box, lambda p, x: 2 * eps * np.cos(p[0]) * np.sin(x))
        return cls(a2.real(), a1.real(), TorusFunction.zeros(box), mass_m)

    def size(self) -> float:
        return max(self.a2.max_abs(), self.a1.max_abs(), self.a0.max_abs())


@dataclass(frozen=True, eq=False)
class Transform:
    label: str
    Phi: BlockOperator2x2
    Phi_inv: BlockOperator2x2


@dataclass(frozen=True, eq=False)
class ReductionState:
    """Current operator omega.d_phi - G with G = iE (normal + rest)."""

    stage: str
    omega: tuple
    coeffs: KGCoefficients
    generator: BlockOperator2x2
    normal: NormalForm
    transforms: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    c_frak: float = 0.0

    @property
    def box(self) -> LatticeBox:
        return self.generator.box

    def inner(self) -> BlockOperator2x2:
        """T with G = iE T."""
        return inner(self.generator)

    def rest(self) -> BlockOperator2x2:
        """T - [T]: everything outside the diagonal normal form."""
        return self.inner() - self.normal.to_operator(self.box, self.generator.band)

    @property
    def symbol_part(self) -> SymbolMatrix2x2 | None:
        """Symbols of the four blocks of T - [T] (lossless on the box); kept through L4."""
        if self.stage not in ("L", "L2", "L3", "L4"):
            return None
        R = self.rest()
        return SymbolMatrix2x2(*(dequantize(R.block(s, sp), 1.0) for s, sp in ((1, 1), (1, -1), (-1, 1), (-1, -1))))

    def couple_part(self, K_sec: int | None = None) -> BonyCouple2x2:
        return bony_split(self.rest(), K_sec)

    def with_stage(self, stage, generator, transform=None, c_frak=None, normal=None, **diag):
        transforms = self.transforms + ((transform,) if transform is not None else ())
        c_frak = self.c_frak if c_frak is None else c_frak
        normal = _base_normal(self.box, c_frak, self.coeffs.mass_m) if normal is None else normal
        d = dict(self.diagnostics)
        d[stage] = diag
        return replace(self, stage=stage, generator=generator, transforms=transforms, c_frak=c_frak, normal=normal, diagnostics=d)


@dataclass(frozen=True, eq=False)
class KamState:
    n: int
    normal_n: NormalForm
    couple_n: BonyCouple2x2 | None
    eps_n: float
    eps_n_b: float
    N_n: int
    omega_set: tuple
    removed: tuple = ()


def inner(G: BlockOperator2x2) -> BlockOperator2x2:
    E = BlockOperator2x2.sigma3(G.box, G.band)
    return compose(E, G) * (-1j)


def outer(T: BlockOperator2x2) -> BlockOperator2x2:
    E = BlockOperator2x2.sigma3(T.box, T.band)
    return compose(E, T) * 1j


def _base_normal(box: LatticeBox, c_frak: float, mass: float) -> NormalForm:
    return NormalForm(float(c_frak), float(mass), np.zeros((box.K_x + 1, 2)))


def _pointwise(u: TorusFunction, fn) -> TorusFunction:
    box = u.box
    sizes = (4 * box.K_phi + 1,) * box.nu + (4 * box.K_x + 1,)
    return TorusFunction.from_grid(box, fn(u.to_grid(sizes).real)).real()


def _mult(u: TorusFunction) -> ToeplitzOperator:
    return ToeplitzOperator.multiplication(u)


def _multiplier(box: LatticeBox, values) -> ToeplitzOperator:
    return ToeplitzOperator.multiplier(box, np.asarray(values, dtype=complex))


def structure_report(T: BlockOperator2x2, kinds: Sequence[str], tol: float = STRUCTURE_TOL) -> dict:
    viol = structure_violations(T)
    flags = {k: viol[k] <= tol for k in kinds}
    return {"flags": flags, "violations": {k: viol[k] for k in kinds}, "ok": all(flags.values())}


GENERATOR_KINDS = ("real_to_real", "reversible", "parity_preserving")
MAP_KINDS = ("real_to_real", "reversibility_preserving", "parity_preserving")


def _check_structure(label: str, G: BlockOperator2x2, Phi: BlockOperator2x2 | None = None) -> dict:
    rep = {"generator": structure_report(G, GENERATOR_KINDS)}
    if Phi is not None:
        rep["map"] = structure_report(Phi, MAP_KINDS)
    if not all(r["ok"] for r in rep.values()):
        raise ValueError(f"structure lost at stage {label}: {rep}")
    return rep


def column_profile(A: BlockOperator2x2 | ToeplitzOperator, interior: int | None = None) -> np.ndarray:
    """max |entry| over columns |k| = J for J = 0..interior, all blocks together."""
    K = A.box.K_x
    interior = K if interior is None else interior
    mags = np.max(np.abs(A.entries), axis=tuple(range(A.box.nu)))
    cols = np.tile(centered(K), A.ncomp)
    return np.array([np.max(mags[:, np.abs(cols) == J]) for J in range(interior + 1)])


def band_slope(profile: np.ndarray, lo: int, hi: int) -> float:
    J = np.arange(lo, hi + 1, dtype=float)
    vals = np.maximum(profile[lo:hi + 1], 1e-300)
    return float(np.polyfit(np.log(J), np.log(vals), 1)[0])


# ---------------------------------------------------------------------------
# stage L


def system_operator(c: KGCoefficients, band: int | None = None) -> BlockOperator2x2:
    """D = (I + b1 1) D_m + 1 (i b0 xi D_m^{-1} + b_{-1} D_m^{-1}) in complex coordinates."""
    box = c.box
    m = c.mass_m
    dm = dm_values(box.K_x, m)
    j = centered(box.K_x).astype(float)
    b1 = c.a2 * (-0.5)
    b0 = c.a1 * 0.5
    bm1 = (c.a2 * m + c.a0) * 0.5
    Dm = _multiplier(box, dm)
    offd = compose(_mult(b1), Dm) + compose(_mult(b0), _multiplier(box, 1j * j / dm)) + compose(_mult(bm1), _multiplier(box, 1 / dm))
    if band is not None:
        Dm, offd = Dm.with_band(band), offd.with_band(band)
    zero = ToeplitzOperator.zeros(box, Dm.band)
    base = BlockOperator2x2.from_blocks(Dm, zero, zero, Dm)
    return base + BlockOperator2x2.ones(offd)


def build_system(c: KGCoefficients, omega: Sequence[float]) -> ReductionState:
    omega = tuple(float(w) for w in np.atleast_1d(omega))
    if len(omega) != c.nu:
        raise ValueError("omega must have nu components")
    G = outer(system_operator(c))
    rep = _check_structure("L", G)
    normal = _base_normal(c.box, 0.0, c.mass_m)
    return ReductionState("L", omega, c, G, normal, (), {"L": {"structure": rep}})


# ---------------------------------------------------------------------------
# stage L2


def symmetrizer(b1: TorusFunction):
    """lambda = sqrt(1 + 2 b1) and the entries f, g of U = [[f, g], [g, f]]."""
    vals_ok = _pointwise(b1, lambda v: 1 + 2 * v)
    box = b1.box
    grid = vals_ok.to_grid((4 * box.K_phi + 1,) * box.nu + (4 * box.K_x + 1,)).real
    if np.min(grid) <= 0:
        raise ValueError("1 + 2 b1 must stay positive: coefficients too large")

    def parts(v):
        lam = np.sqrt(1 + 2 * v)
        den = np.sqrt((1 + v + lam) ** 2 - v ** 2)
        return lam, (1 + v + lam) / den, -v / den

    lam = _pointwise(b1, lambda v: parts(v)[0])
    f = _pointwise(b1, lambda v: parts(v)[1])
    g = _pointwise(b1, lambda v: parts(v)[2])
    return lam, f, g


def symmetrize_order1(st: ReductionState) -> ReductionState:
    b1 = st.coeffs.a2 * (-0.5)
    lam, f, g = symmetrizer(b1)
    F, Gm = _mult(f), _mult(g)
    Phi = BlockOperator2x2.from_blocks(F, -Gm, -Gm, F)
    Phi_inv = BlockOperator2x2.from_blocks(F, Gm, Gm, F)
    G2, Phi_inv_exact = conjugate(Phi, st.generator, st.omega)
    box = st.box
    sizes = (64,) * box.nu + (64,)
    det_gap = float(np.max(np.abs(f.to_grid(sizes) ** 2 - g.to_grid(sizes) ** 2 - 1)))
    inv_gap = float(np.max(np.abs(Phi_inv_exact.entries - Phi_inv.entries)))
    rep = _check_structure("L2", G2, Phi)
    T = inner(G2)
    off = (T.block(1, -1)).max_abs()
    return st.with_stage("L2", G2, Transform("U^-1", Phi, Phi_inv_exact), structure=rep, det_gap=det_gap, inverse_gap=inv_gap, offdiag_max=off, lam_range=_range(lam))


def _range(u: TorusFunction) -> list:
    box = u.box
    v = u.to_grid((4 * box.K_phi + 1,) * box.nu + (4 * box.K_x + 1,)).real
    return [float(v.min()), float(v.max())]


# ---------------------------------------------------------------------------
# stage L3


def block_diagonalize(st: ReductionState, rho: int = 2) -> ReductionState:
    """rho sweeps with Psi = I + [[0, m], [conj m, 0]], Op(m) = -1/2 (1/lambda) Op(q) D_m^{-1}."""
    if rho < 1:
        raise ValueError("rho must be >= 1")
    box = st.box
    lam, _, _ = symmetrizer(st.coeffs.a2 * (-0.5))
    inv_lam = _mult(_pointwise(lam, lambda v: 1.0 / v))
    Dm_inv = _multiplier(box, 1.0 / dm_values(box.K_x, st.coeffs.mass_m))
    G = st.generator
    transforms = []
    profiles = [column_profile(inner(G).block(1, -1))]
    for sweep in range(rho):
        q = inner(G).block(1, -1)
        m = compose(compose(inv_lam, q), Dm_inv) * (-0.5)
        zero = ToeplitzOperator.zeros(box, m.band)
        M = BlockOperator2x2.from_blocks(zero, m, m.conj(), zero)
        Psi = BlockOperator2x2.identity(box, M.band) + M
        size = float(np.max(np.abs(M.to_phi_grid()).sum(axis=-1)))
        if size >= 0.5:
            raise ValueError(f"Neumann smallness violated in sweep {sweep}: ||M|| ~ {size:.3g}")
        Psi_inv = Psi.inverse()
        G, _ = conjugate(Psi_inv, G, st.omega, Phi_inv=Psi)
        transforms.append(Transform(f"Psi_{sweep + 1}^-1", Psi_inv, Psi))
        profiles.append(column_profile(inner(G).block(1, -1)))
    rep = _check_structure("L3", G, transforms[-1].Phi)
    Phi = transforms[0].Phi
    Phi_inv = transforms[0].Phi_inv
    for t in transforms[1:]:
        Phi = compose(t.Phi, Phi)
        Phi_inv = compose(Phi_inv, t.Phi_inv)
    K = box.K_x
    hi = max(2, K // 2)
    slopes = [band_slope(p, 1, hi) for p in profiles]
    return st.with_stage("L3", G, Transform("Psi^-1", Phi, Phi_inv), structure=rep, offdiag_profiles=[p.tolist() for p in profiles], offdiag_slopes=slopes)


# ---------------------------------------------------------------------------
# stage L4


def reduce_order1(st: ReductionState, gamma: float = 0.01, tau: float | None = None) -> ReductionState:
    box = st.box
    tau = default_tau(box.nu) if tau is None else tau
    lam, _, _ = symmetrizer(st.coeffs.a2 * (-0.5))
    res = solve_transport(lam - 1.0, st.omega, gamma, tau)
    Phi, _, report = build_L(res.alpha_plus, res.alpha_minus)
    G4, Phi_inv = conjugate(Phi, st.generator, st.omega)
    rep = _check_structure("L4", G4, Phi)
    b0 = st.coeffs.a1 * 0.5
    c_plus = compose_function(b0, res.alpha_plus)
    c_minus = compose_function(b0, res.alpha_minus)
    parity_gap = float(np.max(np.abs(c_minus.coeffs + c_plus.reflect_x().coeffs)))
    if parity_gap > 1e-10 * (1 + c_plus.max_abs()):
        raise ValueError(f"order-zero parity relation fails by {parity_gap:.3g}")
    diag = {
        "structure": rep,
        "a_frak": res.a_frak,
        "transport_residual": res.residual,
        "transport_residual_minus": res.residual_minus,
        "Q_norm": report["Q_norm"],
        "newton_residual": report["newton_residual"],
        "c4_parity_gap": parity_gap,
        "first_order_variation": _first_order_variation(G4, res.a_frak, st.coeffs.mass_m),
    }
    new = st.with_stage("L4", G4, Transform("Theta1", Phi, Phi_inv), c_frak=res.a_frak, **diag)
    object.__setattr__(new, "_order0", (c_plus, c_minus, res))
    return new


def _first_order_variation(G: BlockOperator2x2, c_frak: float, mass: float) -> float:
    """Largest |D|-coefficient left in G_{++} beyond i(1+c) D_m, fitted over the upper half of the columns."""
    from .transport_straightening import leading_coefficient_variation

    box = G.box
    target = _multiplier(box, 1j * (1 + c_frak) * dm_values(box.K_x, mass))
    return leading_coefficient_variation(G.block(1, 1) - target, box.K_x)


# ---------------------------------------------------------------------------
# stage L5


def order0_generator(c_plus: TorusFunction, omega, c_frak: float, gamma: float = 0.01, tau: float | None = None) -> TorusFunction:
    """d_+ with omega.d_phi d_+ - (1+c) d_x d_+ = c_+ (zero mean)."""
    box = c_plus.box
    tau = default_tau(box.nu) if tau is None else tau
    div = transport_divisors(box, omega, 1.0 + c_frak)
    ell = np.maximum(1, box.ell_norm())[..., None] * np.ones(box.n_x)
    thr = 2 * gamma * ell ** (-tau)
    zero = (box.K_phi,) * box.nu + (box.K_x,)
    support = np.abs(c_plus.coeffs) > 0
    bad = (np.abs(div) < thr) & support
    bad[zero] = False
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise SmallDivisorError(idx[:-1] - box.K_phi, idx[-1] - box.K_x, abs(div[tuple(idx)]), thr[tuple(idx)])
    d = np.zeros(box.shape, dtype=complex)
    nz = np.abs(div) > 0
    d[nz] = c_plus.coeffs[nz] / (1j * div[nz])
    d[zero] = 0.0
    return TorusFunction(box, d)


def reduce_order0(st: ReductionState, gamma: float = 0.01, tau: float | None = None) -> ReductionState:
    if st.stage != "L4":
        raise ValueError("reduce_order0 needs the L4 state")
    c_plus, c_minus, _ = st._order0
    box = st.box
    d_plus = order0_generator(c_plus, st.omega, st.c_frak, gamma, tau)
    d_minus = d_plus.reflect_x()
    D = compose(_mult(d_plus), projector(box, 1)) + compose(_mult(d_minus), projector(box, -1))
    D2 = BlockOperator2x2.diag(D, D.conj())
    Theta2 = D2.expm()
    Theta2_inv = (D2 * -1).expm()
    G5, _ = conjugate(Theta2, st.generator, st.omega, Phi_inv=Theta2_inv)
    rep = _check_structure("L5", G5, Theta2)
    resid = _homological_residual(d_plus, c_plus, st.omega, st.c_frak)
    before = column_profile(_diag_order0(st.generator, st.c_frak, st.coeffs.mass_m))
    after = column_profile(_diag_order0(G5, st.c_frak, st.coeffs.mass_m))
    return st.with_stage("L5", G5, Transform("Theta2", Theta2, Theta2_inv), structure=rep, homological_residual=resid, diag_profile_before=before.tolist(), diag_profile_after=after.tolist(), d_max=d_plus.max_abs())


def _homological_residual(d, c, omega, c_frak) -> float:
    r = d.omega_dphi(omega) - d.dx() * (1 + c_frak) - c
    return float(r.max_abs())


def _diag_order0(G: BlockOperator2x2, c_frak: float, mass: float) -> ToeplitzOperator:
    box = G.box
    target = _multiplier(box, 1j * (1 + c_frak) * dm_values(box.K_x, mass))
    return G.block(1, 1) - target


def residue_symbol(xi, sigma: int, mass: float):
    """chi_sigma xi / D_m - sigma chi_sigma."""
    from .pseudo_ops import chi_minus, chi_plus

    xi = np.asarray(xi, dtype=float)
    chi = chi_plus(xi) if sigma > 0 else chi_minus(xi)
    dm = np.sqrt(xi ** 2 + mass)
    return chi * xi / dm - sigma * chi


def residue_closed_form(xi, sigma: int, mass: float):
    """-m sigma chi_sigma / (D_m (sigma xi + D_m))."""
    from .pseudo_ops import chi_minus, chi_plus

    xi = np.asarray(xi, dtype=float)
    chi = chi_plus(xi) if sigma > 0 else chi_minus(xi)
    dm = np.sqrt(xi ** 2 + mass)
    return -mass * sigma * chi / (dm * (sigma * xi + dm))


# ---------------------------------------------------------------------------
# KAM


def cos_sin_basis(K: int) -> np.ndarray:
    """Orthogonal matrix whose columns are e_0, then (e_j + e_-j)/sqrt2, (e_j - e_-j)/sqrt2 for j = 1..K."""
    n = 2 * K + 1
    U = np.zeros((n, n))
    U[K, 0] = 1.0
    s = 1 / math.sqrt(2)
    for j in range(1, K + 1):
        U[K + j, 2 * j - 1] = s
        U[K - j, 2 * j - 1] = s
        U[K + j, 2 * j] = s
        U[K - j, 2 * j] = -s
    return U


def basis_labels(K: int):
    """(j, eta) for the columns of :func:`cos_sin_basis` (eta = +1 cos, -1 sin)."""
    out = [(0, 1)]
    for j in range(1, K + 1):
        out += [(j, 1), (j, -1)]
    return out


def eigen_diagonal(nf: NormalForm) -> np.ndarray:
    """lambda_{j, eta} in cos/sin order."""
    lp, lm = nf.eigenvalues()
    vals = [lp[0]]
    for j in range(1, nf.K_x + 1):
        vals += [lp[j], lm[j]]
    return np.array(vals)


@dataclass
class _KamGeometry:
    box: LatticeBox
    band: int
    W: np.ndarray
    sigma: np.ndarray
    labels: list
    ell_dot: np.ndarray
    ell_norm: np.ndarray
    normal_mask: np.ndarray


def _geometry(box: LatticeBox, omega, band: int) -> _KamGeometry:
    K = box.K_x
    U = cos_sin_basis(K)
    n = box.n_x
    W = np.zeros((2 * n, 2 * n))
    W[:n, :n] = U
    W[n:, n:] = U
    sigma = np.concatenate([np.ones(n), -np.ones(n)])
    labels = basis_labels(K)
    absj = np.array([abs(j) for j, _ in labels] * 2)
    same = (sigma[:, None] == sigma[None, :]) & (absj[:, None] == absj[None, :])
    zero = np.zeros((2 * band + 1,) * box.nu, dtype=bool)
    zero[(band,) * box.nu] = True
    normal_mask = zero[..., None, None] & same
    return _KamGeometry(box, band, W, sigma, labels, omega_dot_ell(box, omega, band), box.ell_norm(band), normal_mask)


def _to_eigen(A: BlockOperator2x2, geo: _KamGeometry) -> np.ndarray:
    return geo.W.T @ A.with_band(geo.band).entries @ geo.W


def _from_eigen(e: np.ndarray, geo: _KamGeometry) -> BlockOperator2x2:
    return BlockOperator2x2(geo.box, geo.W @ e @ geo.W.T, geo.band)


def melnikov_divisors(lam: np.ndarray, geo: _KamGeometry) -> np.ndarray:
    """omega.l - sigma lambda_a + sigma' lambda_b."""
    sl = geo.sigma * np.concatenate([lam, lam])
    return geo.ell_dot[..., None, None] - sl[:, None] + sl[None, :]


def melnikov_thresholds(geo: _KamGeometry, gamma: float, tau: float) -> np.ndarray:
    """2 gamma <l>^-tau for sums, 2 gamma^{3/2} <l>^-tau for differences."""
    ell = np.maximum(1, geo.ell_norm)[..., None, None] ** (-tau)
    diff = geo.sigma[:, None] == geo.sigma[None, :]
    return np.where(diff, 2 * gamma ** 1.5, 2 * gamma) * ell


def _mode_tuple(idx, geo: _KamGeometry):
    ell = tuple(int(i) - geo.band for i in idx[:-2])
    a, b = int(idx[-2]), int(idx[-1])
    n = geo.box.n_x
    ja, eta = geo.labels[a % n]
    jb, _ = geo.labels[b % n]
    return (ell, ja, jb, eta, int(geo.sigma[a]), int(geo.sigma[b]))


def solve_homological(P: BlockOperator2x2, nf: NormalForm, geo: _KamGeometry, N: int, gamma: float, tau: float, check: bool = True):
    """S with omega.d_phi S + [S, N] = -(Pi_N P - [P]), and the projected [P].

    Returns (S, P_normal, P_hat) as block operators.
    """
    e = _to_eigen(P, geo)
    lam = eigen_diagonal(nf)
    div = melnikov_divisors(lam, geo)
    inside = (geo.ell_norm <= N)[..., None, None] & ~geo.normal_mask
    if check:
        thr = melnikov_thresholds(geo, gamma, tau)
        bad = inside & (np.abs(div) < thr) & (np.abs(e) > 0)
        if np.any(bad):
            idx = np.argwhere(bad)[0]
            raise MelnikovError(_mode_tuple(idx, geo), abs(div[tuple(idx)]), thr[tuple(idx)])
    s = np.zeros_like(e)
    s[inside] = 1j * e[inside] / div[inside]
    normal = np.where(geo.normal_mask, e, 0)
    hat = np.where(inside, e, 0)
    return _from_eigen(s, geo), _from_eigen(normal, geo), _from_eigen(hat, geo)


def _absorb(nf: NormalForm, P_normal: BlockOperator2x2, tol: float = 1e-12) -> NormalForm:
    """Add the diagonal part of -iE P_normal to the normal form, asserting reality."""
    T = inner(P_normal)
    K = nf.K_x
    avg = T.time_average()
    n = T.box.n_x
    r = np.array(nf.r)
    imag = 0.0
    for j in range(K + 1):
        v0 = avg[j + K, j + K]
        r[j, 0] += v0.real
        imag = max(imag, abs(v0.imag))
        if j:
            v1 = avg[j + K, -j + K]
            r[j, 1] += v1.real
            imag = max(imag, abs(v1.imag))
            # parity: r_j^{sigma j} = r_{-j}^{-sigma j}
            imag = max(imag, abs(avg[-j + K, -j + K] - v0), abs(avg[-j + K, j + K] - v1))
        imag = max(imag, abs(avg[n + j + K, n + j + K] - np.conj(avg[K - j, K - j])))
    if imag > tol * (1 + np.max(np.abs(avg))):
        raise ValueError(f"normal-form correction is not real/parity symmetric: {imag:.3g}")
    return NormalForm(nf.c_frak, nf.mass, r)


def _ad_series(S: BlockOperator2x2, P: BlockOperator2x2, P_hat: BlockOperator2x2, tol: float, max_terms: int = 60) -> BlockOperator2x2:
    """sum_{k>=1} ad_S^k P / k! - ad_S^k P_hat / (k+1)!."""
    out = BlockOperator2x2.zeros(P.box, P.band)
    a, b = P, P_hat
    scale = max(P.max_abs(), 1e-300)
    for k in range(1, max_terms):
        a = compose(S, a) - compose(a, S)
        b = compose(S, b) - compose(b, S)
        term = a * (1 / math.factorial(k)) - b * (1 / math.factorial(k + 1))
        out = out + term
        if term.max_abs() <= tol * scale:
            return out
    raise ValueError("commutator series did not converge")


def kam_eps(P: BlockOperator2x2, b_weight: float = 0.0, K_sec: int | None = None) -> float:
    """Couple norm of P <D> (and of <d_phi>^b P <D> when b > 0) at s = s0."""
    A = filter_ops(P, "japD_pow", n=1, side="right")
    if b_weight > 0:
        A = filter_ops(A, "jap_dphi_pow", b=b_weight)
    couple = bony_split(A, K_sec)
    return couple_norm(couple, s_zero(P.box.nu))


def kam_reduce(st: ReductionState, N0: int | None = None, max_steps: int = 12, tol: float = 1e-12, omega_samples: Sequence[Sequence[float]] | None = None, gamma: float = 0.01, tau: float | None = None, eps_threshold: float = 0.1, b_weight: float | None = None):
    """Cancellation-free KAM iteration on the L5 generator.

    Returns (final KamState, NormalForm, transforms, history) where history is the
    list of KamState snapshots n = 0, 1, ...
    """
    if st.stage not in ("L5", "L"):
        raise ValueError("kam_reduce needs the L5 state")
    box = st.box
    tau = default_tau(box.nu) if tau is None else tau
    band = st.generator.band
    N0 = band if N0 is None else int(N0)
    if N0 < 1:
        raise ValueError("N0 must be >= 1")
    b_weight = min(6 * tau + 6, box.K_phi) if b_weight is None else b_weight
    geo = _geometry(box, st.omega, band)
    nf = st.normal
    N_op = nf.generator(box, band)
    P = st.generator - N_op
    samples = [tuple(np.atleast_1d(w)) for w in (omega_samples or [st.omega])]
    survivors = list(samples)
    removed = []
    eps = kam_eps(P)
    if eps > eps_threshold:
        raise ValueError(f"initial KAM size {eps:.3g} above threshold {eps_threshold}")
    history = [KamState(0, nf, None, eps, kam_eps(P, b_weight), N0, tuple(survivors))]
    transforms = []
    for n in range(max_steps):
        if eps <= tol:
            break
        N_n = int(min(round(N0 ** (1.5 ** n)), 10 ** 6))
        survivors, gone = _filter_samples(survivors, nf, box, band, N_n, gamma, tau, st.omega)
        removed += gone
        S, P_normal, P_hat = solve_homological(P, nf, geo, N_n, gamma, tau)
        P_perp = P - P_normal - P_hat
        P_new = P_perp + _ad_series(S, P, P_hat, 1e-17)
        nf = _absorb(nf, P_normal)
        Phi = S.expm()
        Phi_inv = (S * -1).expm()
        transforms.append(Transform(f"exp(S_{n})", Phi, Phi_inv))
        P = P_new
        new_eps = kam_eps(P)
        if not new_eps < eps:
            raise ValueError(f"KAM iteration stalled at step {n}: eps {eps:.3g} -> {new_eps:.3g}")
        eps = new_eps
        history.append(KamState(n + 1, nf, None, eps, kam_eps(P, b_weight), N_n, tuple(survivors), tuple(removed)))
        log.info("KAM step %d: eps = %.3e", n + 1, eps)
    final = replace(history[-1], couple_n=bony_split(P))
    history[-1] = final
    return final, nf, transforms, history, P


def _filter_samples(samples, nf, box, band, N, gamma, tau, ref):
    keep, gone = [], []
    for w in samples:
        geo = _geometry(box, w, band)
        lam = eigen_diagonal(nf)
        div = melnikov_divisors(lam, geo)
        thr = melnikov_thresholds(geo, gamma, tau)
        inside = (geo.ell_norm <= N)[..., None, None] & ~geo.normal_mask
        bad = inside & (np.abs(div) < thr)
        if np.any(bad):
            idx = np.argwhere(bad)[0]
            gone.append({"omega": list(w), "mode": _mode_tuple(idx, geo), "divisor": float(abs(div[tuple(idx)]))})
        else:
            keep.append(w)
    return keep, gone


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True, eq=False)
class PipelineResult:
    state: ReductionState
    kam: KamState
    normal: NormalForm
    history: list
    transforms: tuple
    remainder: BlockOperator2x2
    report: dict

    def eigenvalues(self):
        return self.normal.eigenvalues()

    def eps_sequence(self) -> list:
        return [h.eps_n for h in self.history]


def assemble_conjugator(transforms: Sequence[Transform]) -> tuple[BlockOperator2x2, BlockOperator2x2]:
    """F = Phi_last ... Phi_first and its inverse."""
    F = transforms[0].Phi
    F_inv = transforms[0].Phi_inv
    for t in transforms[1:]:
        F = compose(t.Phi, F)
        F_inv = compose(F_inv, t.Phi_inv)
    return F, F_inv


def conjugation_residual(F: BlockOperator2x2, F_inv: BlockOperator2x2, G0: BlockOperator2x2, nf: NormalForm, omega, interior: tuple[int, int] = (4, 6)) -> float:
    """Operator norm of F G0 F^{-1} + (omega.d_phi F) F^{-1} - iE[T_inf] on interior modes."""
    box = G0.box
    G_inf, _ = conjugate(F, G0, omega, Phi_inv=F_inv)
    diff = G_inf - nf.generator(box, G_inf.band)
    return interior_norm(diff, interior)


def interior_norm(A: BlockOperator2x2, interior: tuple[int, int] = (4, 6)) -> float:
    """Spectral norm of the section restricted to |l| <= interior[0], |j| <= interior[1]."""
    box = A.box
    mat = A.section()
    ells = box.ells(box.K_phi)
    j = np.tile(centered(box.K_x), A.ncomp)
    keep = (np.max(np.abs(ells), axis=1) <= interior[0])[:, None] & (np.abs(j) <= interior[1])[None, :]
    keep = keep.reshape(-1)
    sub = mat[np.ix_(keep, keep)]
    return float(np.linalg.norm(sub, 2)) if sub.size else 0.0


def run_pipeline(c: KGCoefficients, omega: Sequence[float], rho: int = 2, gamma: float = 0.01, tau: float | None = None, N0: int | None = None, max_steps: int = 12, tol: float = 1e-12, omega_samples=None, check_residual: bool = True) -> PipelineResult:
    t0 = time.perf_counter()
    st = build_system(c, omega)
    G0 = st.generator
    timings = {}
    if c.size() == 0:
        # nothing to reduce: every stage is the identity
        st5 = replace(st, stage="L5")
    else:
        st = symmetrize_order1(st)
        timings["L2"] = time.perf_counter() - t0
        st = block_diagonalize(st, rho)
        timings["L3"] = time.perf_counter() - t0
        st = reduce_order1(st, gamma, tau)
        timings["L4"] = time.perf_counter() - t0
        st5 = reduce_order0(st, gamma, tau)
        timings["L5"] = time.perf_counter() - t0
    kam, nf, kam_t, history, P = kam_reduce(st5, N0, max_steps, tol, omega_samples, gamma, tau)
    timings["KAM"] = time.perf_counter() - t0
    transforms = tuple(st5.transforms) + tuple(kam_t)
    final = replace(st5, stage="Minf", normal=nf, transforms=transforms, generator=nf.generator(st5.box, st5.generator.band) + P)
    report = {
        "omega": list(st5.omega),
        "c_frak": nf.c_frak,
        "eps_sequence": [h.eps_n for h in history],
        "eps_b_sequence": [h.eps_n_b for h in history],
        "surviving_omegas": [list(w) for w in kam.omega_set],
        "removed_omegas": list(kam.removed),
        "stages": _jsonable(st5.diagnostics),
        "timings": timings,
    }
    if transforms:
        F, F_inv = assemble_conjugator(transforms)
        rep = structure_report(F, MAP_KINDS)
        report["conjugator_structure"] = rep
        report["conjugator_identity_gap"] = float(np.max(np.abs(F.entries - BlockOperator2x2.identity(F.box, F.band).entries)))
        if check_residual:
            report["conjugation_residual"] = conjugation_residual(F, F_inv, G0, nf, st5.omega)
    else:
        report["conjugator_identity_gap"] = 0.0
        if check_residual:
            report["conjugation_residual"] = interior_norm(G0 - nf.generator(st5.box, G0.band))
    report["runtime"] = time.perf_counter() - t0
    return PipelineResult(final, kam, nf, history, transforms, P, report)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (float, int, str, bool)) or obj is None:
        return obj
    return repr(obj)


# ---------------------------------------------------------------------------
# reference frequency


def min_divisor(omega, box: LatticeBox, mass: float = 1.0, L: int = 4) -> float:
    """Smallest |omega.l - v| over 0 < |l| <= L and v in {+-(lambda_j +- lambda_k), j}."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    dm = dm_values(box.K_x, mass)[box.K_x:]
    vals = np.concatenate([(dm[:, None] - dm[None, :]).ravel(), (dm[:, None] + dm[None, :]).ravel(), np.arange(box.K_x + 1.0)])
    vals = np.concatenate([vals, -vals])
    ells = np.array(np.meshgrid(*[centered(L)] * box.nu, indexing="ij")).reshape(box.nu, -1).T
    ells = ells[np.any(ells != 0, axis=1)]
    w = ells @ omega
    return float(np.min(np.abs(w[:, None] - vals[None, :])))


def select_reference_omega(box: LatticeBox, mass: float = 1.0, gamma: float = 0.01, tau: float | None = None, lo: float = 0.02, hi: float = 0.5, samples: int = 2000, seed: int = 0, L: int = 4) -> tuple:
    """The candidate in [lo, hi]^nu with the largest smallest divisor that passes in_cantor."""
    from .cantor_measure import FrequencyWindow, in_cantor

    tau = default_tau(box.nu) if tau is None else tau
    if box.nu == 1:
        cands = np.linspace(lo, hi, samples)[:, None]
    else:
        rng = np.random.Generator(np.random.Philox(seed))
        cands = rng.uniform(lo, hi, size=(samples, box.nu))
    scores = np.array([min_divisor(w, box, mass, L) for w in cands])
    window = FrequencyWindow(box.nu, gamma, tau, L_max=box.K_phi, mass=mass)
    for i in np.argsort(-scores):
        if in_cantor(cands[i], window)["ok"]:
            return tuple(float(v) for v in cands[i])
    raise ValueError("no candidate frequency passes the Cantor test")
