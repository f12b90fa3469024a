"""Near-identity torus diffeomorphisms x -> x + alpha(phi, x) and their composition operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bony_couples import BonyCouple, bony_split
from .fourier_core import LatticeBox, TorusFunction, centered, coeffs_to_grid, grid_points, grid_to_coeffs
from .pseudo_ops import Symbol, chi, dequantize, projector
from .toeplitz_ops import BlockOperator2x2, ToeplitzOperator, compose, filter_ops, operator_norms


@dataclass(frozen=True, eq=False)
class TorusDiffeo:
    """x -> x + alpha(phi, x) with inverse y -> y + alpha_inv(phi, y)."""

    alpha: TorusFunction
    alpha_inv: TorusFunction
    newton_residual: float
    iterations: int = 0

    @property
    def box(self) -> LatticeBox:
        return self.alpha.box


def _phi_grid_values(u: TorusFunction, M_phi: int) -> np.ndarray:
    """Values on the phi grid, keeping x in Fourier space: shape (M_phi,)*nu + (n_x,)."""
    return coeffs_to_grid(u.coeffs, [M_phi] * u.box.nu, range(u.box.nu))


def _eval_x(c_phi: np.ndarray, K_x: int, x: np.ndarray, deriv: int = 0) -> np.ndarray:
    """sum_j c_phi[..., j] (ij)^deriv exp(i j x[..., q]) for off-grid x of shape (..., Q)."""
    j = centered(K_x)
    phase = np.exp(1j * x[..., None] * j) * (1j * j) ** deriv
    return np.einsum("...qj,...j->...q", phase, c_phi)


def dx_sup(alpha: TorusFunction, grid: int = 64) -> float:
    box = alpha.box
    sizes = (max(grid, 2 * box.K_phi + 1),) * box.nu + (max(grid, 2 * box.K_x + 1),)
    vals = alpha.dx().to_grid(sizes)
    return float(np.max(np.abs(vals)))


def invert_diffeo(alpha: TorusFunction, grid_size: tuple[int, int] | None = None, tol: float = 1e-12, max_iter: int = 30) -> TorusDiffeo:
    """Solve y + alpha_inv(y) + alpha(y + alpha_inv(y)) = y by pointwise Newton, then refit."""
    box = alpha.box
    if np.max(np.abs(alpha.coeffs - alpha.conj().coeffs)) > 1e-12 * (1 + alpha.max_abs()):
        raise ValueError("alpha must be real valued")
    slope = dx_sup(alpha)
    if slope > 0.5:
        raise ValueError(f"derivative bound violated: sup |d_x alpha| = {slope:.3g} > 0.5")
    M_phi, M_x = grid_size if grid_size is not None else (4 * box.K_phi + 1, max(3 * box.K_x, 2 * box.K_x + 1))
    c_phi = _phi_grid_values(alpha, M_phi)
    y = np.broadcast_to(grid_points(M_x), c_phi.shape[:-1] + (M_x,))
    g = -np.real(_eval_x(c_phi, box.K_x, y))
    for it in range(1, max_iter + 1):
        F = g + np.real(_eval_x(c_phi, box.K_x, y + g))
        dF = 1.0 + np.real(_eval_x(c_phi, box.K_x, y + g, 1))
        step = F / dF
        g = g - step
        if np.max(np.abs(step)) <= 1e-3 * tol:
            break
    else:
        raise ValueError("Newton iteration for the inverse diffeomorphism did not converge")
    coeffs = grid_to_coeffs(g.astype(complex), [box.K_phi] * box.nu + [box.K_x], range(box.nu + 1))
    alpha_inv = TorusFunction(box, coeffs).real()
    # residual of the refitted inverse on the collocation grid
    c_inv = _phi_grid_values(alpha_inv, M_phi)
    g_fit = np.real(_eval_x(c_inv, box.K_x, y))
    residual = float(np.max(np.abs(g_fit + np.real(_eval_x(c_phi, box.K_x, y + g_fit)))))
    if _odd_odd(alpha) and not _odd_odd(alpha_inv, 1e-10):
        raise AssertionError("inverse lost the (phi, x) oddness of alpha")
    return TorusDiffeo(alpha, alpha_inv, residual, it)


def _odd_odd(u: TorusFunction, tol: float = 1e-13) -> bool:
    """u(phi, x) = -u(-phi, -x)."""
    flip = (slice(None, None, -1),) * (u.box.nu + 1)
    return float(np.max(np.abs(u.coeffs + u.coeffs[flip]))) <= tol * (1 + u.max_abs())


def roundtrip_residual(d: TorusDiffeo, grid: int = 64) -> float:
    """max |x + alpha(x) + alpha_inv(x + alpha(x)) - x| on a uniform grid."""
    box = d.box
    c_phi = _phi_grid_values(d.alpha, grid)
    c_inv = _phi_grid_values(d.alpha_inv, grid)
    x = np.broadcast_to(grid_points(grid), c_phi.shape[:-1] + (grid,))
    y = x + np.real(_eval_x(c_phi, box.K_x, x))
    back = y + np.real(_eval_x(c_inv, box.K_x, y))
    return float(np.max(np.abs(back - x)))


def transport_symbol_entries(alpha: TorusFunction, target: LatticeBox, band: int | None = None) -> np.ndarray:
    """Coefficients of t(phi, x, xi) = exp(i xi alpha) for |xi| <= target.K_x, |h| <= 2 target.K_x.

    Returned as ``t[xi + K, l..., h + 2K]``.
    """
    box = alpha.box
    band = 2 * target.K_phi if band is None else band
    K = target.K_x
    M_phi = 4 * band + 1
    M_x = 4 * (K + 2 * K) + 1
    vals = coeffs_to_grid(alpha.coeffs, [M_phi] * box.nu + [M_x], range(box.nu + 1)).real
    xi = centered(K).reshape((-1,) + (1,) * vals.ndim)
    t = np.exp(1j * xi * vals[None])
    return grid_to_coeffs(t, [band] * box.nu + [2 * K], range(1, box.nu + 2))


def composition_from_alpha(alpha: TorusFunction, box: LatticeBox | None = None, band: int | None = None) -> ToeplitzOperator:
    """(C u)(phi, x) = u(phi, x + alpha(phi, x)) as a Toeplitz operator on ``box``."""
    box = alpha.box if box is None else box
    band = 2 * box.K_phi if band is None else band
    t = transport_symbol_entries(alpha, box, band)
    K = box.K_x
    j = centered(K)
    h = j[:, None] - j[None, :] + 2 * K
    xi = np.broadcast_to(j[None, :] + K, h.shape)
    ent = np.moveaxis(t[xi, ..., h], (0, 1), (-2, -1))
    return ToeplitzOperator(box, ent, band)


def composition_operator(d: TorusDiffeo, tau: float = 1.0, direction: str = "fwd", box: LatticeBox | None = None, band: int | None = None) -> ToeplitzOperator:
    """C_alpha^tau (u -> u(x + tau alpha)) or its inverse (built from the inverse diffeomorphism)."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if direction == "fwd":
        return composition_from_alpha(d.alpha * tau, box, band)
    if direction == "inv":
        inv = d.alpha_inv if tau == 1.0 else invert_diffeo(d.alpha * tau).alpha_inv
        return composition_from_alpha(inv, box, band)
    raise ValueError(f"unknown direction {direction!r}")


def diffeo_couple(d: TorusDiffeo, tau: float, N1: float, N2: float, b: float, K_sec: int | None = None) -> tuple[BonyCouple, dict]:
    """The couple of <D>^{-N1} (C^tau - Id) <D>^{-N2} with its <d_phi>^q weighted norms, q in {0, b}."""
    nu = d.box.nu
    if not N1 + N2 > nu // 2 + 3 + b:
        raise ValueError(f"exponent condition violated: N1 + N2 = {N1 + N2} <= {nu // 2 + 3 + b}")
    C = composition_operator(d, tau)
    op = C - ToeplitzOperator.identity(C.box, C.band)
    op = filter_ops(filter_ops(op, "japD_pow", n=-N1, side="left"), "japD_pow", n=-N2, side="right")
    from .bony_couples import couple_norm

    cpl = bony_split(op, K_sec)
    weighted = bony_split(filter_ops(op, "jap_dphi_pow", b=b), K_sec)
    report = {"norm_q0": couple_norm(cpl, cpl.s_star), "norm_qb": couple_norm(weighted, weighted.s_star), "alpha_norm": d.alpha.norm(cpl.s_star)}
    return cpl, report


def szego_commutator(d: TorusDiffeo | None = None, which: str = "Pi_sigma_vs_Calpha", sigma: int = 1, r: Symbol | None = None, C: ToeplitzOperator | None = None) -> tuple[Symbol, dict]:
    """[Pi_sigma, C_alpha], [Op(chi), C_alpha] or [Pi_sigma, Op(r)] as a symbol with support and decay diagnostics."""
    if which == "Pi_sigma_vs_Opr":
        from .pseudo_ops import quantize

        if r is None:
            raise ValueError("a symbol r is required")
        other = quantize(r)
    else:
        other = C if C is not None else composition_operator(d)
    box = other.box
    if which == "Opchi_vs_Calpha":
        P = ToeplitzOperator.multiplier(box, chi(centered(box.K_x)), other.band)
    else:
        P = projector(box, sigma, other.band)
    comm = compose(P, other) - compose(other, P)
    g = dequantize(comm, order_m=0.0)
    # support: an entry (j, j') can only be nonzero when |j - j'| > |j'| - 1/2
    j = centered(box.K_x)
    allowed = np.abs(j[:, None] - j[None, :]) > np.abs(j[None, :]) - 0.5
    mags = np.max(np.abs(comm.entries), axis=tuple(range(box.nu)))
    off = float(np.max(np.where(allowed, 0.0, mags)))
    if off > 0.0:
        raise AssertionError(f"commutator entry outside the allowed support: {off:.3g}")
    band_mag = np.array([np.max(mags[:, j + box.K_x]) for j in range(0, box.K_x + 1)])
    return g, {"support_ok": True, "xi_profile": band_mag}


def build_L(alpha_plus: TorusFunction, alpha_minus: TorusFunction, band: int | None = None, tol: float = 1e-14, max_terms: int = 100):
    """L = C_{alpha+} Pi_+ + C_{alpha-} Pi_-, returned as diag(L, conj L) with its inverse.

    The inverse is (C_{alpha+}^{-1} Pi_+ + C_{alpha-}^{-1} Pi_-)(Id + Q)^{-1} where
    L (C_{alpha+}^{-1} Pi_+ + C_{alpha-}^{-1} Pi_-) = Id + Q, summed as a Neumann series.
    """
    box = alpha_plus.box
    scale = 1e-12 * (1 + alpha_plus.max_abs())
    if np.max(np.abs(alpha_minus.coeffs + alpha_plus.reflect_x().coeffs)) > scale:
        raise ValueError("parity relation alpha_-(phi, x) = -alpha_+(phi, -x) violated")
    if not _odd_odd(alpha_plus, 1e-12):
        raise ValueError("alpha_+ must satisfy alpha_+(phi, x) = -alpha_+(-phi, -x)")
    band = 2 * box.K_phi if band is None else band
    dp, dm = invert_diffeo(alpha_plus), invert_diffeo(alpha_minus)
    Cp, Cm = composition_operator(dp, band=band), composition_operator(dm, band=band)
    Cp_inv, Cm_inv = composition_operator(dp, direction="inv", band=band), composition_operator(dm, direction="inv", band=band)
    Pp, Pm = projector(box, 1, band), projector(box, -1, band)
    L = compose(Cp, Pp) + compose(Cm, Pm)
    Lbar = compose(Cp, Pm) + compose(Cm, Pp)
    Gamma = compose(Cp_inv, Pp) + compose(Cm_inv, Pm)
    ident = ToeplitzOperator.identity(box, band)
    Q = compose(L, Gamma) - ident
    q_norm = float(operator_norms(Q, 0.0, 0.0, "op", K_sec=0))
    if q_norm >= 0.5:
        raise ValueError(f"Neumann correction diverges: ||Q|| ~ {q_norm:.3g}")
    corr = ident
    term = ident
    for _ in range(max_terms):
        term = compose(-Q, term)
        corr = corr + term
        if term.max_abs() <= tol:
            break
    else:
        raise ValueError("Neumann correction did not converge")
    L_inv = compose(Gamma, corr)
    conj_gap = float(np.max(np.abs(L.conj().entries - Lbar.entries)))
    Lbar_inv = L_inv.conj()
    inv_gap = float(np.max(np.abs(compose(Lbar, Lbar_inv).entries - ident.entries)))
    report = {
        "Q_norm": q_norm,
        "conj_L_gap": conj_gap,
        "conj_inverse_gap": inv_gap,
        "newton_residual": max(dp.newton_residual, dm.newton_residual),
        "Q": Q,
    }
    return BlockOperator2x2.diag(L, Lbar), BlockOperator2x2.diag(L_inv, Lbar_inv), report


def compose_function(u: TorusFunction, alpha: TorusFunction, grid: tuple[int, int] | None = None) -> TorusFunction:
    """u(phi, x + alpha(phi, x)) refitted onto u's box."""
    box = u.box
    M_phi, M_x = grid if grid is not None else (4 * box.K_phi + 1, 4 * box.K_x + 1)
    c_u = _phi_grid_values(u, M_phi)
    a_vals = coeffs_to_grid(alpha.coeffs, [M_phi] * box.nu + [M_x], range(box.nu + 1)).real
    x = np.broadcast_to(grid_points(M_x), a_vals.shape)
    vals = _eval_x(c_u, box.K_x, x + a_vals)
    return TorusFunction.from_grid(box, vals)
