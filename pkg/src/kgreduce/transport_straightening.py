"""Straightening of the first-order transport part and Egorov conjugation of symbols."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .bony_couples import BonyCouple, bony_split, couple_norm
from .fourier_core import LatticeBox, TorusFunction, centered, coeffs_to_grid, grid_points, grid_to_coeffs, multiply, omega_dot_ell, s_zero
from .pseudo_ops import Symbol, quantize
from .toeplitz_ops import ToeplitzOperator, compose, conjugate
from .torus_diffeo import TorusDiffeo, build_L, dx_sup, composition_operator, invert_diffeo


class SmallDivisorError(ValueError):
    """Raised when a divisor falls below the diophantine threshold; carries the offending mode."""

    def __init__(self, ell, j, divisor, threshold):
        self.ell = tuple(int(e) for e in np.atleast_1d(ell))
        self.j = int(j)
        self.divisor = float(divisor)
        self.threshold = float(threshold)
        super().__init__(f"small divisor at l={self.ell}, j={self.j}: |omega.l - (1+a)j| = {divisor:.3g} < {threshold:.3g}")


@dataclass(frozen=True, eq=False)
class StraighteningResult:
    a_frak: float
    beta_plus: TorusFunction
    beta_minus: TorusFunction
    alpha_plus: TorusFunction
    alpha_minus: TorusFunction
    residual: float
    residual_minus: float
    iterations: int
    omega: tuple


def transport_divisors(box: LatticeBox, omega, speed: float) -> np.ndarray:
    """omega.l - speed*j on the box."""
    return omega_dot_ell(box, omega)[..., None] - speed * centered(box.K_x)


def _check_divisors(box, omega, speed, gamma, tau, support):
    div = transport_divisors(box, omega, speed)
    ell = np.maximum(1, box.ell_norm())[..., None] * np.ones(box.n_x)
    thr = 2 * gamma * ell ** (-tau)
    zero = np.zeros(box.shape, dtype=bool)
    zero[(box.K_phi,) * box.nu + (box.K_x,)] = True
    bad = (np.abs(div) < thr) & support & ~zero
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        ell_v = idx[:-1] - box.K_phi
        raise SmallDivisorError(ell_v, idx[-1] - box.K_x, abs(div[tuple(idx)]), thr[tuple(idx)])
    return div


def transport_residual(a: TorusFunction, beta: TorusFunction, a_frak: float, omega, sign: int = 1) -> TorusFunction:
    """omega.d_phi beta - sign (1+a)(1+beta_x) + sign (1+a_frak)."""
    one_a = a + 1.0
    return beta.omega_dphi(omega) - sign * multiply(one_a, beta.dx() + 1.0) + sign * (1.0 + a_frak)


def solve_transport(a: TorusFunction, omega: Sequence[float], gamma: float = 0.01, tau_dioph: float | None = None, tol: float = 1e-13, max_iter: int = 100, s0: float | None = None) -> StraighteningResult:
    """Solve omega.d_phi beta - (1+a)(1+d_x beta) = -(1+a_frak) for beta and the constant a_frak.

    Fixed point: (omega.d_phi - (1+a_k) d_x) beta_{k+1} = (a - a_k)(1 + d_x beta_k)
    with a_k the mean of a (1 + d_x beta_k).
    """
    box = a.box
    omega = tuple(np.atleast_1d(np.asarray(omega, dtype=float)))
    tau_dioph = 2.0 * box.nu + 5.0 if tau_dioph is None else tau_dioph
    s0 = s_zero(box.nu) if s0 is None else s0
    if np.max(np.abs(a.coeffs - a.conj().coeffs)) > 1e-12 * (1 + a.max_abs()):
        raise ValueError("the transport coefficient must be real")
    beta = TorusFunction.zeros(box)
    a_frak = 0.0
    zero = (box.K_phi,) * box.nu + (box.K_x,)
    residual = math.inf
    best = math.inf
    for it in range(1, max_iter + 1):
        a_frak = float(multiply(a, beta.dx() + 1.0).mean().real)
        rhs = multiply(a - a_frak, beta.dx() + 1.0)
        support = np.abs(rhs.coeffs) > 0
        div = _check_divisors(box, omega, 1.0 + a_frak, gamma, tau_dioph, support)
        c = np.zeros(box.shape, dtype=complex)
        nz = np.abs(div) > 0
        c[nz] = rhs.coeffs[nz] / (1j * div[nz])
        c[zero] = 0.0
        new = TorusFunction(box, c).real()
        change = (new - beta).norm(s0)
        beta = new
        a_frak = float(multiply(a, beta.dx() + 1.0).mean().real)
        residual = transport_residual(a, beta, a_frak, omega).norm(s0)
        if residual <= tol or change <= 1e-3 * tol:
            break
        # stagnation at round-off: the residual no longer contracts
        if residual < 1e3 * tol and residual > 0.5 * best:
            break
        best = min(best, residual)
    else:
        raise ValueError(f"transport iteration did not converge (residual {residual:.3g})")
    beta_minus = -beta.reflect_x()
    residual_minus = transport_residual(a, beta_minus, a_frak, omega, sign=-1).norm(s0)
    alpha_plus = invert_diffeo(beta).alpha_inv
    alpha_minus = -alpha_plus.reflect_x()
    return StraighteningResult(a_frak, beta, beta_minus, alpha_plus, alpha_minus, residual, residual_minus, it, omega)


# ---------------------------------------------------------------------------
# Egorov


@dataclass(frozen=True, eq=False)
class EgorovResult:
    q_principal: Symbol
    q_sub: Symbol
    remainder_couple: BonyCouple
    depth_rho: int
    report: dict


SymbolFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _as_callable(w) -> tuple[SymbolFn, float]:
    if isinstance(w, Symbol):
        if w.exact is None:
            raise ValueError("Egorov conjugation needs a closed-form symbol (multiplier or callable)")
        f = w.exact
        return (lambda phi, x, xi: f(xi) * np.ones_like(x)), w.order_m
    fn, order = w
    return fn, order


def _dxi(fn: SymbolFn, n: int) -> SymbolFn:
    """n-th xi derivative of a callable symbol by a fourth-order stencil with step ~ <xi>/50."""
    if n == 0:
        return fn

    def first(phi, x, xi, f=_dxi(fn, n - 1)):
        h = 0.02 * np.maximum(1.0, np.abs(xi))
        return (-f(phi, x, xi + 2 * h) + 8 * f(phi, x, xi + h) - 8 * f(phi, x, xi - h) + f(phi, x, xi - 2 * h)) / (12 * h)

    return first


class _Flow:
    """Grid data for x -> x + tau alpha and the inverses of x -> x + sigma alpha."""

    def __init__(self, alpha: TorusFunction, M_phi: int, M_x: int):
        self.alpha = alpha
        self.box = alpha.box
        self.M_phi, self.M_x = M_phi, M_x
        self.c_phi = coeffs_to_grid(alpha.coeffs, [M_phi] * self.box.nu, range(self.box.nu))
        self.c_dx = coeffs_to_grid(alpha.dx().coeffs, [M_phi] * self.box.nu, range(self.box.nu))
        self.c_dxx = coeffs_to_grid(alpha.dx(2).coeffs, [M_phi] * self.box.nu, range(self.box.nu))
        mesh = np.meshgrid(*[grid_points(M_phi)] * self.box.nu, grid_points(M_x), indexing="ij")
        self.phi = np.stack(mesh[:-1])
        self.x = mesh[-1]
        self._inv = {}

    def ev(self, c, x):
        j = centered(self.box.K_x)
        return np.real(np.einsum("...qj,...j->...q", np.exp(1j * x[..., None] * j), c))

    def inverse(self, sigma: float) -> TorusFunction:
        key = round(float(sigma), 15)
        if key not in self._inv:
            self._inv[key] = TorusFunction.zeros(self.box) if sigma == 0 else invert_diffeo(self.alpha * sigma).alpha_inv
        return self._inv[key]

    def A(self, sigma, x, deriv=0):
        """A(sigma; x) = alpha / (1 + sigma alpha_x) and its x derivatives (numerically for deriv > 0)."""
        if deriv == 0:
            return self.ev(self.c_phi, x) / (1 + sigma * self.ev(self.c_dx, x))
        h = 1e-3
        f = lambda y: self.A(sigma, y, deriv - 1)
        return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)

    def forward(self, tau, x, xi):
        """Phi_tau(x, xi) = (x + tau alpha, xi / (1 + tau alpha_x))."""
        return x + tau * self.ev(self.c_phi, x), xi / (1 + tau * self.ev(self.c_dx, x))

    def backward(self, sigma, y, eta):
        """Phi_sigma^{-1}(y, eta)."""
        if sigma == 0:
            return y, eta
        inv = self.inverse(sigma)
        c_inv = coeffs_to_grid(inv.coeffs, [self.M_phi] * self.box.nu, range(self.box.nu))
        x = y + self.ev(c_inv, y)
        return x, eta * (1 + sigma * self.ev(self.c_dx, x))


def egorov_conjugate(w, d: TorusDiffeo, depth_rho: int = 3, b: float = 0.0, K_xi: int | None = None, n_quad: int = 6, K_sec: int | None = None) -> EgorovResult:
    """Symbol of C_alpha Op(w) C_alpha^{-1}: principal part w(x+alpha, xi/(1+alpha_x)) and lower orders.

    ``w`` is a closed-form :class:`Symbol` multiplier or a pair ``(fn(phi, x, xi), order)``.
    Lower orders solve the graded transport equations along the flow by
    Duhamel's formula with Gauss-Legendre quadrature in the flow parameter.
    """
    if depth_rho < 1:
        raise ValueError("depth_rho must be >= 1")
    alpha = d.alpha
    box = alpha.box
    if dx_sup(alpha) >= 1.0:
        raise ValueError("flow degeneracy: 1 + alpha_x <= 0")
    fn, order = _as_callable(w)
    K_xi = 2 * box.K_x if K_xi is None else K_xi
    fb = LatticeBox(box.nu, 2 * box.K_phi, 2 * box.K_x)
    M_phi, M_x = 2 * fb.K_phi + 1, 2 * fb.K_x + 1
    flow = _Flow(alpha, M_phi, M_x)
    xi_vals = centered(K_xi).astype(float)
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)

    # levels[k](tau, phi, x, xi) evaluates q_{m-k} at flow time tau
    def level0(tau, phi, x, xi):
        y, eta = flow.forward(tau, x, xi)
        return fn(phi, y, eta)

    levels = [level0]

    def make_level(k):
        def source(sigma, phi, x, xi):
            total = 0.0
            for n in range(2, k + 2):
                h = k - n + 1
                dq = _dxi(lambda p, y, e, s=sigma, lv=levels[h]: lv(s, p, y, e), n)(phi, x, xi)
                total = total - (1j * xi * flow.A(sigma, x, n)) * dq / (math.factorial(n) * 1j ** n)
            return total

        def level(tau, phi, x, xi):
            if tau == 0:
                return np.zeros(np.broadcast(x, xi).shape, dtype=complex)
            y, eta = flow.forward(tau, x, xi)
            out = 0.0
            for node, wt in zip(nodes, weights):
                sigma = 0.5 * tau * (node + 1)
                xs, es = flow.backward(sigma, y, eta)
                out = out + 0.5 * tau * wt * source(sigma, phi, xs, es)
            return out

        return level

    for k in range(1, depth_rho):
        levels.append(make_level(k))

    def tabulate(fun):
        slices = []
        for xi in xi_vals:
            vals = fun(1.0, flow.phi, flow.x, np.full(flow.x.shape, xi))
            slices.append(grid_to_coeffs(np.asarray(vals, dtype=complex), [fb.K_phi] * fb.nu + [fb.K_x], range(fb.nu + 1)))
        return np.stack(slices)

    q_principal = Symbol(box, order, K_xi, tabulate(levels[0]))
    sub = np.zeros_like(q_principal.data)
    for k in range(1, depth_rho):
        sub = sub + tabulate(levels[k])
    q_sub = Symbol(box, order - 1, K_xi, sub)
    C = composition_operator(d)
    Cinv = composition_operator(d, direction="inv")
    W = ToeplitzOperator.multiplier(box, np.array([fn(np.zeros(box.nu), np.zeros(1), np.array([float(j)]))[0] for j in centered(box.K_x)]))
    exact = compose(compose(C, W), Cinv) if _is_multiplier(fn, box) else None
    if exact is None:
        raise ValueError("the matrix oracle supports x-independent symbols only")
    remainder_op = exact - quantize(q_principal) - quantize(q_sub)
    remainder = bony_split(remainder_op, K_sec)
    report = {
        "principal_gap": band_profile(exact - quantize(q_principal)),
        "remainder_profile": band_profile(remainder_op),
        "symbol_profile": band_profile(W),
        "remainder_norm": couple_norm(remainder, remainder.s_star),
    }
    return EgorovResult(q_principal, q_sub, remainder, depth_rho, report)


def _is_multiplier(fn, box) -> bool:
    x = grid_points(7)
    xi = np.array([1.0, 3.0])
    vals = fn(np.zeros((box.nu, 1, 1)), x[None, :, None] * np.ones((1, 1, 2)), xi[None, None, :] * np.ones((1, 7, 1)))
    return bool(np.allclose(vals, vals[:, :1, :]))


def band_profile(A: ToeplitzOperator, interior: int | None = None) -> np.ndarray:
    """max |entry| over each column band |k| = J for J = 0..interior (default K_x // 2)."""
    K = A.box.K_x
    interior = K // 2 if interior is None else interior
    sl = slice(K - interior, K + interior + 1)
    mags = np.max(np.abs(A.entries), axis=tuple(range(A.box.nu)))[sl, sl]
    cols = centered(interior)
    return np.array([np.max(mags[:, np.abs(cols) == J]) for J in range(interior + 1)])


def order_slope(profile: np.ndarray, reference: np.ndarray, bands: Sequence[int]) -> float:
    """Slope of log(profile/reference) against log J over the given bands."""
    J = np.asarray(bands, dtype=float)
    ratio = profile[list(bands)] / reference[list(bands)]
    return float(np.polyfit(np.log(J), np.log(np.maximum(ratio, 1e-300)), 1)[0])


def egorov_principal_check(w_kind: str, eps: float = 1e-3, K_x: int = 24, mass: float = 1.0, bands=range(4, 11), floor: float = 1e-13) -> dict:
    """Compare C Op(w) C^{-1} with Op(q_principal) for w = xi or D_m and alpha = eps sin x.

    The returned ``slope`` is the fitted exponent of the band ratios; when every
    ratio is below ``floor`` the difference is at round-off level and has no
    measurable order, which is reported as ``at_roundoff``.
    """
    box = LatticeBox(1, 1, K_x)
    alpha = TorusFunction.from_callable(box, lambda p, x: eps * np.sin(x))
    d = invert_diffeo(alpha)
    if w_kind == "xi":
        fn = lambda phi, x, xi: xi * np.ones_like(x)
        order = 1.0
    elif w_kind == "dm":
        fn = lambda phi, x, xi: np.sqrt(xi ** 2 + mass) * np.ones_like(x)
        order = 1.0
    else:
        raise ValueError(w_kind)
    res = egorov_conjugate((fn, order), d, depth_rho=1)
    gap = res.report["principal_gap"]
    ref = res.report["symbol_profile"]
    ratio = gap[list(bands)] / ref[list(bands)]
    at_roundoff = bool(np.all(ratio < floor))
    slope = order_slope(gap, ref, bands)
    return {"slope": slope, "ratios": ratio, "at_roundoff": at_roundoff, "passed": at_roundoff or slope <= -1.0}


# ---------------------------------------------------------------------------


def straighten_first_order(a: TorusFunction, omega: Sequence[float], gamma: float = 0.01, enlarge: int = 3, K_sec: int | None = None, tau_dioph: float | None = None):
    """Conjugate omega.d_phi - i(1+a)|D| by L and return (a_frak, (L, L^{-1}), remainder couple, report).

    The conjugation is done on a box ``enlarge`` times wider in x so that the
    interior modes are free of truncation effects; the remainder is restricted
    back to the original box.
    """
    res = solve_transport(a, omega, gamma, tau_dioph)
    box = a.box
    big = box.with_K(K_x=enlarge * box.K_x)
    ap, am = res.alpha_plus.with_box(big), res.alpha_minus.with_box(big)
    L_pair = build_L(ap, am)
    L, L_inv = L_pair[0].block(1, 1), L_pair[1].block(1, 1)
    absD = ToeplitzOperator.multiplier(big, np.abs(centered(big.K_x)).astype(float))
    G = compose(ToeplitzOperator.multiplication(a.with_box(big) + 1.0), absD) * 1j
    G_new, _ = conjugate(L, G, omega, Phi_inv=L_inv)
    target = absD * (1j * (1 + res.a_frak))
    R = G_new - target
    R_small = _restrict(R, box)
    couple = bony_split(R_small, K_sec)
    lead = leading_coefficient_variation(R, box.K_x)
    report = {
        "transport_residual": res.residual,
        "leading_x_dependence": lead,
        "R_weighted_norm": couple_norm(couple.weighted(0.0, 1.0), couple.s_star),
    }
    return res.a_frak, L_pair, couple, report


def _restrict(op: ToeplitzOperator, box: LatticeBox) -> ToeplitzOperator:
    K_big = op.box.K_x
    sl = slice(K_big - box.K_x, K_big + box.K_x + 1)
    ent = op.entries[..., sl, sl]
    from .fourier_core import pad_centered

    ent = pad_centered(ent, [2 * box.K_phi] * box.nu, range(box.nu))
    return ToeplitzOperator(box, ent, 2 * box.K_phi)


def leading_coefficient_variation(R: ToeplitzOperator, K_fit: int, k_min: int | None = None) -> float:
    """Largest first-order coefficient left in R: per (l, h) diagonal, the least-squares slope in k.

    Columns k in [k_min, K_fit] and [-K_fit, -k_min] are fitted separately, so the
    result measures the x- and time-dependence of the coefficient of |D|.
    """
    K_big = R.box.K_x
    k_min = max(2, K_fit // 2) if k_min is None else k_min
    worst = 0.0
    ent = R.entries
    for sign in (1, -1):
        ks = sign * np.arange(k_min, K_fit + 1)
        for h in range(-K_fit, K_fit + 1):
            rows = ks + h
            if np.any(np.abs(rows) > K_big):
                continue
            vals = ent[..., rows + K_big, ks + K_big]
            X = np.vstack([np.abs(ks), np.ones_like(ks)]).T.astype(float)
            coef = np.linalg.lstsq(X, vals.reshape(-1, len(ks)).T, rcond=None)[0]
            worst = max(worst, float(np.max(np.abs(coef[0]))))
    return worst
