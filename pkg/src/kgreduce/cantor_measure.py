"""Resonant sets of the frequency cube: membership tests and Monte Carlo measure estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .fourier_core import centered
from .toeplitz_ops import NormalForm

SETS = ("Lambda0", "Lambda1", "Lambda2_plus", "Lambda2_minus")


@dataclass(frozen=True)
class FrequencyWindow:
    """Thresholds, cutoffs and the eigenvalue model used by the resonance tests.

    ``eigen`` is either ``None`` (the zeroth-order model sqrt(j^2 + m)), an array of
    lambda_j for j = 0..J_max, or a :class:`NormalForm` whose lambda_{j,+-} are used.
    """

    nu: int
    gamma: float = 0.01
    tau_dioph: float | None = None
    L_max: int = 8
    J_max: int | None = None
    mass: float = 1.0
    c_frak: float = 0.0
    eigen: object = field(default=None, compare=False)
    lo: float = -0.5
    hi: float = 0.5
    gamma_powers: tuple = (1.0, 1.5)

    def __post_init__(self):
        if not 0 <= self.gamma < 0.5:
            raise ValueError("gamma must lie in [0, 1/2)")
        tau = 2.0 * self.nu + 5.0 if self.tau_dioph is None else float(self.tau_dioph)
        if tau <= 2 * self.nu + 4:
            raise ValueError("tau_dioph must exceed 2 nu + 4")
        object.__setattr__(self, "tau_dioph", tau)
        if self.J_max is None:
            object.__setattr__(self, "J_max", int(math.ceil(self.resonance_constant() * max(1, self.L_max))))

    def resonance_constant(self) -> float:
        """C with |lambda_j - lambda_k| <= C <l> forced by |omega.l| <= |l| sqrt(nu) max|omega|."""
        return 2.0 * (1.0 + math.sqrt(self.nu))

    def with_gamma(self, gamma: float) -> "FrequencyWindow":
        from dataclasses import replace

        return replace(self, gamma=gamma)

    def eigenvalues(self) -> tuple[np.ndarray, np.ndarray]:
        """(lambda_{j,+}, lambda_{j,-}) for j = 0..J_max."""
        J = self.J_max
        base = (1 + self.c_frak) * np.sqrt(np.arange(J + 1.0) ** 2 + self.mass)
        if self.eigen is None:
            return base, base
        if isinstance(self.eigen, NormalForm):
            lp, lm = self.eigen.eigenvalues()
            K = len(lp) - 1
            out_p, out_m = base.copy(), base.copy()
            # beyond the normal form's box the corrections are extended by the last value
            scale = (1 + self.eigen.c_frak) / (1 + self.c_frak) if self.c_frak != -1 else 1.0
            out_p[:K + 1], out_m[:K + 1] = lp[:J + 1], lm[:J + 1]
            if J > K:
                out_p[K + 1:] = base[K + 1:] * scale + (lp[K] - (1 + self.eigen.c_frak) * math.sqrt(K * K + self.mass))
                out_m[K + 1:] = base[K + 1:] * scale + (lm[K] - (1 + self.eigen.c_frak) * math.sqrt(K * K + self.mass))
            return out_p, out_m
        lam = np.asarray(self.eigen, dtype=float)
        if lam.shape != (J + 1,):
            raise ValueError("eigen must hold lambda_j for j = 0..J_max")
        return lam, lam


def _lattice(nu: int, L: int) -> np.ndarray:
    grids = np.meshgrid(*[centered(L)] * nu, indexing="ij")
    ells = np.stack([g.ravel() for g in grids], axis=1)
    ells = ells[np.any(ells != 0, axis=1)]
    return ells[np.argsort(np.abs(ells).sum(axis=1), kind="stable")]


class _Targets:
    """Per set: the values v and labels of the divisors |omega.l - v| and their threshold rule."""

    def __init__(self, w: FrequencyWindow):
        J = w.J_max
        lp, lm = w.eigenvalues()
        j_all = centered(J)
        self.sets = {}
        self.sets["Lambda0"] = (np.zeros(1), [(0, 0, 0, 0)])
        self.sets["Lambda1"] = ((1 + w.c_frak) * j_all.astype(float), [(int(j), 0, 0, 0) for j in j_all])
        lam = np.concatenate([lp, lm[1:]])
        lab = [(j, 1) for j in range(J + 1)] + [(j, -1) for j in range(1, J + 1)]
        s = lam[:, None] + lam[None, :]
        d = lam[None, :] - lam[:, None]
        labels = [(a[0], b[0], a[1], b[1]) for a in lab for b in lab]
        self.sets["Lambda2_plus"] = (np.concatenate([s.ravel(), -s.ravel()]), labels + labels)
        self.sets["Lambda2_minus"] = (d.ravel(), labels)
        self.sorted = {}
        for name, (vals, labels) in self.sets.items():
            order = np.argsort(vals, kind="stable")
            self.sorted[name] = (vals[order], order)


def _nearest(sorted_vals: np.ndarray, x: np.ndarray):
    idx = np.searchsorted(sorted_vals, x)
    lo = np.clip(idx - 1, 0, len(sorted_vals) - 1)
    hi = np.clip(idx, 0, len(sorted_vals) - 1)
    dlo = np.abs(x - sorted_vals[lo])
    dhi = np.abs(x - sorted_vals[hi])
    pick = np.where(dlo <= dhi, lo, hi)
    return np.minimum(dlo, dhi), pick


def _threshold(w: FrequencyWindow, name: str, ell: np.ndarray) -> float:
    g1, g2 = w.gamma_powers
    norm1 = float(np.sum(np.abs(ell)))
    if name == "Lambda0":
        return 2 * w.gamma ** g1 * norm1 ** (-w.nu)
    jap = max(1.0, norm1)
    if name == "Lambda2_minus":
        return 2 * w.gamma ** g2 * jap ** (-w.tau_dioph)
    return 2 * w.gamma ** g1 * jap ** (-w.tau_dioph)


def _excluded(omegas: np.ndarray, w: FrequencyWindow, targets: _Targets, names: Sequence[str], ells: np.ndarray | None = None):
    """Boolean (N, len(names)) exclusion matrix and, per sample, the first witness index."""
    ells = _lattice(w.nu, w.L_max) if ells is None else ells
    N = omegas.shape[0]
    hit = np.zeros((N, len(names)), dtype=bool)
    for ell in ells:
        x = omegas @ ell
        for c, name in enumerate(names):
            vals, order = targets.sorted[name]
            thr = _threshold(w, name, ell)
            dist, _ = _nearest(vals, x)
            hit[:, c] |= dist < thr
    return hit


def in_cantor(omega: Sequence[float], w: FrequencyWindow) -> dict:
    """Membership of omega in the complement of the resonant sets, with a witness when rejected."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if omega.shape != (w.nu,):
        raise ValueError("omega must have nu components")
    targets = _Targets(w)
    for ell in _lattice(w.nu, w.L_max):
        x = float(omega @ ell)
        for name in SETS:
            vals, labels = targets.sets[name]
            thr = _threshold(w, name, ell)
            dist = np.abs(x - vals)
            bad = np.flatnonzero(dist < thr)
            if bad.size:
                k = int(bad[np.argmin(dist[bad])])
                j, kk, eta, eta_p = labels[k]
                return {"ok": False, "which_set": name, "witness": {"l": [int(e) for e in ell], "j": j, "k": kk, "eta": eta, "eta_p": eta_p, "divisor": float(dist[k]), "threshold": thr}}
    return {"ok": True, "which_set": None, "witness": None, "tail_margin": tail_margin(omega, w)}


def tail_margin(omega, w: FrequencyWindow) -> float:
    """Smallest divisor/threshold ratio over L_max < |l|_inf <= 2 L_max (values above 1 are safe)."""
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    wide = _lattice(w.nu, 2 * w.L_max)
    outer = wide[np.max(np.abs(wide), axis=1) > w.L_max]
    targets = _Targets(w)
    worst = math.inf
    for ell in outer:
        x = float(omega @ ell)
        for name in SETS:
            thr = _threshold(w, name, ell)
            if thr == 0:
                continue
            dist, _ = _nearest(targets.sorted[name][0], np.array([x]))
            worst = min(worst, float(dist[0]) / thr)
    return worst


def sample_window(w: FrequencyWindow, N: int, sampler: str = "monte_carlo", seed: int = 0) -> np.ndarray:
    if sampler == "monte_carlo":
        rng = np.random.Generator(np.random.Philox(seed))
        u = rng.random((N, w.nu))
    elif sampler == "grid":
        u = qmc.Halton(d=w.nu, scramble=False).random(N + 1)[1:]
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    return w.lo + (w.hi - w.lo) * u


def measure_estimate(w: FrequencyWindow, sampler: str = "monte_carlo", N: int = 100_000, seed: int = 0, gammas: Sequence[float] | None = None, single: tuple | None = None) -> dict:
    """Excluded fraction of the window, its breakdown by set, and the fit against gamma.

    ``single = (set_name, l)`` restricts the test to one set at one l, e.g. ``("Lambda0", (3,))``.
    """
    if sampler == "monte_carlo" and N < 10_000:
        raise ValueError("Monte Carlo estimates need N >= 10^4")
    omegas = sample_window(w, N, sampler, seed)
    gammas = [w.gamma] if gammas is None else list(gammas)
    names = list(SETS) if single is None else [single[0]]
    ells = None if single is None else np.array([single[1]], dtype=int)
    rows = []
    for g in gammas:
        wg = w.with_gamma(g)
        targets = _Targets(wg)
        hit = _excluded(omegas, wg, targets, names, ells)
        any_hit = hit.any(axis=1)
        frac = float(any_hit.mean())
        rows.append({
            "gamma": g,
            "excluded_fraction": frac,
            "sigma": math.sqrt(max(frac * (1 - frac), 1e-300) / N),
            "per_set": {name: float(hit[:, c].mean()) for c, name in enumerate(names)},
        })
    out = {"sweep": rows, "N": N, "sampler": sampler, "seed": seed}
    out["excluded_fraction"] = rows[0]["excluded_fraction"]
    out["per_set_breakdown"] = rows[0]["per_set"]
    if len(gammas) >= 2:
        g = np.log([r["gamma"] for r in rows])
        f = np.log([max(r["excluded_fraction"], 1e-300) for r in rows])
        slope, intercept = np.polyfit(g, f, 1)
        out["slope"] = float(slope)
        out["fitted_C"] = float(math.exp(intercept))
    else:
        out["fitted_C"] = rows[0]["excluded_fraction"] / max(w.gamma, 1e-300)
    return out


def exact_single_length(gamma: float, ell: int, nu: int = 1, lo: float = -0.5, hi: float = 0.5) -> float:
    """Length of {|omega l| < 2 gamma |l|^-nu} inside [lo, hi] for nu = 1, as a fraction of the window."""
    half = 2 * gamma / abs(ell) ** (nu + 1)
    return (min(hi, half) - max(lo, -half)) / (hi - lo)
