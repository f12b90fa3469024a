"""Time evolution of the original and reduced systems and the spectral oracle."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .fourier_core import LatticeBox, centered
from .reduction_pipeline import KGCoefficients, ReductionState, basis_labels, cos_sin_basis, eigen_diagonal, outer, system_operator
from .toeplitz_ops import BlockOperator2x2, NormalForm, dm_values

INTEGRATORS = ("rk4", "exp_midpoint", "magnus4")


class InstabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvolutionConfig:
    """Integration settings; ``psi0`` and ``v0`` are x-Fourier coefficient arrays of length 2K_x+1."""

    T_final: float = 100.0
    dt: float = 0.01
    integrator: str = "magnus4"
    s_report: tuple = (2.0, 3.0)
    psi0: np.ndarray | None = field(default=None, compare=False)
    v0: np.ndarray | None = field(default=None, compare=False)
    sample_every: float = 1.0
    blowup: float = 1e6

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if not (self.T_final > 0 and self.dt > 0):
            raise ValueError("T_final and dt must be positive")

    def initial(self, K: int):
        n = 2 * K + 1
        if self.psi0 is None:
            psi = np.zeros(n, dtype=complex)
            psi[K + 1] = psi[K - 1] = 0.5
            psi[K + 2], psi[K - 2] = -0.25j, 0.25j
            v = np.zeros(n, dtype=complex)
            v[K + 3] = v[K - 3] = 0.15
            return psi, v
        psi, v = np.asarray(self.psi0, dtype=complex), np.asarray(self.v0, dtype=complex)
        if psi.shape != (n,) or v.shape != (n,):
            raise ValueError("initial data must have 2K_x+1 coefficients")
        return psi, v


def to_complex(psi: np.ndarray, v: np.ndarray, mass: float) -> np.ndarray:
    """(u, u_bar) coefficients with u = (D_m psi - i psi_t)/sqrt2."""
    K = (len(psi) - 1) // 2
    dm = dm_values(K, mass)
    return np.concatenate([(dm * psi - 1j * v) / math.sqrt(2), (dm * psi + 1j * v) / math.sqrt(2)])


def to_real(U: np.ndarray, mass: float) -> tuple[np.ndarray, np.ndarray]:
    """(psi, psi_t) from the complex coordinates."""
    n = U.shape[-1] // 2
    K = (n - 1) // 2
    u, ub = U[..., :n], U[..., n:]
    dm = dm_values(K, mass)
    return (u + ub) / (math.sqrt(2) * dm), 1j * (u - ub) / math.sqrt(2)


def hs_norm(c: np.ndarray, s: float) -> np.ndarray:
    K = (c.shape[-1] - 1) // 2
    w = np.maximum(1, np.abs(centered(K))).astype(float) ** s
    return np.sqrt(np.sum(np.abs(c * w) ** 2, axis=-1))


def real_norm(U: np.ndarray, s: float, mass: float) -> np.ndarray:
    """||psi||_{H^{s+1}} + ||psi_t||_{H^s}."""
    psi, v = to_real(U, mass)
    return hs_norm(psi, s + 1) + hs_norm(v, s)


# ---------------------------------------------------------------------------
# integrators


def _phi12(z: np.ndarray):
    """(e^z - 1)/z and (e^z - 1 - z)/z^2 with series for small |z|."""
    small = np.abs(z) < 1e-2
    zs = np.where(small, 1.0, z)
    p1 = np.where(small, 1 + z / 2 + z ** 2 / 6 + z ** 3 / 24 + z ** 4 / 120, np.expm1(zs) / zs)
    p2 = np.where(small, 0.5 + z / 6 + z ** 2 / 24 + z ** 3 / 120 + z ** 4 / 720, (np.expm1(zs) - zs) / zs ** 2)
    return p1, p2


class _Interaction:
    """B(t) = exp(-N0 t) P(omega t) exp(N0 t) for G = N0 + P, N0 = diag(i mu)."""

    def __init__(self, G: BlockOperator2x2, omega, h: float):
        box = G.box
        mats = G.entries.reshape((-1, G.n, G.n))
        ells = box.ells(G.band)
        zero = int(np.flatnonzero(np.all(ells == 0, axis=1))[0])
        self.mu = np.diag(mats[zero]).imag.copy()
        P = mats.copy()
        P[zero] = P[zero] - np.diag(1j * self.mu)
        keep = [a for a in range(len(ells)) if np.any(P[a] != 0)]
        self.P = P[keep]
        self.w = (ells[keep] @ np.asarray(omega, dtype=float))
        nu_mat = self.w[:, None, None] + self.mu[None, None, :] - self.mu[None, :, None]
        self.nu_mat = nu_mat
        self.h = h
        p1, p2 = _phi12(1j * nu_mat * h)
        self.A0 = self.P * h * p1
        self.A1 = self.P * h * (0.5 * p1 - p2)

    def phases(self, t0: float):
        return np.exp(1j * self.w * t0)[:, None, None] * np.exp(-1j * self.mu * t0)[None, :, None] * np.exp(1j * self.mu * t0)[None, None, :]

    def B(self, t: float) -> np.ndarray:
        return np.sum(self.P * self.phases(t), axis=0)

    def magnus_step(self, t0: float) -> np.ndarray:
        ph = self.phases(t0)
        B0 = np.sum(self.A0 * ph, axis=0)
        B1 = np.sum(self.A1 * ph, axis=0)
        return scipy.linalg.expm(B0 + B1 @ B0 - B0 @ B1)

    def midpoint_step(self, t0: float) -> np.ndarray:
        return scipy.linalg.expm(self.h * self.B(t0 + 0.5 * self.h))


def _rk4(G: BlockOperator2x2, omega, U, t0, h):
    f = lambda t, y: G.evaluate(np.asarray(omega) * t) @ y
    k1 = f(t0, U)
    k2 = f(t0 + h / 2, U + h / 2 * k1)
    k3 = f(t0 + h / 2, U + h / 2 * k2)
    k4 = f(t0 + h, U + h * k3)
    return U + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray
    norms: dict
    initial_norms: dict
    runtime: float

    def ratios(self) -> dict:
        return {s: float(np.max(v) / self.initial_norms[s]) for s, v in self.norms.items()}


def _check_stability(G: BlockOperator2x2, cfg: EvolutionConfig):
    mats = G.entries.reshape((-1, G.n, G.n))
    if cfg.integrator == "rk4":
        scale = float(np.max(np.abs(np.linalg.eigvals(mats.sum(axis=0)))))
    else:
        ells = G.box.ells(G.band)
        zero = int(np.flatnonzero(np.all(ells == 0, axis=1))[0])
        P = mats.copy()
        P[zero] -= np.diag(np.diag(P[zero]))
        scale = float(np.sum(np.linalg.norm(P, 2, axis=(1, 2))))
    if cfg.dt * scale > 0.1:
        raise ValueError(f"dt * (largest multiplier) = {cfg.dt * scale:.3g} exceeds 0.1")


def evolve_generator(G: BlockOperator2x2, omega, U0: np.ndarray, cfg: EvolutionConfig, mass: float, observer: Callable | None = None) -> Trajectory:
    """Integrate dU/dt = G(omega t) U and sample the real-variable norms."""
    start = time.perf_counter()
    _check_stability(G, cfg)
    n_steps = int(round(cfg.T_final / cfg.dt))
    h = cfg.T_final / n_steps
    every = max(1, int(round(cfg.sample_every / h)))
    inter = _Interaction(G, omega, h) if cfg.integrator != "rk4" else None
    ts, states = [0.0], [U0.copy()]
    init = {s: float(real_norm(U0, s, mass)) for s in cfg.s_report}
    if cfg.integrator == "rk4":
        U = U0.copy()
        for k in range(n_steps):
            U = _rk4(G, omega, U, k * h, h)
            if (k + 1) % every == 0 or k + 1 == n_steps:
                _record(ts, states, (k + 1) * h, U, init, cfg, mass)
    else:
        W = U0.copy()
        step = inter.magnus_step if cfg.integrator == "magnus4" else inter.midpoint_step
        for k in range(n_steps):
            W = step(k * h) @ W
            if (k + 1) % every == 0 or k + 1 == n_steps:
                t = (k + 1) * h
                _record(ts, states, t, np.exp(1j * inter.mu * t) * W, init, cfg, mass)
    states = np.array(states)
    norms = {s: real_norm(states, s, mass) for s in cfg.s_report}
    return Trajectory(np.array(ts), states, norms, init, time.perf_counter() - start)


def _record(ts, states, t, U, init, cfg, mass):
    s0 = cfg.s_report[0]
    if real_norm(U, s0, mass) > cfg.blowup * init[s0]:
        raise InstabilityError(f"norm blowup at t = {t:.6g}: ratio above {cfg.blowup:g}")
    ts.append(t)
    states.append(U.copy())


def evolve_original(c: KGCoefficients, omega, cfg: EvolutionConfig) -> Trajectory:
    G = outer(system_operator(c))
    psi, v = cfg.initial(c.box.K_x)
    return evolve_generator(G, omega, to_complex(psi, v, c.mass_m), cfg, c.mass_m)


def reduced_flow(nf: NormalForm, box: LatticeBox, z0: np.ndarray, t: np.ndarray) -> np.ndarray:
    """exp(t iE[T]) z0 evaluated exactly in the cos/sin basis; returns shape (len(t), 2n)."""
    K = box.K_x
    Ub = cos_sin_basis(K)
    lam = eigen_diagonal(nf)
    n = box.n_x
    c_plus = Ub.T @ z0[:n]
    c_minus = Ub.T @ z0[n:]
    t = np.asarray(t, dtype=float)[:, None]
    zp = (np.exp(1j * lam * t) * c_plus) @ Ub.T
    zm = (np.exp(-1j * lam * t) * c_minus) @ Ub.T
    return np.concatenate([zp, zm], axis=1)


def evolve_reduced(nf: NormalForm, box: LatticeBox, z0: np.ndarray, cfg: EvolutionConfig) -> Trajectory:
    start = time.perf_counter()
    t = np.arange(0.0, cfg.T_final + 0.5 * cfg.sample_every, cfg.sample_every)
    states = reduced_flow(nf, box, z0, t)
    norms = {s: real_norm(states, s, nf.mass) for s in cfg.s_report}
    init = {s: float(real_norm(z0, s, nf.mass)) for s in cfg.s_report}
    return Trajectory(t, states, norms, init, time.perf_counter() - start)


def conjugated_agreement(F: BlockOperator2x2, traj: Trajectory, nf: NormalForm, omega) -> float:
    """max_t |F(omega t) U(t) - exp(t N) F(0) U(0)| / |F(0) U(0)|."""
    box = F.box
    V0 = F.evaluate(np.zeros(box.nu)) @ traj.states[0]
    red = reduced_flow(nf, box, V0, traj.t)
    worst = 0.0
    for k, t in enumerate(traj.t):
        V = F.evaluate(np.asarray(omega) * t) @ traj.states[k]
        worst = max(worst, float(np.max(np.abs(V - red[k]))))
    return worst / float(np.max(np.abs(V0)))


# ---------------------------------------------------------------------------
# spectral oracle


def brute_force_spectrum(st: ReductionState | BlockOperator2x2, omega=None, cap: int = 8000) -> np.ndarray:
    """Eigenvalues of i omega.l - G on the flattened (l, sigma, j) section."""
    G = st.generator if isinstance(st, ReductionState) else st
    omega = st.omega if omega is None else omega
    box = G.box
    mat = G.section()
    if mat.shape[0] > cap:
        raise ValueError(f"section dimension {mat.shape[0]} exceeds the cap {cap}")
    ells = box.ells(box.K_phi)
    w = np.repeat(ells @ np.asarray(omega, dtype=float), G.n)
    return np.linalg.eigvals(np.diag(1j * w) - mat)


def predicted_spectrum(nf: NormalForm, box: LatticeBox, omega, interior: tuple[int, int] = (4, 6)):
    """i(omega.l - sigma lambda_{j,eta}) for |l| <= interior[0], j <= interior[1]; returns values and labels."""
    lam = eigen_diagonal(nf)
    labels = basis_labels(nf.K_x)
    vals, labs = [], []
    for ell in box.ells(interior[0]):
        wl = float(ell @ np.asarray(omega, dtype=float))
        for (j, eta), l_val in zip(labels, lam):
            if j > interior[1]:
                continue
            for sigma in (1, -1):
                vals.append(1j * (wl - sigma * l_val))
                labs.append((tuple(int(e) for e in ell), j, eta, sigma, l_val))
    return np.array(vals), labs


def compare_spectrum(computed: np.ndarray, predicted: np.ndarray, labels) -> dict:
    """Optimal one-to-one matching; mismatch relative to lambda_{j,eta}."""
    cost = np.abs(predicted[:, None] - computed[None, :])
    rows, cols = linear_sum_assignment(cost)
    rel = np.array([cost[r, c] / labels[r][4] for r, c in zip(rows, cols)])
    worst = int(np.argmax(rel))
    return {
        "max_relative_mismatch": float(rel.max()),
        "worst_mode": labels[rows[worst]][:4],
        "n_compared": int(len(rows)),
        "pairing_symmetry": pairing_symmetry(computed),
    }


def pairing_symmetry(computed: np.ndarray) -> float:
    """Distance between the spectrum and its reflection -conj (reversible symmetry)."""
    mirror = -np.conj(computed)
    cost = np.abs(computed[:, None] - mirror[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max())


def stability_report(runs: Sequence[dict]) -> dict:
    """Tabulate per-omega sup-norm ratios; each run is {omega, in_set, trajectory, agreement?}."""
    rows = []
    for run in runs:
        traj = run["trajectory"]
        rows.append({
            "omega": list(np.atleast_1d(run["omega"]).astype(float)),
            "in_set": bool(run["in_set"]),
            "ratios": {str(s): r for s, r in traj.ratios().items()},
            "agreement": run.get("agreement"),
            "runtime": traj.runtime,
        })
    return {"runs": rows}
