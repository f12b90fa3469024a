"""Quantitative acceptance checks on the reference instance.

Each check prints one ``PASS``/``FAIL`` line with the measured value and the
bound.  Run ``python3 tests/test_acceptance.py`` for the table alone.
"""

import time

import numpy as np
import pytest

from kgreduce.cantor_measure import FrequencyWindow, exact_single_length, in_cantor, measure_estimate
from kgreduce.evolution_bench import EvolutionConfig, brute_force_spectrum, compare_spectrum, conjugated_agreement, evolve_original, predicted_spectrum
from kgreduce.fourier_core import LatticeBox, TorusFunction
from kgreduce.pseudo_ops import Symbol, compose_sharp, jap, quantize
from kgreduce.reduction_pipeline import (
    GENERATOR_KINDS, MAP_KINDS, KGCoefficients, assemble_conjugator, outer, run_pipeline,
    select_reference_omega, structure_report, system_operator,
)
from kgreduce.toeplitz_ops import compose
from kgreduce.transport_straightening import egorov_principal_check, straighten_first_order

BOX = LatticeBox(1, 8, 12)
EPS = 1e-3
GAMMA = 0.01


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}  {title}: {detail}"
    print(line)
    return passed


_cache = {}


def reference():
    if "ref" not in _cache:
        omega = select_reference_omega(BOX, 1.0, GAMMA)
        c = KGCoefficients.reference(BOX, EPS)
        t0 = time.perf_counter()
        res = run_pipeline(c, omega, tol=1e-40, max_steps=5)
        _cache["ref"] = (c, omega, res, time.perf_counter() - t0)
    return _cache["ref"]


def check_zero_perturbation():
    c = KGCoefficients.zero(BOX)
    omega = select_reference_omega(BOX, 1.0, GAMMA)
    t0 = time.perf_counter()
    res = run_pipeline(c, omega)
    elapsed = time.perf_counter() - t0
    lp, lm = res.normal.eigenvalues()
    dm = np.sqrt(np.arange(BOX.K_x + 1) ** 2 + 1.0)
    eig_gap = max(np.max(np.abs(lp - dm)), np.max(np.abs(lm - dm)))
    gap = res.report["conjugator_identity_gap"]
    ok = res.normal.c_frak == 0 and not np.any(res.normal.r) and eig_gap <= 1e-12 and gap <= 1e-12 and elapsed < 1.0
    return report(1, "zero perturbation", ok, f"c={res.normal.c_frak:g}, max|r|={np.max(np.abs(res.normal.r)):g}, eigen gap {eig_gap:.2e}, conjugator gap {gap:.2e}, {elapsed:.2f}s (< 1s)")


def check_spectral_oracle():
    c, omega, res, t_pipe = reference()
    accepted = in_cantor(omega, FrequencyWindow(1, GAMMA, L_max=BOX.K_phi))["ok"]
    t0 = time.perf_counter()
    ev = brute_force_spectrum(outer(system_operator(c)), omega)
    pv, labels = predicted_spectrum(res.normal, BOX, omega, (4, 6))
    cmp = compare_spectrum(ev, pv, labels)
    elapsed = t_pipe + time.perf_counter() - t0
    mis = cmp["max_relative_mismatch"]
    ok = accepted and mis <= 1e-6 and elapsed < 60
    return report(2, "spectral oracle", ok, f"omega={omega[0]:.16g} accepted={accepted}, mismatch {mis:.2e} over {cmp['n_compared']} modes (<= 1e-6), {elapsed:.1f}s")


def check_conjugation_residual():
    _, _, res, _ = reference()
    r = res.report["conjugation_residual"]
    return report(3, "conjugation residual", r <= 1e-7 * EPS, f"{r:.2e} (<= {1e-7 * EPS:.0e})")


def _random_symbol(rng, order, box, K_xi):
    fb = LatticeBox(box.nu, 2 * box.K_phi, 2 * box.K_x)
    xi = np.arange(-K_xi, K_xi + 1)
    data = np.zeros((2 * K_xi + 1,) + fb.shape, dtype=complex)
    for k in range(len(xi)):
        blk = rng.standard_normal((3, 7)) + 1j * rng.standard_normal((3, 7))
        data[k, fb.K_phi - 1:fb.K_phi + 2, fb.K_x - 3:fb.K_x + 4] = blk * jap(xi[k]) ** order
    return Symbol(box, order, K_xi, data)


def check_quantization():
    box = LatticeBox(1, 2, 9)
    rng = np.random.default_rng(4)
    K, I = box.K_x, 3
    sl = slice(K - I, K + I + 1)
    worst = 0.0
    for _ in range(20):
        a = _random_symbol(rng, int(rng.choice([-1, 0, 1])), box, 18)
        b = _random_symbol(rng, int(rng.choice([-1, 0, 1])), box, 18)
        lhs = quantize(compose_sharp(a, b))
        rhs = compose(quantize(a), quantize(b))
        scale = max(1.0, float(np.max(np.abs(lhs.entries))))
        worst = max(worst, float(np.max(np.abs((lhs.entries - rhs.entries)[..., sl, sl]))) / scale)
    return report(4, "quantization homomorphism", worst <= 1e-12, f"max relative entry gap {worst:.2e} over 20 pairs (<= 1e-12)")


def check_structure():
    _, _, res, _ = reference()
    worst = 0.0
    for diag in res.report["stages"].values():
        for part in diag["structure"].values():
            worst = max(worst, max(part["violations"].values()))
    for t in res.transforms:
        worst = max(worst, max(structure_report(t.Phi, MAP_KINDS)["violations"].values()))
    worst = max(worst, max(structure_report(res.state.generator, GENERATOR_KINDS)["violations"].values()))
    worst = max(worst, max(res.report["conjugator_structure"]["violations"].values()))
    return report(5, "structure preservation", worst <= 1e-10, f"max violation {worst:.2e} over {len(res.report['stages'])} stages and {len(res.transforms)} maps (<= 1e-10)")


def check_straightening():
    _, omega, res, _ = reference()
    a = TorusFunction.from_callable(BOX, lambda p, x: np.sqrt(1 - 2 * EPS * np.cos(p[0]) * np.cos(x)) - 1)
    _, _, _, rep = straighten_first_order(a, omega)
    pipe = res.report["stages"]["L4"]["transport_residual"]
    resid = max(rep["transport_residual"], pipe)
    lead = rep["leading_x_dependence"]
    ok = resid <= 1e-11 and lead <= 1e-8 * EPS
    return report(6, "straightening", ok, f"transport residual {resid:.2e} (<= 1e-11), leading x-dependence {lead:.2e} (<= {1e-8 * EPS:.0e})")


def check_kam_decay():
    _, _, res, _ = reference()
    eps = res.report["eps_sequence"]
    superlinear = all(eps[n + 1] <= eps[n] ** 1.3 for n in range(len(eps) - 1) if eps[n] <= 1e-4)
    ratio = eps[3] / eps[0]
    ok = superlinear and ratio <= 1e-6
    seq = ", ".join(f"{e:.2e}" for e in eps)
    return report(7, "KAM superlinear decay", ok, f"eps = [{seq}], eps3/eps0 = {ratio:.2e} (<= 1e-6)")


def check_measure():
    t0 = time.perf_counter()
    w = FrequencyWindow(1, GAMMA, L_max=BOX.K_phi)
    sweep = measure_estimate(w, "monte_carlo", 100_000, seed=7, gammas=[0.05, 0.02, 0.01])
    single = measure_estimate(w, "monte_carlo", 100_000, seed=11, single=("Lambda0", (3,)))
    elapsed = time.perf_counter() - t0
    row = single["sweep"][0]
    exact = exact_single_length(GAMMA, 3)
    within = abs(row["excluded_fraction"] - exact) <= 3 * row["sigma"]
    ok = abs(sweep["slope"] - 1) <= 0.2 and within and elapsed < 120
    fr = ", ".join(f"{r['excluded_fraction']:.4f}" for r in sweep["sweep"])
    return report(8, "measure scaling", ok, f"fractions [{fr}] slope {sweep['slope']:.3f} (1 +- 0.2); Q0(l=3) {row['excluded_fraction']:.5f} vs {exact:.5f} (3 sigma = {3 * row['sigma']:.1e}); {elapsed:.1f}s")


def check_stability():
    c, omega, res, _ = reference()
    cfg = EvolutionConfig(T_final=1000.0, dt=0.02, integrator="magnus4", s_report=(2.0, 3.0))
    t0 = time.perf_counter()
    traj = evolve_original(c, omega, cfg)
    F, _ = assemble_conjugator(res.transforms)
    agree = conjugated_agreement(F, traj, res.normal, omega)
    elapsed = time.perf_counter() - t0
    ratios = traj.ratios()
    ok = max(ratios.values()) <= 2 and agree <= 1e-6 * EPS and elapsed < 180
    rs = ", ".join(f"s={s:g}: {r:.3f}" for s, r in ratios.items())
    return report(9, "Sobolev stability", ok, f"T=1000 sup ratios {rs} (<= 2), conjugated agreement {agree:.2e} (<= {1e-6 * EPS:.0e}), {elapsed:.1f}s")


def check_egorov():
    parts = []
    ok = True
    for kind in ("xi", "dm"):
        out = egorov_principal_check(kind, eps=EPS)
        ok &= out["passed"]
        parts.append(f"w={kind}: " + ("difference at round-off" if out["at_roundoff"] else f"slope {out['slope']:.2f}"))
    return report(10, "Egorov principal symbol", ok, "; ".join(parts) + " (slope <= -1)")


CHECKS = [
    check_zero_perturbation, check_spectral_oracle, check_conjugation_residual, check_quantization,
    check_structure, check_straightening, check_kam_decay, check_measure, check_stability, check_egorov,
]


@pytest.mark.parametrize("check", CHECKS, ids=[f"criterion_{k + 1:02d}" for k in range(len(CHECKS))])
def test_acceptance(check, capsys):
    with capsys.disabled():
        passed = check()
    assert passed


if __name__ == "__main__":
    results = [check() for check in CHECKS]
    print(f"{sum(results)}/{len(results)} criteria passed")
