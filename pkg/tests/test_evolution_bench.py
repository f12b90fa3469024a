import numpy as np
import pytest
from hypothesis import given, strategies as st

from kgreduce.evolution_bench import (
    EvolutionConfig, InstabilityError, brute_force_spectrum, compare_spectrum, evolve_generator,
    evolve_original, predicted_spectrum, reduced_flow, to_complex, to_real,
)
from kgreduce.fourier_core import LatticeBox
from kgreduce.reduction_pipeline import KGCoefficients, outer, run_pipeline, system_operator

BOX = LatticeBox(1, 4, 6)
OMEGA = (0.1657528764382191,)


def test_complex_coordinates_roundtrip(rng):
    psi = rng.standard_normal(13) + 0j
    v = rng.standard_normal(13) + 0j
    p2, v2 = to_real(to_complex(psi, v, 1.0), 1.0)
    assert np.allclose(p2, psi) and np.allclose(v2, v)


def test_free_flow_preserves_energy_norm():
    c = KGCoefficients.zero(BOX)
    cfg = EvolutionConfig(T_final=5.0, dt=0.05, s_report=(0.0,))
    traj = evolve_original(c, OMEGA, cfg)
    # without forcing the flow only rotates the phases of the complex coordinates
    U = traj.states
    energy = np.sum(np.abs(U) ** 2, axis=1)
    assert np.allclose(energy, energy[0], rtol=1e-12)


def test_rk4_order():
    c = KGCoefficients.zero(LatticeBox(1, 2, 3))
    G = outer(system_operator(c))
    U0 = to_complex(*EvolutionConfig().initial(3), 1.0)
    exact = reduced_flow(run_pipeline(c, OMEGA).normal, c.box, U0, [1.0])[0]
    errs = []
    for dt in (0.02, 0.01):
        traj = evolve_generator(G, OMEGA, U0, EvolutionConfig(1.0, dt, "rk4", (1.0,)), 1.0)
        errs.append(np.max(np.abs(traj.states[-1] - exact)))
    assert errs[0] / errs[1] >= 8


def test_unstable_step_rejected():
    c = KGCoefficients.zero(BOX)
    with pytest.raises(ValueError, match="exceeds"):
        evolve_original(c, OMEGA, EvolutionConfig(1.0, 0.5, "rk4"))


def test_blowup_detected():
    c = KGCoefficients.reference(BOX, 1e-3)
    cfg = EvolutionConfig(2.0, 0.01, "magnus4", (2.0,), blowup=0.5)
    with pytest.raises(InstabilityError):
        evolve_original(c, OMEGA, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        EvolutionConfig(integrator="euler")
    with pytest.raises(ValueError):
        EvolutionConfig(dt=-1)


def test_magnus_order():
    c = KGCoefficients.reference(BOX, 1e-2)
    G = outer(system_operator(c))
    U0 = to_complex(*EvolutionConfig().initial(BOX.K_x), 1.0)

    def final(dt):
        return evolve_generator(G, OMEGA, U0, EvolutionConfig(4.0, dt, "magnus4", (1.0,)), 1.0).states[-1]

    ref = final(0.005)
    e1, e2 = np.max(np.abs(final(0.08) - ref)), np.max(np.abs(final(0.04) - ref))
    assert e1 / e2 >= 8


def test_spectral_oracle_small_box():
    c = KGCoefficients.reference(BOX, 1e-3)
    res = run_pipeline(c, OMEGA, tol=1e-30, max_steps=5)
    ev = brute_force_spectrum(outer(system_operator(c)), OMEGA)
    pv, labels = predicted_spectrum(res.normal, BOX, OMEGA, (2, 3))
    cmp = compare_spectrum(ev, pv, labels)
    assert cmp["max_relative_mismatch"] < 1e-6
    assert cmp["pairing_symmetry"] < 1e-10


def test_oracle_cap():
    c = KGCoefficients.zero(BOX)
    with pytest.raises(ValueError, match="cap"):
        brute_force_spectrum(outer(system_operator(c)), OMEGA, cap=10)


@given(st.floats(0.0, 50.0))
def test_reduced_flow_preserves_norms(t):
    res = run_pipeline(KGCoefficients.zero(BOX), OMEGA)
    U0 = to_complex(*EvolutionConfig().initial(BOX.K_x), 1.0)
    U = reduced_flow(res.normal, BOX, U0, [0.0, t])
    assert np.isclose(np.linalg.norm(U[1]), np.linalg.norm(U[0]), rtol=1e-12)
