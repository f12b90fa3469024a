"""Reducibility of quasi-periodically forced Klein-Gordon operators on truncated Fourier lattices."""

from .cantor_measure import FrequencyWindow, in_cantor, measure_estimate
from .evolution_bench import EvolutionConfig, evolve_original
from .fourier_core import LatticeBox, ParamFamily, TorusFunction, lip_norm, multiply, sobolev_norm, symmetry_check
from .reduction_pipeline import KGCoefficients, run_pipeline, select_reference_omega
from .toeplitz_ops import BlockOperator2x2, NormalForm, ToeplitzOperator

__all__ = [
    "BlockOperator2x2",
    "EvolutionConfig",
    "FrequencyWindow",
    "KGCoefficients",
    "LatticeBox",
    "NormalForm",
    "ParamFamily",
    "ToeplitzOperator",
    "TorusFunction",
    "evolve_original",
    "in_cantor",
    "lip_norm",
    "measure_estimate",
    "multiply",
    "run_pipeline",
    "select_reference_omega",
    "sobolev_norm",
    "symmetry_check",
]

__version__ = "0.1.0"
