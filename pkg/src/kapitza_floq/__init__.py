"""Simulation engine for a flux-driven Kapitza-pendulum superconducting qubit.

Subpackages cover the circuit operators, Floquet eigenstructure, emission
spectra and protection metrics, open-system dynamics with an engineered
cooling filter, fluorescence-based measurement by quantum trajectories, and a
CLI for reproducible runs.
"""

from .circuit import CircuitParams, FluxWaveform, cosine_waveform, linear_waveform, triangle_waveform
from .floquet import EffectiveModel, FloquetSolution, effective_model, encode, solve

__version__ = "0.1.0"

__all__ = [
    "CircuitParams",
    "FluxWaveform",
    "FloquetSolution",
    "EffectiveModel",
    "cosine_waveform",
    "linear_waveform",
    "triangle_waveform",
    "effective_model",
    "encode",
    "solve",
    "__version__",
]
