"""Quantum Fisher information from truncated Lyapunov integrals.

Submodules:
    operators: dense Hermitian operator algebra.
    mpo: matrix product operators, compression and thermal states.
    probes: thermal transverse-field Ising probes and their derivatives.
    lyapunov: the integrator (QFI, SLD, encoding-operator variant).
    oracle: exact spectral QFI/SLD and a Krylov SLD solver.
    bounds: analytic truncation-error bounds.
    cli: command-line harness.
"""

from __future__ import annotations

from .lyapunov import (
    AdaptiveStep,
    FixedStep,
    IntegrationConfig,
    IntegrationTrace,
    accumulate_sld,
    integrate_encoding_variant,
    integrate_qfi,
)
from .mpo import MPO, TruncationPolicy
from .operators import DenseOperator, SpectralDecomposition
from .oracle import qfi_exact, qfi_truncated_exact, sld_exact, solve_sld_krylov, spectral_input
from .probes import ProbeSpec, build_probe

__version__ = "0.1.0"

__all__ = [
    "AdaptiveStep",
    "DenseOperator",
    "FixedStep",
    "IntegrationConfig",
    "IntegrationTrace",
    "MPO",
    "ProbeSpec",
    "SpectralDecomposition",
    "TruncationPolicy",
    "accumulate_sld",
    "build_probe",
    "integrate_encoding_variant",
    "integrate_qfi",
    "qfi_exact",
    "qfi_truncated_exact",
    "sld_exact",
    "solve_sld_krylov",
    "spectral_input",
]
