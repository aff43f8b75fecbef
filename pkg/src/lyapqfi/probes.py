"""Thermal transverse-field Ising probes under a uniform-field encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import mpo as mpo_mod
from .mpo import MPO, TruncationPolicy
from .operators import (
    PAULI_X,
    PAULI_Z,
    DenseOperator,
    OperatorError,
    as_operator,
    commutator_derivative,
    embed_site,
    spectral_decompose,
)

Backend = Literal["dense", "mpo"]

DEGENERACY_TOL = 1e-10
DEFAULT_DBETA = 0.025


@dataclass(frozen=True)
class ProbeSpec:
    """TFIM thermal probe; energies in units of J, beta in units of 1/J."""

    n: int
    j: float = 1.0
    g: float = 2.0
    beta: float = 4.0
    theta: float = 1.0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"need at least one site, got N={self.n}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.j <= 0:
            raise ValueError(f"J must be positive, got {self.j}")


@dataclass(frozen=True)
class GapReport:
    gap: float
    m: int
    n: int | None
    gs_population: float
    gs_population_exact: float
    flags: tuple[str, ...] = ()


def _dense_tfim(n: int, j: float, g: float) -> np.ndarray:
    dim = 2**n
    h = np.zeros((dim, dim), dtype=np.complex128)
    xs = [embed_site(PAULI_X, k, n) for k in range(n)]
    for k in range(n - 1):
        h -= j * xs[k] @ xs[k + 1]
    for k in range(n):
        h -= g * embed_site(PAULI_Z, k, n)
    return h


def tfim_hamiltonian(spec: ProbeSpec, backend: Backend = "dense") -> DenseOperator | MPO:
    """-J sum X_j X_{j+1} - g sum Z_j with open boundaries."""
    if backend == "dense":
        return DenseOperator.hermitian_from(_dense_tfim(spec.n, spec.j, spec.g))
    if spec.n == 1:
        return mpo_mod.product_mpo([-spec.g * PAULI_Z])
    return mpo_mod.build_tfim_mpo(spec.n, spec.j, spec.g)


def encoding_generator(n: int, backend: Backend = "dense") -> DenseOperator | MPO:
    """A = sum_j Z_j."""
    if backend == "dense":
        diag = np.zeros(2**n)
        for k in range(n):
            diag += np.diag(embed_site(PAULI_Z, k, n)).real
        return DenseOperator(np.diag(diag).astype(np.complex128), hermitian=True)
    return mpo_mod.build_field_mpo(n, PAULI_Z)


def thermal_probe(
    spec: ProbeSpec,
    backend: Backend = "dense",
    dbeta: float | None = None,
    policy: TruncationPolicy = mpo_mod.EXACT,
) -> DenseOperator | MPO:
    """exp(-beta H) / Z, before encoding."""
    if backend == "dense":
        decomp = spectral_decompose(tfim_hamiltonian(spec, "dense"))
        energies = decomp.eigenvalues
        # shift by the ground energy so exp() cannot overflow
        weights = np.exp(-spec.beta * (energies - energies.min()))
        weights /= weights.sum()
        v = decomp.eigenvectors
        return DenseOperator.hermitian_from((v * weights) @ v.conj().T)
    step = dbeta if dbeta is not None else DEFAULT_DBETA / spec.j
    chain = mpo_mod.tfim_chain(spec.n, spec.j, spec.g)
    return mpo_mod.thermal_mpo(chain, spec.beta, step, policy)


def encode(
    rho: DenseOperator | MPO,
    theta: float,
    a: DenseOperator | np.ndarray | None = None,
    site_op: np.ndarray = PAULI_Z,
) -> DenseOperator | MPO:
    """exp(-i theta A) rho exp(i theta A).

    On MPOs ``A`` must be the uniform sum of ``site_op``; the unitary then
    factorizes into exact single-site rotations.
    """
    if isinstance(rho, MPO):
        vals, vecs = np.linalg.eigh(np.asarray(site_op, dtype=np.complex128))
        u = (vecs * np.exp(-1j * theta * vals)) @ vecs.conj().T
        tensors = tuple(np.einsum("bc,lcdr,dk->lbkr", u, t, u.conj().T) for t in rho.tensors)
        return MPO(tensors, rho.canonical_center)
    r = as_operator(rho)
    if a is None:
        a = encoding_generator(int(round(math.log2(r.dim))), "dense")
    decomp = spectral_decompose(as_operator(a))
    v = decomp.eigenvectors
    u = (v * np.exp(-1j * theta * decomp.eigenvalues)) @ v.conj().T
    return DenseOperator.hermitian_from(u @ r.matrix @ u.conj().T)


def state_derivative(
    rho_theta: DenseOperator | MPO,
    a: DenseOperator | MPO,
    policy: TruncationPolicy | None = None,
) -> DenseOperator | MPO:
    """-i[A, rho]; MPO products are compressed with ``policy`` when given."""
    if isinstance(rho_theta, MPO):
        if not isinstance(a, MPO):
            raise OperatorError("MPO state needs an MPO generator")
        ar = mpo_mod.mpo_multiply(a, rho_theta, policy)
        ra = mpo_mod.mpo_multiply(rho_theta, a, policy)
        return mpo_mod.mpo_sum([ar, ra], [-1j, 1j], policy)
    return commutator_derivative(a, rho_theta)


def degenerate_levels(energies: np.ndarray, tol: float) -> list[tuple[float, int]]:
    """Group ascending energies into (level, multiplicity) with an absolute tolerance."""
    levels: list[tuple[float, int]] = []
    for e in np.sort(np.asarray(energies, dtype=float)):
        if levels and abs(e - levels[-1][0]) <= tol:
            levels[-1] = (levels[-1][0], levels[-1][1] + 1)
        else:
            levels.append((float(e), 1))
    return levels


def gap_report(energies: np.ndarray, beta: float, j: float = 1.0, tol: float | None = None) -> GapReport:
    """Gap, ground/first-excited degeneracies and ground-state population.

    ``gs_population`` is 1/(m (1 + exp(-beta gap))); ``gs_population_exact``
    is the Gibbs weight of a single ground state.
    """
    tol = DEGENERACY_TOL * j if tol is None else tol
    e = np.sort(np.asarray(energies, dtype=float))
    levels = degenerate_levels(e, tol)
    e0, m = levels[0]
    weights = np.exp(-beta * (e - e0))
    exact = float(1.0 / weights.sum())
    if len(levels) < 2:
        return GapReport(0.0, m, None, 1.0 / m, exact, ("single-level spectrum: first excited degeneracy undefined",))
    e1, n = levels[1]
    gap = e1 - e0
    formula = 1.0 / (m * (1.0 + math.exp(-beta * gap)))
    return GapReport(gap, m, n, formula, exact)


@dataclass(frozen=True)
class Probe:
    """Encoded state, its derivative and the generator on one backend."""

    spec: ProbeSpec
    rho: DenseOperator | MPO
    drho: DenseOperator | MPO
    generator: DenseOperator | MPO
    backend: Backend


def build_probe(
    spec: ProbeSpec,
    backend: Backend = "dense",
    dbeta: float | None = None,
    rho_policy: TruncationPolicy = mpo_mod.EXACT,
    drho_policy: TruncationPolicy | None = None,
    thermal_state: MPO | None = None,
) -> Probe:
    """Thermal state, encoded at ``spec.theta``, with its derivative.

    ``thermal_state`` short-circuits imaginary-time evolution (checkpoint reuse).
    """
    a = encoding_generator(spec.n, backend)
    rho0 = thermal_state if thermal_state is not None else thermal_probe(spec, backend, dbeta, rho_policy)
    rho = encode(rho0, spec.theta, a if backend == "dense" else None)
    drho = state_derivative(rho, a, drho_policy if backend == "mpo" else None)
    return Probe(spec, rho, drho, a, backend)
