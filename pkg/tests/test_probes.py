from __future__ import annotations

import math

import numpy as np
import pytest

from lyapqfi import mpo as M
from lyapqfi import probes as P
from lyapqfi.operators import PAULI_Z, spectral_decompose
from lyapqfi.oracle import qfi_exact, spectral_input


def test_probe_spec_validation():
    with pytest.raises(ValueError):
        P.ProbeSpec(0)
    with pytest.raises(ValueError):
        P.ProbeSpec(2, beta=-1)
    with pytest.raises(ValueError):
        P.ProbeSpec(2, j=0.0)


def test_hamiltonian_examples():
    h = P.tfim_hamiltonian(P.ProbeSpec(2, g=0.0))
    assert np.allclose(np.sort(spectral_decompose(h).eigenvalues), [-1, -1, 1, 1])
    h1 = P.tfim_hamiltonian(P.ProbeSpec(1, g=0.7))
    assert np.allclose(h1.matrix, -0.7 * PAULI_Z)
    spec = P.ProbeSpec(6, g=2.0)
    assert np.max(np.abs(M.to_dense(P.tfim_hamiltonian(spec, "mpo")).matrix - P.tfim_hamiltonian(spec).matrix)) < 1e-12


def test_encoding_generator():
    assert np.allclose(P.encoding_generator(1).matrix, PAULI_Z)
    assert np.allclose(np.diag(P.encoding_generator(2).matrix), [2, 0, 0, -2])
    a4 = P.encoding_generator(4).matrix
    assert np.trace(a4 @ a4).real == pytest.approx(64.0)
    am = P.encoding_generator(4, "mpo")
    assert am.max_bond == 2
    assert np.allclose(M.to_dense(am).matrix, a4)


def test_thermal_probe_examples():
    assert np.allclose(P.thermal_probe(P.ProbeSpec(3, beta=0.0)).matrix, np.eye(8) / 8)
    rho = P.thermal_probe(P.ProbeSpec(1, g=1.0, beta=4.0)).matrix
    assert rho[0, 0].real == pytest.approx(0.99966, abs=1e-5)
    assert rho[1, 1].real == pytest.approx(0.00034, abs=1e-5)


def test_thermal_probe_large_beta_no_overflow():
    rho = P.thermal_probe(P.ProbeSpec(4, g=2.0, beta=500.0))
    assert np.all(np.isfinite(rho.matrix))
    assert np.trace(rho.matrix).real == pytest.approx(1.0)


def test_encode_examples():
    rho = P.thermal_probe(P.ProbeSpec(3, g=1.0))
    assert np.allclose(P.encode(rho, 0.0).matrix, rho.matrix)
    enc = P.encode(rho, 1.0)
    lam0 = spectral_decompose(rho).eigenvalues
    lam1 = spectral_decompose(enc).eigenvalues
    assert np.max(np.abs(lam0 - lam1)) < 1e-12
    twice = P.encode(P.encode(rho, 0.4), 0.6)
    assert np.allclose(twice.matrix, enc.matrix, atol=1e-12)


def test_encode_mpo_matches_dense():
    spec = P.ProbeSpec(2, g=1.0)
    rho_d = P.thermal_probe(spec)
    rho_m = M.from_dense(rho_d)
    enc_m = P.encode(rho_m, 1.0)
    enc_d = P.encode(rho_d, 1.0)
    assert np.max(np.abs(M.to_dense(enc_m).matrix - enc_d.matrix)) < 1e-12


def test_state_derivative():
    mixed = P.thermal_probe(P.ProbeSpec(2, beta=0.0))
    assert np.allclose(P.state_derivative(mixed, P.encoding_generator(2)).matrix, 0)
    spec = P.ProbeSpec(4, g=0.0)
    pd = P.build_probe(spec)
    d = pd.drho.matrix
    assert np.max(np.abs(d)) > 1e-3
    assert abs(np.trace(d)) < 1e-12
    assert np.allclose(d, d.conj().T)
    pm = P.build_probe(P.ProbeSpec(4, g=2.0), "mpo", dbeta=1e-3, rho_policy=M.TruncationPolicy(1e-12))
    pd2 = P.build_probe(P.ProbeSpec(4, g=2.0))
    assert M.frobenius_norm(pm.drho) == pytest.approx(np.linalg.norm(pd2.drho.matrix), rel=1e-5)


def test_gap_report_two_level():
    rep = P.gap_report(np.array([0.0, 2.0]), 4.0)
    assert rep.m == 1 and rep.n == 1
    assert rep.gap == pytest.approx(2.0)
    assert rep.gs_population == pytest.approx(1 / (1 + math.exp(-8)))
    assert rep.gs_population == pytest.approx(0.999665, abs=1e-6)


def test_gap_report_degeneracies():
    e = spectral_decompose(P.tfim_hamiltonian(P.ProbeSpec(4, g=0.0))).eigenvalues
    assert P.gap_report(e, 4.0).m == 2
    e2 = spectral_decompose(P.tfim_hamiltonian(P.ProbeSpec(4, g=2.0))).eigenvalues
    rep = P.gap_report(e2, 4.0)
    assert rep.m == 1 and rep.gap > 0


def test_gap_report_tolerance_rule():
    rep = P.gap_report(np.array([0.0, 5e-11, 1.0]), 1.0)
    assert rep.m == 2
    rep = P.gap_report(np.array([0.0, 5e-9, 1.0]), 1.0)
    assert rep.m == 1


def test_gap_report_single_level_flagged():
    rep = P.gap_report(np.zeros(4), 1.0)
    assert rep.n is None and rep.flags


def test_qfi_invariant_under_theta():
    f = [
        qfi_exact(spectral_input(pr.rho, pr.drho))
        for pr in (P.build_probe(P.ProbeSpec(4, g=1.0, theta=t)) for t in (0.3, 1.0))
    ]
    assert f[0] == pytest.approx(f[1], rel=1e-10)


def test_thermal_n6_cross_backend():
    spec = P.ProbeSpec(6, g=2.0)
    rho_m = P.thermal_probe(spec, "mpo", dbeta=0.005, policy=M.TruncationPolicy(1e-12))
    dist = np.linalg.norm(M.to_dense(rho_m).matrix - P.thermal_probe(spec).matrix)
    # second-order Trotter: the 1e-3 step of the acceptance run gives 25x less
    assert dist <= 2.5e-5 * 1.5
