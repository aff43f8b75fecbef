from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from lyapqfi import mpo as M
from lyapqfi.operators import IDENTITY_2, PAULI_X, PAULI_Z, DenseOperator, embed_site


def random_mpo(rng: np.random.Generator, n: int, bond: int) -> M.MPO:
    dims = [1] + [bond] * (n - 1) + [1]
    return M.MPO(
        tuple(
            rng.normal(size=(dims[k], 2, 2, dims[k + 1])) + 1j * rng.normal(size=(dims[k], 2, 2, dims[k + 1]))
            for k in range(n)
        )
    )


def dense(m: M.MPO) -> np.ndarray:
    return M.to_dense(m).matrix


def dense_tfim(n: int, j: float, g: float) -> np.ndarray:
    h = np.zeros((2**n, 2**n), dtype=complex)
    for k in range(n - 1):
        h -= j * embed_site(PAULI_X, k, n) @ embed_site(PAULI_X, k + 1, n)
    for k in range(n):
        h -= g * embed_site(PAULI_Z, k, n)
    return h


def test_identity_to_dense():
    assert np.allclose(dense(M.identity_mpo(3)), np.eye(8))


def test_from_dense_round_trip_exact():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    h = a + a.conj().T
    m = M.from_dense(DenseOperator(h))
    assert np.max(np.abs(dense(m) - h)) < 1e-12


def test_product_operator_has_unit_bonds():
    prod = np.kron(np.kron(PAULI_X, PAULI_Z), IDENTITY_2)
    m = M.from_dense(DenseOperator(prod), M.TruncationPolicy(1e-12))
    assert m.bond_dims == [1, 1, 1, 1]


def test_to_dense_guard():
    with pytest.raises(M.MPOError):
        M.to_dense(M.identity_mpo(13))


def test_malformed_tensors_rejected():
    with pytest.raises(M.MPOError):
        M.MPO((np.zeros((1, 2, 2, 2)), np.zeros((3, 2, 2, 1))))
    with pytest.raises(M.MPOError):
        M.MPO((np.zeros((2, 2, 2, 1)),))


def test_policy_validation():
    with pytest.raises(M.MPOError):
        M.TruncationPolicy(-1.0)
    with pytest.raises(M.MPOError):
        M.TruncationPolicy(0.0, 0)


def test_compress_exact_is_copy():
    rng = np.random.default_rng(1)
    m = random_mpo(rng, 4, 3)
    out, w = M.compress(m)
    assert w == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(dense(out), dense(m), atol=1e-10)
    assert all(x <= y for x, y in zip(out.bond_dims, m.bond_dims))


def test_compress_identity_unchanged():
    out, w = M.compress(M.identity_mpo(5), M.TruncationPolicy(0.5, 1))
    assert out.bond_dims == [1] * 6
    assert w == pytest.approx(0.0, abs=1e-14)
    assert np.allclose(dense(out), np.eye(32))


def test_compress_bond2_matches_dense_residual():
    rng = np.random.default_rng(2)
    m = random_mpo(rng, 4, 4)
    out, w = M.compress(m, M.TruncationPolicy(0.0, 2))
    full = dense(m)
    resid = np.linalg.norm(dense(out) - full) ** 2 / np.linalg.norm(full) ** 2
    assert out.max_bond <= 2
    assert w == pytest.approx(resid, abs=1e-10)
    assert M.frobenius_norm(out) <= M.frobenius_norm(m) * (1 + 1e-12)


def test_compress_canonical_form():
    rng = np.random.default_rng(3)
    out, _ = M.compress(random_mpo(rng, 5, 3), M.TruncationPolicy(1e-3, 4))
    assert out.canonical_center == 0
    assert max(M.isometry_defects(out)) < 1e-10


def test_compress_cutoff_respected():
    rng = np.random.default_rng(4)
    m = random_mpo(rng, 4, 4)
    cut = 0.05
    out, _ = M.compress(m, M.TruncationPolicy(cut))
    # every kept normalized Schmidt value across each cut is >= cut
    full = dense(out)
    norm = np.linalg.norm(full)
    for k in range(1, 4):
        mat = full.reshape([2] * 8).transpose(*[i for p in zip(range(4), range(4, 8)) for i in p])
        mat = mat.reshape(4**k, 4 ** (4 - k))
        s = np.linalg.svd(mat, compute_uv=False) / norm
        assert np.count_nonzero(s > 1e-12) <= out.bond_dims[k]
        assert np.all(s[: out.bond_dims[k]] >= cut - 1e-10)


def test_canonicalize_centers():
    rng = np.random.default_rng(5)
    m = random_mpo(rng, 5, 3)
    for c in range(5):
        cm = M.canonicalize(m, c)
        assert cm.canonical_center == c
        assert max(M.isometry_defects(cm)) < 1e-10
        assert np.allclose(dense(cm), dense(m), atol=1e-9)


def test_multiply_dense_oracle():
    rng = np.random.default_rng(6)
    a, b = random_mpo(rng, 3, 2), random_mpo(rng, 3, 3)
    prod = M.mpo_multiply(a, b)
    assert np.max(np.abs(dense(prod) - dense(a) @ dense(b))) < 1e-10
    assert prod.bond_dims == [x * y for x, y in zip(a.bond_dims, b.bond_dims)]


def test_multiply_identity_and_involution():
    rng = np.random.default_rng(7)
    m = random_mpo(rng, 3, 2)
    assert np.allclose(dense(M.mpo_multiply(M.identity_mpo(3), m)), dense(m))
    z = M.site_operator_mpo(PAULI_Z, 1, 3)
    assert np.allclose(dense(M.mpo_multiply(z, z)), np.eye(8))


def test_multiply_length_mismatch():
    with pytest.raises(M.MPOError):
        M.mpo_multiply(M.identity_mpo(2), M.identity_mpo(3))


def test_zipup_product_close_to_exact():
    rng = np.random.default_rng(8)
    a, b = random_mpo(rng, 5, 4), random_mpo(rng, 5, 4)
    exact = dense(a) @ dense(b)
    approx = dense(M.mpo_multiply(a, b, M.TruncationPolicy(0.0, 8)))
    assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) < 0.5
    big = dense(M.mpo_multiply(a, b, M.TruncationPolicy(0.0, 64)))
    assert np.linalg.norm(big - exact) / np.linalg.norm(exact) < 1e-10


def test_add_trace_inner():
    rng = np.random.default_rng(9)
    m = random_mpo(rng, 3, 2)
    zero = M.mpo_add(m, M.scale(m, -1.0), M.TruncationPolicy(0.0))
    assert abs(M.mpo_trace(zero)) < 1e-12
    assert M.frobenius_norm(zero) < 1e-12
    assert M.mpo_trace(M.identity_mpo(5)) == pytest.approx(32.0)
    a, b = random_mpo(rng, 3, 2), random_mpo(rng, 3, 3)
    assert M.hs_inner(a, b) == pytest.approx(np.vdot(dense(a), dense(b)), abs=1e-10)
    s = M.mpo_sum([a, b], [2.0, -1j])
    assert np.allclose(dense(s), 2 * dense(a) - 1j * dense(b))


def test_dagger_and_hermitian_part():
    rng = np.random.default_rng(10)
    m = random_mpo(rng, 3, 2)
    assert np.allclose(dense(M.dagger(m)), dense(m).conj().T)
    h = dense(M.hermitian_part(m))
    assert np.allclose(h, 0.5 * (dense(m) + dense(m).conj().T))


def test_tfim_mpo_examples():
    assert np.allclose(dense(M.build_tfim_mpo(2, 1.0, 0.0)), -np.kron(PAULI_X, PAULI_X))
    assert np.allclose(dense(M.build_tfim_mpo(2, 0.0, 1.0)), -np.kron(PAULI_Z, IDENTITY_2) - np.kron(IDENTITY_2, PAULI_Z))
    m = M.build_tfim_mpo(6, 1.0, 2.0)
    assert m.max_bond == 3
    assert np.max(np.abs(dense(m) - dense_tfim(6, 1.0, 2.0))) < 1e-12
    with pytest.raises(M.MPOError):
        M.build_tfim_mpo(1, 1.0, 1.0)


def test_chain_hamiltonian_matches_builder():
    m = M.tfim_chain(5, 0.7, 1.3).to_mpo()
    assert np.max(np.abs(dense(m) - dense_tfim(5, 0.7, 1.3))) < 1e-12


def test_field_mpo():
    m = M.build_field_mpo(4, PAULI_Z)
    expected = sum(embed_site(PAULI_Z, k, 4) for k in range(4))
    assert m.max_bond == 2
    assert np.allclose(dense(m), expected)


def test_thermal_beta_zero_is_maximally_mixed():
    rho = M.thermal_mpo(M.tfim_chain(3, 1.0, 1.0), 0.0)
    assert np.allclose(dense(rho), np.eye(8) / 8)


def test_thermal_single_site_closed_form():
    chain = M.ChainHamiltonian((-1.0 * PAULI_Z,))
    rho = dense(M.thermal_mpo(chain, 4.0, 0.025))
    expected = np.diag([math.exp(4), math.exp(-4)]) / (2 * math.cosh(4))
    assert np.allclose(rho, expected, atol=1e-12)
    assert rho[0, 0].real == pytest.approx(0.99966, abs=1e-5)


def test_thermal_n4_matches_dense():
    h = dense_tfim(4, 1.0, 2.0)
    exact = expm(-4.0 * h)
    exact /= np.trace(exact)
    rho = M.thermal_mpo(M.tfim_chain(4, 1.0, 2.0), 4.0, 1e-3, M.TruncationPolicy(1e-12))
    assert np.linalg.norm(dense(rho) - exact) <= 1e-5


def test_thermal_trace_at_checkpoints():
    rho, saved = M.thermal_mpo(M.tfim_chain(4, 1.0, 1.0), 2.0, 0.1, M.TruncationPolicy(1e-12), checkpoints=(0.5, 1.0))
    assert set(saved) == {0.5, 1.0}
    for m in [rho, *saved.values()]:
        assert M.mpo_trace(m).real == pytest.approx(1.0, abs=1e-12)


def test_thermal_trotter_second_order():
    h = dense_tfim(3, 1.0, 1.0)
    exact = expm(-2.0 * h)
    exact /= np.trace(exact)
    errs = [
        np.linalg.norm(dense(M.thermal_mpo(M.tfim_chain(3, 1.0, 1.0), 2.0, db)) - exact) for db in (0.2, 0.1)
    ]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)


def _random_state_mpo(rng: np.random.Generator, n: int) -> tuple[M.MPO, np.ndarray]:
    g = rng.normal(size=(2**n, 2**n)) + 1j * rng.normal(size=(2**n, 2**n))
    r = g @ g.conj().T
    r /= np.trace(r)
    return M.from_dense(DenseOperator.hermitian_from(r)), r


def test_exp_step_zero_is_identity():
    rng = np.random.default_rng(11)
    rho, _ = _random_state_mpo(rng, 2)
    om = random_mpo(rng, 2, 2)
    out, w = M.exp_step_apply(rho, om, 0.0)
    assert out is om and w == 0.0


def test_exp_step_third_order_local_error():
    rng = np.random.default_rng(12)
    rho_m, rho = _random_state_mpo(rng, 2)
    om_d = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    om_d = om_d + om_d.conj().T
    om = M.from_dense(DenseOperator(om_d))
    errs = []
    for ds in (0.1, 0.05):
        e = expm(-rho * ds)
        out, _ = M.exp_step_apply(rho_m, om, ds)
        errs.append(np.linalg.norm(dense(out) - e @ om_d @ e))
    assert errs[0] / errs[1] == pytest.approx(8.0, rel=0.1)


def test_exp_step_maximally_mixed_scalar_factor():
    rng = np.random.default_rng(13)
    rho = M.scale(M.identity_mpo(3), 1 / 8)
    om = random_mpo(rng, 3, 2)
    ds = 0.3
    out, _ = M.exp_step_apply(rho, om, ds)
    f2 = 1 - ds / 8 + (ds / 8) ** 2 / 2
    assert np.allclose(dense(out), f2**2 * dense(om), atol=1e-12)
    # and the series factor is close to the exact scalar exp(-2 ds / d)
    assert f2**2 == pytest.approx(math.exp(-2 * ds / 8), rel=1e-4)


def test_exp_step_diagonal_elementwise():
    lam = np.array([0.5, 0.3, 0.15, 0.05])
    rho = M.from_dense(DenseOperator(np.diag(lam).astype(complex)))
    om_d = np.diag([1.0, -2.0, 0.5, 3.0]).astype(complex)
    ds = 0.01
    out, _ = M.exp_step_apply(rho, M.from_dense(DenseOperator(om_d)), ds)
    expected = np.diag(np.diag(om_d) * np.exp(-2 * lam * ds))
    assert np.allclose(dense(out), expected, atol=1e-7)


def test_exp_step_preserves_hermiticity():
    rng = np.random.default_rng(14)
    rho_m, _ = _random_state_mpo(rng, 3)
    a = random_mpo(rng, 3, 2)
    om = M.hermitian_part(a)
    out, _ = M.exp_step_apply(rho_m, om, 0.1, M.TruncationPolicy(1e-12))
    d = dense(out)
    assert np.max(np.abs(d - d.conj().T)) < 1e-10


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    m, _ = M.compress(random_mpo(rng, 4, 3))
    path = tmp_path / "state.mpo"
    M.save_mpo(path, m)
    back = M.load_mpo(path)
    assert back.bond_dims == m.bond_dims
    assert back.canonical_center == m.canonical_center
    for x, y in zip(back.tensors, m.tensors):
        assert np.array_equal(x, y)
    raw = path.read_bytes()
    assert raw[:8] == b"LYAPMPO1"


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.mpo"
    p.write_bytes(b"not an mpo at all")
    with pytest.raises(M.MPOError):
        M.load_mpo(p)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=4))
def test_compress_never_grows(seed, cap):
    rng = np.random.default_rng(seed)
    m = random_mpo(rng, 4, 3)
    out, w = M.compress(m, M.TruncationPolicy(1e-3, cap))
    assert out.max_bond <= min(cap, m.max_bond)
    assert M.frobenius_norm(out) <= M.frobenius_norm(m) * (1 + 1e-10)
    assert 0.0 <= w <= 1.0 + 1e-12
