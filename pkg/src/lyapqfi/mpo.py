"""Matrix product operators over qubit chains.

Site tensors use the index order (left bond, bra, ket, right bond), tagged
``"LBKR"`` in serialized files. Site 0 is the most significant Kronecker
factor when densifying, so ``to_dense`` agrees with ``np.kron`` ordering.

Compression truncates Schmidt values of the operator normalized to unit
Frobenius norm, which keeps the cutoff meaningful while integrands decay.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .operators import IDENTITY_2, PAULI_X, PAULI_Z, DenseOperator, matrix_exp_scaled

PHYS_DIM = 2
MAX_DENSE_SITES = 12
INDEX_ORDER = "LBKR"
FILE_MAGIC = b"LYAPMPO1"


class MPOError(ValueError):
    """Raised for incompatible or malformed MPOs."""


@dataclass(frozen=True)
class TruncationPolicy:
    """Schmidt-value cutoff and bond cap applied by :func:`compress`.

    Attributes:
        sv_cutoff: keep normalized Schmidt values >= this value.
        max_bond: hard cap on every bond; ``None`` means unbounded.
        dynamic: the integrator rescales ``sv_cutoff`` with the integrand amplitude.
    """

    sv_cutoff: float = 0.0
    max_bond: int | None = None
    dynamic: bool = False

    def __post_init__(self) -> None:
        if not self.sv_cutoff >= 0.0:
            raise MPOError(f"sv_cutoff must be nonnegative, got {self.sv_cutoff}")
        if self.max_bond is not None and self.max_bond < 1:
            raise MPOError(f"max_bond must be >= 1, got {self.max_bond}")

    def with_cutoff(self, sv_cutoff: float) -> TruncationPolicy:
        return replace(self, sv_cutoff=sv_cutoff)

    def with_max_bond(self, max_bond: int | None) -> TruncationPolicy:
        return replace(self, max_bond=max_bond)


EXACT = TruncationPolicy()


@dataclass(frozen=True)
class MPO:
    """Operator on ``n_sites`` qubits stored as rank-4 site tensors."""

    tensors: tuple[np.ndarray, ...]
    canonical_center: int | None = field(default=None)

    def __post_init__(self) -> None:
        tensors = tuple(np.asarray(t, dtype=np.complex128) for t in self.tensors)
        if not tensors:
            raise MPOError("an MPO needs at least one site")
        for k, t in enumerate(tensors):
            if t.ndim != 4 or t.shape[1] != PHYS_DIM or t.shape[2] != PHYS_DIM:
                raise MPOError(f"site {k}: expected (l, 2, 2, r) tensor, got {t.shape}")
            if k > 0 and tensors[k - 1].shape[3] != t.shape[0]:
                raise MPOError(f"bond mismatch between sites {k - 1} and {k}")
        if tensors[0].shape[0] != 1 or tensors[-1].shape[3] != 1:
            raise MPOError("boundary bonds must have dimension 1")
        object.__setattr__(self, "tensors", tensors)

    @property
    def n_sites(self) -> int:
        return len(self.tensors)

    @property
    def bond_dims(self) -> list[int]:
        return [self.tensors[0].shape[0]] + [t.shape[3] for t in self.tensors]

    @property
    def max_bond(self) -> int:
        return max(self.bond_dims)

    def __len__(self) -> int:
        return self.n_sites


# ---------------------------------------------------------------------------
# construction


def product_mpo(ops: Sequence[np.ndarray]) -> MPO:
    """Tensor product of single-site 2x2 operators (all bonds 1)."""
    return MPO(tuple(np.asarray(op, dtype=np.complex128).reshape(1, 2, 2, 1) for op in ops))


def identity_mpo(n_sites: int) -> MPO:
    return product_mpo([IDENTITY_2] * n_sites)


def site_operator_mpo(op: np.ndarray, site: int, n_sites: int) -> MPO:
    return product_mpo([op if k == site else IDENTITY_2 for k in range(n_sites)])


def scale(m: MPO, c: complex) -> MPO:
    """c * M; the factor lands on the canonical center when there is one."""
    k = m.canonical_center if m.canonical_center is not None else 0
    tensors = list(m.tensors)
    tensors[k] = tensors[k] * c
    return MPO(tuple(tensors), m.canonical_center)


def dagger(m: MPO) -> MPO:
    """Hermitian conjugate: swap bra and ket and conjugate."""
    return MPO(tuple(t.transpose(0, 2, 1, 3).conj() for t in m.tensors), m.canonical_center)


def to_dense(m: MPO, max_sites: int = MAX_DENSE_SITES) -> DenseOperator:
    """Contract the chain into a 2^N x 2^N matrix (guarded to N <= max_sites)."""
    n = m.n_sites
    if n > max_sites:
        raise MPOError(f"refusing to densify {n} sites (limit {max_sites})")
    acc = m.tensors[0].reshape(2, 2, -1)  # (b0, k0, r)
    for t in m.tensors[1:]:
        acc = np.tensordot(acc, t, axes=([acc.ndim - 1], [0]))
    acc = acc.reshape((2, 2) * n)
    perm = list(range(0, 2 * n, 2)) + list(range(1, 2 * n, 2))
    dim = 2**n
    return DenseOperator(acc.transpose(perm).reshape(dim, dim))


def from_dense(
    o: DenseOperator | np.ndarray, policy: TruncationPolicy | None = None
) -> MPO:
    """Factorize a dense 2^N x 2^N operator by successive bipartite SVDs."""
    mat = o.matrix if isinstance(o, DenseOperator) else np.asarray(o, dtype=np.complex128)
    dim = mat.shape[0]
    n = int(round(math.log2(dim)))
    if 2**n != dim or mat.shape != (dim, dim):
        raise MPOError(f"dense operator must be 2^N x 2^N, got {mat.shape}")
    perm = [x for k in range(n) for x in (k, n + k)]
    rest = mat.reshape((2,) * (2 * n)).transpose(perm).reshape(1, -1)
    tensors = []
    left = 1
    for _ in range(n - 1):
        rest = rest.reshape(left * 4, -1)
        u, s, vh = np.linalg.svd(rest, full_matrices=False)
        keep = max(1, int(np.count_nonzero(s > s[0] * 1e-15))) if s.size and s[0] > 0 else 1
        tensors.append(u[:, :keep].reshape(left, 2, 2, keep))
        rest = s[:keep, None] * vh[:keep]
        left = keep
    tensors.append(rest.reshape(left, 2, 2, 1))
    m = MPO(tuple(tensors), n - 1)
    if policy is None:
        return m
    return compress(m, policy)[0]


# ---------------------------------------------------------------------------
# canonical form and compression


def _left_orthonormalize(tensors: list[np.ndarray]) -> list[np.ndarray]:
    out = list(tensors)
    for k in range(len(out) - 1):
        l, _, _, r = out[k].shape
        q, rmat = np.linalg.qr(out[k].reshape(l * 4, r))
        out[k] = q.reshape(l, 2, 2, q.shape[1])
        out[k + 1] = np.tensordot(rmat, out[k + 1], axes=([1], [0]))
    return out


def canonicalize(m: MPO, center: int) -> MPO:
    """Mixed canonical form with orthogonality center at ``center`` (QR sweeps)."""
    n = m.n_sites
    if not 0 <= center < n:
        raise MPOError(f"center {center} out of range for {n} sites")
    tensors = list(m.tensors)
    for k in range(center):
        l, _, _, r = tensors[k].shape
        q, rmat = np.linalg.qr(tensors[k].reshape(l * 4, r))
        tensors[k] = q.reshape(l, 2, 2, q.shape[1])
        tensors[k + 1] = np.tensordot(rmat, tensors[k + 1], axes=([1], [0]))
    for k in range(n - 1, center, -1):
        l, _, _, r = tensors[k].shape
        q, rmat = np.linalg.qr(tensors[k].reshape(l, 4 * r).T)
        tensors[k] = q.T.reshape(q.shape[1], 2, 2, r)
        tensors[k - 1] = np.tensordot(tensors[k - 1], rmat.T, axes=([3], [0]))
    return MPO(tuple(tensors), center)


def isometry_defects(m: MPO) -> list[float]:
    """Per-site deviation from the isometry condition implied by the canonical center."""
    if m.canonical_center is None:
        raise MPOError("MPO carries no canonical center")
    out = []
    for k, t in enumerate(m.tensors):
        l, _, _, r = t.shape
        if k < m.canonical_center:
            mat = t.reshape(l * 4, r)
            out.append(float(np.max(np.abs(mat.conj().T @ mat - np.eye(r)))))
        elif k > m.canonical_center:
            mat = t.reshape(l, 4 * r)
            out.append(float(np.max(np.abs(mat @ mat.conj().T - np.eye(l)))))
        else:
            out.append(0.0)
    return out


def _kept_count(s: np.ndarray, norm: float, policy: TruncationPolicy) -> int:
    if norm == 0.0 or s.size == 0:
        return 1
    keep = int(np.count_nonzero(s / norm >= policy.sv_cutoff)) if policy.sv_cutoff > 0 else s.size
    if policy.max_bond is not None:
        keep = min(keep, policy.max_bond)
    return max(1, keep)


def compress(m: MPO, policy: TruncationPolicy = EXACT) -> tuple[MPO, float]:
    """Truncate the Schmidt decomposition at every bond.

    A left-canonical QR sweep is followed by a right-to-left SVD sweep, so
    each truncation sees exact Schmidt values of the current operator.

    Returns:
        The compressed MPO (canonical center at site 0) and the discarded
        weight: the summed squares of dropped Schmidt values of the operator
        normalized to unit Frobenius norm. This equals
        ||M - M'||_F^2 / ||M||_F^2.
    """
    tensors = _left_orthonormalize(list(m.tensors))
    norm = float(np.linalg.norm(tensors[-1]))
    discarded = 0.0
    for k in range(len(tensors) - 1, 0, -1):
        l, _, _, r = tensors[k].shape
        u, s, vh = np.linalg.svd(tensors[k].reshape(l, 4 * r), full_matrices=False)
        keep = _kept_count(s, norm, policy)
        if norm > 0.0:
            discarded += float(np.sum((s[keep:] / norm) ** 2))
        tensors[k] = vh[:keep].reshape(keep, 2, 2, r)
        tensors[k - 1] = np.tensordot(tensors[k - 1], u[:, :keep] * s[:keep], axes=([3], [0]))
    return MPO(tuple(tensors), 0), discarded


def frobenius_norm(m: MPO) -> float:
    if m.canonical_center is not None:
        return float(np.linalg.norm(m.tensors[m.canonical_center]))
    return math.sqrt(max(hs_inner(m, m).real, 0.0))


# ---------------------------------------------------------------------------
# algebra


def _check_lengths(a: MPO, b: MPO) -> None:
    if a.n_sites != b.n_sites:
        raise MPOError(f"length mismatch: {a.n_sites} vs {b.n_sites} sites")


def _exact_product(a: MPO, b: MPO) -> MPO:
    tensors = []
    for ta, tb in zip(a.tensors, b.tensors):
        w = np.einsum("aimc,bmkd->abikcd", ta, tb)
        la, lb, _, _, ra, rb = w.shape
        tensors.append(w.reshape(la * lb, 2, 2, ra * rb))
    return MPO(tuple(tensors))


def _left_basis(mat: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``count`` left singular vectors and values, descending.

    Wide matrices go through a partial eigensolve of the Gram matrix, several
    times cheaper than a full SVD; small singular values lose accuracy there,
    which only shifts which directions a truncation keeps.
    """
    rows, cols = mat.shape
    count = min(count, rows)
    if 2 * rows > cols:
        u, s, _ = np.linalg.svd(mat, full_matrices=False)
        return u[:, :count], s[:count]
    w, u = scipy.linalg.eigh(mat @ mat.conj().T, subset_by_index=(rows - count, rows - 1), driver="evr")
    return u[:, ::-1], np.sqrt(np.clip(w[::-1], 0.0, None))


def _zipup_product(a: MPO, b: MPO, chi: int, rel_cutoff: float) -> MPO:
    """Left-to-right product with SVD truncation applied on the fly."""
    carry = np.ones((1, 1, 1), dtype=np.complex128)  # (chi, bond_a, bond_b)
    tensors = []
    n = a.n_sites
    for k in range(n):
        t = np.tensordot(carry, a.tensors[k], axes=([1], [0]))  # (x, b, i, m, a')
        t = np.tensordot(t, b.tensors[k], axes=([1, 3], [0, 1]))  # (x, i, a', k, b')
        t = t.transpose(0, 1, 3, 2, 4)
        x, _, _, ra, rb = t.shape
        if k == n - 1:
            tensors.append(t.reshape(x, 2, 2, 1))
            break
        mat = t.reshape(x * 4, ra * rb)
        u, s = _left_basis(mat, chi)
        keep = s.size
        if s.size and s[0] > 0 and rel_cutoff > 0:
            keep = max(1, int(np.count_nonzero(s >= rel_cutoff * s[0])))
        keep = min(keep, chi)
        u = u[:, :keep]
        tensors.append(u.reshape(x, 2, 2, keep))
        # exact projection onto the kept columns, whatever their accuracy
        carry = (u.conj().T @ mat).reshape(keep, ra, rb)
    return MPO(tuple(tensors))


def mpo_multiply(a: MPO, b: MPO, policy: TruncationPolicy | None = None) -> MPO:
    """Operator product A B.

    Without a policy the exact product is returned, with bond dimensions
    multiplying. With a policy the product is formed by a truncating zip-up
    (bond cap twice the target) and then compressed.
    """
    _check_lengths(a, b)
    if policy is None:
        return _exact_product(a, b)
    exact_bond = max(x * y for x, y in zip(a.bond_dims, b.bond_dims))
    target = policy.max_bond
    if target is None or exact_bond <= 2 * target:
        return compress(_exact_product(a, b), policy)[0]
    prod = _zipup_product(a, b, chi=2 * target, rel_cutoff=0.1 * policy.sv_cutoff)
    return compress(prod, policy)[0]


def mpo_sum(
    terms: Sequence[MPO], coeffs: Sequence[complex] | None = None, policy: TruncationPolicy | None = None
) -> MPO:
    """Linear combination by block-diagonal bond concatenation."""
    if not terms:
        raise MPOError("nothing to sum")
    n = terms[0].n_sites
    for t in terms[1:]:
        _check_lengths(terms[0], t)
    coeffs = [1.0] * len(terms) if coeffs is None else list(coeffs)
    if len(coeffs) != len(terms):
        raise MPOError("one coefficient per term required")
    if n == 1:
        site = sum(c * t.tensors[0] for c, t in zip(coeffs, terms))
        out = MPO((site,))
        return out if policy is None else compress(out, policy)[0]
    tensors = []
    for k in range(n):
        blocks = [t.tensors[k] for t in terms]
        if k == 0:
            site = np.concatenate([c * blk for c, blk in zip(coeffs, blocks)], axis=3)
        elif k == n - 1:
            site = np.concatenate(blocks, axis=0)
        else:
            ls = [blk.shape[0] for blk in blocks]
            rs = [blk.shape[3] for blk in blocks]
            site = np.zeros((sum(ls), 2, 2, sum(rs)), dtype=np.complex128)
            lo = ro = 0
            for blk, l, r in zip(blocks, ls, rs):
                site[lo : lo + l, :, :, ro : ro + r] = blk
                lo += l
                ro += r
        tensors.append(site)
    out = MPO(tuple(tensors))
    return out if policy is None else compress(out, policy)[0]


def mpo_add(a: MPO, b: MPO, policy: TruncationPolicy | None = None) -> MPO:
    """A + B; compressed when a policy is given."""
    return mpo_sum([a, b], policy=policy)


def mpo_trace(m: MPO) -> complex:
    env = np.ones(1, dtype=np.complex128)
    for t in m.tensors:
        env = env @ np.trace(t, axis1=1, axis2=2)
    return complex(env[0])


def hs_inner(a: MPO, b: MPO) -> complex:
    """tr[A^dagger B] via the two-layer transfer contraction."""
    _check_lengths(a, b)
    env = np.ones((1, 1), dtype=np.complex128)
    for ta, tb in zip(a.tensors, b.tensors):
        t = np.tensordot(env, ta.conj(), axes=([0], [0]))  # (y, b, k, r)
        env = np.tensordot(t, tb, axes=([0, 1, 2], [0, 1, 2]))
    return complex(env[0, 0])


def hermitian_part(m: MPO, policy: TruncationPolicy | None = None) -> MPO:
    return mpo_sum([m, dagger(m)], [0.5, 0.5], policy)


# ---------------------------------------------------------------------------
# Hamiltonians


def build_tfim_mpo(n_sites: int, j: float, g: float) -> MPO:
    """Open-chain -J sum X_j X_{j+1} - g sum Z_j with bond dimension 3."""
    if n_sites < 2:
        raise MPOError("the Ising chain needs at least two sites")
    bulk = np.zeros((3, 2, 2, 3), dtype=np.complex128)
    bulk[0, :, :, 0] = IDENTITY_2
    bulk[0, :, :, 1] = -j * PAULI_X
    bulk[0, :, :, 2] = -g * PAULI_Z
    bulk[1, :, :, 2] = PAULI_X
    bulk[2, :, :, 2] = IDENTITY_2
    tensors = [bulk[0:1]] + [bulk] * (n_sites - 2) + [bulk[:, :, :, 2:3]]
    return MPO(tuple(t.copy() for t in tensors))


def build_field_mpo(n_sites: int, op: np.ndarray = PAULI_Z, coeff: float = 1.0) -> MPO:
    """coeff * sum_j op_j with bond dimension 2 (1 for a single site)."""
    op = np.asarray(op, dtype=np.complex128)
    if n_sites == 1:
        return product_mpo([coeff * op])
    bulk = np.zeros((2, 2, 2, 2), dtype=np.complex128)
    bulk[0, :, :, 0] = IDENTITY_2
    bulk[0, :, :, 1] = coeff * op
    bulk[1, :, :, 1] = IDENTITY_2
    tensors = [bulk[0:1]] + [bulk] * (n_sites - 2) + [bulk[:, :, :, 1:2]]
    return MPO(tuple(t.copy() for t in tensors))


@dataclass(frozen=True)
class ChainHamiltonian:
    """Nearest-neighbour qubit Hamiltonian split for Trotterization.

    ``bonds[k]`` is the 4x4 coupling on sites (k, k+1); ``fields[k]`` the
    2x2 term on site k.
    """

    fields: tuple[np.ndarray, ...]
    bonds: tuple[np.ndarray, ...] = ()

    @property
    def n_sites(self) -> int:
        return len(self.fields)

    def to_mpo(self) -> MPO:
        n = self.n_sites
        terms = [
            site_operator_mpo(self.fields[k], k, n) for k in range(n)
        ]
        for k, bond in enumerate(self.bonds):
            terms.append(_two_site_mpo(bond, k, n))
        return compress(mpo_sum(terms), TruncationPolicy(sv_cutoff=1e-14))[0]


def tfim_chain(n_sites: int, j: float, g: float) -> ChainHamiltonian:
    fields = tuple(-g * PAULI_Z for _ in range(n_sites))
    bonds = tuple(-j * np.kron(PAULI_X, PAULI_X) for _ in range(n_sites - 1))
    return ChainHamiltonian(fields, bonds)


def _split_two_site(gate: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g4 = gate.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)  # (b1 k1, b2 k2)
    u, s, vh = np.linalg.svd(g4)
    keep = max(1, int(np.count_nonzero(s > 1e-14 * max(s[0], 1e-300))))
    left = (u[:, :keep] * s[:keep]).reshape(1, 2, 2, keep)
    right = vh[:keep].reshape(keep, 2, 2, 1)
    return left, right


def _two_site_mpo(op4: np.ndarray, site: int, n_sites: int) -> MPO:
    left, right = _split_two_site(np.asarray(op4, dtype=np.complex128))
    tensors = []
    for k in range(n_sites):
        if k == site:
            tensors.append(left)
        elif k == site + 1:
            tensors.append(right)
        else:
            tensors.append(IDENTITY_2.reshape(1, 2, 2, 1))
    return MPO(tuple(tensors))


def _gate_layer(gates: dict[int, np.ndarray], n_sites: int) -> MPO:
    """Product of two-site gates on disjoint bonds ``{left_site: 4x4 gate}``."""
    tensors: list[np.ndarray] = []
    k = 0
    while k < n_sites:
        if k in gates:
            left, right = _split_two_site(gates[k])
            tensors.extend([left, right])
            k += 2
        else:
            tensors.append(IDENTITY_2.reshape(1, 2, 2, 1))
            k += 1
    return MPO(tuple(tensors))


def trotter_step_mpo(h: ChainHamiltonian, tau: float) -> MPO:
    """Second-order symmetric split of exp(-tau H).

    Fields F, even bonds E and odd bonds O are ordered as
    F/2 E/2 O E/2 F/2.
    """
    n = h.n_sites
    half_fields = product_mpo([matrix_exp_scaled(DenseOperator.hermitian_from(f), -tau / 2).matrix for f in h.fields])
    layers = [half_fields]
    even = {k: matrix_exp_scaled(DenseOperator.hermitian_from(b), -tau / 2).matrix for k, b in enumerate(h.bonds) if k % 2 == 0}
    odd = {k: matrix_exp_scaled(DenseOperator.hermitian_from(b), -tau).matrix for k, b in enumerate(h.bonds) if k % 2 == 1}
    if even:
        layers.append(_gate_layer(even, n))
    if odd:
        layers.append(_gate_layer(odd, n))
    if even:
        layers.append(_gate_layer(even, n))
    layers.append(half_fields)
    out = layers[0]
    for layer in layers[1:]:
        out = mpo_multiply(out, layer)
    return compress(out, TruncationPolicy(sv_cutoff=1e-15))[0]


def _normalize_trace(m: MPO) -> MPO:
    tr = mpo_trace(m)
    if tr == 0:
        raise MPOError("cannot normalize a traceless operator")
    return scale(m, 1.0 / tr.real)


def thermal_mpo(
    h: ChainHamiltonian,
    beta: float,
    dbeta: float = 0.025,
    policy: TruncationPolicy = EXACT,
    checkpoints: Iterable[float] = (),
) -> MPO | tuple[MPO, dict[float, MPO]]:
    """exp(-beta H) / Z by imaginary-time evolution from the identity.

    Each step applies U = exp(-dbeta H / 2) (second-order Trotter) from both
    sides, rho <- U rho U, compresses and renormalizes the trace. The number
    of steps is ceil(beta / dbeta) with the step shrunk to land on beta.

    When ``checkpoints`` is given, also returns the states at those inverse
    temperatures (rounded to the step grid).
    """
    if beta < 0:
        raise MPOError(f"beta must be nonnegative, got {beta}")
    if dbeta <= 0:
        raise MPOError(f"dbeta must be positive, got {dbeta}")
    n = h.n_sites
    rho = scale(identity_mpo(n), 1.0 / 2**n)
    marks = sorted(set(checkpoints))
    saved: dict[float, MPO] = {}
    steps = int(math.ceil(beta / dbeta - 1e-12)) if beta > 0 else 0
    if steps:
        step = beta / steps
        u = trotter_step_mpo(h, step / 2)
        for k in range(1, steps + 1):
            rho = mpo_multiply(u, mpo_multiply(rho, u, policy), policy)
            rho = _normalize_trace(rho)
            for b in marks:
                if abs(k * step - b) <= step / 2 and b not in saved:
                    saved[b] = rho
    if marks:
        for b in marks:
            saved.setdefault(b, rho)
        return rho, saved
    return rho


# ---------------------------------------------------------------------------
# integrand propagation


def exp_step_apply(
    rho: MPO, omega: MPO, ds: float, policy: TruncationPolicy = EXACT
) -> tuple[MPO, float]:
    """Approximate exp(-rho ds) Omega exp(-rho ds).

    Uses F Omega F with F = I - rho ds + rho^2 ds^2 / 2, applied as
    Omega - ds rho Omega + ds^2/2 rho (rho Omega) on the left and the
    mirror on the right. Every product and sum is compressed with
    ``policy``. Local error is O(ds^3).

    Returns:
        The propagated operator and the summed discarded weight of all
        compressions in the step.
    """
    if ds < 0:
        raise MPOError(f"step must be nonnegative, got {ds}")
    if ds == 0:
        return omega, 0.0
    _check_lengths(rho, omega)
    total = 0.0

    def squeeze(m: MPO) -> MPO:
        nonlocal total
        out, w = compress(m, policy)
        total += w
        return out

    def product(a: MPO, b: MPO) -> MPO:
        exact_bond = max(x * y for x, y in zip(a.bond_dims, b.bond_dims))
        if policy.max_bond is None or exact_bond <= 2 * policy.max_bond:
            return squeeze(_exact_product(a, b))
        return squeeze(_zipup_product(a, b, chi=2 * policy.max_bond, rel_cutoff=0.1 * policy.sv_cutoff))

    r_om = product(rho, omega)
    rr_om = product(rho, r_om)
    left = squeeze(mpo_sum([omega, r_om, rr_om], [1.0, -ds, 0.5 * ds * ds]))
    l_r = product(left, rho)
    l_rr = product(l_r, rho)
    out = squeeze(mpo_sum([left, l_r, l_rr], [1.0, -ds, 0.5 * ds * ds]))
    return out, total


# ---------------------------------------------------------------------------
# serialization


def save_mpo(path: str | Path, m: MPO) -> None:
    """Write ``m`` as magic, uint64 header length, JSON header, tensor blobs.

    Blobs are row-major little-endian complex128 (two float64 per entry).
    """
    header = {
        "N": m.n_sites,
        "bond_dims": m.bond_dims,
        "phys_dim": PHYS_DIM,
        "dtype": "complex128",
        "byte_order": "little",
        "index_order": INDEX_ORDER,
        "canonical_center": m.canonical_center,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FILE_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for t in m.tensors:
            fh.write(np.ascontiguousarray(t, dtype="<c16").tobytes(order="C"))


def load_mpo(path: str | Path) -> MPO:
    data = Path(path).read_bytes()
    if data[:8] != FILE_MAGIC:
        raise MPOError(f"{path}: not an MPO checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if header.get("index_order") != INDEX_ORDER or header.get("dtype") != "complex128":
        raise MPOError(f"{path}: unsupported layout {header.get('index_order')}/{header.get('dtype')}")
    bonds = header["bond_dims"]
    offset = 16 + hlen
    tensors = []
    for k in range(header["N"]):
        shape = (bonds[k], PHYS_DIM, PHYS_DIM, bonds[k + 1])
        count = int(np.prod(shape))
        blob = np.frombuffer(data, dtype="<c16", count=count, offset=offset)
        tensors.append(blob.reshape(shape).astype(np.complex128))
        offset += 16 * count
    if offset != len(data):
        raise MPOError(f"{path}: trailing or missing tensor data")
    return MPO(tuple(tensors), header.get("canonical_center"))
