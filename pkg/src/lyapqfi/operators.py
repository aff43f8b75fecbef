"""Dense Hermitian operator algebra.

Small-N workhorse for density matrices, state derivatives, SLD operators and
integrands. Everything here is a pure function over immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HERMITIAN_RTOL = 1e-12
RECONSTRUCTION_RTOL = 1e-10

PAULI_X = np.array([[0, 1], [1, 0]], dtype=np.complex128)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=np.complex128)
IDENTITY_2 = np.eye(2, dtype=np.complex128)


class OperatorError(ValueError):
    """Raised for malformed operators (shape, Hermiticity, dimension mismatch)."""


class EigensolverError(RuntimeError):
    """Eigendecomposition failed or reconstructed poorly."""

    def __init__(self, message: str, residual: float) -> None:
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def hermiticity_defect(matrix: np.ndarray) -> float:
    """Largest |M_ij - conj(M_ji)| relative to the largest |M_ij|."""
    scale = float(np.max(np.abs(matrix))) if matrix.size else 0.0
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(matrix - matrix.conj().T))) / scale


@dataclass(frozen=True)
class DenseOperator:
    """Square complex matrix with a verified Hermiticity tag.

    The tag is checked on construction; pass ``hermitian=True`` only for
    operators that are Hermitian to ``HERMITIAN_RTOL``.
    """

    matrix: np.ndarray
    hermitian: bool = False

    def __post_init__(self) -> None:
        mat = np.array(self.matrix, dtype=np.complex128, copy=True)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] == 0:
            raise OperatorError(f"operator must be a nonempty square matrix, got shape {mat.shape}")
        if self.hermitian:
            defect = hermiticity_defect(mat)
            if defect > HERMITIAN_RTOL:
                raise OperatorError(f"matrix tagged Hermitian but defect is {defect:.3e}")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def hermitian_from(cls, matrix: np.ndarray) -> DenseOperator:
        """Symmetrize ``matrix`` and tag the result Hermitian."""
        mat = np.asarray(matrix, dtype=np.complex128)
        return cls(0.5 * (mat + mat.conj().T), hermitian=True)

    def __array__(self, dtype=None, copy=None):
        return self.matrix if dtype is None else self.matrix.astype(dtype)


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenpairs of a Hermitian operator, eigenvalues in descending order."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    source_dim: int = field(default=0)

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T

    def rotate_in(self, matrix: np.ndarray) -> np.ndarray:
        """Express ``matrix`` in the eigenbasis, V^dagger M V."""
        v = self.eigenvectors
        return v.conj().T @ np.asarray(matrix) @ v

    def rotate_out(self, matrix: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`rotate_in`."""
        v = self.eigenvectors
        return v @ np.asarray(matrix) @ v.conj().T


def as_operator(value: DenseOperator | np.ndarray, hermitian: bool | None = None) -> DenseOperator:
    """Coerce arrays to :class:`DenseOperator`.

    With ``hermitian=None`` an array is tagged Hermitian when it passes the
    tolerance check; an existing operator is returned untouched.
    """
    if isinstance(value, DenseOperator):
        return value
    mat = np.asarray(value, dtype=np.complex128)
    if hermitian is None:
        hermitian = mat.ndim == 2 and mat.shape[0] == mat.shape[1] and hermiticity_defect(mat) <= HERMITIAN_RTOL
    return DenseOperator(mat, hermitian=hermitian)


def _require_hermitian(op: DenseOperator, name: str) -> None:
    if not op.hermitian:
        raise OperatorError(f"{name} must be tagged Hermitian")


def spectral_decompose(h: DenseOperator | np.ndarray) -> SpectralDecomposition:
    """Eigendecomposition of a Hermitian operator.

    Raises:
        OperatorError: input is not tagged Hermitian.
        EigensolverError: LAPACK failure or reconstruction error above 1e-10 relative.
    """
    op = as_operator(h)
    _require_hermitian(op, "input")
    mat = 0.5 * (op.matrix + op.matrix.conj().T)
    try:
        vals, vecs = np.linalg.eigh(mat)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(f"eigensolver did not converge: {exc}", float("nan")) from exc
    vals = vals[::-1].copy()
    vecs = vecs[:, ::-1].copy()
    decomp = SpectralDecomposition(vals, vecs, op.dim)
    norm = np.linalg.norm(mat)
    residual = float(np.linalg.norm(decomp.reconstruct() - mat))
    if residual > RECONSTRUCTION_RTOL * max(norm, np.finfo(float).tiny):
        raise EigensolverError("eigendecomposition reconstruction failed", residual)
    return decomp


def matrix_exp_scaled(
    h: DenseOperator | np.ndarray | SpectralDecomposition, c: float
) -> DenseOperator:
    """exp(c H) for Hermitian H, through its spectral decomposition."""
    decomp = h if isinstance(h, SpectralDecomposition) else spectral_decompose(h)
    vals = c * decomp.eigenvalues
    v = decomp.eigenvectors
    out = (v * np.exp(vals)) @ v.conj().T
    return DenseOperator.hermitian_from(out)


def commutator_derivative(a: DenseOperator | np.ndarray, rho: DenseOperator | np.ndarray) -> DenseOperator:
    """State derivative under unitary encoding, -i[A, rho]."""
    a_op, r_op = as_operator(a), as_operator(rho)
    if a_op.dim != r_op.dim:
        raise OperatorError(f"dimension mismatch: {a_op.dim} vs {r_op.dim}")
    _require_hermitian(a_op, "A")
    _require_hermitian(r_op, "rho")
    a_m, r_m = a_op.matrix, r_op.matrix
    return DenseOperator.hermitian_from(-1j * (a_m @ r_m - r_m @ a_m))


def mix_with_identity(rho: DenseOperator | np.ndarray, nu: float) -> DenseOperator:
    """(1 - nu) rho + nu I/d, the full-rank regularization of a singular state."""
    if not 0.0 <= nu <= 1.0:
        raise OperatorError(f"mixing weight must lie in [0, 1], got {nu}")
    op = as_operator(rho)
    d = op.dim
    return DenseOperator.hermitian_from((1.0 - nu) * op.matrix + (nu / d) * np.eye(d))


def hs_norm_sq(o: DenseOperator | np.ndarray) -> float:
    """Squared Hilbert-Schmidt norm tr[O O^dagger]."""
    mat = o.matrix if isinstance(o, DenseOperator) else np.asarray(o)
    return float(np.vdot(mat, mat).real)


def hs_inner(a: DenseOperator | np.ndarray, b: DenseOperator | np.ndarray) -> complex:
    """tr[A^dagger B]."""
    a_m = a.matrix if isinstance(a, DenseOperator) else np.asarray(a)
    b_m = b.matrix if isinstance(b, DenseOperator) else np.asarray(b)
    return complex(np.vdot(a_m, b_m))


def embed_site(op: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    """Kronecker-embed a single-qubit operator; site 0 is the leftmost factor."""
    out = np.ones((1, 1), dtype=np.complex128)
    for k in range(n_sites):
        out = np.kron(out, op if k == site else IDENTITY_2)
    return out
