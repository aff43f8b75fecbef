"""Exact spectral QFI and SLD, used as ground truth at small N.

All formulas work in the eigenbasis of rho. Pairs with
lambda_i + lambda_j <= rank_tol are treated as null pairs: their SLD
entries are set to zero (pseudoinverse convention) and they contribute
nothing to the QFI.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import (
    DenseOperator,
    SpectralDecomposition,
    as_operator,
    hs_norm_sq,
    spectral_decompose,
)


class IllDefinedSLDError(ValueError):
    """The state derivative has weight on a pair of null eigenvalues.

    The SLD equation has no solution there; regularize the state first,
    e.g. with :func:`lyapqfi.operators.mix_with_identity`.
    """


class KrylovError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int) -> None:
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SpectralQfiInput:
    decomposition: SpectralDecomposition
    drho_eig: np.ndarray
    rank_tol: float

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.decomposition.eigenvalues

    def pair_sums(self) -> np.ndarray:
        lam = self.eigenvalues
        return lam[:, None] + lam[None, :]

    def kept(self) -> np.ndarray:
        return self.pair_sums() > self.rank_tol


def spectral_input(
    rho: DenseOperator | np.ndarray,
    drho: DenseOperator | np.ndarray,
    rank_tol: float | None = None,
) -> SpectralQfiInput:
    """Rotate ``drho`` into the eigenbasis of ``rho``.

    ``rank_tol`` defaults to 1e-12 times the largest eigenvalue.
    """
    decomp = spectral_decompose(as_operator(rho))
    lam_max = float(np.max(np.abs(decomp.eigenvalues)))
    tol = 1e-12 * lam_max if rank_tol is None else rank_tol
    d_eig = decomp.rotate_in(as_operator(drho).matrix)
    return SpectralQfiInput(decomp, d_eig, tol)


def _checked_weights(inp: SpectralQfiInput) -> tuple[np.ndarray, np.ndarray]:
    sums = inp.pair_sums()
    kept = sums > inp.rank_tol
    d = inp.drho_eig
    if not kept.all():
        scale = max(1.0, float(np.max(np.abs(d))))
        leak = float(np.max(np.abs(d[~kept])))
        # |drho_ij| <= ||A|| (lambda_i + lambda_j) for unitary encodings
        if leak > 1e3 * inp.rank_tol * scale:
            raise IllDefinedSLDError(
                f"state derivative has weight {leak:.3e} on null eigenvalue pairs; the SLD is ill-defined there "
                "(rank of the state changes with the parameter)"
            )
    safe = np.where(kept, sums, 1.0)
    return kept, safe


def qfi_exact(inp: SpectralQfiInput) -> float:
    """F = 2 sum |drho_ij|^2 / (lambda_i + lambda_j) over kept pairs."""
    kept, safe = _checked_weights(inp)
    terms = np.where(kept, np.abs(inp.drho_eig) ** 2 / safe, 0.0)
    return float(2.0 * terms.sum())


def qfi_truncated_exact(inp: SpectralQfiInput, x: float | np.ndarray) -> float | np.ndarray:
    """Closed-form truncated integral F(X)."""
    kept, safe = _checked_weights(inp)
    amp = np.where(kept, np.abs(inp.drho_eig) ** 2 / safe, 0.0)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.array([2.0 * np.sum(amp * -np.expm1(-safe * xv)) for xv in xs])
    return float(out[0]) if np.ndim(x) == 0 else out


def sld_exact(inp: SpectralQfiInput) -> DenseOperator:
    """L_ij = 2 drho_ij / (lambda_i + lambda_j) in the eigenbasis, zero on null pairs."""
    kept, safe = _checked_weights(inp)
    l_eig = np.where(kept, 2.0 * inp.drho_eig / safe, 0.0)
    return DenseOperator.hermitian_from(inp.decomposition.rotate_out(l_eig))


def qfi_error_exact(
    rho_spectrum: np.ndarray, a_eig: np.ndarray, x: float | np.ndarray, rank_tol: float = 0.0
) -> float | np.ndarray:
    """F(inf) - F(X) for unitary encodings, from |A_ij|^2 (lambda_i - lambda_j)^2."""
    lam = np.asarray(rho_spectrum, dtype=float)
    sums = lam[:, None] + lam[None, :]
    kept = sums > rank_tol
    safe = np.where(kept, sums, 1.0)
    amp = np.where(kept, np.abs(a_eig) ** 2 * (lam[:, None] - lam[None, :]) ** 2 / safe, 0.0)
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.array([2.0 * np.sum(amp * np.exp(-safe * xv)) for xv in xs])
    return float(out[0]) if np.ndim(x) == 0 else out


def variational_merit(
    rho: DenseOperator | np.ndarray, drho: DenseOperator | np.ndarray, sld: DenseOperator | np.ndarray
) -> float:
    """2 tr[drho L] - tr[rho L^2]; maximal, and equal to the QFI, at the SLD."""
    r = as_operator(rho).matrix
    d = as_operator(drho).matrix
    l = as_operator(sld).matrix
    return float((2.0 * np.trace(d @ l) - np.trace(r @ l @ l)).real)


@dataclass(frozen=True)
class KrylovSolution:
    sld: DenseOperator
    residual: float
    iterations: int
    merit_history: list[float] = field(default_factory=list)
    residual_history: list[float] = field(default_factory=list)


RESIDUAL_REFRESH = 50


def _re_inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b).real)


def solve_sld_krylov(
    rho: DenseOperator | np.ndarray,
    drho: DenseOperator | np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 50000,
    stall_window: int | None = None,
) -> KrylovSolution:
    """Conjugate residuals for (rho L + L rho)/2 = drho on Hermitian matrices.

    The map is applied matrix-free and is symmetric positive semidefinite in
    the Hilbert-Schmidt inner product. Each iterate minimizes the residual
    norm over the Krylov space, so ``residual_history`` is nonincreasing;
    plain CG stalls on thermal states whose spectrum spans many decades.
    Starting from L = 0 keeps every iterate in the range of the map, so the
    limit is the pseudoinverse solution. ``merit_history`` records
    2 tr[drho L_k] - tr[rho L_k^2].

    Raises:
        KrylovError: ``max_iter`` exhausted, or the best residual fails to
            improve by 1% over ``stall_window`` iterations (typical of an
            inconsistent ``drho``). The window defaults to the real
            dimension of the Hermitian space, d^2, but at least 1000.
    """
    r_m = as_operator(rho).matrix
    b = as_operator(drho).matrix

    def apply(x: np.ndarray) -> np.ndarray:
        y = r_m @ x
        return 0.5 * (y + y.conj().T)

    def merit(x: np.ndarray, res: np.ndarray) -> float:
        # 2<b,x> - <x,Ax> with Ax = b - res
        return _re_inner(b, x) + _re_inner(x, res)

    window = max(1000, b.shape[0] ** 2) if stall_window is None else stall_window
    x = np.zeros_like(b)
    res = b.copy()
    res_hist = [float(np.sqrt(_re_inner(res, res)))]
    merit_hist = [0.0]
    if res_hist[0] <= tol:
        return KrylovSolution(DenseOperator.hermitian_from(x), res_hist[0], 0, merit_hist, res_hist)
    p = res.copy()
    a_res = apply(res)
    a_p = a_res.copy()
    rar = _re_inner(res, a_res)
    best = res_hist[0]
    stall = 0
    for it in range(1, max_iter + 1):
        denom = _re_inner(a_p, a_p)
        if rar <= 0.0 or denom <= 0.0:
            raise KrylovError("residual left the range of the map; drho is inconsistent", res_hist[-1], it - 1)
        alpha = rar / denom
        x = x + alpha * p
        if it % RESIDUAL_REFRESH == 0:
            # recomputing the residual stops roundoff drift on ill-conditioned states
            res = b - apply(x)
        else:
            res = res - alpha * a_p
        res_hist.append(float(np.sqrt(_re_inner(res, res))))
        merit_hist.append(merit(x, res))
        if res_hist[-1] <= tol:
            sol = DenseOperator.hermitian_from(x)
            true_res = float(np.linalg.norm(apply(sol.matrix) - b))
            return KrylovSolution(sol, true_res, it, merit_hist, res_hist)
        if res_hist[-1] < 0.99 * best:
            best = res_hist[-1]
            stall = 0
        else:
            stall += 1
            if stall >= window:
                raise KrylovError("residual stagnation", res_hist[-1], it)
        a_res = apply(res)
        rar_new = _re_inner(res, a_res)
        beta = rar_new / rar
        rar = rar_new
        p = res + beta * p
        a_p = a_res + beta * a_p
    raise KrylovError("max_iter exhausted", res_hist[-1], max_iter)


def sld_residual(
    rho: DenseOperator | np.ndarray, drho: DenseOperator | np.ndarray, sld: DenseOperator | np.ndarray
) -> float:
    """||drho - (rho L + L rho)/2||_F."""
    r = as_operator(rho).matrix
    l = as_operator(sld).matrix
    d = as_operator(drho).matrix
    return float(np.sqrt(hs_norm_sq(d - 0.5 * (r @ l + l @ r))))
