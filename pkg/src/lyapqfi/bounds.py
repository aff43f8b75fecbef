"""Analytic bounds on the relative QFI truncation error eps(X).

All functions are pure; array-valued ``x`` is evaluated elementwise.
Constants that need the spectrum of rho are extracted from dense operators
by :func:`low_temp_constants` and :func:`build_bound_report`; MPO-only runs
pass their own constants.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .oracle import qfi_error_exact
from .probes import DEGENERACY_TOL, degenerate_levels

LOG2 = math.log(2.0)
# p must stay well below n/(m+n); the slack factor is a convention
LOW_TEMP_REGIME_FACTOR = 0.1


class BoundDomainError(ValueError):
    """A bound was evaluated outside its stated validity domain."""


def _xs(x: float | np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _out(val: np.ndarray, x: float | np.ndarray) -> float | np.ndarray:
    return float(val) if np.ndim(x) == 0 else val


def relative_error(f_num: float, f_ref: float) -> float:
    """(F_ref - F_num) / F_ref."""
    if not f_ref > 0:
        raise BoundDomainError(f"reference QFI must be positive, got {f_ref}")
    return (f_ref - f_num) / f_ref


def worst_case_bound(
    offdiag_a_sq: float, f_inf: float, lambda_min: float, x: float | np.ndarray
) -> float | np.ndarray:
    """2 offdiag_a_sq / F(inf) * min(1 / (e X), exp(-lambda_min X)).

    ``lambda_min`` is the smallest nonzero pair sum lambda_i + lambda_j,
    ``offdiag_a_sq`` is sum_{i != j} |A_ij|^2 (tr A^2 is a looser choice).
    """
    xs = _xs(x)
    if np.any(xs <= 0):
        raise BoundDomainError("cutoff X must be positive")
    if not f_inf > 0:
        raise BoundDomainError(f"F(inf) must be positive, got {f_inf}")
    if not 0 < lambda_min <= 1:
        raise BoundDomainError(f"lambda_min must lie in (0, 1], got {lambda_min}")
    val = 2.0 * offdiag_a_sq / f_inf * np.minimum(1.0 / (math.e * xs), np.exp(-lambda_min * xs))
    return _out(val, x)


def low_temp_bound(s: float, m: int, n: int, c: float, x: float | np.ndarray) -> float | np.ndarray:
    """exp(-X/m) + (c/2)(m/n)(S m / (2 log 2) - m + 1)."""
    if s < 0:
        raise BoundDomainError(f"entropy must be nonnegative, got {s}")
    if m < 1 or n < 1:
        raise BoundDomainError("degeneracies m, n must be at least 1")
    xs = _xs(x)
    const = 0.5 * c * (m / n) * (s * m / (2.0 * LOG2) - m + 1)
    return _out(np.exp(-xs / m) + const, x)


def low_temp_error_full(
    c1: float, c2: float, c3: float, p: float, m: int, n: int, x: float | np.ndarray
) -> float | np.ndarray:
    """Three-term low-temperature error numerator.

    With ground-state eigenvalue x = (1 - p)/m and excited eigenvalue
    y = p/n (the rest of the spectrum set to zero), returns
    c1 x e^{-x X} + c2 y e^{-y X} + c3 (x - y)^2 / (x + y) e^{-(x + y) X}.
    Dividing by F(inf)/2 gives the relative error of that model spectrum.
    """
    if not 0 <= p <= 1:
        raise BoundDomainError(f"excited population must lie in [0, 1], got {p}")
    xs = _xs(x)
    lx = (1.0 - p) / m
    ly = p / n
    val = c1 * lx * np.exp(-lx * xs) + c2 * ly * np.exp(-ly * xs)
    if lx + ly > 0:
        val = val + c3 * (lx - ly) ** 2 / (lx + ly) * np.exp(-(lx + ly) * xs)
    return _out(val, x)


def low_temp_regime(p: float, m: int, n: int) -> bool:
    """True when p <= 0.1 n/(m + n), the regime the low-temperature bound assumes."""
    return p <= LOW_TEMP_REGIME_FACTOR * n / (m + n)


@dataclass(frozen=True)
class LowTempConstants:
    c: float
    c1: float
    c2: float
    c3: float
    m: int
    n: int
    p: float
    entropy: float
    in_regime: bool


def _level_slices(eigenvalues: np.ndarray, tol: float) -> list[slice]:
    """Consecutive blocks of equal eigenvalues (descending order)."""
    levels = degenerate_levels(-np.asarray(eigenvalues), tol)
    out, start = [], 0
    for _, mult in levels:
        out.append(slice(start, start + mult))
        start += mult
    return out


def low_temp_constants(
    rho_spectrum: np.ndarray,
    a_eig: np.ndarray,
    tol: float | None = None,
    p: float | None = None,
) -> LowTempConstants:
    """c1, c2, c3 and c = c2 / (c1 + c3) from A in rho's eigenbasis.

    Ground (GS) and first excited (ES) blocks are grouped with ``tol``
    relative to the largest eigenvalue (defaults to the degeneracy
    tolerance). c1 = 2 sum_{GS x rest} |A|^2, c2 = 2 sum_{ES x rest} |A|^2,
    c3 = 2 sum_{GS x ES} |A|^2, where ``rest`` excludes GS and ES. The
    excited population defaults to p = 1 - m lambda_GS.
    """
    lam = np.asarray(rho_spectrum, dtype=float)
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    a2 = np.abs(np.asarray(a_eig)[np.ix_(order, order)]) ** 2
    tol = DEGENERACY_TOL * max(lam[0], 1e-300) if tol is None else tol
    blocks = _level_slices(lam, tol)
    gs = blocks[0]
    es = blocks[1] if len(blocks) > 1 else slice(gs.stop, gs.stop)
    rest = slice(es.stop, lam.size)
    c1 = 2.0 * float(a2[gs, rest].sum())
    c2 = 2.0 * float(a2[es, rest].sum())
    c3 = 2.0 * float(a2[gs, es].sum())
    m = gs.stop - gs.start
    n = max(es.stop - es.start, 1)
    p_val = float(min(max(1.0 - m * lam[0], 0.0), 1.0)) if p is None else p
    c = c2 / (c1 + c3) if c1 + c3 > 0 else math.inf
    return LowTempConstants(c, c1, c2, c3, m, n, p_val, von_neumann_entropy(lam), low_temp_regime(p_val, m, n))


def spectrum_tail_bound(
    p_tilde: float,
    n_tilde: int,
    c_tilde: float,
    f_inf: float,
    x: float | np.ndarray,
    lambda_min: float,
) -> float | np.ndarray:
    """(4 c~ / F(inf)) p~ (n~ - 1) exp(-2 p~ X / n~), for X <= 1/(2 Lambda_min).

    ``lambda_min`` is the smallest known eigenvalue.

    Raises:
        BoundDomainError: any X beyond 1/(2 Lambda_min), or invalid p~, n~.
    """
    xs = _xs(x)
    if not 0 <= p_tilde <= 1:
        raise BoundDomainError(f"unknown population must lie in [0, 1], got {p_tilde}")
    if n_tilde < 1:
        raise BoundDomainError(f"unknown dimension must be at least 1, got {n_tilde}")
    if not f_inf > 0:
        raise BoundDomainError(f"F(inf) must be positive, got {f_inf}")
    if lambda_min > 0 and np.any(xs > 1.0 / (2.0 * lambda_min)):
        raise BoundDomainError(
            f"spectrum-tail bound requires X <= 1/(2 Lambda_min) = {1.0 / (2.0 * lambda_min):.6g}"
        )
    val = 4.0 * c_tilde / f_inf * p_tilde * (n_tilde - 1) * np.exp(-2.0 * p_tilde * xs / n_tilde)
    return _out(val, x)


@dataclass(frozen=True)
class ErrorSplit:
    """Absolute truncation error F(inf) - F(X) split by known/unknown pairs."""

    known: float
    mixed_bound: float
    tail_bound: float

    @property
    def total(self) -> float:
        return self.known + self.mixed_bound + self.tail_bound


def three_term_error_split(
    rho_spectrum: np.ndarray, a_eig: np.ndarray, n_known: int, x: float
) -> ErrorSplit:
    """Exact known-known error plus bounds on the mixed and unknown-unknown parts.

    ``rho_spectrum`` is sorted descending and the first ``n_known`` entries
    form the known set. Only the known eigenvalues enter the bounds; the
    full spectrum is used solely for the unknown population p~ = 1 - sum(known).
    ``mixed_bound`` already counts both orderings of the mixed pairs.
    """
    lam = np.asarray(rho_spectrum, dtype=float)
    if np.any(np.diff(lam) > 1e-15):
        raise ValueError("spectrum must be sorted in descending order")
    d = lam.size
    if not 1 <= n_known <= d:
        raise ValueError(f"known set size must lie in [1, {d}], got {n_known}")
    a = np.asarray(a_eig)
    known = lam[:n_known]
    kk = float(qfi_error_exact(known, a[:n_known, :n_known], x))
    if n_known == d:
        return ErrorSplit(kk, 0.0, 0.0)
    lam_min = float(known[-1])
    a2 = np.abs(a) ** 2
    mixed = 2.0 * float(np.sum(a2[:n_known, n_known:].sum(axis=1) * (known + lam_min) * np.exp(-known * x)))
    p_tilde = float(min(max(1.0 - known.sum(), 0.0), 1.0))
    n_tilde = d - n_known
    c_tilde = float(a2[n_known:, n_known:].max())
    # the absolute form is F(inf) times the relative bound
    tail = float(spectrum_tail_bound(p_tilde, n_tilde, c_tilde, 1.0, x, lam_min))
    return ErrorSplit(kk, 2.0 * mixed, tail)


def von_neumann_entropy(spectrum: np.ndarray) -> float:
    """-sum lambda log lambda with natural log and 0 log 0 = 0."""
    lam = np.clip(np.asarray(spectrum, dtype=float), 0.0, None)
    nz = lam[lam > 0]
    return float(-np.sum(nz * np.log(nz)))


@dataclass(frozen=True)
class EntropyCheck:
    purity_defect: float
    entropy_bound: float
    holds: bool


def entropy_population_relation(spectrum: np.ndarray, rtol: float = 1e-12) -> EntropyCheck:
    """Check sum lambda (1 - lambda) <= S / (2 log 2)."""
    lam = np.clip(np.asarray(spectrum, dtype=float), 0.0, None)
    lhs = float(np.sum(lam * (1.0 - lam)))
    rhs = von_neumann_entropy(lam) / (2.0 * LOG2)
    return EntropyCheck(lhs, rhs, lhs <= rhs * (1.0 + rtol) + 1e-15)


@dataclass
class BoundReport:
    x_grid: np.ndarray
    eps_worst: np.ndarray
    eps_low_t: np.ndarray
    eps_low_t_full: np.ndarray
    eps_tail: np.ndarray | None = None
    eps_exact: np.ndarray | None = None
    constants: dict[str, Any] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        def arr(v: np.ndarray | None) -> list[float | None] | None:
            if v is None:
                return None
            return [None if not np.isfinite(e) else float(e) for e in v]

        return {
            "X_grid": arr(self.x_grid),
            "eps_exact": arr(self.eps_exact),
            "eps_worst": arr(self.eps_worst),
            "eps_lowT": arr(self.eps_low_t),
            "eps_lowT_full": arr(self.eps_low_t_full),
            "eps_tail": arr(self.eps_tail),
            "constants": self.constants,
            "flags": list(self.flags),
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def build_bound_report(
    rho_spectrum: np.ndarray,
    a_eig: np.ndarray,
    x_grid: np.ndarray,
    n_known: int | None = None,
    rank_tol: float | None = None,
) -> BoundReport:
    """Evaluate every bound family on ``x_grid`` from a dense eigenbasis.

    ``a_eig`` is the encoding generator in rho's eigenbasis, with the same
    (descending) ordering as ``rho_spectrum``. The spectrum-tail curve uses
    the top ``n_known`` eigenpairs and is NaN beyond its validity range.
    """
    lam = np.asarray(rho_spectrum, dtype=float)
    a = np.asarray(a_eig)
    xs = np.asarray(x_grid, dtype=float)
    rank_tol = 1e-12 * lam.max() if rank_tol is None else rank_tol
    sums = lam[:, None] + lam[None, :]
    off = ~np.eye(lam.size, dtype=bool)
    kept = off & (sums > rank_tol)
    a2 = np.abs(a) ** 2
    diff2 = (lam[:, None] - lam[None, :]) ** 2
    f_inf = float(2.0 * np.sum(np.where(kept, a2 * diff2 / np.where(kept, sums, 1.0), 0.0)))
    flags: list[str] = []
    if not f_inf > 0:
        raise BoundDomainError("QFI vanishes; relative errors are undefined")
    offdiag = float(a2[off].sum())
    lam_min = float(sums[kept].min())
    eps_exact = np.asarray(qfi_error_exact(lam, a, xs, rank_tol)) / f_inf
    eps_worst = np.asarray(worst_case_bound(offdiag, f_inf, min(lam_min, 1.0), xs))
    lt = low_temp_constants(lam, a)
    if not lt.in_regime:
        flags.append(
            f"low-temperature regime violated: p={lt.p:.3g} > {LOW_TEMP_REGIME_FACTOR} n/(m+n)="
            f"{LOW_TEMP_REGIME_FACTOR * lt.n / (lt.m + lt.n):.3g}; low-temperature curves unreliable"
        )
    eps_lt = np.asarray(low_temp_bound(lt.entropy, lt.m, lt.n, lt.c, xs)) if np.isfinite(lt.c) else np.full_like(xs, np.nan)
    eps_lt_full = np.asarray(low_temp_error_full(lt.c1, lt.c2, lt.c3, lt.p, lt.m, lt.n, xs)) * 2.0 / f_inf
    constants: dict[str, Any] = {k: v for k, v in asdict(lt).items()}
    constants["S"] = constants.pop("entropy")
    constants.update(F_inf=f_inf, offdiag_A_sq=offdiag, lambda_min=lam_min)
    eps_tail = None
    if n_known is not None and n_known < lam.size:
        known = lam[:n_known]
        p_t = float(min(max(1.0 - known.sum(), 0.0), 1.0))
        n_t = lam.size - n_known
        c_t = float(a2[n_known:, n_known:].max())
        x_valid = 1.0 / (2.0 * known[-1])
        eps_tail = np.full_like(xs, np.nan)
        ok = xs <= x_valid
        if ok.any():
            eps_tail[ok] = spectrum_tail_bound(p_t, n_t, c_t, f_inf, xs[ok], float(known[-1]))
        if not ok.all():
            flags.append(f"spectrum-tail bound undefined beyond X = {x_valid:.6g}")
        constants.update(c_tilde=c_t, p_tilde=p_t, n_tilde=n_t)
    return BoundReport(xs, eps_worst, eps_lt, eps_lt_full, eps_tail, eps_exact, constants, flags)
