"""Truncated Lyapunov-integral evaluation of the QFI and SLD.

The integrand B(s) = exp(-rho s) drho exp(-rho s) is propagated step by
step; the QFI integrand dF(s) = tr[drho B(s)] = ||B(s/2)||^2 is summed with
the lower (right-endpoint) rule by default, which never overestimates the
truncated integral of a decaying positive integrand.

The same loop drives three modes:

* ``qfi``: propagate B at half the argument, dF = ||B||^2.
* ``sld``: propagate B at full argument, accumulate L = 2 sum w_k B(s_k).
* ``variant``: propagate Abar(s) = exp(-rho s) A exp(-rho s), accumulate
  K = sum w_k Abar(s_k) and form L = -2i[K, rho].
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Literal, NamedTuple, Protocol, Sequence, TextIO, Union

import numpy as np

from . import mpo as mpo_mod
from .mpo import MPO, TruncationPolicy
from .operators import DenseOperator, as_operator, commutator_derivative, spectral_decompose

logger = logging.getLogger(__name__)

Quadrature = Literal["lower", "trapezoid"]
Variant = Literal["integrand", "encoding-operator"]

CSV_COLUMNS = ("s", "ds", "dF", "F_cum", "max_bond", "sv_cutoff", "discarded_weight", "wall_ms")
POSITIVITY_TOL = 1e-10
TRACE_TOL = 1e-8


# negative controls for the validation suite; empty in normal operation
KNOWN_FAULTS = frozenset({"quadrature-sign"})
_faults: ContextVar[frozenset[str]] = ContextVar("lyapqfi_faults", default=frozenset())


@contextmanager
def injected_faults(names: Sequence[str]) -> Iterator[None]:
    """Deliberately break the integrator inside the block.

    ``quadrature-sign`` samples the left endpoint instead of the right one,
    flipping the sign of the lower rule's error.
    """
    unknown = set(names) - KNOWN_FAULTS
    if unknown:
        raise ValueError(f"unknown fault(s): {sorted(unknown)}")
    token = _faults.set(frozenset(names))
    try:
        yield
    finally:
        _faults.reset(token)


class IntegrationError(ValueError):
    """Invalid inputs to the integrator (non-positive state, bad config)."""


@dataclass(frozen=True)
class FixedStep:
    ds: float

    def __post_init__(self) -> None:
        if not self.ds > 0:
            raise IntegrationError(f"fixed step must be positive, got {self.ds}")


@dataclass(frozen=True)
class AdaptiveStep:
    """Step-size controller settings; ``tol`` bounds the relative drop of dF per step."""

    tol: float
    ds_init: float = 1e-3
    ds_min: float = 1e-9
    ds_max: float = 1.0

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise IntegrationError(f"adaptive tolerance must be positive, got {self.tol}")
        if not 0 < self.ds_min <= self.ds_init <= self.ds_max:
            raise IntegrationError("need 0 < ds_min <= ds_init <= ds_max")


StepMode = Union[FixedStep, AdaptiveStep]


@dataclass(frozen=True)
class IntegrationConfig:
    x_max: float
    step: StepMode = field(default_factory=lambda: AdaptiveStep(1e-3))
    quadrature: Quadrature = "lower"
    truncation: TruncationPolicy = mpo_mod.EXACT
    dynamic_eps: float | None = None
    tail_window: float = 10.0
    extrapolate_tail: bool = False
    accumulate_sld: bool = False
    variant: Variant = "integrand"
    discard_alarm: float = 1e-6

    def __post_init__(self) -> None:
        if not 0 <= self.x_max < math.inf:
            raise IntegrationError(f"cutoff must be finite and nonnegative, got {self.x_max}")
        if self.quadrature not in ("lower", "trapezoid"):
            raise IntegrationError(f"unknown quadrature rule {self.quadrature!r}")
        if self.variant not in ("integrand", "encoding-operator"):
            raise IntegrationError(f"unknown variant {self.variant!r}")
        if self.tail_window <= 0:
            raise IntegrationError("tail window must be positive")

    def echo(self) -> dict[str, Any]:
        out = asdict(self)
        out["step"] = {"mode": "fixed" if isinstance(self.step, FixedStep) else "adaptive", **asdict(self.step)}
        return out


class TraceRow(NamedTuple):
    s: float
    ds: float
    dF: float
    F_cum: float
    max_bond: int
    sv_cutoff: float
    discarded_weight: float
    wall_ms: float


@dataclass(frozen=True)
class TailFit:
    a: float
    b: float
    delta_f: float
    skipped: bool = False
    reason: str = ""


@dataclass
class IntegrationTrace:
    rows: list[TraceRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    F_X: float = 0.0
    tail: TailFit | None = None
    sld: DenseOperator | MPO | None = None
    encoding_integral: DenseOperator | MPO | None = None
    config: IntegrationConfig | None = None
    rejected_steps: int = 0

    @property
    def F_total(self) -> float:
        return self.F_X + (self.tail.delta_f if self.tail is not None else 0.0)

    @property
    def s(self) -> np.ndarray:
        return np.array([r.s for r in self.rows])

    @property
    def dF(self) -> np.ndarray:
        return np.array([r.dF for r in self.rows])

    @property
    def F_cum(self) -> np.ndarray:
        return np.array([r.F_cum for r in self.rows])

    def warn(self, message: str) -> None:
        self.warnings.append(message)
        logger.warning(message)

    def write_csv(self, target: str | Path | TextIO, timing: bool = True) -> None:
        """Write one row per step with the fixed column set.

        With ``timing=False`` the wall_ms column is written as 0 so that
        repeated runs are byte-identical.
        """
        own = isinstance(target, (str, Path))
        fh = open(target, "w", newline="") if own else target
        try:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow(
                    [
                        repr(float(r.s)),
                        repr(float(r.ds)),
                        repr(float(r.dF)),
                        repr(float(r.F_cum)),
                        str(int(r.max_bond)),
                        repr(float(r.sv_cutoff)),
                        repr(float(r.discarded_weight)),
                        f"{r.wall_ms:.3f}" if timing else "0",
                    ]
                )
        finally:
            if own:
                fh.close()

    def csv_text(self, timing: bool = True) -> str:
        buf = io.StringIO()
        self.write_csv(buf, timing=timing)
        return buf.getvalue()

    def summary(self) -> dict[str, Any]:
        tail = self.tail
        return {
            "F_X": self.F_X,
            "tail_a": None if tail is None or tail.skipped else tail.a,
            "tail_b": None if tail is None or tail.skipped else tail.b,
            "F_tail": 0.0 if tail is None else tail.delta_f,
            "F_total": self.F_total,
            "config": self.config.echo() if self.config is not None else None,
            "steps": max(len(self.rows) - 1, 0),
            "rejected_steps": self.rejected_steps,
            "warnings": list(self.warnings),
        }

    def write_summary(self, path: str | Path, extra: dict[str, Any] | None = None) -> None:
        payload = self.summary()
        if extra:
            payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# backends


class Backend(Protocol):
    def lift(self, op: Any) -> Any: ...
    def lower(self, op: Any) -> Any: ...
    def step(self, omega: Any, h: float, cutoff: float) -> tuple[Any, float]: ...
    def norm_sq(self, omega: Any) -> float: ...
    def inner(self, a: Any, b: Any) -> float: ...
    def combine(self, terms: Sequence[Any], coeffs: Sequence[complex]) -> Any: ...
    def commutator_rho(self, k: Any) -> Any: ...
    def size(self, omega: Any) -> int: ...


class DenseBackend:
    """Exact propagation through the spectral decomposition of rho.

    ``basis="eigen"`` keeps operators in the eigenbasis, where
    exp(-rho h) is diagonal and a step is an elementwise rescaling;
    ``basis="computational"`` multiplies by exp(-rho h) matrices.
    """

    def __init__(self, rho: DenseOperator | np.ndarray, basis: Literal["eigen", "computational"] = "eigen") -> None:
        self.rho = as_operator(rho)
        self.decomp = spectral_decompose(self.rho)
        lam = self.decomp.eigenvalues
        if lam[-1] < -POSITIVITY_TOL * max(abs(lam[0]), 1.0):
            raise IntegrationError(f"state is not positive semidefinite (smallest eigenvalue {lam[-1]:.3e})")
        if abs(lam.sum() - 1.0) > TRACE_TOL:
            raise IntegrationError(f"state must have unit trace, got {lam.sum():.12g}")
        self.basis = basis
        self.lam = lam
        self._rates = lam[:, None] + lam[None, :]
        self._exp_cache: dict[float, np.ndarray] = {}

    def lift(self, op: DenseOperator | np.ndarray) -> np.ndarray:
        mat = as_operator(op).matrix
        return self.decomp.rotate_in(mat) if self.basis == "eigen" else np.array(mat)

    def lower(self, op: np.ndarray) -> DenseOperator:
        mat = self.decomp.rotate_out(op) if self.basis == "eigen" else op
        return DenseOperator.hermitian_from(mat)

    def _propagator(self, h: float) -> np.ndarray:
        if h not in self._exp_cache:
            if len(self._exp_cache) > 64:
                self._exp_cache.clear()
            v = self.decomp.eigenvectors
            self._exp_cache[h] = (v * np.exp(-h * self.lam)) @ v.conj().T
        return self._exp_cache[h]

    def step(self, omega: np.ndarray, h: float, cutoff: float = 0.0) -> tuple[np.ndarray, float]:
        if self.basis == "eigen":
            factor = self._exp_cache.get(h)
            if factor is None:
                if len(self._exp_cache) > 256:
                    self._exp_cache.clear()
                factor = self._exp_cache[h] = np.exp(-h * self._rates)
            return omega * factor, 0.0
        e = self._propagator(h)
        return e @ omega @ e, 0.0

    def norm_sq(self, omega: np.ndarray) -> float:
        return float(np.vdot(omega, omega).real)

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.vdot(a, b).real)

    def combine(self, terms: Sequence[np.ndarray], coeffs: Sequence[complex]) -> np.ndarray:
        out = np.zeros_like(terms[0])
        for c, t in zip(coeffs, terms):
            out = out + c * t
        return out

    def commutator_rho(self, k: np.ndarray) -> np.ndarray:
        if self.basis == "eigen":
            return -1j * k * (self.lam[None, :] - self.lam[:, None])
        r = self.rho.matrix
        return -1j * (k @ r - r @ k)

    def size(self, omega: np.ndarray) -> int:
        return int(omega.shape[0])


class MPOBackend:
    """Series propagation with compression after every product.

    ``policy`` governs the propagated integrand; ``acc_policy`` the
    accumulated SLD / encoding integral (defaults to ``policy``).
    """

    def __init__(
        self,
        rho: MPO,
        policy: TruncationPolicy = mpo_mod.EXACT,
        acc_policy: TruncationPolicy | None = None,
    ) -> None:
        tr = mpo_mod.mpo_trace(rho)
        if abs(tr - 1.0) > TRACE_TOL:
            raise IntegrationError(f"state must have unit trace, got {tr}")
        self.rho = rho
        self.policy = policy
        self.acc_policy = acc_policy if acc_policy is not None else policy

    def lift(self, op: MPO) -> MPO:
        return op

    def lower(self, op: MPO) -> MPO:
        return op

    def step(self, omega: MPO, h: float, cutoff: float | None = None) -> tuple[MPO, float]:
        policy = self.policy if cutoff is None else self.policy.with_cutoff(cutoff)
        return mpo_mod.exp_step_apply(self.rho, omega, h, policy)

    def norm_sq(self, omega: MPO) -> float:
        return mpo_mod.frobenius_norm(omega) ** 2

    def inner(self, a: MPO, b: MPO) -> float:
        return mpo_mod.hs_inner(a, b).real

    def combine(self, terms: Sequence[MPO], coeffs: Sequence[complex]) -> MPO:
        return mpo_mod.mpo_sum(list(terms), list(coeffs), self.acc_policy)

    def commutator_rho(self, k: MPO) -> MPO:
        kr = mpo_mod.mpo_multiply(k, self.rho, self.acc_policy)
        rk = mpo_mod.mpo_multiply(self.rho, k, self.acc_policy)
        return mpo_mod.mpo_sum([kr, rk], [-1j, 1j], self.acc_policy)

    def size(self, omega: MPO) -> int:
        return omega.max_bond


def make_backend(rho: DenseOperator | MPO | np.ndarray, config: IntegrationConfig, backend: Any = None) -> Any:
    if backend is not None and not isinstance(backend, str):
        return backend
    if backend == "mpo" or (backend is None and isinstance(rho, MPO)):
        if not isinstance(rho, MPO):
            raise IntegrationError("MPO backend needs an MPO state")
        return MPOBackend(rho, config.truncation)
    if isinstance(rho, MPO):
        rho = mpo_mod.to_dense(rho)
    return DenseBackend(rho)


def qfi_integrand_value(b_half: DenseOperator | MPO | np.ndarray) -> float:
    """dF(s) = ||B(s/2)||_2^2 for the integrand evaluated at half the argument."""
    if isinstance(b_half, MPO):
        return mpo_mod.frobenius_norm(b_half) ** 2
    mat = b_half.matrix if isinstance(b_half, DenseOperator) else np.asarray(b_half)
    return float(np.vdot(mat, mat).real)


# ---------------------------------------------------------------------------
# step control


@dataclass(frozen=True)
class ControllerDecision:
    accept: bool
    next_ds: float
    ratio: float


def adaptive_controller(
    df_prev: float, df_new: float, tol: float, ds: float, ds_max: float = math.inf
) -> ControllerDecision:
    """Accept iff (dF_prev - dF_new) / dF_new <= tol.

    Rejection halves the step; acceptance with ratio <= tol/4 doubles it
    (capped at ``ds_max``). A vanishing dF_new after a nonzero dF_prev is an
    infinite ratio.
    """
    return ControllerDecision(*_decide(df_prev, df_new, tol, ds, ds_max))


def _decide(df_prev: float, df_new: float, tol: float, ds: float, ds_max: float) -> tuple[bool, float, float]:
    if df_prev < 0 or df_new < 0:
        # compression noise can push a tiny integrand below zero
        df_prev, df_new = max(df_prev, 0.0), max(df_new, 0.0)
    if df_new == 0.0:
        ratio = 0.0 if df_prev == 0.0 else math.inf
    else:
        ratio = (df_prev - df_new) / df_new
    if ratio > tol:
        return False, 0.5 * ds, ratio
    if ratio <= 0.25 * tol:
        return True, min(2.0 * ds, ds_max), ratio
    return True, ds, ratio


def dynamic_cutoff(df0: float, df_s: float, eps_tilde: float) -> float:
    """Amplitude-weighted Schmidt cutoff eps * dF(0) / dF(s)."""
    if df_s <= 0.0:
        return math.inf if df0 > 0 else eps_tilde
    return eps_tilde * df0 / df_s


# ---------------------------------------------------------------------------
# tail extrapolation


def tail_extrapolate(
    trace: IntegrationTrace | tuple[np.ndarray, np.ndarray], window: float, x_max: float | None = None
) -> TailFit:
    """Fit dF ~ a exp(-b s) on [X - window, X] and integrate it to infinity.

    The returned ``delta_f`` is 2 (a / b) exp(-b X), matching F = 2 int dF.
    The fit is a least-squares line through log dF. It is skipped, with
    ``delta_f = 0``, for fewer than four positive samples or a rate b <= 0.
    """
    if isinstance(trace, IntegrationTrace):
        s, df = trace.s, trace.dF
    else:
        s, df = (np.asarray(v, dtype=float) for v in trace)
    if s.size == 0:
        return TailFit(0.0, 0.0, 0.0, True, "empty trace")
    x = float(s[-1]) if x_max is None else x_max
    sel = (s >= x - window - 1e-12) & (s <= x + 1e-12)
    if np.any(df[sel] <= 0):
        return TailFit(0.0, 0.0, 0.0, True, "nonpositive integrand inside the tail window")
    sel &= df > 0
    if np.count_nonzero(sel) < 4:
        return TailFit(0.0, 0.0, 0.0, True, "fewer than 4 samples in the tail window")
    slope, intercept = np.polyfit(s[sel], np.log(df[sel]), 1)
    b = -float(slope)
    a = float(np.exp(intercept))
    if not b > 0:
        return TailFit(a, b, 0.0, True, f"fitted decay rate {b:.3e} is not positive")
    return TailFit(a, b, 2.0 * a / b * math.exp(-b * x))


# ---------------------------------------------------------------------------
# the integration loop


def _check_drho(drho: Any) -> None:
    if isinstance(drho, DenseOperator) and not drho.hermitian:
        raise IntegrationError("state derivative must be Hermitian")


class _Run:
    """One integration: a sequential state machine over accepted steps."""

    def __init__(self, backend: Any, config: IntegrationConfig, mode: str, omega0: Any, drho: Any) -> None:
        self.backend = backend
        self.config = config
        self.mode = mode
        self.drho = drho
        self.trace = IntegrationTrace(config=config)
        self.omega = omega0
        self.arg_factor = 0.5 if mode == "qfi" else 1.0
        self.acc_terms: list[Any] = []
        self.acc_coeffs: list[float] = []
        self.acc: Any = None
        self.base_cutoff = config.truncation.sv_cutoff

    def integrand(self, omega: Any) -> float:
        if self.mode == "qfi":
            return self.backend.norm_sq(omega)
        if self.mode == "sld":
            return self.backend.inner(self.drho, omega)
        return self.backend.inner(self.drho, self.backend.commutator_rho(omega))

    def accumulate(self, terms: list[Any], weights: list[float]) -> None:
        if self.mode == "qfi":
            return
        if self.acc is not None:
            terms, weights = [self.acc, *terms], [1.0, *weights]
        self.acc = self.backend.combine(terms, weights)

    def cutoff(self, df0: float, df_s: float) -> float:
        eps = self.config.dynamic_eps
        if eps is None and not self.config.truncation.dynamic:
            return self.base_cutoff
        eps = self.base_cutoff if eps is None else eps
        return dynamic_cutoff(df0, df_s, eps)

    def run(self) -> IntegrationTrace:
        cfg = self.config
        x_max = cfg.x_max
        t0 = time.perf_counter()
        df_prev = self.integrand(self.omega)
        df0 = df_prev
        f_cum = 0.0
        s = 0.0
        self.trace.rows.append(
            TraceRow(0.0, 0.0, df_prev, 0.0, self.backend.size(self.omega), self.base_cutoff, 0.0, 0.0)
        )
        trapezoid = cfg.quadrature == "trapezoid"
        adaptive = isinstance(cfg.step, AdaptiveStep)
        planned = cfg.step.ds_init if adaptive else cfg.step.ds
        if adaptive:
            tol, ds_min, ds_max = cfg.step.tol, cfg.step.ds_min, cfg.step.ds_max
        dynamic = cfg.dynamic_eps is not None or cfg.truncation.dynamic
        cutoff = self.base_cutoff
        rows = self.trace.rows
        size = self.backend.size
        step = self.backend.step
        integrand = self.integrand
        end_tol = 1e-12 * max(x_max, 1.0)
        omega = self.omega
        half = self.arg_factor
        keep_acc = self.mode != "qfi"
        clock = time.perf_counter
        alarm = cfg.discard_alarm
        left_rule = "quadrature-sign" in _faults.get()
        while s < x_max - end_tol:
            ds = min(planned, x_max - s)
            clipped = ds < planned
            if dynamic:
                cutoff = self.cutoff(df0, df_prev)
            while True:
                omega_new, discarded = step(omega, half * ds, cutoff)
                df_new = integrand(omega_new)
                if not adaptive:
                    break
                accept, next_ds, ratio = _decide(df_prev, df_new, tol, ds, ds_max)
                if accept:
                    if not clipped:
                        planned = next_ds
                    break
                if ds <= ds_min:
                    self.trace.warn(
                        f"step controller hit ds_min={ds_min:g} at s={s:.6g} (ratio {ratio:.3e} > tol); accepting"
                    )
                    break
                self.trace.rejected_steps += 1
                ds = max(next_ds, ds_min)
                clipped = False
                planned = ds
            if discarded > alarm:
                self.trace.warn(f"discarded weight {discarded:.3e} at s={s + ds:.6g} exceeds alarm {alarm:g}")
            if trapezoid:
                f_cum += ds * (df_prev + df_new)
                if keep_acc:
                    self.accumulate([omega, omega_new], [0.5 * ds, 0.5 * ds])
            elif left_rule:
                f_cum += 2.0 * ds * df_prev
                if keep_acc:
                    self.accumulate([omega], [ds])
            else:
                f_cum += 2.0 * ds * df_new
                if keep_acc:
                    self.accumulate([omega_new], [ds])
            s += ds
            omega = omega_new
            df_prev = df_new
            rows.append(TraceRow(s, ds, df_new, f_cum, size(omega_new), cutoff, discarded, 1e3 * (clock() - t0)))
        self.omega = omega
        self.trace.F_X = f_cum
        if cfg.extrapolate_tail and x_max > 0:
            fit = tail_extrapolate(self.trace, cfg.tail_window, x_max)
            if fit.skipped:
                self.trace.warn(f"tail extrapolation skipped: {fit.reason}")
            self.trace.tail = fit
        return self.trace


def integrate_qfi(
    rho: DenseOperator | MPO,
    drho: DenseOperator | MPO,
    config: IntegrationConfig,
    backend: Any = None,
) -> tuple[float, IntegrationTrace]:
    """Truncated QFI F(X) = 2 int_0^X ||B(s/2)||^2 ds, discretized.

    Returns ``(F_num, trace)``; ``trace.F_total`` includes the tail term
    when ``config.extrapolate_tail`` is set.
    """
    _check_drho(drho)
    be = make_backend(rho, config, backend)
    trace = _Run(be, config, "qfi", be.lift(drho), None).run()
    return trace.F_X, trace


def accumulate_sld(
    rho: DenseOperator | MPO,
    drho: DenseOperator | MPO,
    config: IntegrationConfig,
    backend: Any = None,
) -> tuple[DenseOperator | MPO, IntegrationTrace]:
    """SLD L(X) = 2 sum_k w_k B(s_k) on the quadrature grid.

    The trace's F_X is the quadrature of tr[drho B(s)], which equals
    tr[drho L(X)] up to roundoff.
    """
    _check_drho(drho)
    be = make_backend(rho, config, backend)
    d = be.lift(drho)
    run = _Run(be, config, "sld", d, d)
    trace = run.run()
    if run.acc is None:
        sld = be.combine([d], [0.0])
    else:
        sld = be.combine([run.acc], [2.0])
    trace.sld = be.lower(sld)
    return trace.sld, trace


def integrate_encoding_variant(
    rho: DenseOperator | MPO,
    a: DenseOperator | MPO,
    config: IntegrationConfig,
    backend: Any = None,
) -> tuple[Any, Any, float, IntegrationTrace]:
    """Integrate Abar(s) = exp(-rho s) A exp(-rho s) instead of B(s).

    With K(X) = int_0^X Abar, the SLD is L(X) = -2i[K(X), rho] and
    F(X) = tr[drho L(X)] = -2 tr([A, rho][K(X), rho]).

    Returns ``(K, L, F, trace)``.
    """
    be = make_backend(rho, config, backend)
    a_l = be.lift(a)
    drho = be.commutator_rho(a_l)
    run = _Run(be, config, "variant", a_l, drho)
    trace = run.run()
    k = be.combine([a_l], [0.0]) if run.acc is None else run.acc
    sld = be.combine([be.commutator_rho(k)], [2.0])
    f = be.inner(drho, sld)
    trace.sld = be.lower(sld)
    trace.encoding_integral = be.lower(k)
    return trace.encoding_integral, trace.sld, f, trace


def sld_from_encoding_integral(k: DenseOperator, rho: DenseOperator) -> DenseOperator:
    """L = -2i[K, rho]; the factor 2 carries over from L = 2 int B."""
    return DenseOperator.hermitian_from(2.0 * commutator_derivative(k, rho).matrix)
