"""Self-check suite: oracle equivalence and bound validity at N <= 6.

Each check is a named function returning a :class:`CheckResult`; the suite
runs them all and never stops at the first failure.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import bounds, lyapunov, oracle, probes
from . import mpo as mpo_mod
from .operators import PAULI_X, PAULI_Z, DenseOperator, commutator_derivative, embed_site

QUBIT_RHO = DenseOperator(np.diag([0.9, 0.1]).astype(np.complex128), hermitian=True)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


@dataclass
class ValidationReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failed(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "failed": self.failed,
            "checks": [
                {"name": r.name, "passed": r.passed, "detail": r.detail, "seconds": round(r.seconds, 3)}
                for r in self.results
            ],
        }


def qubit_probe() -> tuple[DenseOperator, DenseOperator]:
    """rho = diag(0.9, 0.1) encoded by sigma_x; dF(s) = 1.28 exp(-s)."""
    return QUBIT_RHO, commutator_derivative(PAULI_X, QUBIT_RHO)


def random_pure_state(n_qubits: int, rng: np.random.Generator) -> DenseOperator:
    psi = rng.normal(size=2**n_qubits) + 1j * rng.normal(size=2**n_qubits)
    psi /= np.linalg.norm(psi)
    return DenseOperator.hermitian_from(np.outer(psi, psi.conj()))


def uniform_field(n_qubits: int) -> DenseOperator:
    return DenseOperator.hermitian_from(sum(embed_site(PAULI_Z, k, n_qubits) for k in range(n_qubits)))


def _check_single_qubit() -> tuple[bool, str]:
    rho, drho = qubit_probe()
    f, _ = lyapunov.integrate_qfi(rho, drho, lyapunov.IntegrationConfig(1.0, lyapunov.FixedStep(1e-3)))
    closed = 2.56 * (1.0 - math.exp(-1.0))
    ok = closed - 2e-3 <= f <= closed
    return ok, f"F_num={f:.8f}, closed form {closed:.8f}"


def _dense_probes(ns: Sequence[int], gs: Sequence[float]) -> list[probes.Probe]:
    return [probes.build_probe(probes.ProbeSpec(n, g=g)) for n in ns for g in gs]


def _check_oracle_and_lower_bound() -> list[tuple[str, bool, str]]:
    worst_rel = 0.0
    worst_excess = -math.inf
    for pr in _dense_probes((2, 4), (0.0, 2.0)):
        inp = oracle.spectral_input(pr.rho, pr.drho)
        exact = oracle.qfi_exact(inp)
        cfg = lyapunov.IntegrationConfig(100.0, lyapunov.AdaptiveStep(1e-3), extrapolate_tail=True)
        _, trace = lyapunov.integrate_qfi(pr.rho, pr.drho, cfg)
        worst_rel = max(worst_rel, abs(trace.F_total - exact) / exact)
        trunc = oracle.qfi_truncated_exact(inp, trace.s)
        worst_excess = max(worst_excess, float(np.max(trace.F_cum - trunc)))
    return [
        ("oracle-equivalence", worst_rel <= 5e-3, f"max |F_total - F| / F = {worst_rel:.3e} (limit 5e-3)"),
        (
            "lower-bound-quadrature",
            worst_excess <= 1e-9,
            f"max over rows of F_num(s) - F(s) = {worst_excess:.3e} (limit 1e-9)",
        ),
    ]


def _check_adaptive_certificate() -> tuple[bool, str]:
    rho, drho = qubit_probe()
    tau = 1e-3
    f, _ = lyapunov.integrate_qfi(rho, drho, lyapunov.IntegrationConfig(10.0, lyapunov.AdaptiveStep(tau)))
    gap = 2.56 * (1.0 - math.exp(-10.0)) - f
    return 0 <= gap <= 0.5 * tau * f, f"F(X) - F_num = {gap:.3e}, certificate {0.5 * tau * f:.3e}"


def _check_sld() -> tuple[bool, str]:
    rho, drho = qubit_probe()
    cfg = lyapunov.IntegrationConfig(20.0, lyapunov.FixedStep(1e-3), quadrature="trapezoid")
    sld, _ = lyapunov.accumulate_sld(rho, drho, cfg)
    err = abs(sld.matrix[0, 1] - 1.6j)
    return err <= 1e-6, f"|L_01 - 1.6i| = {err:.3e}"


def _check_variant() -> tuple[bool, str]:
    pr = probes.build_probe(probes.ProbeSpec(4, g=2.0))
    cfg = lyapunov.IntegrationConfig(10.0, lyapunov.FixedStep(0.01), quadrature="trapezoid")
    sld, trace = lyapunov.accumulate_sld(pr.rho, pr.drho, cfg)
    _, sld_v, f_v, _ = lyapunov.integrate_encoding_variant(pr.rho, pr.generator, cfg)
    dl = float(np.max(np.abs(sld.matrix - sld_v.matrix)))
    df = abs(f_v - trace.F_X)
    return dl <= 1e-8 and df <= 1e-8, f"max |dL| = {dl:.3e}, |dF| = {df:.3e}"


def _check_krylov() -> tuple[bool, str]:
    worst_res = worst_merit = 0.0
    for pr in _dense_probes((4,), (0.0, 1.0, 2.0)):
        exact = oracle.qfi_exact(oracle.spectral_input(pr.rho, pr.drho))
        sol = oracle.solve_sld_krylov(pr.rho, pr.drho)
        worst_res = max(worst_res, sol.residual)
        worst_merit = max(worst_merit, abs(oracle.variational_merit(pr.rho, pr.drho, sol.sld) - exact))
    ok = worst_res <= 1e-8 and worst_merit <= 1e-8
    return ok, f"max residual {worst_res:.3e}, max |merit - F| {worst_merit:.3e}"


def _check_bounds() -> tuple[bool, str]:
    xs = np.logspace(-1, 2, 100)
    messages = []
    ok = True
    for pr in _dense_probes((4,), (0.0, 1.0, 2.0)):
        inp = oracle.spectral_input(pr.rho, pr.drho)
        a_eig = inp.decomposition.rotate_in(pr.generator.matrix)
        rep = bounds.build_bound_report(inp.eigenvalues, a_eig, xs, n_known=4)
        worst = bool(np.all(rep.eps_exact <= rep.eps_worst + 1e-12))
        low_t = True
        if rep.constants["in_regime"]:
            low_t = bool(np.all(rep.eps_exact <= rep.eps_low_t_full + 1e-12))
        valid = ~np.isnan(rep.eps_tail)
        lam = inp.eigenvalues
        f_inf = rep.constants["F_inf"]
        uu = np.asarray(oracle.qfi_error_exact(lam[4:], a_eig[4:, 4:], xs[valid])) / f_inf
        tail = bool(np.all(uu <= rep.eps_tail[valid] + 1e-12))
        ok &= worst and low_t and tail
        messages.append(f"g={pr.spec.g}: worst={worst} lowT={low_t} tail={tail}")
    return ok, "; ".join(messages)


def _check_entropy() -> tuple[bool, str]:
    bad = []
    for pr in _dense_probes((2, 4, 6), (0.0, 1.0, 2.0)):
        lam = oracle.spectral_input(pr.rho, pr.drho).eigenvalues
        if not bounds.entropy_population_relation(lam).holds:
            bad.append(f"N={pr.spec.n} g={pr.spec.g}")
    return not bad, "violations: " + (", ".join(bad) if bad else "none")


def _check_pure_states(seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    a = uniform_field(3)
    worst = 0.0
    cfg = lyapunov.IntegrationConfig(5.0, lyapunov.FixedStep(1e-3), quadrature="trapezoid")
    for _ in range(3):
        rho = random_pure_state(3, rng)
        drho = commutator_derivative(a, rho)
        exact = oracle.qfi_exact(oracle.spectral_input(rho, drho))
        f, _ = lyapunov.integrate_qfi(rho, drho, cfg)
        worst = max(worst, abs((exact - f) / exact - math.exp(-5.0)))
    return worst <= 1e-6, f"max |eps(5) - exp(-5)| = {worst:.3e}"


def _check_mpo_thermal() -> tuple[bool, str]:
    spec = probes.ProbeSpec(4, g=2.0)
    rho_m = probes.thermal_probe(spec, "mpo", dbeta=1e-3, policy=mpo_mod.TruncationPolicy(1e-12))
    rho_d = probes.thermal_probe(spec, "dense")
    dist = float(np.linalg.norm(mpo_mod.to_dense(rho_m).matrix - rho_d.matrix))
    return dist <= 1e-5, f"||rho_mpo - rho_dense||_F = {dist:.3e}"


def _check_mpo_qfi() -> tuple[bool, str]:
    spec = probes.ProbeSpec(4, g=2.0)
    policy = mpo_mod.TruncationPolicy(1e-12, 256)
    pm = probes.build_probe(spec, "mpo", dbeta=1e-3, rho_policy=policy, drho_policy=policy)
    pd = probes.build_probe(spec)
    cfg = lyapunov.IntegrationConfig(2.0, lyapunov.FixedStep(0.02), truncation=policy)
    f_d, _ = lyapunov.integrate_qfi(pd.rho, pd.drho, cfg)
    f_m, _ = lyapunov.integrate_qfi(pm.rho, pm.drho, cfg)
    rel = abs(f_m - f_d) / f_d
    return rel <= 1e-4, f"|F_mpo - F_dense| / F_dense = {rel:.3e}"


def _suite(seed: int) -> list[tuple[str, Callable[[], tuple[bool, str] | list[tuple[str, bool, str]]]]]:
    return [
        ("single-qubit-closed-form", _check_single_qubit),
        ("oracle-equivalence", _check_oracle_and_lower_bound),
        ("adaptive-certificate", _check_adaptive_certificate),
        ("sld-closed-form", _check_sld),
        ("variant-equivalence", _check_variant),
        ("variational-krylov", _check_krylov),
        ("bound-validity", _check_bounds),
        ("entropy-relation", _check_entropy),
        ("pure-state-convergence", lambda: _check_pure_states(seed)),
        ("mpo-thermal-state", _check_mpo_thermal),
        ("mpo-dense-qfi", _check_mpo_qfi),
    ]


CHECK_NAMES = (
    "single-qubit-closed-form",
    "oracle-equivalence",
    "lower-bound-quadrature",
    "adaptive-certificate",
    "sld-closed-form",
    "variant-equivalence",
    "variational-krylov",
    "bound-validity",
    "entropy-relation",
    "pure-state-convergence",
    "mpo-thermal-state",
    "mpo-dense-qfi",
)


def run_validation(
    seed: int = 0,
    faults: Sequence[str] = (),
    only: Sequence[str] | None = None,
    progress: Callable[[CheckResult], None] | None = None,
) -> ValidationReport:
    """Run the suite; ``faults`` are injected into the integrator for negative controls."""
    report = ValidationReport()
    with lyapunov.injected_faults(faults):
        for group, fn in _suite(seed):
            if only is not None and group not in only:
                continue
            t0 = time.perf_counter()
            try:
                out = fn()
            except Exception as exc:  # a crash is a failed check, not a crashed suite
                out = (False, f"{type(exc).__name__}: {exc}")
            dt = time.perf_counter() - t0
            items = out if isinstance(out, list) else [(group, *out)]
            for name, ok, detail in items:
                res = CheckResult(name, bool(ok), detail, dt)
                report.results.append(res)
                if progress is not None:
                    progress(res)
    return report
