"""Command-line harness: probe, qfi, sweep, validate, bounds.

Exit codes: 0 ok, 2 invalid manifest, 3 numerical failure, 4 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import bounds, lyapunov, oracle, probes
from . import mpo as mpo_mod
from .operators import EigensolverError, OperatorError, spectral_decompose

log = logging.getLogger("lyapqfi")

EXIT_OK = 0
EXIT_MANIFEST = 2
EXIT_NUMERICAL = 3
EXIT_VALIDATION = 4

MAX_DENSE_SITES = 12
DEFAULT_SV_CUTOFF = 1e-12


class ManifestError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunManifest:
    """Everything one subcommand needs; file values are overridden by flags."""

    subcommand: str
    model: str = "tfim"
    n: int = 4
    j: float = 1.0
    g: float = 2.0
    beta: float = 4.0
    theta: float = 1.0
    backend: str = "dense"
    x_max: float = 10.0
    step: float | None = None
    adaptive_tol: float | None = None
    quadrature: str = "lower"
    tail_window: float | None = None
    max_bond_rho: int | None = None
    max_bond_omega: int | None = None
    sv_cutoff: float | None = None
    dynamic_eps: float | None = None
    variant: str = "integrand"
    sld: bool = False
    out: str | None = None
    summary: str | None = None
    seed: int = 0
    dbeta: float | None = None
    g_list: list[float] | None = None
    checkpoint: str | None = None
    n_known: int | None = None
    no_timing: bool = False
    inject_fault: list[str] = field(default_factory=list)

    def validate(self) -> None:
        for name in ("j", "g", "beta", "theta", "x_max", "step", "adaptive_tol", "tail_window", "sv_cutoff", "dynamic_eps", "dbeta"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ManifestError(f"--{name.replace('_', '-')} must be finite, got {v}")
        for v in self.g_list or []:
            if not math.isfinite(v):
                raise ManifestError(f"--g-list entries must be finite, got {v}")
        if self.model != "tfim":
            raise ManifestError(f"unknown model {self.model!r}; only 'tfim' is available")
        if self.backend not in ("dense", "mpo"):
            raise ManifestError(f"unknown backend {self.backend!r}")
        if self.n < 1:
            raise ManifestError("--n must be at least 1")
        if self.backend == "dense" and self.n > MAX_DENSE_SITES:
            raise ManifestError(f"dense backend supports N <= {MAX_DENSE_SITES}, got N={self.n}")
        if self.backend == "mpo" and self.n < 2:
            raise ManifestError("MPO backend needs N >= 2")
        if self.j <= 0:
            raise ManifestError("--j must be positive")
        if self.beta < 0:
            raise ManifestError("--beta must be nonnegative")
        if self.x_max < 0:
            raise ManifestError("--x-max must be nonnegative")
        if self.step is not None and self.adaptive_tol is not None:
            raise ManifestError("--step and --adaptive-tol are mutually exclusive")
        if self.step is not None and self.step <= 0:
            raise ManifestError("--step must be positive")
        if self.adaptive_tol is not None and self.adaptive_tol <= 0:
            raise ManifestError("--adaptive-tol must be positive")
        if self.quadrature not in ("lower", "trapezoid"):
            raise ManifestError(f"unknown quadrature {self.quadrature!r}")
        if self.variant not in ("integrand", "encoding-operator"):
            raise ManifestError(f"unknown variant {self.variant!r}")
        if self.tail_window is not None and self.tail_window <= 0:
            raise ManifestError("--tail-window must be positive")
        for name in ("max_bond_rho", "max_bond_omega"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ManifestError(f"--{name.replace('_', '-')} must be at least 1")
        if self.sv_cutoff is not None and self.sv_cutoff < 0:
            raise ManifestError("--sv-cutoff must be nonnegative")
        if self.dynamic_eps is not None and self.dynamic_eps < 0:
            raise ManifestError("--dynamic-eps must be nonnegative")
        if self.dbeta is not None and self.dbeta <= 0:
            raise ManifestError("--dbeta must be positive")
        if self.subcommand == "sweep" and not self.g_list:
            raise ManifestError("sweep needs a nonempty --g-list")
        unknown = set(self.inject_fault) - lyapunov.KNOWN_FAULTS
        if unknown:
            raise ManifestError(f"unknown fault(s) {sorted(unknown)}")
        for path in (self.out, self.summary):
            if path is not None:
                parent = Path(path).resolve().parent
                if not parent.is_dir() or not os.access(parent, os.W_OK):
                    raise ManifestError(f"output directory for {path} is not writable")

    def spec(self, g: float | None = None) -> probes.ProbeSpec:
        return probes.ProbeSpec(self.n, self.j, self.g if g is None else g, self.beta, self.theta)

    def rho_policy(self) -> mpo_mod.TruncationPolicy:
        cut = DEFAULT_SV_CUTOFF if self.sv_cutoff is None else self.sv_cutoff
        return mpo_mod.TruncationPolicy(cut, self.max_bond_rho)

    def omega_policy(self) -> mpo_mod.TruncationPolicy:
        cut = DEFAULT_SV_CUTOFF if self.sv_cutoff is None else self.sv_cutoff
        return mpo_mod.TruncationPolicy(cut, self.max_bond_omega, dynamic=self.dynamic_eps is not None)

    def integration_config(self) -> lyapunov.IntegrationConfig:
        if self.step is not None:
            step: lyapunov.StepMode = lyapunov.FixedStep(self.step)
        else:
            step = lyapunov.AdaptiveStep(self.adaptive_tol if self.adaptive_tol is not None else 1e-4)
        truncation = self.omega_policy() if self.backend == "mpo" else mpo_mod.EXACT
        return lyapunov.IntegrationConfig(
            x_max=self.x_max,
            step=step,
            quadrature=self.quadrature,
            truncation=truncation,
            dynamic_eps=self.dynamic_eps,
            tail_window=self.tail_window if self.tail_window is not None else 10.0,
            extrapolate_tail=self.tail_window is not None,
            accumulate_sld=self.sld,
            variant=self.variant,
        )

    def echo(self) -> dict[str, Any]:
        out = asdict(self)
        out.pop("inject_fault")
        return out


MANIFEST_KEYS = {f.name for f in fields(RunManifest)} - {"subcommand"}


def _add_common(p: argparse.ArgumentParser) -> None:
    # suppressed defaults keep config-file values unless a flag is given
    sup = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file mirroring the flags; flags override it")
    p.add_argument("--model", choices=["tfim"], default=sup)
    p.add_argument("--n", type=int, default=sup, help="number of sites")
    p.add_argument("--j", type=float, default=sup, help="Ising coupling J")
    p.add_argument("--g", type=float, default=sup, help="transverse field g")
    p.add_argument("--beta", type=float, default=sup, help="inverse temperature")
    p.add_argument("--theta", type=float, default=sup, help="encoded parameter value")
    p.add_argument("--backend", choices=["dense", "mpo"], default=sup)
    p.add_argument("--dbeta", type=float, default=sup, help="imaginary-time step for MPO thermal states")
    p.add_argument("--max-bond-rho", dest="max_bond_rho", type=int, default=sup)
    p.add_argument("--sv-cutoff", dest="sv_cutoff", type=float, default=sup)
    p.add_argument("--checkpoint", default=sup, help="MPO thermal-state file: loaded if present, written otherwise")
    p.add_argument("--out", default=sup)
    p.add_argument("--summary", default=sup)
    p.add_argument("--seed", type=int, default=sup)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_integration(p: argparse.ArgumentParser) -> None:
    sup = argparse.SUPPRESS
    p.add_argument("--x-max", dest="x_max", type=float, default=sup, help="integration cutoff X")
    p.add_argument("--step", type=float, default=sup, help="fixed step; omit for adaptive stepping")
    p.add_argument("--adaptive-tol", dest="adaptive_tol", type=float, default=sup)
    p.add_argument("--quadrature", choices=["lower", "trapezoid"], default=sup)
    p.add_argument("--tail-window", dest="tail_window", type=float, default=sup, help="enable tail fit over [X-W, X]")
    p.add_argument("--max-bond-omega", dest="max_bond_omega", type=int, default=sup)
    p.add_argument("--dynamic-eps", dest="dynamic_eps", type=float, default=sup)
    p.add_argument("--variant", choices=["integrand", "encoding-operator"], default=sup)
    p.add_argument("--sld", action="store_const", const=True, default=sup, help="also accumulate the SLD")
    p.add_argument(
        "--no-timing", dest="no_timing", action="store_const", const=True, default=sup,
        help="write wall_ms as 0 so repeated runs are byte-identical",
    )
    p.add_argument("--inject-fault", dest="inject_fault", action="append", default=sup, help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lyapqfi", description="Truncated Lyapunov-integral QFI toolkit.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    p = sub.add_parser("probe", help="spectrum report of the thermal probe")
    _add_common(p)
    p = sub.add_parser("qfi", help="integrate the QFI and write the step trace")
    _add_common(p)
    _add_integration(p)
    p = sub.add_parser("sweep", help="qfi over a list of fields")
    _add_common(p)
    _add_integration(p)
    p.add_argument("--g-list", dest="g_list", type=float, nargs="+", default=argparse.SUPPRESS)
    p = sub.add_parser("validate", help="oracle-equivalence and bound-validity suite")
    _add_common(p)
    p.add_argument("--inject-fault", dest="inject_fault", action="append", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    p = sub.add_parser("bounds", help="evaluate convergence bounds on a log grid")
    _add_common(p)
    p.add_argument("--x-max", dest="x_max", type=float, default=argparse.SUPPRESS)
    p.add_argument("--n-known", dest="n_known", type=int, default=argparse.SUPPRESS)
    return parser


def load_manifest(argv: Sequence[str] | None = None) -> tuple[RunManifest, bool]:
    ns = build_parser().parse_args(argv)
    values: dict[str, Any] = {}
    if getattr(ns, "config", None):
        try:
            data = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read config {ns.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ManifestError("config file must hold a JSON object")
        for key, val in data.items():
            k = key.replace("-", "_")
            if k not in MANIFEST_KEYS:
                raise ManifestError(f"unknown config key {key!r}")
            values[k] = val
    for key, val in vars(ns).items():
        if key in MANIFEST_KEYS:
            values[key] = val
    try:
        manifest = RunManifest(subcommand=ns.subcommand, **values)
    except TypeError as exc:
        raise ManifestError(str(exc)) from exc
    manifest.validate()
    return manifest, ns.verbose


# ---------------------------------------------------------------------------
# subcommands


def _write_json(path: str | None, payload: dict[str, Any]) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _thermal_state(m: RunManifest, spec: probes.ProbeSpec) -> probes.Probe:
    if m.backend == "dense":
        return probes.build_probe(spec)
    thermal = None
    if m.checkpoint and Path(m.checkpoint).exists():
        thermal = mpo_mod.load_mpo(m.checkpoint)
        if thermal.n_sites != spec.n:
            raise ManifestError(f"checkpoint holds N={thermal.n_sites}, manifest asks for N={spec.n}")
        log.info("loaded thermal state from %s", m.checkpoint)
    elif m.checkpoint:
        thermal = probes.thermal_probe(spec, "mpo", m.dbeta, m.rho_policy())
        mpo_mod.save_mpo(m.checkpoint, thermal)
    return probes.build_probe(spec, "mpo", m.dbeta, m.rho_policy(), m.omega_policy(), thermal_state=thermal)


def cmd_probe(m: RunManifest) -> int:
    spec = m.spec()
    if m.n > MAX_DENSE_SITES:
        raise ManifestError(f"probe report diagonalizes H; needs N <= {MAX_DENSE_SITES}")
    h = probes.tfim_hamiltonian(spec, "dense")
    energies = np.sort(spectral_decompose(h).eigenvalues)
    rep = probes.gap_report(energies, spec.beta, spec.j)
    rho = probes.thermal_probe(spec, "dense")
    lam = spectral_decompose(rho).eigenvalues
    payload = {
        "N": spec.n,
        "J": spec.j,
        "g": spec.g,
        "beta": spec.beta,
        "eigenvalues_head": [float(v) for v in lam[:16]],
        "energies_head": [float(v) for v in energies[:16]],
        "gap": rep.gap,
        "m": rep.m,
        "n": rep.n,
        "S": bounds.von_neumann_entropy(lam),
        "lambda_gs_formula": rep.gs_population,
        "lambda_gs_exact": rep.gs_population_exact,
        "flags": list(rep.flags),
    }
    _write_json(m.out, payload)
    return EXIT_OK


def _run_qfi(m: RunManifest, g: float | None = None) -> tuple[lyapunov.IntegrationTrace, dict[str, Any]]:
    spec = m.spec(g)
    pr = _thermal_state(m, spec)
    cfg = m.integration_config()
    extra: dict[str, Any] = {"manifest": m.echo(), "g": spec.g}
    if m.variant == "encoding-operator":
        _, sld, f_var, trace = lyapunov.integrate_encoding_variant(pr.rho, pr.generator, cfg)
        extra["F_variant"] = f_var
    elif m.sld:
        sld, trace = lyapunov.accumulate_sld(pr.rho, pr.drho, cfg)
    else:
        _, trace = lyapunov.integrate_qfi(pr.rho, pr.drho, cfg)
        sld = None
    if sld is not None and m.backend == "dense":
        extra["sld_residual"] = oracle.sld_residual(pr.rho, pr.drho, sld)
    if not math.isfinite(trace.F_total):
        raise NumericalFailure(f"integration produced a non-finite QFI ({trace.F_total})")
    if m.backend == "dense":
        inp = oracle.spectral_input(pr.rho, pr.drho)
        f_oracle = oracle.qfi_exact(inp)
        extra["F_oracle"] = f_oracle
        extra["F_oracle_X"] = oracle.qfi_truncated_exact(inp, m.x_max)
        extra["eps_X"] = bounds.relative_error(trace.F_X, f_oracle) if f_oracle > 0 else None
        extra["eps_total"] = bounds.relative_error(trace.F_total, f_oracle) if f_oracle > 0 else None
    return trace, extra


def cmd_qfi(m: RunManifest) -> int:
    trace, extra = _run_qfi(m)
    if m.out:
        trace.write_csv(m.out, timing=not m.no_timing)
    if m.summary:
        trace.write_summary(m.summary, extra)
    if not m.out and not m.summary:
        payload = trace.summary()
        payload.update(extra)
        _write_json(None, payload)
    for w in trace.warnings:
        log.warning(w)
    return EXIT_OK


SWEEP_COLUMNS = ("g", "F_X", "F_total", "F_oracle", "eps_X", "eps_total", "steps")


def cmd_sweep(m: RunManifest) -> int:
    rows = []
    for g in m.g_list or []:
        trace, extra = _run_qfi(m, g)
        rows.append(
            (
                g,
                trace.F_X,
                trace.F_total,
                extra.get("F_oracle"),
                extra.get("eps_X"),
                extra.get("eps_total"),
                len(trace.rows) - 1,
            )
        )

    def fmt(v: Any) -> str:
        if v is None:
            return ""
        if isinstance(v, int):
            return str(v)
        return repr(float(v))

    target = open(m.out, "w", newline="") if m.out else nullcontext(sys.stdout)
    with target as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow([fmt(v) for v in r])
    if m.summary:
        _write_json(m.summary, {"manifest": m.echo(), "rows": [dict(zip(SWEEP_COLUMNS, r)) for r in rows]})
    return EXIT_OK


def cmd_validate(m: RunManifest) -> int:
    from .validate import run_validation

    def progress(res: Any) -> None:
        status = "PASS" if res.passed else "FAIL"
        print(f"[{status}] {res.name}: {res.detail}", flush=True)

    report = run_validation(seed=m.seed, faults=m.inject_fault, progress=progress)
    if m.out:
        _write_json(m.out, report.to_json())
    if not report.passed:
        print("validation failed: " + ", ".join(report.failed), file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_bounds(m: RunManifest) -> int:
    if m.n > MAX_DENSE_SITES:
        raise ManifestError(f"bound constants need the dense eigenbasis; N <= {MAX_DENSE_SITES}")
    pr = probes.build_probe(m.spec())
    inp = oracle.spectral_input(pr.rho, pr.drho)
    a_eig = inp.decomposition.rotate_in(pr.generator.matrix)
    x_top = m.x_max if m.x_max > 0.1 else 100.0
    xs = np.logspace(-1, math.log10(x_top), 100)
    n_known = m.n_known if m.n_known is not None else min(8, inp.eigenvalues.size)
    rep = bounds.build_bound_report(inp.eigenvalues, a_eig, xs, n_known=n_known)
    payload = rep.to_json()
    payload["manifest"] = m.echo()
    _write_json(m.out, payload)
    return EXIT_OK


COMMANDS = {"probe": cmd_probe, "qfi": cmd_qfi, "sweep": cmd_sweep, "validate": cmd_validate, "bounds": cmd_bounds}


def _thread_limit() -> Any:
    raw = os.environ.get("LYAPQFI_THREADS")
    if not raw:
        return nullcontext()
    try:
        limit = int(raw)
    except ValueError as exc:
        raise ManifestError(f"LYAPQFI_THREADS must be an integer, got {raw!r}") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(limit, 1))


def main(argv: Sequence[str] | None = None) -> int:
    try:
        manifest, verbose = load_manifest(argv)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else EXIT_MANIFEST
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            with lyapunov.injected_faults(manifest.inject_fault if manifest.subcommand != "validate" else ()):
                return COMMANDS[manifest.subcommand](manifest)
    except (ManifestError, lyapunov.IntegrationError, OperatorError, mpo_mod.MPOError, bounds.BoundDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except (EigensolverError, oracle.KrylovError, oracle.IllDefinedSLDError, NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
