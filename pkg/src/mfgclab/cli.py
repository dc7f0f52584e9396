"""Batch experiment runner.

Subcommands: check (condition reports), solve (equilibrium flow export),
mono (monotonicity sweep), propagate (variational trace + verdict), chain
(measure-map chain-rule table).  Every run writes a manifest with the config
echo, package version, effective seed and wall time.  Exit codes: 0 pass,
1 config error, 2 condition/verdict failure, 3 hypothesis or gate violation,
4 solver non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calculus import MeasureFunctional, chain_rule_check, identity_map, mean_shift_map
from .conditions import (
    check_anti_assumption,
    check_disp_condition,
    check_disp_sufficient,
    check_f_monotone,
    check_ll_condition,
    check_matrix1,
    make_condition_samples,
)
from .config import ConfigError, ExperimentConfig
from .measures import JointEmpiricalMeasure
from .models import verify_envelope_identities
from .monotonicity import monotonicity_sweep, tolerance_scale
from .propagation import (
    GateError,
    model_gate,
    propagation_experiment,
    traces_to_csv,
)
from .solver import PicardError, SolverError, ValueAccess, solve_mfgc

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAIL = 2
EXIT_HYPOTHESIS = 3
EXIT_NO_CONVERGENCE = 4


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, seed: int,
                    wall_time: float, artifacts: list) -> None:
    manifest = {
        "version": __version__,
        "revision": _git_describe(),
        "kind": cfg.kind,
        "seed": seed,
        "wall_time_s": wall_time,
        "config": cfg.raw,
        "artifacts": sorted(str(a.name) for a in artifacts),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2))
    return path


def _plot_script(out_dir: Path, kind: str, csv_name: str) -> Path:
    lines = ["set datafile separator ','", "set key outside", "set grid"]
    if kind == "solve":
        lines += [
            f"set title 'particle states'",
            "set xlabel 't'",
            f"plot '{csv_name}' using 1:3 every ::1 with points pt 7 ps 0.3 title 'X'",
        ]
    elif kind == "mono":
        lines += [
            "set title 'monotonicity functional samples'",
            "set xlabel 't'",
            f"plot '{csv_name}' using 1:4 every ::1 with points pt 7 title 'value'",
        ]
    elif kind == "propagate":
        lines += [
            "set title 'propagation trace'",
            "set xlabel 't'",
            f"plot '{csv_name}' using 2:3 every ::1 with points pt 7 ps 0.3 title 'I', \\",
            f"     '{csv_name}' using 2:4 every ::1 with points pt 5 ps 0.3 title 'Ibar'",
        ]
    else:
        lines += [
            "set title 'chain-rule check'",
            "set logscale y",
            f"plot '{csv_name}' using 2:5 every ::1 with points pt 7 title 'abs error'",
        ]
    path = out_dir / "plot.gp"
    path.write_text("\n".join(lines) + "\n")
    return path


def run_check(cfg: ExperimentConfig, out_dir: Path, seed: int, jobs: int) -> int:
    model = cfg.model()
    which = cfg.check_section.get("which", "envelope").split()
    n_samples = int(cfg.check_section.get("samples", "40"))
    n_atoms = int(cfg.check_section.get("atoms", "16"))
    lam = float(cfg.mono_section.get("lambda", "0"))
    samples = make_condition_samples(n_samples, n_atoms, seed)
    reports = []
    for name in which:
        if name == "envelope":
            reports.append(verify_envelope_identities(model, sample_count=200, seed=seed))
        elif name == "matrix1":
            params = model.params
            bmean = params["b1_mean"]
            reports.append(check_matrix1(
                params["c"], params["q1"], params["q2"], bmean[1], bmean[2]))
        elif name == "ll":
            reports.append(check_ll_condition(model, samples))
        elif name == "disp":
            reports.append(check_disp_condition(model, lam, samples))
        elif name == "disp_sufficient":
            params = model.params
            bmean = params["b1_mean"]
            c0 = abs(params["cbar"] * bmean[2] - params["chat"])
            reports.append(check_disp_sufficient(model, lam, c0, samples))
        elif name == "anti":
            anti = cfg.anti_section
            reports.append(check_anti_assumption(
                model, cfg.lambda_vec(), float(anti.get("l0", "0")),
                float(anti.get("gamma_lo", "0")), float(anti.get("gamma_hi", "0")),
                float(anti.get("l_bar", "0")), float(anti.get("lu_xx", "0")),
                seed=seed))
        elif name == "fmon":
            rng = np.random.default_rng(seed)
            pairs = [((rng.normal(size=n_atoms), rng.normal(size=n_atoms)),
                      (rng.normal(size=n_atoms), rng.normal(size=n_atoms)))
                     for _ in range(n_samples)]
            reports.append(check_f_monotone(model, pairs))
        else:
            raise ConfigError(f"unknown checker {name!r}")
    payload = {"reports": [r.to_dict() for r in reports],
               "worst_margin": min(r.worst_margin for r in reports),
               "all_passed": all(r.passed for r in reports)}
    _write_json(out_dir / "report.json", payload)
    for report in reports:
        status = "pass" if report.passed else f"FAIL({report.failure_kind or 'condition'})"
        print(f"check {report.condition}: {status} worst margin {report.worst_margin:.3e}")
    if any(r.failure_kind for r in reports):
        return EXIT_HYPOTHESIS
    return EXIT_OK if payload["all_passed"] else EXIT_FAIL


def run_solve(cfg: ExperimentConfig, out_dir: Path, seed: int, jobs: int) -> int:
    model = cfg.model()
    grid = cfg.grid()
    flow = solve_mfgc(model, cfg.initial_cloud(), grid, cfg.picard(), seed=seed)
    csv_path = out_dir / "flow.csv"
    flow.to_csv(csv_path)
    _write_json(out_dir / "report.json", flow.run_metadata())
    _plot_script(out_dir, "solve", csv_path.name)
    print(f"solve: {flow.picard_iterations} sweeps, residual {flow.final_residual:.3e}")
    return EXIT_OK


def run_mono(cfg: ExperimentConfig, out_dir: Path, seed: int, jobs: int) -> int:
    model = cfg.model()
    grid = cfg.grid()
    picard = cfg.picard()
    flow = solve_mfgc(model, cfg.initial_cloud(), grid, picard, seed=seed)
    prop = cfg.propagation()
    access = ValueAccess(model, grid, picard, seed=seed, base_flow=flow, sweeps=6)
    tol = tolerance_scale(grid.dt, grid.dx, flow.n_particles, prop.fd_eps, prop.tol_c)
    report = monotonicity_sweep(
        flow, access, prop.kind, lam=prop.lam, lvec=prop.lvec,
        slices=int(cfg.mono_section.get("slices", "5")),
        battery_size=prop.n_directions, fd_eps=prop.fd_eps,
        tolerance=tol, seed=seed, jobs=jobs,
    )
    samples_path = out_dir / "samples.csv"
    with open(samples_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["t", "level", "direction", "value"])
        writer.writeheader()
        writer.writerows(report.samples)
    report.metadata["solver"] = flow.run_metadata()
    _write_json(out_dir / "report.json", report.to_dict())
    _plot_script(out_dir, "mono", samples_path.name)
    print(f"mono {report.kind}: verdict {'pass' if report.verdict else 'FAIL'} "
          f"min {report.minimum:.4e} tol {tol:.4e}")
    return EXIT_OK if report.verdict else EXIT_FAIL


def run_propagate(cfg: ExperimentConfig, out_dir: Path, seed: int, jobs: int) -> int:
    model = cfg.model()
    prop = cfg.propagation()
    gate = model_gate(model, prop)
    if prop.enforce_gate and not gate.passed:
        _write_json(out_dir / "report.json",
                    {"gate": gate.to_dict(), "verdict": False,
                     "reason": "hamiltonian condition gate failed before solve"})
        print(f"propagate: gate failed ({gate.condition}), no solve attempted")
        return EXIT_HYPOTHESIS
    grid = cfg.grid()
    picard = cfg.picard()
    flow = solve_mfgc(model, cfg.initial_cloud(), grid, picard, seed=seed)
    access = ValueAccess(model, grid, picard, seed=seed, base_flow=flow, sweeps=6)
    result = propagation_experiment(model, flow, access, prop)
    csv_path = out_dir / "trace.csv"
    traces_to_csv(csv_path, result.traces)
    payload = {
        "kind": result.kind,
        "tolerance": result.tolerance,
        "verdict": result.verdict,
        "gate_reports": [g.to_dict() for g in result.gate_reports],
        "slope_violations": result.slope_violations,
        "formula_violations": result.formula_violations,
        "endpoint_values": result.endpoint_values,
        "details": result.details,
        "solver": flow.run_metadata(),
    }
    _write_json(out_dir / "report.json", payload)
    _plot_script(out_dir, "propagate", csv_path.name)
    print(f"propagate {result.kind}: verdict {'pass' if result.verdict else 'FAIL'} "
          f"({len(result.slope_violations)} slope / "
          f"{len(result.formula_violations)} formula violations, tol {result.tolerance:.3e})")
    return EXIT_OK if result.verdict else EXIT_FAIL


def _chain_functional() -> MeasureFunctional:
    def evaluate(nu):
        a = nu.seconds[:, 0]
        x = nu.states[:, 0]
        w = nu.weights
        return float(w @ (a**2) + 0.5 * (w @ a) ** 2 + w @ (x * a))

    def lderiv(nu, pts):
        return pts[:, 1] ** 2 + nu.second_mean() * pts[:, 1] + pts[:, 0] * pts[:, 1]

    return MeasureFunctional(eval=evaluate, label="mixed quadratic", lderiv=lderiv)


def run_chain(cfg: ExperimentConfig, out_dir: Path, seed: int, jobs: int) -> int:
    sec = cfg.chain_section
    shift_c = float(sec.get("shift_c", "0.5"))
    n_pairs = int(sec.get("pairs", "20"))
    n_atoms = int(sec.get("atoms", "16"))
    tol = float(sec.get("tol", "1e-6"))
    rng = np.random.default_rng(seed)
    functional = _chain_functional()
    rows = []
    for label, phi in (("identity", identity_map()),
                       (f"mean_shift(c={shift_c})", mean_shift_map(shift_c))):
        for k in range(n_pairs):
            rho = JointEmpiricalMeasure(rng.normal(size=(n_atoms, 1)),
                                        rng.normal(size=(n_atoms, 1)),
                                        np.full(n_atoms, 1.0 / n_atoms))
            rho_p = JointEmpiricalMeasure(rng.normal(size=(n_atoms, 1)),
                                          rng.normal(size=(n_atoms, 1)),
                                          np.full(n_atoms, 1.0 / n_atoms))
            out = chain_rule_check(functional, phi, rho, rho_p, richardson=True)
            rows.append({"map": label, "pair": k, "fd_value": out["fd_value"],
                         "chain_value": out["chain_value"],
                         "abs_error": out["abs_error"]})
    csv_path = out_dir / "chain.csv"
    with open(csv_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["map", "pair", "fd_value",
                                                    "chain_value", "abs_error"])
        writer.writeheader()
        writer.writerows(rows)
    worst = max(r["abs_error"] for r in rows)
    payload = {"rows": rows, "max_abs_error": worst, "tolerance": tol,
               "passed": worst <= tol}
    _write_json(out_dir / "report.json", payload)
    _plot_script(out_dir, "chain", csv_path.name)
    print(f"chain: max |fd - chain| = {worst:.3e} ({'pass' if worst <= tol else 'FAIL'})")
    return EXIT_OK if worst <= tol else EXIT_FAIL


RUNNERS = {
    "check": run_check,
    "solve": run_solve,
    "mono": run_mono,
    "propagate": run_propagate,
    "chain": run_chain,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfgclab",
        description="Mean field games of controls: solve, check, and verify "
                    "monotonicity propagation.",
    )
    parser.add_argument("command", choices=sorted(RUNNERS))
    parser.add_argument("--config", required=True, help="experiment INI file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--jobs", type=int, default=1,
                        help="max parallel workers for independent evaluations")
    args = parser.parse_args(argv)

    started = time.time()
    try:
        cfg = ExperimentConfig.from_ini(args.config)
        if cfg.kind != args.command:
            raise ConfigError(
                f"config declares kind {cfg.kind!r} but command is {args.command!r}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seed

    try:
        code = RUNNERS[args.command](cfg, out_dir, seed, max(1, args.jobs))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except GateError as err:
        print(f"gate violation: {err}", file=sys.stderr)
        code = EXIT_HYPOTHESIS
    except PicardError as err:
        print(f"solver non-convergence: {err}", file=sys.stderr)
        code = EXIT_NO_CONVERGENCE
    except SolverError as err:
        print(f"solver error: {err}", file=sys.stderr)
        code = EXIT_NO_CONVERGENCE

    artifacts = [p for p in out_dir.iterdir() if p.name != "manifest.json"]
    _write_manifest(out_dir, cfg, seed, time.time() - started, artifacts)
    return code


if __name__ == "__main__":
    sys.exit(main())
