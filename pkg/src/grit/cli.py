"""Command-line surface: train, audit, fit-law, oracle.

Exit codes: 0 success, 1 runtime failure, 2 validation failure,
3 underdetermined fit. The default output root is ./runs, overridable with
the GRIT_OUT_ROOT environment variable or --out.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import (
    ConfigError,
    GritError,
    UnderdeterminedFitError,
    UnidentifiableGammaError,
    ValidationError,
)
from .forgetting import fit_baseline_law, fit_xi_coefficients, save_fit
from .oracles import SUITES, run_suite
from .config import config_hash
from .runio import (
    RECORD_NAME,
    UPDATES_NAME,
    read_jsonl,
    read_manifest,
    read_record,
)
from .tasks import parse_task_spec
from .trainer import run_experiment


def _say(quiet: bool, message: str) -> None:
    if not quiet:
        print(message)


def cmd_train(args) -> int:
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        out_dir = Path(args.out)
    else:
        task_name, _ = parse_task_spec(config.task)
        out_dir = _default_out_root() / f"{task_name}-s{config.seed}-{config_hash(config)[:8]}"
    try:
        record = run_experiment(config, out_dir=out_dir, config_path=args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GritError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    _say(args.quiet, f"run complete: {out_dir}")
    _say(
        args.quiet,
        f"pt loss {record.pt_loss_before:.6g} -> {record.pt_loss_after:.6g}; "
        f"task loss {record.final_task_loss:.6g}",
    )
    return 0


def _default_out_root() -> Path:
    return Path(os.environ.get("GRIT_OUT_ROOT", "runs"))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def cmd_audit(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        manifest = read_manifest(run_dir)
        if manifest.status != "complete":
            print(f"run is not complete (status {manifest.status})", file=sys.stderr)
            return 1
        from .telemetry import read_telemetry

        records = read_telemetry(run_dir / "telemetry.jsonl")
        if not (run_dir / RECORD_NAME).exists():
            raise ValidationError("missing record.json")
    except (ValidationError, FileNotFoundError) as exc:
        print(f"incomplete run: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out) if args.out else run_dir / "audit"
    out.mkdir(parents=True, exist_ok=True)

    spectra_rows = []
    energy_rows = []
    reff_rows = []
    overlap_rows = []
    tail_rows = []
    for rec in records:
        total = sum(rec.spectrum)
        prefix = 0.0
        for j, lam in enumerate(rec.spectrum, start=1):
            prefix += lam
            spectra_rows.append([rec.step, rec.layer, j, lam])
            if total > 0.0:  # rows before statistics exist carry no energy curve
                energy_rows.append([rec.step, rec.layer, j, prefix / total])
        reff_rows.append([rec.step, rec.layer, rec.r_eff, rec.k_selected])
        overlap_rows.append([rec.step, rec.layer, rec.rho_align, rec.pi_proj])
        tail_rows.append([rec.step, rec.layer, rec.tail_mass])

    _write_csv(out / "spectra.csv", ["step", "layer", "index", "eigenvalue"], spectra_rows)
    _write_csv(out / "cumulative_energy.csv", ["step", "layer", "index", "energy"], energy_rows)
    _write_csv(out / "effective_rank.csv", ["step", "layer", "r_eff", "k_selected"], reff_rows)
    _write_csv(out / "alignment.csv", ["step", "layer", "rho_align", "pi_proj"], overlap_rows)
    _write_csv(out / "tail_mass.csv", ["step", "layer", "tail_mass"], tail_rows)

    updates = read_jsonl(run_dir / UPDATES_NAME)
    vectors = [np.array(u["delta_w"]) for u in updates]
    if len(vectors) >= 3:
        from .telemetry import pca_export

        pca_export(vectors, csv_path=out / "pca_updates.csv")
    else:
        _write_csv(out / "pca_updates.csv", ["pc1", "pc2"], [])

    events = read_jsonl(run_dir / "events.jsonl")
    n_reproj = sum(1 for e in events if e.get("action") == "reproject")
    _say(args.quiet, f"audit written to {out} ({len(records)} records, {n_reproj} reprojection events)")
    return 0


def cmd_fit_law(args) -> int:
    records = []
    for run_dir in args.run_dirs:
        try:
            records.append(read_record(run_dir))
        except ValidationError as exc:
            print(f"bad run dir {run_dir}: {exc}", file=sys.stderr)
            return 1
    baseline_records = [r for r in records if r.mode == "lora_control"] or records
    geometry_records = [r for r in records if r.mode == "grit"]
    try:
        fit = fit_baseline_law(baseline_records)
    except UnderdeterminedFitError as exc:
        print(f"underdetermined fit along {exc.axis}: {exc}", file=sys.stderr)
        return 3
    if geometry_records:
        try:
            fit = fit_xi_coefficients(geometry_records, fit)
        except UnidentifiableGammaError as exc:
            fit.unidentifiable = ["gamma_r", "gamma_a", "gamma_p"]
            _say(args.quiet, f"gamma section unidentifiable: {exc}")
    else:
        fit.unidentifiable = ["gamma_r", "gamma_a", "gamma_p"]
    save_fit(fit, args.out)
    _say(args.quiet, f"fit written to {args.out} (residual rms {fit.residual_rms:.3g})")
    return 0


def cmd_oracle(args) -> int:
    if args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; available: {sorted(SUITES)}", file=sys.stderr)
        return 2
    results = run_suite(args.suite)
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  observed={r.observed:.3e}  tol={r.tolerance:.3e}")
        failures += 0 if r.passed else 1
    return 0 if failures == 0 else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="grit",
        description="Geometry-aware low-rank adaptation experiments and audits.",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one experiment from a config file")
    p_train.add_argument("config", help="path to the flat key/value config")
    p_train.add_argument("--out", help="run directory (default: $GRIT_OUT_ROOT/run or ./runs/run)")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.set_defaults(fn=cmd_train)

    p_audit = sub.add_parser("audit", help="export geometry CSVs from a completed run")
    p_audit.add_argument("run_dir")
    p_audit.add_argument("--out", help="audit output directory (default: <run_dir>/audit)")
    p_audit.set_defaults(fn=cmd_audit)

    p_fit = sub.add_parser("fit-law", help="fit the forgetting law over completed runs")
    p_fit.add_argument("run_dirs", nargs="+")
    p_fit.add_argument("--out", required=True, help="output path for the fit document")
    p_fit.set_defaults(fn=cmd_fit_law)

    p_oracle = sub.add_parser("oracle", help="run a brute-force oracle suite")
    p_oracle.add_argument("suite", help=f"one of {sorted(SUITES)}")
    p_oracle.set_defaults(fn=cmd_oracle)

    args = parser.parse_args(argv)
    for attr in ("quiet",):
        if not hasattr(args, attr):
            setattr(args, attr, False)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
