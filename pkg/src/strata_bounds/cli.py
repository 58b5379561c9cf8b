"""Command line front end.

Every subcommand reads one CSV (plus an optional schema sidecar), prints its
tables to stdout rounded to four decimals, and, given ``--out``, writes the
same tables as CSV and full-precision JSON. Output is a pure function of the
inputs: no timestamps, hostnames, or environment leak into the files, so
identical invocations produce identical bytes.

Failures map to exit codes: 2 for input or option problems, 3 for
estimation degeneracies, 4 for I/O errors, with a one-line JSON object on
stderr carrying the error class and message.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .domain import DEFAULT_LADDER
from .errors import ConfigError, DataValidationError, EstimationError
from .estimation import ADJUSTMENT_MODES
from .ingest import Dataset, infer_schema, load_csv, schema_from_json
from .loss import DEFAULT_GRID, P_VALUE_MODES
from .pipeline import (
    ApceBoundsAnalysis,
    BalanceAnalysis,
    FairnessAnalysis,
    FirstStageAnalysis,
    LossAnalysis,
    SensitivityAnalysis,
    UnconfoundedAnalysis,
)
from .synth import Discrimination, StratumModel, SynthConfig, generate, write_outputs


def _print_table(title: str, frame: pd.DataFrame) -> None:
    print(f"== {title} ==")
    if frame.empty:
        print("(no rows)")
    else:
        print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print()


def _json_records(frame: pd.DataFrame) -> list[dict]:
    records = frame.to_dict(orient="records")
    for record in records:
        for key, value in record.items():
            if isinstance(value, np.floating):
                value = float(value)
            if isinstance(value, np.integer):
                value = int(value)
            if isinstance(value, np.bool_):
                value = bool(value)
            if isinstance(value, float) and math.isnan(value):
                value = None
            record[key] = value
    return records


def _write_tables(out_dir: str | None, tables: dict[str, pd.DataFrame]) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = {}
    for name, frame in tables.items():
        frame.to_csv(out / f"{name}.csv", index=False)
        bundle[name] = _json_records(frame)
    (out / "tables.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")


def _load_dataset(args) -> Dataset:
    covariates = (
        schema_from_json(args.schema) if args.schema else infer_schema(args.input)
    )
    dataset, rejects = load_csv(args.input, covariates)
    if len(rejects):
        print(f"note: {len(rejects)} rows rejected", file=sys.stderr)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            rejects.to_jsonl(out / "rejected_rows.jsonl")
    return dataset


def _parse_eta(text: str):
    if text == "estimate":
        return "estimate"
    if text.startswith("fixed="):
        try:
            return float(text[len("fixed=") :])
        except ValueError:
            raise ConfigError(f"bad fixed eta: {text!r}") from None
    if text.startswith("sweep="):
        parts = text[len("sweep=") :].split(":")
        if len(parts) != 3:
            raise ConfigError("eta sweep must look like sweep=<lo>:<hi>:<step>")
        try:
            lo, hi, step = (float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"bad eta sweep: {text!r}") from None
        return (lo, hi, step)
    raise ConfigError(f"--eta must be estimate, fixed=<v>, or sweep=<lo>:<hi>:<step>, got {text!r}")


def _parse_grid(text: str) -> tuple[float, ...]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError("--grid must look like <lo>:<hi>:<step>")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad grid: {text!r}") from None
    if step <= 0 or hi < lo:
        raise ConfigError("grid needs lo <= hi and a positive step")
    return tuple(np.round(np.arange(lo, hi + step / 2, step), 10))


def _synth_config(args) -> SynthConfig:
    fields: dict = {}
    if args.config:
        fields = json.loads(Path(args.config).read_text())
        if not isinstance(fields, dict):
            raise ConfigError("simulate config must be a JSON object")
    if "strata" in fields:
        fields["strata"] = StratumModel(**fields["strata"])
    if fields.get("discrimination") is not None:
        fields["discrimination"] = Discrimination(**fields["discrimination"])
    for key in ("students_per_school", "cohorts", "leniency", "aptitude_probs"):
        if key in fields:
            fields[key] = tuple(fields[key])
    if args.seed is not None:
        fields["seed"] = args.seed
    try:
        return SynthConfig(ladder=DEFAULT_LADDER, **fields)
    except TypeError as err:
        raise ConfigError(f"bad simulate config: {err}") from None


def _cmd_simulate(args) -> int:
    cfg = _synth_config(args)
    dataset, truth = generate(cfg)
    write_outputs(dataset, truth, args.out, debug_labels=args.debug_labels)
    summary = pd.DataFrame(
        [
            {"quantity": f"stratum share {s}", "value": v}
            for s, v in truth.stratum_shares.items()
        ]
        + [
            {"quantity": f"compliance share {g}", "value": v}
            for g, v in truth.compliance_shares.items()
        ]
        + [{"quantity": "records", "value": float(len(dataset))}]
    )
    _print_table("simulated population", summary)
    return 0


def _cmd_balance(args) -> int:
    dataset = _load_dataset(args)
    analysis = BalanceAnalysis(reps=args.reps, seed=args.seed, threads=args.threads)
    analysis.fit(dataset)
    _print_table("covariate balance", analysis.table_)
    _write_tables(args.out, {"balance": analysis.table_})
    return 0


def _cmd_first_stage(args) -> int:
    dataset = _load_dataset(args)
    analysis = FirstStageAnalysis(
        adjust=args.adjust, reps=args.reps, seed=args.seed, threads=args.threads
    )
    analysis.fit(dataset)
    _print_table("first stage", analysis.table_)
    _write_tables(args.out, {"first_stage": analysis.table_})
    return 0


def _cmd_apce(args) -> int:
    dataset = _load_dataset(args)
    analysis = ApceBoundsAnalysis(
        adjust=args.adjust,
        reps=args.reps,
        seed=args.seed,
        threads=args.threads,
        min_cell=args.min_cell,
    )
    analysis.fit(dataset)
    _print_table("stratum intervals (aggregates)", analysis.aggregate_table_)
    tables = {
        "apce_cells": analysis.cell_table_,
        "apce_aggregates": analysis.aggregate_table_,
        "apce_skipped": analysis.skipped_,
    }
    if args.points:
        points = UnconfoundedAnalysis(
            reps=args.reps, seed=args.seed, threads=args.threads
        ).fit(dataset)
        _print_table("point estimates (unconfounded strata)", points.table_)
        tables["apce_points"] = points.table_
    _write_tables(args.out, tables)
    return 0


def _cmd_loss(args) -> int:
    dataset = _load_dataset(args)
    analysis = LossAnalysis(
        adjust=args.adjust,
        reps=args.reps,
        seed=args.seed,
        threads=args.threads,
        grid=_parse_grid(args.grid) if args.grid else DEFAULT_GRID,
        fp_sign=args.fp_sign,
        p_mode=args.p_mode,
    )
    analysis.fit(dataset)
    _print_table("loss comparison", analysis.table_)
    _write_tables(args.out, {"loss": analysis.table_})
    return 0


def _cmd_sensitivity(args) -> int:
    dataset = _load_dataset(args)
    analysis = SensitivityAnalysis(
        eta=_parse_eta(args.eta),
        adjust=args.adjust,
        reps=args.reps,
        seed=args.seed,
        threads=args.threads,
    )
    analysis.fit(dataset)
    tables = {}
    if hasattr(analysis, "eta_table_"):
        _print_table("direct effect", analysis.eta_table_)
        tables["sensitivity_eta"] = analysis.eta_table_
    _print_table("relaxed intervals", analysis.table_)
    tables["sensitivity"] = analysis.table_
    _write_tables(args.out, tables)
    return 0


def _cmd_fairness(args) -> int:
    dataset = _load_dataset(args)
    analysis = FairnessAnalysis(
        attribute=args.attribute, reps=args.reps, seed=args.seed, threads=args.threads
    )
    analysis.fit(dataset)
    _print_table("fairness contrasts", analysis.table_)
    _write_tables(args.out, {"fairness": analysis.table_})
    return 0


def _cmd_report(args) -> int:
    dataset = _load_dataset(args)
    common = {"reps": args.reps, "seed": args.seed, "threads": args.threads}
    tables: dict[str, pd.DataFrame] = {}

    if dataset.covariate_columns:
        balance = BalanceAnalysis(**common).fit(dataset)
        tables["balance"] = balance.table_
        _print_table("covariate balance", balance.table_)

    first = FirstStageAnalysis(adjust=args.adjust, **common).fit(dataset)
    tables["first_stage"] = first.table_
    _print_table("first stage", first.table_)

    apce = ApceBoundsAnalysis(adjust=args.adjust, min_cell=args.min_cell, **common)
    apce.fit(dataset)
    tables["apce_cells"] = apce.cell_table_
    tables["apce_aggregates"] = apce.aggregate_table_
    tables["apce_skipped"] = apce.skipped_
    _print_table("stratum intervals (aggregates)", apce.aggregate_table_)

    loss = LossAnalysis(adjust=args.adjust, **common).fit(dataset)
    tables["loss"] = loss.table_
    _print_table("loss comparison", loss.table_)

    sens = SensitivityAnalysis(eta="estimate", adjust=args.adjust, **common)
    sens.fit(dataset)
    tables["sensitivity_eta"] = sens.eta_table_
    tables["sensitivity"] = sens.table_
    _print_table("direct effect", sens.eta_table_)
    _print_table("relaxed intervals", sens.table_)

    if dataset.covariate_columns:
        points = UnconfoundedAnalysis(**common).fit(dataset)
        tables["apce_points"] = points.table_
        _print_table("point estimates (unconfounded strata)", points.table_)

    if args.attribute:
        fair = FairnessAnalysis(attribute=args.attribute, **common).fit(dataset)
        tables["fairness"] = fair.table_
        _print_table("fairness contrasts", fair.table_)

    _write_tables(args.out, tables)
    return 0


def _add_common(sub: argparse.ArgumentParser, adjust: bool = True) -> None:
    sub.add_argument("--input", required=True, help="input CSV")
    sub.add_argument("--schema", default=None, help="covariate schema JSON (inferred if absent)")
    sub.add_argument("--out", default=None, help="directory for CSV/JSON outputs")
    sub.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    sub.add_argument("--reps", type=int, default=1000, help="bootstrap replications")
    sub.add_argument("--threads", type=int, default=None, help="bootstrap threads")
    if adjust:
        sub.add_argument(
            "--adjust", choices=ADJUSTMENT_MODES, default="raw", help="regression adjustment"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="strata-bounds",
        description="Stratum-level evaluation of track recommendations around score cutoffs",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="generate synthetic data with known truth")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--config", default=None, help="generator config JSON")
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--debug-labels", action="store_true", help="also write latent labels")
    sim.set_defaults(handler=_cmd_simulate)

    bal = commands.add_parser("balance", help="covariate balance across the arms")
    _add_common(bal, adjust=False)
    bal.set_defaults(handler=_cmd_balance)

    fs = commands.add_parser("first_stage", help="cutoff effect on the recommendation")
    _add_common(fs)
    fs.set_defaults(handler=_cmd_first_stage)

    apce = commands.add_parser("apce", help="stratum intervals per cell and aggregate")
    _add_common(apce)
    apce.add_argument("--min-cell", type=int, default=30, help="smallest estimable cell")
    apce.add_argument(
        "--points", action="store_true", help="also report unconfoundedness point estimates"
    )
    apce.set_defaults(handler=_cmd_apce)

    loss = commands.add_parser("loss", help="weighted misclassification comparison")
    _add_common(loss)
    loss.add_argument("--grid", default=None, help="weight grid <lo>:<hi>:<step>")
    loss.add_argument("--fp-sign", type=int, choices=(1, -1), default=1)
    loss.add_argument("--p-mode", choices=P_VALUE_MODES, default="normal")
    loss.set_defaults(handler=_cmd_loss)

    sens = commands.add_parser("sensitivity", help="intervals with a relaxed exclusion restriction")
    _add_common(sens)
    sens.add_argument(
        "--eta",
        default="estimate",
        help="estimate | fixed=<v> | sweep=<lo>:<hi>:<step>",
    )
    sens.set_defaults(handler=_cmd_sensitivity)

    fair = commands.add_parser("fairness", help="within-stratum attribute contrasts")
    _add_common(fair, adjust=False)
    fair.add_argument("--attribute", required=True, help="binary covariate naming the groups")
    fair.set_defaults(handler=_cmd_fairness)

    rep = commands.add_parser("report", help="run every analysis the dataset supports")
    _add_common(rep)
    rep.add_argument("--min-cell", type=int, default=30)
    rep.add_argument("--attribute", default=None, help="include fairness contrasts")
    rep.set_defaults(handler=_cmd_report)

    return parser


def _emit_error(err: Exception) -> None:
    payload = {"error": type(err).__name__, "message": str(err)}
    extra = getattr(err, "payload", None)
    if extra:
        for key, value in extra.items():
            payload.setdefault(key, repr(value))
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except DataValidationError as err:
        _emit_error(err)
        return 2
    except EstimationError as err:
        _emit_error(err)
        return 3
    except OSError as err:
        _emit_error(err)
        return 4


if __name__ == "__main__":
    sys.exit(main())
