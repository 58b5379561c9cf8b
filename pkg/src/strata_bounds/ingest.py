"""CSV ingestion: row validation, reject reporting, and cell partitioning.

The input format is one row per student with the required columns
``student_id, school_id, cohort, track, score, R, Y`` followed by the
declared covariate columns. Rows that fail validation are collected into a
reject report (one ``{"line": ..., "reason": ...}`` object per row when
serialized); only a header that does not match the schema is a hard error.

Categorical covariates are one-hot expanded with the first (sorted) level as
the reference. A real covariate may declare a paired missing indicator, in
which case missing values set the indicator and are imputed to zero;
otherwise a missing value rejects the row.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .domain import (
    ARM_AT,
    ARM_BELOW,
    ARM_ELSE,
    COL_Z,
    COL_ZTILDE,
    DEFAULT_LADDER,
    REQUIRED_COLUMNS,
    CellKey,
    StudentRecord,
    TrackLadder,
    compute_z_tilde,
)
from .errors import (
    ConfigError,
    HeaderMismatch,
    NotUpgradeable,
    ScoreOutOfRange,
)

MISSING_TOKENS = {"", "NA", "NaN", "nan"}

COVARIATE_KINDS = ("binary", "categorical", "real")


@dataclass(frozen=True)
class CovariateSpec:
    """Declared covariate column: name, kind, and the missing-value policy."""

    name: str
    kind: str
    missing_indicator: bool = False

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise ConfigError(f"unknown covariate kind: {self.kind}", name=self.name)
        if self.missing_indicator and self.kind != "real":
            raise ConfigError(
                "missing indicators are only supported for real covariates",
                name=self.name,
            )


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str


@dataclass
class RejectReport:
    rows: list[RejectedRow] = field(default_factory=list)

    def add(self, line: int, reason: str) -> None:
        self.rows.append(RejectedRow(line, reason))

    def __len__(self) -> int:
        return len(self.rows)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows:
                fh.write(json.dumps({"line": row.line, "reason": row.reason}) + "\n")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated analysis table plus the schema needed to interpret it.

    ``frame`` carries the required columns, the derived instrument columns
    (``z``, ``z_tilde``), and the expanded numeric covariate columns listed
    in ``covariate_columns``.
    """

    frame: pd.DataFrame
    covariates: tuple[CovariateSpec, ...]
    covariate_columns: tuple[str, ...]
    ladder: TrackLadder

    def __len__(self) -> int:
        return len(self.frame)

    def near_cutoff(self) -> "Dataset":
        return near_cutoff_subset(self)

    def cells(self) -> list[tuple[CellKey, pd.DataFrame]]:
        return partition_cells(self)


def _parse_required(raw: dict, ladder: TrackLadder) -> dict:
    out: dict[str, object] = {}
    for key in ("student_id", "school_id", "cohort"):
        value = (raw.get(key) or "").strip()
        if not value:
            raise ValueError(f"missing {key}")
        out[key] = value
    track = (raw.get("track") or "").strip()
    spec = ladder.track(track)  # raises ConfigError on unknown ids
    if spec.is_top:
        raise NotUpgradeable(f"track {track} has no higher track", track=track)
    out["track"] = track
    score_text = (raw.get("score") or "").strip()
    try:
        score = int(score_text)
    except ValueError:
        raise ValueError(f"score not an integer: {score_text!r}") from None
    out["score"] = score
    for key in ("R", "Y"):
        value = (raw.get(key) or "").strip()
        if value not in ("0", "1"):
            raise ValueError(f"{key} not in {{0, 1}}: {value!r}")
        out[key] = int(value)
    return out


def _parse_covariate(spec: CovariateSpec, raw: dict) -> object:
    text = (raw.get(spec.name) or "").strip()
    if text in MISSING_TOKENS:
        if spec.kind == "real" and spec.missing_indicator:
            return None
        raise ValueError(f"covariate {spec.name} missing")
    if spec.kind == "binary":
        if text not in ("0", "1"):
            raise ValueError(f"covariate {spec.name} not binary: {text!r}")
        return int(text)
    if spec.kind == "real":
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"covariate {spec.name} not numeric: {text!r}") from None
    return text  # categorical: any non-missing token


def load_csv(
    path: str | Path,
    covariates: tuple[CovariateSpec, ...] = (),
    ladder: TrackLadder = DEFAULT_LADDER,
) -> tuple[Dataset, RejectReport]:
    """Read and validate an input CSV; invalid rows land in the reject report."""
    path = Path(path)
    report = RejectReport()
    rows: list[dict] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        expected = list(REQUIRED_COLUMNS) + [c.name for c in covariates]
        missing = [c for c in expected if c not in header]
        if missing:
            raise HeaderMismatch(
                f"missing columns: {', '.join(missing)}", missing=missing, header=header
            )
        for line, raw in enumerate(reader, start=2):
            try:
                parsed = _parse_required(raw, ladder)
                for spec in covariates:
                    parsed[spec.name] = _parse_covariate(spec, raw)
                # Arm assignment validates the score range.
                ladder.assign_arm(parsed["score"], parsed["track"])
            except (ValueError, ConfigError, NotUpgradeable, ScoreOutOfRange) as err:
                report.add(line, str(err))
                continue
            rows.append(parsed)
    columns = list(REQUIRED_COLUMNS) + [c.name for c in covariates]
    raw_frame = pd.DataFrame(rows, columns=columns)
    return assemble_dataset(raw_frame, covariates, ladder), report


def assemble_dataset(
    raw_frame: pd.DataFrame,
    covariates: tuple[CovariateSpec, ...] = (),
    ladder: TrackLadder = DEFAULT_LADDER,
) -> Dataset:
    """Build a Dataset from already-validated raw rows.

    Adds the instrument arm and leniency proxy, expands covariates, and
    normalizes dtypes. Shared between the CSV loader and the generator.
    """
    frame = raw_frame.copy()
    for key in ("student_id", "school_id", "cohort", "track"):
        frame[key] = frame[key].astype(str)
    frame["score"] = frame["score"].astype(int)
    frame["R"] = frame["R"].astype(int)
    frame["Y"] = frame["Y"].astype(int)

    if len(frame):
        cutoffs = frame["track"].map(
            {t.track_id: t.cutoff for t in ladder.tracks if t.cutoff is not None}
        )
        score = frame["score"].to_numpy()
        arm = np.where(
            score == cutoffs.to_numpy(),
            ARM_AT,
            np.where(score == cutoffs.to_numpy() - 1, ARM_BELOW, ARM_ELSE),
        )
        frame[COL_Z] = arm
        frame[COL_ZTILDE] = compute_z_tilde(frame, ladder)
    else:
        frame[COL_Z] = pd.Series(dtype=str)
        frame[COL_ZTILDE] = pd.Series(dtype=float)

    expanded: list[str] = []
    for spec in covariates:
        if spec.kind == "binary":
            frame[spec.name] = frame[spec.name].astype(float)
            expanded.append(spec.name)
        elif spec.kind == "real":
            values = pd.to_numeric(frame[spec.name], errors="coerce")
            if spec.missing_indicator:
                indicator = f"{spec.name}__missing"
                frame[indicator] = values.isna().astype(float)
                frame[spec.name] = values.fillna(0.0)
                expanded.extend([spec.name, indicator])
            else:
                frame[spec.name] = values.astype(float)
                expanded.append(spec.name)
        else:
            levels = sorted(frame[spec.name].astype(str).unique()) if len(frame) else []
            for level in levels[1:]:  # first sorted level is the reference
                col = f"{spec.name}__{level}"
                frame[col] = (frame[spec.name].astype(str) == level).astype(float)
                expanded.append(col)
    return Dataset(
        frame=frame.reset_index(drop=True),
        covariates=tuple(covariates),
        covariate_columns=tuple(expanded),
        ladder=ladder,
    )


def near_cutoff_subset(dataset: Dataset) -> Dataset:
    """Keep only the two instrument arms; the third group plays no role."""
    mask = dataset.frame[COL_Z].isin([ARM_AT, ARM_BELOW])
    return Dataset(
        frame=dataset.frame.loc[mask].reset_index(drop=True),
        covariates=dataset.covariates,
        covariate_columns=dataset.covariate_columns,
        ladder=dataset.ladder,
    )


def partition_cells(dataset: Dataset) -> list[tuple[CellKey, pd.DataFrame]]:
    """Split into (cohort, track) cells; every row lands in exactly one."""
    order = {t.track_id: i for i, t in enumerate(dataset.ladder.tracks)}
    cells = [
        (CellKey(cohort=str(cohort), track=str(track)), sub)
        for (cohort, track), sub in dataset.frame.groupby(["cohort", "track"], sort=False)
    ]
    cells.sort(key=lambda item: (order.get(item[0].track, len(order)), item[0].cohort))
    return cells


def records_to_frame(records: list[StudentRecord]) -> pd.DataFrame:
    """Raw input frame from typed records (covariates become columns)."""
    rows = []
    for rec in records:
        row = {
            "student_id": rec.student_id,
            "school_id": rec.school_id,
            "cohort": rec.cohort,
            "track": rec.track,
            "score": rec.score,
            "R": rec.recommendation,
            "Y": rec.completion,
        }
        row.update(dict(rec.covariates))
        rows.append(row)
    return pd.DataFrame(rows)


def schema_to_json(covariates: tuple[CovariateSpec, ...], path: str | Path) -> None:
    payload = [
        {"name": c.name, "kind": c.kind, "missing_indicator": c.missing_indicator}
        for c in covariates
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def schema_from_json(path: str | Path) -> tuple[CovariateSpec, ...]:
    payload = json.loads(Path(path).read_text())
    return tuple(
        CovariateSpec(
            name=item["name"],
            kind=item["kind"],
            missing_indicator=bool(item.get("missing_indicator", False)),
        )
        for item in payload
    )


def infer_schema(path: str | Path) -> tuple[CovariateSpec, ...]:
    """Guess covariate kinds from the data when no schema is given.

    Columns beyond the required ones are covariates: values within {0, 1}
    are binary, other numeric columns real, everything else categorical.
    """
    sample = pd.read_csv(path, dtype=str, keep_default_na=False, nrows=5000)
    specs = []
    for name in sample.columns:
        if name in REQUIRED_COLUMNS:
            continue
        values = sample[name].str.strip()
        non_missing = values[~values.isin(MISSING_TOKENS)]
        if non_missing.isin(["0", "1"]).all() and len(non_missing):
            specs.append(CovariateSpec(name, "binary"))
            continue
        numeric = pd.to_numeric(non_missing, errors="coerce")
        if len(non_missing) and not numeric.isna().any():
            has_missing = len(non_missing) < len(values)
            specs.append(CovariateSpec(name, "real", missing_indicator=has_missing))
        else:
            specs.append(CovariateSpec(name, "categorical"))
    return tuple(specs)
