"""Analysis pipelines: one estimator class per report table.

Each class follows the scikit-learn convention far enough to be familiar:
constructor arguments are stored verbatim, ``fit`` consumes a ``Dataset``
and leaves result tables on trailing-underscore attributes, and the
instance is returned for chaining. There is nothing to ``predict``; these
are estimators of population quantities, not of labels.

All fits restrict to the near-cutoff sample (the two instrument arms) and
cluster every bootstrap on schools within cohorts. Thread counts default
to the STRATA_BOUNDS_THREADS environment variable.
"""

from __future__ import annotations

import os

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from .bounds import (
    CellEstimate,
    aggregate_intervals,
    estimate_cell_with_se,
)
from .domain import ALL_STRATA, track_group
from .errors import ConfigError, EstimationError
from .estimation import ADJUSTMENT_MODES, AdjustmentSpec, fit_first_stage
from .inference import (
    BootstrapConfig,
    balance_test,
    block_bootstrap,
    seed_salt,
)
from .ingest import Dataset, partition_cells
from .loss import DEFAULT_GRID, loss_curve
from .sensitivity import estimate_noer_with_se, eta_sweep, noer_cell_estimate
from .unconfounded import apce_points_with_se, fairness_table

POOLED_LABEL = "all"


def resolve_threads(threads: int | None = None) -> int:
    """Explicit argument wins; otherwise STRATA_BOUNDS_THREADS, default 1."""
    if threads is not None:
        if threads < 1:
            raise ConfigError("threads must be positive")
        return int(threads)
    raw = os.environ.get("STRATA_BOUNDS_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"STRATA_BOUNDS_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("STRATA_BOUNDS_THREADS must be positive")
    return value


def adjustment_for(dataset: Dataset, mode: str) -> AdjustmentSpec:
    if mode not in ADJUSTMENT_MODES:
        raise ConfigError(f"unknown adjustment mode: {mode!r}", allowed=ADJUSTMENT_MODES)
    columns = dataset.covariate_columns if mode == "full" else ()
    return AdjustmentSpec(mode=mode, covariate_columns=columns)


def family_frames(dataset: Dataset) -> list[tuple[str, pd.DataFrame]]:
    """Pooled frames per track family, plus the full pooled sample.

    Families are ordered vocational, academic, other (only those present),
    with the all-tracks pool last.
    """
    near = dataset.near_cutoff().frame
    groups: list[tuple[str, pd.DataFrame]] = []
    family = near["track"].map(track_group)
    for name in ("vocational", "academic", "other"):
        mask = family == name
        if mask.any():
            groups.append((name, near[mask.to_numpy()]))
    groups.append((POOLED_LABEL, near))
    return groups


def _bootstrap_config(reps: int, seed: int, threads: int | None) -> BootstrapConfig:
    return BootstrapConfig(replications=reps, seed=seed, threads=resolve_threads(threads))


class BalanceAnalysis(BaseEstimator):
    """Arm balance of every covariate column on the near-cutoff sample."""

    def __init__(self, reps: int = 1000, seed: int = 0, threads: int | None = None):
        self.reps = reps
        self.seed = seed
        self.threads = threads

    def fit(self, dataset: Dataset) -> "BalanceAnalysis":
        near = dataset.near_cutoff()
        if not near.covariate_columns:
            raise ConfigError("dataset has no covariates to balance-test")
        cfg = _bootstrap_config(self.reps, self.seed, self.threads)
        self.table_ = balance_test(
            near.frame, near.covariate_columns, cfg, salt=seed_salt("balance")
        )
        return self


class FirstStageAnalysis(BaseEstimator):
    """Effect of scoring at the cutoff on the upgrade recommendation."""

    def __init__(
        self,
        adjust: str = "raw",
        reps: int = 1000,
        seed: int = 0,
        threads: int | None = None,
    ):
        self.adjust = adjust
        self.reps = reps
        self.seed = seed
        self.threads = threads

    def fit(self, dataset: Dataset) -> "FirstStageAnalysis":
        adj = adjustment_for(dataset, self.adjust)
        cfg = _bootstrap_config(self.reps, self.seed, self.threads)
        rows = []
        near = dataset.near_cutoff()
        jobs = [(key.label(), frame) for key, frame in partition_cells(near)]
        jobs += family_frames(dataset)
        for label, frame in jobs:
            try:
                fit = fit_first_stage(frame, adj)
            except EstimationError:
                continue
            boot = block_bootstrap(
                frame,
                lambda f: np.array([fit_first_stage(f, adj).delta]),
                cfg,
                salt=seed_salt("first_stage", label),
            )
            rows.append(
                {
                    "group": label,
                    "n_at": fit.n_at,
                    "n_below": fit.n_below,
                    "delta": fit.delta,
                    "se": float(boot.se[0]),
                    "n_failed_replicates": boot.n_failed,
                }
            )
        self.table_ = pd.DataFrame(rows)
        return self


class ApceBoundsAnalysis(BaseEstimator):
    """Nonparametric interval for the complier share of every stratum.

    Cells are cohort-track pairs; aggregates pool cohorts within a track,
    tracks within a family, and everything. Aggregate intervals recombine
    the per-cell numerators and denominator bounds with population-share
    weights inside every bootstrap replicate.
    """

    def __init__(
        self,
        adjust: str = "raw",
        reps: int = 1000,
        seed: int = 0,
        threads: int | None = None,
        strata: tuple[str, ...] = ALL_STRATA,
        force_upper_one: bool = True,
        min_cell: int = 30,
    ):
        self.adjust = adjust
        self.reps = reps
        self.seed = seed
        self.threads = threads
        self.strata = strata
        self.force_upper_one = force_upper_one
        self.min_cell = min_cell

    def fit(self, dataset: Dataset) -> "ApceBoundsAnalysis":
        adj = adjustment_for(dataset, self.adjust)
        cfg = _bootstrap_config(self.reps, self.seed, self.threads)
        near = dataset.near_cutoff()
        fitted = []  # (key, estimates, boot)
        skipped = []
        for key, frame in partition_cells(near):
            label = key.label()
            if len(frame) < self.min_cell:
                skipped.append({"group": label, "reason": f"fewer than {self.min_cell} records"})
                continue
            try:
                estimates, boot = estimate_cell_with_se(
                    frame,
                    adj,
                    cfg,
                    self.strata,
                    self.force_upper_one,
                    label=label,
                    salt=seed_salt("apce", label),
                )
            except EstimationError as err:
                skipped.append({"group": label, "reason": str(err)})
                continue
            fitted.append((key, estimates, boot))
        if not fitted:
            raise EstimationError("no cell was large and regular enough to estimate")

        self.cell_table_ = pd.DataFrame([e.as_row() for _, ests, _ in fitted for e in ests])
        self.skipped_ = pd.DataFrame(skipped, columns=["group", "reason"])

        pools: dict[str, list[int]] = {}
        for i, (key, _, _) in enumerate(fitted):
            pools.setdefault(key.track, []).append(i)
            pools.setdefault(track_group(key.track), []).append(i)
            pools.setdefault(POOLED_LABEL, []).append(i)
        agg_rows = []
        for label, idx in pools.items():
            for j, stratum in enumerate(self.strata):
                members = [fitted[i][1][j] for i in idx]
                blocks = [fitted[i][2].replicates[:, 5 * j : 5 * (j + 1)] for i in idx]
                agg = aggregate_intervals(
                    members, label, self.force_upper_one, replicate_blocks=blocks
                )
                agg_rows.append(agg.as_row())
        self.aggregate_table_ = pd.DataFrame(agg_rows)
        return self


class LossAnalysis(BaseEstimator):
    """Arm comparison of weighted misclassification over a weight grid."""

    def __init__(
        self,
        adjust: str = "raw",
        reps: int = 1000,
        seed: int = 0,
        threads: int | None = None,
        grid: tuple[float, ...] = DEFAULT_GRID,
        fp_sign: int = 1,
        p_mode: str = "normal",
    ):
        self.adjust = adjust
        self.reps = reps
        self.seed = seed
        self.threads = threads
        self.grid = grid
        self.fp_sign = fp_sign
        self.p_mode = p_mode

    def fit(self, dataset: Dataset) -> "LossAnalysis":
        adj = adjustment_for(dataset, self.adjust)
        cfg = _bootstrap_config(self.reps, self.seed, self.threads)
        curves = []
        for label, frame in family_frames(dataset):
            try:
                curve = loss_curve(
                    frame,
                    adj,
                    cfg,
                    grid=tuple(self.grid),
                    fp_sign=self.fp_sign,
                    p_mode=self.p_mode,
                    salt=seed_salt("loss", label),
                    label=label,
                )
            except EstimationError:
                continue
            curves.append(curve)
        if not curves:
            raise EstimationError("no group admitted a loss comparison")
        self.table_ = pd.concat(curves, ignore_index=True)
        return self


class SensitivityAnalysis(BaseEstimator):
    """Bounds with the exclusion restriction relaxed by a direct effect.

    ``eta="estimate"`` estimates the direct effect from never-upgraded
    students and bootstraps it jointly with the bounds; ``eta=<float>``
    fixes it; ``eta=(a, b, step)`` sweeps a grid without SEs.
    """

    def __init__(
        self,
        eta="estimate",
        adjust: str = "raw",
        reps: int = 1000,
        seed: int = 0,
        threads: int | None = None,
        strata: tuple[str, ...] = ALL_STRATA,
        force_upper_one: bool = True,
    ):
        self.eta = eta
        self.adjust = adjust
        self.reps = reps
        self.seed = seed
        self.threads = threads
        self.strata = strata
        self.force_upper_one = force_upper_one

    def fit(self, dataset: Dataset) -> "SensitivityAnalysis":
        adj = adjustment_for(dataset, self.adjust)
        groups = family_frames(dataset)
        if isinstance(self.eta, tuple):
            lo, hi, step = self.eta
            if step <= 0 or hi < lo:
                raise ConfigError("eta sweep needs lo <= hi and a positive step")
            grid = tuple(np.round(np.arange(lo, hi + step / 2, step), 10))
            self.table_ = pd.concat(
                [
                    eta_sweep(frame, adj, grid, self.strata, self.force_upper_one, label)
                    for label, frame in groups
                ],
                ignore_index=True,
            )
            return self

        cfg = _bootstrap_config(self.reps, self.seed, self.threads)
        eta_rows = []
        rows = []
        for label, frame in groups:
            try:
                if self.eta == "estimate":
                    eta_est, estimates, _ = estimate_noer_with_se(
                        frame,
                        adj,
                        dataset.covariate_columns,
                        cfg,
                        self.strata,
                        self.force_upper_one,
                        label=label,
                        salt=seed_salt("sensitivity", label),
                    )
                    eta_rows.append(
                        {
                            "group": label,
                            "eta": eta_est.eta,
                            "se": eta_est.se,
                            "mean_above": eta_est.mean_above,
                            "weighted_mean_below": eta_est.weighted_mean_below,
                            "n_above": eta_est.n_above,
                            "n_below": eta_est.n_below,
                            "flags": ";".join(sorted(k for k, v in eta_est.flags.items() if v)),
                        }
                    )
                else:
                    eta_value = float(self.eta)
                    estimates = noer_cell_estimate(
                        frame, adj, eta_value, self.strata, self.force_upper_one, label=label
                    )
                    eta_rows.append({"group": label, "eta": eta_value, "se": np.nan})
            except EstimationError:
                continue
            rows.extend(est.as_row() for est in estimates)
        if not rows:
            raise EstimationError("no group admitted the sensitivity analysis")
        self.eta_table_ = pd.DataFrame(eta_rows)
        self.table_ = pd.DataFrame(rows)
        return self


class UnconfoundedAnalysis(BaseEstimator):
    """Point identification under unconfounded stratum membership."""

    def __init__(
        self,
        reps: int = 1000,
        seed: int = 0,
        threads: int | None = None,
        strata: tuple[str, ...] = ALL_STRATA,
    ):
        self.reps = reps
        self.seed = seed
        self.threads = threads
        self.strata = strata

    def fit(self, dataset: Dataset) -> "UnconfoundedAnalysis":
        if not dataset.covariate_columns:
            raise ConfigError("principal scores need covariates")
        cfg = _bootstrap_config(self.reps, self.seed, self.threads)
        rows = []
        for label, frame in family_frames(dataset):
            try:
                points, ses, boot = apce_points_with_se(
                    frame,
                    dataset.covariate_columns,
                    cfg,
                    self.strata,
                    salt=seed_salt("unconfounded", label),
                )
            except EstimationError:
                continue
            for stratum in self.strata:
                rows.append(
                    {
                        "group": label,
                        "stratum": stratum,
                        "n": len(frame),
                        "estimate": points[stratum],
                        "se": ses[stratum],
                        "n_failed_replicates": boot.n_failed,
                    }
                )
        if not rows:
            raise EstimationError("no group admitted the point analysis")
        self.table_ = pd.DataFrame(rows)
        return self


class FairnessAnalysis(BaseEstimator):
    """Within-stratum upgrade-rate contrasts across a binary attribute."""

    def __init__(
        self,
        attribute: str,
        reps: int = 1000,
        seed: int = 0,
        threads: int | None = None,
        strata: tuple[str, ...] = ALL_STRATA,
    ):
        self.attribute = attribute
        self.reps = reps
        self.seed = seed
        self.threads = threads
        self.strata = strata

    def fit(self, dataset: Dataset) -> "FairnessAnalysis":
        if self.attribute not in dataset.frame.columns:
            raise ConfigError(f"attribute column {self.attribute!r} not in dataset")
        cfg = _bootstrap_config(self.reps, self.seed, self.threads)
        tables = []
        for label, frame in family_frames(dataset):
            try:
                tables.append(
                    fairness_table(
                        frame,
                        self.attribute,
                        dataset.covariate_columns,
                        cfg,
                        self.strata,
                        salt=seed_salt("fairness", label),
                        label=label,
                    )
                )
            except EstimationError:
                continue
        if not tables:
            raise EstimationError("no group admitted the fairness analysis")
        self.table_ = pd.concat(tables, ignore_index=True)
        return self
