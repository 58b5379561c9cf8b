"""Point identification under unconfounded recommendations.

If, given covariates, the recommendation is as good as random with respect
to potential completion, stratum membership probabilities (principal
scores) are estimable from two outcome models: completion given an upgrade
and completion given none. Reweighting the first-stage arm contrast by a
stratum's normalized score recovers that stratum's effect as a point, and
contrasting the reweighted upgrade rates between two groups of students
(scores fit separately per group) measures whether equally-situated members
of one group are upgraded more often.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .domain import ARM_AT, ARM_BELOW, ALL_STRATA, COL_Z, Stratum
from .errors import ConfigError, EmptyStratum, EstimationError
from .estimation import LogisticFit, fit_logistic, logistic_design
from .inference import BootstrapConfig, BootstrapResult, block_bootstrap

SCORE_FLOOR = 1e-6


@dataclass
class PrincipalScores:
    """Per-record stratum membership probabilities for one sample."""

    e_responsive: np.ndarray
    e_always_high: np.ndarray
    e_always_low: np.ndarray
    model_upgraded: LogisticFit
    model_not_upgraded: LogisticFit
    clamp_count: int
    flags: dict

    def for_stratum(self, stratum: str) -> np.ndarray:
        if stratum == Stratum.RESPONSIVE.value:
            return self.e_responsive
        if stratum == Stratum.ALWAYS_HIGH.value:
            return self.e_always_high
        if stratum == Stratum.ALWAYS_LOW.value:
            return self.e_always_low
        raise ConfigError(f"unknown stratum: {stratum}")


def fit_principal_scores(
    frame: pd.DataFrame, covariate_columns: tuple[str, ...]
) -> PrincipalScores:
    """Fit the two completion models and derive stratum scores.

    The responsive score is the difference of the two fitted completion
    probabilities, clamped at zero record by record (clamp count reported).
    """
    r = frame["R"].to_numpy()
    upgraded = frame.loc[r == 1]
    not_upgraded = frame.loc[r == 0]
    if len(upgraded) == 0:
        raise EstimationError("no upgraded records to fit a completion model on")
    if len(not_upgraded) == 0:
        raise EstimationError("no non-upgraded records to fit a completion model on")
    X_up, names = logistic_design(upgraded, covariate_columns)
    X_not, _ = logistic_design(not_upgraded, covariate_columns)
    model_upgraded = fit_logistic(X_up, upgraded["Y"].to_numpy(dtype=float), names=names)
    model_not = fit_logistic(X_not, not_upgraded["Y"].to_numpy(dtype=float), names=names)
    X_all, _ = logistic_design(frame, covariate_columns)
    p_up = model_upgraded.predict_proba(X_all)
    p_not = model_not.predict_proba(X_all)
    raw_responsive = p_up - p_not
    clamp_count = int((raw_responsive < 0.0).sum())
    return PrincipalScores(
        e_responsive=np.maximum(raw_responsive, 0.0),
        e_always_high=p_not,
        e_always_low=1.0 - p_up,
        model_upgraded=model_upgraded,
        model_not_upgraded=model_not,
        clamp_count=clamp_count,
        flags={
            "responsive_clamped": clamp_count > 0,
            "ridge": model_upgraded.ridge or model_not.ridge,
            "degenerate": model_upgraded.degenerate or model_not.degenerate,
        },
    )


def stratum_weights(scores: PrincipalScores, stratum: str) -> np.ndarray:
    """Scores normalized to mean one over the full sample they were built on."""
    e = scores.for_stratum(stratum)
    mean = float(e.mean())
    if mean < SCORE_FLOOR:
        raise EmptyStratum(
            f"stratum {stratum} has numerically no mass (mean score {mean:.3g})",
            stratum=stratum,
        )
    return e / mean


def apce_point(frame: pd.DataFrame, scores: PrincipalScores, stratum: str) -> float:
    """Score-weighted arm contrast of upgrade rates for one stratum."""
    w = stratum_weights(scores, stratum)
    z = frame[COL_Z].to_numpy()
    r = frame["R"].to_numpy(dtype=float)
    at = z == ARM_AT
    below = z == ARM_BELOW
    if not at.any() or not below.any():
        raise EstimationError("both instrument arms are required")
    wr = w * r
    return float(wr[at].mean() - wr[below].mean())


def apce_points(
    frame: pd.DataFrame,
    covariate_columns: tuple[str, ...],
    strata: tuple[str, ...] = ALL_STRATA,
) -> dict[str, float]:
    scores = fit_principal_scores(frame, covariate_columns)
    return {s: apce_point(frame, scores, s) for s in strata}


def apce_points_with_se(
    frame: pd.DataFrame,
    covariate_columns: tuple[str, ...],
    cfg: BootstrapConfig,
    strata: tuple[str, ...] = ALL_STRATA,
    salt: int = 0,
) -> tuple[dict[str, float], dict[str, float], BootstrapResult]:
    """Points and bootstrap SEs; score models are refit in every replicate."""

    def statistic(f: pd.DataFrame) -> np.ndarray:
        values = apce_points(f, covariate_columns, strata)
        return np.array([values[s] for s in strata])

    boot = block_bootstrap(frame, statistic, cfg, salt=salt)
    points = dict(zip(strata, (float(v) for v in boot.estimate)))
    ses = dict(zip(strata, (float(v) for v in boot.se)))
    return points, ses, boot


def group_delta(
    frame: pd.DataFrame,
    attribute: str,
    covariate_columns: tuple[str, ...],
    stratum: str,
    arm: str,
) -> float:
    """Score-weighted upgrade-rate gap between attribute groups in one arm.

    Scores are fit separately within each group and normalized within the
    group, so the contrast compares students at the same stratum membership
    odds. Swapping the group coding flips the sign exactly.
    """
    if arm not in (ARM_AT, ARM_BELOW):
        raise ConfigError(f"arm must be {ARM_AT!r} or {ARM_BELOW!r}")
    values = frame[attribute].to_numpy(dtype=float)
    if not np.isin(values, (0.0, 1.0)).all():
        raise ConfigError(f"attribute {attribute} must be binary")
    # the attribute is constant within each side; it must not enter the design
    covariate_columns = tuple(c for c in covariate_columns if c != attribute)
    sides = {}
    for flag in (1.0, 0.0):
        sub = frame.loc[values == flag]
        if len(sub) == 0:
            raise EstimationError(f"attribute group {attribute}={int(flag)} is empty")
        scores = fit_principal_scores(sub, covariate_columns)
        w = stratum_weights(scores, stratum)
        z = sub[COL_Z].to_numpy()
        in_arm = z == arm
        if not in_arm.any():
            raise EstimationError(
                f"attribute group {attribute}={int(flag)} has no records in arm {arm!r}"
            )
        r = sub["R"].to_numpy(dtype=float)
        sides[flag] = float((w * r)[in_arm].mean())
    return sides[1.0] - sides[0.0]


def fairness_table(
    frame: pd.DataFrame,
    attribute: str,
    covariate_columns: tuple[str, ...],
    cfg: BootstrapConfig,
    strata: tuple[str, ...] = ALL_STRATA,
    arms: tuple[str, ...] = (ARM_AT, ARM_BELOW),
    salt: int = 0,
    label: str = "",
) -> pd.DataFrame:
    """Group contrasts for every (stratum, arm), with percentile intervals."""
    pairs = [(s, a) for s in strata for a in arms]

    def statistic(f: pd.DataFrame) -> np.ndarray:
        return np.array(
            [group_delta(f, attribute, covariate_columns, s, a) for s, a in pairs]
        )

    boot = block_bootstrap(frame, statistic, cfg, salt=salt)
    ok = np.all(np.isfinite(boot.replicates), axis=1)
    reps = boot.replicates[ok]
    rows = []
    for i, (stratum, arm) in enumerate(pairs):
        if len(reps) >= 2:
            lo, hi = np.percentile(reps[:, i], [2.5, 97.5])
            se = float(reps[:, i].std(ddof=1))
        else:
            lo = hi = se = float("nan")
        rows.append(
            {
                "group": label,
                "attribute": attribute,
                "stratum": stratum,
                "z": 1 if arm == ARM_AT else 0,
                "delta": float(boot.estimate[i]),
                "se": se,
                "ci_low": float(lo),
                "ci_high": float(hi),
                "n_failed_replicates": int(boot.n_failed),
            }
        )
    return pd.DataFrame(rows)


def below_median_indicator(
    frame: pd.DataFrame, column: str, by: str = "cohort"
) -> np.ndarray:
    """1.0 where ``column`` is strictly below its within-``by`` median."""
    values = frame[column].to_numpy(dtype=float)
    medians = frame.groupby(by)[column].transform("median").to_numpy(dtype=float)
    return (values < medians).astype(float)
