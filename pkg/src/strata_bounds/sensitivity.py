"""Direct-effect sensitivity: estimating eta and bounds that drop exclusion.

The exclusion restriction says scoring at the cutoff moves completion only
through the recommendation. Its violation is parameterized by eta, a
homogeneous additive shift of expected completion for students scoring at
the cutoff, holding the recommendation fixed. Students never upgraded in
either arm identify eta: compare mean completion of non-upgraded at-cutoff
students with a reweighted mean of non-upgraded below-cutoff students, the
weights being each below student's predicted probability of being a
never-upgraded type (a logistic model fit in the at arm).

``noer_components`` generalizes the exclusion-restriction bound components
to any eta; at eta = 0 they reduce to the plain ones exactly (bitwise, since
every eta term enters additively).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .domain import ARM_AT, ARM_BELOW, ALL_STRATA, COL_Z, Stratum
from .errors import ConfigError, EmptyStratum
from .estimation import AdjustmentSpec, LogisticFit, fit_logistic, logistic_design
from .bounds import (
    ArmShares,
    BoundComponents,
    CellEstimate,
    COMPONENT_FIELDS,
    collect_arm_shares,
    interval_from_components,
    interval_vector,
)
from .inference import BootstrapConfig, BootstrapResult, block_bootstrap


@dataclass
class EtaEstimate:
    """Estimated direct effect for never-upgraded students in one cell."""

    eta: float
    mean_above: float
    weighted_mean_below: float
    n_above: int
    n_below: int
    model: LogisticFit | None
    flags: dict
    se: float | None = None


def estimate_eta(frame: pd.DataFrame, covariate_columns: tuple[str, ...] = ()) -> EtaEstimate:
    """Never-upgraded contrast of completion between the arms.

    The below-arm mean is weighted by the predicted probability of not
    being upgraded at the cutoff, so that it represents the same latent
    group as the at-arm mean. A degenerate score model falls back to the
    unweighted mean (flagged).
    """
    z = frame[COL_Z].to_numpy()
    r = frame["R"].to_numpy()
    y = frame["Y"].to_numpy(dtype=float)
    at = z == ARM_AT
    below = z == ARM_BELOW
    at_r0 = at & (r == 0)
    below_r0 = below & (r == 0)
    if not at_r0.any():
        raise EmptyStratum("no non-upgraded records in the at arm")
    if not below_r0.any():
        raise EmptyStratum("no non-upgraded records in the below arm")

    flags = {"unweighted_fallback": False, "degenerate_model": False}
    model: LogisticFit | None = None
    if covariate_columns:
        X_at, names = logistic_design(frame.loc[at], covariate_columns)
        model = fit_logistic(X_at, (1 - r[at]).astype(float), names=names)
        if model.degenerate:
            flags["degenerate_model"] = True
    mean_above = float(y[at_r0].mean())
    if model is None or model.degenerate:
        flags["unweighted_fallback"] = True
        weighted_mean_below = float(y[below_r0].mean())
    else:
        X_below, _ = logistic_design(frame.loc[below_r0], covariate_columns)
        weights = model.predict_proba(X_below)
        weighted_mean_below = float(np.dot(weights, y[below_r0]) / weights.sum())
    return EtaEstimate(
        eta=mean_above - weighted_mean_below,
        mean_above=mean_above,
        weighted_mean_below=weighted_mean_below,
        n_above=int(at_r0.sum()),
        n_below=int(below_r0.sum()),
        model=model,
        flags=flags,
    )


def noer_components(shares: ArmShares, eta: float, stratum: str) -> BoundComponents:
    """Bound components allowing a direct effect of size ``eta``.

    Every appearance of an at-arm probability is corrected by the share of
    completions the direct effect accounts for; at eta = 0 each expression
    collapses to its exclusion-restriction counterpart term by term.
    """
    r0_at = 1.0 - shares.r1_at
    if stratum == Stratum.RESPONSIVE.value:
        num = shares.y1_at - shares.y1_below - eta
        a = shares.y0_r1_at + eta * shares.r1_at
        c = shares.y1_r0_at - eta * r0_at
        dub = 1.0 - max(a, shares.y0_r1_below) - max(c, shares.y1_r0_below)
        hi = max(shares.y1_at - eta, shares.y1_below)
        lo = min(shares.y1_at - eta, shares.y1_below)
        dlb = hi - lo
    elif stratum == Stratum.ALWAYS_HIGH.value:
        num = shares.y1_r0_below - shares.y1_r0_at + eta * r0_at
        dub = min(shares.y1_at - eta, shares.y1_below)
        dlb = max(shares.y1_r0_at - eta * r0_at, shares.y1_r0_below)
    elif stratum == Stratum.ALWAYS_LOW.value:
        num = shares.y0_r1_at - shares.y0_r1_below + eta * shares.r1_at
        dub = 1.0 - max(shares.y1_at - eta, shares.y1_below)
        dlb = max(shares.y0_r1_at + eta * shares.r1_at, shares.y0_r1_below)
    else:
        raise ConfigError(f"unknown stratum: {stratum}")
    return BoundComponents(
        stratum=stratum, numerator_raw=num, denominator_lb=dlb, denominator_ub=dub
    )


def noer_cell_estimate(
    frame: pd.DataFrame,
    adj: AdjustmentSpec,
    eta: float,
    strata: tuple[str, ...] = ALL_STRATA,
    force_upper_one: bool = True,
    label: str = "",
) -> list[CellEstimate]:
    """Point intervals at a fixed eta for the requested strata."""
    shares = collect_arm_shares(frame, adj)
    out = []
    for stratum in strata:
        interval = interval_from_components(
            noer_components(shares, eta, stratum), force_upper_one
        )
        if shares.clamped:
            interval.flags["clamped"] = True
        est = CellEstimate(
            label=label,
            stratum=stratum,
            n=shares.n,
            numerator=interval.numerator,
            numerator_raw=interval.numerator_raw,
            denominator_lb=interval.denominator_lb,
            denominator_ub=interval.denominator_ub,
            apce_lb=interval.apce_lb,
            apce_ub=interval.apce_ub,
            flags=interval.flags,
        )
        est.se["eta"] = np.nan
        out.append(est)
    return out


def eta_sweep(
    frame: pd.DataFrame,
    adj: AdjustmentSpec,
    grid: tuple[float, ...],
    strata: tuple[str, ...] = ALL_STRATA,
    force_upper_one: bool = True,
    label: str = "",
) -> pd.DataFrame:
    """Intervals across a user grid of eta values (one row per eta, stratum)."""
    shares = collect_arm_shares(frame, adj)
    rows = []
    for eta in grid:
        for stratum in strata:
            interval = interval_from_components(
                noer_components(shares, float(eta), stratum), force_upper_one
            )
            rows.append(
                {
                    "group": label,
                    "stratum": stratum,
                    "eta": float(eta),
                    "numerator": interval.numerator,
                    "denominator_lb": interval.denominator_lb,
                    "denominator_ub": interval.denominator_ub,
                    "apce_lb": interval.apce_lb,
                    "apce_ub": interval.apce_ub,
                }
            )
    return pd.DataFrame(rows)


def noer_statistic(
    frame: pd.DataFrame,
    adj: AdjustmentSpec,
    covariate_columns: tuple[str, ...],
    strata: tuple[str, ...],
    force_upper_one: bool,
) -> np.ndarray:
    """Replicate vector: eta first, then each stratum's five quantities."""
    eta = estimate_eta(frame, covariate_columns).eta
    shares = collect_arm_shares(frame, adj)
    pieces = [np.array([eta])]
    for stratum in strata:
        pieces.append(
            interval_vector(
                interval_from_components(
                    noer_components(shares, eta, stratum), force_upper_one
                )
            )
        )
    return np.concatenate(pieces)


def estimate_noer_with_se(
    frame: pd.DataFrame,
    adj: AdjustmentSpec,
    covariate_columns: tuple[str, ...],
    cfg: BootstrapConfig,
    strata: tuple[str, ...] = ALL_STRATA,
    force_upper_one: bool = True,
    label: str = "",
    salt: int = 0,
) -> tuple[EtaEstimate, list[CellEstimate], BootstrapResult]:
    """Bounds at the estimated eta, bootstrapped jointly.

    Each replicate re-estimates eta before recomputing the bounds, so the
    reported SEs carry the estimation uncertainty of eta as well; the eta
    SE itself is reported alongside.
    """
    eta_est = estimate_eta(frame, covariate_columns)
    estimates = noer_cell_estimate(
        frame, adj, eta_est.eta, strata, force_upper_one, label=label
    )
    boot = block_bootstrap(
        frame,
        lambda f: noer_statistic(f, adj, covariate_columns, strata, force_upper_one),
        cfg,
        salt=salt,
    )
    eta_est.se = float(boot.se[0])
    for i, est in enumerate(estimates):
        block = boot.se[1 + 5 * i : 1 + 5 * (i + 1)]
        est.se = dict(zip(COMPONENT_FIELDS, (float(v) for v in block)))
        est.se["eta"] = float(boot.se[0])
        est.n_failed_replicates = boot.n_failed
    return eta_est, estimates, boot
