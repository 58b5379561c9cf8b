"""Nonparametric bounds on the recommendation effect within principal strata.

For each (cohort, track) cell the identified quantities are conditional
probabilities of (R, Y) events in the two instrument arms. Those pin down a
numerator (the stratum-specific effect mass) and an interval for the
denominator (the stratum share), whose ratio brackets the average effect of
the recommendation on completion within the stratum:

* responsive (H): numerator is the arm contrast in completion rates; the
  lower bound divides by one minus the largest shares of upgraded
  non-completers and non-upgraded completers; the upper bound is 1 by
  construction (a switch computes the raw ratio instead).
* always-high (AH): numerator is the drop in non-upgraded completion between
  the arms; the denominator is bracketed by the largest non-upgraded
  completion share and the smallest completion share.
* always-low (AL): numerator is the rise in upgraded non-completion; the
  denominator is bracketed by the largest upgraded non-completion share and
  one minus the largest completion share.

Negative numerators are rounded to zero (flagged, raw value kept). Standard
errors bootstrap every displayed quantity per replicate in the same way.
Aggregates are weighted means of numerators and denominator bounds (weights
are fixed cell population shares); aggregate ratios are recomputed from the
aggregated components, never averaged directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .domain import ARM_AT, ARM_BELOW, ALL_STRATA, CellKey, Stratum
from .errors import ConfigError, DegenerateDenominator
from .estimation import AdjustmentSpec, cond_prob
from .inference import BootstrapConfig, BootstrapResult, block_bootstrap

# Statistic vector layout per stratum: five displayed quantities.
COMPONENT_FIELDS = ("numerator", "denominator_lb", "denominator_ub", "apce_lb", "apce_ub")


def _event_y1(r, y):
    return y == 1


def _event_y1_r0(r, y):
    return (y == 1) & (r == 0)


def _event_y0_r1(r, y):
    return (y == 0) & (r == 1)


def _event_y1_r1(r, y):
    return (y == 1) & (r == 1)


def _event_y0_r0(r, y):
    return (y == 0) & (r == 0)


def _event_r1(r, y):
    return r == 1


@dataclass(frozen=True)
class ArmShares:
    """All conditional probabilities the bound formulas consume."""

    y1_at: float
    y1_below: float
    y1_r0_at: float
    y1_r0_below: float
    y0_r1_at: float
    y0_r1_below: float
    y1_r1_at: float
    y1_r1_below: float
    r1_at: float
    r1_below: float
    n_at: int
    n_below: int
    clamped: bool = False

    @property
    def n(self) -> int:
        return self.n_at + self.n_below


def collect_arm_shares(frame: pd.DataFrame, adj: AdjustmentSpec) -> ArmShares:
    """One pass over the cell computing every arm probability used downstream."""
    events = {
        "y1": _event_y1,
        "y1_r0": _event_y1_r0,
        "y0_r1": _event_y0_r1,
        "y1_r1": _event_y1_r1,
        "r1": _event_r1,
    }
    values: dict[str, float] = {}
    clamped = False
    n_at = n_below = 0
    for name, event in events.items():
        for arm in (ARM_AT, ARM_BELOW):
            cp = cond_prob(frame, event, arm, adj)
            values[f"{name}_{arm}"] = cp.value
            clamped = clamped or cp.clamped
            if arm == ARM_AT:
                n_at = cp.n_arm
            else:
                n_below = cp.n_arm
    return ArmShares(
        y1_at=values["y1_at"],
        y1_below=values["y1_below"],
        y1_r0_at=values["y1_r0_at"],
        y1_r0_below=values["y1_r0_below"],
        y0_r1_at=values["y0_r1_at"],
        y0_r1_below=values["y0_r1_below"],
        y1_r1_at=values["y1_r1_at"],
        y1_r1_below=values["y1_r1_below"],
        r1_at=values["r1_at"],
        r1_below=values["r1_below"],
        n_at=n_at,
        n_below=n_below,
        clamped=clamped,
    )


@dataclass(frozen=True)
class PotentialShareBounds:
    """Plug-in bounds on the completion shares under each recommendation."""

    lb_y0: float
    ub_y0: float
    lb_y1: float
    ub_y1: float


def bounds_y0_y1(shares: ArmShares) -> PotentialShareBounds:
    return PotentialShareBounds(
        lb_y0=max(shares.y1_r0_at, shares.y1_r0_below),
        ub_y0=min(shares.y1_at, shares.y1_below),
        lb_y1=max(shares.y1_at, shares.y1_below),
        ub_y1=1.0 - max(shares.y0_r1_at, shares.y0_r1_below),
    )


@dataclass(frozen=True)
class BoundComponents:
    """Numerator and denominator interval for one stratum, before ratios."""

    stratum: str
    numerator_raw: float
    denominator_lb: float
    denominator_ub: float


def stratum_components(shares: ArmShares, stratum: str) -> BoundComponents:
    if stratum == Stratum.RESPONSIVE.value:
        num = shares.y1_at - shares.y1_below
        dlb = max(shares.y1_at, shares.y1_below) - min(shares.y1_at, shares.y1_below)
        dub = (
            1.0
            - max(shares.y0_r1_at, shares.y0_r1_below)
            - max(shares.y1_r0_at, shares.y1_r0_below)
        )
    elif stratum == Stratum.ALWAYS_HIGH.value:
        num = shares.y1_r0_below - shares.y1_r0_at
        dlb = max(shares.y1_r0_at, shares.y1_r0_below)
        dub = min(shares.y1_at, shares.y1_below)
    elif stratum == Stratum.ALWAYS_LOW.value:
        num = shares.y0_r1_at - shares.y0_r1_below
        dlb = max(shares.y0_r1_at, shares.y0_r1_below)
        dub = 1.0 - max(shares.y1_at, shares.y1_below)
    else:
        raise ConfigError(f"unknown stratum: {stratum}")
    return BoundComponents(
        stratum=stratum, numerator_raw=num, denominator_lb=dlb, denominator_ub=dub
    )


@dataclass
class BoundInterval:
    """Displayed quantities for one stratum in one cell or group."""

    stratum: str
    numerator: float
    numerator_raw: float
    denominator_lb: float
    denominator_ub: float
    apce_lb: float
    apce_ub: float
    flags: dict = field(default_factory=dict)


def _ratio(numerator: float, denominator: float, what: str) -> float:
    if numerator == 0.0:
        return 0.0
    if denominator <= 0.0:
        raise DegenerateDenominator(
            f"{what} is {denominator:.6g} with a nonzero numerator",
            denominator=denominator,
            numerator=numerator,
        )
    return numerator / denominator


def interval_from_components(
    comp: BoundComponents, force_upper_one: bool = True
) -> BoundInterval:
    """Turn components into the displayed interval, applying all conventions.

    Conventions: negative numerators round to zero (flagged); the responsive
    stratum's upper bound is 1 by construction unless ``force_upper_one`` is
    off; crossed denominator bounds are reordered with a flag; everything is
    clamped into [-1, 1] with a flag.
    """
    flags = {
        "numerator_rounded_to_zero": False,
        "ub_forced_to_one": False,
        "clamped": False,
        "denominator_crossed": False,
    }
    num = comp.numerator_raw
    if num < 0.0:
        num = 0.0
        flags["numerator_rounded_to_zero"] = True
    dlb, dub = comp.denominator_lb, comp.denominator_ub
    if dlb > dub:
        flags["denominator_crossed"] = True
        dlb, dub = dub, dlb
    apce_lb = _ratio(num, dub, "denominator upper bound")
    if comp.stratum == Stratum.RESPONSIVE.value and force_upper_one:
        apce_ub = 1.0
        flags["ub_forced_to_one"] = True
    else:
        apce_ub = _ratio(num, dlb, "denominator lower bound")
    lo, hi = min(apce_lb, apce_ub), max(apce_lb, apce_ub)
    clamped_lo, clamped_hi = max(lo, -1.0), min(hi, 1.0)
    if (clamped_lo, clamped_hi) != (lo, hi):
        flags["clamped"] = True
    return BoundInterval(
        stratum=comp.stratum,
        numerator=num,
        numerator_raw=comp.numerator_raw,
        denominator_lb=dlb,
        denominator_ub=dub,
        apce_lb=clamped_lo,
        apce_ub=clamped_hi,
        flags=flags,
    )


def interval_vector(interval: BoundInterval) -> np.ndarray:
    return np.array(
        [
            interval.numerator,
            interval.denominator_lb,
            interval.denominator_ub,
            interval.apce_lb,
            interval.apce_ub,
        ]
    )


@dataclass
class CellEstimate:
    """A stratum's interval in one cell (or aggregate group), with SEs."""

    label: str
    stratum: str
    n: int
    numerator: float
    numerator_raw: float
    denominator_lb: float
    denominator_ub: float
    apce_lb: float
    apce_ub: float
    flags: dict
    se: dict = field(default_factory=dict)
    n_failed_replicates: int = 0
    weight: float = 1.0

    def as_row(self) -> dict:
        row = {
            "group": self.label,
            "stratum": self.stratum,
            "n": self.n,
            "numerator": self.numerator,
            "denominator_lb": self.denominator_lb,
            "denominator_ub": self.denominator_ub,
            "apce_lb": self.apce_lb,
            "apce_ub": self.apce_ub,
        }
        for name in COMPONENT_FIELDS:
            row[f"se_{name}"] = self.se.get(name, np.nan)
        row["numerator_raw"] = self.numerator_raw
        row["n_failed_replicates"] = self.n_failed_replicates
        row["flags"] = ";".join(sorted(k for k, v in self.flags.items() if v)) or ""
        return row


def estimate_cell(
    frame: pd.DataFrame,
    adj: AdjustmentSpec,
    strata: tuple[str, ...] = ALL_STRATA,
    force_upper_one: bool = True,
    label: str = "",
) -> list[CellEstimate]:
    """Point intervals for the requested strata in one cell (no SEs)."""
    shares = collect_arm_shares(frame, adj)
    out = []
    for stratum in strata:
        interval = interval_from_components(
            stratum_components(shares, stratum), force_upper_one
        )
        if shares.clamped:
            interval.flags["clamped"] = True
        out.append(
            CellEstimate(
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
        )
    return out


def cell_statistic(
    frame: pd.DataFrame,
    adj: AdjustmentSpec,
    strata: tuple[str, ...],
    force_upper_one: bool,
) -> np.ndarray:
    """Stacked per-stratum interval vectors; the bootstrap statistic."""
    shares = collect_arm_shares(frame, adj)
    pieces = [
        interval_vector(
            interval_from_components(stratum_components(shares, s), force_upper_one)
        )
        for s in strata
    ]
    return np.concatenate(pieces)


def estimate_cell_with_se(
    frame: pd.DataFrame,
    adj: AdjustmentSpec,
    cfg: BootstrapConfig,
    strata: tuple[str, ...] = ALL_STRATA,
    force_upper_one: bool = True,
    label: str = "",
    salt: int = 0,
) -> tuple[list[CellEstimate], BootstrapResult]:
    """Cell intervals plus bootstrap SEs; replicates are returned for reuse."""
    estimates = estimate_cell(frame, adj, strata, force_upper_one, label=label)
    boot = block_bootstrap(
        frame, lambda f: cell_statistic(f, adj, strata, force_upper_one), cfg, salt=salt
    )
    for i, est in enumerate(estimates):
        block = boot.se[5 * i : 5 * (i + 1)]
        est.se = dict(zip(COMPONENT_FIELDS, (float(v) for v in block)))
        est.n_failed_replicates = boot.n_failed
    return estimates, boot


def aggregate_intervals(
    members: list[CellEstimate],
    label: str,
    force_upper_one: bool = True,
    replicate_blocks: list[np.ndarray] | None = None,
) -> CellEstimate:
    """Weighted aggregate of one stratum's intervals across cells.

    Weights are the members' population shares. Numerators and denominator
    bounds are averaged; the aggregate ratio is recomputed from those with
    the same rounding and flag conventions. When per-cell replicate blocks
    (columns: the five displayed quantities) are supplied, the aggregate is
    recomputed inside every replicate to produce SEs.
    """
    strata = {m.stratum for m in members}
    if len(strata) != 1:
        raise ConfigError(f"cannot aggregate across strata: {sorted(strata)}")
    stratum = strata.pop()
    total = float(sum(m.n for m in members))
    if total <= 0:
        raise ConfigError("aggregate over empty cells")
    weights = np.array([m.n / total for m in members])
    num = float(np.dot(weights, [m.numerator for m in members]))
    dlb = float(np.dot(weights, [m.denominator_lb for m in members]))
    dub = float(np.dot(weights, [m.denominator_ub for m in members]))
    interval = interval_from_components(
        BoundComponents(
            stratum=stratum, numerator_raw=num, denominator_lb=dlb, denominator_ub=dub
        ),
        force_upper_one,
    )
    aggregate = CellEstimate(
        label=label,
        stratum=stratum,
        n=int(total),
        numerator=interval.numerator,
        numerator_raw=interval.numerator_raw,
        denominator_lb=interval.denominator_lb,
        denominator_ub=interval.denominator_ub,
        apce_lb=interval.apce_lb,
        apce_ub=interval.apce_ub,
        flags=interval.flags,
    )
    if replicate_blocks is not None:
        if len(replicate_blocks) != len(members):
            raise ConfigError("one replicate block per member cell required")
        reps = np.stack(replicate_blocks)  # (cells, R, 5)
        agg_components = np.einsum("c,crk->rk", weights, reps)  # NaN propagates
        rows = []
        for comp_row in agg_components:
            if not np.all(np.isfinite(comp_row)):
                rows.append(np.full(5, np.nan))
                continue
            try:
                rep_interval = interval_from_components(
                    BoundComponents(
                        stratum=stratum,
                        numerator_raw=float(comp_row[0]),
                        denominator_lb=float(comp_row[1]),
                        denominator_ub=float(comp_row[2]),
                    ),
                    force_upper_one,
                )
            except DegenerateDenominator:
                rows.append(np.full(5, np.nan))
                continue
            rows.append(interval_vector(rep_interval))
        rep_matrix = np.stack(rows)
        ok = np.all(np.isfinite(rep_matrix), axis=1)
        aggregate.n_failed_replicates = int((~ok).sum())
        if ok.sum() >= 2:
            se = rep_matrix[ok].std(axis=0, ddof=1)
            aggregate.se = dict(zip(COMPONENT_FIELDS, (float(v) for v in se)))
    return aggregate
