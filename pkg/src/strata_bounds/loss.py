"""Confusion-matrix loss comparison between the two instrument arms.

Treating the recommendation as a binary classifier of eventual completion,
the loss of an arm weighs missed completers (not upgraded, would complete
the higher track) against failed upgrades (upgraded, does not complete),
with the relative weight of the latter a free parameter swept over a grid.
Only two pieces are identified per arm: the shares of upgraded completers
and upgraded non-completers; the arm difference of the loss is

    diff(w) = [p11(below) - p11(at)] + w * [p10(at) - p10(below)]

which is affine in the weight. The one-sided test asks whether scoring at
the cutoff raises the loss (H1: diff > 0). All grid points share a single
set of bootstrap replicates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.stats import norm

from .errors import ConfigError
from .estimation import AdjustmentSpec
from .bounds import ArmShares, collect_arm_shares
from .inference import BootstrapConfig, block_bootstrap

DEFAULT_GRID = tuple(np.round(np.arange(0.0, 1.0001, 0.05), 10))

P_VALUE_MODES = ("normal", "percentile")


@dataclass(frozen=True)
class ConfusionShares:
    """Identified upgraded-completion shares per arm."""

    p11_at: float
    p11_below: float
    p10_at: float
    p10_below: float

    @staticmethod
    def from_arm_shares(shares: ArmShares) -> "ConfusionShares":
        return ConfusionShares(
            p11_at=shares.y1_r1_at,
            p11_below=shares.y1_r1_below,
            p10_at=shares.y0_r1_at,
            p10_below=shares.y0_r1_below,
        )


def confusion_shares(frame: pd.DataFrame, adj: AdjustmentSpec) -> ConfusionShares:
    return ConfusionShares.from_arm_shares(collect_arm_shares(frame, adj))


def loss_difference(shares: ConfusionShares, weight: float, fp_sign: int = 1) -> float:
    """Arm difference of the loss at one false-positive weight.

    ``fp_sign=-1`` flips the sign of the weighted false-positive term; the
    default is the internally consistent convention (the two terms then
    count strictly harmful classification errors in the same direction).
    """
    if fp_sign not in (1, -1):
        raise ConfigError("fp_sign must be +1 or -1")
    return (shares.p11_below - shares.p11_at) + fp_sign * weight * (
        shares.p10_at - shares.p10_below
    )


def _share_vector(frame: pd.DataFrame, adj: AdjustmentSpec) -> np.ndarray:
    s = confusion_shares(frame, adj)
    return np.array([s.p11_at, s.p11_below, s.p10_at, s.p10_below])


def loss_curve(
    frame: pd.DataFrame,
    adj: AdjustmentSpec,
    cfg: BootstrapConfig,
    grid: tuple[float, ...] = DEFAULT_GRID,
    fp_sign: int = 1,
    p_mode: str = "normal",
    salt: int = 0,
    label: str = "",
) -> pd.DataFrame:
    """Loss difference, SE, and one-sided p-value at every grid weight.

    The four confusion shares are bootstrapped once; every weight reuses the
    same replicates. Degenerate weights (zero replicate variance) carry a
    flag and get p = 0.5 when the difference is also zero.
    """
    if p_mode not in P_VALUE_MODES:
        raise ConfigError(f"unknown p-value mode: {p_mode}")
    if not grid:
        raise ConfigError("empty weight grid")
    boot = block_bootstrap(frame, lambda f: _share_vector(f, adj), cfg, salt=salt)
    point = ConfusionShares(*boot.estimate)
    ok = np.all(np.isfinite(boot.replicates), axis=1)
    reps = boot.replicates[ok]
    rep_base = reps[:, 1] - reps[:, 0]
    rep_slope = fp_sign * (reps[:, 2] - reps[:, 3])

    rows = []
    for weight in grid:
        diff = loss_difference(point, weight, fp_sign)
        rep_diffs = rep_base + weight * rep_slope
        se = float(rep_diffs.std(ddof=1)) if len(rep_diffs) >= 2 else float("nan")
        degenerate = bool(se == 0.0)
        if p_mode == "normal":
            if degenerate:
                p = 0.5 if diff == 0.0 else (0.0 if diff > 0.0 else 1.0)
            else:
                p = float(norm.sf(diff / se))
        else:
            p = float((1 + int((rep_diffs <= 0.0).sum())) / (len(rep_diffs) + 1))
        rows.append(
            {
                "group": label,
                "l10": float(weight),
                "diff": diff,
                "se": se,
                "p_value": p,
                "degenerate": degenerate,
            }
        )
    curve = pd.DataFrame(rows)
    curve.attrs["n_failed_replicates"] = int(boot.n_failed)
    return curve


def smallest_actionable_weight(curve: pd.DataFrame, alpha: float = 0.05) -> float | None:
    """Smallest grid weight at which the one-sided test rejects at ``alpha``."""
    hits = curve.loc[curve["p_value"] < alpha, "l10"]
    return float(hits.min()) if len(hits) else None
