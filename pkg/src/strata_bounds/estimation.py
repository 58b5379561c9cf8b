"""Shared estimation primitives: arm probabilities, first stage, logistic.

Conditional probabilities of (R, Y) events given an instrument arm come in
three flavors controlled by :class:`AdjustmentSpec`: raw arm frequencies, a
linear probability model adding the school leniency proxy, or one adding the
proxy plus covariates. Adjusted probabilities are model-standardized: the
model is fit over both arms of the cell and the fitted values are averaged
over the full cell sample with the arm indicator forced to the requested arm.

The logistic fitter is plain iteratively reweighted least squares with the
degenerate-label and separation fallbacks the rest of the package relies on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
import scipy.linalg

from .domain import ARM_AT, ARM_BELOW, COL_Z, COL_ZTILDE, arm_indicator
from .errors import ConfigError, EmptyArm, EstimationError

ADJUSTMENT_MODES = ("raw", "ztilde", "full")

QR_PIVOT_TOL = 1e-10
LOGIT_TOL = 1e-8
LOGIT_MAX_ITER = 100
LOGIT_RIDGE = 1e-6
PROB_CLAMP = (0.001, 0.999)

Event = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AdjustmentSpec:
    """How arm probabilities are computed.

    ``raw`` uses within-arm frequencies; ``ztilde`` regresses on the arm
    indicator plus the leniency proxy; ``full`` adds the covariate columns.
    """

    mode: str = "raw"
    covariate_columns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in ADJUSTMENT_MODES:
            raise ConfigError(f"unknown adjustment mode: {self.mode}")

    @property
    def adjusted(self) -> bool:
        return self.mode != "raw"

    def design_columns(self) -> tuple[str, ...]:
        cols: tuple[str, ...] = ("const", "z_at")
        if self.mode in ("ztilde", "full"):
            cols = cols + (COL_ZTILDE,)
        if self.mode == "full":
            cols = cols + tuple(self.covariate_columns)
        return cols


def design_matrix(
    frame: pd.DataFrame, adj: AdjustmentSpec, arm_value: float | None = None
) -> tuple[np.ndarray, list[str]]:
    """Design for the arm regressions; ``arm_value`` overrides the indicator."""
    n = len(frame)
    cols: list[np.ndarray] = [np.ones(n)]
    names = ["const"]
    z_at = np.full(n, float(arm_value)) if arm_value is not None else arm_indicator(frame)
    cols.append(z_at)
    names.append("z_at")
    if adj.mode in ("ztilde", "full"):
        cols.append(frame[COL_ZTILDE].to_numpy(dtype=float))
        names.append(COL_ZTILDE)
    if adj.mode == "full":
        for name in adj.covariate_columns:
            cols.append(frame[name].to_numpy(dtype=float))
            names.append(name)
    return np.column_stack(cols), names


@dataclass
class LinearFit:
    """OLS fit after pivoted-QR removal of collinear columns."""

    coef: np.ndarray
    kept: list[str]
    dropped: list[str]
    _positions: np.ndarray = field(repr=False)

    def coefficient(self, name: str) -> float:
        try:
            return float(self.coef[self.kept.index(name)])
        except ValueError:
            raise EstimationError(f"column {name} was dropped as collinear") from None

    def predict(self, X: np.ndarray) -> np.ndarray:
        return X[:, self._positions] @ self.coef


def fit_linear(X: np.ndarray, y: np.ndarray, names: list[str]) -> LinearFit:
    """Least squares with rank handling: collinear columns are dropped.

    Column selection uses pivoted QR with a relative tolerance on the
    diagonal of R; dropped columns trigger a warning, never an error.
    """
    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] <= 0.0:
        raise EstimationError("design matrix has rank zero")
    rank = int(np.sum(diag > QR_PIVOT_TOL * diag[0]))
    positions = np.sort(piv[:rank])
    dropped = [names[i] for i in np.sort(piv[rank:])]
    if dropped:
        warnings.warn(f"dropping collinear columns: {', '.join(dropped)}", stacklevel=2)
    coef, *_ = np.linalg.lstsq(X[:, positions], y, rcond=None)
    return LinearFit(
        coef=coef,
        kept=[names[i] for i in positions],
        dropped=dropped,
        _positions=positions,
    )


@dataclass
class CondProb:
    """One conditional probability estimate with its audit trail."""

    value: float
    arm: str
    n_arm: int
    clamped: bool = False
    per_record: np.ndarray | None = None
    dropped_columns: tuple[str, ...] = ()


def _require_arms(frame: pd.DataFrame, arms: tuple[str, ...]) -> dict[str, int]:
    z = frame[COL_Z].to_numpy()
    counts = {arm: int((z == arm).sum()) for arm in arms}
    for arm, count in counts.items():
        if count == 0:
            raise EmptyArm(f"no records in arm {arm!r}", arm=arm)
    return counts


def cond_prob(frame: pd.DataFrame, event: Event, arm: str, adj: AdjustmentSpec) -> CondProb:
    """Pr(event(R, Y) | arm) under the requested adjustment.

    Raw mode is the frequency among the arm's records. Adjusted modes fit a
    linear probability model of the event indicator over both arms and
    average counterfactual fitted values over the whole cell, clamping into
    [0, 1] with a flag when the model strays outside.
    """
    if arm not in (ARM_AT, ARM_BELOW):
        raise ConfigError(f"arm must be {ARM_AT!r} or {ARM_BELOW!r}, got {arm!r}")
    counts = _require_arms(frame, (ARM_AT, ARM_BELOW))
    r = frame["R"].to_numpy()
    y = frame["Y"].to_numpy()
    indicator = np.asarray(event(r, y), dtype=float)
    if not adj.adjusted:
        mask = frame[COL_Z].to_numpy() == arm
        return CondProb(
            value=float(indicator[mask].mean()),
            arm=arm,
            n_arm=counts[arm],
            per_record=indicator[mask],
        )
    X, names = design_matrix(frame, adj)
    fit = fit_linear(X, indicator, names)
    X_arm, _ = design_matrix(frame, adj, arm_value=1.0 if arm == ARM_AT else 0.0)
    fitted = fit.predict(X_arm)
    value = float(fitted.mean())
    clamped = bool(value < 0.0 or value > 1.0)
    return CondProb(
        value=float(min(max(value, 0.0), 1.0)),
        arm=arm,
        n_arm=counts[arm],
        clamped=clamped,
        per_record=fitted,
        dropped_columns=tuple(fit.dropped),
    )


@dataclass
class FirstStageFit:
    """Effect of scoring at the cutoff on the upgrade recommendation."""

    delta: float
    coefficients: dict[str, float]
    mode: str
    n_at: int
    n_below: int
    se: float | None = None
    dropped_columns: tuple[str, ...] = ()


def first_stage_delta(frame: pd.DataFrame, adj: AdjustmentSpec) -> float:
    """The arm contrast in upgrade rates, as a bare float for resampling."""
    return fit_first_stage(frame, adj).delta


def fit_first_stage(frame: pd.DataFrame, adj: AdjustmentSpec) -> FirstStageFit:
    """Regression of the recommendation on the arm indicator.

    Raw mode returns the exact difference of within-arm upgrade frequencies;
    adjusted modes add the leniency proxy (and covariates) to an OLS fit.
    """
    counts = _require_arms(frame, (ARM_AT, ARM_BELOW))
    r = frame["R"].to_numpy(dtype=float)
    z = frame[COL_Z].to_numpy()
    if not adj.adjusted:
        mean_at = float(r[z == ARM_AT].mean())
        mean_below = float(r[z == ARM_BELOW].mean())
        return FirstStageFit(
            delta=mean_at - mean_below,
            coefficients={"const": mean_below, "z_at": mean_at - mean_below},
            mode=adj.mode,
            n_at=counts[ARM_AT],
            n_below=counts[ARM_BELOW],
        )
    X, names = design_matrix(frame, adj)
    fit = fit_linear(X, r, names)
    return FirstStageFit(
        delta=fit.coefficient("z_at"),
        coefficients={name: float(c) for name, c in zip(fit.kept, fit.coef)},
        mode=adj.mode,
        n_at=counts[ARM_AT],
        n_below=counts[ARM_BELOW],
        dropped_columns=tuple(fit.dropped),
    )


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    expn = np.exp(eta[~pos])
    out[~pos] = expn / (1.0 + expn)
    return out


@dataclass
class LogisticFit:
    """Logistic model with clamped predictions.

    ``degenerate`` marks the constant-model fallback used when every label
    agrees; ``ridge`` marks the stabilized refit used under separation.
    """

    coef: np.ndarray
    names: tuple[str, ...]
    converged: bool
    n_iter: int
    ridge: bool = False
    degenerate: bool = False

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = _sigmoid(np.asarray(X, dtype=float) @ self.coef)
        return np.clip(p, PROB_CLAMP[0], PROB_CLAMP[1])

    def coefficient(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])


def _irls(
    X: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float
) -> tuple[np.ndarray, bool, int]:
    k = X.shape[1]
    beta = np.zeros(k)
    penalty = ridge * np.eye(k)
    for it in range(1, LOGIT_MAX_ITER + 1):
        eta = X @ beta
        p = np.clip(_sigmoid(eta), 1e-10, 1.0 - 1e-10)
        weight = w * p * (1.0 - p)
        z = eta + (y - p) / (p * (1.0 - p))
        xtw = X.T * weight
        try:
            new = np.linalg.solve(xtw @ X + penalty, xtw @ z)
        except np.linalg.LinAlgError:
            return beta, False, it
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < LOGIT_TOL:
            return beta, True, it
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > 1e3:
            return beta, False, it
    return beta, False, LOGIT_MAX_ITER


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: np.ndarray | None = None,
    names: tuple[str, ...] | None = None,
) -> LogisticFit:
    """IRLS logistic regression of binary ``y`` on ``X`` (with intercept column).

    Convergence is max absolute coefficient change below 1e-8 within 100
    iterations. All-equal labels yield a constant model at the clamped label
    frequency. Separation or a singular step triggers one ridge-stabilized
    refit (penalty 1e-6), flagged on the result.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ConfigError("feature matrix and labels do not align")
    if len(y) == 0:
        raise EstimationError("cannot fit a logistic model on zero records")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ConfigError("labels must be binary")
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    if (w < 0).any():
        raise ConfigError("negative sample weights")
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(X.shape[1]))

    active = y[w > 0]
    if len(active) == 0:
        raise EstimationError("all sample weights are zero")
    share = float(np.average(y, weights=w))
    if np.all(active == active[0]):
        p = min(max(share, PROB_CLAMP[0]), PROB_CLAMP[1])
        coef = np.zeros(X.shape[1])
        coef[0] = float(np.log(p / (1.0 - p)))
        return LogisticFit(
            coef=coef, names=names, converged=True, n_iter=0, degenerate=True
        )

    beta, converged, n_iter = _irls(X, y, w, ridge=0.0)
    if converged:
        return LogisticFit(coef=beta, names=names, converged=True, n_iter=n_iter)
    beta, converged, ridge_iter = _irls(X, y, w, ridge=LOGIT_RIDGE)
    if not converged:
        warnings.warn("logistic fit did not converge even with ridge", stacklevel=2)
    return LogisticFit(
        coef=beta,
        names=names,
        converged=converged,
        n_iter=n_iter + ridge_iter,
        ridge=True,
    )


def logistic_design(frame: pd.DataFrame, columns: tuple[str, ...]) -> tuple[np.ndarray, tuple[str, ...]]:
    """Intercept-plus-columns design for the score models."""
    n = len(frame)
    mats = [np.ones(n)] + [frame[c].to_numpy(dtype=float) for c in columns]
    return np.column_stack(mats), ("const",) + tuple(columns)
