"""Resampling inference: school-block bootstrap, Holm adjustment, balance.

Uncertainty everywhere in the package comes from a block bootstrap that
resamples whole schools with replacement, independently within each cohort,
keeping all students of a drawn school. The standard error of a statistic is
the standard deviation of its replicate values. Replicate r draws from a
generator seeded deterministically by (seed, salt, r), so results are
bit-identical across runs and across serial/parallel execution.
"""

from __future__ import annotations

import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
import pandas as pd
from scipy.stats import norm

from .domain import ARM_AT, ARM_BELOW, COL_Z
from .errors import BootstrapFailure, ConfigError, EstimationError


@dataclass(frozen=True)
class BootstrapConfig:
    replications: int = 1000
    seed: int = 0
    cluster_key: str = "school_id"
    cohort_key: str = "cohort"
    threads: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a non-negative 64-bit integer")
        if self.threads < 1:
            raise ConfigError("threads must be positive")


@dataclass
class BootstrapResult:
    estimate: np.ndarray
    se: np.ndarray
    replicates: np.ndarray  # (replications, k), NaN rows where the statistic failed
    n_failed: int

    @property
    def n_ok(self) -> int:
        return self.replicates.shape[0] - self.n_failed


def seed_salt(*parts: object) -> int:
    """Stable 32-bit salt from arbitrary key parts (cell keys and the like)."""
    text = "|".join(str(p) for p in parts)
    return zlib.crc32(text.encode("utf-8"))


def _cluster_blocks(
    frame: pd.DataFrame, cfg: BootstrapConfig
) -> list[tuple[str, list[np.ndarray]]]:
    """Per cohort: positions of each school's rows, in sorted deterministic order."""
    cohorts = frame[cfg.cohort_key].to_numpy(dtype=str)
    schools = frame[cfg.cluster_key].to_numpy(dtype=str)
    pos = np.arange(len(frame))
    blocks = []
    for cohort in sorted(np.unique(cohorts)):
        in_cohort = cohorts == cohort
        members = []
        cohort_schools = schools[in_cohort]
        cohort_pos = pos[in_cohort]
        for school in sorted(np.unique(cohort_schools)):
            members.append(cohort_pos[cohort_schools == school])
        blocks.append((cohort, members))
    return blocks


def block_bootstrap(
    frame: pd.DataFrame,
    statistic: Callable[[pd.DataFrame], object],
    cfg: BootstrapConfig,
    salt: int = 0,
) -> BootstrapResult:
    """Cluster bootstrap of ``statistic`` (scalar- or vector-valued).

    Schools are drawn with replacement within each cohort (as many as the
    cohort has); all rows of a drawn school enter the replicate, repeated
    rows included. A replicate where the statistic raises an estimation
    error is recorded as missing; if every replicate fails, that is an error.
    """
    estimate = np.atleast_1d(np.asarray(statistic(frame), dtype=float))
    blocks = _cluster_blocks(frame, cfg)
    n_clusters = sum(len(members) for _, members in blocks)
    if n_clusters <= 1:
        warnings.warn("only one cluster: bootstrap SE is identically zero", stacklevel=2)

    def one_replicate(r: int) -> np.ndarray | None:
        rng = np.random.default_rng([cfg.seed, salt, r])
        chosen: list[np.ndarray] = []
        for _, members in blocks:
            draws = rng.integers(0, len(members), size=len(members))
            chosen.extend(members[i] for i in draws)
        positions = np.concatenate(chosen) if chosen else np.empty(0, dtype=int)
        resampled = frame.iloc[positions]
        try:
            return np.atleast_1d(np.asarray(statistic(resampled), dtype=float))
        except (EstimationError, ArithmeticError, np.linalg.LinAlgError):
            return None

    results: list[np.ndarray | None]
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(one_replicate, range(cfg.replications)))
    else:
        results = [one_replicate(r) for r in range(cfg.replications)]

    replicates = np.full((cfg.replications, estimate.size), np.nan)
    n_failed = 0
    for r, value in enumerate(results):
        if value is None or value.size != estimate.size:
            n_failed += 1
            continue
        replicates[r] = value
    if n_failed == cfg.replications:
        raise BootstrapFailure("all bootstrap replicates failed", replications=cfg.replications)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # single surviving replicate
        se = np.nanstd(replicates, axis=0, ddof=1)
    return BootstrapResult(estimate=estimate, se=se, replicates=replicates, n_failed=n_failed)


def holm_bonferroni(pvalues) -> np.ndarray:
    """Step-down adjusted p-values, returned in the input order.

    Sorted ascending, the i-th smallest is multiplied by (m - i) and a
    running maximum enforces monotonicity; everything is capped at 1.
    """
    p = np.asarray(list(pvalues), dtype=float)
    if p.size == 0:
        return p
    if np.any((p < 0) | (p > 1) | ~np.isfinite(p)):
        raise ConfigError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    factors = m - np.arange(m)
    stepped = np.minimum(1.0, np.maximum.accumulate(factors * p[order]))
    adjusted = np.empty(m)
    adjusted[order] = stepped
    return adjusted


def balance_test(
    frame: pd.DataFrame,
    covariate_columns: tuple[str, ...],
    cfg: BootstrapConfig,
    salt: int = 0,
) -> pd.DataFrame:
    """Equal-means tests across the two arms for every covariate column.

    The difference's standard error comes from the school-block bootstrap
    (one replicate set shared by all covariates); p-values are two-sided
    normal and Holm-adjusted within this family. A covariate with no
    variation gets a flagged p of 1.
    """
    if not covariate_columns:
        raise ConfigError("no covariate columns to test")

    def arm_diffs(f: pd.DataFrame) -> np.ndarray:
        z = f[COL_Z].to_numpy()
        at = z == ARM_AT
        below = z == ARM_BELOW
        if not at.any() or not below.any():
            raise EstimationError("a replicate lost an arm")
        values = f[list(covariate_columns)].to_numpy(dtype=float)
        return values[at].mean(axis=0) - values[below].mean(axis=0)

    boot = block_bootstrap(frame, arm_diffs, cfg, salt=salt)
    z = frame[COL_Z].to_numpy()
    values = frame[list(covariate_columns)].to_numpy(dtype=float)
    mean_at = values[z == ARM_AT].mean(axis=0)
    mean_below = values[z == ARM_BELOW].mean(axis=0)
    diff = boot.estimate
    se = boot.se

    pvals = np.empty(len(covariate_columns))
    degenerate = np.zeros(len(covariate_columns), dtype=bool)
    for i in range(len(covariate_columns)):
        no_variation = values[:, i].std() == 0.0
        if no_variation or se[i] == 0.0:
            degenerate[i] = True
            pvals[i] = 1.0 if (no_variation or diff[i] == 0.0) else 0.0
        else:
            pvals[i] = 2.0 * float(norm.sf(abs(diff[i] / se[i])))
    adjusted = holm_bonferroni(pvals)
    return pd.DataFrame(
        {
            "covariate": list(covariate_columns),
            "mean_at": mean_at,
            "mean_below": mean_below,
            "diff": diff,
            "se": se,
            "p_value": pvals,
            "p_holm": adjusted,
            "degenerate": degenerate,
        }
    )
