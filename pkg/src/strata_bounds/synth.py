"""Synthetic school data with fully known latent structure.

The generator draws schools, assigns students to tracks and cohorts, gives
every student a latent stratum and a latent compliance type (complier:
upgraded only when scoring at the cutoff; never-upgraded; always-upgraded),
then realizes scores, recommendations, and completions. Ground truth — the
complier share within each stratum, which is exactly the effect the bounds
and the point estimators target — is computed by enumerating the generated
latent labels, never by re-estimation.

School leniency ties the covariate structure together: a lenient school has
more students scoring at the cutoff and more never-upgraded students, which
is what gives the leniency proxy its explanatory power downstream.

A nonzero ``eta_direct`` adds a direct completion effect of scoring at the
cutoff: completion probabilities shift additively by ``eta_direct`` in the
at arm for both recommendation values, implemented as a coupled uplift on
records whose base potential is zero (rate ``eta / mass``, exact at the
population level for each recommendation arm separately). With zero eta the
generated potential table satisfies the exclusion restriction exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .domain import (
    DEFAULT_LADDER,
    REQUIRED_COLUMNS,
    CellKey,
    Stratum,
    TrackLadder,
)
from .errors import ConfigError, EmptyStratum
from .ingest import CovariateSpec, Dataset, assemble_dataset, schema_to_json

COMPLIER = "C"
NEVER_UPGRADED = "NT"
ALWAYS_UPGRADED = "AT"

STRATA_ORDER = (Stratum.ALWAYS_LOW.value, Stratum.ALWAYS_HIGH.value, Stratum.RESPONSIVE.value)

SYNTH_COVARIATES = (
    CovariateSpec("subgroup", "binary"),
    CovariateSpec("aptitude", "categorical"),
    CovariateSpec("income", "real"),
    CovariateSpec("x_noise", "real"),
)


def _check_probs(probs: dict, keys: tuple[str, ...], what: str) -> None:
    if set(probs) != set(keys):
        raise ConfigError(f"{what} must have keys {keys}", got=sorted(probs))
    values = [probs[k] for k in keys]
    if any(v < 0 for v in values) or abs(sum(values) - 1.0) > 1e-9:
        raise ConfigError(f"{what} must be nonnegative and sum to 1", got=values)


@dataclass(frozen=True)
class StratumModel:
    """Stratum shares, constant or varying over one discrete covariate.

    ``by_level`` maps level values (as strings) of ``covariate`` to stratum
    probability dicts; without it ``base`` applies to everyone. A saturated
    per-level table is the covariate-dependent form.
    """

    base: dict = field(default_factory=lambda: {"AL": 0.45, "AH": 0.26, "H": 0.29})
    covariate: str | None = None
    by_level: dict | None = None

    def __post_init__(self):
        _check_probs(self.base, STRATA_ORDER, "stratum probabilities")
        if (self.by_level is None) != (self.covariate is None):
            raise ConfigError("covariate and by_level must be given together")
        if self.by_level is not None:
            for level, probs in self.by_level.items():
                _check_probs(probs, STRATA_ORDER, f"stratum probabilities at level {level}")

    def prob_matrix(self, levels: np.ndarray) -> np.ndarray:
        """(n, 3) stratum probabilities in STRATA_ORDER for given level values."""
        if self.by_level is None:
            row = np.array([self.base[s] for s in STRATA_ORDER])
            return np.tile(row, (len(levels), 1))
        table = {}
        for level, probs in self.by_level.items():
            table[str(level)] = np.array([probs[s] for s in STRATA_ORDER])
        try:
            return np.stack([table[str(v)] for v in levels])
        except KeyError as err:
            raise ConfigError(f"no stratum probabilities for level {err}") from None

    def marginal(self, level_probs: dict | None) -> dict:
        """Population stratum shares given the covariate's level distribution."""
        if self.by_level is None:
            return dict(self.base)
        if level_probs is None:
            raise ConfigError("level distribution required for covariate-dependent strata")
        out = {s: 0.0 for s in STRATA_ORDER}
        for level, p in level_probs.items():
            probs = self.by_level[str(level)]
            for s in STRATA_ORDER:
                out[s] += p * probs[s]
        return out

    def degenerate_level_map(self) -> dict | None:
        """level -> stratum when every level pins a single stratum, else None."""
        if self.by_level is None:
            return None
        mapping = {}
        for level, probs in self.by_level.items():
            top = max(probs, key=probs.get)
            if probs[top] < 1.0:
                return None
            mapping[str(level)] = top
        return mapping


@dataclass(frozen=True)
class Discrimination:
    """Extra upgrades for attribute = 1 students.

    ``extra_rate`` moves that much never-upgraded mass into the complier
    type. With a target ``stratum`` the boost applies only where the stratum
    model is level-degenerate for that stratum, so the boost stays a
    function of observed covariates.
    """

    attribute: str = "subgroup"
    extra_rate: float = 0.1
    stratum: str | None = None


@dataclass(frozen=True)
class SynthConfig:
    n_schools: int = 200
    students_per_school: tuple[float, float] = (100.0, 8.0)  # mean, dispersion
    cohorts: tuple[str, ...] = ("2015", "2016")
    track_mix: dict | None = None  # default: uniform over upgradeable tracks
    strata: StratumModel = field(default_factory=StratumModel)
    compliance: dict = field(
        default_factory=lambda: {"C": 0.10, "NT": 0.885, "AT": 0.015}
    )
    score_at_prob: float = 0.43
    eta_direct: float = 0.0
    leniency: tuple[float, float] = (0.0, 0.0)  # (at-share shift, never-upgraded shift)
    discrimination: Discrimination | None = None
    attribute_prob: float = 0.5
    aptitude_probs: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    ladder: TrackLadder = DEFAULT_LADDER

    def __post_init__(self):
        if self.n_schools < 1:
            raise ConfigError("need at least one school")
        _check_probs(self.compliance, (COMPLIER, NEVER_UPGRADED, ALWAYS_UPGRADED), "compliance")
        if not 0.0 < self.score_at_prob < 1.0:
            raise ConfigError("score_at_prob must be inside (0, 1)")
        if not -0.2 <= self.eta_direct <= 0.2:
            raise ConfigError("eta_direct must lie in [-0.2, 0.2]")
        if not 0.0 < self.attribute_prob < 1.0:
            raise ConfigError("attribute_prob must be inside (0, 1)")
        if abs(sum(self.aptitude_probs) - 1.0) > 1e-9 or min(self.aptitude_probs) < 0:
            raise ConfigError("aptitude_probs must be a distribution")
        if self.track_mix is not None:
            ids = {t.track_id for t in self.ladder.upgradeable_tracks}
            unknown = set(self.track_mix) - ids
            if unknown:
                raise ConfigError(f"track_mix has non-upgradeable tracks: {sorted(unknown)}")
            if abs(sum(self.track_mix.values()) - 1.0) > 1e-9:
                raise ConfigError("track_mix must sum to 1")

    def level_distribution(self) -> dict | None:
        """Distribution of the stratum model's covariate, if it has one."""
        if self.strata.covariate is None:
            return None
        if self.strata.covariate == "aptitude":
            return {str(i): p for i, p in enumerate(self.aptitude_probs)}
        if self.strata.covariate == "subgroup":
            return {"0": 1.0 - self.attribute_prob, "1": self.attribute_prob}
        raise ConfigError(
            f"stratum model covariate {self.strata.covariate!r} is not generated"
        )


@dataclass
class SynthTruth:
    """Exact latent bookkeeping for one generated dataset."""

    labels: pd.DataFrame
    apce: dict
    apce_by_cell: dict
    stratum_shares: dict
    compliance_shares: dict
    eta_nt: float
    deltas: dict

    def truth_apce(self, stratum: str, cell: CellKey | None = None) -> float:
        if cell is None:
            value = self.apce.get(stratum)
        else:
            value = self.apce_by_cell.get((cell.cohort, cell.track, stratum))
        if value is None or not np.isfinite(value):
            raise EmptyStratum(
                f"stratum {stratum} is empty in {'the population' if cell is None else cell}",
                stratum=stratum,
            )
        return float(value)


def truth_apce(truth: SynthTruth, stratum: str, cell: CellKey | None = None) -> float:
    return truth.truth_apce(stratum, cell)


def _school_cohort_sizes(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    mean, dispersion = cfg.students_per_school
    count = cfg.n_schools * len(cfg.cohorts)
    if dispersion <= 0:
        return np.full(count, max(1, round(mean)), dtype=int)
    p = dispersion / (dispersion + mean)
    return np.maximum(rng.negative_binomial(dispersion, p, size=count), 1)


def generate(cfg: SynthConfig) -> tuple[Dataset, SynthTruth]:
    """Draw one dataset and its exact latent truth."""
    rng = np.random.default_rng(cfg.seed)
    at_scale, nt_scale = cfg.leniency
    leniency = np.clip(rng.standard_normal(cfg.n_schools), -3.0, 3.0)

    sizes = _school_cohort_sizes(cfg, rng)
    school_of_unit = np.repeat(
        np.tile(np.arange(cfg.n_schools), len(cfg.cohorts)), sizes
    )
    cohort_of_unit = np.repeat(
        np.repeat(np.array(cfg.cohorts, dtype=object), cfg.n_schools), sizes
    )
    n = len(school_of_unit)

    mix = cfg.track_mix
    if mix is None:
        tracks = [t.track_id for t in cfg.ladder.upgradeable_tracks]
        mix = {t: 1.0 / len(tracks) for t in tracks}
    track_ids = sorted(mix, key=cfg.ladder.track_order)
    track_probs = np.array([mix[t] for t in track_ids])
    track = rng.choice(np.array(track_ids, dtype=object), size=n, p=track_probs)

    subgroup = (rng.random(n) < cfg.attribute_prob).astype(int)
    aptitude = rng.choice(len(cfg.aptitude_probs), size=n, p=np.array(cfg.aptitude_probs))
    income = rng.normal(5.0, 1.0, size=n)
    x_noise = rng.standard_normal(n)

    levels = {"aptitude": aptitude.astype(str), "subgroup": subgroup.astype(str)}
    if cfg.strata.covariate is None:
        stratum_probs = cfg.strata.prob_matrix(np.empty(n))
    else:
        stratum_probs = cfg.strata.prob_matrix(levels[cfg.strata.covariate])
    cum = np.cumsum(stratum_probs, axis=1)
    u_strata = rng.random(n)
    stratum_idx = (u_strata[:, None] >= cum).sum(axis=1)
    stratum = np.array(STRATA_ORDER, dtype=object)[stratum_idx]

    c_i = np.full(n, cfg.compliance[COMPLIER])
    at_share = cfg.compliance[ALWAYS_UPGRADED]
    shift = nt_scale * leniency[school_of_unit]
    c_i = c_i - shift
    if cfg.discrimination is not None:
        disc = cfg.discrimination
        boosted = levels[disc.attribute] == "1" if disc.attribute in levels else None
        if boosted is None:
            raise ConfigError(f"unknown discrimination attribute {disc.attribute!r}")
        if disc.stratum is not None:
            level_map = cfg.strata.degenerate_level_map()
            if level_map is None:
                raise ConfigError(
                    "stratum-targeted discrimination needs a level-degenerate stratum model"
                )
            target_levels = {lv for lv, s in level_map.items() if s == disc.stratum}
            boosted = boosted & np.isin(levels[cfg.strata.covariate], sorted(target_levels))
        c_i = c_i + disc.extra_rate * boosted
    if (c_i < 0).any() or (c_i > 1.0 - at_share).any():
        raise ConfigError(
            "complier share leaves [0, 1 - always-upgraded share]; "
            "lower leniency or the discrimination rate"
        )
    u_comp = rng.random(n)
    compliance = np.where(
        u_comp < c_i, COMPLIER, np.where(u_comp < c_i + at_share, ALWAYS_UPGRADED, NEVER_UPGRADED)
    ).astype(object)

    p_at = np.clip(cfg.score_at_prob + at_scale * leniency[school_of_unit], 0.01, 0.99)
    z_at = rng.random(n) < p_at

    r1 = (compliance == ALWAYS_UPGRADED) | (compliance == COMPLIER)
    r0 = compliance == ALWAYS_UPGRADED
    r_obs = np.where(z_at, r1, r0)

    base_y_r0 = stratum == Stratum.ALWAYS_HIGH.value
    base_y_r1 = base_y_r0 | (stratum == Stratum.RESPONSIVE.value)

    marg = cfg.strata.marginal(cfg.level_distribution())
    eta = cfg.eta_direct
    if eta > 0:
        mass_r0 = marg["AL"] + marg["H"]
        mass_r1 = marg["AL"]
        if eta > min(mass_r0, mass_r1):
            raise ConfigError("eta_direct exceeds the mass available for uplift")
        v = rng.random(n)
        up_r0 = v < eta / mass_r0
        up_r1 = v < eta / mass_r1  # coupled: the uplift never reverses in r
        y_at_r0 = base_y_r0 | (up_r0 & ~base_y_r0)
        y_at_r1 = base_y_r1 | (up_r1 & ~base_y_r1)
        rate_r0 = eta / mass_r0
    elif eta < 0:
        mass_r0 = marg["AH"]
        mass_r1 = marg["AH"] + marg["H"]
        if -eta > min(mass_r0, mass_r1):
            raise ConfigError("eta_direct exceeds the mass available for downlift")
        v = rng.random(n)
        down_r0 = v < -eta / mass_r0
        down_r1 = v < -eta / mass_r1
        y_at_r0 = base_y_r0 & ~down_r0
        y_at_r1 = base_y_r1 & ~down_r1
        rate_r0 = eta / mass_r0
    else:
        y_at_r0 = base_y_r0
        y_at_r1 = base_y_r1
        rate_r0 = 0.0

    y_obs = np.where(
        z_at,
        np.where(r_obs, y_at_r1, y_at_r0),
        np.where(r_obs, base_y_r1, base_y_r0),
    )

    cutoff = np.array([cfg.ladder.track(t).cutoff for t in track])
    score = np.where(z_at, cutoff, cutoff - 1)

    raw = pd.DataFrame(
        {
            "student_id": [f"S{i:07d}" for i in range(n)],
            "school_id": [f"SCH{j:04d}" for j in school_of_unit],
            "cohort": cohort_of_unit.astype(str),
            "track": track.astype(str),
            "score": score,
            "R": r_obs.astype(int),
            "Y": y_obs.astype(int),
            "subgroup": subgroup,
            "aptitude": aptitude.astype(str),
            "income": income,
            "x_noise": x_noise,
        }
    )
    dataset = assemble_dataset(raw, SYNTH_COVARIATES, cfg.ladder)

    labels = pd.DataFrame(
        {
            "student_id": raw["student_id"],
            "school_id": raw["school_id"],
            "cohort": raw["cohort"],
            "track": raw["track"],
            "stratum": stratum.astype(str),
            "compliance": compliance.astype(str),
            "subgroup": subgroup,
            "r_if_at": r1.astype(int),
            "r_if_below": r0.astype(int),
        }
    )
    truth = _enumerate_truth(labels, base_y_r0, rate_r0)
    return dataset, truth


def _enumerate_truth(
    labels: pd.DataFrame, base_y_r0: np.ndarray, rate_r0: float
) -> SynthTruth:
    stratum = labels["stratum"].to_numpy()
    compliance = labels["compliance"].to_numpy()
    is_complier = compliance == COMPLIER
    n = len(labels)

    apce = {}
    for s in STRATA_ORDER:
        members = stratum == s
        apce[s] = float(is_complier[members].mean()) if members.any() else float("nan")

    apce_by_cell = {}
    key = pd.DataFrame(
        {
            "cohort": labels["cohort"],
            "track": labels["track"],
            "stratum": labels["stratum"],
            "complier": is_complier,
        }
    )
    for (cohort, track, s), sub in key.groupby(["cohort", "track", "stratum"]):
        apce_by_cell[(str(cohort), str(track), str(s))] = float(sub["complier"].mean())

    stratum_shares = {s: float((stratum == s).mean()) for s in STRATA_ORDER}
    compliance_shares = {
        g: float((compliance == g).mean())
        for g in (COMPLIER, NEVER_UPGRADED, ALWAYS_UPGRADED)
    }

    never = compliance == NEVER_UPGRADED
    if never.any() and rate_r0 != 0.0:
        if rate_r0 > 0:
            eta_nt = rate_r0 * float((~base_y_r0[never]).mean())
        else:
            eta_nt = rate_r0 * float(base_y_r0[never].mean())
    else:
        eta_nt = 0.0

    deltas = {}
    sub = labels["subgroup"].to_numpy()
    for s in STRATA_ORDER:
        for arm_col, z in (("r_if_at", 1), ("r_if_below", 0)):
            r_pot = labels[arm_col].to_numpy()
            g1 = (stratum == s) & (sub == 1)
            g0 = (stratum == s) & (sub == 0)
            if g1.any() and g0.any():
                deltas[(s, z)] = float(r_pot[g1].mean() - r_pot[g0].mean())
            else:
                deltas[(s, z)] = float("nan")

    return SynthTruth(
        labels=labels,
        apce=apce,
        apce_by_cell=apce_by_cell,
        stratum_shares=stratum_shares,
        compliance_shares=compliance_shares,
        eta_nt=float(eta_nt),
        deltas=deltas,
    )


def write_outputs(
    dataset: Dataset,
    truth: SynthTruth,
    out_dir: str | Path,
    debug_labels: bool = False,
) -> None:
    """Write the loadable CSV, its schema, and the truth bundle."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = list(REQUIRED_COLUMNS) + [c.name for c in dataset.covariates]
    table = dataset.frame[columns].copy()
    for cov in dataset.covariates:
        if cov.kind == "binary":  # stored as float; the loader wants 0/1 tokens
            table[cov.name] = table[cov.name].astype(int)
    table.to_csv(out / "data.csv", index=False)
    schema_to_json(dataset.covariates, out / "schema.json")
    payload = {
        "apce": truth.apce,
        "apce_by_cell": {
            f"{cohort}|{track}|{stratum}": value
            for (cohort, track, stratum), value in sorted(truth.apce_by_cell.items())
        },
        "stratum_shares": truth.stratum_shares,
        "compliance_shares": truth.compliance_shares,
        "eta_nt": truth.eta_nt,
        "deltas": {f"{s}|z={z}": v for (s, z), v in sorted(truth.deltas.items())},
    }
    (out / "truth.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if debug_labels:
        truth.labels.to_csv(out / "latent.csv", index=False)
