"""Core types: track ladders, cutoff instruments, and principal strata.

Students sit a nationwide placement test scored on a fixed integer range and
receive a binary teacher recommendation (upgraded above the test-implied
track or not). Every track except the top one has a cutoff score. A student
scoring exactly at the cutoff and one scoring one point below are locally
exchangeable, which defines the two instrument arms used everywhere else in
the package; all other scores fall in a third, unused arm.

The leniency proxy of a school-cohort is the fraction of its students who
scored at or above the cutoff of their own track. It is a school-level
quantity: every student of the same school-cohort carries the same value.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError, NotUpgradeable, ScoreOutOfRange

ARM_BELOW = "below"
ARM_AT = "at"
ARM_ELSE = "else"

COL_Z = "z"
COL_ZTILDE = "z_tilde"

REQUIRED_COLUMNS = ("student_id", "school_id", "cohort", "track", "score", "R", "Y")


class Stratum(str, enum.Enum):
    """Principal strata of the completion outcome under each recommendation.

    RESPONSIVE completes the higher track only when recommended up (code H),
    ALWAYS_HIGH completes it either way (AH), ALWAYS_LOW never does (AL).
    The fourth combination is ruled out by assumption and never appears.
    """

    RESPONSIVE = "H"
    ALWAYS_HIGH = "AH"
    ALWAYS_LOW = "AL"


ALL_STRATA = (Stratum.RESPONSIVE.value, Stratum.ALWAYS_HIGH.value, Stratum.ALWAYS_LOW.value)


@dataclass(frozen=True)
class TrackSpec:
    """One secondary track: identifier and the test cutoff for entering it.

    The top track has no cutoff (``None``): its students cannot be upgraded
    and are rejected at ingest.
    """

    track_id: str
    cutoff: int | None

    @property
    def is_top(self) -> bool:
        return self.cutoff is None

    @property
    def group(self) -> str:
        """Coarse track family derived from the id prefix (``V:`` or ``A:``)."""
        if self.track_id.startswith("V:"):
            return "vocational"
        if self.track_id.startswith("A:"):
            return "academic"
        return "other"


@dataclass(frozen=True)
class TrackLadder:
    """Ordered tracks plus the legal score range.

    Cutoffs must be non-decreasing along the ladder and leave room for the
    one-point-below arm inside the score range.
    """

    tracks: tuple[TrackSpec, ...]
    score_min: int = 501
    score_max: int = 550
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.score_min >= self.score_max:
            raise ConfigError("score range is empty")
        seen: dict[str, TrackSpec] = {}
        prev = None
        for spec in self.tracks:
            if spec.track_id in seen:
                raise ConfigError(f"duplicate track id: {spec.track_id}")
            seen[spec.track_id] = spec
            if spec.cutoff is None:
                continue
            if not self.score_min < spec.cutoff <= self.score_max:
                raise ConfigError(
                    f"cutoff {spec.cutoff} of {spec.track_id} outside "
                    f"({self.score_min}, {self.score_max}]"
                )
            if prev is not None and spec.cutoff < prev:
                raise ConfigError("cutoffs must be non-decreasing along the ladder")
            prev = spec.cutoff
        object.__setattr__(self, "_by_id", seen)

    def track(self, track_id: str) -> TrackSpec:
        try:
            return self._by_id[track_id]
        except KeyError:
            raise ConfigError(f"unknown track: {track_id}", track=track_id) from None

    def track_order(self, track_id: str) -> int:
        self.track(track_id)
        return next(i for i, t in enumerate(self.tracks) if t.track_id == track_id)

    @property
    def upgradeable_tracks(self) -> tuple[TrackSpec, ...]:
        return tuple(t for t in self.tracks if not t.is_top)

    def assign_arm(self, score: int, track_id: str) -> str:
        """Instrument arm of one student: ``at``, ``below``, or ``else``."""
        spec = self.track(track_id)
        if spec.is_top:
            raise NotUpgradeable(f"track {track_id} has no higher track", track=track_id)
        if not self.score_min <= score <= self.score_max:
            raise ScoreOutOfRange(
                f"score {score} outside [{self.score_min}, {self.score_max}]",
                score=score,
            )
        if score == spec.cutoff:
            return ARM_AT
        if score == spec.cutoff - 1:
            return ARM_BELOW
        return ARM_ELSE


DEFAULT_LADDER = TrackLadder(
    tracks=(
        TrackSpec("V:BL", 519),
        TrackSpec("V:BL/KL", 526),
        TrackSpec("V:KL", 529),
        TrackSpec("V:KL/GT", 529),
        TrackSpec("V:GT", 533),
        TrackSpec("V:GT/HAVO", 537),
        TrackSpec("A:HAVO", 540),
        TrackSpec("A:HAVO/VWO", 545),
        TrackSpec("A:VWO", None),
    )
)


def assign_instrument(score: int, track_id: str, ladder: TrackLadder = DEFAULT_LADDER) -> str:
    """Module-level convenience wrapper around :meth:`TrackLadder.assign_arm`."""
    return ladder.assign_arm(score, track_id)


@dataclass(frozen=True)
class CellKey:
    """Estimation cell: one cohort of one track."""

    cohort: str
    track: str

    def label(self) -> str:
        return f"{self.track} {self.cohort}"


@dataclass(frozen=True)
class StudentRecord:
    """One validated student row, including derived instrument columns."""

    student_id: str
    school_id: str
    cohort: str
    track: str
    score: int
    recommendation: int
    completion: int
    arm: str
    covariates: tuple[tuple[str, object], ...] = ()


def compute_z_tilde(frame: pd.DataFrame, ladder: TrackLadder = DEFAULT_LADDER) -> pd.Series:
    """Leniency proxy per school-cohort, broadcast back to student rows.

    The proxy is the within-school-cohort mean of the indicator that a
    student scored at or above the cutoff of their own track, computed over
    every row in ``frame`` (all arms, not only the near-cutoff ones). The
    result does not depend on row order.
    """
    cutoffs = frame["track"].map(
        {t.track_id: t.cutoff for t in ladder.tracks if t.cutoff is not None}
    )
    if cutoffs.isna().any():
        bad = frame.loc[cutoffs.isna(), "track"].unique()
        raise ConfigError(f"tracks without cutoffs in frame: {sorted(map(str, bad))}")
    above = (frame["score"].to_numpy() >= cutoffs.to_numpy()).astype(float)
    keyed = pd.DataFrame(
        {"school_id": frame["school_id"], "cohort": frame["cohort"], "above": above},
        index=frame.index,
    )
    return keyed.groupby(["school_id", "cohort"])["above"].transform("mean").rename(COL_ZTILDE)


def track_group(track_id: str) -> str:
    """Vocational/academic family of a track id (prefix convention)."""
    return TrackSpec(track_id, None).group


def arm_indicator(frame: pd.DataFrame) -> np.ndarray:
    """Float indicator for the at-cutoff arm, aligned to ``frame`` rows."""
    return (frame[COL_Z].to_numpy() == ARM_AT).astype(float)
