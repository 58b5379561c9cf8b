"""Shared builders for hand-constructed estimation cells.

Most unit tests work on tiny frames with exact integer counts per
(arm, recommendation, completion) pattern so that every share is a small
rational and expected values can be written down exactly.
"""

from __future__ import annotations

import itertools

import numpy as np
import pandas as pd
import pytest

from strata_bounds.domain import ARM_AT, ARM_BELOW, COL_Z, COL_ZTILDE, DEFAULT_LADDER


def cell_frame(
    counts: dict,
    track: str = "V:BL",
    cohort: str = "2015",
    n_schools: int = 4,
    z_tilde: float = 0.5,
    extra: dict | None = None,
) -> pd.DataFrame:
    """Frame with exact per-pattern counts.

    ``counts`` maps (arm, R, Y) to a row count; arms are 'at'/'below'.
    Schools are assigned cyclically so block bootstraps have clusters.
    ``extra`` adds constant-per-pattern covariate columns: name -> dict
    mapping the same keys to values (or a scalar for all rows).
    """
    cutoff = DEFAULT_LADDER.track(track).cutoff
    rows = []
    for (arm, r, y), n in counts.items():
        assert arm in (ARM_AT, ARM_BELOW)
        for _ in range(n):
            rows.append({"z": arm, "R": r, "Y": y})
    frame = pd.DataFrame(rows)
    idx = np.arange(len(frame))
    frame["student_id"] = [f"S{i:05d}" for i in idx]
    frame["school_id"] = [f"SCH{i % n_schools:03d}" for i in idx]
    frame["cohort"] = cohort
    frame["track"] = track
    frame["score"] = np.where(frame[COL_Z] == ARM_AT, cutoff, cutoff - 1)
    frame[COL_ZTILDE] = z_tilde
    if extra:
        for name, spec in extra.items():
            if isinstance(spec, dict):
                keys = list(counts)
                values = list(
                    itertools.chain.from_iterable(
                        [spec[k]] * counts[k] for k in keys
                    )
                )
                frame[name] = values
            else:
                frame[name] = spec
    return frame


def balanced_latent_frame(population: list[tuple[str, str, int]]) -> pd.DataFrame:
    """Realize a latent population once in each arm.

    ``population`` lists (stratum, compliance, count). Every latent unit
    appears twice, once per arm, with its exact realized recommendation and
    completion, so sample shares equal population shares in both arms.
    """
    base_y = {"AL": (0, 0), "AH": (1, 1), "H": (0, 1)}  # (y at r=0, y at r=1)
    r_of = {"C": (0, 1), "NT": (0, 0), "AT": (1, 1)}  # (r below, r at)
    counts = {}
    for stratum, comp, n in population:
        y0, y1 = base_y[stratum]
        r_b, r_a = r_of[comp]
        counts[(ARM_BELOW, r_b, y1 if r_b else y0)] = (
            counts.get((ARM_BELOW, r_b, y1 if r_b else y0), 0) + n
        )
        counts[(ARM_AT, r_a, y1 if r_a else y0)] = (
            counts.get((ARM_AT, r_a, y1 if r_a else y0), 0) + n
        )
    return cell_frame(counts)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
