import numpy as np
import pandas as pd
import pytest

from conftest import cell_frame
from strata_bounds.domain import ALL_STRATA, ARM_AT, ARM_BELOW
from strata_bounds.errors import ConfigError, EstimationError
from strata_bounds.inference import BootstrapConfig
from strata_bounds.unconfounded import (
    apce_point,
    apce_points,
    below_median_indicator,
    fairness_table,
    fit_principal_scores,
    group_delta,
    stratum_weights,
)


def random_frame(rng, n=300):
    frame = cell_frame(
        {
            (ARM_AT, 1, 1): n // 4,
            (ARM_AT, 0, 0): n // 4,
            (ARM_BELOW, 1, 1): n // 4,
            (ARM_BELOW, 0, 0): n // 4,
        },
        n_schools=10,
    )
    frame["x"] = rng.standard_normal(len(frame))
    frame["g"] = rng.integers(0, 2, size=len(frame)).astype(float)
    # completion must respond to the upgrade or the responsive score clamps
    # to zero everywhere and the stratum is numerically empty
    at = (frame["z"] == ARM_AT).to_numpy()
    frame["R"] = (rng.random(len(frame)) < 0.2 + 0.1 * frame["g"] + 0.4 * at).astype(int)
    frame["Y"] = (
        rng.random(len(frame)) < 0.2 + 0.1 * frame["g"] + 0.4 * frame["R"]
    ).astype(int)
    return frame


def test_scores_sum_to_one_when_unclamped(rng):
    frame = random_frame(rng)
    scores = fit_principal_scores(frame, ("x", "g"))
    total = scores.e_responsive + scores.e_always_high + scores.e_always_low
    unclamped = scores.e_responsive > 0
    assert np.allclose(total[unclamped], 1.0, atol=1e-12)
    assert (total >= 1.0 - 1e-12).all()


def test_stratum_weights_average_exactly_one(rng):
    for _ in range(10):
        frame = random_frame(rng)
        scores = fit_principal_scores(frame, ("x", "g"))
        for stratum in ALL_STRATA:
            w = stratum_weights(scores, stratum)
            assert w.mean() == pytest.approx(1.0, abs=1e-10)
            assert (w >= 0).all()


def test_principal_scores_need_both_recommendation_groups():
    frame = cell_frame({(ARM_AT, 1, 1): 10, (ARM_BELOW, 1, 0): 10})
    frame["x"] = 0.5
    with pytest.raises(EstimationError):
        fit_principal_scores(frame, ("x",))


def test_apce_point_with_flat_scores_is_plain_first_stage(rng):
    # covariate-free scores are constant, so every weight is exactly 1 and
    # the weighted contrast collapses to the raw upgrade-share difference
    frame = random_frame(rng)
    scores = fit_principal_scores(frame, ())
    point = apce_point(frame, scores, "H")
    z = frame["z"].to_numpy()
    r = frame["R"].to_numpy(dtype=float)
    raw = r[z == ARM_AT].mean() - r[z == ARM_BELOW].mean()
    assert point == pytest.approx(raw, abs=1e-12)


def test_apce_points_cover_all_strata(rng):
    frame = random_frame(rng)
    points = apce_points(frame, ("x", "g"))
    assert set(points) == set(ALL_STRATA)
    assert all(np.isfinite(v) for v in points.values())


def test_group_delta_antisymmetric_under_coding_swap(rng):
    frame = random_frame(rng)
    frame["g_flip"] = 1.0 - frame["g"]
    for stratum in ALL_STRATA:
        d = group_delta(frame, "g", ("x", "g"), stratum, ARM_AT)
        d_flip = group_delta(frame, "g_flip", ("x", "g_flip"), stratum, ARM_AT)
        assert d_flip == -d


def test_group_delta_validates_inputs(rng):
    frame = random_frame(rng)
    frame["bad"] = frame["x"]
    with pytest.raises(ConfigError):
        group_delta(frame, "bad", ("x",), "H", ARM_AT)
    with pytest.raises(ConfigError):
        group_delta(frame, "g", ("x",), "H", "else")


def test_group_delta_detects_an_injected_gap(rng):
    # group 1 upgraded far more often in the at arm, same covariates
    frame = random_frame(rng, n=2000)
    z = frame["z"].to_numpy()
    g = frame["g"].to_numpy()
    boost = (z == ARM_AT) & (g == 1.0) & (rng.random(len(frame)) < 0.5)
    frame.loc[boost, "R"] = 1
    delta = group_delta(frame, "g", ("x",), "H", ARM_AT)
    assert delta > 0.15


def test_fairness_table_layout_and_determinism(rng):
    frame = random_frame(rng, n=400)
    cfg = BootstrapConfig(replications=40, seed=21)
    t1 = fairness_table(frame, "g", ("x", "g"), cfg, salt=2, label="toy")
    t2 = fairness_table(frame, "g", ("x", "g"), cfg, salt=2, label="toy")
    pd.testing.assert_frame_equal(t1, t2)
    assert list(t1.columns) == [
        "group",
        "attribute",
        "stratum",
        "z",
        "delta",
        "se",
        "ci_low",
        "ci_high",
        "n_failed_replicates",
    ]
    assert len(t1) == len(ALL_STRATA) * 2
    assert (t1["ci_low"] <= t1["ci_high"]).all()
    assert set(t1["group"]) == {"toy"}


def test_below_median_indicator_splits_within_cohort():
    frame = pd.DataFrame(
        {
            "cohort": ["a"] * 4 + ["b"] * 4,
            "income": [1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0],
        }
    )
    flag = below_median_indicator(frame, "income")
    assert list(flag) == [1, 1, 0, 0, 1, 1, 0, 0]
