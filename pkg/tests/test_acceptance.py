"""Release gate: statistical validation of the full estimation stack.

Each test prints one verdict line with the measured quantities next to the
threshold it must clear. The Monte Carlo checks pin every seed, so a pass
here is reproducible bit for bit; the thresholds were chosen so that an
honest implementation clears them with room while a broken interval,
weighting, or resampling step lands far outside.
"""

import numpy as np
import pytest

from conftest import balanced_latent_frame
from strata_bounds.bounds import (
    BoundComponents,
    cell_statistic,
    estimate_cell,
    interval_from_components,
)
from strata_bounds.domain import ALL_STRATA, ARM_AT, ARM_BELOW
from strata_bounds.errors import EstimationError
from strata_bounds.estimation import AdjustmentSpec
from strata_bounds.inference import BootstrapConfig, balance_test, block_bootstrap
from strata_bounds.loss import DEFAULT_GRID, confusion_shares, loss_difference
from strata_bounds.pipeline import ApceBoundsAnalysis
from strata_bounds.sensitivity import estimate_eta, noer_cell_estimate
from strata_bounds.synth import Discrimination, StratumModel, SynthConfig, generate
from strata_bounds.unconfounded import apce_points_with_se, group_delta

RAW = AdjustmentSpec(mode="raw", covariate_columns=())


def _verdict(name: str, ok: bool, detail: str) -> None:
    print(f"{name}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"{name}: {detail}"


def test_criterion_1_reference_ratio_reproduction():
    # frozen component fixtures and the interval endpoints they must yield
    cases = [
        ("H", 0.0444, 0.6796, 0.6796, 0.0653, 1.0),
        ("AH", 0.0148, 0.2601, 0.2649, 0.0558, 0.0568),
        ("AL", 0.0508, 0.0563, 0.6940, 0.0733, 0.9026),
    ]
    worst = 0.0
    for stratum, num, dlb, dub, lb_ref, ub_ref in cases:
        interval = interval_from_components(
            BoundComponents(
                stratum=stratum,
                numerator_raw=num,
                denominator_lb=dlb,
                denominator_ub=dub,
            ),
            True,
        )
        worst = max(worst, abs(interval.apce_lb - lb_ref), abs(interval.apce_ub - ub_ref))
    _verdict(
        "criterion 1 (reference ratio reproduction)",
        worst <= 5e-4,
        f"max endpoint deviation {worst:.2e} (allowed 5e-04)",
    )


def test_criterion_2_zero_direct_effect_reduction():
    rng = np.random.default_rng(20240820)
    worst = 0.0
    compared = 0
    for _ in range(50):
        strata_draw = rng.dirichlet((4.0, 3.0, 3.0))
        comp_draw = rng.dirichlet((2.0, 6.0, 1.0))
        cfg = SynthConfig(
            seed=int(rng.integers(0, 2**31)),
            n_schools=12,
            students_per_school=(25.0, 4.0),
            track_mix={"V:BL": 0.6, "A:HAVO": 0.4},
            strata=StratumModel(
                base={"AL": strata_draw[0], "AH": strata_draw[1], "H": strata_draw[2]}
            ),
            compliance={"C": comp_draw[0], "NT": comp_draw[1], "AT": comp_draw[2]},
        )
        frame = generate(cfg)[0].near_cutoff().frame
        try:
            baseline = estimate_cell(frame, RAW)
        except EstimationError:
            with pytest.raises(EstimationError):
                noer_cell_estimate(frame, RAW, 0.0)
            continue
        relaxed = noer_cell_estimate(frame, RAW, 0.0)
        for er, no in zip(baseline, relaxed):
            for field in ("numerator", "denominator_lb", "denominator_ub", "apce_lb", "apce_ub"):
                worst = max(worst, abs(getattr(er, field) - getattr(no, field)))
            compared += 1
    _verdict(
        "criterion 2 (relaxed bounds reduce to baseline at zero)",
        worst <= 1e-12 and compared >= 120,
        f"max |difference| {worst:.2e} over {compared} stratum intervals (allowed 1e-12)",
    )


def test_criterion_3_interval_coverage_without_direct_effect():
    base = dict(
        n_schools=200,
        students_per_school=(100.0, 8.0),
        track_mix={"V:BL": 1.0},
        cohorts=("2015",),
        strata=StratumModel(base={"AL": 0.35, "AH": 0.30, "H": 0.35}),
        compliance={"C": 0.40, "NT": 0.45, "AT": 0.15},
        score_at_prob=0.43,
    )
    runs = 200
    hits = {s: 0 for s in ALL_STRATA}
    for r in range(runs):
        dataset, truth = generate(SynthConfig(seed=1000 + r, **base))
        for est in estimate_cell(dataset.near_cutoff().frame, RAW):
            t = truth.truth_apce(est.stratum)
            hits[est.stratum] += est.apce_lb <= t <= est.apce_ub
    rates = {s: h / runs for s, h in hits.items()}
    _verdict(
        "criterion 3 (interval coverage, no direct effect)",
        all(v >= 0.95 for v in rates.values()),
        "coverage " + " ".join(f"{s}={v:.3f}" for s, v in rates.items())
        + f" (need >= 0.95 each over {runs} runs)",
    )


def test_criterion_4_point_recovery_under_unconfoundedness():
    base = dict(
        n_schools=60,
        students_per_school=(60.0, 6.0),
        track_mix={"V:BL": 1.0},
        cohorts=("2015",),
        strata=StratumModel(
            base={"AL": 0.4, "AH": 0.3, "H": 0.3},
            covariate="aptitude",
            by_level={
                "0": {"AL": 0.6, "AH": 0.2, "H": 0.2},
                "1": {"AL": 0.3, "AH": 0.4, "H": 0.3},
                "2": {"AL": 0.2, "AH": 0.25, "H": 0.55},
            },
        ),
        compliance={"C": 0.25, "NT": 0.70, "AT": 0.05},
        aptitude_probs=(0.4, 0.3, 0.3),
    )
    truth = 0.25  # complier rate is constant, so every stratum's effect equals it
    runs = 200
    hits = {s: 0 for s in ALL_STRATA}
    for r in range(runs):
        dataset, _ = generate(SynthConfig(seed=2000 + r, **base))
        cfg = BootstrapConfig(replications=160, seed=r)
        points, ses, _ = apce_points_with_se(
            dataset.near_cutoff().frame, dataset.covariate_columns, cfg
        )
        for s in ALL_STRATA:
            hits[s] += abs(points[s] - truth) <= 2 * ses[s]
    rates = {s: h / runs for s, h in hits.items()}
    _verdict(
        "criterion 4 (point recovery within two bootstrap SEs)",
        all(v >= 0.90 for v in rates.values()),
        "within-2SE rate " + " ".join(f"{s}={v:.3f}" for s, v in rates.items())
        + f" (need >= 0.90 each over {runs} runs)",
    )


def test_criterion_5_loss_identity_on_enumerated_populations():
    populations = [
        [("H", "C", 3), ("AL", "NT", 4), ("AH", "AT", 2), ("AL", "AT", 1), ("AH", "NT", 5)],
        [("H", "C", 5), ("AL", "C", 5), ("AH", "C", 5)],
        [("H", "NT", 7), ("AH", "NT", 6), ("AL", "NT", 7)],
        [("AL", "AT", 6), ("H", "AT", 4), ("AH", "C", 5), ("AL", "C", 2), ("H", "NT", 3)],
    ]
    completes_if_upgraded = {"H": 1, "AH": 1, "AL": 0}
    upgraded = {"C": (0, 1), "NT": (0, 0), "AT": (1, 1)}
    worst_identity = 0.0
    worst_affine = 0.0
    for population in populations:
        total = sum(count for _, _, count in population)
        frame = balanced_latent_frame(population)
        shares = confusion_shares(frame, RAW)
        diffs = []
        for w in DEFAULT_GRID:
            direct = {}
            for arm_index in (1, 0):
                missed = sum(
                    count
                    for stratum, comp, count in population
                    if upgraded[comp][arm_index] == 0 and completes_if_upgraded[stratum]
                )
                misplaced = sum(
                    count
                    for stratum, comp, count in population
                    if upgraded[comp][arm_index] == 1 and not completes_if_upgraded[stratum]
                )
                direct[arm_index] = missed / total + w * (misplaced / total)
            shortcut = loss_difference(shares, w)
            diffs.append(shortcut)
            worst_identity = max(worst_identity, abs((direct[1] - direct[0]) - shortcut))
        second = np.diff(np.diff(np.asarray(diffs)))
        if len(second):
            worst_affine = max(worst_affine, float(np.abs(second).max()))
    _verdict(
        "criterion 5 (loss identity and affinity on enumerated populations)",
        worst_identity <= 1e-12 and worst_affine <= 1e-12,
        f"max |direct - shortcut| {worst_identity:.2e}, max second difference "
        f"{worst_affine:.2e} (allowed 1e-12 each)",
    )


def test_criterion_6_balance_test_size_under_the_null():
    runs = 500
    rejected = 0
    for r in range(runs):
        dataset, _ = generate(
            SynthConfig(seed=3000 + r, n_schools=300, students_per_school=(5.0, 1.0))
        )
        near = dataset.near_cutoff()
        cfg = BootstrapConfig(replications=250, seed=r)
        table = balance_test(near.frame, near.covariate_columns, cfg, salt=r)
        rejected += bool((table["p_holm"] < 0.05).any())
    rate = rejected / runs
    bound = 0.05 + 2 * np.sqrt(0.05 * 0.95 / runs)
    _verdict(
        "criterion 6 (familywise balance-test size under the null)",
        rate <= bound,
        f"familywise rejection rate {rate:.4f} over {runs} runs (allowed {bound:.4f})",
    )


def test_criterion_7_bootstrap_is_thread_invariant():
    dataset, _ = generate(
        SynthConfig(
            seed=77,
            n_schools=30,
            students_per_school=(40.0, 5.0),
            track_mix={"V:BL": 0.5, "A:HAVO": 0.5},
        )
    )
    frame = dataset.near_cutoff().frame

    def statistic(f):
        return cell_statistic(f, RAW, ALL_STRATA, True)

    boots = [
        block_bootstrap(
            frame, statistic, BootstrapConfig(replications=80, seed=5, threads=t), salt=9
        )
        for t in (1, 4)
    ]
    replicates_equal = np.array_equal(boots[0].replicates, boots[1].replicates, equal_nan=True)
    se_equal = np.array_equal(boots[0].se, boots[1].se, equal_nan=True)

    serial = ApceBoundsAnalysis(reps=40, seed=5, threads=1).fit(dataset)
    threaded = ApceBoundsAnalysis(reps=40, seed=5, threads=3).fit(dataset)
    tables_equal = serial.aggregate_table_.equals(threaded.aggregate_table_)

    _verdict(
        "criterion 7 (bootstrap thread invariance)",
        replicates_equal and se_equal and tables_equal,
        f"replicates identical: {replicates_equal}, SEs identical: {se_equal}, "
        f"aggregate tables identical: {tables_equal}",
    )


def test_criterion_8_fairness_gap_recovery():
    base = dict(
        n_schools=40,
        students_per_school=(60.0, 6.0),
        track_mix={"V:BL": 1.0},
        strata=StratumModel(
            base={"AL": 0.35, "AH": 0.30, "H": 0.35},
            covariate="aptitude",
            by_level={
                "0": {"AL": 1.0, "AH": 0.0, "H": 0.0},
                "1": {"AL": 0.0, "AH": 1.0, "H": 0.0},
                "2": {"AL": 0.0, "AH": 0.0, "H": 1.0},
            },
        ),
        aptitude_probs=(0.35, 0.30, 0.35),
        compliance={"C": 0.25, "NT": 0.70, "AT": 0.05},
        discrimination=Discrimination(attribute="subgroup", extra_rate=0.10, stratum="H"),
    )
    runs = 200
    at_gaps = []
    below_gaps = {s: [] for s in ALL_STRATA}
    for r in range(runs):
        dataset, _ = generate(SynthConfig(seed=4000 + r, **base))
        frame = dataset.near_cutoff().frame
        at_gaps.append(group_delta(frame, "subgroup", dataset.covariate_columns, "H", ARM_AT))
        for s in ALL_STRATA:
            below_gaps[s].append(
                group_delta(frame, "subgroup", dataset.covariate_columns, s, ARM_BELOW)
            )
    at_gaps = np.asarray(at_gaps)
    spread = at_gaps.std(ddof=1)
    cover = float(np.mean(np.abs(at_gaps - 0.10) <= 2 * spread))
    centered = {}
    for s, values in below_gaps.items():
        values = np.asarray(values)
        centered[s] = abs(values.mean()) / (values.std(ddof=1) / np.sqrt(runs))
    _verdict(
        "criterion 8 (injected upgrade gap recovered, below-cutoff gaps centered)",
        cover >= 0.90 and all(v <= 3.0 for v in centered.values()),
        f"within-2SD rate {cover:.3f} for the 0.10 gap (need >= 0.90), below-cutoff "
        "|mean|/SEM " + " ".join(f"{s}={v:.2f}" for s, v in centered.items())
        + " (need <= 3 each)",
    )


def test_criterion_9_relaxed_bounds_cover_under_a_direct_effect():
    base = dict(
        n_schools=200,
        students_per_school=(100.0, 8.0),
        track_mix={"V:BL": 1.0},
        cohorts=("2015",),
        strata=StratumModel(base={"AL": 0.40, "AH": 0.30, "H": 0.30}),
        compliance={"C": 0.08, "NT": 0.87, "AT": 0.05},
        eta_direct=0.03,
    )
    runs = 200
    relaxed_hits = baseline_hits = 0
    for r in range(runs):
        dataset, truth = generate(SynthConfig(seed=5000 + r, **base))
        frame = dataset.near_cutoff().frame
        target = truth.truth_apce("H")
        eta_hat = estimate_eta(frame).eta
        relaxed = noer_cell_estimate(frame, RAW, eta_hat, strata=("H",))[0]
        baseline = estimate_cell(frame, RAW, strata=("H",))[0]
        relaxed_hits += relaxed.apce_lb <= target <= relaxed.apce_ub
        baseline_hits += baseline.apce_lb <= target <= baseline.apce_ub
    relaxed_rate = relaxed_hits / runs
    baseline_rate = baseline_hits / runs
    _verdict(
        "criterion 9 (relaxed bounds cover under a direct effect)",
        relaxed_rate >= 0.90 and baseline_rate < relaxed_rate,
        f"relaxed coverage {relaxed_rate:.3f} (need >= 0.90); baseline coverage "
        f"{baseline_rate:.3f}, reported and expected lower, over {runs} runs",
    )
