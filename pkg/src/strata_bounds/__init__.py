"""Stratum-level evaluation of binary track recommendations at score cutoffs.

The package estimates how often a recommendation matters: within latent
strata defined by the two potential completion outcomes, it bounds (and,
under stronger assumptions, points at) the share of students whose
recommendation actually responds to scoring at the cutoff. Everything is
built around a locally randomized comparison of students scoring exactly
at a track's cutoff against students one point below it, clustered on
schools for inference.
"""

from .bounds import (
    ArmShares,
    BoundComponents,
    BoundInterval,
    CellEstimate,
    aggregate_intervals,
    bounds_y0_y1,
    collect_arm_shares,
    estimate_cell,
    estimate_cell_with_se,
    interval_from_components,
    stratum_components,
)
from .domain import (
    ALL_STRATA,
    ARM_AT,
    ARM_BELOW,
    ARM_ELSE,
    DEFAULT_LADDER,
    CellKey,
    Stratum,
    TrackLadder,
    TrackSpec,
    assign_instrument,
    compute_z_tilde,
    track_group,
)
from .errors import (
    ConfigError,
    DataValidationError,
    EstimationError,
    StrataBoundsError,
)
from .estimation import (
    AdjustmentSpec,
    cond_prob,
    first_stage_delta,
    fit_first_stage,
    fit_linear,
    fit_logistic,
)
from .inference import (
    BootstrapConfig,
    BootstrapResult,
    balance_test,
    block_bootstrap,
    holm_bonferroni,
    seed_salt,
)
from .ingest import (
    CovariateSpec,
    Dataset,
    RejectReport,
    infer_schema,
    load_csv,
    schema_from_json,
    schema_to_json,
)
from .loss import (
    ConfusionShares,
    loss_curve,
    loss_difference,
    smallest_actionable_weight,
)
from .pipeline import (
    ApceBoundsAnalysis,
    BalanceAnalysis,
    FairnessAnalysis,
    FirstStageAnalysis,
    LossAnalysis,
    SensitivityAnalysis,
    UnconfoundedAnalysis,
)
from .sensitivity import (
    EtaEstimate,
    estimate_eta,
    eta_sweep,
    noer_cell_estimate,
    noer_components,
)
from .synth import (
    Discrimination,
    StratumModel,
    SynthConfig,
    SynthTruth,
    generate,
    truth_apce,
    write_outputs,
)
from .unconfounded import (
    PrincipalScores,
    apce_points,
    fairness_table,
    fit_principal_scores,
    group_delta,
    stratum_weights,
)

__all__ = [name for name in dir() if not name.startswith("_")]
