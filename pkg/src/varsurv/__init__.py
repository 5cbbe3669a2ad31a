"""Estimating the association between the within-individual variability of a
longitudinal outcome and a time-to-event: naive, two-stage and joint methods,
plus a replication-study harness."""

__version__ = "0.1.0"

from .core import (
    CovariateTable,
    EffectStructure,
    IndividualEffects,
    LongitudinalDataset,
    PopulationParams,
    PosteriorSamples,
    RandomEffectsLaw,
    SurvivalDataset,
    TruthTable,
    effects_covariance,
    sample_effects,
    validate_dataset,
)
from .datagen import (
    CovariateSpec,
    Scenario,
    SimConfig,
    draw_event_time,
    draw_individual_effects,
    generate_dataset,
)
from .joint import JointSpec, fit_joint, joint_log_posterior
from .lmm import LmmSpec, PriorSpec, Stage1Estimates, fit_lmm, lmm_log_posterior
from .mcmc import (
    McmcSettings,
    autocorrelation,
    gelman_rubin,
    run_chains,
)
from .naive import naive_level, naive_sd, naive_table
from .simstudy import StudyGrid, metrics, omitted_correlation_bias, run_study
from .survival import (
    CoxFit,
    PiecewiseHazard,
    cox_fit,
    cumulative_hazard,
    landmark_split,
    quantile_cutpoints,
    two_stage_fit,
)
