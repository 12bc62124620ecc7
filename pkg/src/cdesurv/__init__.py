"""Continuous-time survival modelling from irregular clinical time series.

Irregular observations become a continuous control path, a neural controlled
differential equation turns the path into a latent trajectory, and a Cox head
scores risk from the final latent state.  A time-aware rank contrastive loss
aligns latent states with severity labels.  Metrics, synthetic cohorts and
trajectory interpretation tools are included.
"""

from .controlpath import ControlPath, ObservationSeq, build_path, impute
from .data import Cohort, FeatureStats, GeneratorConfig, PatientRecord, generate_synthetic
from .errors import (
    CdeSurvError,
    ConfigError,
    DataError,
    NumericDivergence,
    NumericError,
    RangeError,
    SchemaError,
    ShapeError,
    UndefinedMetricError,
    UsageError,
    ValidationError,
)
from .interpret import cluster_trajectories, dba_centroid, dtw_distance, feature_importance, feature_relevance
from .metrics import brier_score, c_index_ipcw, dynamic_auc, kaplan_meier
from .ncde import EncoderParams, LatentTrajectory, SolverConfig, encode, latent_velocity
from .survhead import SurvivalLabel, breslow_baseline, partial_likelihood_loss, ranking_loss
from .tacl import severity_trend, tacl_loss

__version__ = "0.1.0"
