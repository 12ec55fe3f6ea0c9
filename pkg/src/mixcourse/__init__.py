"""Mixture disease course mapping: a logistic latent-time model with a
Gaussian mixture on the individual effects, fitted by MCMC-SAEM."""
from .evaluation import (align_labels, classification_metrics, metric_ci, recovery_metrics,
                         select_n_clusters, trajectory_curves)
from .gmm import GmmModel, gmm_fit
from .likelihood import icl, normalized_entropy, posterior_membership
from .model import (Dataset, HyperParams, IndividualParams, MixtureParams, ModelError,
                    PopulationParams, logistic_curve)
from .posthoc import PosthocResult, posthoc_classify
from .saem import FitConfig, FitDivergenceError, FittedModel, fit, personalize
from .simulate import PRESETS, Scenario, scenario_preset, simulate

__version__ = "0.1.0"

__all__ = [
    "Dataset", "HyperParams", "IndividualParams", "MixtureParams", "ModelError", "PopulationParams",
    "logistic_curve", "FitConfig", "FitDivergenceError", "FittedModel", "fit", "personalize",
    "GmmModel", "gmm_fit", "PosthocResult", "posthoc_classify", "icl", "normalized_entropy",
    "posterior_membership", "align_labels", "classification_metrics", "metric_ci", "recovery_metrics",
    "select_n_clusters", "trajectory_curves", "PRESETS", "Scenario", "scenario_preset", "simulate",
]
