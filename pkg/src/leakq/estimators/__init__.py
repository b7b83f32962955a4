"""Leakage estimators: exact enumeration oracle and trainable classifier."""

from .classifier import (ClassifierModel, LeakageEstimate, debias_term,
                         debiased_mi, debiased_pmi, load_model, mi, pmi,
                         predict_cp, save_model, train_classifier)
from .exact import (EnumPhi, ExactEstimator, enumeration_estimator,
                    exact_estimate)
from .network import TrainConfig

__all__ = [
    "ClassifierModel", "LeakageEstimate", "TrainConfig", "train_classifier",
    "predict_cp", "pmi", "mi", "debiased_pmi", "debiased_mi", "debias_term",
    "save_model", "load_model", "ExactEstimator", "EnumPhi",
    "exact_estimate", "enumeration_estimator",
]
