"""Bayesian last-layer models trained by minimising a Bethe free energy.

The package bundles a small reverse-mode autodiff engine, closed-form
Gaussian/probit convolution losses with their quadrature oracles, a trainer
with empirical-Bayes prior precision, evaluation metrics and an experiment
harness.
"""
from .data import Dataset, Splits, gen_linear_gaussian, gen_linear_probit, gen_two_moons, load_csv, load_spec, make_splits
from .model import BLLModel
from .trainer import TrainConfig, TrainResult, TrainingDiverged, cv_select, deep_ensemble, predict, train

__version__ = "0.1.0"

__all__ = [
    "BLLModel", "Dataset", "Splits", "TrainConfig", "TrainResult", "TrainingDiverged",
    "cv_select", "deep_ensemble", "gen_linear_gaussian", "gen_linear_probit", "gen_two_moons",
    "load_csv", "load_spec", "make_splits", "predict", "train",
]
