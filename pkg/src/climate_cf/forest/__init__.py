from .core import (
    CAUSAL,
    REGRESSION,
    EffectPrediction,
    Forest,
    ForestParams,
    Tree,
    fit_causal_forest,
    fit_regression_forest,
    kernel_weights,
    predict,
    predict_effects,
    predict_out_of_bag,
)
from .serialize import load_forest, save_forest
from .tuning import r_loss, tune_forest

__all__ = [
    "CAUSAL",
    "REGRESSION",
    "EffectPrediction",
    "Forest",
    "ForestParams",
    "Tree",
    "fit_causal_forest",
    "fit_regression_forest",
    "kernel_weights",
    "predict",
    "predict_effects",
    "predict_out_of_bag",
    "load_forest",
    "save_forest",
    "r_loss",
    "tune_forest",
]
