"""Random-forest estimators for heterogeneous treatment effects.

Five forest variants (cf, mob, mobw, mobwy, mobcf) differing in local
centering and split machinery, a regression forest for nuisance estimation,
synthetic data generators with known ground truth, and a replication harness
comparing variants by paired MSE ratios.
"""

from .dgp import DgpSpec, SimulatedSample, cate, generate, prognostic, propensity
from .exceptions import (DegenerateError, EmptyNeighborhoodError, HteForestError,
                         NoVariationError)
from .forest import (VARIANTS, FittedTree, ForestWeights, HteForest,
                     HteForestConfig, fit_hte_forest, forest_weights, grow_tree,
                     load_forest, predict_local_model, predict_tau, save_forest)
from .nuisance import (NuisanceEstimates, RegressionForest,
                       RegressionForestConfig, compute_centering,
                       fit_regression_forest, oob_predict)
from .split import (NodeFit, ScoreMatrix, SplitDecision, best_cut,
                    choose_split, cut_criterion_cf, cut_criterion_mob,
                    finite_diff_check, fit_node_lm, fit_node_moment,
                    fit_node_multiarm, node_scores, select_split_variable)

__version__ = "0.1.0"

__all__ = [
    "DgpSpec", "SimulatedSample", "cate", "generate", "prognostic", "propensity",
    "HteForestError", "NoVariationError", "DegenerateError",
    "EmptyNeighborhoodError",
    "VARIANTS", "HteForest", "HteForestConfig", "FittedTree", "ForestWeights",
    "fit_hte_forest", "forest_weights", "grow_tree", "predict_tau",
    "predict_local_model", "save_forest", "load_forest",
    "NuisanceEstimates", "RegressionForest", "RegressionForestConfig",
    "compute_centering", "fit_regression_forest", "oob_predict",
    "NodeFit", "ScoreMatrix", "SplitDecision", "fit_node_lm", "fit_node_moment",
    "fit_node_multiarm", "node_scores", "finite_diff_check",
    "select_split_variable", "cut_criterion_mob", "cut_criterion_cf", "best_cut",
    "choose_split",
    "__version__",
]
