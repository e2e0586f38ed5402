"""Conformal Shapley intervals for multimodal learning.

Exact instance-level Shapley attribution over modality coalitions, kernel
quantile regression on the Shapley scores, conformal intervals per modality,
uncertainty-aware modality selection and subgroup t-tests.
"""

__version__ = "0.1.0"

from .errors import (
    ConformalShapleyError,
    DataError,
    LearnerError,
    AttributionError,
    QuantileFitError,
    ConfigError,
)
from .data import (
    ModalityLayout,
    MultimodalDataset,
    SplitIndices,
    SyntheticConfig,
    load_dataset,
    save_dataset,
    split,
    build_covariance,
    generate_synthetic_regression,
)
from .learners import (
    LearnerSpec,
    fit_baseline,
    fit_subset_model,
    predict,
    loss,
    train_all_subsets,
    ModelCache,
)
from .attribution import (
    ShapleyTable,
    value,
    shapley_weight,
    instance_shapley,
    shapley_table,
)
from .quantile import (
    KernelSpec,
    FeatureMap,
    QuantileModel,
    pinball_loss,
    fit_feature_map,
    fit_quantile,
    evaluate_quantile,
    cross_validate_lambdas,
)
from .studentt import student_t_cdf, regularized_incomplete_beta
from .conformal import (
    ConformalConfig,
    ModalityInterval,
    SelectionResult,
    HypothesisResult,
    ConformalShapley,
    conformal_shapley_intervals,
    select_modalities,
    selection_path,
    brute_force_optimal_subset,
    conditional_hypothesis_test,
)

__all__ = [
    "student_t_cdf",
    "regularized_incomplete_beta",
    "ConformalShapleyError",
    "DataError",
    "LearnerError",
    "AttributionError",
    "QuantileFitError",
    "ConfigError",
    "ModalityLayout",
    "MultimodalDataset",
    "SplitIndices",
    "SyntheticConfig",
    "load_dataset",
    "save_dataset",
    "split",
    "build_covariance",
    "generate_synthetic_regression",
    "LearnerSpec",
    "fit_baseline",
    "fit_subset_model",
    "predict",
    "loss",
    "train_all_subsets",
    "ModelCache",
    "ShapleyTable",
    "value",
    "shapley_weight",
    "instance_shapley",
    "shapley_table",
    "KernelSpec",
    "FeatureMap",
    "QuantileModel",
    "pinball_loss",
    "fit_feature_map",
    "fit_quantile",
    "evaluate_quantile",
    "cross_validate_lambdas",
    "ConformalConfig",
    "ModalityInterval",
    "SelectionResult",
    "HypothesisResult",
    "ConformalShapley",
    "conformal_shapley_intervals",
    "select_modalities",
    "selection_path",
    "brute_force_optimal_subset",
    "conditional_hypothesis_test",
]
