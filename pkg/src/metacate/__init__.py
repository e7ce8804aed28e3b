"""Zero-shot treatment-effect estimation via meta-learned effect models.

The package covers the full pipeline: a synthetic multi-intervention data
generator, per-intervention natural-experiment tasks, regression-adjusted
pseudo-outcomes, a fusion network trained with a Reptile-style outer loop,
zero-shot evaluation on held-out interventions, and numerical checks of
the excess-risk bound that motivates the training recipe.
"""

__version__ = "0.1.0"
SCHEMA_VERSION = 1

from .errors import (
    ConfigError,
    DataError,
    IncompatibilityError,
    LeakageError,
    MissingInputError,
    NumericError,
    ShapeMismatchError,
    StateError,
)
from .synthgen import (
    DGPConfig,
    GroundTruth,
    generate_population,
    generate_task_samples,
    true_cate,
    true_cate_many,
)
from .tasks import (
    MetaDataset,
    Sample,
    TaskDataset,
    build_meta_dataset,
    downsample,
    pool_interventions,
    split_holdout,
)
from .pseudo import (
    NuisanceConfig,
    PseudoOutcomeBatch,
    attach_pseudo_outcomes,
    fit_nuisance,
    fit_task_nuisances,
    gamma_scores,
    ra_pseudo_outcomes,
)
from .nn import (
    FusionSpec,
    MetaModelParams,
    MLPSpec,
    active_backend,
    default_fusion_spec,
    forward,
    forward_batch,
    grad_wrt_inputs,
    init_params,
    load_checkpoint,
    loss_and_grad,
    reptile_step,
    save_checkpoint,
    set_backend,
    sgd_step,
)
from .trainer import (
    BaselineModel,
    OraclePredictor,
    RunRecord,
    TrainConfig,
    ZeroPredictor,
    erm_config,
    predict_cate,
    predict_cate_many,
    train_caml,
    train_meta_outcome_baseline,
)
from .evaluation import (
    EvalReport,
    evaluate_zero_shot,
    pehe,
    precision_recall_at_u,
    rate_at_u,
)
from .theory import (
    BoundInputs,
    FiniteSetFamily,
    LinearFamily,
    exact_rademacher_small,
    poincare_check_gaussian,
    theorem1_bound,
    theorem1_terms,
    zs_rademacher_mc,
)
from .config import ExperimentConfig, config_from_dict, load_config

__all__ = [
    "__version__",
    "SCHEMA_VERSION",
    "ConfigError",
    "DataError",
    "IncompatibilityError",
    "LeakageError",
    "MissingInputError",
    "NumericError",
    "ShapeMismatchError",
    "StateError",
    "DGPConfig",
    "GroundTruth",
    "generate_population",
    "generate_task_samples",
    "true_cate",
    "true_cate_many",
    "MetaDataset",
    "Sample",
    "TaskDataset",
    "build_meta_dataset",
    "downsample",
    "pool_interventions",
    "split_holdout",
    "NuisanceConfig",
    "PseudoOutcomeBatch",
    "attach_pseudo_outcomes",
    "fit_nuisance",
    "fit_task_nuisances",
    "gamma_scores",
    "ra_pseudo_outcomes",
    "FusionSpec",
    "MetaModelParams",
    "MLPSpec",
    "active_backend",
    "default_fusion_spec",
    "forward",
    "forward_batch",
    "grad_wrt_inputs",
    "init_params",
    "load_checkpoint",
    "loss_and_grad",
    "reptile_step",
    "save_checkpoint",
    "set_backend",
    "sgd_step",
    "BaselineModel",
    "OraclePredictor",
    "RunRecord",
    "TrainConfig",
    "ZeroPredictor",
    "erm_config",
    "predict_cate",
    "predict_cate_many",
    "train_caml",
    "train_meta_outcome_baseline",
    "EvalReport",
    "evaluate_zero_shot",
    "pehe",
    "precision_recall_at_u",
    "rate_at_u",
    "BoundInputs",
    "FiniteSetFamily",
    "LinearFamily",
    "exact_rademacher_small",
    "poincare_check_gaussian",
    "theorem1_bound",
    "theorem1_terms",
    "zs_rademacher_mc",
    "ExperimentConfig",
    "config_from_dict",
    "load_config",
]
