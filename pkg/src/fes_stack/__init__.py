"""Logit-space stacking of fine-tuned feature extractor snapshots for
cross-domain few-shot learning, with a synthetic oracle-backed test bed."""

from .episode import (
    REMOVED,
    BundleError,
    EpisodeBundle,
    LogitTensor,
    load_episode,
    make_bundle,
    save_episode,
)
from .folds import (
    FoldAssignment,
    TrainingSelection,
    is_strict_one_shot,
    select_training_logits,
    stratified_two_fold_split,
)
from .optim import NonFiniteError, OptimConfig, OptimResult, init_params, minimize
from .report import EvalReport, MethodSpec, evaluate_suite
from .stacker import (
    ConFesKernel,
    FesKernel,
    Method,
    RegConfig,
    TrainedStacker,
    ce_loss,
    confes_forward,
    expand_confes,
    export_kernel_csvs,
    fes_forward,
    fused_lasso_penalty,
    loss_and_grad,
    omission_rate,
    predict,
    ridge_penalty,
    write_kernel_csv,
)
from .stats import (
    NEMENYI_Q_05,
    FriedmanNemenyiResult,
    PairedTResult,
    friedman_nemenyi,
    mean_ci95,
    nemenyi_cd,
    paired_t_test,
    rank_rows_desc,
)
from .synthetic import (
    DomainProfile,
    bayes_oracle_accuracy,
    default_profile,
    derive_episode_seed,
    episode_shape_stats,
    sample_episode,
)
from .training import (
    AblationMode,
    DEFAULT_LAMBDA_POOL,
    GridSearchResult,
    LambdaGrid,
    TrainConfig,
    grid_search_refes,
    predict_episode,
    score_episode,
    train_stacker,
)

__version__ = "0.1.0"
