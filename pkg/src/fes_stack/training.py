"""Per-episode training pipeline for all three stacker variants.

Covers training-data selection (cross-validated logits with the strict
one-shot fallback, or the ablation variants), regularization-strength grid
search for the fused-lasso variant, the final fit, and query scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .episode import REMOVED, EpisodeBundle, LogitTensor
from .folds import TrainingSelection, select_training_logits
from .optim import OptimConfig, init_params, minimize
from .stacker import (
    ConFesKernel,
    FesKernel,
    Method,
    RegConfig,
    TrainedStacker,
    _FlatObjective,
    expand_confes,
    make_objective,
    omission_rate,
    predict,
)


class AblationMode(str, Enum):
    FULL = "full"
    NO_CV = "no-cv"
    FIRST_ONLY = "first"
    LAST_ONLY = "last"
    NO_CV_FIRST = "no-cv-first"
    NO_CV_LAST = "no-cv-last"


#: Grid-search pool used for both fused-lasso strengths by default.
DEFAULT_LAMBDA_POOL = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 0.0)


@dataclass(frozen=True)
class LambdaGrid:
    pool1: tuple = DEFAULT_LAMBDA_POOL
    pool2: tuple = DEFAULT_LAMBDA_POOL

    def __post_init__(self):
        for name, pool in (("pool1", self.pool1), ("pool2", self.pool2)):
            if len(pool) == 0:
                raise ValueError(f"{name} must be non-empty")
            if min(pool) < 0:
                raise ValueError(f"{name} values must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """Everything train_stacker needs besides the bundle and the method."""

    ridge_strength: float = 1e-2
    conv_size: int = 9
    conv_stride: int = 4
    lambda_grid: LambdaGrid = field(default_factory=LambdaGrid)
    abs_smoothing_eps: float = 1e-8
    optim: OptimConfig = field(default_factory=OptimConfig)


@dataclass(frozen=True)
class GridSearchResult:
    lambda1: float
    lambda2: float
    n_fits: int
    best_correct: int


def _slice_snapshot(selection: TrainingSelection, index: int) -> TrainingSelection:
    data = selection.logits.data[:, :, index : index + 1, :]
    return replace(selection, logits=LogitTensor.from_array(data))


def _ablation_selection(bundle: EpisodeBundle, ablation: AblationMode):
    """Training data and snapshot restriction for one ablation variant."""
    no_cv = ablation in (
        AblationMode.NO_CV,
        AblationMode.NO_CV_FIRST,
        AblationMode.NO_CV_LAST,
    )
    if no_cv:
        selection = TrainingSelection(
            logits=bundle.support_full_logits,
            labels=bundle.support_labels.astype(np.int64),
            n_classes=bundle.n_classes,
            class_indices=np.arange(bundle.n_classes),
            used_fallback=False,
        )
    else:
        selection = select_training_logits(bundle)

    snapshot_index = -1
    if ablation in (AblationMode.FIRST_ONLY, AblationMode.NO_CV_FIRST):
        snapshot_index = 0
    elif ablation in (AblationMode.LAST_ONLY, AblationMode.NO_CV_LAST):
        snapshot_index = bundle.n_snapshots - 1
    if snapshot_index >= 0:
        selection = _slice_snapshot(selection, snapshot_index)
    return selection, snapshot_index


def _selection_folds(bundle: EpisodeBundle, selection: TrainingSelection):
    """Fold indices of the selected training instances (REMOVED where the
    instance does not participate in cross-validation)."""
    if selection.used_fallback:
        return np.full(selection.labels.shape, REMOVED, dtype=np.uint8)
    folds = bundle.fold_assignment
    if selection.labels.size == folds.size:
        return folds
    return folds[folds != REMOVED]


def _grid_search(selection: TrainingSelection, folds, grid: LambdaGrid, config: TrainConfig):
    """Pick fused-lasso strengths by two-direction fold validation.

    For every strength pair, a flat stacker is trained on each fold's logits
    and scored by correct count on the opposite fold; the pair with the best
    combined count wins. Ties prefer the larger lambda1, then the larger
    lambda2. Returns strengths (0, 0) without fitting when either fold is
    empty (strict one-shot episodes).
    """
    in0 = folds == 0
    in1 = folds == 1
    if not in0.any() or not in1.any():
        return GridSearchResult(0.0, 0.0, 0, 0)

    x = selection.logits.as_f64()
    shape = (selection.logits.n_extractors, selection.logits.n_snapshots)
    init = init_params(1, shape).ravel()
    base = RegConfig(Method.REFES, abs_smoothing_eps=config.abs_smoothing_eps)

    sides = []
    for train_mask, test_mask in ((in0, in1), (in1, in0)):
        objective = _FlatObjective(
            x[train_mask], selection.labels[train_mask], base, shape=shape
        )
        test_design = np.ascontiguousarray(
            x[test_mask]
            .transpose(0, 3, 1, 2)
            .reshape(int(test_mask.sum()) * selection.n_classes, shape[0] * shape[1])
        )
        sides.append((objective, test_design, selection.labels[test_mask]))

    best = None
    n_fits = 0
    for lam1 in grid.pool1:
        for lam2 in grid.pool2:
            cfg = RegConfig(
                Method.REFES,
                lambda1=lam1,
                lambda2=lam2,
                abs_smoothing_eps=config.abs_smoothing_eps,
            )
            correct = 0
            for objective, test_design, test_labels in sides:
                objective.config = cfg
                result = minimize(objective, init, config.optim)
                n_fits += 1
                eff = np.maximum(result.params, 0.0)
                meta = (test_design @ eff).reshape(-1, selection.n_classes)
                correct += int((meta.argmax(axis=1) == test_labels).sum())
            key = (correct, lam1, lam2)
            if best is None or key > best:
                best = key
    return GridSearchResult(best[1], best[2], n_fits, best[0])


def grid_search_refes(
    bundle: EpisodeBundle,
    grid: LambdaGrid | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
) -> GridSearchResult:
    """Fold-validated strength search for the fused-lasso stacker.

    The seed argument is accepted for signature stability; the search is
    fully deterministic given the bundle (folds are stored in it).
    """
    del seed
    config = config if config is not None else TrainConfig()
    grid = grid if grid is not None else config.lambda_grid
    selection = select_training_logits(bundle)
    folds = _selection_folds(bundle, selection)
    return _grid_search(selection, folds, grid, config)


def train_stacker(
    bundle: EpisodeBundle,
    method: Method,
    config: TrainConfig | None = None,
    ablation: AblationMode = AblationMode.FULL,
    seed: int = 0,
) -> TrainedStacker:
    """Fit one stacking classifier on one episode.

    Deterministic given (bundle, method, config, ablation); the seed argument
    is accepted for signature stability only.
    """
    del seed
    config = config if config is not None else TrainConfig()
    method = Method(method)
    ablation = AblationMode(ablation)

    selection, snapshot_index = _ablation_selection(bundle, ablation)
    k = selection.logits.n_extractors
    j_eff = selection.logits.n_snapshots

    lambda1 = lambda2 = 0.0
    n_grid_fits = 0
    if method is Method.CONFES:
        kernel0 = ConFesKernel.constant(
            k, j_eff, config.conv_size, config.conv_stride, float(init_params(2, ()))
        )
        reg = RegConfig(
            Method.CONFES,
            ridge_strength=config.ridge_strength,
            abs_smoothing_eps=config.abs_smoothing_eps,
        )
    elif method is Method.REFES:
        kernel0 = FesKernel(init_params(1, (k, j_eff)))
        folds = _selection_folds(bundle, selection)
        search = _grid_search(selection, folds, config.lambda_grid, config)
        lambda1, lambda2, n_grid_fits = search.lambda1, search.lambda2, search.n_fits
        reg = RegConfig(
            Method.REFES,
            lambda1=lambda1,
            lambda2=lambda2,
            abs_smoothing_eps=config.abs_smoothing_eps,
        )
    else:
        kernel0 = FesKernel(init_params(1, (k, j_eff)))
        reg = RegConfig(
            Method.FES,
            ridge_strength=config.ridge_strength,
            abs_smoothing_eps=config.abs_smoothing_eps,
        )

    objective = make_objective(kernel0, selection.logits, selection.labels, reg)
    result = minimize(objective, kernel0.pack(), config.optim)
    kernel = kernel0.with_params(result.params)
    effective = expand_confes(kernel) if method is Method.CONFES else kernel.effective

    return TrainedStacker(
        method=method,
        kernel=kernel,
        effective=effective,
        final_loss=result.loss,
        grad_inf_norm=result.grad_inf_norm,
        omission_rate=omission_rate(effective),
        n_iterations=result.n_iterations,
        status=result.status,
        ablation=ablation.value,
        snapshot_index=snapshot_index,
        lambda1=lambda1,
        lambda2=lambda2,
        n_grid_fits=n_grid_fits,
        used_fallback=selection.used_fallback,
    )


def predict_episode(stacker: TrainedStacker, bundle: EpisodeBundle):
    """Predicted labels and class probabilities for the bundle's query set.

    Applies the flat effective kernel to all query classes; single-snapshot
    ablations see only their snapshot's logits.
    """
    query = bundle.query_logits.data
    if stacker.snapshot_index >= 0:
        query = query[:, :, stacker.snapshot_index : stacker.snapshot_index + 1, :]
    return predict(FesKernel(stacker.effective), query)


def score_episode(stacker: TrainedStacker, bundle: EpisodeBundle) -> float:
    """Query accuracy of a trained stacker on its episode."""
    labels, _ = predict_episode(stacker, bundle)
    return float((labels == bundle.query_labels).mean())
