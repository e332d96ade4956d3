"""Stratified two-fold splitting of the support set and training-data selection.

Single-instance classes cannot participate in cross-validation (their only
instance would leave the training fold empty), so they are removed from the
folds. When *every* class is single-instance (a strict one-shot episode),
cross-validated logits do not exist and training falls back to the
full-support logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episode import REMOVED, EpisodeBundle, LogitTensor


@dataclass(frozen=True)
class FoldAssignment:
    """Per-instance fold indices {0, 1, REMOVED} plus the removed classes."""

    fold_of: np.ndarray
    removed_classes: frozenset

    @property
    def retained(self) -> np.ndarray:
        """Boolean mask of instances that participate in cross-validation."""
        return self.fold_of != REMOVED


def stratified_two_fold_split(support_labels, seed: int) -> FoldAssignment:
    """Split support instances into two stratified folds.

    Per class, instances are shuffled with the seeded generator and assigned
    alternately to folds 0 and 1, which bounds the per-class fold imbalance
    by one. Classes with exactly one instance are marked REMOVED.
    Deterministic for a given (labels, seed).
    """
    labels = np.asarray(support_labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size < 1:
        raise ValueError("support_labels must be a non-empty 1-D array")

    rng = np.random.default_rng(seed)
    fold_of = np.full(labels.shape, REMOVED, dtype=np.uint8)
    removed = set()
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 1:
            removed.add(int(cls))
            continue
        perm = rng.permutation(idx)
        fold_of[perm[0::2]] = 0
        fold_of[perm[1::2]] = 1
    return FoldAssignment(fold_of=fold_of, removed_classes=frozenset(removed))


def is_strict_one_shot(assignment: FoldAssignment) -> bool:
    """True iff every support instance was removed from the folds."""
    return bool((assignment.fold_of == REMOVED).all())


@dataclass(frozen=True)
class TrainingSelection:
    """Training data extracted from a bundle for the stacking classifier.

    ``logits`` is restricted to the selected instances and, when classes were
    removed, to the retained classes' logit columns; ``labels`` are re-indexed
    to [0, n_classes). ``class_indices`` maps the restricted columns back to
    the episode's original class indices.
    """

    logits: LogitTensor
    labels: np.ndarray
    n_classes: int
    class_indices: np.ndarray
    used_fallback: bool


def select_training_logits(bundle: EpisodeBundle) -> TrainingSelection:
    """Pick the stacking classifier's training logits for one episode.

    Normally returns the cross-validated support logits of the non-removed
    instances, with removed classes' columns dropped. For a strict one-shot
    episode it returns the full-support logits of all instances and all
    classes instead.
    """
    folds = bundle.fold_assignment
    retained = folds != REMOVED

    if not retained.any():
        labels = bundle.support_labels.astype(np.int64)
        return TrainingSelection(
            logits=bundle.support_full_logits,
            labels=labels,
            n_classes=bundle.n_classes,
            class_indices=np.arange(bundle.n_classes),
            used_fallback=True,
        )

    labels = bundle.support_labels[retained].astype(np.int64)
    kept_classes = np.unique(labels)
    remap = np.full(bundle.n_classes, -1, dtype=np.int64)
    remap[kept_classes] = np.arange(kept_classes.size)

    data = bundle.support_cv_logits.data[retained][:, :, :, kept_classes]
    return TrainingSelection(
        logits=LogitTensor.from_array(data),
        labels=remap[labels],
        n_classes=int(kept_classes.size),
        class_indices=kept_classes,
        used_fallback=False,
    )
