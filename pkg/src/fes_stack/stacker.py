"""Stacking-classifier kernels, losses, gradients, and prediction.

Three stacker variants share one forward rule: meta logits are a weighted
sum of every snapshot's logits, with weights constrained non-negative by
clipping (effective weight = max(raw, 0)).

* flat variant ("fes"): one weight per (extractor, snapshot) cell, trained
  with cross-entropy plus a ridge term on the raw parameters.
* convolutional variant ("confes"): a per-extractor strided 1-D kernel over
  the snapshot axis feeding a smaller global kernel, no nonlinearity in
  between, so the hierarchy expands back into an equivalent flat kernel.
* regularised variant ("refes"): the flat kernel trained with a depthwise
  fused-lasso penalty (sparsity plus smoothness along the snapshot axis)
  instead of ridge.

All optimization math is float64; logit tensors are float32 on disk and
promoted on entry.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .episode import LogitTensor


class Method(str, Enum):
    FES = "fes"
    CONFES = "confes"
    REFES = "refes"


def _as_f64(logits) -> np.ndarray:
    if isinstance(logits, LogitTensor):
        return logits.as_f64()
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"logits must be rank 4 (n, k, j, c), got rank {arr.ndim}")
    return arr


@dataclass(frozen=True)
class FesKernel:
    """Flat stacking kernel: raw weight matrix of shape (extractors, snapshots)."""

    raw: np.ndarray

    def __post_init__(self):
        raw = np.ascontiguousarray(self.raw, dtype=np.float64)
        if raw.ndim != 2:
            raise ValueError(f"kernel must be 2-D, got shape {raw.shape}")
        object.__setattr__(self, "raw", raw)

    @classmethod
    def constant(cls, n_extractors: int, n_snapshots: int, value: float) -> "FesKernel":
        return cls(np.full((n_extractors, n_snapshots), value, dtype=np.float64))

    @property
    def shape(self):
        return self.raw.shape

    @property
    def n_parameters(self) -> int:
        return self.raw.size

    @property
    def effective(self) -> np.ndarray:
        """Non-negative weights actually used by the forward pass."""
        return np.maximum(self.raw, 0.0)

    def pack(self) -> np.ndarray:
        return self.raw.ravel().copy()

    def with_params(self, params) -> "FesKernel":
        return FesKernel(np.asarray(params, dtype=np.float64).reshape(self.shape))


@dataclass(frozen=True)
class ConFesKernel:
    """Two-level kernel hierarchy: depthwise 1-D conv kernel plus global kernel.

    ``depthwise`` has shape (extractors, conv_size) and slides along the
    snapshot axis with the given stride; ``global_`` has shape
    (extractors, feature_len) where feature_len = (snapshots - conv_size) /
    stride + 1. Both levels are clipped to non-negative weights.
    """

    depthwise: np.ndarray
    global_: np.ndarray
    stride: int

    def __post_init__(self):
        depthwise = np.ascontiguousarray(self.depthwise, dtype=np.float64)
        global_ = np.ascontiguousarray(self.global_, dtype=np.float64)
        if depthwise.ndim != 2 or global_.ndim != 2:
            raise ValueError("both kernel levels must be 2-D")
        if depthwise.shape[0] != global_.shape[0]:
            raise ValueError(
                f"levels disagree on extractor count: {depthwise.shape[0]} "
                f"vs {global_.shape[0]}"
            )
        if not (1 <= self.stride <= depthwise.shape[1]):
            raise ValueError(
                f"need conv_size >= stride >= 1, got conv_size "
                f"{depthwise.shape[1]}, stride {self.stride}"
            )
        object.__setattr__(self, "depthwise", depthwise)
        object.__setattr__(self, "global_", global_)

    @classmethod
    def constant(
        cls,
        n_extractors: int,
        n_snapshots: int,
        conv_size: int,
        stride: int,
        value: float,
    ) -> "ConFesKernel":
        if not (1 <= stride <= conv_size <= n_snapshots):
            raise ValueError(
                f"need snapshots >= conv_size >= stride >= 1, got "
                f"{n_snapshots} >= {conv_size} >= {stride}"
            )
        if (n_snapshots - conv_size) % stride != 0:
            raise ValueError(
                f"(snapshots - conv_size) = {n_snapshots - conv_size} is not "
                f"divisible by stride {stride}"
            )
        feature_len = (n_snapshots - conv_size) // stride + 1
        return cls(
            depthwise=np.full((n_extractors, conv_size), value, dtype=np.float64),
            global_=np.full((n_extractors, feature_len), value, dtype=np.float64),
            stride=int(stride),
        )

    @property
    def n_extractors(self) -> int:
        return self.depthwise.shape[0]

    @property
    def conv_size(self) -> int:
        return self.depthwise.shape[1]

    @property
    def feature_len(self) -> int:
        return self.global_.shape[1]

    @property
    def n_snapshots(self) -> int:
        return (self.feature_len - 1) * self.stride + self.conv_size

    @property
    def n_parameters(self) -> int:
        return self.depthwise.size + self.global_.size

    @property
    def effective_depthwise(self) -> np.ndarray:
        return np.maximum(self.depthwise, 0.0)

    @property
    def effective_global(self) -> np.ndarray:
        return np.maximum(self.global_, 0.0)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.depthwise.ravel(), self.global_.ravel()])

    def with_params(self, params) -> "ConFesKernel":
        params = np.asarray(params, dtype=np.float64)
        split = self.depthwise.size
        return ConFesKernel(
            depthwise=params[:split].reshape(self.depthwise.shape),
            global_=params[split:].reshape(self.global_.shape),
            stride=self.stride,
        )


@dataclass(frozen=True)
class RegConfig:
    """Regularization settings; which terms apply depends on the method."""

    method: Method
    ridge_strength: float = 1e-2
    lambda1: float = 0.0
    lambda2: float = 0.0
    abs_smoothing_eps: float = 1e-8

    def __post_init__(self):
        if min(self.ridge_strength, self.lambda1, self.lambda2) < 0:
            raise ValueError("regularization strengths must be >= 0")
        if self.abs_smoothing_eps <= 0:
            raise ValueError("abs_smoothing_eps must be > 0")


@dataclass(frozen=True)
class TrainedStacker:
    """A fitted stacking classifier plus training diagnostics.

    ``effective`` is the flat non-negative weight matrix actually applied at
    prediction time (the expanded kernel for the convolutional variant).
    """

    method: Method
    kernel: object
    effective: np.ndarray
    final_loss: float
    grad_inf_norm: float
    omission_rate: float
    n_iterations: int
    status: str
    ablation: str = "full"
    snapshot_index: int = -1
    lambda1: float = 0.0
    lambda2: float = 0.0
    n_grid_fits: int = 0
    used_fallback: bool = False


def _window_index(n_snapshots: int, conv_size: int, stride: int) -> np.ndarray:
    """(feature_len, conv_size) map from conv output position to snapshot index."""
    if (n_snapshots - conv_size) % stride != 0:
        raise ValueError(
            f"(snapshots - conv_size) = {n_snapshots - conv_size} is not "
            f"divisible by stride {stride}"
        )
    feature_len = (n_snapshots - conv_size) // stride + 1
    return np.arange(feature_len)[:, None] * stride + np.arange(conv_size)[None, :]


def fes_forward(kernel: FesKernel, logits) -> np.ndarray:
    """Meta logits of the flat kernel: sum of effective weight times logit
    over every (extractor, snapshot) cell. Returns (instances, classes)."""
    x = _as_f64(logits)
    if x.shape[1:3] != kernel.shape:
        raise ValueError(
            f"kernel shape {kernel.shape} does not match logits "
            f"(k, j) = {x.shape[1:3]}"
        )
    return np.einsum("kj,nkjc->nc", kernel.effective, x)


def confes_forward(kernel: ConFesKernel, logits) -> np.ndarray:
    """Meta logits of the kernel hierarchy: per-extractor valid 1-D
    convolution along the snapshot axis, then a global weighted sum."""
    x = _as_f64(logits)
    if x.shape[1] != kernel.n_extractors or x.shape[2] != kernel.n_snapshots:
        raise ValueError(
            f"kernel expects (k, j) = ({kernel.n_extractors}, "
            f"{kernel.n_snapshots}), logits have {x.shape[1:3]}"
        )
    idx = _window_index(kernel.n_snapshots, kernel.conv_size, kernel.stride)
    windows = x[:, :, idx, :]  # (n, k, feature_len, conv_size, c)
    conv = np.einsum("kb,nkmbc->nkmc", kernel.effective_depthwise, windows)
    return np.einsum("km,nkmc->nc", kernel.effective_global, conv)


def expand_confes(kernel: ConFesKernel) -> np.ndarray:
    """Collapse the two-level hierarchy into the equivalent flat kernel.

    Valid because no nonlinearity sits between the levels: snapshot j's flat
    weight is the sum of global[m] * depthwise[b] over all window placements
    with m * stride + b == j. Non-negative since both factors are.
    """
    flat = np.zeros((kernel.n_extractors, kernel.n_snapshots))
    d_eff = kernel.effective_depthwise
    g_eff = kernel.effective_global
    for m in range(kernel.feature_len):
        start = m * kernel.stride
        flat[:, start : start + kernel.conv_size] += g_eff[:, m : m + 1] * d_eff
    return flat


def _softmax_ce(meta: np.ndarray, labels: np.ndarray, rows=None):
    """Cross-entropy (summed over instances) and its gradient in the logits.

    Uses max-subtraction for a stable log-sum-exp. Gradient is
    softmax(meta) - onehot(labels). Destroys ``meta`` (the returned gradient
    aliases it); callers pass a scratch array.
    """
    if rows is None:
        rows = np.arange(meta.shape[0])
    m = meta.max(axis=1)
    picked = float(meta[rows, labels].sum())
    meta -= m[:, None]
    np.exp(meta, out=meta)
    se = meta.sum(axis=1)
    meta /= se[:, None]
    np.log(se, out=se)
    se += m
    loss = float(se.sum()) - picked
    meta[rows, labels] -= 1.0
    return loss, meta


def ce_loss(meta_logits, labels) -> float:
    """Summed negative log-likelihood of the labels under softmax(meta)."""
    meta = np.array(meta_logits, dtype=np.float64)  # scratch copy
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= meta.shape[1]:
        raise ValueError("label index out of range")
    loss, _ = _softmax_ce(meta, labels)
    return float(loss)


def ridge_penalty(kernel, strength: float) -> float:
    """strength * sum of squared raw parameters over all kernel levels."""
    if strength < 0:
        raise ValueError("ridge strength must be >= 0")
    if isinstance(kernel, ConFesKernel):
        total = np.square(kernel.depthwise).sum() + np.square(kernel.global_).sum()
    else:
        total = np.square(kernel.raw).sum()
    return float(strength * total)


def _smooth_abs(x: np.ndarray, eps: float):
    """sqrt(x^2 + eps^2) - eps and its derivative, a smooth |x| surrogate."""
    root = np.sqrt(x * x + eps * eps)
    return root - eps, x / root


def fused_lasso_penalty(
    kernel: FesKernel, lambda1: float, lambda2: float, eps: float = 1e-8
) -> float:
    """Sparsity plus snapshot-axis smoothness penalty on the effective weights.

    The non-differentiable absolute values are replaced by the smooth
    surrogate sqrt(x^2 + eps^2) - eps so a quasi-Newton optimizer applies.
    The smoothness term penalizes differences between snapshot-adjacent
    weights within each extractor row only.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    w = kernel.effective
    sparsity, _ = _smooth_abs(w, eps)
    diffs, _ = _smooth_abs(w[:, :-1] - w[:, 1:], eps)
    return float(lambda1 * sparsity.sum() + lambda2 * diffs.sum())


class _FlatObjective:
    """Loss/gradient of the flat-kernel objective for a fixed dataset.

    Precomputes the (instances * classes, extractors * snapshots) design
    matrix so each evaluation is two matrix-vector products.
    """

    def __init__(self, logits, labels, config: RegConfig, shape=None):
        x = _as_f64(logits)
        n, k, j, c = x.shape
        self.shape = (k, j) if shape is None else shape
        self.n, self.c = n, c
        self.design = np.ascontiguousarray(
            x.transpose(0, 3, 1, 2).reshape(n * c, k * j)
        )
        self.labels = np.asarray(labels, dtype=np.int64)
        self.config = config
        self._rows = np.arange(n)
        self._meta = np.empty(n * c)
        self._grad = np.empty(k * j)

    def __call__(self, params: np.ndarray):
        k, j = self.shape
        raw = params.reshape(k, j)
        eff = np.maximum(raw, 0.0)
        mask = raw > 0

        np.dot(self.design, eff.ravel(), out=self._meta)
        loss, dmeta = _softmax_ce(
            self._meta.reshape(self.n, self.c), self.labels, self._rows
        )
        np.dot(dmeta.ravel(), self.design, out=self._grad)
        # Fresh array: callers keep gradients across evaluations.
        grad = self._grad.reshape(k, j) * mask

        cfg = self.config
        if cfg.method is Method.REFES:
            eps = cfg.abs_smoothing_eps
            if cfg.lambda1 > 0:
                pen, dpen = _smooth_abs(eff, eps)
                loss += cfg.lambda1 * pen.sum()
                grad += cfg.lambda1 * dpen * mask
            if cfg.lambda2 > 0 and j > 1:
                pen, dpen = _smooth_abs(eff[:, :-1] - eff[:, 1:], eps)
                loss += cfg.lambda2 * pen.sum()
                dpen *= cfg.lambda2
                gm = grad[:, :-1]
                gm += np.where(mask[:, :-1], dpen, 0.0)
                gm = grad[:, 1:]
                gm -= np.where(mask[:, 1:], dpen, 0.0)
        elif cfg.ridge_strength > 0:
            loss += cfg.ridge_strength * np.square(raw).sum()
            grad += 2.0 * cfg.ridge_strength * raw

        return float(loss), grad.ravel()


class _ConvObjective:
    """Loss/gradient of the hierarchical objective for a fixed dataset.

    Gathers all convolution windows up front; parameters are the packed
    (depthwise, global) raw matrices.
    """

    def __init__(self, logits, labels, config: RegConfig, conv_size: int, stride: int):
        x = _as_f64(logits)
        n, k, j, c = x.shape
        idx = _window_index(j, conv_size, stride)
        self.windows = x[:, :, idx, :]  # (n, k, feature_len, conv_size, c)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.config = config
        self.k, self.conv_size, self.stride = k, conv_size, stride
        self.feature_len = idx.shape[0]

    def __call__(self, params: np.ndarray):
        k, j_b, j_m = self.k, self.conv_size, self.feature_len
        d_raw = params[: k * j_b].reshape(k, j_b)
        g_raw = params[k * j_b :].reshape(k, j_m)
        d_eff = np.maximum(d_raw, 0.0)
        g_eff = np.maximum(g_raw, 0.0)

        conv = np.einsum("kb,nkmbc->nkmc", d_eff, self.windows)
        meta = np.einsum("km,nkmc->nc", g_eff, conv)
        loss, dmeta = _softmax_ce(meta, self.labels)

        g_grad = np.einsum("nc,nkmc->km", dmeta, conv)
        dconv = dmeta[:, None, None, :] * g_eff[None, :, :, None]
        d_grad = np.einsum("nkmc,nkmbc->kb", dconv, self.windows)
        d_grad *= d_raw > 0
        g_grad *= g_raw > 0

        strength = self.config.ridge_strength
        if strength > 0:
            loss += strength * (np.square(d_raw).sum() + np.square(g_raw).sum())
            d_grad += 2.0 * strength * d_raw
            g_grad += 2.0 * strength * g_raw

        return float(loss), np.concatenate([d_grad.ravel(), g_grad.ravel()])


def make_objective(kernel, logits, labels, config: RegConfig):
    """Packed-parameter objective for the optimizer, matching kernel.pack()."""
    if isinstance(kernel, ConFesKernel):
        if config.method is Method.REFES:
            raise ValueError("fused-lasso regularization applies to flat kernels only")
        return _ConvObjective(logits, labels, config, kernel.conv_size, kernel.stride)
    return _FlatObjective(logits, labels, config, shape=kernel.shape)


def loss_and_grad(kernel, logits, labels, config: RegConfig):
    """Total objective (data term plus the method's regularizer) and its
    exact gradient with respect to the raw parameters.

    The clipping subgradient at raw == 0 is taken as 0. Returns the gradient
    shaped like the kernel: a (k, j) array for flat kernels, a
    (depthwise, global) pair for hierarchies.
    """
    objective = make_objective(kernel, logits, labels, config)
    loss, grad = objective(kernel.pack())
    if isinstance(kernel, ConFesKernel):
        split = kernel.depthwise.size
        return loss, (
            grad[:split].reshape(kernel.depthwise.shape),
            grad[split:].reshape(kernel.global_.shape),
        )
    return loss, grad.reshape(kernel.shape)


def predict(kernel, query_logits):
    """Predicted labels and softmax probabilities for query instances.

    Ties in the meta logits resolve to the lowest class index. Each
    probability row sums to 1 within floating-point accuracy.
    """
    if isinstance(kernel, ConFesKernel):
        meta = confes_forward(kernel, query_logits)
    elif isinstance(kernel, FesKernel):
        meta = fes_forward(kernel, query_logits)
    else:
        eff = np.asarray(kernel, dtype=np.float64)
        meta = fes_forward(FesKernel(eff), query_logits)
    m = meta.max(axis=1, keepdims=True)
    ez = np.exp(meta - m)
    probs = ez / ez.sum(axis=1, keepdims=True)
    return meta.argmax(axis=1), probs


def omission_rate(effective_flat) -> float:
    """Fraction of flat effective weights that are exactly zero, i.e. the
    share of snapshots the stacker never consults at inference time."""
    w = np.asarray(effective_flat)
    return float(np.count_nonzero(w == 0.0) / w.size)


def write_kernel_csv(matrix, path) -> None:
    """One row per extractor, one column per snapshot, full float precision."""
    np.savetxt(Path(path), np.atleast_2d(np.asarray(matrix)), delimiter=",", fmt="%.17g")


def export_kernel_csvs(stacker: TrainedStacker, out_dir, stem: str) -> list:
    """Write the stacker's weight matrices as CSV files and return the paths.

    Flat kernels produce a single effective-kernel CSV; hierarchies produce
    depthwise, global, and expanded CSVs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if isinstance(stacker.kernel, ConFesKernel):
        parts = {
            "depthwise": stacker.kernel.effective_depthwise,
            "global": stacker.kernel.effective_global,
            "expanded": stacker.effective,
        }
    else:
        parts = {"effective": stacker.effective}
    for name, matrix in parts.items():
        path = out / f"{stem}_{name}.csv"
        write_kernel_csv(matrix, path)
        written.append(path)
    return written
