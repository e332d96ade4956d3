"""Episode data model and the on-disk bundle format.

An episode bundle holds everything a stacking classifier needs for one
few-shot task: three logit tensors (cross-validated support logits,
full-support logits, query logits), label arrays, and the fold assignment
used to produce the cross-validated logits.

On disk a bundle is a directory containing ``manifest.json`` plus raw
little-endian binary payloads, so it can be parsed from any language and
round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

# Sentinel fold value for support instances excluded from cross-validation
# (single-instance classes). Must fit in the u8 fold payload.
REMOVED = 255

_TENSOR_FILES = {
    "support_cv": "support_cv.bin",
    "support_full": "support_full.bin",
    "query": "query.bin",
}
_LABEL_FILES = {
    "support_labels": "support_labels.bin",
    "query_labels": "query_labels.bin",
    "fold_assignment": "folds.bin",
}


class BundleError(ValueError):
    """Raised when an episode bundle violates an invariant or the directory
    does not conform to the bundle format."""


@dataclass(frozen=True)
class LogitTensor:
    """Dense rank-4 logit tensor indexed (instance, extractor, snapshot, class).

    Stored as contiguous row-major float32; downstream math promotes to
    float64.
    """

    data: np.ndarray

    @classmethod
    def from_array(cls, arr) -> "LogitTensor":
        data = np.ascontiguousarray(arr, dtype=np.float32)
        if data.ndim != 4:
            raise BundleError(f"logit tensor must be rank 4, got rank {data.ndim}")
        if min(data.shape) < 1:
            raise BundleError(f"logit tensor dims must all be >= 1, got {data.shape}")
        if not np.isfinite(data).all():
            raise BundleError("logit tensor contains non-finite values")
        return cls(data)

    @property
    def n_instances(self) -> int:
        return self.data.shape[0]

    @property
    def n_extractors(self) -> int:
        return self.data.shape[1]

    @property
    def n_snapshots(self) -> int:
        return self.data.shape[2]

    @property
    def n_classes(self) -> int:
        return self.data.shape[3]

    def as_f64(self) -> np.ndarray:
        return self.data.astype(np.float64)


@dataclass(frozen=True)
class EpisodeBundle:
    """One few-shot episode, fully materialized in logit space."""

    support_cv_logits: LogitTensor
    support_full_logits: LogitTensor
    query_logits: LogitTensor
    support_labels: np.ndarray
    query_labels: np.ndarray
    fold_assignment: np.ndarray
    class_names: tuple
    domain_name: str
    episode_id: str
    seed: int

    @property
    def n_support(self) -> int:
        return self.support_cv_logits.n_instances

    @property
    def n_query(self) -> int:
        return self.query_logits.n_instances

    @property
    def n_extractors(self) -> int:
        return self.support_cv_logits.n_extractors

    @property
    def n_snapshots(self) -> int:
        return self.support_cv_logits.n_snapshots

    @property
    def n_classes(self) -> int:
        return self.support_cv_logits.n_classes

    def validate(self) -> None:
        """Check every bundle invariant; raise BundleError on the first failure."""
        cv, full, query = (
            self.support_cv_logits,
            self.support_full_logits,
            self.query_logits,
        )
        kjc = (cv.n_extractors, cv.n_snapshots, cv.n_classes)
        for name, t in (("support_full", full), ("query", query)):
            if (t.n_extractors, t.n_snapshots, t.n_classes) != kjc:
                raise BundleError(
                    f"{name} tensor dims {t.data.shape[1:]} do not match "
                    f"support_cv dims {kjc}"
                )
        if full.n_instances != cv.n_instances:
            raise BundleError(
                f"support tensors disagree on instance count: "
                f"{cv.n_instances} vs {full.n_instances}"
            )
        n_support, n_query, c = cv.n_instances, query.n_instances, cv.n_classes

        for name, labels, n in (
            ("support_labels", self.support_labels, n_support),
            ("query_labels", self.query_labels, n_query),
        ):
            if labels.shape != (n,):
                raise BundleError(f"{name} has shape {labels.shape}, expected ({n},)")
            if labels.size and (labels.min() < 0 or labels.max() >= c):
                raise BundleError(f"{name} contains class indices outside [0, {c})")
        if len(self.class_names) != c:
            raise BundleError(
                f"{len(self.class_names)} class names for {c} classes"
            )

        if self.fold_assignment.shape != (n_support,):
            raise BundleError(
                f"fold_assignment has shape {self.fold_assignment.shape}, "
                f"expected ({n_support},)"
            )
        folds = np.asarray(self.fold_assignment)
        bad = ~np.isin(folds, (0, 1, REMOVED))
        if bad.any():
            raise BundleError(f"fold_assignment contains invalid value {folds[bad][0]}")

        # An instance is fold-REMOVED iff its class has exactly one support
        # instance.
        counts = np.bincount(self.support_labels, minlength=c)
        singleton = counts[self.support_labels] == 1
        removed = folds == REMOVED
        if (removed != singleton).any():
            i = int(np.flatnonzero(removed != singleton)[0])
            raise BundleError(
                f"support instance {i}: fold removal does not match "
                f"single-instance-class rule"
            )

        # Query set is stratified: every class appears the same number of times.
        qcounts = np.bincount(self.query_labels, minlength=c)
        if qcounts.min() < 1 or qcounts.min() != qcounts.max():
            raise BundleError(
                f"query set is not stratified: per-class counts {qcounts.tolist()}"
            )

    def equals(self, other: "EpisodeBundle") -> bool:
        """Element-for-element equality, used by round-trip tests."""
        return (
            np.array_equal(self.support_cv_logits.data, other.support_cv_logits.data)
            and np.array_equal(
                self.support_full_logits.data, other.support_full_logits.data
            )
            and np.array_equal(self.query_logits.data, other.query_logits.data)
            and np.array_equal(self.support_labels, other.support_labels)
            and np.array_equal(self.query_labels, other.query_labels)
            and np.array_equal(self.fold_assignment, other.fold_assignment)
            and self.class_names == other.class_names
            and self.domain_name == other.domain_name
            and self.episode_id == other.episode_id
            and self.seed == other.seed
        )


def make_bundle(
    support_cv,
    support_full,
    query,
    support_labels,
    query_labels,
    fold_assignment,
    class_names,
    domain_name="synthetic",
    episode_id="ep00000",
    seed=0,
) -> EpisodeBundle:
    """Build and validate a bundle from plain arrays."""
    bundle = EpisodeBundle(
        support_cv_logits=LogitTensor.from_array(support_cv),
        support_full_logits=LogitTensor.from_array(support_full),
        query_logits=LogitTensor.from_array(query),
        support_labels=np.ascontiguousarray(support_labels, dtype=np.uint32),
        query_labels=np.ascontiguousarray(query_labels, dtype=np.uint32),
        fold_assignment=np.ascontiguousarray(fold_assignment, dtype=np.uint8),
        class_names=tuple(class_names),
        domain_name=str(domain_name),
        episode_id=str(episode_id),
        seed=int(seed),
    )
    bundle.validate()
    return bundle


def _manifest(bundle: EpisodeBundle) -> dict:
    dims = {
        "n_support": bundle.n_support,
        "n_query": bundle.n_query,
        "k": bundle.n_extractors,
        "j": bundle.n_snapshots,
        "c": bundle.n_classes,
    }
    files = {}
    for key, fname in _TENSOR_FILES.items():
        tensor = getattr(bundle, key + "_logits")
        files[key] = {
            "path": fname,
            "dtype": "<f4",
            "shape": list(tensor.data.shape),
        }
    files["support_labels"] = {
        "path": _LABEL_FILES["support_labels"],
        "dtype": "<u4",
        "shape": [bundle.n_support],
    }
    files["query_labels"] = {
        "path": _LABEL_FILES["query_labels"],
        "dtype": "<u4",
        "shape": [bundle.n_query],
    }
    files["fold_assignment"] = {
        "path": _LABEL_FILES["fold_assignment"],
        "dtype": "<u1",
        "shape": [bundle.n_support],
    }
    return {
        "schema_version": SCHEMA_VERSION,
        "domain": bundle.domain_name,
        "episode_id": bundle.episode_id,
        "seed": bundle.seed,
        "dims": dims,
        "class_names": list(bundle.class_names),
        "files": files,
    }


def save_episode(bundle: EpisodeBundle, path) -> None:
    """Write a bundle directory: manifest.json plus raw binary payloads.

    Refuses to write a bundle that fails validation. Output bytes are
    deterministic for a given bundle.
    """
    bundle.validate()
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    manifest = _manifest(bundle)
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out / "manifest.json").write_bytes(text.encode("utf-8"))

    for key, meta in manifest["files"].items():
        if key in _TENSOR_FILES:
            arr = getattr(bundle, key + "_logits").data
        else:
            arr = getattr(bundle, key)
        payload = np.ascontiguousarray(arr).astype(meta["dtype"]).tobytes()
        (out / meta["path"]).write_bytes(payload)


def _read_payload(directory: Path, name: str, meta: dict) -> np.ndarray:
    fpath = directory / meta["path"]
    if not fpath.is_file():
        raise BundleError(f"missing payload file {meta['path']!r}")
    dtype = np.dtype(meta["dtype"])
    shape = tuple(int(s) for s in meta["shape"])
    raw = fpath.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise BundleError(
            f"payload {meta['path']!r} is {len(raw)} bytes, expected {expected} "
            f"for dtype {meta['dtype']} shape {list(shape)}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape)


def load_episode(path) -> EpisodeBundle:
    """Read and validate a bundle directory written by save_episode."""
    directory = Path(path)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise BundleError(f"missing manifest.json in {directory}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"manifest.json is not valid JSON: {exc}") from exc

    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise BundleError(f"unknown schema_version {version!r}")

    files = manifest.get("files", {})
    required = set(_TENSOR_FILES) | set(_LABEL_FILES)
    missing = required - set(files)
    if missing:
        raise BundleError(f"manifest lacks file entries: {sorted(missing)}")

    payloads = {name: _read_payload(directory, name, files[name]) for name in required}
    for name in _TENSOR_FILES:
        if not np.isfinite(payloads[name]).all():
            raise BundleError(f"payload {name!r} contains non-finite values")

    dims = manifest.get("dims", {})
    expect_cv = (dims.get("n_support"), dims.get("k"), dims.get("j"), dims.get("c"))
    if payloads["support_cv"].shape != expect_cv:
        raise BundleError(
            f"manifest dims {expect_cv} do not match support_cv payload shape "
            f"{payloads['support_cv'].shape}"
        )

    try:
        return make_bundle(
            payloads["support_cv"],
            payloads["support_full"],
            payloads["query"],
            payloads["support_labels"],
            payloads["query_labels"],
            payloads["fold_assignment"],
            manifest.get("class_names", []),
            domain_name=manifest.get("domain", ""),
            episode_id=manifest.get("episode_id", ""),
            seed=manifest.get("seed", 0),
        )
    except BundleError:
        raise
    except (TypeError, KeyError, OverflowError) as exc:
        raise BundleError(f"malformed manifest: {exc}") from exc
