"""Multi-source dataset aggregation with weighted sampling.

Sources are JSONL manifests (one {"record": path, "source": id} per line,
record paths relative to the manifest). Draw probabilities follow source
weights; by default a weight scales every record of that source
individually, so a source with many records still contributes
proportionally more records than a small one at equal weight. The
alternative "per_dataset" mode gives each source a fixed probability mass
split evenly over its records.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .metrics import VALIDATION_RATIO
from .pipeline import AnnotationRecord, load_record

log = logging.getLogger(__name__)

# Published per-source sampling weights.
DEFAULT_SOURCE_WEIGHTS = {
    "Animal3D": 1.0,
    "CtrlAni3D": 0.5,
    "AnimalPose": 0.15,
    "AwA": 0.15,
    "ZebraSynthetic": 0.05,
    "StanfordExtra": 0.15,
    "APT-36K": 0.15,
}

DEFAULT_BATCH_SIZE = 16

LABEL_KINDS = ("full_3d", "kp2d_only")


@dataclass
class DatasetSource:
    id: str
    manifest: str
    label_kind: str = "full_3d"
    weight: float | None = None  # None: published default for the id, else 1.0

    def resolved_weight(self) -> float:
        if self.weight is not None:
            return float(self.weight)
        return DEFAULT_SOURCE_WEIGHTS.get(self.id, 1.0)


@dataclass
class Aggregate:
    sources: list[DatasetSource]
    records: list[AnnotationRecord]
    paths: list[str]
    source_idx: np.ndarray       # (N,) index into sources per record
    probabilities: np.ndarray    # (N,) normalized draw probabilities
    split: np.ndarray | None = field(default=None)  # (N,) "train"/"val"

    def train_indices(self) -> np.ndarray:
        if self.split is None:
            raise ValidationError("aggregate has no split yet")
        return np.nonzero(self.split == "train")[0]

    def val_indices(self) -> np.ndarray:
        if self.split is None:
            raise ValidationError("aggregate has no split yet")
        return np.nonzero(self.split == "val")[0]


def _read_manifest(source: DatasetSource) -> list[tuple[str, AnnotationRecord]]:
    base = Path(source.manifest).parent
    out = []
    with open(source.manifest) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                rel = entry["record"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"{source.manifest}:{ln}: bad manifest line: {e}") from e
            if entry.get("source", source.id) != source.id:
                raise ValidationError(
                    f"{source.manifest}:{ln}: record belongs to "
                    f"{entry['source']!r}, not {source.id!r}")
            path = str(rel) if Path(rel).is_absolute() else str(base / rel)
            out.append((path, load_record(path)))
    return out


def aggregate(sources: list[DatasetSource], mode: str = "per_record") -> Aggregate:
    """Load every source manifest and build the draw distribution.

    Checks each record against its source's declared label kind: full_3d
    records must carry beta/theta/keypoints3d and kp2d_only records must
    not. Empty sources are rejected.
    """
    if not sources:
        raise ValidationError("need at least one source")
    if mode not in ("per_record", "per_dataset"):
        raise ValueError(f"unknown weighting mode: {mode}")
    records: list[AnnotationRecord] = []
    paths: list[str] = []
    src_idx: list[int] = []
    counts = []
    for si, src in enumerate(sources):
        if src.label_kind not in LABEL_KINDS:
            raise ValidationError(f"source {src.id}: unknown label kind {src.label_kind!r}")
        loaded = _read_manifest(src)
        if not loaded:
            raise ValidationError(f"source {src.id}: manifest is empty")
        for path, rec in loaded:
            if src.label_kind == "full_3d" and not rec.has_3d():
                raise ValidationError(
                    f"{path}: source {src.id} declares full_3d but the record has no 3D")
            if src.label_kind == "kp2d_only" and (
                    rec.beta is not None or rec.theta is not None
                    or rec.keypoints3d is not None):
                raise ValidationError(
                    f"{path}: source {src.id} declares kp2d_only but the record has 3D")
            records.append(rec)
            paths.append(path)
            src_idx.append(si)
        counts.append(len(loaded))

    src_idx = np.array(src_idx)
    weights = np.array([s.resolved_weight() for s in sources])
    if np.any(weights < 0):
        raise ValidationError("source weights must be non-negative")
    if mode == "per_record":
        p = weights[src_idx]
    else:
        p = (weights / counts)[src_idx]
    total = p.sum()
    if total <= 0:
        raise ValidationError("at least one source needs a positive weight")
    p = p / total
    return Aggregate(sources=list(sources), records=records, paths=paths,
                     source_idx=src_idx, probabilities=p)


def split(
    agg: Aggregate,
    ratio: float = VALIDATION_RATIO,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Assign a stratified train/val split; returns (train, val) indices.

    Each source holds out round(ratio * N) records. Records are ordered by
    path before the seeded shuffle, so the assignment does not depend on
    manifest order. Sources too small to hold anything out get an empty
    validation share and a warning.
    """
    if not 0 <= ratio < 1:
        raise ValueError("ratio must be in [0, 1)")
    assignment = np.array(["train"] * len(agg.records), dtype=object)
    rng = np.random.default_rng(seed)
    for si, src in enumerate(agg.sources):
        idx = np.nonzero(agg.source_idx == si)[0]
        order = idx[np.argsort([agg.paths[i] for i in idx])]
        perm = rng.permutation(len(order))
        n_val = int(len(order) * ratio + 0.5)
        if n_val == 0:
            log.warning("source %s: too few records (%d) for a validation share",
                        src.id, len(order))
        assignment[order[perm[:n_val]]] = "val"
    agg.split = assignment
    return agg.train_indices(), agg.val_indices()


def sample_batch(
    agg: Aggregate,
    seed: int | np.random.Generator = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> list[AnnotationRecord]:
    """Draw a training batch: iid, with replacement, weight-proportional."""
    train = agg.train_indices()
    if len(train) == 0:
        raise ValidationError("train split is empty")
    p = agg.probabilities[train]
    p = p / p.sum()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = rng.choice(len(train), size=batch_size, replace=True, p=p)
    return [agg.records[train[i]] for i in picks]
