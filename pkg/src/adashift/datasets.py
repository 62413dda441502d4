"""Core dataset containers and on-disk formats.

Two interchangeable file layouts exist for feature matrices: a human-readable
CSV for small fixtures and a little-endian binary for large pools. Both carry
the class count and the domain tag in their header so that downstream
estimators know the full label space even when some classes are unobserved.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

_BINARY_MAGIC = b"ADFB"
_BINARY_VERSION = 1

# float32 round-trips through 9 significant decimal digits
_CSV_FLOAT_FMT = "{:.9g}"


class Domain(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class FeatureDataset:
    """An immutable matrix of feature vectors with optional class labels.

    features: (n, d) float32 matrix, one row per sample.
    ids: (n,) int64 unique, stable sample identifiers.
    domain: which side of the adaptation problem the samples belong to.
    labels: optional (n,) int64 class ids in [0, num_classes).
    num_classes: size of the label space, declared rather than inferred.
    """

    features: np.ndarray
    ids: np.ndarray
    domain: Domain
    labels: np.ndarray | None = None
    num_classes: int | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise DataFormatError(f"features must be a non-empty 2-d matrix, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise DataFormatError("features contain non-finite values")
        if ids.shape != (feats.shape[0],):
            raise DataFormatError("ids length does not match the number of rows")
        if len(np.unique(ids)) != len(ids):
            raise DataFormatError("duplicate ids")
        labels = self.labels
        if labels is not None:
            labels = np.ascontiguousarray(labels, dtype=np.int64)
            if labels.shape != (feats.shape[0],):
                raise DataFormatError("labels length does not match the number of rows")
            if self.num_classes is None:
                raise DataFormatError("labeled dataset requires a declared class count")
            if np.any(labels < 0) or np.any(labels >= self.num_classes):
                raise DataFormatError("label out of range")
        if self.num_classes is not None and self.num_classes < 1:
            raise DataFormatError("num_classes must be >= 1")
        for arr in (feats, ids, labels):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, positions: np.ndarray) -> "FeatureDataset":
        """New dataset from row positions (not ids); labels carried along."""
        positions = np.asarray(positions)
        return FeatureDataset(
            features=self.features[positions],
            ids=self.ids[positions],
            domain=self.domain,
            labels=None if self.labels is None else self.labels[positions],
            num_classes=self.num_classes,
        )


@dataclass(frozen=True)
class LabelDistribution:
    """A probability vector over the class label space."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.shape[0] < 1:
            raise DataFormatError("probs must be a non-empty vector")
        if np.any(probs < 0):
            raise DataFormatError("probabilities must be nonnegative")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise DataFormatError(f"probabilities sum to {probs.sum()!r}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def uniform(cls, num_classes: int) -> "LabelDistribution":
        return cls(np.full(num_classes, 1.0 / num_classes))

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> "LabelDistribution":
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total <= 0:
            raise DataFormatError("cannot normalise all-zero counts")
        return cls(counts / total)


@dataclass
class RoundState:
    """Budget bookkeeping carried across sampling rounds.

    labeled_ids keeps acquisition order; treated as a set for membership.
    """

    budget_per_round: int
    round_index: int = 0
    labeled_ids: tuple[int, ...] = ()
    total_budget_spent: int = 0
    oracle_labels: dict[int, int | None] = field(default_factory=dict)
    underspent: bool = False

    def validate(self):
        if self.round_index < 0:
            raise DataFormatError("round_index must be >= 0")
        if len(set(self.labeled_ids)) != len(self.labeled_ids):
            raise DataFormatError("labeled_ids contains duplicates")
        if len(self.labeled_ids) != self.total_budget_spent:
            raise DataFormatError("labeled set size does not match spent budget")
        if not self.underspent and self.total_budget_spent != self.round_index * self.budget_per_round:
            raise DataFormatError(
                f"spent budget {self.total_budget_spent} != round {self.round_index} x B {self.budget_per_round}"
            )

    def to_json(self) -> str:
        return json.dumps(
            {
                "budget_per_round": self.budget_per_round,
                "round_index": self.round_index,
                "labeled_ids": list(self.labeled_ids),
                "total_budget_spent": self.total_budget_spent,
                "oracle_labels": {str(k): v for k, v in self.oracle_labels.items()},
                "underspent": self.underspent,
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "RoundState":
        try:
            raw = json.loads(text)
            state = cls(
                budget_per_round=int(raw["budget_per_round"]),
                round_index=int(raw["round_index"]),
                labeled_ids=tuple(int(i) for i in raw["labeled_ids"]),
                total_budget_spent=int(raw["total_budget_spent"]),
                oracle_labels={
                    int(k): (None if v is None else int(v)) for k, v in raw["oracle_labels"].items()
                },
                underspent=bool(raw["underspent"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"malformed round state: {exc}") from exc
        state.validate()
        return state


def empirical_label_distribution(ds: FeatureDataset) -> LabelDistribution:
    """Class frequencies of a labeled dataset: probs[c] = count(c) / n."""
    if ds.labels is None:
        raise DataFormatError("dataset has no labels")
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    return LabelDistribution(counts / ds.n)


def _parse_metadata_line(line: str) -> dict[str, str]:
    meta = {}
    for token in line.lstrip("#").split():
        if "=" in token:
            key, value = token.split("=", 1)
            meta[key] = value
    return meta


def save_feature_dataset(ds: FeatureDataset, path: str | Path):
    """Write a dataset; `.csv` suffix selects CSV, anything else binary."""
    path = Path(path)
    if path.suffix == ".csv":
        _save_csv(ds, path)
    else:
        _save_binary(ds, path)


def load_feature_dataset(
    path: str | Path,
    *,
    num_classes: int | None = None,
    domain: Domain | str | None = None,
) -> FeatureDataset:
    """Read a dataset written by save_feature_dataset or by hand.

    File metadata takes precedence over the keyword arguments; the arguments
    fill in whatever a hand-written CSV omits. Domain defaults to target.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"no such file: {path}")
    if isinstance(domain, str):
        domain = Domain(domain)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _BINARY_MAGIC:
        return _load_binary(path)
    return _load_csv(path, num_classes=num_classes, domain=domain)


def _save_csv(ds: FeatureDataset, path: Path):
    with open(path, "w", encoding="utf-8") as fh:
        meta = f"# domain={ds.domain.value}"
        if ds.num_classes is not None:
            meta += f" classes={ds.num_classes}"
        fh.write(meta + "\n")
        cols = ["id"] + [f"f{j}" for j in range(ds.dim)]
        if ds.labels is not None:
            cols.append("label")
        fh.write(",".join(cols) + "\n")
        for i in range(ds.n):
            row = [str(int(ds.ids[i]))]
            row += [_CSV_FLOAT_FMT.format(float(v)) for v in ds.features[i]]
            if ds.labels is not None:
                row.append(str(int(ds.labels[i])))
            fh.write(",".join(row) + "\n")


def _load_csv(path: Path, *, num_classes: int | None, domain: Domain | None) -> FeatureDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines and lines[0].startswith("#"):
        meta = _parse_metadata_line(lines.pop(0))
        if "classes" in meta:
            num_classes = int(meta["classes"])
        if "domain" in meta:
            try:
                domain = Domain(meta["domain"])
            except ValueError as exc:
                raise DataFormatError(f"unknown domain tag {meta['domain']!r}") from exc
    if not lines:
        raise DataFormatError(f"{path} has no header row")
    header = [c.strip() for c in lines.pop(0).split(",")]
    if not header or header[0] != "id":
        raise DataFormatError(f"{path}: first CSV column must be 'id'")
    has_label = header[-1] == "label"
    feat_cols = header[1 : -1 if has_label else len(header)]
    if not feat_cols:
        raise DataFormatError(f"{path}: no feature columns")
    ids, feats, labels = [], [], []
    for lineno, line in enumerate(lines, start=1):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(header):
            raise DataFormatError(f"{path}: row {lineno} has {len(parts)} fields, expected {len(header)}")
        try:
            ids.append(int(parts[0]))
            feats.append([np.float32(p) for p in parts[1 : 1 + len(feat_cols)]])
            if has_label:
                labels.append(int(parts[-1]))
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {lineno}: {exc}") from exc
    if has_label and num_classes is None:
        raise DataFormatError(f"{path}: labeled file must declare a class count ('# classes=C' or num_classes=)")
    return FeatureDataset(
        features=np.array(feats, dtype=np.float32),
        ids=np.array(ids, dtype=np.int64),
        domain=domain if domain is not None else Domain.TARGET,
        labels=np.array(labels, dtype=np.int64) if has_label else None,
        num_classes=num_classes,
    )


def load_probability_matrix(path: str | Path, num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read per-sample class probabilities from a CSV with header id,p0,p1,...

    Returns (ids, probs). Rows must be valid distributions within 1e-6.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"no such file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DataFormatError(f"{path}: empty probability file")
    header = [c.strip() for c in lines.pop(0).split(",")]
    if not header or header[0] != "id":
        raise DataFormatError(f"{path}: first column must be 'id'")
    n_cols = len(header) - 1
    if n_cols < 2:
        raise DataFormatError(f"{path}: need at least two class columns")
    if num_classes is not None and n_cols != num_classes:
        raise DataFormatError(f"{path}: {n_cols} class columns, expected {num_classes}")
    ids, rows = [], []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split(",")
        if len(parts) != len(header):
            raise DataFormatError(f"{path}: row {lineno} has {len(parts)} fields, expected {len(header)}")
        try:
            ids.append(int(parts[0]))
            rows.append([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise DataFormatError(f"{path}: row {lineno}: {exc}") from exc
    probs = np.array(rows, dtype=np.float64)
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise DataFormatError(f"{path}: rows must be probability distributions")
    return np.array(ids, dtype=np.int64), probs


def _save_binary(ds: FeatureDataset, path: Path):
    has_labels = ds.labels is not None
    header = struct.pack(
        "<4sIBBHIQQ",
        _BINARY_MAGIC,
        _BINARY_VERSION,
        0 if ds.domain is Domain.SOURCE else 1,
        1 if has_labels else 0,
        0,
        ds.num_classes or 0,
        ds.n,
        ds.dim,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(ds.ids.astype("<i8").tobytes())
        fh.write(ds.features.astype("<f4").tobytes())
        if has_labels:
            fh.write(ds.labels.astype("<i8").tobytes())


def _load_binary(path: Path) -> FeatureDataset:
    header_size = struct.calcsize("<4sIBBHIQQ")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < header_size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, domain_code, has_labels, _, num_classes, n, dim = struct.unpack(
        "<4sIBBHIQQ", blob[:header_size]
    )
    if magic != _BINARY_MAGIC:
        raise DataFormatError(f"{path}: bad magic bytes")
    if version != _BINARY_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    expected = header_size + 8 * n + 4 * n * dim + (8 * n if has_labels else 0)
    if len(blob) != expected:
        raise DataFormatError(f"{path}: file size {len(blob)} does not match header ({expected})")
    offset = header_size
    ids = np.frombuffer(blob, dtype="<i8", count=n, offset=offset).astype(np.int64)
    offset += 8 * n
    feats = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=offset).astype(np.float32)
    offset += 4 * n * dim
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<i8", count=n, offset=offset).astype(np.int64)
    return FeatureDataset(
        features=feats.reshape(n, dim),
        ids=ids,
        domain=Domain.SOURCE if domain_code == 0 else Domain.TARGET,
        labels=labels,
        num_classes=num_classes or None,
    )
