"""Event streams: domain types, JSONL/CSV ingestion and preprocessing."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class ModalityId(str, enum.Enum):
    NETWORK = "NETWORK"
    EMAIL = "EMAIL"
    LOG = "LOG"

    def __str__(self) -> str:
        return self.value


class StreamError(ValueError):
    """Malformed or inconsistent event stream."""


@dataclass(frozen=True)
class Event:
    id: str
    modality: ModalityId
    t: float
    type_tag: str
    x: tuple[float, ...]
    y: int

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "modality": self.modality.value,
            "t": self.t,
            "type": self.type_tag,
            "x": list(self.x),
            "y": self.y,
        }


@dataclass(frozen=True)
class StreamDataset:
    modality: ModalityId
    events: tuple[Event, ...]
    feature_dim: int
    taxonomy: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise StreamError("feature_dim must be positive")
        for e in self.events:
            if e.modality != self.modality:
                raise StreamError(f"event {e.id} has modality {e.modality}, expected {self.modality}")
            if len(e.x) != self.feature_dim:
                raise StreamError(f"event {e.id} has {len(e.x)} features, expected {self.feature_dim}")
        keys = [(e.t, e.id) for e in self.events]
        if keys != sorted(keys):
            raise StreamError("events must be sorted by (timestamp, id)")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.events]

    @property
    def X(self) -> np.ndarray:
        if not self.events:
            return np.zeros((0, self.feature_dim))
        return np.array([e.x for e in self.events], dtype=np.float64)

    @property
    def y(self) -> np.ndarray:
        return np.array([e.y for e in self.events], dtype=np.int64)

    @property
    def t(self) -> np.ndarray:
        return np.array([e.t for e in self.events], dtype=np.float64)

    def by_id(self) -> dict[str, Event]:
        return {e.id: e for e in self.events}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.events:
            h.update(json.dumps(e.to_record(), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def with_features(self, X: np.ndarray) -> "StreamDataset":
        X = np.asarray(X, dtype=np.float64)
        events = tuple(
            Event(e.id, e.modality, e.t, e.type_tag, tuple(float(v) for v in row), e.y)
            for e, row in zip(self.events, X)
        )
        return StreamDataset(self.modality, events, X.shape[1], self.taxonomy)

    def subset(self, keep) -> "StreamDataset":
        keep = set(keep)
        return StreamDataset(
            self.modality, tuple(e for e in self.events if e.id in keep), self.feature_dim, self.taxonomy
        )


def make_dataset(
    modality: ModalityId,
    events: Iterable[Event],
    feature_dim: int,
    taxonomy: Iterable[str] | None = None,
) -> StreamDataset:
    """Sort, de-duplicate-check and wrap events into a dataset."""
    events = sorted(events, key=lambda e: (e.t, e.id))
    seen: set[str] = set()
    for e in events:
        if e.id in seen:
            raise StreamError(f"duplicate event id {e.id!r}")
        seen.add(e.id)
    tags = frozenset(taxonomy) if taxonomy is not None else frozenset(e.type_tag for e in events)
    for e in events:
        if e.type_tag not in tags:
            raise StreamError(f"event {e.id} type {e.type_tag!r} not in taxonomy")
    return StreamDataset(modality, tuple(events), feature_dim, tags)


def _parse_record(rec: Mapping, lineno: int, modality: ModalityId, dim: int | None) -> Event:
    try:
        eid = rec["id"]
        mod = rec["modality"]
        t = float(rec["t"])
        tag = rec["type"]
        x = tuple(float(v) for v in rec["x"])
        y = int(rec["y"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StreamError(f"line {lineno}: malformed event record ({exc})") from None
    if not isinstance(eid, str) or not eid:
        raise StreamError(f"line {lineno}: id must be a non-empty string")
    if mod != modality.value:
        raise StreamError(f"line {lineno}: modality {mod!r} does not match {modality.value!r}")
    if not math.isfinite(t) or t < 0:
        raise StreamError(f"line {lineno}: timestamp must be finite and non-negative")
    if not all(math.isfinite(v) for v in x):
        raise StreamError(f"line {lineno}: non-finite feature value")
    if y not in (0, 1):
        raise StreamError(f"line {lineno}: label must be 0 or 1")
    if dim is not None and len(x) != dim:
        raise StreamError(f"line {lineno}: feature vector has length {len(x)}, expected {dim}")
    return Event(eid, modality, t, str(tag), x, y)


def load_stream(
    path: str | Path,
    modality: ModalityId | str,
    feature_dim: int | None = None,
    taxonomy: Iterable[str] | None = None,
) -> StreamDataset:
    """Load a JSON Lines event file.

    When ``feature_dim`` is None the first record fixes the dimension.
    """
    modality = ModalityId(modality)
    path = Path(path)
    events: list[Event] = []
    dim = feature_dim
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StreamError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise StreamError(f"line {lineno}: record is not an object")
            ev = _parse_record(rec, lineno, modality, dim)
            dim = len(ev.x) if dim is None else dim
            events.append(ev)
    try:
        return make_dataset(modality, events, dim or 1, taxonomy)
    except StreamError as exc:
        raise StreamError(f"{path}: {exc}") from None


def load_csv_stream(
    path: str | Path,
    mapping: Mapping | str | Path,
    modality: ModalityId | str,
    taxonomy: Iterable[str] | None = None,
) -> StreamDataset:
    """Load a CSV file whose columns are named by a header mapping.

    ``mapping`` (a dict or JSON file) maps ``id``, ``t``, ``type``, ``y`` to
    column names and ``x`` to a list of feature columns.
    """
    modality = ModalityId(modality)
    if not isinstance(mapping, Mapping):
        mapping = json.loads(Path(mapping).read_text())
    cols = list(mapping["x"])
    events = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        # header is line 1
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = {
                    "id": row[mapping["id"]],
                    "modality": modality.value,
                    "t": row[mapping["t"]],
                    "type": row[mapping["type"]],
                    "x": [row[c] for c in cols],
                    "y": row[mapping["y"]],
                }
            except KeyError as exc:
                raise StreamError(f"line {lineno}: missing column {exc}") from None
            events.append(_parse_record(rec, lineno, modality, len(cols)))
    return make_dataset(modality, events, len(cols), taxonomy)


def dump_stream(dataset: StreamDataset, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for e in dataset.events:
            fh.write(json.dumps(e.to_record()) + "\n")


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessConfig:
    normalization: str = "z-score"
    discretization_bins: int | None = None
    selected_feature_count: int | None = None

    def __post_init__(self):
        if self.normalization not in ("z-score", "min-max"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.discretization_bins is not None and self.discretization_bins <= 0:
            raise ValueError("discretization_bins must be positive")
        if self.selected_feature_count is not None and self.selected_feature_count <= 0:
            raise ValueError("selected_feature_count must be positive")


@dataclass(frozen=True)
class NormStats:
    mode: str
    center: tuple[float, ...]
    scale: tuple[float, ...]
    degenerate: tuple[bool, ...]
    fitted_on: str
    bins: int | None = None

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "center": list(self.center),
            "scale": list(self.scale),
            "degenerate": list(self.degenerate),
            "fitted_on": self.fitted_on,
            "bins": self.bins,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "NormStats":
        return cls(
            doc["mode"],
            tuple(doc["center"]),
            tuple(doc["scale"]),
            tuple(doc["degenerate"]),
            doc["fitted_on"],
            doc.get("bins"),
        )


def fit_norm(X: np.ndarray, mode: str, fitted_on: str, bins: int | None = None) -> NormStats:
    X = np.asarray(X, dtype=np.float64)
    if mode == "z-score":
        center = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
        scale = X.std(axis=0, ddof=1) if len(X) > 1 else np.zeros(X.shape[1])
    else:
        center = X.min(axis=0) if len(X) else np.zeros(X.shape[1])
        scale = (X.max(axis=0) - center) if len(X) else np.zeros(X.shape[1])
    degenerate = scale <= 1e-12
    if degenerate.any():
        log.warning("%d constant feature(s) in %s; passed through as zeros", int(degenerate.sum()), fitted_on)
    return NormStats(mode, tuple(center), tuple(scale), tuple(bool(d) for d in degenerate), fitted_on, bins)


def apply_norm(X: np.ndarray, stats: NormStats) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != len(stats.center):
        raise StreamError(f"stats have {len(stats.center)} features, data has {X.shape[1]}")
    center = np.asarray(stats.center)
    scale = np.asarray(stats.scale)
    deg = np.asarray(stats.degenerate)
    out = (X - center) / np.where(deg, 1.0, scale)
    out[:, deg] = 0.0
    if stats.bins is not None:
        out = discretize(out, stats)
    return out


def discretize(Z: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map normalized values to equal-width bin indices.

    Bin edges span [0, 1] for min-max and [-3, 3] for z-score; values outside
    are clipped to the end bins.
    """
    lo, hi = (0.0, 1.0) if stats.mode == "min-max" else (-3.0, 3.0)
    idx = np.floor((Z - lo) / (hi - lo) * stats.bins)
    return np.clip(idx, 0, stats.bins - 1)


def normalize(
    dataset: StreamDataset,
    cfg: PreprocessConfig,
    stats: NormStats | None = None,
) -> tuple[StreamDataset, NormStats]:
    """Normalize (and optionally discretize) features.

    Statistics are fit on ``dataset`` unless ``stats`` is given; the stats
    record the fingerprint of the set they were fit on.
    """
    X = dataset.X
    if stats is None:
        stats = fit_norm(X, cfg.normalization, dataset.fingerprint(), cfg.discretization_bins)
    elif len(stats.center) != dataset.feature_dim:
        raise StreamError("normalization stats dimension does not match dataset")
    if not len(dataset):
        return dataset, stats
    return dataset.with_features(apply_norm(X, stats)), stats


def equal_width_bins(col: np.ndarray, bins: int = 16) -> np.ndarray:
    lo, hi = float(col.min()), float(col.max())
    if hi - lo <= 1e-12:
        return np.zeros(len(col), dtype=np.int64)
    idx = np.floor((col - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def plugin_mi(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in mutual information (nats) between two discrete label arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = len(a)
    if n == 0:
        return 0.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= n
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def mi_scores(X: np.ndarray, y: np.ndarray, bins: int = 16) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.array([plugin_mi(equal_width_bins(X[:, j], bins), y) for j in range(X.shape[1])])


def select_features(train: StreamDataset, k: int, bins: int = 16) -> list[int]:
    """Indices of the ``k`` features with highest I(feature; label).

    Ties go to the lower index; the result is ordered by decreasing score.
    """
    if not 1 <= k <= train.feature_dim:
        raise ValueError(f"k={k} must be in [1, {train.feature_dim}]")
    if not len(train):
        raise ValueError("cannot select features on an empty dataset")
    X = train.X
    if np.all(X.max(axis=0) - X.min(axis=0) <= 1e-12):
        log.warning("all features constant; returning the first %d indices", k)
        return list(range(k))
    scores = mi_scores(X, train.y, bins)
    # round away float noise so that equal MI ties on index
    order = sorted(range(len(scores)), key=lambda j: (-round(scores[j], 12), j))
    return order[:k]


def project(dataset: StreamDataset, indices: Sequence[int]) -> StreamDataset:
    if not len(dataset):
        return StreamDataset(dataset.modality, (), len(indices), dataset.taxonomy)
    return dataset.with_features(dataset.X[:, list(indices)])
