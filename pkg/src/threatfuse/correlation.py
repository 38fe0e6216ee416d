"""Cross-modal temporal correlation of independent event streams.

Pairs events from two streams that fall within a time window, scores each
pair by ``exp(-lambda*|dt|) * TypeSim``, keeps those above a confidence
floor and pads every fold with a fixed fraction of uncorrelated pairs.
Folds are contiguous time slices and pairs never cross a fold boundary.
"""

from __future__ import annotations

import bisect
import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .events import Event, StreamDataset

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


class PairKind(str, enum.Enum):
    CORRELATED = "CORRELATED"
    INJECTED_NEGATIVE = "INJECTED_NEGATIVE"


class Bucket(str, enum.Enum):
    HIGH = "HIGH"
    MEDIUM = "MEDIUM"
    LOW = "LOW"


class CorrelationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TypeSimTable:
    entries: Mapping[tuple[str, str], float] = field(default_factory=dict)
    default_same: float = 1.0
    default_diff: float = 0.0

    def __post_init__(self):
        table = {}
        for (a, b), v in dict(self.entries).items():
            v = float(v)
            if not 0.0 <= v <= 1.0:
                raise CorrelationConfigError(f"TypeSim({a},{b})={v} outside [0,1]")
            key = (a, b) if a <= b else (b, a)
            if key in table and table[key] != v:
                raise CorrelationConfigError(f"TypeSim({a},{b}) is not symmetric")
            table[key] = v
        object.__setattr__(self, "entries", table)
        for v in (self.default_same, self.default_diff):
            if not 0.0 <= v <= 1.0:
                raise CorrelationConfigError("TypeSim defaults must lie in [0,1]")
        for (a, b), v in table.items():
            if a != b and (v > self(a, a) or v > self(b, b)):
                raise CorrelationConfigError(f"TypeSim({a},{b})={v} exceeds a self-similarity")

    def __call__(self, a: str, b: str) -> float:
        key = (a, b) if a <= b else (b, a)
        if key in self.entries:
            return self.entries[key]
        return self.default_same if a == b else self.default_diff

    def to_json(self) -> dict:
        return {
            "entries": [[a, b, v] for (a, b), v in sorted(self.entries.items())],
            "default_same": self.default_same,
            "default_diff": self.default_diff,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "TypeSimTable":
        unknown = set(doc) - {"entries", "default_same", "default_diff"}
        if unknown:
            raise CorrelationConfigError(f"unknown type_similarity keys: {sorted(unknown)}")
        return cls(
            {(a, b): v for a, b, v in doc.get("entries", [])},
            float(doc.get("default_same", 1.0)),
            float(doc.get("default_diff", 0.0)),
        )


@dataclass(frozen=True)
class CorrelationConfig:
    tau: float = 300.0
    lambda_decay: float = LN2 / 60.0
    theta_min: float = 0.5
    negative_fraction: float = 0.30
    folds: int = 5
    type_similarity: TypeSimTable = field(default_factory=TypeSimTable)
    rng_seed: int = 0
    max_negative_retries: int = 50

    def __post_init__(self):
        if not self.tau > 0:
            raise CorrelationConfigError("tau must be > 0")
        if not self.lambda_decay >= 0:
            raise CorrelationConfigError("lambda_decay must be >= 0")
        if not 0 < self.theta_min < 1:
            raise CorrelationConfigError("theta_min must lie in (0, 1)")
        if not 0 <= self.negative_fraction <= 1:
            raise CorrelationConfigError("negative_fraction must lie in [0, 1]")
        if self.folds < 2:
            raise CorrelationConfigError("folds must be >= 2")

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "lambda_decay": self.lambda_decay,
            "theta_min": self.theta_min,
            "negative_fraction": self.negative_fraction,
            "folds": self.folds,
            "type_similarity": self.type_similarity.to_json(),
            "rng_seed": self.rng_seed,
            "max_negative_retries": self.max_negative_retries,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "CorrelationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known - {"half_life"}
        if unknown:
            raise CorrelationConfigError(f"unknown correlation keys: {sorted(unknown)}")
        kw = dict(doc)
        if "half_life" in kw:
            if "lambda_decay" in kw:
                raise CorrelationConfigError("give either half_life or lambda_decay, not both")
            kw["lambda_decay"] = LN2 / float(kw.pop("half_life"))
        if "type_similarity" in kw:
            kw["type_similarity"] = TypeSimTable.from_json(kw["type_similarity"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise CorrelationConfigError(str(exc)) from None


@dataclass(frozen=True)
class CorrelatedPair:
    left: str
    right: str
    w: float
    kind: PairKind

    def to_json(self) -> dict:
        return {"left": self.left, "right": self.right, "w": self.w, "kind": self.kind.value}


@dataclass(frozen=True)
class Fold:
    start: float
    end: float
    pairs: tuple[CorrelatedPair, ...]

    @property
    def correlated(self) -> list[CorrelatedPair]:
        return [p for p in self.pairs if p.kind is PairKind.CORRELATED]

    @property
    def negatives(self) -> list[CorrelatedPair]:
        return [p for p in self.pairs if p.kind is PairKind.INJECTED_NEGATIVE]


@dataclass(frozen=True)
class TrainingScenario:
    folds: tuple[Fold, ...]
    left_modality: str
    right_modality: str
    config: CorrelationConfig

    @property
    def fold_boundaries(self) -> list[tuple[float, float]]:
        return [(f.start, f.end) for f in self.folds]

    def all_pairs(self) -> list[CorrelatedPair]:
        return [p for f in self.folds for p in f.pairs]

    def to_json(self) -> dict:
        return {
            "left_modality": self.left_modality,
            "right_modality": self.right_modality,
            "config": self.config.to_json(),
            "folds": [
                {"start": f.start, "end": f.end, "pairs": [p.to_json() for p in f.pairs]}
                for f in self.folds
            ],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "TrainingScenario":
        folds = tuple(
            Fold(
                f["start"],
                f["end"],
                tuple(CorrelatedPair(p["left"], p["right"], float(p["w"]), PairKind(p["kind"])) for p in f["pairs"]),
            )
            for f in doc["folds"]
        )
        return cls(folds, doc["left_modality"], doc["right_modality"], CorrelationConfig.from_json(doc["config"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "TrainingScenario":
        return cls.from_json(json.loads(Path(path).read_text()))


def decay_weight(dt: float, lambda_decay: float) -> float:
    return math.exp(-lambda_decay * abs(dt))


def confidence_bucket(w: float) -> Bucket:
    if w > 0.8:
        return Bucket.HIGH
    if w > 0.5:
        return Bucket.MEDIUM
    return Bucket.LOW


def fold_intervals(t_min: float, t_max: float, k: int) -> list[tuple[float, float]]:
    width = (t_max - t_min) / k
    edges = [t_min + i * width for i in range(k)] + [t_max]
    return [(edges[i], edges[i + 1]) for i in range(k)]


def fold_index(t: float, t_min: float, t_max: float, k: int) -> int:
    if t_max <= t_min:
        return 0
    return min(k - 1, int((t - t_min) / ((t_max - t_min) / k)))


def _split(ds: StreamDataset, t_min: float, t_max: float, k: int) -> list[list[Event]]:
    parts: list[list[Event]] = [[] for _ in range(k)]
    for e in ds.events:
        parts[fold_index(e.t, t_min, t_max, k)].append(e)
    return parts


def _scan(a_events: Sequence[Event], b_events: Sequence[Event], cfg: CorrelationConfig) -> list[CorrelatedPair]:
    """Windowed pair scan over two time-sorted event lists."""
    out = []
    b_times = [e.t for e in b_events]
    sim = cfg.type_similarity
    for ea in a_events:
        lo = bisect.bisect_right(b_times, ea.t - cfg.tau)
        hi = bisect.bisect_left(b_times, ea.t + cfg.tau)
        for eb in b_events[lo:hi]:
            dt = ea.t - eb.t
            if abs(dt) >= cfg.tau:
                continue
            w = decay_weight(dt, cfg.lambda_decay) * sim(ea.type_tag, eb.type_tag)
            if w > cfg.theta_min:
                out.append(CorrelatedPair(ea.id, eb.id, w, PairKind.CORRELATED))
    return out


def _sample_negatives(
    a_events: Sequence[Event],
    b_events: Sequence[Event],
    taken: set[tuple[str, str]],
    count: int,
    rng: np.random.Generator,
    retries: int,
) -> list[tuple[str, str]]:
    chosen: list[tuple[str, str]] = []
    seen = set(taken)
    budget = max(1, count) * retries
    while len(chosen) < count and budget > 0:
        budget -= 1
        ea = a_events[int(rng.integers(len(a_events)))]
        eb = b_events[int(rng.integers(len(b_events)))]
        key = (ea.id, eb.id)
        if key in seen:
            continue
        seen.add(key)
        chosen.append(key)
    if len(chosen) < count:
        log.warning("only %d of %d uncorrelated pairs available; truncating", len(chosen), count)
    return chosen


def correlate(dA: StreamDataset, dB: StreamDataset, cfg: CorrelationConfig) -> TrainingScenario:
    """Mint confidence-weighted cross-modal pairs, fold by fold.

    Pairs are oriented (dA event, dB event).  Negative sampling runs in a
    canonical modality order so swapping the inputs only swaps orientation.
    """
    if dA.modality == dB.modality:
        raise ValueError("correlate needs two different modalities")
    k = cfg.folds
    times = [e.t for e in dA.events] + [e.t for e in dB.events]
    if not times:
        folds = tuple(Fold(0.0, 0.0, ()) for _ in range(k))
        return TrainingScenario(folds, dA.modality.value, dB.modality.value, cfg)
    t_min, t_max = min(times), max(times)
    swapped = dA.modality.value > dB.modality.value
    first, second = (dB, dA) if swapped else (dA, dB)
    parts1 = _split(first, t_min, t_max, k)
    parts2 = _split(second, t_min, t_max, k)
    folds = []
    for i, (lo, hi) in enumerate(fold_intervals(t_min, t_max, k)):
        ev1, ev2 = parts1[i], parts2[i]
        pairs = _scan(ev1, ev2, cfg)
        n_neg = math.ceil(cfg.negative_fraction * len(pairs) - 1e-12)
        if pairs and n_neg:
            rng = np.random.default_rng([cfg.rng_seed, i])
            taken = {(p.left, p.right) for p in pairs}
            neg = _sample_negatives(ev1, ev2, taken, n_neg, rng, cfg.max_negative_retries)
            pairs += [CorrelatedPair(a, b, 0.0, PairKind.INJECTED_NEGATIVE) for a, b in neg]
        if swapped:
            pairs = [CorrelatedPair(p.right, p.left, p.w, p.kind) for p in pairs]
        folds.append(Fold(lo, hi, tuple(pairs)))
    return TrainingScenario(tuple(folds), dA.modality.value, dB.modality.value, cfg)


def bucket_histogram(scenario: TrainingScenario) -> dict[str, int]:
    hist = {b.value: 0 for b in Bucket}
    for p in scenario.all_pairs():
        hist[confidence_bucket(p.w).value] += 1
    return hist
