"""Detection metrics, operational projections and paired significance tests."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .correlation import Bucket, confidence_bucket
from .events import ModalityId
from .fusion import FusionConfig, forward_batch
from .numerics import ParamStore

FPR_LEVELS = (0.01, 0.05)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def fpr(self) -> float:
        d = self.fp + self.tn
        return self.fp / d if d else 0.0

    @property
    def undefined(self) -> list[str]:
        """Metrics reported as 0 because their denominator is empty."""
        out = []
        if not self.tp + self.fp:
            out.append("precision")
        if not self.tp + self.fn:
            out.append("recall")
        if not self.fp + self.tn:
            out.append("fpr")
        return out


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    if not len(s):
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    tn = int((~pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    return ConfusionCounts(tp, fp, tn, fn)


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """Step ROC as (threshold, fpr, tpr), from the all-negative point upwards."""
    s, y = _check(scores, labels)
    pos, neg = int(y.sum()), int(len(y) - y.sum())
    if not pos or not neg:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tps = np.cumsum(y_sorted)
    fps = np.cumsum(1 - y_sorted)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    pts = [(math.inf, 0.0, 0.0)]
    pts += [(float(s_sorted[i]), fps[i] / neg, tps[i] / pos) for i in ends]
    return pts


def tpr_at_fpr(scores, labels, fpr_level: float = 0.01) -> float:
    """Best TPR over step-ROC operating points with FPR <= ``fpr_level``."""
    return max(tpr for _, fpr, tpr in roc_points(scores, labels) if fpr <= fpr_level + 1e-12)


def fpr_at_tpr(scores, labels, tpr_level: float) -> float:
    """Lowest FPR over step-ROC operating points that reach ``tpr_level``."""
    return min(fpr for _, fpr, tpr in roc_points(scores, labels) if tpr >= tpr_level - 1e-12)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def alert_projection(fpr: float, benign_daily: int = 100_000, baseline_fpr: float | None = None) -> dict:
    """Daily false alerts when every one of ``benign_daily`` events is benign."""
    for r in (fpr, baseline_fpr):
        if r is not None and not 0.0 <= r <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
    alerts = _round_half_up(fpr * benign_daily)
    out = {"daily_events": benign_daily, "alerts": alerts, "baseline_alerts": None, "delta": None}
    if baseline_fpr is not None:
        base = _round_half_up(baseline_fpr * benign_daily)
        out["baseline_alerts"] = base
        out["delta"] = base - alerts
    return out


def fpr_reduction(baseline_fpr: float, new_fpr: float) -> float:
    """Percent reduction of the false-positive rate relative to the baseline."""
    if baseline_fpr <= 0:
        raise ValueError("baseline FPR must be > 0")
    return 100.0 * (baseline_fpr - new_fpr) / baseline_fpr


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


def _signed_rank_null(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Counts of each attainable doubled T+ over all 2^n sign patterns."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(deltas) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped.  Exact null distribution (mid-ranks for
    ties) for up to 20 non-zero differences, otherwise the normal
    approximation with tie and continuity corrections.
    """
    d = np.asarray(deltas, dtype=np.float64).reshape(-1)
    if len(d) < 5:
        raise ValueError("need at least 5 paired differences")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if n <= 20:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _signed_rank_null(doubled)
        k = int(round(2 * t_plus))
        total = 2**n
        lower = int(counts[: k + 1].sum()) / total
        upper = int(counts[k:].sum()) / total
        return min(1.0, 2.0 * min(lower, upper))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts**3) - tie_counts).sum()) / 48.0
    z = max(abs(t_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


# ---------------------------------------------------------------------------
# model evaluation


class DropPolicy(str, enum.Enum):
    NONE = "NONE"
    DROP_NETWORK = "DROP_NETWORK"
    DROP_TEXT = "DROP_TEXT"
    RANDOM_50 = "RANDOM_50"


@dataclass
class Prediction:
    scores: np.ndarray
    alpha: np.ndarray


def predict(cfg: FusionConfig, store: ParamStore, samples, chunk: int = 1024) -> Prediction:
    params = store.bind()
    scores, alphas = [], []
    for start in range(0, len(samples), chunk):
        part = samples.take(np.arange(start, min(start + chunk, len(samples))))
        out = forward_batch(cfg, params, part.batch())
        scores.append(1.0 / (1.0 + np.exp(-out.logits.value)))
        alphas.append(out.alpha.value)
    if not scores:
        return Prediction(np.zeros(0), np.zeros((0, len(cfg.modalities))))
    return Prediction(np.concatenate(scores), np.concatenate(alphas))


def apply_policy(samples, policy: DropPolicy | str, seed: int = 0):
    """Mask modalities per policy; a sample never loses its last modality."""
    policy = DropPolicy(policy)
    mods = list(samples.modalities)
    mask = samples.mask.copy()
    if policy is DropPolicy.NONE:
        return samples
    if policy is DropPolicy.RANDOM_50:
        rng = np.random.default_rng([seed, 50])
        hit = rng.random(len(samples)) < 0.5
        which = rng.integers(len(mods), size=len(samples))
        for r in np.flatnonzero(hit):
            mask[r, which[r]] = False
    else:
        target = ModalityId.NETWORK if policy is DropPolicy.DROP_NETWORK else ModalityId.EMAIL
        if target in mods:
            mask[:, mods.index(target)] = False
    # keep-one rule: restore the original mask row if everything was hidden
    empty = ~mask.any(axis=1)
    mask[empty] = samples.mask[empty]
    return samples.with_mask(mask)


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    fpr: float
    counts: ConfusionCounts
    tpr_at_fpr: dict[str, float]
    alert_projection: dict
    alpha_summary: dict[str, dict[str, float]]
    bucket_accuracy: dict[str, float]
    flags: list[str] = field(default_factory=list)
    policy: str = DropPolicy.NONE.value
    seeds: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "fpr": self.fpr,
            "counts": asdict(self.counts),
            "tpr_at_fpr": self.tpr_at_fpr,
            "alert_projection": self.alert_projection,
            "alpha_summary": self.alpha_summary,
            "bucket_accuracy": self.bucket_accuracy,
            "flags": self.flags,
            "policy": self.policy,
            "seeds": self.seeds,
        }


def alpha_summary(alpha: np.ndarray, type_keys: Sequence[str], mods: Sequence[ModalityId]) -> dict[str, dict[str, float]]:
    out = {}
    keys = np.asarray(type_keys)
    for key in sorted(set(type_keys)):
        rows = alpha[keys == key]
        out[key] = {m.value: float(v) for m, v in zip(mods, rows.mean(axis=0))}
    return out


def bucket_accuracy(scores: np.ndarray, labels: np.ndarray, w: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    buckets = np.array([confidence_bucket(v).value for v in w])
    correct = (scores >= threshold).astype(int) == labels
    return {b.value: float(correct[buckets == b.value].mean()) for b in Bucket if (buckets == b.value).any()}


def build_report(
    scores: np.ndarray,
    samples,
    alpha: np.ndarray | None = None,
    threshold: float = 0.5,
    baseline_fpr: float | None = None,
    benign_daily: int = 100_000,
    policy: str = "NONE",
) -> EvalReport:
    labels = samples.y
    cc = confusion(scores, labels, threshold)
    tprs = {}
    if 0 < labels.sum() < len(labels):
        tprs = {f"{lvl:g}": tpr_at_fpr(scores, labels, lvl) for lvl in FPR_LEVELS}
    alphas = alpha_summary(alpha, samples.type_key, samples.modalities) if alpha is not None and samples.type_key else {}
    return EvalReport(
        cc.accuracy,
        cc.precision,
        cc.recall,
        cc.fpr,
        cc,
        tprs,
        alert_projection(cc.fpr, benign_daily, baseline_fpr),
        alphas,
        bucket_accuracy(scores, labels, samples.w, threshold),
        cc.undefined,
        policy,
    )


def evaluate_model(cfg: FusionConfig, store: ParamStore, samples, policy="NONE", seed: int = 0, **kw) -> EvalReport:
    masked = apply_policy(samples, policy, seed)
    pred = predict(cfg, store, masked)
    return build_report(pred.scores, masked, pred.alpha, policy=DropPolicy(policy).value, **kw)


def missing_modality_eval(cfg: FusionConfig, store: ParamStore, samples, drop_policy, seed: int = 0) -> EvalReport:
    return evaluate_model(cfg, store, samples, drop_policy, seed)


def summarize(values: Sequence[float]) -> dict[str, float]:
    """Mean and (population) standard deviation across seeds."""
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(len(arr))}


def aggregate(reports: Sequence[EvalReport]) -> dict[str, dict[str, float]]:
    keys = ("accuracy", "precision", "recall", "fpr")
    out = {k: summarize([getattr(r, k) for r in reports]) for k in keys}
    for lvl in FPR_LEVELS:
        key = f"{lvl:g}"
        vals = [r.tpr_at_fpr[key] for r in reports if key in r.tpr_at_fpr]
        if vals:
            out[f"tpr@{key}"] = summarize(vals)
    return out


def format_table(rows: Mapping[str, Mapping[str, Mapping[str, float]]], metrics=("accuracy", "precision", "recall", "fpr")) -> str:
    """Text table of mean±std per method (std = standard deviation across seeds)."""
    head = f"{'Method':<34}" + "".join(f"{m:>18}" for m in metrics)
    lines = [head, "-" * len(head)]
    for name, agg in rows.items():
        cells = []
        for m in metrics:
            if m in agg:
                scale = 1.0 if m == "fpr" or m.startswith("tpr") else 100.0
                digits = 3 if scale == 1.0 else 1
                cells.append(f"{agg[m]['mean'] * scale:.{digits}f}±{agg[m]['std'] * scale:.{digits}f}".rjust(18))
            else:
                cells.append(" " * 17 + "-")
        lines.append(f"{name:<34}" + "".join(cells))
    lines.append("± is the standard deviation across seeds.")
    return "\n".join(lines)


def write_roc_csv(scores, labels, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["threshold", "fpr", "tpr"])
        for thr, f, t in roc_points(scores, labels):
            wr.writerow([thr, f, t])

