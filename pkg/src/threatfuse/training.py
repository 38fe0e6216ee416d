"""Composite-loss training with confidence-weighted sampling and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .events import ModalityId
from .fusion import Ablation, FusionBatch, FusionConfig, forward_batch, init_params
from .numerics import ParamStore, Tensor

log = logging.getLogger(__name__)

SAMPLER_UNIFORM = "UNIFORM"
SAMPLER_CONFIDENCE = "CONFIDENCE_WEIGHTED"


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the epoch and the sample ids of the offending batch."""

    def __init__(self, message: str, epoch: int, batch_index: list):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` misses."""

    def __init__(self, patience: int, initial: float = math.inf):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = initial
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if loss < self.best - 1e-12:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 0.01
    dropout: float = 0.3
    early_stop_patience: int = 10
    sampler: str = SAMPLER_CONFIDENCE
    ablation: Ablation = field(default_factory=Ablation)
    rng_seed: int = 0
    degrade_prob: float = 0.25
    sampling_floor: float = 0.05
    loss_weights: LossWeights = field(default_factory=LossWeights)
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.sampler not in (SAMPLER_UNIFORM, SAMPLER_CONFIDENCE):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if not 0.0 <= self.degrade_prob <= 1.0:
            raise ValueError("degrade_prob must lie in [0, 1]")

    def effective(self) -> "TrainConfig":
        """Apply the ablation rewiring that lives on the training side."""
        cfg = self
        if self.ablation.no_confidence_weighting:
            cfg = replace(cfg, sampler=SAMPLER_UNIFORM)
        if self.ablation.no_missing_modality_paths:
            cfg = replace(cfg, degrade_prob=0.0)
        return cfg

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "dropout": self.dropout,
            "early_stop_patience": self.early_stop_patience,
            "sampler": self.sampler,
            "ablation": self.ablation.to_json(),
            "rng_seed": self.rng_seed,
            "degrade_prob": self.degrade_prob,
            "sampling_floor": self.sampling_floor,
            "loss_weights": {"lambda1": self.loss_weights.lambda1, "lambda2": self.loss_weights.lambda2},
            "steps_per_epoch": self.steps_per_epoch,
        }


# ---------------------------------------------------------------------------
# samples


@dataclass
class SampleSet:
    """Model-ready samples: feature blocks, mask, confidence and labels."""

    modalities: tuple[ModalityId, ...]
    x: dict[ModalityId, np.ndarray]
    mask: np.ndarray
    w: np.ndarray
    y: np.ndarray
    ym: np.ndarray
    kind: list[str] = field(default_factory=list)
    type_key: list[str] = field(default_factory=list)
    ids: list[tuple[str | None, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda seq: [seq[i] for i in idx] if seq else []
        return SampleSet(
            self.modalities,
            {m: v[idx] for m, v in self.x.items()},
            self.mask[idx],
            self.w[idx],
            self.y[idx],
            self.ym[idx],
            pick(self.kind),
            pick(self.type_key),
            pick(self.ids),
        )

    def batch(self) -> FusionBatch:
        return FusionBatch(self.x, self.mask, self.w)

    def with_mask(self, mask: np.ndarray) -> "SampleSet":
        """Hide modalities: zero their features, drop them from the mask."""
        mask = np.asarray(mask, dtype=bool) & self.mask
        x = {m: np.where(mask[:, i:i + 1], self.x[m], 0.0) for i, m in enumerate(self.modalities)}
        w = np.where(mask.all(axis=1), self.w, 0.0)
        return SampleSet(self.modalities, x, mask, w, self.y, self.ym, list(self.kind), list(self.type_key), list(self.ids))

    @classmethod
    def concat(cls, sets: Sequence["SampleSet"]) -> "SampleSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        nonempty = [s for s in sets if len(s)]
        if not nonempty:
            return sets[0]
        sets = nonempty
        first = sets[0]
        return cls(
            first.modalities,
            {m: np.concatenate([s.x[m] for s in sets]) for m in first.modalities},
            np.concatenate([s.mask for s in sets]),
            np.concatenate([s.w for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.ym for s in sets]),
            [k for s in sets for k in s.kind],
            [k for s in sets for k in s.type_key],
            [k for s in sets for k in s.ids],
        )


def sampling_probabilities(w: np.ndarray, sampler: str, floor: float = 0.05) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if sampler == SAMPLER_UNIFORM:
        p = np.ones_like(w)
    else:
        p = w + floor
    return p / p.sum()


def degrade(batch: SampleSet, prob: float, rng: np.random.Generator) -> SampleSet:
    """Reduce a random subset of multi-modal samples to one kept modality.

    The kept modality's own event label becomes the sample label and the
    confidence drops to 0.
    """
    if prob <= 0.0 or not len(batch):
        return batch
    multi = batch.mask.sum(axis=1) > 1
    hit = (rng.random(len(batch)) < prob) & multi
    if not hit.any():
        return batch
    mask = batch.mask.copy()
    y = batch.y.copy()
    for r in np.flatnonzero(hit):
        avail = np.flatnonzero(batch.mask[r])
        keep = avail[int(rng.integers(len(avail)))]
        mask[r] = False
        mask[r, keep] = True
        y[r] = batch.ym[r, keep]
    out = batch.with_mask(mask)
    out.y = y
    return out


def sample_batch(samples: SampleSet, cfg: TrainConfig, rng: np.random.Generator) -> SampleSet:
    """Draw ``cfg.batch_size`` samples with replacement, then degrade some."""
    if not len(samples):
        raise ValueError("cannot sample from an empty training set")
    cfg = cfg.effective()
    p = sampling_probabilities(samples.w, cfg.sampler, cfg.sampling_floor)
    idx = rng.choice(len(samples), size=cfg.batch_size, replace=True, p=p)
    return degrade(samples.take(idx), cfg.degrade_prob, rng)


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossParts:
    total: Tensor
    task: np.ndarray
    consistency: np.ndarray
    independence: np.ndarray


def composite_loss(
    logits,
    labels,
    w,
    modality_logits,
    weights: LossWeights = LossWeights(),
    modality_labels=None,
    modality_mask=None,
    parts: bool = False,
):
    """Batch-mean of task + l1 * w * consistency + l2 * (1 - w) * independence.

    ``logits`` (B,) fused, ``modality_logits`` (B, M) per-modality heads.
    Consistency is the squared gap between the modality-head probabilities
    over every available pair; independence is the mean per-modality
    cross-entropy over available modalities.
    """
    logits = nx._lift(logits)
    mlog = nx._lift(modality_logits)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    B, M = mlog.shape
    if modality_labels is None:
        modality_labels = np.repeat(labels[:, None], M, axis=1)
    if modality_mask is None:
        modality_mask = np.ones((B, M), dtype=bool)
    mm = np.asarray(modality_mask, dtype=np.float64)
    for arr in (logits.value, mlog.value, labels, w):
        if not np.isfinite(arr).all():
            raise nx.NumericError("composite_loss inputs must be finite")
    if ((w < 0) | (w > 1)).any():
        raise ValueError("w must lie in [0, 1]")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")

    task = nx.bce_with_logits(nx.reshape(logits, (B,)), labels)

    probs = nx.sigmoid(mlog)
    cons = None
    n_pairs = np.zeros(B)
    for i in range(M):
        for j in range(i + 1, M):
            both = mm[:, i] * mm[:, j]
            diff = nx.take(probs, i, axis=1) - nx.take(probs, j, axis=1)
            term = diff * diff * both
            cons = term if cons is None else cons + term
            n_pairs += both
    cons = cons * (1.0 / np.maximum(n_pairs, 1.0))

    ind_each = nx.bce_with_logits(mlog, modality_labels) * mm
    ind = nx.sum_(ind_each, axis=1) * (1.0 / np.maximum(mm.sum(axis=1), 1.0))

    per = task + cons * (weights.lambda1 * w) + ind * (weights.lambda2 * (1.0 - w))
    total = nx.mean(per)
    if parts:
        return LossParts(total, task.value, cons.value, ind.value)
    return total


def batch_loss(cfg: FusionConfig, params, samples: SampleSet, weights: LossWeights, rng=None) -> tuple[Tensor, np.ndarray]:
    out = forward_batch(cfg, params, samples.batch(), rng)
    loss = composite_loss(
        out.logits, samples.y, out.w, out.modality_logits, weights, samples.ym, out.mask
    )
    return loss, out.logits.value


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    name = "adam"

    def __init__(self, store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.store.values.items():
            g = self.store.grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def evaluate_loss(cfg: FusionConfig, store: ParamStore, samples: SampleSet, weights: LossWeights, chunk: int = 1024):
    """Mean composite loss, accuracy and sigmoid scores over a sample set (eval mode)."""
    if not len(samples):
        return float("nan"), float("nan"), np.zeros(0)
    params = store.bind()
    total = 0.0
    logits = []
    for start in range(0, len(samples), chunk):
        part = samples.take(np.arange(start, min(start + chunk, len(samples))))
        loss, lg = batch_loss(cfg, params, part, weights)
        total += float(loss.value) * len(part)
        logits.append(lg)
    lg = np.concatenate(logits)
    scores = 1.0 / (1.0 + np.exp(-lg))
    acc = float(((scores >= 0.5).astype(int) == samples.y).mean())
    return total / len(samples), acc, scores


def train(
    train_set: SampleSet,
    val_set: SampleSet,
    model_cfg: FusionConfig,
    train_cfg: TrainConfig,
    params: ParamStore | None = None,
) -> tuple[ParamStore, list[dict]]:
    """Train with early stopping on validation loss; returns the best checkpoint."""
    if not len(train_set) or not len(val_set):
        raise ValueError("training needs non-empty training and validation sets")
    tcfg = train_cfg.effective()
    mcfg = replace(model_cfg, dropout=tcfg.dropout, ablation=train_cfg.ablation)
    store = params if params is not None else init_params(mcfg, train_cfg.rng_seed)
    opt = Adam(store, tcfg.learning_rate)
    rng = np.random.default_rng([train_cfg.rng_seed, 1])
    steps = tcfg.steps_per_epoch or max(1, math.ceil(len(train_set) / tcfg.batch_size))
    weights = tcfg.loss_weights

    init_loss, _, _ = evaluate_loss(mcfg, store, val_set, weights)
    stopper = EarlyStopping(tcfg.early_stop_patience, init_loss)
    best = store.copy()
    history: list[dict] = []
    for epoch in range(1, tcfg.epochs + 1):
        running = 0.0
        for _ in range(steps):
            batch = sample_batch(train_set, tcfg, rng)
            store.zero_grad()
            leaves = store.bind()
            try:
                loss, _ = batch_loss(mcfg, leaves, batch, weights, rng)
            except nx.NumericError:
                loss = None
            if loss is None or not math.isfinite(float(loss.value)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch, list(batch.ids))
            loss.backward()
            store.collect(leaves)
            opt.step()
            running += float(loss.value)
        try:
            val_loss, val_acc, _ = evaluate_loss(mcfg, store, val_set, weights)
        except nx.NumericError:
            val_loss = math.nan
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", epoch, [])
        history.append(
            {
                "epoch": epoch,
                "train_loss": running / steps,
                "val_loss": val_loss,
                "val_accuracy": val_acc,
                "lr": tcfg.learning_rate,
                "optimizer": opt.name,
            }
        )
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best = store.copy()
        if stop:
            break
    log.info("best epoch %d (val loss %.4f) after %d epochs", stopper.best_epoch, stopper.best, len(history))
    for entry in history:
        entry["best_epoch"] = stopper.best_epoch
    return best, history
