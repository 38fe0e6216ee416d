"""Confidence-weighted attention fusion over per-modality encoders.

Forward pass for one batch:

    encode each modality -> tokens (B, L, d), embedding e (B, d)
    self-attention       s_m = Attn(e_m; tokens_m)
    cross-attention      c_m = sum_{n != m, both present} Attn_w(e_m; tokens_n)
    representation       r_m = tanh(e_m + s_m + dropout(c_m))
    controller           alpha = masked softmax(f(mask, w))
    head                 logit = FF(sum_m alpha_m r_m)

Cross-attention scores are multiplied by the pair confidence ``w`` inside the
softmax, so ``w = 0`` gives uniform attention over the partner tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .encoders import EncoderConfig, encode_batch, init_encoder
from .events import ModalityId
from .numerics import NumericError, ParamStore, Tensor


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class Ablation:
    no_confidence_weighting: bool = False
    no_temporal_correlation: bool = False
    no_hierarchical_attention: bool = False
    no_missing_modality_paths: bool = False

    FLAGS = (
        "no_confidence_weighting",
        "no_temporal_correlation",
        "no_hierarchical_attention",
        "no_missing_modality_paths",
    )

    @classmethod
    def single(cls, flag: str) -> "Ablation":
        if flag not in cls.FLAGS:
            raise ValueError(f"unknown ablation flag {flag!r}")
        return cls(**{flag: True})

    def active(self) -> list[str]:
        return [f for f in self.FLAGS if getattr(self, f)]

    def to_json(self) -> dict:
        return {f: getattr(self, f) for f in self.FLAGS}


@dataclass(frozen=True)
class FusionConfig:
    encoders: tuple[EncoderConfig, ...]
    controller_hidden: int = 16
    head_hidden: int = 16
    dropout: float = 0.3
    cross_layers: int = 1
    init_scale: float = 0.1
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if len(self.encoders) < 2:
            raise FusionError("fusion needs at least two modalities")
        dims = {e.embed_dim for e in self.encoders}
        if len(dims) != 1:
            raise FusionError("all encoders must share embed_dim")
        mods = [e.modality for e in self.encoders]
        if len(set(mods)) != len(mods):
            raise FusionError("duplicate modality in encoder list")
        if not 0.0 <= self.dropout < 1.0:
            raise FusionError("dropout must lie in [0, 1)")
        if self.cross_layers < 1:
            raise FusionError("cross_layers must be >= 1")

    @property
    def modalities(self) -> tuple[ModalityId, ...]:
        return tuple(e.modality for e in self.encoders)

    @property
    def embed_dim(self) -> int:
        return self.encoders[0].embed_dim

    def encoder(self, m: ModalityId) -> EncoderConfig:
        for e in self.encoders:
            if e.modality == m:
                return e
        raise KeyError(m)

    def with_ablation(self, ablation: Ablation) -> "FusionConfig":
        return replace(self, ablation=ablation)

    def to_json(self) -> dict:
        return {
            "encoders": [e.to_json() for e in self.encoders],
            "controller_hidden": self.controller_hidden,
            "head_hidden": self.head_hidden,
            "dropout": self.dropout,
            "cross_layers": self.cross_layers,
            "init_scale": self.init_scale,
            "ablation": self.ablation.to_json(),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "FusionConfig":
        return cls(
            encoders=tuple(EncoderConfig(**e) for e in doc["encoders"]),
            controller_hidden=doc["controller_hidden"],
            head_hidden=doc["head_hidden"],
            dropout=doc["dropout"],
            cross_layers=doc["cross_layers"],
            init_scale=doc["init_scale"],
            ablation=Ablation(**doc["ablation"]),
        )


def init_params(cfg: FusionConfig, seed: int) -> ParamStore:
    store = ParamStore(seed)
    d, s = cfg.embed_dim, cfg.init_scale
    mods = [m.value for m in cfg.modalities]
    for enc in cfg.encoders:
        init_encoder(enc, store, s)
    for m in mods:
        for k in ("Wq", "Wk", "Wv"):
            store.uniform(f"sa.{m}.{k}", (d, d), s)
    for m in mods:
        for n in mods:
            if m == n:
                continue
            for layer in range(cfg.cross_layers):
                for k in ("Wq", "Wk", "Wv"):
                    store.uniform(f"ca.{m}<{n}.{layer}.{k}", (d, d), s)
    M = len(mods)
    store.uniform("ctrl.W1", (M + 1, cfg.controller_hidden), s)
    store.zeros("ctrl.b1", (cfg.controller_hidden,))
    store.uniform("ctrl.W2", (cfg.controller_hidden, M), s)
    store.zeros("ctrl.b2", (M,))
    if cfg.ablation.no_hierarchical_attention:
        store.uniform("cat.W", (M * d, d), s)
        store.zeros("cat.b", (d,))
    store.uniform("head.W1", (d, cfg.head_hidden), s)
    store.zeros("head.b1", (cfg.head_hidden,))
    store.uniform("head.W2", (cfg.head_hidden, 1), s)
    store.zeros("head.b2", (1,))
    for m in mods:
        store.uniform(f"mhead.{m}.g", (d, 1), s)
        store.zeros(f"mhead.{m}.c", (1,))
    return store


# ---------------------------------------------------------------------------
# attention primitives


def cross_attention(Q, K, V, w: float, d: int) -> np.ndarray:
    """softmax((Q K^T / sqrt(d)) * w) V for 2-D arrays."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise FusionError("cross_attention expects 2-D Q, K, V")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise FusionError(f"cross_attention shape mismatch Q{Q.shape} K{K.shape} V{V.shape}")
    if not 0.0 <= w <= 1.0:
        raise FusionError("confidence w must lie in [0, 1]")
    scores = (Q @ K.T) / math.sqrt(d) * w
    return nx.softmax_rows(scores) @ V


def attention_weights(Q, K, w: float, d: int) -> np.ndarray:
    Q, K = np.asarray(Q, dtype=np.float64), np.asarray(K, dtype=np.float64)
    return nx.softmax_rows((Q @ K.T) / math.sqrt(d) * w)


def attend(query: Tensor, tokens: Tensor, params: Mapping[str, Tensor], prefix: str, w: np.ndarray | None):
    """Batched single-query attention; returns (out (B, d), weights (B, L))."""
    B, L, d = tokens.shape
    q = nx.reshape(nx.matmul(query, params[f"{prefix}.Wq"]), (B, 1, d))
    k = nx.matmul(tokens, params[f"{prefix}.Wk"])
    v = nx.matmul(tokens, params[f"{prefix}.Wv"])
    scale = np.full((B, 1, 1), 1.0 / math.sqrt(d))
    if w is not None:
        scale = scale * np.asarray(w, dtype=np.float64).reshape(B, 1, 1)
    scores = nx.matmul(q, nx.transpose(k)) * scale
    a = nx.softmax(scores)
    out = nx.reshape(nx.matmul(a, v), (B, d))
    return out, a.value.reshape(B, L)


def masked_softmax_alpha(logits: Tensor, mask: np.ndarray) -> Tensor:
    return nx.softmax(logits, mask=mask)


# ---------------------------------------------------------------------------
# batches


@dataclass
class FusionBatch:
    """Column-wise batch: per-modality feature blocks plus mask and confidence."""

    x: dict[ModalityId, np.ndarray]
    mask: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.w = np.asarray(self.w, dtype=np.float64)
        if not self.mask.any(axis=1).all():
            raise FusionError("every sample needs at least one available modality")
        if ((self.w < 0) | (self.w > 1)).any():
            raise FusionError("confidence w must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.w)


@dataclass
class BatchOutput:
    logits: Tensor
    modality_logits: Tensor
    alpha: Tensor
    attention: dict[str, np.ndarray]
    mask: np.ndarray
    w: np.ndarray


def controller_logits(mask: np.ndarray, w: np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
    u = Tensor(np.concatenate([mask.astype(np.float64), w.reshape(-1, 1)], axis=1))
    h = nx.tanh(nx.matmul(u, params["ctrl.W1"]) + params["ctrl.b1"])
    return nx.matmul(h, params["ctrl.W2"]) + params["ctrl.b2"]


def forward_batch(
    cfg: FusionConfig,
    params: Mapping[str, Tensor],
    batch: FusionBatch,
    rng: np.random.Generator | None = None,
) -> BatchOutput:
    """Run the fusion network; ``rng`` enables train-mode dropout."""
    ab = cfg.ablation
    mods = cfg.modalities
    mask = batch.mask
    w = batch.w
    if ab.no_missing_modality_paths:
        mask = np.ones_like(mask)
    if ab.no_confidence_weighting:
        w = np.ones_like(w)
    B = len(w)
    trace: dict[str, np.ndarray] = {}
    enc = {}
    for m in mods:
        x = batch.x[m]
        if x.shape[0] != B:
            raise FusionError("feature block and mask disagree on batch size")
        enc[m] = encode_batch(x, cfg.encoder(m), params)

    reps, solo = {}, {}
    for i, m in enumerate(mods):
        tokens, e = enc[m]
        if ab.no_hierarchical_attention:
            reps[m] = solo[m] = e
            continue
        s, a = attend(e, tokens, params, f"sa.{m.value}", None)
        trace[f"self.{m.value}"] = a
        solo[m] = nx.tanh(e + s)
        cross = None
        for j, n in enumerate(mods):
            if n == m:
                continue
            both = (mask[:, i] & mask[:, j]).astype(np.float64).reshape(B, 1)
            if not both.any():
                continue
            q = e
            for layer in range(cfg.cross_layers):
                c, a = attend(q, enc[n][0], params, f"ca.{m.value}<{n.value}.{layer}", w)
                trace[f"cross.{m.value}<{n.value}.{layer}"] = a
                q = nx.tanh(q + c) if layer + 1 < cfg.cross_layers else c
            term = q * both
            cross = term if cross is None else cross + term
        if cross is not None:
            cross = nx.dropout(cross, cfg.dropout, rng)
            reps[m] = nx.tanh(e + s + cross)
        else:
            reps[m] = solo[m]

    alpha = masked_softmax_alpha(controller_logits(mask, w, params), mask)
    if ab.no_hierarchical_attention:
        parts = [reps[m] * _col(alpha, i) for i, m in enumerate(mods)]
        fused = nx.tanh(nx.matmul(nx.concat(parts, axis=1), params["cat.W"]) + params["cat.b"])
    else:
        fused = None
        for i, m in enumerate(mods):
            term = reps[m] * _col(alpha, i)
            fused = term if fused is None else fused + term
    h = nx.tanh(nx.matmul(fused, params["head.W1"]) + params["head.b1"])
    logits = nx.reshape(nx.matmul(h, params["head.W2"]) + params["head.b2"], (B,))
    mlog = nx.concat(
        [nx.matmul(solo[m], params[f"mhead.{m.value}.g"]) + params[f"mhead.{m.value}.c"] for m in mods], axis=1
    )
    return BatchOutput(logits, mlog, alpha, trace, mask, w)


def _col(t: Tensor, i: int) -> Tensor:
    """Column ``i`` of a (B, M) tensor as (B, 1)."""
    B = t.shape[0]
    return nx.reshape(nx.take(t, i, axis=1), (B, 1))


# ---------------------------------------------------------------------------
# single-sample API


@dataclass(frozen=True)
class FusionInput:
    """One sample: raw features per modality (None when absent) and confidence."""

    features: Mapping[ModalityId, Sequence[float] | None]
    w: float = 0.0

    def mask(self, mods: Sequence[ModalityId]) -> np.ndarray:
        return np.array([self.features.get(m) is not None for m in mods], dtype=bool)


@dataclass
class FusionOutput:
    logit: float
    alpha: dict[str, float]
    attention_trace: dict[str, list[float]]

    @property
    def probability(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.logit))

    def to_json(self) -> dict:
        return {"logit": self.logit, "alpha": self.alpha, "attention_trace": self.attention_trace}


def batch_from_inputs(cfg: FusionConfig, inputs: Sequence[FusionInput]) -> FusionBatch:
    mods = cfg.modalities
    mask = np.array([inp.mask(mods) for inp in inputs], dtype=bool).reshape(len(inputs), len(mods))
    x = {}
    for m in mods:
        dim = cfg.encoder(m).input_dim
        block = np.zeros((len(inputs), dim))
        for r, inp in enumerate(inputs):
            f = inp.features.get(m)
            if f is not None:
                f = np.asarray(f, dtype=np.float64)
                if f.shape != (dim,):
                    raise FusionError(f"{m.value} features must have length {dim}")
                block[r] = f
        x[m] = block
    return FusionBatch(x, mask, np.array([inp.w for inp in inputs], dtype=np.float64))


def fuse_forward(
    inp: FusionInput,
    params: ParamStore,
    cfg: FusionConfig,
    rng: np.random.Generator | None = None,
) -> FusionOutput:
    if not inp.mask(cfg.modalities).any():
        raise FusionError("no available modality")
    out = forward_batch(cfg, params.bind(), batch_from_inputs(cfg, [inp]), rng)
    logit = float(out.logits.value[0])
    if not math.isfinite(logit):
        raise NumericError("non-finite logit")
    alpha = {m.value: float(out.alpha.value[0, i]) for i, m in enumerate(cfg.modalities)}
    trace = {k: v[0].tolist() for k, v in out.attention.items()}
    return FusionOutput(logit, alpha, trace)


def controller(mask: Sequence[bool], w: float, params: ParamStore) -> np.ndarray:
    """Per-modality weights alpha for one availability mask and confidence."""
    mask = np.asarray(mask, dtype=bool).reshape(1, -1)
    if not mask.any():
        raise FusionError("at least one modality must be available")
    bound = params.bind()
    return masked_softmax_alpha(controller_logits(mask, np.array([w]), bound), mask).value[0].copy()
