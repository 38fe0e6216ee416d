"""Per-modality event encoders.

Every encoder maps a batch of feature rows to a token sequence
``(B, L, d)`` and a pooled embedding ``(B, d)``.  The token sequence is what
the attention layers use as keys and values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .events import ModalityId
from .numerics import ParamStore, Tensor


class Arch(str, enum.Enum):
    CONV1D = "CONV1D"
    POOL_FF = "POOL_FF"
    RECURRENT = "RECURRENT"


DEFAULT_ARCH = {
    ModalityId.NETWORK: Arch.CONV1D,
    ModalityId.EMAIL: Arch.POOL_FF,
    ModalityId.LOG: Arch.RECURRENT,
}


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    modality: ModalityId
    input_dim: int
    embed_dim: int = 32
    hidden_dim: int = 32
    arch: Arch | None = None
    kernel_width: int = 3
    step_dim: int = 1
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "modality", ModalityId(self.modality))
        if self.arch is None:
            object.__setattr__(self, "arch", DEFAULT_ARCH[self.modality])
        object.__setattr__(self, "arch", Arch(self.arch))
        if self.input_dim <= 0 or self.embed_dim <= 0 or self.hidden_dim <= 0:
            raise EncoderError("encoder dimensions must be positive")
        if self.arch is Arch.CONV1D and self.input_dim < self.kernel_width:
            raise EncoderError(f"CONV1D needs input_dim >= kernel_width ({self.kernel_width})")
        if self.arch is Arch.RECURRENT and self.input_dim % self.step_dim:
            raise EncoderError("RECURRENT input_dim must be a multiple of step_dim")

    @property
    def prefix(self) -> str:
        return f"enc.{self.modality.value}"

    @property
    def seq_len(self) -> int:
        if self.arch is Arch.CONV1D:
            return self.input_dim - self.kernel_width + 1
        if self.arch is Arch.POOL_FF:
            return self.input_dim
        return self.input_dim // self.step_dim

    def to_json(self) -> dict:
        return {
            "modality": self.modality.value,
            "input_dim": self.input_dim,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "arch": self.arch.value,
            "kernel_width": self.kernel_width,
            "step_dim": self.step_dim,
            "bias": self.bias,
        }


def init_encoder(cfg: EncoderConfig, store: ParamStore, scale: float = 0.1) -> None:
    p, d = cfg.prefix, cfg.embed_dim

    def bias(name, n):
        if cfg.bias:
            store.zeros(f"{p}.{name}", (n,))

    if cfg.arch is Arch.CONV1D:
        store.uniform(f"{p}.kernel", (cfg.kernel_width, d), scale)
        bias("b", d)
    elif cfg.arch is Arch.POOL_FF:
        store.uniform(f"{p}.E", (cfg.input_dim, d), scale)
        store.uniform(f"{p}.G", (cfg.input_dim, d), scale)
        store.uniform(f"{p}.W1", (d, cfg.hidden_dim), scale)
        bias("b1", cfg.hidden_dim)
        store.uniform(f"{p}.W2", (cfg.hidden_dim, d), scale)
        bias("b2", d)
    else:
        s = cfg.step_dim
        for gate in ("z", "h"):
            store.uniform(f"{p}.W{gate}", (s, d), scale)
            store.uniform(f"{p}.U{gate}", (d, d), scale)
            bias(f"b{gate}", d)


def unfold(x: np.ndarray, width: int) -> np.ndarray:
    """Sliding windows ``(B, F) -> (B, F - width + 1, width)``."""
    return np.lib.stride_tricks.sliding_window_view(x, width, axis=1).copy()


def _maybe_bias(t: Tensor, params: Mapping[str, Tensor], name: str) -> Tensor:
    return t + params[name] if name in params else t


def encode_batch(x: np.ndarray, cfg: EncoderConfig, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Encode a ``(B, input_dim)`` feature block; returns (tokens, pooled)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise EncoderError(f"{cfg.modality.value} encoder expects (B, {cfg.input_dim}), got {x.shape}")
    p = cfg.prefix
    if cfg.arch is Arch.CONV1D:
        windows = Tensor(unfold(x, cfg.kernel_width))
        tokens = nx.tanh(_maybe_bias(nx.matmul(windows, params[f"{p}.kernel"]), params, f"{p}.b"))
        return tokens, nx.mean(tokens, axis=1)
    if cfg.arch is Arch.POOL_FF:
        xv = Tensor(x[:, :, None])
        tokens = nx.tanh(xv * params[f"{p}.E"] + params[f"{p}.G"])
        pooled = nx.mean(tokens, axis=1)
        h = nx.tanh(_maybe_bias(nx.matmul(pooled, params[f"{p}.W1"]), params, f"{p}.b1"))
        return tokens, nx.tanh(_maybe_bias(nx.matmul(h, params[f"{p}.W2"]), params, f"{p}.b2"))
    steps = x.reshape(x.shape[0], cfg.seq_len, cfg.step_dim)
    return recurrent(steps, cfg, params)


def recurrent(steps: np.ndarray, cfg: EncoderConfig, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Single-gate recurrent cell over ``(B, L, step_dim)``; h_0 = 0."""
    if steps.shape[1] < 1:
        raise EncoderError("RECURRENT encoder needs a sequence of length >= 1")
    p = cfg.prefix
    B = steps.shape[0]
    h = Tensor(np.zeros((B, cfg.embed_dim)))
    states = []
    for t in range(steps.shape[1]):
        xt = Tensor(steps[:, t, :])
        z = nx.sigmoid(_maybe_bias(nx.matmul(xt, params[f"{p}.Wz"]) + nx.matmul(h, params[f"{p}.Uz"]), params, f"{p}.bz"))
        c = nx.tanh(_maybe_bias(nx.matmul(xt, params[f"{p}.Wh"]) + nx.matmul(h, params[f"{p}.Uh"]), params, f"{p}.bh"))
        h = h + z * (c - h)
        states.append(nx.reshape(h, (B, 1, cfg.embed_dim)))
    tokens = states[0] if len(states) == 1 else nx.concat(states, axis=1)
    return tokens, h


def encode(features, cfg: EncoderConfig, params: ParamStore) -> np.ndarray:
    """Embedding of one event (or one ``(L, step_dim)`` sequence for RECURRENT)."""
    x = np.asarray(features, dtype=np.float64)
    bound = params.bind()
    if cfg.arch is Arch.RECURRENT and x.ndim == 2:
        if x.shape[0] < 1:
            raise EncoderError("RECURRENT encoder needs a sequence of length >= 1")
        if x.shape[1] != cfg.step_dim:
            raise EncoderError(f"sequence steps must have {cfg.step_dim} features")
        _, pooled = recurrent(x[None], cfg, bound)
    else:
        if x.ndim != 1:
            raise EncoderError("encode expects a single feature vector")
        if cfg.arch is Arch.RECURRENT and x.size == 0:
            raise EncoderError("RECURRENT encoder needs a sequence of length >= 1")
        _, pooled = encode_batch(x[None], cfg, bound)
    return pooled.value[0].copy()
