"""Single-document run configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .correlation import CorrelationConfig, CorrelationConfigError
from .events import PreprocessConfig
from .fusion import Ablation
from .synth import SynthConfig
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 16
    hidden_dim: int = 16
    controller_hidden: int = 16
    head_hidden: int = 16
    cross_layers: int = 1
    init_scale: float = 0.1
    kernel_width: int = 3


@dataclass(frozen=True)
class EvalSection:
    seeds: int = 5
    threshold: float = 0.5
    benign_daily: int = 100_000
    policies: tuple[str, ...] = ("NONE", "DROP_NETWORK", "DROP_TEXT", "RANDOM_50")


def _strict(cls, doc: Mapping, block: str):
    if not isinstance(doc, Mapping):
        raise ConfigError(f"'{block}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{block}': {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{block}' block: {exc}") from None


def _fixture_synth() -> dict:
    from .synth import fusion_fixture

    return fusion_fixture(0)[0].to_json()


def _fixture_correlation() -> dict:
    from .synth import fusion_fixture

    return fusion_fixture(0)[1].to_json()


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig
    correlation: CorrelationConfig
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    BLOCKS = ("synth", "correlation", "preprocess", "model", "training", "eval")

    @classmethod
    def default(cls) -> "RunConfig":
        return cls.from_json({})

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(cls.BLOCKS)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
        synth_doc = {**_fixture_synth(), **doc.get("synth", {})}
        try:
            synth = SynthConfig.from_json(synth_doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'synth' block: {exc}") from None
        corr_doc = {**_fixture_correlation(), **doc.get("correlation", {})}
        if "half_life" in doc.get("correlation", {}):
            corr_doc.pop("lambda_decay", None)
        try:
            corr = CorrelationConfig.from_json(corr_doc)
        except (CorrelationConfigError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'correlation' block: {exc}") from None
        pre = _strict(PreprocessConfig, doc.get("preprocess", {}), "preprocess")
        model = _strict(ModelSection, doc.get("model", {}), "model")
        ev = dict(doc.get("eval", {}))
        if "policies" in ev:
            ev["policies"] = tuple(ev["policies"])
        evs = _strict(EvalSection, ev, "eval")
        if evs.seeds < 1:
            raise ConfigError("eval.seeds must be >= 1")
        return cls(synth, corr, pre, model, _training(doc.get("training", {})), evs)

    def to_json(self) -> dict:
        tr = self.training.to_json()
        lw = tr.pop("loss_weights")
        tr.update(lw)
        return {
            "synth": self.synth.to_json(),
            "correlation": self.correlation.to_json(),
            "preprocess": {
                "normalization": self.preprocess.normalization,
                "discretization_bins": self.preprocess.discretization_bins,
                "selected_feature_count": self.preprocess.selected_feature_count,
            },
            "model": vars(self.model).copy(),
            "training": tr,
            "eval": {**vars(self.eval), "policies": list(self.eval.policies)},
        }

    def with_seed(self, seed: int) -> "RunConfig":
        """Reseed every stochastic component from one run seed."""
        return replace(
            self,
            synth=replace(self.synth, rng_seed=seed),
            correlation=replace(self.correlation, rng_seed=seed),
            training=replace(self.training, rng_seed=seed),
        )


_TRAIN_DEFAULTS = dict(epochs=60, batch_size=64, learning_rate=0.003, early_stop_patience=8)


def _training(doc: Mapping) -> TrainConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("'training' must be an object")
    kw = {**_TRAIN_DEFAULTS, **doc}
    known = {f.name for f in fields(TrainConfig)} - {"loss_weights"} | {"lambda1", "lambda2"}
    unknown = set(kw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in 'training': {sorted(unknown)}")
    try:
        lw = LossWeights(kw.pop("lambda1", 0.1), kw.pop("lambda2", 0.1))
        ab = kw.pop("ablation", {})
        if not isinstance(ab, Mapping) or set(ab) - set(Ablation.FLAGS):
            raise ConfigError(f"unknown ablation flag(s): {sorted(set(ab) - set(Ablation.FLAGS))}")
        return TrainConfig(**kw, loss_weights=lw, ablation=Ablation(**ab))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid 'training' block: {exc}") from None


def load_config(path: str | Path | None) -> RunConfig:
    """Read a run config; ``None`` yields the built-in fixture defaults.

    Missing files and malformed JSON are config errors.
    """
    if path is None:
        return RunConfig.default()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return RunConfig.from_json(doc)
