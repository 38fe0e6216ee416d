"""Synthetic multi-stream scenarios with planted cross-modal attack chains.

Benign events are spread uniformly over the time span with standard-normal
features.  Each chain places its stages at cumulative random delays plus
Gaussian timestamp noise; threat features are the benign distribution with
the first ``informative`` coordinates shifted by ``signal_strength``.
The ground truth (same-chain cross-modal pairs) is kept apart from the
streams, and event ids are assigned after sorting so they carry no chain
information.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .correlation import (
    Bucket,
    CorrelationConfig,
    PairKind,
    TrainingScenario,
    TypeSimTable,
    confidence_bucket,
)
from .events import Event, ModalityId, StreamDataset, dump_stream, make_dataset

log = logging.getLogger(__name__)

BENIGN_TAG = {
    ModalityId.NETWORK: "normal_flow",
    ModalityId.EMAIL: "ham",
    ModalityId.LOG: "routine",
}

CONFOUNDER_TAG = {
    ModalityId.NETWORK: "web_browse",
    ModalityId.EMAIL: "newsletter",
    ModalityId.LOG: "admin_login",
}


@dataclass(frozen=True)
class Stage:
    modality: ModalityId
    type_tag: str
    delay_mean: float = 30.0
    delay_jitter: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "modality", ModalityId(self.modality))
        if self.delay_mean < 0 or self.delay_jitter < 0:
            raise ValueError("stage delays must be >= 0")

    def to_json(self) -> dict:
        return {
            "modality": self.modality.value,
            "type_tag": self.type_tag,
            "delay_mean": self.delay_mean,
            "delay_jitter": self.delay_jitter,
        }


APT_CHAIN = (
    Stage(ModalityId.EMAIL, "phishing_email", 0.0, 0.0),
    Stage(ModalityId.NETWORK, "link_click", 30.0, 10.0),
    Stage(ModalityId.LOG, "malware_exec", 30.0, 10.0),
    Stage(ModalityId.NETWORK, "c2_beacon", 30.0, 10.0),
    Stage(ModalityId.LOG, "lateral_movement", 30.0, 10.0),
)


@dataclass(frozen=True)
class SynthConfig:
    modalities: tuple[ModalityId, ...] = (ModalityId.NETWORK, ModalityId.EMAIL)
    n_benign: int = 200
    n_chains: int = 10
    chain_template: tuple[Stage, ...] = APT_CHAIN
    feature_dim: int = 12
    informative: int = 4
    signal_strength: float | Mapping[str, float] = 1.0
    timestamp_noise_sigma: float = 5.0
    time_span: float = 86400.0
    confounder_rate: float = 0.0
    chain_coupling: float = 0.0
    rng_seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(ModalityId(m) for m in self.modalities))
        object.__setattr__(
            self, "chain_template", tuple(s if isinstance(s, Stage) else Stage(**s) for s in self.chain_template)
        )
        if self.n_benign < 0 or self.n_chains < 0:
            raise ValueError("counts must be >= 0")
        if self.timestamp_noise_sigma < 0:
            raise ValueError("timestamp_noise_sigma must be >= 0")
        if self.time_span <= 0:
            raise ValueError("time_span must be > 0")
        if not 0 <= self.informative <= self.feature_dim:
            raise ValueError("informative must lie in [0, feature_dim]")
        if not 0.0 <= self.confounder_rate <= 1.0:
            raise ValueError("confounder_rate must lie in [0, 1]")
        if not 0.0 <= self.chain_coupling < 1.0:
            raise ValueError("chain_coupling must lie in [0, 1)")
        if len(set(self.modalities)) < 2:
            raise ValueError("need at least two modalities")

    def strength(self, m: ModalityId) -> float:
        if isinstance(self.signal_strength, Mapping):
            return float(self.signal_strength.get(m.value, 0.0))
        return float(self.signal_strength)

    def stages(self) -> tuple[Stage, ...]:
        """Template stages restricted to the emitted modalities.

        Delays of dropped stages are folded into the next kept stage.
        """
        kept = []
        carry_mean = carry_jit = 0.0
        for s in self.chain_template:
            carry_mean += s.delay_mean
            carry_jit += s.delay_jitter
            if s.modality in self.modalities:
                kept.append(Stage(s.modality, s.type_tag, carry_mean if kept else 0.0, carry_jit if kept else 0.0))
                carry_mean = carry_jit = 0.0
        return tuple(kept)

    def to_json(self) -> dict:
        sig = dict(self.signal_strength) if isinstance(self.signal_strength, Mapping) else self.signal_strength
        return {
            "modalities": [m.value for m in self.modalities],
            "n_benign": self.n_benign,
            "n_chains": self.n_chains,
            "chain_template": [s.to_json() for s in self.chain_template],
            "feature_dim": self.feature_dim,
            "informative": self.informative,
            "signal_strength": sig,
            "timestamp_noise_sigma": self.timestamp_noise_sigma,
            "time_span": self.time_span,
            "confounder_rate": self.confounder_rate,
            "chain_coupling": self.chain_coupling,
            "rng_seed": self.rng_seed,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "SynthConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        kw = dict(doc)
        if "modalities" in kw:
            kw["modalities"] = tuple(kw["modalities"])
        if "chain_template" in kw:
            kw["chain_template"] = tuple(Stage(**s) for s in kw["chain_template"])
        return cls(**kw)


@dataclass(frozen=True)
class GroundTruth:
    pairs: frozenset[tuple[str, str]]
    events: frozenset[str] = field(default_factory=frozenset)

    @staticmethod
    def key(a: str, b: str) -> tuple[str, str]:
        return (a, b) if a <= b else (b, a)

    def __contains__(self, pair) -> bool:
        return self.key(*pair) in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)

    def to_json(self) -> dict:
        return {"pairs": sorted(list(p) for p in self.pairs), "events": sorted(self.events)}

    @classmethod
    def from_json(cls, doc: Mapping) -> "GroundTruth":
        return cls(frozenset(cls.key(a, b) for a, b in doc["pairs"]), frozenset(doc.get("events", [])))


def default_type_similarity(
    related: float = 0.9,
    confounder: float = 0.7,
    benign: float | None = None,
    benign_stage: float | None = None,
) -> TypeSimTable:
    """Chain stages relate to each other; confounders partially resemble them.

    ``benign`` (when given) relates the per-modality benign tags to each other;
    ``benign_stage`` relates benign tags to chain stages.
    """
    stage_tags = sorted({s.type_tag for s in APT_CHAIN})
    entries: dict[tuple[str, str], float] = {}
    for i, a in enumerate(stage_tags):
        for b in stage_tags[i + 1:]:
            entries[(a, b)] = related
    for tag in CONFOUNDER_TAG.values():
        for s in stage_tags:
            entries[(tag, s)] = confounder
    if benign is not None:
        tags = sorted(BENIGN_TAG.values())
        for i, a in enumerate(tags):
            for b in tags[i + 1:]:
                entries[(a, b)] = benign
    if benign_stage is not None:
        for tag in BENIGN_TAG.values():
            for st in stage_tags:
                entries[(tag, st)] = benign_stage
    return TypeSimTable(entries)


def _features(rng: np.random.Generator, n: int, dim: int, shift: float, informative: int) -> np.ndarray:
    X = rng.normal(size=(n, dim))
    if n and informative:
        X[:, :informative] += shift
    return X


def generate(cfg: SynthConfig) -> tuple[dict[ModalityId, StreamDataset], GroundTruth]:
    """Generate independent per-modality streams and the chain ground truth."""
    rng = np.random.default_rng(cfg.rng_seed)
    stages = cfg.stages()
    # (modality, t, tag, label, chain index or -1, features)
    raw: dict[ModalityId, list[tuple]] = {m: [] for m in cfg.modalities}

    for m in cfg.modalities:
        ts = rng.uniform(0.0, cfg.time_span, size=cfg.n_benign)
        X = _features(rng, cfg.n_benign, cfg.feature_dim, 0.0, 0)
        raw[m].extend((t, BENIGN_TAG[m], 0, -1, x) for t, x in zip(ts, X))

    chains: list[list[tuple[ModalityId, int]]] = []
    for c in range(cfg.n_chains if stages else 0):
        placed = None
        for _ in range(cfg.max_retries):
            start = rng.uniform(0.0, cfg.time_span)
            times = []
            t = start
            for s in stages:
                lo = max(0.0, s.delay_mean - s.delay_jitter)
                t += rng.uniform(lo, s.delay_mean + s.delay_jitter) if s.delay_jitter else s.delay_mean
                times.append(t)
            noisy = [max(0.0, tt + rng.normal(0.0, cfg.timestamp_noise_sigma)) if cfg.timestamp_noise_sigma else tt for tt in times]
            if max(noisy) <= cfg.time_span:
                placed = noisy
                break
        if placed is None:
            log.warning("chain %d runs past the time span; truncating its late stages", c)
            placed = [tt for tt in noisy if tt <= cfg.time_span]
        members = []
        rho = cfg.chain_coupling
        # shared latent on the non-informative features: marginally N(0, 1)
        # per event, correlated only between events of the same chain
        z = rng.normal(size=cfg.feature_dim - cfg.informative) if rho else None
        for s, tt in zip(stages, placed):
            x = _features(rng, 1, cfg.feature_dim, cfg.strength(s.modality), cfg.informative)[0]
            if rho:
                x[cfg.informative:] = math.sqrt(1.0 - rho * rho) * x[cfg.informative:] + rho * z
            members.append((s.modality, len(raw[s.modality])))
            raw[s.modality].append((tt, s.type_tag, 1, c, x))
        chains.append(members)
        if cfg.confounder_rate and rng.random() < cfg.confounder_rate:
            anchor_mod, anchor_idx = members[int(rng.integers(len(members)))]
            others = [m for m in cfg.modalities if m != anchor_mod]
            m = others[int(rng.integers(len(others)))]
            t0 = raw[anchor_mod][anchor_idx][0]
            tt = float(np.clip(t0 + rng.uniform(-60.0, 60.0), 0.0, cfg.time_span))
            x = _features(rng, 1, cfg.feature_dim, 0.0, 0)[0]
            raw[m].append((tt, CONFOUNDER_TAG[m], 0, -1, x))

    datasets: dict[ModalityId, StreamDataset] = {}
    ids: dict[ModalityId, list[str]] = {}
    for m in cfg.modalities:
        rows = raw[m]
        order = sorted(range(len(rows)), key=lambda i: (rows[i][0], i))
        id_of = [""] * len(rows)
        events = []
        for rank, i in enumerate(order):
            t, tag, y, _, x = rows[i]
            eid = f"{m.value.lower()}-{rank:06d}"
            id_of[i] = eid
            events.append(Event(eid, m, float(t), tag, tuple(float(v) for v in x), int(y)))
        taxonomy = {BENIGN_TAG[m], CONFOUNDER_TAG[m]} | {s.type_tag for s in stages if s.modality == m}
        datasets[m] = make_dataset(m, events, cfg.feature_dim, taxonomy)
        ids[m] = id_of

    pairs = set()
    chain_events = set()
    for members in chains:
        named = [(m, ids[m][i]) for m, i in members]
        chain_events.update(e for _, e in named)
        for a in range(len(named)):
            for b in range(a + 1, len(named)):
                if named[a][0] != named[b][0]:
                    pairs.add(GroundTruth.key(named[a][1], named[b][1]))
    return datasets, GroundTruth(frozenset(pairs), frozenset(chain_events))


def write_outputs(datasets: Mapping[ModalityId, StreamDataset], truth: GroundTruth, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, ds in datasets.items():
        p = out_dir / f"{m.value.lower()}.jsonl"
        dump_stream(ds, p)
        paths.append(p)
    p = out_dir / "ground_truth.json"
    p.write_text(json.dumps(truth.to_json(), indent=1) + "\n")
    paths.append(p)
    return paths


@dataclass
class Recovery:
    precision: float
    recall: float
    f1: float
    bucket_tpr: dict[str, float]
    bucket_counts: dict[str, tuple[int, int]]

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "bucket_tpr": self.bucket_tpr,
            "bucket_counts": {k: list(v) for k, v in self.bucket_counts.items()},
        }


def bucket_counts(scenario: TrainingScenario, truth: GroundTruth) -> dict[str, tuple[int, int]]:
    """Per confidence bucket: (pairs that are true chain links, all pairs)."""
    counts = {b.value: [0, 0] for b in Bucket}
    for p in scenario.all_pairs():
        c = counts[confidence_bucket(p.w).value]
        c[1] += 1
        c[0] += (p.left, p.right) in truth
    return {k: (v[0], v[1]) for k, v in counts.items()}


def recovery_score(scenario: TrainingScenario, truth: GroundTruth) -> Recovery:
    """Precision/recall of CORRELATED pairs against the planted chains.

    Bucket TPR is the fraction of scenario pairs (injected negatives
    included) in each confidence bucket that are true chain links; empty
    buckets report NaN.
    """
    found = {GroundTruth.key(p.left, p.right) for p in scenario.all_pairs() if p.kind is PairKind.CORRELATED}
    tp = len(found & truth.pairs)
    precision = tp / len(found) if found else 0.0
    recall = tp / len(truth.pairs) if truth.pairs else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    counts = bucket_counts(scenario, truth)
    tpr = {k: (hit / n if n else float("nan")) for k, (hit, n) in counts.items()}
    return Recovery(precision, recall, f1, tpr, counts)


def recovery_config(seed: int, noise: float = 5.0, **overrides) -> tuple[SynthConfig, CorrelationConfig]:
    """The standard correlation-recovery fixture.

    Ten two-stage chains (phishing email, then a link click ~30 s later)
    among benign traffic, with occasional benign confounders near a chain.
    """
    synth = SynthConfig(
        modalities=(ModalityId.NETWORK, ModalityId.EMAIL),
        n_benign=200,
        n_chains=10,
        chain_template=(
            Stage(ModalityId.EMAIL, "phishing_email", 0.0, 0.0),
            Stage(ModalityId.NETWORK, "link_click", 30.0, 20.0),
        ),
        timestamp_noise_sigma=noise,
        confounder_rate=0.2,
        rng_seed=seed,
        **overrides,
    )
    corr = CorrelationConfig(type_similarity=default_type_similarity(related=1.0), rng_seed=seed)
    return synth, corr


def noise_sweep(sigmas: Iterable[float], seeds: Iterable[int]) -> dict[float, list[float]]:
    from .correlation import correlate

    out: dict[float, list[float]] = {}
    for sigma in sigmas:
        f1s = []
        for seed in seeds:
            synth, corr = recovery_config(seed, noise=sigma)
            ds, truth = generate(synth)
            sc = correlate(ds[ModalityId.NETWORK], ds[ModalityId.EMAIL], corr)
            f1s.append(recovery_score(sc, truth).f1)
        out[sigma] = f1s
    return out


def fusion_fixture(
    seed: int,
    benign_stage: float | None = 0.7,
    **overrides,
) -> tuple[SynthConfig, CorrelationConfig]:
    """The standard fusion fixture: threat evidence split across two modalities.

    Many short two-stage chains among benign traffic.  Benign events also
    correlate across streams, and chain stages partially resemble benign
    types, so the pairs mix both classes at varying confidence.  Each
    modality alone is only weakly separable; chain events additionally
    share a latent on their non-informative features that is visible only
    jointly.
    """
    kw = dict(
        modalities=(ModalityId.NETWORK, ModalityId.EMAIL),
        n_benign=600,
        n_chains=500,
        chain_template=(
            Stage(ModalityId.EMAIL, "phishing_email", 0.0, 0.0),
            Stage(ModalityId.NETWORK, "link_click", 30.0, 20.0),
        ),
        feature_dim=8,
        informative=4,
        signal_strength=0.6,
        timestamp_noise_sigma=5.0,
        time_span=36000.0,
        confounder_rate=0.2,
        chain_coupling=0.8,
        rng_seed=seed,
    )
    kw.update(overrides)
    synth = SynthConfig(**kw)
    sim = default_type_similarity(related=1.0, benign=1.0, benign_stage=benign_stage)
    return synth, CorrelationConfig(type_similarity=sim, rng_seed=seed)
