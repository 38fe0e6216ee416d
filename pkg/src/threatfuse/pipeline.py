"""End-to-end experiment plumbing: streams -> pairs -> samples -> models -> reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .correlation import PairKind, TrainingScenario, correlate, fold_index
from .encoders import EncoderConfig
from .evaluation import EvalReport, build_report, evaluate_model, predict
from .events import ModalityId, PreprocessConfig, StreamDataset, normalize, project, select_features
from .fusion import Ablation, FusionConfig
from .numerics import ParamStore
from .synth import GroundTruth, generate
from .training import SampleSet, TrainConfig, train

log = logging.getLogger(__name__)

RANDOM_PAIR = "RANDOM"


def split_folds(k: int) -> tuple[list[int], list[int], list[int]]:
    """Temporal split: all but the last two folds train, then validation, then test."""
    if k < 3:
        raise ValueError("need at least 3 folds for a train/validation/test split")
    return list(range(k - 2)), [k - 2], [k - 1]


def _span(scenario: TrainingScenario) -> tuple[float, float]:
    return scenario.folds[0].start, scenario.folds[-1].end


def events_in_folds(ds: StreamDataset, scenario: TrainingScenario, folds: Sequence[int]) -> StreamDataset:
    lo, hi = _span(scenario)
    k = len(scenario.folds)
    keep = set(folds)
    return ds.subset(e.id for e in ds.events if fold_index(e.t, lo, hi, k) in keep)


def prepare(
    datasets: Mapping[ModalityId, StreamDataset],
    scenario: TrainingScenario,
    train_folds: Sequence[int],
    pre: PreprocessConfig = PreprocessConfig(),
) -> tuple[dict[ModalityId, StreamDataset], dict]:
    """Normalize every stream with statistics fit on its training-fold events only."""
    out, meta = {}, {}
    for m, ds in datasets.items():
        fit_part = events_in_folds(ds, scenario, train_folds)
        if pre.selected_feature_count:
            idx = select_features(fit_part, pre.selected_feature_count)
            ds, fit_part = project(ds, idx), project(fit_part, idx)
            meta[f"{m.value}.features"] = idx
        _, stats = normalize(fit_part, pre)
        out[m], _ = normalize(ds, pre, stats)
        meta[f"{m.value}.norm"] = stats.to_json()
    return out, meta


def _empty(modalities: Sequence[ModalityId], dims: Mapping[ModalityId, int]) -> SampleSet:
    M = len(modalities)
    return SampleSet(
        tuple(modalities),
        {m: np.zeros((0, dims[m])) for m in modalities},
        np.zeros((0, M), dtype=bool),
        np.zeros(0),
        np.zeros(0, dtype=np.int64),
        np.zeros((0, M), dtype=np.int64),
    )


def pair_samples(
    scenario: TrainingScenario,
    datasets: Mapping[ModalityId, StreamDataset],
    folds: Sequence[int],
    modalities: Sequence[ModalityId],
    negatives: bool = True,
) -> SampleSet:
    """Two-modal samples for the pairs of the given folds.

    Pair label is 1 when either event is a threat; per-modality labels are
    the events' own labels.  ``negatives=False`` keeps only correlated pairs.
    """
    lm, rm = ModalityId(scenario.left_modality), ModalityId(scenario.right_modality)
    index = {m: datasets[m].by_id() for m in (lm, rm)}
    pairs = [p for i in folds for p in scenario.folds[i].pairs if negatives or p.kind is PairKind.CORRELATED]
    dims = {m: datasets[m].feature_dim for m in modalities}
    if not pairs:
        return _empty(modalities, dims)
    rows = {m: np.zeros((len(pairs), dims[m])) for m in modalities}
    M = len(modalities)
    mask = np.zeros((len(pairs), M), dtype=bool)
    ym = np.zeros((len(pairs), M), dtype=np.int64)
    w = np.zeros(len(pairs))
    kinds, keys, ids = [], [], []
    col = {m: i for i, m in enumerate(modalities)}
    for r, p in enumerate(pairs):
        ea, eb = index[lm][p.left], index[rm][p.right]
        for m, ev in ((lm, ea), (rm, eb)):
            rows[m][r] = ev.x
            mask[r, col[m]] = True
            ym[r, col[m]] = ev.y
        w[r] = p.w
        kinds.append(p.kind.value)
        keys.append("+".join(sorted((ea.type_tag, eb.type_tag))))
        ids.append((p.left, p.right))
    y = ym.max(axis=1)
    return SampleSet(tuple(modalities), rows, mask, w, y, ym, kinds, keys, ids)


def event_samples(ds: StreamDataset, modalities: Sequence[ModalityId], dims: Mapping[ModalityId, int]) -> SampleSet:
    """Single-modal samples, one per event, with confidence 0."""
    n = len(ds)
    M = len(modalities)
    if not n:
        return _empty(modalities, dims)
    col = list(modalities).index(ds.modality)
    x = {m: (ds.X if m == ds.modality else np.zeros((n, dims[m]))) for m in modalities}
    mask = np.zeros((n, M), dtype=bool)
    mask[:, col] = True
    ym = np.zeros((n, M), dtype=np.int64)
    ym[:, col] = ds.y
    keys = [e.type_tag for e in ds.events]
    return SampleSet(tuple(modalities), x, mask, np.zeros(n), ds.y.copy(), ym, ["SINGLE"] * n, keys, [(e.id,) for e in ds.events])


def random_pairs(
    scenario: TrainingScenario,
    datasets: Mapping[ModalityId, StreamDataset],
    folds: Sequence[int],
    modalities: Sequence[ModalityId],
    count: int,
    seed: int,
) -> SampleSet:
    """Uniformly random cross-modal pairs from the given folds, all with w = 0.

    Training set for the no-temporal-correlation ablation.
    """
    lm, rm = ModalityId(scenario.left_modality), ModalityId(scenario.right_modality)
    left = events_in_folds(datasets[lm], scenario, folds)
    right = events_in_folds(datasets[rm], scenario, folds)
    dims = {m: datasets[m].feature_dim for m in modalities}
    if not len(left) or not len(right) or count <= 0:
        return _empty(modalities, dims)
    rng = np.random.default_rng([seed, 7])
    li = rng.integers(len(left), size=count)
    ri = rng.integers(len(right), size=count)
    from .correlation import CorrelatedPair, Fold

    pairs = tuple(
        CorrelatedPair(left.events[a].id, right.events[b].id, 0.0, PairKind.INJECTED_NEGATIVE) for a, b in zip(li, ri)
    )
    tmp = replace(scenario, folds=(Fold(0.0, 0.0, pairs),))
    out = pair_samples(tmp, {lm: left, rm: right}, [0], modalities)
    out.kind = [RANDOM_PAIR] * len(out)
    return out


def deployment_samples(
    scenario: TrainingScenario,
    datasets: Mapping[ModalityId, StreamDataset],
    folds: Sequence[int],
    modalities: Sequence[ModalityId],
) -> SampleSet:
    """Everything a held-out fold presents at deployment.

    Correlated pairs are scored jointly; events that joined no correlated
    pair are scored alone through their single-modal path.
    """
    pairs = pair_samples(scenario, datasets, folds, modalities, negatives=False)
    paired = {i for ids in pairs.ids for i in ids}
    dims = {m: datasets[m].feature_dim for m in modalities}
    parts = [pairs]
    for m in modalities:
        ds = events_in_folds(datasets[m], scenario, folds)
        parts.append(event_samples(ds.subset(e.id for e in ds.events if e.id not in paired), modalities, dims))
    return SampleSet.concat(parts)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class Experiment:
    """Prepared data for one seed: normalized streams, scenario and sample splits."""

    datasets: dict[ModalityId, StreamDataset]
    scenario: TrainingScenario
    modalities: tuple[ModalityId, ...]
    train: SampleSet
    val: SampleSet
    test: SampleSet
    deploy: SampleSet
    folds: tuple[list[int], list[int], list[int]]
    truth: GroundTruth | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> dict[ModalityId, int]:
        return {m: self.datasets[m].feature_dim for m in self.modalities}

    def events(self, m: ModalityId, folds: Sequence[int]) -> SampleSet:
        ds = events_in_folds(self.datasets[m], self.scenario, folds)
        return event_samples(ds, self.modalities, self.dims)


def build_experiment(
    datasets: Mapping[ModalityId, StreamDataset],
    scenario: TrainingScenario,
    pre: PreprocessConfig = PreprocessConfig(),
    truth: GroundTruth | None = None,
) -> Experiment:
    mods = tuple(sorted((ModalityId(scenario.left_modality), ModalityId(scenario.right_modality)), key=lambda m: m.value))
    tr, va, te = split_folds(len(scenario.folds))
    normed, meta = prepare({m: datasets[m] for m in mods}, scenario, tr, pre)
    return Experiment(
        normed,
        scenario,
        mods,
        pair_samples(scenario, normed, tr, mods),
        deployment_samples(scenario, normed, va, mods),
        pair_samples(scenario, normed, te, mods, negatives=False),
        deployment_samples(scenario, normed, te, mods),
        (tr, va, te),
        truth,
        meta,
    )


@dataclass
class TrainedModel:
    cfg: FusionConfig
    store: ParamStore
    history: list[dict]
    label: str


def fit_fusion(exp: Experiment, model_cfg: FusionConfig, train_cfg: TrainConfig, label: str = "fusion") -> TrainedModel:
    """Train the fused model, honouring the ablation flags in ``train_cfg``."""
    ab = train_cfg.ablation
    train_set = exp.train
    if ab.no_temporal_correlation:
        train_set = random_pairs(exp.scenario, exp.datasets, exp.folds[0], exp.modalities, len(exp.train), train_cfg.rng_seed)
    cfg = replace(model_cfg, ablation=ab, dropout=train_cfg.dropout)
    store, history = train(train_set, exp.val, cfg, train_cfg)
    return TrainedModel(cfg, store, history, label)


def fit_baseline(exp: Experiment, m: ModalityId, model_cfg: FusionConfig, train_cfg: TrainConfig) -> TrainedModel:
    """Single-modal model trained on modality ``m`` events of the training folds."""
    tr, va, _ = exp.folds
    cfg = replace(train_cfg, degrade_prob=0.0, ablation=Ablation())
    mcfg = replace(model_cfg, ablation=Ablation(), dropout=cfg.dropout)
    store, history = train(exp.events(m, tr), exp.events(m, va), mcfg, cfg)
    return TrainedModel(mcfg, store, history, f"{m.value.lower()}-only")


def only(samples: SampleSet, m: ModalityId) -> SampleSet:
    keep = np.zeros_like(samples.mask)
    keep[:, list(samples.modalities).index(m)] = True
    return samples.with_mask(keep)


def evaluate(model: TrainedModel, samples: SampleSet, policy: str = "NONE", seed: int = 0, **kw) -> EvalReport:
    return evaluate_model(model.cfg, model.store, samples, policy, seed, **kw)


def evaluate_baseline(model: TrainedModel, samples: SampleSet, m: ModalityId, **kw) -> EvalReport:
    view = only(samples, m)
    pred = predict(model.cfg, model.store, view)
    return build_report(pred.scores, view, pred.alpha, **kw)


# ---------------------------------------------------------------------------
# config-driven runs


def model_config(section, dims: Mapping[ModalityId, int]) -> FusionConfig:
    encs = tuple(
        EncoderConfig(m, dims[m], embed_dim=section.embed_dim, hidden_dim=section.hidden_dim, kernel_width=section.kernel_width)
        for m in sorted(dims, key=lambda m: m.value)
    )
    return FusionConfig(
        encs,
        controller_hidden=section.controller_hidden,
        head_hidden=section.head_hidden,
        cross_layers=section.cross_layers,
        init_scale=section.init_scale,
    )


def experiment_for(cfg, seed: int, streams: Mapping[ModalityId, StreamDataset] | None = None) -> Experiment:
    """Generate (or take) the streams, correlate them and split into samples."""
    truth = None
    if streams is None:
        streams, truth = generate(replace(cfg.synth, rng_seed=seed))
    mods = list(cfg.synth.modalities)
    if len(mods) != 2:
        raise ValueError("experiments pair exactly two modalities")
    a, b = sorted(mods, key=lambda m: m.value)
    if a not in streams or b not in streams:
        raise ValueError(f"streams for {a.value} and {b.value} are required")
    scenario = correlate(streams[a], streams[b], replace(cfg.correlation, rng_seed=seed))
    return build_experiment(streams, scenario, cfg.preprocess, truth)


@dataclass
class SeedResult:
    seed: int
    experiment: Experiment
    models: dict[str, TrainedModel]
    reports: dict[str, EvalReport]
    gain: dict | None = None


def fusion_gain(exp: Experiment, full: TrainedModel, reports: Mapping[str, EvalReport]) -> dict:
    """False-positive rate of the fused model at the best baseline's detection rate.

    The best baseline is the single-modal model with the highest test
    accuracy; its operating point is its default threshold.
    """
    from .evaluation import fpr_at_tpr, fpr_reduction

    names = [f"{m.value.lower()}-only" for m in exp.modalities]
    best = max(names, key=lambda k: reports[k].accuracy)
    base = reports[best]
    scores = predict(full.cfg, full.store, exp.test).scores
    fused = fpr_at_tpr(scores, exp.test.y, base.recall)
    return {
        "baseline": best,
        "baseline_fpr": base.fpr,
        "baseline_recall": base.recall,
        "fused_fpr": fused,
        "fpr_reduction": fpr_reduction(base.fpr, fused) if base.fpr > 0 else 0.0,
    }


def evaluate_seed(cfg, seed: int, ablations: Sequence[str] = (), baselines: bool = True) -> SeedResult:
    """Train the full model (plus baselines and ablations) for one seed and evaluate."""
    exp = experiment_for(cfg, seed)
    mcfg = model_config(cfg.model, exp.dims)
    tcfg = replace(cfg.training, rng_seed=seed, ablation=Ablation())
    full = fit_fusion(exp, mcfg, tcfg)
    models = {"fusion": full}
    reports = {"fusion": evaluate(full, exp.test), "fusion/deploy": evaluate(full, exp.deploy)}
    gain = None
    if baselines:
        for m in exp.modalities:
            base = fit_baseline(exp, m, mcfg, tcfg)
            models[base.label] = base
            reports[base.label] = evaluate_baseline(base, exp.test, m)
            drop = "DROP_NETWORK" if m is ModalityId.EMAIL else "DROP_TEXT"
            reports[f"fusion/{drop}"] = evaluate(full, exp.test, drop, seed)
        gain = fusion_gain(exp, full, reports)
    for flag in ablations:
        model = fit_fusion(exp, mcfg, replace(tcfg, ablation=Ablation.single(flag)), flag)
        models[flag] = model
        reports[flag] = evaluate(model, exp.deploy)
    return SeedResult(seed, exp, models, reports, gain)


@dataclass
class GridResult:
    """Per-seed deployment accuracy of the full model and each single-flag ablation."""

    seeds: list[int]
    reports: dict[str, list[EvalReport]]
    gains: list[dict] = field(default_factory=list)
    drills: dict[str, list[EvalReport]] = field(default_factory=dict)

    def summary(self) -> dict[str, dict]:
        from .evaluation import aggregate

        return {name: aggregate(reps) for name, reps in self.reports.items()}

    def mean_accuracy(self, name: str) -> float:
        return float(np.mean([r.accuracy for r in self.reports[name]]))

    def significance(self) -> dict[str, float | None]:
        """Wilcoxon p-value of per-seed accuracy differences, full vs each ablation."""
        from .evaluation import wilcoxon_signed_rank

        out = {}
        full = np.array([r.accuracy for r in self.reports["full"]])
        for name, reps in self.reports.items():
            if name == "full":
                continue
            deltas = full - np.array([r.accuracy for r in reps])
            try:
                out[name] = wilcoxon_signed_rank(deltas)
            except ValueError:
                out[name] = None
        return out

    def table(self) -> str:
        from .evaluation import format_table

        text = format_table(self.summary())
        sig = self.significance()
        lines = [text, "", "Wilcoxon signed-rank p (full vs row, accuracy):"]
        lines += [f"  {k:<32}{'n/a' if p is None else f'{p:.4f}'}" for k, p in sig.items()]
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "seeds": self.seeds,
            "summary": self.summary(),
            "per_seed": {k: [r.to_json() for r in v] for k, v in self.reports.items()},
            "significance": self.significance(),
            "fusion_gain": self.gains,
            "drills": {k: [r.to_json() for r in v] for k, v in self.drills.items()},
        }


def ablation_grid(cfg, seeds: Sequence[int], flags: Sequence[str] = Ablation.FLAGS, progress=None) -> GridResult:
    reports: dict[str, list[EvalReport]] = {"full": []}
    reports.update({f: [] for f in flags})
    gains = []
    drills: dict[str, list[EvalReport]] = {}
    for seed in seeds:
        res = evaluate_seed(cfg, seed, flags, baselines=True)
        reports["full"].append(res.reports["fusion/deploy"])
        for f in flags:
            reports[f].append(res.reports[f])
        # test-set reports of the fused model, its drills and the baselines
        for k, r in res.reports.items():
            if k not in flags and k != "fusion/deploy":
                drills.setdefault(k, []).append(r)
        gains.append(res.gain)
        if progress:
            progress(seed, res)
    return GridResult(list(seeds), reports, gains, drills)
