import math

import numpy as np
import pytest

from threatfuse.correlation import CorrelationConfig, PairKind, fold_index
from threatfuse.encoders import EncoderConfig
from threatfuse.events import Event, ModalityId, make_dataset
from threatfuse.fusion import FusionConfig, init_params

NET, MAIL, LOG = ModalityId.NETWORK, ModalityId.EMAIL, ModalityId.LOG


def make_events(modality, times, tags=None, dim=2, labels=None, rng=None, prefix=None):
    rng = rng or np.random.default_rng(0)
    prefix = prefix or modality.value.lower()
    out = []
    for i, t in enumerate(times):
        tag = tags[i] if tags else "a"
        y = labels[i] if labels else 0
        out.append(Event(f"{prefix}{i:04d}", modality, float(t), tag, tuple(rng.normal(size=dim)), y))
    return out


def dataset(modality, times, tags=None, dim=2, labels=None, rng=None, taxonomy=None):
    evs = make_events(modality, times, tags, dim, labels, rng)
    return make_dataset(modality, evs, dim, taxonomy)


def brute_force_pairs(dA, dB, cfg: CorrelationConfig):
    """Full double loop over all cross pairs, fold by fold."""
    times = [e.t for e in dA.events] + [e.t for e in dB.events]
    if not times:
        return set()
    lo, hi = min(times), max(times)
    k = cfg.folds
    out = set()
    for ea in dA.events:
        for eb in dB.events:
            if fold_index(ea.t, lo, hi, k) != fold_index(eb.t, lo, hi, k):
                continue
            dt = ea.t - eb.t
            if abs(dt) >= cfg.tau:
                continue
            w = math.exp(-cfg.lambda_decay * abs(dt)) * cfg.type_similarity(ea.type_tag, eb.type_tag)
            if w > cfg.theta_min:
                out.add((ea.id, eb.id, w))
    return out


def correlated_set(scenario):
    return {(p.left, p.right, p.w) for p in scenario.all_pairs() if p.kind is PairKind.CORRELATED}


def tiny_config(dims=None, embed_dim=4, hidden=4, init_scale=0.1, **kw):
    dims = dims or {NET: 5, MAIL: 4}
    encs = tuple(EncoderConfig(m, d, embed_dim=embed_dim, hidden_dim=hidden) for m, d in dims.items())
    return FusionConfig(encs, controller_hidden=hidden, head_hidden=hidden, init_scale=init_scale, **kw)


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, init_params(cfg, 0)


def sample_set(cfg, xs, y, w, mask=None, ym=None):
    """SampleSet from per-modality feature blocks (ordered as cfg.modalities)."""
    from threatfuse.training import SampleSet

    mods = cfg.modalities
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    mask = np.ones((n, len(mods)), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    ym = np.repeat(y[:, None], len(mods), axis=1) if ym is None else np.asarray(ym, dtype=np.int64)
    x = {m: np.asarray(b, dtype=np.float64) for m, b in zip(mods, xs)}
    ids = [tuple(f"{m.value[0]}{i}" for m in mods) for i in range(n)]
    return SampleSet(mods, x, mask, np.asarray(w, dtype=np.float64), y, ym, ["PAIR"] * n, ["t"] * n, ids)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
