"""Command-line front end: synth | correlate | train | eval | ablate.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .correlation import CorrelationConfigError, bucket_histogram, correlate
from .events import ModalityId, StreamError, load_stream
from .numerics import NumericError, ParamStore

log = logging.getLogger("threatfuse")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"
MANIFEST_VERSION = 1


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def write_manifest(out: Path, command: str, cfg: RunConfig, seed, inputs: Sequence[Path], outputs: Sequence[Path], extra=None) -> Path:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": cfg.to_json(),
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in sorted(set(inputs))},
        "outputs": {p.name: sha256_file(p) for p in sorted(outputs)},
        "tool_version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        doc.update(extra)
    return write_json(out / MANIFEST, doc)


def read_config(path: str | None) -> RunConfig:
    """Load a run config; a manifest is accepted and its config snapshot reused."""
    if path is not None:
        p = Path(path)
        if p.is_file():
            try:
                doc = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: invalid JSON ({exc})") from None
            if isinstance(doc, dict) and "manifest_version" in doc:
                return RunConfig.from_json(doc["config"])
    return load_config(path)


def out_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc}", EXIT_IO) from None
    return p


def stream_paths(streams: Path, cfg: RunConfig) -> dict[ModalityId, Path]:
    return {m: streams / f"{m.value.lower()}.jsonl" for m in cfg.synth.modalities}


def load_streams(streams: Path, cfg: RunConfig) -> dict:
    out = {}
    for m, p in stream_paths(streams, cfg).items():
        if not p.is_file():
            raise CliError(f"missing stream file {p}", EXIT_IO)
        out[m] = load_stream(p, m)
    return out


def resolve_seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.synth.rng_seed


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synth import generate, write_outputs

    cfg = read_config(args.config)
    seed = resolve_seed(args, cfg)
    cfg = cfg.with_seed(seed)
    out = out_dir(args.out)
    datasets, truth = generate(cfg.synth)
    paths = write_outputs(datasets, truth, out)
    inputs = [Path(args.config)] if args.config else []
    write_manifest(out, "synth", cfg, seed, inputs, paths)
    for m, ds in datasets.items():
        print(f"{m.value:<8} {len(ds):>6} events")
    print(f"ground truth: {len(truth)} cross-modal pairs")
    return EXIT_OK


def cmd_correlate(args) -> int:
    cfg = read_config(args.config)
    seed = resolve_seed(args, cfg)
    cfg = cfg.with_seed(seed)
    streams = Path(args.streams)
    datasets = load_streams(streams, cfg)
    a, b = sorted(datasets, key=lambda m: m.value)
    scenario = correlate(datasets[a], datasets[b], cfg.correlation)
    out = out_dir(args.out)
    path = out / "scenario.json"
    write_json(path, scenario.to_json())
    inputs = list(stream_paths(streams, cfg).values()) + ([Path(args.config)] if args.config else [])
    write_manifest(out, "correlate", cfg, seed, inputs, [path])
    print(f"{'fold':>4} {'start':>12} {'end':>12} {'correlated':>11} {'negatives':>10}")
    for i, f in enumerate(scenario.folds):
        print(f"{i:>4} {f.start:>12.1f} {f.end:>12.1f} {len(f.correlated):>11} {len(f.negatives):>10}")
    hist = bucket_histogram(scenario)
    print("buckets: " + "  ".join(f"{k}={v}" for k, v in hist.items()))
    return EXIT_OK


def _experiment(cfg: RunConfig, seed: int, streams: str | None):
    from .pipeline import experiment_for

    data = load_streams(Path(streams), cfg) if streams else None
    return experiment_for(cfg, seed, data)


def cmd_train(args) -> int:
    from dataclasses import replace

    from .evaluation import evaluate_model
    from .pipeline import fit_fusion, model_config
    from .training import TrainingDiverged

    cfg = read_config(args.config)
    seed = resolve_seed(args, cfg)
    cfg = cfg.with_seed(seed)
    out = out_dir(args.out)
    exp = _experiment(cfg, seed, args.streams)
    mcfg = model_config(cfg.model, exp.dims)
    log_path = out / "train_log.jsonl"
    try:
        model = fit_fusion(exp, mcfg, replace(cfg.training, rng_seed=seed))
    except TrainingDiverged as exc:
        write_json(out / "divergence.json", {"message": str(exc), "epoch": exc.epoch, "batch": exc.batch_index})
        raise CliError(f"training diverged: {exc} (see {out / 'divergence.json'})", EXIT_NUMERIC) from None
    with log_path.open("w") as fh:
        for entry in model.history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    ckpt = out / "checkpoint.json"
    model.store.save(ckpt)
    model_path = write_json(out / "model.json", model.cfg.to_json())
    prep = write_json(out / "preprocessing.json", exp.meta)
    val = evaluate_model(model.cfg, model.store, exp.val)
    metrics = write_json(out / "metrics.json", {"split": "val", "report": val.to_json()})
    inputs = [Path(args.config)] if args.config else []
    if args.streams:
        inputs += list(stream_paths(Path(args.streams), cfg).values())
    write_manifest(
        out, "train", cfg, seed, inputs, [log_path, ckpt, model_path, prep, metrics], {"streams": args.streams}
    )
    best = model.history[0]["best_epoch"] if model.history else 0
    print(f"trained {len(model.history)} epochs (best {best}); validation accuracy {val.accuracy:.4f}, fpr {val.fpr:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model, write_roc_csv
    from .fusion import FusionConfig

    model_dir = Path(args.model)
    manifest_path = model_dir / MANIFEST
    ckpt = model_dir / "checkpoint.json"
    if not manifest_path.is_file() or not ckpt.is_file() or not (model_dir / "model.json").is_file():
        raise CliError(f"no trained model (checkpoint + manifest) in {model_dir}", EXIT_CONFIG)
    manifest = json.loads(manifest_path.read_text())
    cfg = RunConfig.from_json(manifest["config"])
    seed = manifest["seed"]
    exp = _experiment(cfg, seed, manifest.get("streams"))
    mcfg = FusionConfig.from_json(json.loads((model_dir / "model.json").read_text()))
    store = ParamStore.load(ckpt)
    samples = {"val": exp.val, "test": exp.test, "deploy": exp.deploy}[args.split]
    report = evaluate_model(mcfg, store, samples, args.policy, seed, benign_daily=cfg.eval.benign_daily, threshold=cfg.eval.threshold)
    out = out_dir(args.out)
    rpath = write_json(out / "report.json", {"split": args.split, "report": report.to_json()})
    from .evaluation import format_table, summarize

    table = format_table({f"fusion [{args.policy}, {args.split}]": {k: summarize([getattr(report, k)]) for k in ("accuracy", "precision", "recall", "fpr")}})
    tpath = out / "report.txt"
    tpath.write_text(table + "\n")
    outputs = [rpath, tpath]
    if 0 < samples.y.sum() < len(samples):
        from .evaluation import predict

        roc = out / "roc.csv"
        write_roc_csv(predict(mcfg, store, samples).scores, samples.y, roc)
        outputs.append(roc)
    write_manifest(out, "eval", cfg, seed, [ckpt, model_dir / "model.json"], outputs, {"policy": args.policy, "split": args.split})
    print(table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import ablation_grid

    cfg = read_config(args.config)
    base_seed = resolve_seed(args, cfg)
    n = args.seeds if args.seeds is not None else cfg.eval.seeds
    if n < 1:
        raise ConfigError("--seeds must be >= 1")
    seeds = [base_seed + i for i in range(n)]
    cfg = cfg.with_seed(base_seed)
    out = out_dir(args.out)

    def progress(seed, res):
        print(f"seed {seed}: full {res.reports['fusion/deploy'].accuracy:.4f}", flush=True)

    grid = ablation_grid(cfg, seeds, progress=progress)
    jpath = write_json(out / "ablation.json", grid.to_json())
    tpath = out / "ablation.txt"
    text = grid.table()
    tpath.write_text(text + "\n")
    inputs = [Path(args.config)] if args.config else []
    write_manifest(out, "ablate", cfg, base_seed, inputs, [jpath, tpath], {"seeds": seeds})
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="threatfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"threatfuse {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=False):
        p.add_argument("--config", help="run config (JSON) or a manifest to re-run")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="run seed (default: the config's synth seed)")
        if seeds:
            p.add_argument("--seeds", type=int, help="number of consecutive seeds to sweep")

    p = sub.add_parser("synth", help="generate synthetic streams with planted attack chains")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("correlate", help="mint confidence-weighted cross-modal pairs")
    common(p)
    p.add_argument("--streams", required=True, help="directory holding <modality>.jsonl streams")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("train", help="train the fusion model")
    common(p)
    p.add_argument("--streams", help="stream directory (default: synthesize from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--model", required=True, help="output directory of a train run")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--policy", default="NONE", choices=["NONE", "DROP_NETWORK", "DROP_TEXT", "RANDOM_50"])
    p.add_argument("--split", default="test", choices=["val", "test", "deploy"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full model vs each single-flag ablation across seeds")
    common(p, seeds=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CorrelationConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StreamError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
