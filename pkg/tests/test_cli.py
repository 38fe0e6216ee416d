import json

import pytest

from threatfuse.cli import main
from threatfuse.config import RunConfig
from threatfuse.correlation import TrainingScenario
from threatfuse.events import load_stream

from conftest import MAIL, NET, brute_force_pairs, correlated_set

SMALL = {
    "synth": {"n_benign": 80, "n_chains": 60, "time_span": 6000.0},
    "model": {"embed_dim": 4, "hidden_dim": 4, "controller_hidden": 4, "head_hidden": 4},
    "training": {"epochs": 3, "batch_size": 32},
}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def outputs(d):
    return json.loads((d / "manifest.json").read_text())["outputs"]


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    return write(tmp_path_factory.mktemp("cfg") / "small.json", SMALL)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_cfg):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", small_cfg, "--out", str(out), "--seed", "2"]) == 0
    return out


@pytest.mark.parametrize("cmd", ["synth", "correlate", "train", "eval", "ablate"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    assert "--out" in capsys.readouterr().out


def test_missing_config_exits_2(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_unknown_key_exits_2(tmp_path):
    cfg = write(tmp_path / "c.json", {"training": {"epoch": 1}})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_bad_threshold_exits_2(tmp_path):
    cfg = write(tmp_path / "c.json", {"correlation": {"theta_min": 1.0}})
    assert main(["correlate", "--config", cfg, "--streams", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_missing_streams_exits_3(tmp_path):
    assert main(["correlate", "--streams", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3


def test_malformed_stream_exits_3(tmp_path):
    (tmp_path / "network.jsonl").write_text("{broken\n")
    (tmp_path / "email.jsonl").write_text("")
    assert main(["correlate", "--streams", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_empty_streams_correlate(tmp_path, capsys):
    (tmp_path / "network.jsonl").write_text("")
    (tmp_path / "email.jsonl").write_text("")
    assert main(["correlate", "--streams", str(tmp_path), "--out", str(tmp_path / "o")]) == 0
    sc = TrainingScenario.load(tmp_path / "o" / "scenario.json")
    assert sc.all_pairs() == []


def test_synth_then_correlate_matches_brute_force(tmp_path, small_cfg, capsys):
    s, c = tmp_path / "s", tmp_path / "c"
    assert main(["synth", "--config", small_cfg, "--out", str(s), "--seed", "1"]) == 0
    assert main(["correlate", "--config", small_cfg, "--streams", str(s), "--out", str(c), "--seed", "1"]) == 0
    assert "buckets:" in capsys.readouterr().out
    sc = TrainingScenario.load(c / "scenario.json")
    dA, dB = load_stream(s / "email.jsonl", MAIL), load_stream(s / "network.jsonl", NET)
    cfg = RunConfig.from_json(json.loads(open(small_cfg).read())).with_seed(1).correlation
    assert correlated_set(sc) == brute_force_pairs(dA, dB, cfg)


def test_synth_deterministic(tmp_path, small_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--config", small_cfg, "--out", str(a), "--seed", "5"]) == 0
    assert main(["synth", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert outputs(a) == outputs(b)
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 5
    assert set(manifest) >= {"config", "inputs", "outputs", "tool_version", "created"}


def test_train_outputs(trained):
    names = set(outputs(trained))
    assert names == {"train_log.jsonl", "checkpoint.json", "model.json", "preprocessing.json", "metrics.json"}
    lines = (trained / "train_log.jsonl").read_text().splitlines()
    assert 1 <= len(lines) <= 3


def test_eval_val_reproduces_train_metrics(trained, tmp_path):
    assert main(["eval", "--model", str(trained), "--out", str(tmp_path), "--split", "val", "--policy", "NONE"]) == 0
    got = json.loads((tmp_path / "report.json").read_text())
    want = json.loads((trained / "metrics.json").read_text())
    assert got == want


def test_eval_drop_policy(trained, tmp_path):
    assert main(["eval", "--model", str(trained), "--out", str(tmp_path), "--policy", "DROP_NETWORK"]) == 0
    assert (tmp_path / "report.txt").read_text().count("DROP_NETWORK") == 1
    assert (tmp_path / "roc.csv").is_file()


def test_eval_without_model_exits_2(tmp_path):
    assert main(["eval", "--model", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_divergence_exits_4(tmp_path):
    cfg = write(tmp_path / "c.json", {**SMALL, "training": {"epochs": 2, "learning_rate": 1e300}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "divergence.json").is_file()


def test_ablate_rejects_zero_seeds(tmp_path, small_cfg):
    assert main(["ablate", "--config", small_cfg, "--out", str(tmp_path), "--seeds", "0"]) == 2
