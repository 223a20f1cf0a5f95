import json
import re

import pytest
import tomli_w

from dsiforge.cli import main
from dsiforge.config import ConfigError, ExperimentConfig, from_dict, load_config

TINY = {
    "bench": {"n_docs": 60, "n_topics": 3, "vocab_size": 300, "sizes": [40, 10, 10], "seed": 1},
    "model": {"d": 12, "h": 16},
    "initial": {"steps": 20, "warmup": 2, "eval_interval": 10, "lr": 0.01},
    "continual": {"steps": 10, "warmup": 1, "eval_interval": 5, "lr": 0.01},
    "generator": {"steps": 10},
    "eval": {"beam_width": 4},
    "run": {"methods": ["cl_union", "from_scratch"], "seeds": [0]},
}


def write_cfg(tmp_path, data, name="c.toml"):
    p = tmp_path / name
    p.write_text(tomli_w.dumps(data))
    return p


def test_defaults_validate_and_round_trip(tmp_path):
    cfg = ExperimentConfig().validate()
    cfg.save(tmp_path / "d.toml")
    assert load_config(tmp_path / "d.toml") == cfg


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"model": {"bogus": 1}})
    with pytest.raises(ConfigError, match="extra"):
        from_dict({"extra": {}})


@pytest.mark.parametrize("bad", [
    {"run": {"methods": []}},
    {"run": {"methods": ["cl_union", "cl_union"]}},
    {"run": {"methods": ["cl_union_genmem"]}},
    {"run": {"seeds": []}},
    {"model": {"docid": "hashed"}},
    {"initial": {"steps": 10, "eval_interval": 3}},
    {"run": {"experiment": "memorization", "optimizers": ["sgd"]}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_seed_override_from_environment(monkeypatch):
    monkeypatch.setenv("DSIFORGE_SEED", "7")
    assert ExperimentConfig().seeds() == [7]
    monkeypatch.setenv("DSIFORGE_SEED", "x")
    with pytest.raises(ConfigError):
        ExperimentConfig().seeds()


def test_bench_build_is_reproducible(tmp_path, capsys):
    args = ["bench", "build", "--synthetic", "--docs", "80", "--corpora", "50,15,15", "--seed", "4",
            "--vocab", "300", "--topics", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    hashes = re.findall(r"manifest (\w+)", capsys.readouterr().out)
    assert len(hashes) == 2 and hashes[0] == hashes[1]


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["bench", "build", "--docs", str(tmp_path / "d.jsonl")]) == 1
    assert main(["bench", "build", "--synthetic", "--corpora", "a,b"]) == 1
    assert main(["--no-such-flag"]) == 1
    assert main(["run", str(write_cfg(tmp_path, {"run": {"methods": []}}))]) == 1
    assert main(["run", str(tmp_path / "missing.toml")]) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_errors_exit_two(tmp_path):
    assert main(["report", str(tmp_path)]) == 2
    assert main(["genmem", "sample", "--generator", "x", "--splits", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 2


def test_run_and_report_are_deterministic(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY)
    assert main(["run", str(cfg), "--out", str(tmp_path / "r1")]) == 0
    assert main(["run", str(cfg), "--out", str(tmp_path / "r2")]) == 0
    out = capsys.readouterr().out
    assert re.search(r"update ratio: \d+\.\d\d incremental, \d+\.\d\d including D0", out)
    for name in ("aggregate.csv", "updates.csv", "report.txt"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    for m in ("cl_union", "from_scratch"):
        for f in ("perf.csv", "summary.csv"):
            assert (tmp_path / "r1/seed0" / m / f).read_bytes() == (tmp_path / "r2/seed0" / m / f).read_bytes()
    before = (tmp_path / "r1" / "aggregate.csv").read_bytes()
    assert main(["report", str(tmp_path / "r1")]) == 0
    assert (tmp_path / "r1" / "aggregate.csv").read_bytes() == before
    manifest = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert [c["status"] for c in manifest["cells"]] == ["ok"]


def test_memorization_experiment(tmp_path, capsys):
    data = {**TINY, "run": {"experiment": "memorization", "optimizers": ["adam", "sam"], "seeds": [0]}}
    assert main(["run", str(write_cfg(tmp_path, data)), "--out", str(tmp_path / "m")]) == 0
    out = capsys.readouterr().out
    assert "adam" in out and "sam" in out
    assert (tmp_path / "m" / "zero_events.csv").read_text().count("\n") == 3
