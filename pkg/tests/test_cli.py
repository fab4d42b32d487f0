import os

import numpy as np
import pytest
import yaml

from codesign.cli import main
from codesign.config import DEFAULTS, ConfigError, load_config
from codesign.design_space import AcceleratorConfig, Dataflow, DesignPoint, encode, format_sequence

TINY = {
    "surrogate": {"n_samples": 40, "n_train": 30, "tau_grid": [1.0, 2.0], "sigma2_grid": [1e-3, 1e-2],
                  "max_select_rows": 30},
    "controller": {"batch_size": 2},
    "run": {"iterations": 4, "top_n": 2},
}


def write_cfg(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture
def cfg(tmp_path):
    return write_cfg(tmp_path / "tiny.yaml", TINY)


def test_defaults_carry_named_constants():
    c = load_config()
    assert c["controller"]["lr"] == 0.0035
    assert c["controller"]["temperature"] == 1.1 and c["controller"]["tanh_c"] == 2.5
    assert c["controller"]["hidden"] == 120 and c["space"]["B"] == 7
    assert c["reward"]["entropy_weight"] == 1e-4
    assert (c["reward"]["t_lat"], c["reward"]["t_eer"]) == (1.2, 9.0)
    assert c["run"]["top_n"] == 10 and c["surrogate"]["n_samples"] == 3600


def test_collect_two_rows_is_deterministic(tmp_path, cfg, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["collect", "--config", cfg, "--out", str(a), "-n", "2"]) == 0
    assert main(["collect", "--config", cfg, "--out", str(b), "-n", "2"]) == 0
    text = (a / "dataset.csv").read_text()
    assert len(text.strip().split("\n")) == 3
    assert text == (b / "dataset.csv").read_text()
    assert (a / "collect.meta.json").exists() and (a / "collection_log.tsv").exists()
    assert "wrote 2 rows" in capsys.readouterr().out


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    bad = write_cfg(tmp_path / "bad.yaml", {"run": {"iterations": 3, "itterations": 4}})
    assert main(["collect", "--config", bad, "--out", str(tmp_path / "o")]) == 1
    assert "run.itterations" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        load_config(overrides={"nope": {}})
    with pytest.raises(ConfigError):
        load_config(overrides={"reward": {"preset": "fastest"}})


def test_unwritable_output_is_an_io_error(tmp_path, cfg):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["collect", "--config", cfg, "--out", str(blocker / "sub"), "-n", "2"]) == 2


def _sequence(schema_seed=0):
    from codesign.design_space import build_schema, uniform_sample

    s = build_schema()
    p = uniform_sample(s, schema_seed)
    return encode(DesignPoint(p.dnn, AcceleratorConfig((16, 32), 512, 128, Dataflow.OS)), s)


def test_eval_echoes_accelerator(capsys):
    assert main(["eval", format_sequence(_sequence())]) == 0
    out = capsys.readouterr().out
    assert "accelerator\t16*32/512Kb/128b/OS" in out
    assert "latency_ms\t" in out and "reward\t" in out
    # default networks need several ms, well above the 1.2 ms threshold
    assert "screened\tviolates thresholds" in out


def test_eval_loose_thresholds_not_screened(tmp_path, capsys):
    loose = write_cfg(tmp_path / "loose.yaml", {"reward": {"t_lat": 1000.0, "t_eer": 1000.0}})
    assert main(["eval", "--config", loose, " ".join(map(str, _sequence(1)))]) == 0
    assert "screened\tno" in capsys.readouterr().out


def test_eval_rejects_bad_lines(capsys):
    seq = _sequence()
    assert main(["eval", format_sequence(seq[:43])]) != 0
    assert "43" in capsys.readouterr().err
    bad = list(seq)
    bad[1] = bad[0]
    assert main(["eval", format_sequence(bad)]) == 1
    assert "differ" in capsys.readouterr().err


def test_eval_reads_stdin(monkeypatch, capsys):
    import io

    monkeypatch.setattr("sys.stdin", io.StringIO(format_sequence(_sequence()) + "\n"))
    assert main(["eval"]) == 0
    assert "decisions\t" in capsys.readouterr().out


def test_search_without_surrogate_names_the_fix(tmp_path, cfg, capsys):
    assert main(["search", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "collect" in err and "fit" in err


def test_full_pipeline(tmp_path, cfg, capsys):
    out = str(tmp_path / "run")
    assert main(["collect", "--config", cfg, "--out", out]) == 0
    assert main(["fit", "--config", cfg, "--out", out]) == 0
    harness = (tmp_path / "run" / "harness.tsv").read_text()
    assert harness.count("ridge") == 2
    loose = write_cfg(tmp_path / "loose.yaml", {**TINY, "reward": {"t_lat": 1000.0, "t_eer": 1000.0}})
    assert main(["search", "--config", loose, "--out", out, "--preset", "energy-tradeoff"]) == 0
    for name in ("history.jsonl", "policy.npz", "finalized.tsv", "pareto_energy.tsv", "pareto_latency.tsv",
                 "curve.tsv", "summary.tsv", "search.meta.json", "effective_config.yaml"):
        assert (tmp_path / "run" / name).exists(), name
    eff = yaml.safe_load((tmp_path / "run" / "effective_config.yaml").read_text())
    assert eff["reward"]["preset"] == "energy-tradeoff"
    assert len((tmp_path / "run" / "history.jsonl").read_text().splitlines()) == 8
    assert main(["pareto", "--out", out, "--metric", "latency"]) == 0
    assert capsys.readouterr().out.splitlines()[-1].count("\t") == 2


def test_search_is_byte_identical_and_config_rerunnable(tmp_path):
    exact = write_cfg(tmp_path / "exact.yaml", {**TINY, "run": {**TINY["run"], "use_surrogate": False,
                                                                "hard_screen": False}})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["search", "--config", exact, "--out", str(a), "--seed", "3"]) == 0
    # the echoed effective config is a complete, runnable configuration
    assert main(["search", "--config", str(a / "effective_config.yaml"), "--out", str(b)]) == 0
    for name in ("history.jsonl", "finalized.tsv", "summary.tsv", "curve.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


@pytest.mark.parametrize("mode", ["random", "two-stage"])
def test_modes(tmp_path, mode):
    data = {**TINY, "run": {**TINY["run"], "use_surrogate": False, "iterations": 122},
            "controller": {"batch_size": 5}, "reward": {"t_lat": 1000.0, "t_eer": 1000.0}}
    if mode == "random":
        data["run"]["iterations"] = 3
    c = write_cfg(tmp_path / "m.yaml", data)
    out = tmp_path / mode
    assert main(["search", "--config", c, "--out", str(out), "--mode", mode]) == 0
    summary = dict(line.split("\t", 1) for line in (out / "summary.tsv").read_text().splitlines()[1:])
    assert summary["mode"] == mode
    lines = (out / "history.jsonl").read_text().splitlines()
    if mode == "two-stage":
        # 2 stage-1 iterations of 5, then every accelerator configuration
        assert len(lines) == 10 + 600
    else:
        assert len(lines) == 15


def test_two_stage_with_no_survivor_exits_with_diagnostics(tmp_path, capsys):
    data = {**TINY, "run": {**TINY["run"], "use_surrogate": False, "iterations": 121}, "controller": {"batch_size": 5}}
    c = write_cfg(tmp_path / "m.yaml", data)
    assert main(["search", "--config", c, "--out", str(tmp_path / "o"), "--mode", "two-stage"]) == 3
    assert "thresholds" in capsys.readouterr().err


def test_defaults_are_documented_in_one_place():
    assert set(DEFAULTS) == {"space", "macro", "hardware", "surrogate", "reward", "controller", "run"}
    assert os.path.basename(__file__).startswith("test_")
    assert np.isclose(DEFAULTS["controller"]["baseline_decay"], 0.95)
