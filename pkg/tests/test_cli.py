import csv
import json

import pytest
from hypothesis import given, settings, strategies as st

from stprobe.cli import main
from stprobe.config import SCHEMA, ConfigError, ExperimentConfig, describe_keys

TINY = ["--task.T", "12", "--task.train_size", "60", "--task.test_size", "30",
        "--train.hidden", "8", "--train.batch_size", "20"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.setenv("STPROBE_DATA", str(tmp_path / "data"))
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*args):
    return main([*args])


def only_dir(root, prefix):
    dirs = sorted(p for p in (root / "runs").iterdir() if p.name.startswith(prefix))
    assert len(dirs) == 1
    return dirs[0]


def test_config_roundtrip_defaults():
    cfg = ExperimentConfig()
    assert ExperimentConfig.parse(cfg.serialize()) == cfg


@given(st.integers(1, 500), st.floats(1e-6, 1.0), st.sampled_from(["stbp", "sdbp", "notd"]),
       st.lists(st.integers(1, 64), min_size=1, max_size=3), st.booleans())
@settings(max_examples=40)
def test_config_roundtrip(epochs, lr, algorithm, hidden, recurrent):
    cfg = ExperimentConfig({"train": {"epochs": epochs, "lr": lr, "algorithm": algorithm,
                                      "hidden": tuple(hidden), "recurrent": recurrent}})
    text = cfg.serialize()
    again = ExperimentConfig.parse(text)
    assert again == cfg
    assert again.serialize() == text


def test_config_parsing_rules():
    cfg = ExperimentConfig.parse("# comment\n[train]\nlr = 0.01  # inline\nhidden = 4, 5\n")
    assert cfg["train"]["lr"] == 0.01 and cfg["train"]["hidden"] == (4, 5)
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.parse("[train]\nepochs = many\n")


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for section, keys in SCHEMA.items():
        for key in keys:
            assert f"{section}.{key} =" in out
    assert describe_keys() in out


def test_unknown_key_is_config_error(workdir):
    assert run("train", "--train.learning_rate", "1") == 2
    assert run("train", "--epochs", "-1") == 2
    (workdir / "bad.ini").write_text("[train]\nspeed = 3\n")
    assert run("train", "-c", "bad.ini") == 2
    assert run("train", "-c", "missing.ini") == 2


def test_gen_data_rejects_short_sequences(workdir):
    assert run("gen-data", "--task.T", "5") == 2


def test_train_without_data_is_data_error(workdir):
    assert run("train", *TINY) == 3


def test_overrides_win_and_are_echoed(workdir, capsys):
    (workdir / "c.ini").write_text("[train]\nepochs = 7\nlr = 0.5\n")
    assert run("train", "-c", "c.ini", "--train.lr", "0.25", "--epochs", "3",
               "--print-config") == 0
    cfg = ExperimentConfig.parse(capsys.readouterr().out)
    assert cfg["train"]["lr"] == 0.25 and cfg["train"]["epochs"] == 3


def test_gen_data_is_byte_identical(workdir):
    assert run("gen-data", *TINY) == 0
    files = sorted((workdir / "data").iterdir())
    first = [p.read_bytes() for p in files]
    assert run("gen-data", *TINY) == 0
    assert [p.read_bytes() for p in files] == first
    assert len(files) == 2


def test_train_outputs_and_determinism(workdir):
    assert run("gen-data", *TINY) == 0
    assert run("train", *TINY, "--epochs", "1") == 0
    out = only_dir(workdir, "train-")
    names = {p.name for p in out.iterdir()}
    assert names == {"config.ini", "metrics.csv", "report.json", "checkpoint.stpb", "run.log"}
    snapshot = {n: (out / n).read_bytes() for n in names - {"run.log"}}
    assert run("train", *TINY, "--epochs", "1") == 0
    assert {n: (out / n).read_bytes() for n in snapshot} == snapshot
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert {r["epoch"] for r in rows} == {"-1", "0"}
    assert ExperimentConfig.load(out / "config.ini")["train"]["epochs"] == 1


def test_train_zero_epochs(workdir):
    assert run("gen-data", *TINY) == 0
    assert run("train", *TINY, "--epochs", "0") == 0
    rep = json.loads((only_dir(workdir, "train-") / "report.json").read_text())
    assert rep["final_epoch"] == -1 and rep["best_epoch"] == -1


def test_stp_report_and_summary(workdir):
    assert run("gen-data", *TINY) == 0
    assert run("stp", *TINY, "--epochs", "1", "--thresholds", "4", "2") == 0
    out = only_dir(workdir, "stp-")
    rep = json.loads((out / "report.json").read_text())
    assert rep["thresholds"] == {"credit": 4.0, "temporal": 2.0}
    assert [a["algorithm"] for a in rep["arms"]] == ["stbp", "sdbp", "notd"]
    for alg in ("stbp", "sdbp", "notd"):
        assert (out / f"checkpoint-{alg}.stpb").exists()
    assert run("report", str(out), "-o", "summary.csv") == 0
    rows = list(csv.DictReader((workdir / "summary.csv").open()))
    assert rows[0]["task"] == "binary_adding" and rows[0]["verdict"] == rep["verdict"]


def test_report_rejects_non_reports(workdir):
    (workdir / "x.json").write_text("{}")
    assert run("report", "x.json") == 3
    assert run("report", "nowhere") == 3


def test_energy_analytic(workdir):
    freqs = [arg for name in ("f_in", "f_out", "f_Q", "f_K", "f_V", "f_attn", "f_fc1", "f_fc2")
             for arg in (f"--energy.{name}", "0.1")]
    assert run("energy", "--energy.archs", "SDT4,SDT1", "--energy.n", "512", "--energy.h",
               "2048", *freqs, "--output.dir", "runs") == 0
    rows = list(csv.DictReader((only_dir(workdir, "energy-") / "energy.csv").open()))
    ratio = [r for r in rows if r["architecture"] == "SDT4/SDT1"][0]
    assert 3.5 <= float(ratio["ratio"]) <= 4.5


def test_energy_lstm_row(workdir):
    assert run("energy", "--energy.archs", "LSTM", "--energy.m", "1", "--energy.n", "1",
               "--output.dir", "runs") == 0
    rows = list(csv.DictReader((only_dir(workdir, "energy-") / "energy.csv").open()))
    assert float(rows[0]["energy_nJ"]) * 1000 == pytest.approx(124.2)


def test_energy_missing_frequency(workdir):
    assert run("energy", "--energy.archs", "GSU") == 2


def test_energy_measured(workdir):
    assert run("gen-data", *TINY) == 0
    assert run("train", *TINY, "--epochs", "1") == 0
    ckpt = only_dir(workdir, "train-") / "checkpoint.stpb"
    assert run("energy", *TINY, "--epochs", "1", "--energy.mode", "measured",
               "--energy.checkpoint", str(ckpt)) == 0
    rows = list(csv.DictReader((only_dir(workdir, "energy-") / "energy.csv").open()))
    assert rows[-1]["layer"] == "total"
    # a checkpoint from another configuration is refused
    assert run("energy", *TINY, "--epochs", "2", "--energy.mode", "measured",
               "--energy.checkpoint", str(ckpt)) == 2
