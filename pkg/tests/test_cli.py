import json

import numpy as np
import pytest

from ddgcn.cli import main
from ddgcn.data import parse_skel, read_errors, synthesize_dataset, write_skel
from ddgcn.graph import chain_topology

SMALL = {
    "t_history": 2, "t_future": 2, "n_joints": 4, "level_joint_counts": [4, 2],
    "n_levels_extra": 1, "d_hidden": 4, "epochs": 2, "checkpoint_every": 1,
    "n_sequences": 6, "sequence_frames": 8, "stride": 2, "test_fraction": 0.34,
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def trained(tmp_path, small_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(small_config), "--out", str(out), "--seed", "2"]) == 0
    return out


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_selftest_subset_passes(capsys):
    assert main(["selftest", "--only", "aggregation_oracle", "phi_properties"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and all(l.startswith("PASS") for l in lines)


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_train_outputs(trained, capsys):
    names = {p.name for p in trained.iterdir()}
    assert {"config.json", "summary.json", "loss_history.csv", "last.ckpt", "epoch001.ckpt"} <= names
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["epochs"] == 2
    assert summary["test_future_mpjpe"] > 0 and summary["test_zero_velocity_mpjpe"] > 0
    assert json.loads((trained / "config.json").read_text())["seed"] == 2


def test_predict_writes_forecast(tmp_path, trained):
    seq = synthesize_dataset(chain_topology(4), 1, 5, seed=9)[0]
    src = tmp_path / "walk.skel"
    src.write_bytes(write_skel(seq))
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(trained / "last.ckpt"), "--data", str(src),
                 "--out", str(out)]) == 0
    pred = parse_skel((out / "walk.pred.skel").read_bytes())
    assert pred.frames.shape == (4, 4, 3)
    assert json.loads((out / "walk.pred.json").read_text())["t_history"] == 2


def test_predict_joint_mismatch_names_m(tmp_path, trained, capsys):
    seq = synthesize_dataset(chain_topology(5), 1, 5, seed=9)[0]
    src = tmp_path / "five.skel"
    src.write_bytes(write_skel(seq))
    code = main(["predict", "--checkpoint", str(trained / "last.ckpt"), "--data", str(src),
                 "--out", str(tmp_path / "p")])
    assert code == 1
    err = _error(capsys)
    assert err["error"] == "DimensionError" and "M" in err["message"]


def test_eval_tables(tmp_path, trained, small_config):
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(trained / "last.ckpt"), "--config", str(small_config),
                 "--seed", "2", "--horizons", "40,80", "--out", str(out)]) == 0
    rows = read_errors((out / "horizons.csv").read_bytes())
    assert [h for h, _ in rows] == [40, 80]
    detail = (out / "horizons_detail.csv").read_text().splitlines()
    assert detail[0].endswith("zero_velocity_mpjpe") and len(detail) == 3


def test_eval_on_files_and_horizon_out_of_range(tmp_path, trained, capsys):
    seq = synthesize_dataset(chain_topology(4), 1, 8, seed=1)[0]
    src = tmp_path / "a.skel"
    src.write_bytes(write_skel(seq))
    args = ["eval", "--checkpoint", str(trained / "last.ckpt"), "--data", str(src),
            "--out", str(tmp_path / "e")]
    assert main(args) == 0
    assert main(args + ["--horizons", "1000"]) == 1
    assert _error(capsys)["error"] == "HorizonError"


def test_export_adjacency(tmp_path, trained):
    out = tmp_path / "adj"
    assert main(["export-adjacency", "--checkpoint", str(trained / "last.ckpt"), "--frames", "0:2",
                 "--joints", "0:4", "--col-frames", "0:4", "--out", str(out)]) == 0
    grid = np.loadtxt(out / "adjacency.csv", delimiter=",", ndmin=2)
    assert grid.shape == (8, 16)


def test_export_adjacency_unknown_layer(tmp_path, trained, capsys):
    assert main(["export-adjacency", "--checkpoint", str(trained / "last.ckpt"),
                 "--layer", "nope", "--out", str(tmp_path / "x")]) == 1
    assert "nope" in _error(capsys)["message"]


def test_synth_writes_parseable_files(tmp_path, small_config):
    out = tmp_path / "synth"
    assert main(["synth", "--config", str(small_config), "--out", str(out)]) == 0
    files = sorted(out.glob("seq_*.skel"))
    assert len(files) == 6
    assert parse_skel(files[0].read_bytes()).frames.shape == (8, 4, 3)


def test_gradcheck_subset(tmp_path):
    out = tmp_path / "g"
    assert main(["gradcheck", "--max-per-leaf", "2", "--out", str(out)]) == 0
    doc = json.loads((out / "gradcheck.json").read_text())
    assert doc["passed"] and doc["max_rel_error"] < 1e-4


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"d_hiden": 3}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "d_hiden" in _error(capsys)["message"]
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    assert _error(capsys)["error"] == "ConfigError"


def test_thread_override_validated(monkeypatch, capsys):
    monkeypatch.setenv("DDGCN_THREADS", "many")
    assert main(["selftest", "--only", "hyperparameters"]) == 1
    assert "DDGCN_THREADS" in _error(capsys)["message"]
