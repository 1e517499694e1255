import csv
import hashlib
import json

import numpy as np
import pytest

from sdgod_lab import cli
from sdgod_lab.data import generate_dataset
from sdgod_lab.detector import DetectorConfig
from sdgod_lab.metrics import MpcReport
from sdgod_lab.runner import (MODES, ReportRow, RunConfig, TrainingDiverged, cmd_report, config_from_ini,
                              config_to_ini, format_table, log_columns, recompute_report, stream_seed, train)
from sdgod_lab.data import load_dataset

TABLE1_BASELINE = [0.5, 1.1, 1.1, 17.2, 16.5, 18.3, 2.1, 2.2, 12.3, 29.8, 32.0, 24.1, 40.1, 18.7, 15.1]


def tiny(**kw):
    det = DetectorConfig(channels=(4, 4, 8), rpn_hidden=8, roi_hidden=16, anchor_scales=(12.0, 24.0))
    base = dict(seed=3, iterations=3, warmup=2, n_train=4, n_test=3, image_size=48, crop_size=16, embed_dim=8,
                corruptions=("gaussian_noise", "fog"), severities=(1, 5), detector=det)
    base.update(kw)
    return RunConfig(**base)


def test_config_round_trip():
    cfg = tiny(mode="crfi", alpha=0.03, tau=0.2)
    back = config_from_ini(config_to_ini(cfg))
    assert back == cfg
    assert config_from_ini(config_to_ini(cfg), seed=9).seed == 9


def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="mode"):
        RunConfig(mode="cprm")
    with pytest.raises(ValueError, match="alpha"):
        RunConfig(alpha=-0.01)
    with pytest.raises(ValueError, match="unknown key"):
        config_from_ini("[run]\nlearning_rate = 1\n")
    with pytest.raises(ValueError):
        config_from_ini("[run]\ncorruptions = rain\n")


def test_streams_are_distinct_and_stable():
    labels = ["data", "augment", "init", "sampling", "corrupt", "text"]
    seeds = [stream_seed(0, k) for k in labels]
    assert len(set(seeds)) == len(labels)
    assert stream_seed(0, "data") == stream_seed(0, "data") != stream_seed(1, "data")


def test_log_columns_per_arm():
    assert not any(c.startswith("crfi") for c in log_columns("baseline"))
    assert "crfi" in log_columns("crfi") and "rpn" in log_columns("crfi")
    assert {"rpn_ori", "rpn_aug", "cprm", "crfi"} <= set(log_columns("crfi_cprm"))


@pytest.fixture(scope="module")
def train_ds():
    cfg = tiny()
    return generate_dataset(cfg.synth(cfg.n_train))


def test_zero_alpha_leaves_detector_weights_bit_identical(train_ds):
    base, _ = train(tiny(mode="baseline"), train_ds)
    crfi, rows = train(tiny(mode="crfi", alpha=0.0), train_ds)
    # the CRFI term is present and nonzero, but contributes nothing
    assert all(r["crfi"] > 0 for r in rows)
    for k, v in base.model.state_dict().items():
        np.testing.assert_array_equal(crfi.model.params[k].data, v)
    moved, _ = train(tiny(mode="crfi", alpha=0.5), train_ds)
    assert any(not np.array_equal(moved.model.params[k].data, v) for k, v in base.model.state_dict().items())


def test_nan_loss_aborts_with_dump(tmp_path, train_ds):
    bad = [s.with_image(np.full_like(s.image, np.nan)) for s in train_ds]
    with pytest.raises(TrainingDiverged):
        train(tiny(mode="baseline"), bad, run_dir=tmp_path)
    dump = json.loads((tmp_path / "diverged.json").read_text())
    assert dump["iteration"] == 0 and len(dump["batch"]) == 2


def test_empty_training_set_raises():
    with pytest.raises(ValueError):
        train(tiny(), [])


def _row(name, mode, mpc_value):
    return ReportRow(name, mode, 50.0, mpc_value, {"fog": mpc_value})


def test_report_orders_arms_with_deltas():
    rows = [_row("c", "crfi_cprm", 30.0), _row("a", "baseline", 20.0), _row("b", "crfi", 25.5)]
    lines = format_table(rows).splitlines()
    assert [l.split("|")[2].strip() for l in lines[2:]] == list(MODES)
    assert lines[2].endswith("+0.0 |") and lines[3].endswith("+5.5 |") and lines[4].endswith("+10.0 |")
    parsed = list(csv.reader(format_table(rows, "csv").splitlines()))
    assert parsed[0][-2:] == ["mPC", "delta_mPC"] and parsed[3][-1] == "+10.0"
    single = format_table([_row("x", "crfi", 12.0)]).splitlines()
    assert len(single) == 3 and "delta_mPC" not in single[0]


def test_published_row_through_report_path(tmp_path):
    run = tmp_path / "published"
    run.mkdir()
    names = [f"c{i}" for i in range(15)]
    rep = MpcReport([[v] for v in TABLE1_BASELINE], names, ["avg"], clean_map=42.2)
    (run / "mpc.json").write_text(rep.to_json())
    rows = list(csv.reader(cmd_report([run], fmt="csv").splitlines()))
    assert rows[1][2] == "42.2" and rows[1][-1] == "15.4"


def _cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_missing_dataset_is_json_error(tmp_path, capsys):
    code, out, err = _cli(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "run")
    assert code != 0 and out == ""
    doc = json.loads(err)
    assert doc["error"] == "FileNotFoundError" and "dataset" in doc["message"]
    with pytest.raises(SystemExit):
        cli.main(["train", "--mode", "cprm", "--data", "x", "--out", "y"])


def test_cli_pipeline_is_reproducible_and_recomputable(tmp_path, capsys):
    cfg = tiny(iterations=2)
    ini = tmp_path / "desk.ini"
    ini.write_text(config_to_ini(cfg))
    data, suite = tmp_path / "data", tmp_path / "suite"
    assert _cli(capsys, "gen-data", "--config", ini, "--out", data)[0] == 0
    assert _cli(capsys, "corrupt", "--config", ini, "--data", data, "--out", suite)[0] == 0
    shas, runs = [], []
    for name, mode in [("a", "baseline"), ("b", "crfi_cprm"), ("b2", "crfi_cprm")]:
        run = tmp_path / name
        code, out, _ = _cli(capsys, "train", "--config", ini, "--mode", mode, "--data", data, "--out", run)
        assert code == 0
        shas.append(json.loads(out)["checkpoint_sha256"])
        code, out, _ = _cli(capsys, "eval", "--config", ini, "--out", run, "--data", data, "--suite", suite)
        assert code == 0 and 0 <= json.loads(out)["mpc"] <= 100
        runs.append(run)
    assert shas[1] == shas[2] != shas[0]
    for f in ("mpc.json", "mpc.csv", "cosine.json", "cosine.csv", "loss_log.csv", "detections/fog_5.json"):
        assert (runs[1] / f).read_bytes() == (runs[2] / f).read_bytes()
    header = (runs[0] / "loss_log.csv").read_text().splitlines()[0]
    assert "crfi" not in header

    # every reported number follows from the persisted detections
    test_ds, _ = load_dataset(data, "test")
    stored = MpcReport.from_json((runs[1] / "mpc.json").read_text())
    again = recompute_report(runs[1], test_ds, cfg)
    np.testing.assert_array_equal(again.P, stored.P)
    assert again.clean_map == stored.clean_map

    code, out, _ = _cli(capsys, "report", runs[1], runs[0], "--out", tmp_path / "table.md")
    assert code == 0 and out == (tmp_path / "table.md").read_text()
    body = out.splitlines()[2:]
    assert body[0].split("|")[2].strip() == "baseline" and body[1].split("|")[2].strip() == "crfi_cprm"
    ck = hashlib.sha256((runs[1] / "checkpoint.json").read_bytes()).hexdigest()
    assert ck == shas[1]
