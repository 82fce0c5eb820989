"""Command-line interface tests: config parsing, exit codes, output files,
and the gen-data -> train -> calibrate -> classify -> detect pipeline."""

import shutil
from pathlib import Path

import numpy as np
import pytest

from slicecoord import cli, evaluate, network, phantom, trainer

CFG_TEXT = """\
[phantom]
image_size = 16,16
slices_range = 12,20
seed = 7

[network]
input_size = 16,16
stages = 4,8
embed_channels = 8
seed = 3

[sampler]
g = 2
m = 4
seed = 5

[trainer]
iterations = 25
learning_rate = 0.005
seed = 5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny dataset plus one trained run, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.ini"
    cfg.write_text(CFG_TEXT)
    data = root / "data"
    rc = cli.main(["gen-data", "--out", str(data), "--volumes", "6",
                   "--config", str(cfg), "--seed", "42"])
    assert rc == 0
    run = root / "run"
    rc = cli.main(["train", "--data", str(data), "--out", str(run),
                   "--config", str(cfg)])
    assert rc == 0
    return {"root": root, "cfg": cfg, "data": data,
            "model": run / "model.ubrc", "run": run}


# --- config file parsing


def test_read_config_parses_typed_values(tmp_path):
    path = tmp_path / "cfg.ini"
    path.write_text("[phantom]\nimage_size = 24,20\nnoise_sigma = 0.01\n"
                    "[network]\nstages = 8,16,32\n"
                    "[trainer]\nlr_schedule = 0.5,500\ncheckpoint_period =\n")
    cfg = cli.read_config(path)
    assert cfg["phantom"]["image_size"] == (24, 20)
    assert cfg["phantom"]["noise_sigma"] == 0.01
    assert cfg["network"]["stages"] == (network.StageSpec(8), network.StageSpec(16),
                                        network.StageSpec(32))
    assert cfg["trainer"]["lr_schedule"] == (0.5, 500)
    assert cfg["trainer"]["checkpoint_period"] is None


@pytest.mark.parametrize("text, fragment", [
    ("[trainer]\nbogus = 1\n", "unknown key 'bogus'"),
    ("[nonsense]\nx = 1\n", "unknown section [nonsense]"),
    ("[phantom]\nimage_size = 16\n", "expected two comma-separated values"),
    ("[trainer]\niterations = soon\n", "bad value"),
])
def test_read_config_rejects_malformed_input(tmp_path, text, fragment):
    path = tmp_path / "cfg.ini"
    path.write_text(text)
    with pytest.raises(cli.CliDataError) as err:
        cli.read_config(path)
    assert fragment in str(err.value)


def test_read_config_missing_file_is_data_error(tmp_path):
    with pytest.raises(cli.CliDataError, match="cannot read config"):
        cli.read_config(tmp_path / "absent.ini")


def test_threshold_file_round_trip(tmp_path):
    path = tmp_path / "t.ini"
    path.write_text("[thresholds]\nt1 = -0.25\nt2 = 1.75\n")
    thresholds = cli.read_thresholds(path)
    assert thresholds.t1 == -0.25 and thresholds.t2 == 1.75
    path.write_text("[thresholds]\nt1 = lots\nt2 = 2\n")
    with pytest.raises(cli.CliDataError, match="bad t1/t2"):
        cli.read_thresholds(path)
    path.write_text("[other]\nt1 = 0\n")
    with pytest.raises(cli.CliDataError, match="missing"):
        cli.read_thresholds(path)


# --- exit codes


@pytest.mark.parametrize("argv", [
    [],                                  # no subcommand
    ["no-such-command"],                 # unknown subcommand
    ["train", "--data"],                 # flag missing its value
    ["score", "--model", "m.ubrc"],      # required flag absent
])
def test_usage_errors_exit_one(argv, capsys):
    assert cli.main(argv) == 1
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_missing_inputs_exit_two(workspace, tmp_path, capsys):
    rc = cli.main(["score", "--model", str(tmp_path / "ghost.ubrc"),
                   "--data", str(workspace["data"]), "--out", str(tmp_path / "o.csv")])
    assert rc == 2
    rc = cli.main(["score", "--model", str(workspace["model"]),
                   "--data", str(tmp_path / "ghost"), "--out", str(tmp_path / "o.csv")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_invalid_trainer_value_exits_two(workspace, tmp_path, capsys):
    rc = cli.main(["train", "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "r"), "--config", str(workspace["cfg"]),
                   "--momentum", "2.0"])
    assert rc == 2
    assert "momentum" in capsys.readouterr().err


def test_divergence_exits_three(workspace, tmp_path, capsys, monkeypatch):
    def explode(dataset, config):
        raise trainer.TrainerError("training diverged at iteration 3: total loss is inf")
    monkeypatch.setattr(trainer, "train", explode)
    rc = cli.main(["train", "--data", str(workspace["data"]),
                   "--out", str(tmp_path / "r"), "--config", str(workspace["cfg"])])
    assert rc == 3
    assert "diverged" in capsys.readouterr().err


# --- gen-data


def test_gen_data_writes_dataset_and_resolved_config(workspace):
    data = workspace["data"]
    assert (data / phantom.MANIFEST_NAME).is_file()
    assert (data / phantom.SIDECAR_NAME).is_file()
    resolved = (data / "resolved.ini").read_text()
    assert "image_size = 16,16" in resolved
    assert "command = gen-data" in resolved
    assert "seed = 42" in resolved
    dataset = phantom.load_dataset(data, with_latent=True)
    assert len(dataset.records) == 6
    assert all(12 <= rec.n_slices <= 20 for rec in dataset.records)


def test_gen_data_same_seed_is_byte_identical(workspace, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = cli.main(["gen-data", "--out", str(out), "--volumes", "3",
                       "--config", str(workspace["cfg"]), "--seed", "9",
                       "--anomaly-fraction", "0.34"])
        assert rc == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_data_anomaly_fraction_counts(workspace, tmp_path, capsys):
    rc = cli.main(["gen-data", "--out", str(tmp_path / "d"), "--volumes", "10",
                   "--config", str(workspace["cfg"]), "--seed", "1",
                   "--anomaly-fraction", "0.2"])
    assert rc == 0
    assert "(2 anomalous)" in capsys.readouterr().out
    kinds = [rec.anomaly for rec in phantom.load_dataset(tmp_path / "d").records]
    assert sum(1 for k in kinds if k != "none") == 2


# --- train


def test_train_writes_model_log_and_resolved_config(workspace):
    run = workspace["run"]
    assert (run / "model.ubrc").is_file()
    assert (run / "train_log.txt").is_file()
    resolved = (run / "resolved.ini").read_text()
    assert "iterations = 25" in resolved
    assert "g = 2" in resolved
    assert "command = train" in resolved
    assert len((run / "train_log.txt").read_text().splitlines()) == 25


def test_train_flag_overrides_config_file(workspace, tmp_path):
    run = tmp_path / "r"
    rc = cli.main(["train", "--data", str(workspace["data"]), "--out", str(run),
                   "--config", str(workspace["cfg"]), "--iterations", "5",
                   "--lr", "0.001"])
    assert rc == 0
    resolved = (run / "resolved.ini").read_text()
    assert "iterations = 5" in resolved
    assert "learning_rate = 0.001" in resolved
    assert len((run / "train_log.txt").read_text().splitlines()) == 5


# --- score / calibrate / classify / detect-anomaly / metrics


def test_score_matches_library_and_reruns_identically(workspace, tmp_path):
    out = tmp_path / "curves.csv"
    argv = ["score", "--model", str(workspace["model"]),
            "--data", str(workspace["data"]), "--out", str(out)]
    assert cli.main(argv) == 0
    first = out.read_bytes()
    assert cli.main(argv) == 0
    assert out.read_bytes() == first

    params = network.load_params(workspace["model"])
    dataset = phantom.load_dataset(workspace["data"])
    curves = [evaluate.score_volume(params, dataset.volumes[r.volume_id], r.volume_id)
              for r in dataset.records]
    expected = tmp_path / "expected.csv"
    evaluate.write_curves_csv(curves, expected)
    assert expected.read_bytes() == first
    assert (tmp_path / "curves.csv.resolved.ini").is_file()


def test_calibrate_then_classify_round_trip(workspace, tmp_path, capsys):
    thresholds_path = tmp_path / "thresholds.ini"
    rc = cli.main(["calibrate", "--model", str(workspace["model"]),
                   "--data", str(workspace["data"]),
                   "--volumes", "vol0000,vol0001", "--out", str(thresholds_path)])
    assert rc == 0
    thresholds = cli.read_thresholds(thresholds_path)
    assert thresholds.t1 < thresholds.t2

    out = tmp_path / "classes.csv"
    rc = cli.main(["classify", "--model", str(workspace["model"]),
                   "--thresholds", str(thresholds_path),
                   "--data", str(workspace["data"]), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "volume_id,slice_index,score,predicted,truth"
    dataset = phantom.load_dataset(workspace["data"], with_latent=True)
    assert len(lines) - 1 == sum(rec.n_slices for rec in dataset.records)

    # the CSV rows must agree with classifying through the library directly
    params = network.load_params(workspace["model"])
    rec = dataset.records[0]
    curve = evaluate.score_volume(params, dataset.volumes[rec.volume_id])
    predicted = evaluate.classify_slices(curve.scores, thresholds)
    rows = [ln.split(",") for ln in lines[1:] if ln.startswith(rec.volume_id + ",")]
    assert [int(row[3]) for row in rows] == predicted.tolist()
    assert "accuracy" in capsys.readouterr().out


def test_calibrate_unknown_volume_exits_two(workspace, tmp_path, capsys):
    rc = cli.main(["calibrate", "--model", str(workspace["model"]),
                   "--data", str(workspace["data"]),
                   "--volumes", "vol9999", "--out", str(tmp_path / "t.ini")])
    assert rc == 2
    assert "vol9999" in capsys.readouterr().err


def test_classify_without_sidecar_omits_truth(workspace, tmp_path):
    bare = tmp_path / "bare"
    shutil.copytree(workspace["data"], bare)
    (bare / phantom.SIDECAR_NAME).unlink()
    thresholds_path = tmp_path / "t.ini"
    thresholds_path.write_text("[thresholds]\nt1 = 0.0\nt2 = 1.0\n")
    out = tmp_path / "classes.csv"
    rc = cli.main(["classify", "--model", str(workspace["model"]),
                   "--thresholds", str(thresholds_path),
                   "--data", str(bare), "--out", str(out)])
    assert rc == 0
    assert out.read_text().splitlines()[0] == "volume_id,slice_index,score,predicted"


def test_detect_anomaly_exit_codes_and_csv(workspace, tmp_path):
    out = tmp_path / "anomaly.csv"
    base = ["detect-anomaly", "--model", str(workspace["model"]),
            "--data", str(workspace["data"]), "--out", str(out)]
    # r can never drop below -1, so nothing is flagged at threshold -1.1
    assert cli.main(base + ["--r-threshold", "-1.1", "--fail-on-flag"]) == 0
    # at threshold 1.1 every volume is flagged; --fail-on-flag turns that into 2
    assert cli.main(base + ["--r-threshold", "1.1"]) == 0
    assert cli.main(base + ["--r-threshold", "1.1", "--fail-on-flag"]) == 2
    lines = out.read_text().splitlines()
    assert lines[0] == "volume_id,pearson_r,flagged,slope_sign"
    assert len(lines) == 7
    assert all(ln.split(",")[2] == "true" for ln in lines[1:])


def test_metrics_csv_per_volume(workspace, tmp_path, capsys):
    out = tmp_path / "metrics.csv"
    rc = cli.main(["metrics", "--model", str(workspace["model"]),
                   "--data", str(workspace["data"]), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "volume_id,pairwise_order_accuracy,spearman,r_squared,pearson_r"
    assert len(lines) == 7
    values = [float(v) for v in lines[1].split(",")[1:]]
    assert all(np.isfinite(values))
    assert "order accuracy mean" in capsys.readouterr().out


def test_metrics_explicit_sidecar_flag(workspace, tmp_path):
    out = tmp_path / "metrics.csv"
    rc = cli.main(["metrics", "--model", str(workspace["model"]),
                   "--data", str(workspace["data"]),
                   "--sidecar", str(workspace["data"] / phantom.SIDECAR_NAME),
                   "--out", str(out)])
    assert rc == 0
    rc = cli.main(["metrics", "--model", str(workspace["model"]),
                   "--data", str(workspace["data"]),
                   "--sidecar", str(tmp_path / "ghost.ubrz"),
                   "--out", str(out)])
    assert rc == 2


# --- grad-check


def test_grad_check_passes_and_reports(capsys):
    rc = cli.main(["grad-check", "--size", "12", "--seeds", "2"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2
    assert "passed" in out


def test_grad_check_unreachable_tolerance_fails(capsys):
    # finite differences cannot hit 1e-15, so this must report failure
    rc = cli.main(["grad-check", "--size", "10", "--seeds", "1",
                   "--tolerance", "1e-15"])
    assert rc == 2
    captured = capsys.readouterr()
    assert "FAIL" in captured.out + captured.err
