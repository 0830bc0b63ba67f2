"""End-to-end command dispatch: every subcommand, config handling, exit codes."""

import csv
import os

import numpy as np
import pytest

from pointmt.cli import KNOWN_KEYS, UsageError, command_dispatch, parse_config_file


SMALL_CONFIG = """
# desk-scale toy setup
model.stages = 2
model.ratios = 1,2
model.neighborhood_sizes = 3,4
model.channels = 8,16
model.mlp_hidden_mult = 2
model.head_hidden = 16
synth.classes = sphere,plane
synth.samples_per_class = 6
synth.test_samples_per_class = 3
synth.points_per_cloud = 32
train.epochs = 2
train.cycle_length = 2
"""


@pytest.fixture()
def workdir(tmp_path):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(SMALL_CONFIG)
    return tmp_path, str(cfg)


def _synth(tmp_path, cfg):
    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "synth"])
    assert rc == 0
    return str(tmp_path / "train.pmtc"), str(tmp_path / "test.pmtc")


def test_config_parsing_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("model.stages = 2\nmodel.flux = 9\n")
    with pytest.raises(UsageError):
        parse_config_file(path)


def test_config_parsing_types(tmp_path):
    path = tmp_path / "ok.cfg"
    path.write_text("model.channels = 8,16\ntrain.lr_max = 0.5\ntrain.augment_rotate = true\n")
    values = parse_config_file(path)
    assert values["model.channels"] == (8, 16)
    assert values["train.lr_max"] == 0.5
    assert values["train.augment_rotate"] is True
    assert set(values) <= set(KNOWN_KEYS)


def test_unknown_subcommand_exits_1():
    assert command_dispatch(["frobnicate"]) == 1


def test_unknown_flag_exits_1():
    assert command_dispatch(["--no-such-flag", "synth"]) == 1


def test_bad_config_value_exits_1(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.stages = banana\n")
    assert command_dispatch(["--config", str(cfg), "--out", str(tmp_path), "synth"]) == 1


def test_synth_writes_datasets(workdir, capsys):
    tmp_path, cfg = workdir
    train_path, test_path = _synth(tmp_path, cfg)
    assert os.path.exists(train_path) and os.path.exists(test_path)
    out = capsys.readouterr().out
    assert "resolved: seed = 42" in out
    from pointmt.dataio import load_dataset

    assert len(load_dataset(train_path)) == 12
    assert len(load_dataset(test_path)) == 6


def test_train_epochs_zero_writes_initial_checkpoint(workdir):
    tmp_path, cfg = workdir
    train_path, test_path = _synth(tmp_path, cfg)
    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "train",
                           "--train-data", train_path, "--test-data", test_path,
                           "--epochs", "0"])
    assert rc == 0
    assert os.path.exists(tmp_path / "model_final.ckpt")
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["epoch", "lr", "train_loss", "train_acc", "test_acc", "wall_time"]]


def test_train_eval_round_trip(workdir, capsys):
    tmp_path, cfg = workdir
    train_path, test_path = _synth(tmp_path, cfg)
    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "train",
                           "--train-data", train_path, "--test-data", test_path])
    assert rc == 0
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    final_test_acc = float(rows[-1]["test_acc"])
    capsys.readouterr()

    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "eval",
                           "--checkpoint", str(tmp_path / "model_final.ckpt"),
                           "--test-data", test_path])
    assert rc == 0
    out = capsys.readouterr().out
    oa = float([ln for ln in out.splitlines() if ln.startswith("OA ")][0].split()[1])
    assert oa == pytest.approx(final_test_acc, abs=1e-9)


def test_missing_dataset_exits_1(workdir):
    tmp_path, cfg = workdir
    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "train",
                           "--train-data", str(tmp_path / "nope.pmtc"),
                           "--test-data", str(tmp_path / "nope.pmtc")])
    assert rc == 1


def test_bench_writes_csv(tmp_path):
    rc = command_dispatch(["--out", str(tmp_path), "bench",
                           "--n-list", "64", "--k-list", "2,4", "--c", "8",
                           "--repeats", "2"])
    assert rc == 0
    with open(tmp_path / "bench.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["mode", "n", "k", "c", "flops", "median_ms"]
    assert len(rows) == 5


def test_analyze_kl_attn_features(workdir, capsys):
    tmp_path, cfg = workdir
    train_path, test_path = _synth(tmp_path, cfg)
    command_dispatch(["--config", cfg, "--out", str(tmp_path), "train",
                      "--train-data", train_path, "--test-data", test_path])
    ckpt = str(tmp_path / "model_final.ckpt")
    capsys.readouterr()

    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "analyze", "kl",
                           "--checkpoint", ckpt, "--test-data", test_path])
    assert rc == 0
    assert os.path.exists(tmp_path / "kl_stats.csv")
    assert "mean KL" in capsys.readouterr().out

    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "analyze", "attn",
                           "--checkpoint", ckpt, "--test-data", test_path,
                           "--sample", "0", "--points", "0,2"])
    assert rc == 0
    for p in (0, 2):
        with open(tmp_path / f"attn_trace_{p}.csv") as fh:
            rows = list(csv.reader(fh))
        # rows = neighbors (k of the final stage), columns = channels
        assert len(rows) == 4
        assert all(len(r) == 16 for r in rows)
        w = np.array([[float(v) for v in r] for r in rows])
        np.testing.assert_allclose(w.sum(axis=0), np.ones(16), atol=1e-5)

    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "analyze", "features",
                           "--checkpoint", ckpt, "--test-data", test_path])
    assert rc == 0
    assert os.path.exists(tmp_path / "features.csv")
    assert os.path.exists(tmp_path / "point_logits.csv")


def test_compare_branches_writes_per_mode_csv(workdir):
    tmp_path, cfg = workdir
    train_path, test_path = _synth(tmp_path, cfg)
    rc = command_dispatch(["--config", cfg, "--out", str(tmp_path), "compare-branches",
                           "--train-data", train_path, "--test-data", test_path,
                           "--epochs", "1", "--cycle-length", "1"])
    assert rc == 0
    for mode in ("mlp_only", "attn_only", "hybrid"):
        assert os.path.exists(tmp_path / f"metrics_{mode}.csv")


def test_gradcheck_quick_exits_0(tmp_path, capsys):
    rc = command_dispatch(["--out", str(tmp_path), "gradcheck", "--quick"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "gradcheck worst:" in out


def test_subcommands_never_mutate_input_datasets(workdir):
    tmp_path, cfg = workdir
    train_path, test_path = _synth(tmp_path, cfg)
    before = (open(train_path, "rb").read(), open(test_path, "rb").read())
    command_dispatch(["--config", cfg, "--out", str(tmp_path), "train",
                      "--train-data", train_path, "--test-data", test_path])
    command_dispatch(["--config", cfg, "--out", str(tmp_path), "analyze", "kl",
                      "--checkpoint", str(tmp_path / "model_final.ckpt"),
                      "--test-data", test_path])
    after = (open(train_path, "rb").read(), open(test_path, "rb").read())
    assert before == after


def test_train_determinism_identical_metrics(workdir):
    """Two identical f64 runs produce byte-identical metrics apart from wall time."""
    tmp_path, cfg = workdir
    train_path, test_path = _synth(tmp_path, cfg)

    def run(out):
        os.makedirs(out, exist_ok=True)
        rc = command_dispatch(["--config", cfg, "--out", out, "--precision", "f64", "train",
                               "--train-data", train_path, "--test-data", test_path])
        assert rc == 0
        with open(os.path.join(out, "metrics.csv")) as fh:
            rows = list(csv.reader(fh))
        return [row[:-1] for row in rows]  # wall_time cannot repeat

    assert run(str(tmp_path / "run_a")) == run(str(tmp_path / "run_b"))
