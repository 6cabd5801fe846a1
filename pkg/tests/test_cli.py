import json

import numpy as np
import pytest

from vitaepp.checkpoint import load_checkpoint
from vitaepp.cli import main, read_sweep_csv, write_sweep_csv
from vitaepp.probe import FeatureTable, ProbeResult
from vitaepp.trainer import TrainLog
from vitaepp.volume import VolumeDataset, read_volume

TINY = [
    "--set", "model.input_side=16", "--set", "model.channels=2", "--set", "model.enc_dim=12",
    "--set", "model.enc_blocks=1", "--set", "model.enc_heads=2", "--set", "model.dec_dim=6",
    "--set", "model.dec_blocks=1", "--set", "model.dec_heads=2", "--set", "model.predictor_hidden=8",
    "--set", "schedule.warmup_epochs=1", "--set", "schedule.total_epochs=2", "--set", "train.batch_size=5",
    "--set", "train.checkpoint_every=1",
]


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synthetic", "--out", str(root / "raw"), "--n", "10", "--side", "16", "--channels", "2",
                 "--seed", "3"]) == 0
    assert main(["preprocess", "--input", str(root / "raw"), "--out", str(root / "prep")] + TINY) == 0
    assert main(["train", "--dataset", str(root / "prep"), "--out", str(root / "run"), "--seed", "1",
                 "--precision", "f64"] + TINY) == 0
    return root


class TestUsage:
    def test_no_args(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command_and_flag(self):
        assert main(["frobnicate"]) == 1
        assert main(["train", "--bogus"]) == 1

    def test_bad_set(self, tmp_path, capsys):
        assert main(["train", "--dataset", str(tmp_path), "--out", str(tmp_path), "--set", "model.nope=1"]) == 1
        assert main(["train", "--dataset", str(tmp_path), "--out", str(tmp_path), "--set", "model.enc_dim=x"]) == 1
        assert "config error" in capsys.readouterr().err

    def test_help_lists_keys(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert "model.mask_ratio" in text and "[paper]" in text and "[desk-scale]" in text

    def test_bad_ratio(self, tmp_path):
        assert main(["sweep-mask-ratio", "--dataset", str(tmp_path), "--out", str(tmp_path / "s"),
                     "--ratios", "0.5,1.5"]) == 1


class TestDataErrors:
    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "missing"
        assert main(["train", "--dataset", str(missing), "--out", str(tmp_path / "o")]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_corrupt_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "x.vckpt"
        bad.write_bytes(b"garbage")
        assert main(["inspect-checkpoint", str(bad)]) == 2

    def test_missing_features(self, tmp_path):
        assert main(["probe", "--features", str(tmp_path / "f.csv"), "--out", str(tmp_path)]) == 2


class TestChain:
    def test_train_outputs(self, chain):
        run = chain / "run"
        assert (run / "config.resolved").exists()
        log = TrainLog.from_csv(run / "trainlog.csv")
        assert len(log.rows) == 4
        ck = load_checkpoint(run / "checkpoints" / "final.vckpt")
        assert ck.epoch == 2 and ck.run_config().train.seed == 1

    def test_refuses_overwrite(self, chain):
        args = ["train", "--dataset", str(chain / "prep"), "--out", str(chain / "run"), "--seed", "1",
                "--precision", "f64"] + TINY
        assert main(args) == 2

    def test_force_rerun_identical(self, chain):
        before = TrainLog.from_csv(chain / "run" / "trainlog.csv").trajectory()
        ck_before = (chain / "run" / "checkpoints" / "final.vckpt").read_bytes()
        args = ["train", "--dataset", str(chain / "prep"), "--out", str(chain / "run"), "--seed", "1",
                "--precision", "f64", "--force"] + TINY
        assert main(args) == 0
        assert TrainLog.from_csv(chain / "run" / "trainlog.csv").trajectory() == before
        assert (chain / "run" / "checkpoints" / "final.vckpt").read_bytes() == ck_before

    def test_features_and_probe(self, chain):
        ck = str(chain / "run" / "checkpoints" / "final.vckpt")
        assert main(["extract-features", "--checkpoint", ck, "--dataset", str(chain / "prep"),
                     "--out", str(chain / "feat")]) == 0
        table = FeatureTable.from_csv(chain / "feat" / "features.csv")
        assert table.features.shape == (10, 12)
        assert main(["probe", "--features", str(chain / "feat" / "features.csv"), "--out", str(chain / "probe"),
                     "--set", "probe.folds=2", "--set", "probe.svm_iters=200"] + TINY) == 0
        res = ProbeResult.load(chain / "probe" / "probe.json")
        assert len(res.folds) == 2 and 0 <= res.mean_auc <= 1

    def test_reconstruct(self, chain):
        ck = str(chain / "run" / "checkpoints" / "final.vckpt")
        assert main(["reconstruct", "--checkpoint", ck, "--dataset", str(chain / "prep"), "--index", "2",
                     "--out", str(chain / "rec"), "--seed", "4"]) == 0
        ds = VolumeDataset.open(chain / "prep")
        rec = read_volume(chain / "rec" / "reconstruction.vvol")
        assert rec.voxels.shape == ds.volume(2).voxels.shape

    def test_inspect(self, chain, capsys):
        assert main(["inspect-checkpoint", str(chain / "run" / "checkpoints" / "final.vckpt")]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["epoch"] == 2 and "[model]" in info["config"]

    def test_resume(self, chain):
        ck = str(chain / "run" / "checkpoints" / "epoch_0001.vckpt")
        assert main(["train", "--dataset", str(chain / "prep"), "--out", str(chain / "run2"), "--seed", "1",
                     "--precision", "f64", "--resume", ck] + TINY) == 0
        a = TrainLog.from_csv(chain / "run" / "trainlog.csv").trajectory()
        assert TrainLog.from_csv(chain / "run2" / "trainlog.csv").trajectory() == a

    def test_sweep(self, chain):
        out = chain / "sweep"
        assert main(["sweep-mask-ratio", "--dataset", str(chain / "prep"), "--out", str(out), "--ratios", "0.5,0.75",
                     "--seeds", "0", "--set", "probe.folds=2", "--set", "probe.svm_iters=100"] + TINY) == 0
        runs, means = read_sweep_csv(out / "sweep.csv")
        assert [(r, s) for r, s, _ in runs] == [(0.5, 0), (0.75, 0)]
        assert set(means) == {0.5, 0.75}


def test_sweep_default_grid(chain):
    out = chain / "sweep_default"
    assert main(["sweep-mask-ratio", "--dataset", str(chain / "prep"), "--out", str(out),
                 "--set", "probe.folds=2", "--set", "probe.svm_iters=50"] + TINY
                + ["--set", "model.patch_side=4"]) == 0
    runs, means = read_sweep_csv(out / "sweep.csv")
    assert [r for r, _, _ in runs] == [0.55, 0.65, 0.75, 0.85, 0.95]
    assert sorted(means) == [0.55, 0.65, 0.75, 0.85, 0.95]


@pytest.mark.slow
def test_chain_desk_defaults(tmp_path):
    # desk preset throughout; only the epoch count is cut so the smoke run stays short
    raw, prep, run, feats = (str(tmp_path / n) for n in ("raw", "prep", "run", "feats"))
    assert main(["gen-synthetic", "--out", raw, "--n", "20", "--seed", "0"]) == 0
    assert main(["preprocess", "--input", raw, "--out", prep]) == 0
    assert main(["train", "--dataset", prep, "--out", run, "--set", "schedule.total_epochs=2",
                 "--set", "schedule.warmup_epochs=1"]) == 0
    assert main(["extract-features", "--checkpoint", f"{run}/checkpoints/final.vckpt", "--dataset", prep,
                 "--out", feats]) == 0
    assert main(["probe", "--features", f"{feats}/features.csv", "--out", str(tmp_path / "probe")]) == 0
    res = ProbeResult.load(tmp_path / "probe" / "probe.json")
    assert len(res.folds) == 5


def test_sweep_csv_round_trip(tmp_path):
    rows = [(0.55, 0, 0.7), (0.55, 1, 0.8), (0.75, 0, 0.9123456789012345)]
    write_sweep_csv(tmp_path / "s.csv", rows)
    runs, means = read_sweep_csv(tmp_path / "s.csv")
    assert runs == rows
    assert means[0.55] == np.mean([0.7, 0.8]) and means[0.75] == 0.9123456789012345
