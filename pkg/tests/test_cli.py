import csv
import json

import numpy as np
import pytest

from sleepgmu import cli
from sleepgmu.dataset import load_dataset, write_tensor
from sleepgmu.errors import ConfigError
from sleepgmu.model import load_checkpoint
from sleepgmu.trainer import evaluate, train, stratified_split

from test_data import write_psg_recording, write_wearable_recording

CONFIG = {
    "seed": 3,
    "model": {"embed_dim": 16, "heads": 2, "blocks_per_channel": 1, "ff_hidden": 32, "gmu_shared_dim": 16, "classifier_hidden": 16},
    "train": {"max_epochs": 3},
    "synth": {
        "n_epochs": 120,
        "noise": 1.0,
        "channels": [
            {"name": "eeg", "time_steps": 6, "features": 15},
            {"name": "acc", "kind": "timeseries", "time_steps": 6, "features": 8},
        ],
    },
}


def files(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.name != "timestamps.json"}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(CONFIG))
    assert cli.main(["synth", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "ds")]) == 0
    return tmp_path


def run(workdir, *args, config="cfg.json"):
    argv = list(args) + ["--config", str(workdir / config)]
    return cli.main(argv)


class TestRunConfig:
    def test_defaults(self):
        cfg = cli.RunConfig.from_dict({})
        assert cfg.train.batch_size == 32 and cfg.train.lr == 5e-3
        assert cfg.split.train_fraction == 0.6

    @pytest.mark.parametrize(
        "doc",
        [
            {"trian": {}},
            {"train": {"lrr": 1}},
            {"model": {"embed": 3}},
            {"split": {"seed": 1}},
            {"paths": {"dataset": "x"}},
            {"preprocess": {"fft": 3}},
            {"ablation": [{"name": "a", "chanels": []}]},
        ],
    )
    def test_unknown_keys_rejected(self, doc):
        with pytest.raises(ConfigError):
            cli.RunConfig.from_dict(doc)

    def test_round_trip(self):
        cfg = cli.RunConfig.from_dict(CONFIG)
        again = cli.RunConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_root_seed_feeds_streams(self):
        cfg = cli.RunConfig.from_dict({"seed": 9})
        assert cfg.train_config.seed == 9 and cfg.split_spec.seed == 9


class TestCommands:
    def test_synth_manifest(self, workdir):
        data, m = load_dataset(workdir / "ds")
        assert m.epoch_count == 120 and sum(m.stage_histogram.values()) == 120
        assert json.loads((workdir / "ds" / "run_config.json").read_text())["seed"] == 3

    def test_seed_flag_overrides(self, workdir):
        assert run(workdir, "synth", "--seed", "4", "--out", str(workdir / "ds4")) == 0
        assert json.loads((workdir / "ds4" / "run_config.json").read_text())["seed"] == 4
        a, _ = load_dataset(workdir / "ds")
        b, _ = load_dataset(workdir / "ds4")
        assert not np.array_equal(a.channels["eeg"], b.channels["eeg"])

    def test_train_is_reproducible(self, workdir):
        for name in ("r1", "r2"):
            assert run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / name)) == 0
        assert files(workdir / "r1") == files(workdir / "r2")
        assert {"checkpoint.sgmu", "train_log.csv", "split.json", "run_config.json"} <= set(files(workdir / "r1"))
        assert (workdir / "r1" / "timestamps.json").is_file()

    def test_eval_reproduces_best_val_accuracy(self, workdir):
        run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r"))
        assert run(workdir, "eval", "--data", str(workdir / "ds"), "--checkpoint", str(workdir / "r"), "--split", "val", "--out", str(workdir / "e")) == 0
        with open(workdir / "r" / "train_log.csv") as fh:
            best = max(float(row["val_acc"]) for row in csv.DictReader(fh))
        metrics = json.loads((workdir / "e" / "metrics.json").read_text())["metrics"]
        assert metrics["accuracy"] == best
        hyp = (workdir / "e" / "hypnogram.csv").read_text().splitlines()
        conf = (workdir / "e" / "confidence.csv").read_text().splitlines()
        n_val = len(json.loads((workdir / "r" / "split.json").read_text())["val"])
        assert len(hyp) == len(conf) == 1 + n_val
        summary = json.loads((workdir / "e" / "confidence_summary.json").read_text())
        assert [s["threshold"] for s in summary] == [0.4, 0.5, 0.6]

    def test_checkpoint_matches_in_memory_evaluation(self, workdir):
        run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r"))
        cfg = cli.RunConfig.from_dict(CONFIG)
        data, _ = load_dataset(workdir / "ds")
        split = stratified_split(data, cfg.split_spec)
        params, _ = train(data, split, cfg.model_config(), cfg.train_config)
        loaded, header = load_checkpoint(workdir / "r" / "checkpoint.sgmu")
        test = data.subset(split.test)
        (m1, c1), (m2, c2) = evaluate(params, test), evaluate(loaded, test)
        assert m1 == m2 and np.array_equal(c1.counts, c2.counts)
        assert header["extra"]["split"]["test"] == split.test

    def test_predict_one_row_per_epoch(self, workdir):
        run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r"))
        assert run(workdir, "predict", "--data", str(workdir / "ds"), "--checkpoint", str(workdir / "r" / "checkpoint.sgmu"), "--out", str(workdir / "p")) == 0
        with open(workdir / "p" / "predictions.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 120
        probs = np.array([[float(r[f"p_{s}"]) for s in ("W", "N1", "N2", "N3", "REM")] for r in rows])
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_single_variant_ablation_equals_train_eval(self, workdir):
        doc = dict(CONFIG, ablation=[{"name": "only"}])
        (workdir / "abl.json").write_text(json.dumps(doc))
        assert run(workdir, "ablate", "--data", str(workdir / "ds"), "--out", str(workdir / "a"), config="abl.json") == 0
        run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r"))
        run(workdir, "eval", "--data", str(workdir / "ds"), "--checkpoint", str(workdir / "r"), "--out", str(workdir / "e"))
        ab = json.loads((workdir / "a" / "metrics_only.json").read_text())
        ev = json.loads((workdir / "e" / "metrics.json").read_text())
        assert ab["metrics"] == ev["metrics"] and ab["confusion"] == ev["confusion"]
        assert (workdir / "a" / "train_log_only.csv").read_bytes() == (workdir / "r" / "train_log.csv").read_bytes()
        assert len((workdir / "a" / "ablation.csv").read_text().splitlines()) == 2

    def test_preprocess_command(self, tmp_path):
        write_psg_recording(tmp_path / "raw", n_epochs=4)
        for name in ("o1", "o2"):
            assert cli.main(["preprocess", "--input", str(tmp_path / "raw"), "--out", str(tmp_path / name)]) == 0
        assert files(tmp_path / "o1") == files(tmp_path / "o2")
        _, m = load_dataset(tmp_path / "o1")
        assert m.epoch_count == 4

    def test_preprocess_wearable(self, tmp_path):
        write_wearable_recording(tmp_path / "raw", drop_hr=2)
        (tmp_path / "cfg.json").write_text(json.dumps({"preprocess": {"mode": "wearable"}}))
        assert cli.main(["preprocess", "--input", str(tmp_path / "raw"), "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o")]) == 0
        _, m = load_dataset(tmp_path / "o")
        assert m.excluded_count == 0 and m.provenance["interpolated_slots"] == 1


class TestExitCodes:
    def test_missing_dataset(self, tmp_path, capsys):
        assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2
        assert "manifest" in capsys.readouterr().err

    def test_unknown_config_key(self, workdir):
        (workdir / "bad.json").write_text('{"train": {"epochs": 3}}')
        assert run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r"), config="bad.json") == 2

    def test_invalid_json(self, workdir):
        (workdir / "bad.json").write_text("{")
        assert run(workdir, "synth", "--out", str(workdir / "x"), config="bad.json") == 2

    def test_channel_mismatch(self, workdir):
        doc = dict(CONFIG, model=dict(CONFIG["model"], channels=["eeg", "pz_oz"]))
        (workdir / "bad.json").write_text(json.dumps(doc))
        assert run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r"), config="bad.json") == 2

    def test_input_dims_mismatch(self, workdir):
        doc = dict(CONFIG, model=dict(CONFIG["model"], input_dims=[128, 128]))
        (workdir / "bad.json").write_text(json.dumps(doc))
        assert run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r"), config="bad.json") == 2

    def test_missing_checkpoint(self, workdir):
        assert run(workdir, "eval", "--data", str(workdir / "ds"), "--checkpoint", str(workdir / "none.sgmu"), "--out", str(workdir / "e")) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_failure(self, workdir, capsys):
        data, _ = load_dataset(workdir / "ds")
        arr = data.channels["eeg"].copy()
        arr[:, 0, 0] = np.nan
        write_tensor(workdir / "ds" / "eeg.bin", arr)
        assert run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r")) == 3
        assert "non-finite loss" in capsys.readouterr().err

    def test_log_level_from_environment(self, workdir, monkeypatch, capsys):
        monkeypatch.setenv("GMU_LOG", "info")
        run(workdir, "train", "--data", str(workdir / "ds"), "--out", str(workdir / "r"))
        assert "epoch 1 loss" in capsys.readouterr().err
