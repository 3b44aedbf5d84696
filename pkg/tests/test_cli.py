import csv
import json

import numpy as np
import pytest

from cnnlstm_ids.cli import main
from cnnlstm_ids.config import RunConfig, build_run_config, parse_config_text
from cnnlstm_ids.errors import ConfigError

TINY_FLAGS = ["--conv-filters", "3,3,3", "--kernel-size", "2", "--lstm-units", "3,4", "--dense-units", "6"]


@pytest.fixture
def synth_csv(tmp_path):
    path = tmp_path / "synth.csv"
    assert main(["synth", "--out", str(path), "--n-normal", "20", "--n-attack", "40", "--features", "16",
                 "--seed", "3"]) == 0
    return path


def files(directory):
    return sorted(p.name for p in directory.iterdir())


class TestConfig:
    def test_grammar(self):
        values = parse_config_text("# comment\nseed = 7\n\nbatch-size = 32   # trailing\nrestore_best = no\n")
        assert values == {"seed": 7, "batch_size": 32, "restore_best": False}

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("colour = blue\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match=":2:"):
            parse_config_text("seed = 1\njust words\n")

    def test_bad_type(self):
        with pytest.raises(ConfigError):
            parse_config_text("epochs = many\n")

    def test_three_way_precedence(self):
        file_values = {"seed": 5, "batch_size": 32}
        flags = {"seed": 9, "batch_size": None, "learning_rate": None}
        cfg = build_run_config(file_values, flags)
        assert cfg.seed == 9  # flag beats file
        assert cfg.batch_size == 32  # file beats default
        assert cfg.learning_rate == RunConfig().learning_rate  # default survives

    def test_defaults_follow_table(self):
        cfg = RunConfig()
        arch, tc = cfg.architecture(60), cfg.training()
        assert (tc.learning_rate, tc.batch_size, tc.max_epochs) == (0.001, 16, 150)
        assert arch.lstm_units == (64, 128) and arch.dropout == 0.4 and cfg.seed == 42

    def test_invalid_dropout(self):
        with pytest.raises(ConfigError):
            build_run_config({}, {"dropout": 1.5})


class TestCommands:
    def test_preprocess_fixture(self, tmp_path, capsys):
        src = tmp_path / "five.csv"
        src.write_text("Flow ID,a,b,proto,Label\n"
                       "x1,1,10,tcp,NORMAL\nx2,2,30,udp,MITM_DOS\nx3,3,20,tcp,STOP_APP\n"
                       "x4,4,50,tcp,normal\nx5,5,40,udp,MITM_DOS\n", encoding="utf-8")
        out = tmp_path / "clean.csv"
        assert main(["preprocess", "--data", str(src), "--out", str(out), "--dataset", "dnp3",
                     "--split-ratio", "0.6"]) == 0
        with open(out, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["a", "b", "proto", "Label"]
        values = np.array([[float(v) for v in r[:-1]] for r in rows[1:]])
        assert values.shape == (5, 3)
        assert {r[-1] for r in rows[1:]} <= {"0", "1"}
        side = json.loads((tmp_path / "clean.csv.json").read_text(encoding="utf-8"))
        # scaling is fitted on the training rows only, so only those are guaranteed to land in [0, 1]
        train_rows = values[side["split"]["train"]]
        assert train_rows.min() == 0.0 and train_rows.max() == 1.0
        assert side["dataset"]["dropped_columns"] == ["Flow ID"]
        assert side["dataset"]["encodings"] == {"proto": {"tcp": 0, "udp": 1}}
        assert set(side["normalization"]) == {"feature_names", "mins", "maxs", "fit_scope"}
        assert main(["preprocess", "--data", str(src), "--out", str(out), "--dataset", "dnp3",
                     "--fit-scope", "whole_dataset"]) == 0
        with open(out, encoding="utf-8") as fh:
            values = np.array([[float(v) for v in r[:-1]] for r in list(csv.reader(fh))[1:]])
        assert values.min() >= 0.0 and values.max() <= 1.0

    def test_preprocess_whole_dataset_in_unit_range(self, tmp_path, synth_csv):
        out = tmp_path / "n.csv"
        assert main(["preprocess", "--data", str(synth_csv), "--out", str(out), "--fit-scope",
                     "whole_dataset"]) == 0
        with open(out, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        X = np.array([[float(v) for v in r[:-1]] for r in rows])
        assert X.min() == 0.0 and X.max() == 1.0

    def test_preprocess_rerun_identical(self, tmp_path, synth_csv):
        for name in ("a.csv", "b.csv"):
            assert main(["preprocess", "--data", str(synth_csv), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        a = json.loads((tmp_path / "a.csv.json").read_text())
        b = json.loads((tmp_path / "b.csv.json").read_text())
        assert a == b

    def test_missing_label_column(self, tmp_path, capsys):
        src = tmp_path / "nolabel.csv"
        src.write_text("a,b\n1,2\n3,4\n", encoding="utf-8")
        assert main(["preprocess", "--data", str(src), "--out", str(tmp_path / "o.csv")]) == 2
        assert "Label" in capsys.readouterr().err

    def test_train_evaluate_predict(self, tmp_path, synth_csv):
        model, report = tmp_path / "m.bin", tmp_path / "r.json"
        assert main(["train", "--data", str(synth_csv), "--model", str(model), "--out", str(report),
                     "--seed", "7", "--epochs", "120", "--batch-size", "16", "--lr", "0.001", *TINY_FLAGS]) == 0
        r = json.loads(report.read_text(encoding="utf-8"))
        assert r["seed"] == 7
        assert r["config"]["training"]["max_epochs"] == 120
        assert r["config"]["training"]["batch_size"] == 16
        assert r["config"]["training"]["learning_rate"] == 0.001
        assert r["config"]["architecture"]["lstm_units"] == [3, 4]
        assert len(r["training"]["history"]) == r["training"]["stopped_epoch"]
        assert set(r["confusion"]) == {"tp", "tn", "fp", "fn"}
        assert "duration_seconds" in r

        ev = tmp_path / "e.json"
        assert main(["evaluate", "--model", str(model), "--data", str(synth_csv), "--out", str(ev)]) == 0
        assert sum(json.loads(ev.read_text())["confusion"].values()) == 60

        unlabelled = tmp_path / "u.csv"
        with open(synth_csv, encoding="utf-8") as fh, open(unlabelled, "w", encoding="utf-8") as out:
            for line in fh:
                out.write(line.rsplit(",", 1)[0] + "\n")
        preds = tmp_path / "p.csv"
        assert main(["predict", "--model", str(model), "--data", str(unlabelled), "--out", str(preds)]) == 0
        with open(preds, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["row", "probability", "prediction"] and len(rows) - 1 == 60
        assert all(0 < float(r[1]) < 1 and r[2] in ("0", "1") for r in rows[1:])

    def test_train_invalid_dropout_before_reading_data(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "absent.csv"), "--model", str(tmp_path / "m"),
                     "--out", str(tmp_path / "r"), "--dropout", "1.5"])
        assert code == 1
        assert files(tmp_path) == []

    def test_config_file_and_flag(self, tmp_path, synth_csv):
        conf = tmp_path / "run.conf"
        conf.write_text("seed = 11\nepochs = 2\nbatch_size = 8\n" + "conv_filters = 3,3,3\nkernel_size = 2\n"
                        "lstm_units = 3,4\ndense_units = 6\n", encoding="utf-8")
        report = tmp_path / "r.json"
        assert main(["train", "--config", str(conf), "--data", str(synth_csv), "--model", str(tmp_path / "m"),
                     "--out", str(report), "--batch-size", "4"]) == 0
        run = json.loads(report.read_text())["config"]["run"]
        assert (run["seed"], run["epochs"], run["batch_size"], run["learning_rate"]) == (11, 2, 4, 0.001)

    def test_crossval_report(self, tmp_path, synth_csv):
        report = tmp_path / "cv.json"
        assert main(["crossval", "--data", str(synth_csv), "--out", str(report), "--epochs", "2",
                     *TINY_FLAGS]) == 0
        cv = json.loads(report.read_text())["crossval"]
        assert cv["k"] == 5 and len(cv["folds"]) == 5
        assert set(cv["means"]) == {"accuracy", "precision", "recall", "f1", "loss"}

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck", "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        for kind in ("conv_block", "maxpool", "lstm", "dropout", "model_f8"):
            assert kind in out

    def test_synth_deterministic(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            assert main(["synth", "--out", str(tmp_path / name), "--n-normal", "5", "--n-attack", "9",
                         "--features", "8"]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_writes_only_declared_outputs(self, tmp_path, synth_csv):
        work = tmp_path / "work"
        work.mkdir()
        assert main(["train", "--data", str(synth_csv), "--model", str(work / "m.bin"),
                     "--out", str(work / "r.json"), "--epochs", "1", *TINY_FLAGS]) == 0
        assert files(work) == ["m.bin", "r.json"]

    def test_usage_errors(self, capsys):
        assert main([]) == 1
        assert main(["nonsense"]) == 1
        assert main(["train", "--data", "x"]) == 1

    def test_data_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,Label\n1,NORMAL\n2\n", encoding="utf-8")
        assert main(["train", "--data", str(bad), "--model", str(tmp_path / "m"), "--out",
                     str(tmp_path / "r")]) == 2

    def test_corrupt_model_exit_code(self, tmp_path, synth_csv):
        model = tmp_path / "m.bin"
        model.write_bytes(b"NOTAMODEL" * 4)
        assert main(["evaluate", "--model", str(model), "--data", str(synth_csv),
                     "--out", str(tmp_path / "e.json")]) == 2

    def test_divergence_exit_code(self, tmp_path, synth_csv):
        code = main(["train", "--data", str(synth_csv), "--model", str(tmp_path / "m"), "--out",
                     str(tmp_path / "r"), "--lr", "1e200", "--epochs", "3", *TINY_FLAGS])
        assert code == 3
