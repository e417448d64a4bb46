"""RunConfig handling and the command-line front end."""
import csv

import numpy as np
import pytest
import yaml

from catsts.cli import main
from catsts.config import ABLATIONS, apply_ablation, config_from_dict, load_config, prepare
from catsts.data import load_csv, multix_offsets
from catsts.errors import ConfigError

TINY = {
    "dataset": {"generator": "multi", "args": {"T": 500}},
    "horizons": [8],
    "seed": 1,
    "model": {"bank": [{"kind": "lin", "n": 2}, {"kind": "emb", "n": 2}], "mlp_ratio": 1},
    "train": {"L_I": 32, "epochs": 2, "patience": 2, "batch": 16, "batches_per_epoch": 2, "lr": 1e-3},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


class TestConfig:
    def test_minimal(self):
        cfg = config_from_dict({"dataset": "multi", "L_P": 96})
        assert cfg.horizons == [96]
        assert cfg.train_config(96).lr == 5e-5
        assert cfg.train_config(96).patience == 30
        assert cfg.model.beta_cont == 1.0

    def test_csv_dataset_shorthand(self):
        cfg = config_from_dict({"dataset": "data/etth2.csv", "L_P": 96})
        assert cfg.dataset.source == "csv" and cfg.dataset.label == "etth2"

    @pytest.mark.parametrize(
        "bad",
        [
            {"datasets": "multi"},
            {"dataset": {"generator": "sine"}},
            {"model": {"predictor": "rnn"}},
            {"train": {"lr": -1}},
            {"train": {"beta_cont": 0.5}},
            {"horizons": []},
        ],
    )
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            config_from_dict(bad)

    @pytest.mark.parametrize("name", sorted(ABLATIONS))
    def test_ablation_only_changes_named_flags(self, name):
        base = config_from_dict(TINY)
        d0, d1 = base.to_dict(), apply_ablation(base, name).to_dict()
        changed = {k for k in d0["model"] if d0["model"][k] != d1["model"][k]}
        assert changed == set(ABLATIONS[name])
        assert {k: v for k, v in d0.items() if k != "model"} == {k: v for k, v in d1.items() if k != "model"}

    def test_unknown_ablation(self):
        with pytest.raises(ConfigError):
            apply_ablation(config_from_dict(TINY), "no-everything")

    def test_prepare_standardizes_train(self):
        frame, _ = prepare(config_from_dict(TINY))
        train = frame.values[: frame.split_bounds[0]]
        np.testing.assert_allclose(train.mean(0), 0, atol=1e-10)

    def test_dump_reloads(self, tmp_path):
        cfg = config_from_dict(TINY)
        (tmp_path / "c.yaml").write_text(cfg.dump())
        assert load_config(tmp_path / "c.yaml").to_dict() == cfg.to_dict()


class TestGen:
    def test_multi(self, tmp_path):
        out = tmp_path / "m.csv"
        assert main(["gen", "--multi", "--seed", "1", "--T", "400", "-o", str(out)]) == 0
        assert load_csv(out).C == 8
        assert (tmp_path / "m.manifest.json").exists()

    def test_refuses_overwrite(self, tmp_path, capsys):
        out = tmp_path / "m.csv"
        main(["gen", "--T", "300", "-o", str(out)])
        assert main(["gen", "--T", "300", "-o", str(out)]) == 2
        assert "--force" in capsys.readouterr().err
        assert main(["gen", "--T", "300", "-o", str(out), "--force"]) == 0

    def test_multix(self, tmp_path, capsys):
        out = tmp_path / "x.csv"
        assert main(["gen", "--multix", "20", "--seed", "1", "--T", "1000", "-o", str(out)]) == 0
        f = load_csv(out)
        assert f.C == 20 and f.manifest["offsets"] == multix_offsets(20)

    def test_shifting_toy(self, tmp_path):
        out = tmp_path / "s.csv"
        assert main(["gen", "--shifting-toy", "--T", "400", "-o", str(out)]) == 0
        v = load_csv(out).values
        np.testing.assert_array_equal(v[96:, 1], v[:-96, 0])


class TestRuns:
    def test_train_eval_table_plot(self, tiny_config, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--config", str(tiny_config), "--out", str(run)]) == 0
        for name in ("config.yaml", "resolved_config.yaml", "seed", "manifest.json", "results.csv",
                     "model_L8.ckpt", "history_L8.csv"):
            assert (run / name).exists(), name
        first = (run / "results.csv").read_bytes()
        assert main(["eval", str(run)]) == 0
        assert (run / "results.csv").read_bytes() == first
        assert main(["table", str(run), "--out", str(tmp_path / "t.csv")]) == 0
        assert "Avg%" in capsys.readouterr().out
        assert main(["plot", str(run), "--window", "3", "--channels", "0,1"]) == 0
        plots = run / "plots"
        assert (plots / "window3_ch0.svg").read_text().lstrip().startswith("<?xml")
        with open(plots / "diagnostics_w3.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["channel_kind", "channel_index", "t", "input_value", "gate", "mask",
                          "first_stage", "final", "truth"]

    def test_refuses_existing_run(self, tiny_config, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        (run / "x").write_text("")
        assert main(["train", "--config", str(tiny_config), "--out", str(run)]) == 2

    def test_ablate_and_predictor_flags(self, tiny_config, tmp_path):
        run = tmp_path / "run"
        args = ["train", "--config", str(tiny_config), "--out", str(run), "--ablate", "no-shortcut",
                "--predictor", "mean", "--epochs", "1"]
        assert main(args) == 0
        resolved = yaml.safe_load((run / "resolved_config.yaml").read_text())
        assert resolved["model"]["shortcut"] is False
        assert resolved["model"]["predictor"] == "mean"
        assert resolved["train"]["epochs"] == 1
        assert "Mean+CATS" in (run / "results.csv").read_text()

    def test_params(self, capsys):
        assert main(["params", "--channels", "7"]) == 0
        out = capsys.readouterr().out
        assert "2,353,056" in out and "2,880" in out

    def test_exit_codes(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("model: {predictor: rnn}\n")
        assert main(["train", "--config", str(bad)]) == 2
        missing = tmp_path / "missing.yaml"
        missing.write_text("dataset: {source: csv, path: /nonexistent.csv}\nL_P: 8\n")
        assert main(["train", "--config", str(missing), "--out", str(tmp_path / "r")]) == 3
        assert main(["eval", str(tmp_path)]) == 3
