import os

from latticewave.metrics import load_prediction

from latticewave_detector.cli import main


class TestCli:
    def test_train_predict_round_trip(self, tiny_manifest, tmp_path, capsys):
        run = str(tmp_path / "run")
        code = main(
            ["train", "--manifest", tiny_manifest, "--out", run,
             "--epochs", "1", "--batch-size", "4"]
        )
        assert code == 0
        assert os.path.exists(os.path.join(run, "best.pt"))
        assert "best eval DSC" in capsys.readouterr().out

        preds = str(tmp_path / "preds")
        code = main(
            ["predict", "--manifest", tiny_manifest,
             "--checkpoint", os.path.join(run, "best.pt"), "--out", preds]
        )
        assert code == 0
        files = sorted(os.listdir(preds))
        assert files and all(f.endswith(".wprd") for f in files)
        grid = load_prediction(os.path.join(preds, files[0]))
        assert grid.probs.shape == (16, 16)

    def test_sweep_writes_table(self, tiny_manifest, tmp_path, capsys):
        out = str(tmp_path / "sweep")
        code = main(
            ["sweep", "--manifest", tiny_manifest, "--out", out,
             "--epochs", "1", "--batch-size", "4",
             "--alpha", "0.25", "0.75", "--gamma", "2.0"]
        )
        assert code == 0
        table = capsys.readouterr().out
        assert "alpha" in table and "IoU" in table
        with open(os.path.join(out, "sweep.txt")) as fh:
            stored = fh.read()
        assert stored.count("\n") >= 3
        for tag in ("a0.25_g2", "a0.75_g2"):
            assert os.path.exists(os.path.join(out, tag, "best.pt"))
            assert os.listdir(os.path.join(out, tag, "predictions"))
