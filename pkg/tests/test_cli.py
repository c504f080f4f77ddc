import csv
import hashlib
import json

import numpy as np
import pytest

from artn import autodiff as ad
from artn.cli import main
from artn.data import read_idx, read_sparse_bow
from artn.nn import load_checkpoint

SMALL = ["data.kind=blobs", "data.classes=3", "data.n_per_class=20", "data.dim=4",
         "shift.translation=[1.0, 1.0]", "model.feature_widths=[8, 8]", "model.classifier_hidden=8",
         "model.domain_hidden=8", "train.epochs=2", "train.batch_size=16"]


def sets(items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("ARTN_SEED", raising=False)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestTrain:
    def test_outputs_and_seed_recorded(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "-q", "--seed", "7", "--out", str(out)] + sets(SMALL)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["train.seed"] == 7
        assert manifest["metrics_sha256"] == sha(out / "metrics.csv")
        assert manifest["steps"] == 2 * 4
        rows = list(csv.reader((out / "metrics.csv").open()))
        assert rows[0][:3] == ["epoch", "step", "loss_c"] and len(rows) == 9
        arrays = load_checkpoint(out / "checkpoint.bin")
        assert {k.split(".")[0] for k in arrays} == {"g", "t", "c", "d"}
        assert "target_acc=" in capsys.readouterr().out

    def test_manifest_rerun_is_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["train", "-q", "--seed", "3", "--out", str(a)] + sets(SMALL)) == 0
        assert main(["train", "-q", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
        ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
        assert ma["config"] == mb["config"] and ma["datasets"] == mb["datasets"]

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ARTN_SEED", "12")
        assert main(["train", "-q", "--out", str(tmp_path)] + sets(SMALL)) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["config"]["train.seed"] == 12

    def test_typo_is_usage_error(self, tmp_path, capsys):
        code = main(["train", "-q", "--out", str(tmp_path), "--set", "lamda=0.6"])
        assert code == 2
        err = capsys.readouterr().err
        assert "lamda" in err and "train.lambda" in err
        assert not (tmp_path / "manifest.json").exists()

    def test_out_of_range_is_usage_error(self, tmp_path, capsys):
        assert main(["train", "-q", "--out", str(tmp_path), "--set", "train.beta=-1"]) == 2
        assert "train.beta" in capsys.readouterr().err

    def test_divergence_exit(self, tmp_path, capsys):
        with np.errstate(all="ignore"):
            code = main(["train", "-q", "--out", str(tmp_path)] + sets(SMALL + ["train.learning_rate=1e200"]))
        assert code == 1
        assert "step" in capsys.readouterr().err

    def test_missing_input_file(self, tmp_path, capsys):
        code = main(["train", "-q", "--out", str(tmp_path)] +
                    sets(["data.kind=idx", f'data.source_images="{tmp_path / "none.idx"}"',
                          f'data.target_images="{tmp_path / "none.idx"}"']))
        assert code == 2


class TestGradcheck:
    def test_all_pass(self, capsys):
        assert main(["gradcheck", "-q"]) == 0
        out = capsys.readouterr().out
        assert "relu" in out and "artn_loss" in out and "FAIL" not in out

    def test_single_op(self, capsys):
        assert main(["gradcheck", "matmul"]) == 0
        assert capsys.readouterr().out.startswith("matmul")

    def test_unknown_op(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "softmaxx"])
        assert exc.value.code == 2
        assert "unknown op" in capsys.readouterr().err

    def test_corrupted_backward_is_caught(self, monkeypatch, capsys):
        def bad_relu(x):
            mask = x.data > 0
            return ad._make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask * 1.01,))
        monkeypatch.setattr(ad, "relu", bad_relu)
        assert main(["gradcheck", "relu"]) == 1
        assert "relu" in capsys.readouterr().err


class TestGendata:
    def test_idx_round_trip_and_determinism(self, tmp_path):
        args = ["gendata", "-q"] + sets(["data.kind=blobs", "data.classes=3", "data.n_per_class=50",
                                         "data.dim=4", "shift.translation=[2.0]"])
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        for name in ("source-images.idx", "source-labels.idx", "target-images.idx", "target-labels.idx"):
            assert sha(a / name) == sha(b / name)
        ds = read_idx(a / "source-images.idx", a / "source-labels.idx")
        assert ds.features.shape == (150, 4)
        assert np.bincount(ds.class_labels).tolist() == [50, 50, 50]
        desc = json.loads((a / "description.json").read_text())
        assert desc["rows"] == {"source": 150, "target": 150}
        assert desc["files"]["source-images.idx"] == sha(a / "source-images.idx")

    def test_generated_idx_trains(self, tmp_path):
        data = tmp_path / "data"
        assert main(["gendata", "-q", "--out", str(data)] +
                    sets(["data.classes=2", "data.n_per_class=20", "data.dim=4"])) == 0
        model = [s for s in SMALL if s.startswith(("model.", "train."))]
        code = main(["train", "-q", "--config", str(data / "data.toml"), "--out", str(tmp_path / "run")] +
                    sets(model))
        assert code == 0

    def test_bow(self, tmp_path):
        assert main(["gendata", "-q", "--out", str(tmp_path)] +
                    sets(["gendata.format=bow", "data.kind=moons", "data.n_samples=40"])) == 0
        ds = read_sparse_bow(tmp_path / "source.txt", 2)
        assert len(ds) == 40

    def test_bow_rejects_multiclass(self, tmp_path):
        assert main(["gendata", "-q", "--out", str(tmp_path)] +
                    sets(["gendata.format=bow", "data.classes=3"])) == 2

    def test_unwritable_destination(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["gendata", "-q", "--out", str(blocker / "sub")]) == 2


class TestSweep:
    def test_lambda_table(self, tmp_path):
        code = main(["sweep", "lambda", "-q", "--out", str(tmp_path)] +
                    sets(SMALL + ["sweep.seeds=[1]"]))
        assert code == 0
        rows = list(csv.DictReader((tmp_path / "sweep_lambda.csv").open()))
        assert [float(r["lambda"]) for r in rows] == [0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
        assert all(r["status"] == "ok" for r in rows)
        long_rows = list(csv.DictReader((tmp_path / "sweep_lambda_long.csv").open()))
        assert {r["metric"] for r in long_rows} == {"target_acc", "source_only_acc"}

    def test_ablation_needs_positive_beta(self, tmp_path):
        code = main(["sweep", "ablation", "-q", "--out", str(tmp_path)] + sets(SMALL + ["train.beta=0"]))
        assert code == 2

    def test_noise(self, tmp_path):
        code = main(["sweep", "noise", "-q", "--out", str(tmp_path)] +
                    sets(SMALL + ["sweep.seeds=[1]", "sweep.stds=[0.5]", 'sweep.methods=["source_only", "artn"]']))
        assert code == 0
        rows = list(csv.DictReader((tmp_path / "sweep_noise.csv").open()))
        assert len(rows) == 1 and "artn_improvement_pct" in rows[0]
