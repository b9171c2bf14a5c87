import csv
import json

import numpy as np
import pytest

from racam import __version__
from racam.cli import main
from racam.data import load_dataset, read_mask, read_pgm, write_pgm
from racam.models import load_model, tiny_vgg_init

SMALL = ["--count", "40", "--height", "32", "--width", "64"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset plus a briefly trained classifier, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("run")
    data, out = root / "data", root / "out"
    assert main(["gen-data", "--out", str(data), "--seed", "3", *SMALL]) == 0
    assert main(["train-cls", "--data", str(data), "--out", str(out), "--epochs", "1", "--seed", "3"]) == 0
    return data, out


class TestGenData:
    def test_counts_and_determinism(self, tmp_path, capsys):
        code, text, _ = run(capsys, "gen-data", "--out", tmp_path / "a", "--seed", 7, *SMALL)
        assert code == 0 and "wrote 40 samples" in text
        run(capsys, "gen-data", "--out", tmp_path / "b", "--seed", 7, *SMALL)
        for f in sorted((tmp_path / "a").rglob("*.pgm")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
        assert (tmp_path / "a" / "labels.csv").read_bytes() == (tmp_path / "b" / "labels.csv").read_bytes()

    def test_defect_rate(self, tmp_path, capsys):
        run(capsys, "gen-data", "--out", tmp_path, "--count", 300, "--defect-rate", 0.2,
            "--height", 16, "--width", 16)
        assert sum(s.label for s in load_dataset(tmp_path)) == 60

    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"count": 12, "height": 16, "width": 16, "seed": 1}))
        run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "d", "--count", 5)
        assert len(load_dataset(tmp_path / "d")) == 5

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"colour": 3}))
        code, _, err = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "d")
        assert code != 0 and "colour" in err

    def test_invalid_flag_value(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--height", 30)
        assert code != 0 and "multiples of 4" in err

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(capsys, "gen-data", "--out", blocker / "sub", *SMALL)
        assert code != 0 and str(blocker) in err


class TestTraining:
    def test_classifier_outputs(self, workdir, capsys):
        data, out = workdir
        assert (out / "models" / "classifier.rcmw").is_file()
        report = json.loads((out / "reports" / "train_cls.json").read_text())
        assert report["version"] == __version__
        assert report["config"]["data"] == str(data)
        assert report["train"]["lr"] == 0.0005 and report["train"]["momentum"] == 0.9
        assert report["train"]["batch"] == 4
        assert len(report["history"]) == 1

    def test_defaults_echoed(self, workdir, tmp_path, capsys):
        data, _ = workdir
        code, text, _ = run(capsys, "train-cls", "--data", data, "--out", tmp_path, "--epochs", 0)
        assert code == 0 and "lr=0.0005 momentum=0.9 batch=4" in text

    def test_lr_zero_keeps_init(self, workdir, tmp_path, capsys):
        data, _ = workdir
        run(capsys, "train-cls", "--data", data, "--out", tmp_path, "--epochs", 1, "--lr", 0, "--seed", 5)
        trained, ref = load_model(tmp_path / "models" / "classifier.rcmw"), tiny_vgg_init(5)
        assert all(trained.params[k].tobytes() == ref.params[k].tobytes() for k in ref.params)

    def test_rerun_identical_bytes(self, workdir, tmp_path, capsys):
        data, out = workdir
        run(capsys, "train-cls", "--data", data, "--out", tmp_path, "--epochs", 1, "--seed", 3)
        assert (tmp_path / "models" / "classifier.rcmw").read_bytes() == \
            (out / "models" / "classifier.rcmw").read_bytes()

    def test_missing_dataset(self, tmp_path, capsys):
        code, _, err = run(capsys, "train-cls", "--data", tmp_path / "nope", "--out", tmp_path)
        assert code != 0 and "labels.csv" in err

    def test_data_flag_required(self, tmp_path, capsys):
        code, _, err = run(capsys, "train-cls", "--out", tmp_path)
        assert code != 0 and "--data" in err


class TestCam:
    def test_manifest_and_peak(self, workdir, tmp_path, capsys):
        data, out = workdir
        model = out / "models" / "classifier.rcmw"
        code, _, _ = run(capsys, "cam", "--data", data, "--out", tmp_path, "--model", model, "--split", "all")
        assert code == 0
        manifest = json.loads((tmp_path / "heatmaps" / "manifest.json").read_text())
        entries = manifest["heatmaps"]
        assert len(entries) == 40
        for sid, e in entries.items():
            assert e["method"] == "ra-cam" and e["delta"] == 50
            assert e["layers"] == ["s1.act2", "s2.act2", "s3.act2"]
            raw = np.round(read_pgm(tmp_path / "heatmaps" / e["file"]) * 255)
            assert raw.max() in (0, 255)

    def test_unknown_method(self, workdir, tmp_path, capsys):
        data, out = workdir
        code, _, err = run(capsys, "cam", "--data", data, "--out", out, "--method", "magic-cam")
        assert code != 0 and "magic-cam" in err and "grad-cam" in err

    def test_delta_zero_matches_layer_cam(self, tmp_path, capsys):
        # final activation feeds the head directly, so the two methods coincide
        data = tmp_path / "data"
        main(["gen-data", "--out", str(data), "--count", "6", "--height", "16", "--width", "32"])
        from racam.models import save_model

        save_model(tiny_vgg_init(2, final_pool=False), tmp_path / "m.rcmw")
        for method, delta, sub in (("ra-cam", 0, "a"), ("layer-cam", 50, "b")):
            run(capsys, "cam", "--data", data, "--out", tmp_path / sub, "--model", tmp_path / "m.rcmw",
                "--method", method, "--delta", delta, "--layers", "s3.act2", "--split", "all")
        for f in sorted((tmp_path / "a" / "heatmaps").glob("*.pgm")):
            a = read_pgm(f)
            b = read_pgm(tmp_path / "b" / "heatmaps" / f.name)
            assert np.abs(a - b).max() <= 1 / 255 + 1e-7

    def test_jobs_do_not_change_output(self, workdir, tmp_path, capsys):
        data, out = workdir
        model = out / "models" / "classifier.rcmw"
        for jobs, sub in ((1, "a"), (3, "b")):
            run(capsys, "cam", "--data", data, "--out", tmp_path / sub, "--model", model, "--jobs", jobs)
        for f in sorted((tmp_path / "a" / "heatmaps").glob("*.pgm")):
            assert f.read_bytes() == (tmp_path / "b" / "heatmaps" / f.name).read_bytes()

    def test_missing_model(self, workdir, tmp_path, capsys):
        data, _ = workdir
        code, _, err = run(capsys, "cam", "--data", data, "--out", tmp_path)
        assert code != 0 and "classifier.rcmw" in err


def write_heatmaps(hdir, maps):
    hdir.mkdir(parents=True)
    entries = {}
    for sid, m in maps.items():
        write_pgm(m, hdir / f"{sid}.pgm")
        entries[sid] = {"file": f"{sid}.pgm"}
    (hdir / "manifest.json").write_text(json.dumps({"heatmaps": entries}))


class TestPseudoLabel:
    def test_blank_and_two_level(self, tmp_path, capsys):
        two = np.full((1, 8, 8), 0.1, np.float32)
        two[0, 2:4, 3:6] = 0.9
        write_heatmaps(tmp_path / "h", {"blank": np.zeros((1, 8, 8)), "two": two})
        code, _, _ = run(capsys, "pseudo-label", "--out", tmp_path, "--heatmaps", tmp_path / "h", "--no-gate")
        assert code == 0
        assert not read_mask(tmp_path / "pseudo_masks" / "blank.pgm").any()
        np.testing.assert_array_equal(read_mask(tmp_path / "pseudo_masks" / "two.pgm"), (two > 0.5).astype(np.uint8))

    def test_gating_empties_negatives(self, workdir, tmp_path, capsys):
        data, out = workdir
        samples = load_dataset(data)
        model = load_model(out / "models" / "classifier.rcmw")
        m = model.copy()
        m.params["fc.weight"][:] = 0
        m.params["fc.bias"][:] = [1.0, 0.0]  # always predicts defect-free
        from racam.models import save_model

        save_model(m, tmp_path / "neg.rcmw")
        two = np.full((1, 32, 64), 0.1, np.float32)
        two[0, 5:9, 10:20] = 0.9
        write_heatmaps(tmp_path / "h", {samples[0].id: two})
        code, _, _ = run(capsys, "pseudo-label", "--out", tmp_path, "--heatmaps", tmp_path / "h", "--data", data,
                         "--model", tmp_path / "neg.rcmw")
        assert code == 0
        assert not read_mask(tmp_path / "pseudo_masks" / f"{samples[0].id}.pgm").any()

    def test_missing_manifest(self, tmp_path, capsys):
        code, _, err = run(capsys, "pseudo-label", "--out", tmp_path, "--no-gate")
        assert code != 0 and "manifest.json" in err

    def test_heatmap_id_not_in_dataset(self, workdir, tmp_path, capsys):
        data, out = workdir
        write_heatmaps(tmp_path / "h", {"ghost": np.zeros((1, 32, 64))})
        code, _, err = run(capsys, "pseudo-label", "--out", out, "--heatmaps", tmp_path / "h", "--data", data)
        assert code != 0 and "ghost" in err


class TestEval:
    def test_self_evaluation(self, workdir, capsys):
        data, _ = workdir
        code, text, _ = run(capsys, "eval", "--data", data, "--out", data.parent / "self",
                            "--pred", data / "masks", "--split", "all", "--name", "gt")
        assert code == 0
        assert text.splitlines()[1].split()[1:] == ["100.00"] * 4
        report = json.loads((data.parent / "self" / "reports" / "eval_gt.json").read_text())
        assert report["config"]["split"] == "all" and report["version"] == __version__

    def test_unmatched_id(self, workdir, tmp_path, capsys):
        data, _ = workdir
        pred = tmp_path / "pred"
        pred.mkdir()
        for f in (data / "masks").glob("*.pgm"):
            (pred / f.name).write_bytes(f.read_bytes())
        (pred / "intruder.pgm").write_bytes((data / "masks" / f.name).read_bytes())
        code, _, err = run(capsys, "eval", "--data", data, "--out", tmp_path, "--pred", pred, "--split", "all")
        assert code != 0 and "intruder" in err

    def test_missing_prediction(self, workdir, tmp_path, capsys):
        data, _ = workdir
        (tmp_path / "pred").mkdir()
        code, _, err = run(capsys, "eval", "--data", data, "--out", tmp_path, "--pred", tmp_path / "pred")
        assert code != 0 and "no mask for id" in err


class TestEndToEnd:
    def test_stage_two_and_sweep(self, workdir, tmp_path, capsys):
        data, out = workdir
        model = out / "models" / "classifier.rcmw"
        assert main(["cam", "--data", str(data), "--out", str(tmp_path), "--model", str(model),
                     "--split", "all", "--method", "grad-cam"]) == 0
        assert main(["pseudo-label", "--data", str(data), "--out", str(tmp_path), "--model", str(model)]) == 0
        assert main(["train-seg", "--data", str(data), "--out", str(tmp_path), "--epochs", "1"]) == 0
        assert (tmp_path / "models" / "segmenter.rcmw").is_file()
        capsys.readouterr()
        code, text, _ = run(capsys, "eval", "--data", data, "--out", tmp_path, "--segmenter",
                            tmp_path / "models" / "segmenter.rcmw", "--scope", "full")
        assert code == 0 and text.splitlines()[1].startswith("segmenter")
        code, text, _ = run(capsys, "sweep-delta", "--data", data, "--out", tmp_path, "--model", model,
                            "--deltas", "50,0,95")
        assert code == 0
        with open(tmp_path / "sweeps" / "delta_ra-cam.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["delta"]) for r in rows] == [0, 50, 95]
        assert set(rows[0]) == {"delta", "train_iou", "test_iou"}
        first = (tmp_path / "sweeps" / "delta_ra-cam.csv").read_bytes()
        run(capsys, "sweep-delta", "--data", data, "--out", tmp_path, "--model", model, "--deltas", "50,0,95")
        assert (tmp_path / "sweeps" / "delta_ra-cam.csv").read_bytes() == first
