import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from eventrpg.cli import read_dataset, run, ValidationError
from eventrpg.events import read_events_file

from conftest import tree


@pytest.fixture
def ws(workspace):
    return workspace


def _run(capsys, *argv):
    code = run([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestConvert:
    def test_csv_bin_round_trip(self, ws, tmp_path, capsys):
        src = ws / "data" / "s000.csv"
        assert _run(capsys, "convert", "--input", src, "--out", tmp_path / "a.bin", "--width", 16,
                    "--height", 16)[0] == 0
        assert _run(capsys, "convert", "--input", tmp_path / "a.bin", "--out", tmp_path / "a.csv")[0] == 0
        assert (tmp_path / "a.csv").read_bytes() == src.read_bytes()

    def test_frame_dump(self, ws, tmp_path, capsys):
        code, _, _ = _run(capsys, "convert", "--input", ws / "data" / "s001.bin", "--out", tmp_path / "f.npy",
                          "--time-steps", 3, "--frame-height", 8, "--frame-width", 8)
        assert code == 0
        f = np.load(tmp_path / "f.npy")
        assert f.shape == (3, 2, 8, 8) and f.sum() == len(read_events_file(ws / "data" / "s001.bin"))

    def test_frame_dump_needs_time_steps(self, ws, tmp_path, capsys):
        code, _, err = _run(capsys, "convert", "--input", ws / "data" / "s001.bin", "--out", tmp_path / "f.npy")
        assert code == 1 and "--time-steps" in err

    def test_refuses_to_overwrite_input(self, ws, capsys):
        src = ws / "data" / "s001.bin"
        before = src.read_bytes()
        code, _, err = _run(capsys, "convert", "--input", src, "--out", src)
        assert code == 1 and "overwrite" in err and src.read_bytes() == before

    def test_bad_extension(self, ws, tmp_path, capsys):
        assert _run(capsys, "convert", "--input", ws / "data" / "s001.bin", "--out", tmp_path / "x.txt")[0] == 1


class TestSaliency:
    def test_t1_modes_byte_identical(self, ws, tmp_path, capsys):
        for mode in ("slrp", "sltrp"):
            code, _, _ = _run(capsys, "saliency", "--model", ws / "model.json", "--input", ws / "data" / "s001.bin",
                              "--mode", mode, "--time-steps", 1, "--out", tmp_path / mode)
            assert code == 0
        for name in ("map.pgm", "map.csv"):
            assert (tmp_path / "slrp" / name).read_bytes() == (tmp_path / "sltrp" / name).read_bytes()

    def test_sltrp_writes_per_time_sequence(self, ws, tmp_path, capsys):
        code, out, _ = _run(capsys, "saliency", "--model", ws / "model.json", "--input", ws / "data" / "s002.csv",
                            "--mode", "sltrp", "--kind", "relcam", "--out", tmp_path, "--target", 1)
        assert code == 0 and "box" in out
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "map.csv", "map.pgm", "map_t000.pgm", "map_t001.pgm", "map_t002.pgm", "map_t003.pgm"]

    def test_target_range(self, ws, tmp_path, capsys):
        code, _, err = _run(capsys, "saliency", "--model", ws / "model.json", "--input",
                            ws / "data" / "s001.bin", "--target", 5, "--out", tmp_path)
        assert code == 1 and "--target" in err

    def test_missing_model(self, ws, tmp_path, capsys):
        code, _, err = _run(capsys, "saliency", "--model", tmp_path / "nope.json", "--input",
                            ws / "data" / "s001.bin", "--out", tmp_path / "o")
        assert code == 1 and "nope.json" in err and not (tmp_path / "o").exists()


class TestAugment:
    def test_outputs_and_manifest(self, ws, tmp_path, capsys):
        code, _, _ = _run(capsys, "augment", "--config", ws / "aug.json", "--in-dir", ws / "data",
                          "--out-dir", tmp_path / "o", "--seed", 7)
        assert code == 0
        with open(tmp_path / "o" / "manifest.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["file", "class_0_weight", "class_1_weight"]
        assert len(rows) == 13
        for row in rows[1:]:
            w = np.array([float(v) for v in row[1:]])
            assert w.min() >= 0 and abs(w.sum() - 1) < 1e-12
            assert (tmp_path / "o" / row[0]).is_file()
        prov = [json.loads(l) for l in (tmp_path / "o" / "provenance.jsonl").read_text().splitlines()]
        assert len(prov) == 12
        for p, row in zip(prov, rows[1:]):
            assert p["file"] == row[0] and p["master_seed"] == 7 and len(p["config_sha256"]) == 64
            assert p["source"].startswith("s") and "policy" in p["policy"]
        assert any("partner" in p for p in prov)

    def test_env_seed_fallback(self, ws, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("EVENTRPG_SEED", "7")
        _run(capsys, "augment", "--config", ws / "aug.json", "--in-dir", ws / "data", "--out-dir", tmp_path / "a")
        monkeypatch.delenv("EVENTRPG_SEED")
        _run(capsys, "augment", "--config", ws / "aug.json", "--in-dir", ws / "data", "--out-dir", tmp_path / "b",
             "--seed", 7)
        _run(capsys, "augment", "--config", ws / "aug.json", "--in-dir", ws / "data", "--out-dir", tmp_path / "c",
             "--seed", 8)
        assert tree(tmp_path / "a") == tree(tmp_path / "b") != tree(tmp_path / "c")

    def test_bad_env_seed(self, ws, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("EVENTRPG_SEED", "seven")
        code, _, err = _run(capsys, "augment", "--config", ws / "aug.json", "--in-dir", ws / "data",
                            "--out-dir", tmp_path / "a")
        assert code == 1 and "EVENTRPG_SEED" in err

    def test_inputs_untouched(self, ws, tmp_path, capsys):
        before = tree(ws / "data")
        _run(capsys, "augment", "--config", ws / "aug.json", "--in-dir", ws / "data", "--out-dir", tmp_path / "o",
             "--seed", 1)
        assert tree(ws / "data") == before

    def test_schema_violation_names_the_key(self, ws, tmp_path, capsys):
        (tmp_path / "bad.json").write_text(json.dumps({"model": str(ws / "model.json"), "mixprob": 0.5}))
        code, _, err = _run(capsys, "augment", "--config", tmp_path / "bad.json", "--in-dir", ws / "data",
                            "--out-dir", tmp_path / "o")
        assert code == 1 and "mixprob" in err and not (tmp_path / "o").exists()

    def test_model_flag_overrides_config(self, ws, tmp_path, capsys):
        (tmp_path / "cfg.json").write_text("{}")
        code, _, _ = _run(capsys, "augment", "--config", tmp_path / "cfg.json", "--model", ws / "model.json",
                          "--in-dir", ws / "data", "--out-dir", tmp_path / "o", "--seed", 2)
        assert code == 0


class TestEval:
    def test_csv_written(self, ws, tmp_path, capsys):
        code, out, _ = _run(capsys, "eval", "--model", ws / "model.json", "--in-dir", ws / "data",
                            "--out", tmp_path / "e.csv")
        assert code == 0 and "A.D." in out
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert len(lines) == 14 and lines[-1].startswith("summary,")

    def test_stdout(self, ws, capsys):
        code, out, _ = _run(capsys, "eval", "--model", ws / "model.json", "--in-dir", ws / "data",
                            "--mode", "sltrp", "--kind", "cam")
        assert code == 0 and out.startswith("sample,")

    def test_label_outside_model(self, ws, tmp_path, capsys):
        d = tmp_path / "d"
        d.mkdir()
        (d / "a.csv").write_bytes((ws / "data" / "s000.csv").read_bytes())
        (d / "labels.csv").write_text("file,label\na.csv,4\n")
        code, _, err = _run(capsys, "eval", "--model", ws / "model.json", "--in-dir", d)
        assert code == 1 and "class 4" in err


class TestTrain:
    def test_writes_checkpoint_and_log(self, ws, tmp_path, capsys):
        code, out, _ = _run(capsys, "train", "--spec", ws / "spec.json", "--config", ws / "train.json",
                            "--out-dir", tmp_path)
        assert code == 0 and "epoch   3" in out
        assert {p.name for p in tmp_path.iterdir()} == {"model.json", "model.bin", "train_log.csv"}
        assert len((tmp_path / "train_log.csv").read_text().splitlines()) == 4

    def test_with_augmentation(self, ws, tmp_path, capsys):
        code, _, _ = _run(capsys, "train", "--spec", ws / "spec.json", "--config", ws / "train.json",
                          "--augment-config", ws / "aug_train.json", "--out-dir", tmp_path, "--quiet")
        assert code == 0

    def test_bad_config_key(self, ws, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"epochz": 3}))
        code, _, err = _run(capsys, "train", "--spec", ws / "spec.json", "--config", tmp_path / "c.json",
                            "--out-dir", tmp_path / "o")
        assert code == 1 and "epochz" in err


class TestSurface:
    def test_selftest_quick(self, capsys):
        code, out, _ = _run(capsys, "selftest", "--quick")
        assert code == 0
        assert out.count("[PASS]") == 8 and "max error" in out

    def test_unknown_subcommand(self, capsys):
        assert _run(capsys, "frobnicate")[0] == 1

    def test_unknown_flag(self, capsys):
        code, _, err = _run(capsys, "selftest", "--fast")
        assert code == 1 and "--fast" in err

    def test_missing_required_flag(self, capsys):
        code, _, err = _run(capsys, "saliency", "--input", "x")
        assert code == 1 and "--model" in err

    def test_help(self, capsys):
        assert _run(capsys, "--help")[0] == 0

    def test_runtime_failure_is_exit_2(self, ws, tmp_path, capsys, monkeypatch):
        import eventrpg.cli as cli

        def boom(*a, **k):
            raise RuntimeError("disk on fire")
        monkeypatch.setattr(cli, "export_map", boom)
        code, _, err = _run(capsys, "saliency", "--model", ws / "model.json", "--input",
                            ws / "data" / "s001.bin", "--out", tmp_path)
        assert code == 2 and "disk on fire" in err

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "eventrpg", "--version"], capture_output=True, text=True)
        assert r.returncode == 0 and "eventrpg" in r.stdout


class TestReadDataset:
    def test_soft_labels_and_shared_canvas(self, tmp_path):
        (tmp_path / "a.csv").write_text("x,y,t,p\n1,1,0,1\n")
        (tmp_path / "b.csv").write_text("x,y,t,p\n7,3,0,0\n")
        (tmp_path / "labels.csv").write_text("file,class_0_weight,class_1_weight\na.csv,0.25,0.75\nb.csv,1.0,0.0\n")
        names, streams, labels = read_dataset(str(tmp_path))
        assert names == ["a.csv", "b.csv"]
        assert {(s.width, s.height) for s in streams} == {(8, 4)}
        np.testing.assert_array_equal(labels[0], [0.25, 0.75])

    @pytest.mark.parametrize("body", ["file,label\n../x.csv,0\n", "file,label\nmissing.csv,0\n",
                                      "name,label\na.csv,0\n", "file,label\na.csv,zero\n",
                                      "file,c0,c1\na.csv,0.5,0.6\n", "file,label\n"])
    def test_rejects(self, tmp_path, body):
        (tmp_path / "a.csv").write_text("1,1,0,1\n")
        (tmp_path / "labels.csv").write_text(body)
        with pytest.raises(ValidationError):
            read_dataset(str(tmp_path))
