import json

import pytest

from run_vqa import main


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestDatagen:
    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            args = ["datagen", "--style", "cholec", "--sequences", "2", "--frames", "2", "--image-size", "32",
                    "--seed", "5", "--out", str(tmp_path / name), "--deterministic"]
            assert main(args) == 0
        a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
        assert a == b
        assert "manifest.json" in a and "frames/seq01/frame0000.png" in a

    def test_bad_sizes_fail_with_one_line(self, tmp_path, capsys):
        assert main(["datagen", "--sequences", "0", "--out", str(tmp_path)]) == 1
        assert capsys.readouterr().err.strip().startswith("error: config:")


class TestParams:
    def test_writes_tables(self, tmp_path):
        assert main(["params", "--profile", "test", "--output-dir", str(tmp_path), "--deterministic"]) == 0
        report = json.loads((tmp_path / "params.json").read_text(encoding="utf-8"))
        assert set(report["tables"]) == {"baseline", "resmlp"}
        assert (tmp_path / "parameters.png").exists()
        assert "**Generated:**" not in (tmp_path / "report.md").read_text(encoding="utf-8")

    def test_unknown_override(self, tmp_path, capsys):
        assert main(["params", "--set", "depth=3", "--output-dir", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error: config:") and "depth" in err
        assert err.count("\n") == 1


class TestErrors:
    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.svqa")]) == 1
        assert capsys.readouterr().err.startswith("error: missing-artifact: checkpoint not found")

    def test_missing_dataset(self, tmp_path, capsys):
        args = ["train", "--dataset", str(tmp_path / "nowhere"), "--profile", "test", "--output-dir", str(tmp_path)]
        assert main(args) == 1
        assert capsys.readouterr().err.startswith("error: missing-artifact:")


class TestPipeline:
    @pytest.fixture(scope="class")
    def trained(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("cli")
        data, out = root / "data", root / "train"
        assert main(["datagen", "--sequences", "3", "--frames", "2", "--image-size", "32", "--out", str(data)]) == 0
        assert main(["tokenizer-train", "--dataset", str(data), "--min-freq", "1", "--vocab-size", "300"]) == 0
        assert main([
            "train", "--dataset", str(data), "--profile", "test", "--output-dir", str(out), "--deterministic",
            "--set", "test_sequences=1", "--set", "max_steps=1", "--set", "max_samples=4",
        ]) == 0
        return data, out

    def test_training_outputs(self, trained):
        _, out = trained
        for name in ("best.svqa", "final.svqa", "train_log.csv", "training_loss.png"):
            assert (out / name).exists()

    def test_eval(self, trained, tmp_path):
        _, out = trained
        assert main(["eval", "--checkpoint", str(out / "best.svqa"), "--output-dir", str(tmp_path),
                     "--deterministic"]) == 0
        result = json.loads((tmp_path / "eval.json").read_text(encoding="utf-8"))
        assert result["mode"] == "classification" and result["split"] == "test"
        assert (tmp_path / "eval.csv").read_text(encoding="utf-8").startswith("split,accuracy,recall,f_score\n")

    def test_eval_rejects_structural_change(self, trained, tmp_path, capsys):
        _, out = trained
        assert main(["eval", "--checkpoint", str(out / "best.svqa"), "--set", "patches=3",
                     "--output-dir", str(tmp_path)]) == 1
        assert capsys.readouterr().err.startswith("error: config-mismatch: differing fields: patches")

    def test_ask(self, trained, capsys):
        data, out = trained
        frame = str(data / "frames" / "seq03" / "frame0000.png")
        assert main(["ask", "--checkpoint", str(out / "best.svqa"), "--image", frame,
                     "--question", "what organ is being operated?", "--top-k", "2"]) == 0
        assert "Probability" in capsys.readouterr().out

    def test_ask_frame_count(self, trained, capsys):
        data, out = trained
        frame = str(data / "frames" / "seq03" / "frame0000.png")
        assert main(["ask", "--checkpoint", str(out / "best.svqa"), "--image", frame, "--image", frame,
                     "--question", "where is grasper located?"]) == 1
        assert capsys.readouterr().err.startswith("error: contract:")
