import json

import numpy as np
import pytest
from PIL import Image

from smokegen.cli import main
from smokegen.corpus import BinaryMask, Manifest, SmokeSample, load_mask, mask_to_label, save_mask


@pytest.fixture()
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def _write_config(tmp_path, body=""):
    path = tmp_path / "config.toml"
    path.write_text(body, encoding="utf-8")
    return str(path)


def _tiny_manifest(tmp_path, n=3):
    root = tmp_path / "data"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir(parents=True)
    rng = np.random.default_rng(0)
    records = []
    for i in range(n):
        arr = (rng.random((12, 12)) * 255).astype(np.uint8)
        Image.fromarray(arr, "L").save(root / "images" / f"s{i}.png")
        bits = np.zeros((12, 12), dtype=np.uint8)
        bits[3:9, 2 : 6 + i] = 1
        save_mask(BinaryMask(bits), root / "masks" / f"s{i}.png")
        records.append(
            SmokeSample(f"s{i}", f"images/s{i}.png", "a plume over trees", "synthetic", "train", f"masks/s{i}.png")
        )
    manifest = Manifest(records)
    manifest.save(root / "manifest.jsonl")
    return root


class TestExitCodes:
    def test_validate_good_config(self, workdir):
        cfg = _write_config(workdir, "[global]\nseed = 3\n")
        assert main(["--config", cfg, "validate"]) == 0

    def test_validate_bad_config(self, workdir):
        cfg = _write_config(workdir, "[select]\nfraction = 2.0\n")
        assert main(["--config", cfg, "validate"]) == 1

    def test_unknown_subcommand(self, workdir, capsys):
        assert main(["frobnicate"]) == 1
        assert "invalid choice" in capsys.readouterr().err

    def test_missing_required_flag(self, workdir, capsys):
        assert main(["export", "--out", "x"]) == 1
        assert "--manifest" in capsys.readouterr().err

    def test_internal_error_is_two(self, workdir, monkeypatch):
        import smokegen.cli as cli_mod

        def boom(args, cfg):
            raise RuntimeError("unexpected")

        monkeypatch.setattr(cli_mod, "_cmd_validate", boom)
        parser = cli_mod.build_parser()
        monkeypatch.setattr(
            cli_mod, "build_parser", lambda: parser
        )
        args = parser.parse_args(["validate"])
        args.func = boom
        monkeypatch.setattr(parser, "parse_args", lambda argv=None: args)
        assert cli_mod.main(["validate"]) == 2

    def test_run_record_written(self, workdir):
        cfg = _write_config(workdir, "")
        assert main(["--config", cfg, "validate"]) == 0
        runs = list((workdir / "runs").glob("*.json"))
        assert len(runs) == 1
        record = json.loads(runs[0].read_text())
        assert record["command"] == "validate"
        assert record["exit_code"] == 0
        assert record["config_hash"]


class TestExportCommand:
    def test_export_layout_and_label_oracle(self, workdir):
        root = _tiny_manifest(workdir)
        out = workdir / "yolo"
        assert main(["export", "--manifest", str(root / "manifest.jsonl"), "--out", str(out)]) == 0
        for i in range(3):
            assert (out / "images" / f"s{i}.jpg").exists()
            line = (out / "labels" / f"s{i}.txt").read_text().strip()
            mask = load_mask(root / "masks" / f"s{i}.png")
            assert line == mask_to_label(mask).format_line()
        assert (out / "dataset.yaml").read_text().startswith("path: .")

    def test_export_rerun_identical(self, workdir):
        root = _tiny_manifest(workdir)
        out = workdir / "yolo"
        main(["export", "--manifest", str(root / "manifest.jsonl"), "--out", str(out)])
        labels = {p.name: p.read_bytes() for p in (out / "labels").glob("*.txt")}
        main(["export", "--manifest", str(root / "manifest.jsonl"), "--out", str(out)])
        assert {p.name: p.read_bytes() for p in (out / "labels").glob("*.txt")} == labels


class TestScoreSelectCommands:
    def test_score_then_select(self, workdir):
        root = _tiny_manifest(workdir, n=4)
        scores = workdir / "scores.jsonl"
        assert main(["score", "--manifest", str(root / "manifest.jsonl"), "--out", str(scores)]) == 0
        assert len(scores.read_text().splitlines()) == 4
        selected = workdir / "selected.jsonl"
        assert (
            main(
                [
                    "select",
                    "--scores",
                    str(scores),
                    "--manifest",
                    str(root / "manifest.jsonl"),
                    "--fraction",
                    "0.5",
                    "--out",
                    str(selected),
                ]
            )
            == 0
        )
        assert len(Manifest.load(selected)) == 2

    def test_select_rerun_reproducible(self, workdir):
        root = _tiny_manifest(workdir, n=4)
        scores = workdir / "scores.jsonl"
        main(["score", "--manifest", str(root / "manifest.jsonl"), "--out", str(scores)])
        out = workdir / "sel.jsonl"
        main(["select", "--scores", str(scores), "--manifest", str(root / "manifest.jsonl"), "--out", str(out)])
        first = out.read_bytes()
        main(["select", "--scores", str(scores), "--manifest", str(root / "manifest.jsonl"), "--out", str(out)])
        assert out.read_bytes() == first


class TestPrepCommand:
    def test_prep_with_mocks(self, workdir):
        det = workdir / "det"
        det.mkdir()
        Image.fromarray(np.full((16, 16), 80, np.uint8), "L").save(det / "a.png")
        (det / "detections.jsonl").write_text(
            json.dumps({"id": "a", "image_path": "a.png", "bboxes": [{"x0": 2, "y0": 2, "w": 5, "h": 5}]})
            + "\n"
        )
        out = workdir / "corpus"
        assert main(["prep", "--detections", str(det / "detections.jsonl"), "--out", str(out)]) == 0
        manifest = Manifest.load(out / "manifest.jsonl")
        assert len(manifest) == 1

    def test_prep_rejects_remote_endpoints(self, workdir):
        cfg = _write_config(workdir, '[prep]\nseg_endpoint = "http://seg"\n')
        det = workdir / "det.jsonl"
        det.write_text("")
        assert main(["--config", cfg, "prep", "--detections", str(det), "--out", "x"]) == 1


class TestValidateManifestFlag:
    def test_flags_dangling_reference(self, workdir):
        manifest = Manifest(
            [SmokeSample("a", "missing.png", "plume", "real", "train")]
        )
        path = workdir / "m.jsonl"
        manifest.save(path)
        assert main(["validate", "--manifest", str(path)]) == 1


class TestModelPipelineCommands:
    def test_train_generate_eval_round_trip(self, workdir):
        from smokegen.toydata import build_blob_corpus, build_background_corpus, make_mask_pool

        cfg = _write_config(
            workdir,
            "[toy]\npretrain_steps = 0\n\n[generate]\nsteps = 4\nmasks_per_background = 1\nsamples_per_pair = 1\n",
        )
        build_blob_corpus(workdir / "corpus", 8, size=8, seed=1)
        build_background_corpus(workdir / "bg", 2, size=8, seed=2)
        (workdir / "maskpool").mkdir()
        for i, m in enumerate(make_mask_pool(2, 8, seed=3)):
            save_mask(m, workdir / "maskpool" / f"m{i}.png")

        assert (
            main(
                [
                    "--config", cfg, "train",
                    "--manifest", str(workdir / "corpus" / "manifest.jsonl"),
                    "--out", str(workdir / "train"),
                    "--iters", "2", "--batch-size", "2", "--lr", "1e-3",
                ]
            )
            == 0
        )
        assert (workdir / "train" / "adapters.pt").exists()
        assert (
            main(
                [
                    "--config", cfg, "generate",
                    "--backgrounds", str(workdir / "bg" / "manifest.jsonl"),
                    "--masks", str(workdir / "maskpool"),
                    "--ckpt", str(workdir / "train" / "adapters.pt"),
                    "--out", str(workdir / "gen"),
                    "--seed", "5",
                ]
            )
            == 0
        )
        gen = Manifest.load(workdir / "gen" / "manifest.jsonl")
        assert len(gen) == 2
        assert (
            main(
                [
                    "--config", cfg, "eval",
                    "--generated", str(workdir / "gen" / "manifest.jsonl"),
                    "--reference", str(workdir / "gen" / "manifest.jsonl"),
                    "--out", str(workdir / "report.json"),
                ]
            )
            == 0
        )
        report = json.loads((workdir / "report.json").read_text())
        assert len(report["rows"]) == 2
