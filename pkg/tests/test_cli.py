import json
import subprocess
import sys
from pathlib import Path

import pytest
import torch

from sbr import cli, data, train
from sbr.train import TrainingDiverged

pytestmark = pytest.mark.usefixtures("tiny_stack_dir")


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "synth.ini"
    path.write_text("[synth]\nnum_slices = 6\nheight = 64\nwidth = 64\n"
                    "seed = 11\n")
    return path


@pytest.fixture(scope="module")
def train_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "train.ini"
    path.write_text("[train]\nepochs = 1\nbatch_size = 4\n"
                    "checkpoint_every = 2\nseed = 0\n"
                    "[weights]\nlambda_geo = 0.02\n")
    return path


class TestSynthData:
    def test_writes_layout_and_manifest(self, synth_ini, tmp_path):
        out = tmp_path / "stack"
        assert run_cli("synth-data", "--config", synth_ini, "--out", out) == 0
        for sub in ("source", "target", "mask", "seg_source", "seg_target",
                    "landmarks", "gt_field"):
            assert (out / sub).is_dir(), sub
        assert len(list((out / "source").glob("*.png"))) == 6
        assert "num_slices = 6" in (out / "manifest").read_text()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "synth-data"
        assert manifest["resolved_config"]["seed"] == 11
        assert manifest["seeds"] == {"seed": 11}
        assert "source" in manifest["outputs"]

    def test_seed_flag_overrides_config(self, synth_ini, tmp_path):
        out = tmp_path / "stack"
        run_cli("synth-data", "--config", synth_ini, "--seed", 12,
                "--out", out)
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["resolved_config"]["seed"] == 12

    def test_repeat_run_is_byte_identical(self, synth_ini, tmp_path):
        for name in ("a", "b"):
            run_cli("synth-data", "--config", synth_ini,
                    "--out", tmp_path / name)
        files_a = sorted((tmp_path / "a").rglob("*"))
        for fa in files_a:
            if not fa.is_file() or fa.name == "run_manifest.json":
                continue
            fb = tmp_path / "b" / fa.relative_to(tmp_path / "a")
            assert fa.read_bytes() == fb.read_bytes(), fa.name

    def test_unknown_config_key_fails(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[synth]\nnum_slice = 6\n")
        assert run_cli("synth-data", "--config", bad,
                       "--out", tmp_path / "o") == 2
        assert "unknown key" in capsys.readouterr().err

    def test_unparseable_value_fails(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[synth]\nnum_slices = six\n")
        assert run_cli("synth-data", "--config", bad,
                       "--out", tmp_path / "o") == 2
        assert "cannot parse" in capsys.readouterr().err

    def test_missing_config_file_fails(self, tmp_path):
        assert run_cli("synth-data", "--config", tmp_path / "absent.ini",
                       "--out", tmp_path / "o") == 2


class TestTrain:
    def test_reg_stage_end_to_end(self, train_ini, tiny_stack_dir, tmp_path):
        out = tmp_path / "reg"
        assert run_cli("train", "reg", "--config", train_ini,
                       "--data", tiny_stack_dir, "--out", out) == 0
        assert (out / train.FINAL_CHECKPOINT).exists()
        payload = train.load_checkpoint(out / train.FINAL_CHECKPOINT)
        assert payload["kind"] == "registration"
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "train reg"
        assert manifest["resolved_config"]["stage"] == "reg"

    def test_translation_stage_needs_checkpoint(self, train_ini,
                                                tiny_stack_dir, tmp_path,
                                                capsys):
        code = run_cli("train", "sbr", "--config", train_ini,
                       "--data", tiny_stack_dir, "--out", tmp_path / "o")
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_sbr_n_logs_zero_geometry(self, train_ini, tiny_stack_dir,
                                      tiny_reg_checkpoint, tmp_path):
        out = tmp_path / "sbrn"
        assert run_cli("train", "sbr_n", "--config", train_ini,
                       "--data", tiny_stack_dir, "--out", out,
                       "--reg-checkpoint", tiny_reg_checkpoint) == 0
        records = [json.loads(l) for l in
                   (out / train.LOG_NAME).read_text().splitlines()]
        assert records and all(r["loss_geo"] == 0.0 for r in records)

    def test_resume_matches_uninterrupted(self, tiny_stack_dir, tmp_path):
        ini2 = tmp_path / "two.ini"
        ini2.write_text("[train]\nepochs = 2\nbatch_size = 8\n"
                        "checkpoint_every = 2\nseed = 1\n")
        ini1 = tmp_path / "one.ini"
        ini1.write_text("[train]\nepochs = 1\nbatch_size = 8\n"
                        "checkpoint_every = 2\nseed = 1\n")
        run_cli("train", "reg", "--config", ini2, "--data", tiny_stack_dir,
                "--out", tmp_path / "full")
        run_cli("train", "reg", "--config", ini1, "--data", tiny_stack_dir,
                "--out", tmp_path / "split")
        mid = tmp_path / "split" / "checkpoint_000002.pt"
        assert run_cli("train", "reg", "--config", ini2,
                       "--data", tiny_stack_dir, "--out", tmp_path / "split",
                       "--resume", mid) == 0
        assert (tmp_path / "full" / train.FINAL_CHECKPOINT).read_bytes() \
            == (tmp_path / "split" / train.FINAL_CHECKPOINT).read_bytes()
        strip = lambda p: [
            {k: v for k, v in json.loads(l).items() if k != "wall_time"}
            for l in (p / train.LOG_NAME).read_text().splitlines()]
        assert strip(tmp_path / "full") == strip(tmp_path / "split")

    def test_divergence_maps_to_exit_3(self, train_ini, tiny_stack_dir,
                                       tmp_path, monkeypatch, capsys):
        def blow_up(*a, **k):
            raise TrainingDiverged("stage reg: non-finite loss at step 1")
        monkeypatch.setattr(train, "run_stage", blow_up)
        code = run_cli("train", "reg", "--config", train_ini,
                       "--data", tiny_stack_dir, "--out", tmp_path / "o")
        assert code == 3
        assert "non-finite" in capsys.readouterr().err


class TestRegister:
    def test_outputs_with_identity_checkpoint(self, tiny_stack_dir, tmp_path):
        ckpt = tmp_path / "zero"
        ini = tmp_path / "zero.ini"
        ini.write_text("[train]\nepochs = 0\nseed = 0\n")
        run_cli("train", "reg", "--config", ini, "--data", tiny_stack_dir,
                "--out", ckpt)
        out = tmp_path / "pair"
        assert run_cli("register",
                       "--reg-checkpoint", ckpt / train.FINAL_CHECKPOINT,
                       "--source", Path(tiny_stack_dir) / "source" / "000.png",
                       "--target", Path(tiny_stack_dir) / "target" / "000.png",
                       "--out", out) == 0
        for name in ("S_T.png", "warped_source.png", "field.sbrf",
                     "run_manifest.json"):
            assert (out / name).exists(), name
        # fresh net is exactly identity, and without a generator the source
        # passes through untouched
        src = (Path(tiny_stack_dir) / "source" / "000.png").read_bytes()
        assert (out / "S_T.png").read_bytes() == src
        assert (out / "warped_source.png").read_bytes() == src
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["resolved_config"] == {"translated": False}

    def test_sbr_checkpoint_bundles_generator(self, tiny_stack_dir,
                                              tiny_sbr_checkpoint, tmp_path):
        out = tmp_path / "pair"
        assert run_cli("register",
                       "--reg-checkpoint", tiny_sbr_checkpoint,
                       "--source", Path(tiny_stack_dir) / "source" / "000.png",
                       "--target", Path(tiny_stack_dir) / "target" / "000.png",
                       "--out", out) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["resolved_config"] == {"translated": True}
        src = (Path(tiny_stack_dir) / "source" / "000.png").read_bytes()
        assert (out / "S_T.png").read_bytes() != src

    def test_missing_checkpoint_fails(self, tiny_stack_dir, tmp_path):
        assert run_cli("register", "--reg-checkpoint",
                       tmp_path / "absent.pt",
                       "--source", Path(tiny_stack_dir) / "source" / "000.png",
                       "--target", Path(tiny_stack_dir) / "target" / "000.png",
                       "--out", tmp_path / "o") == 2


class TestEvaluate:
    def test_report_written(self, tiny_stack_dir, tiny_reg_checkpoint,
                            tmp_path):
        out = tmp_path / "eval"
        assert run_cli("evaluate", "--data", tiny_stack_dir,
                       "--checkpoint", tiny_reg_checkpoint, "--out", out) == 0
        for name in ("report.csv", "summary.txt", "rmse_box.png",
                     "dice_box.png", "run_manifest.json"):
            assert (out / name).exists(), name

    def test_unannotated_stack_fails(self, tiny_stack, tiny_reg_checkpoint,
                                     tmp_path, capsys):
        bare_dir = tmp_path / "bare"
        bare = [type(s)(source=s.source, target=s.target, index=s.index)
                for s in tiny_stack[:2]]
        data.save_stack(bare, bare_dir)
        assert run_cli("evaluate", "--data", bare_dir,
                       "--checkpoint", tiny_reg_checkpoint,
                       "--out", tmp_path / "o") == 2
        assert "landmarks" in capsys.readouterr().err


class TestEntryPoint:
    def test_console_script_help(self):
        proc = subprocess.run([sys.executable, "-m", "sbr.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for command in ("synth-data", "train", "register", "evaluate"):
            assert command in proc.stdout

    def test_module_requires_command(self):
        proc = subprocess.run([sys.executable, "-m", "sbr.cli"],
                              capture_output=True, text=True)
        assert proc.returncode == 2
