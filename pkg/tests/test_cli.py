"""Command line: exit codes and a small gen-data → train → eval pass."""

import pandas as pd
import pytest

from engine import segnet
from engine.config import preset_config
from scripts.cli import main
from warehouse.checkpoint import save_model
from warehouse.schema import EVAL_COLUMNS


def _gen(out, *extra):
    return main(["gen-data", "--out", str(out), "--size", "16", "--radius", "1.5", "3",
                 "--no-cache", *extra])


class TestExitCodes:
    def test_unknown_command(self):
        assert main(["fly"]) == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = blue\n")
        assert main(["train", "--config", str(cfg)]) == 1

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.cfg")]) == 3

    def test_infeasible_scene(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path / "d"), "--size", "16", "--count", "2"]) == 1

    def test_missing_manifest(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "x.dmck"),
                     "--manifest", str(tmp_path / "none.tsv")]) == 3

    def test_gradcheck_subset(self, tmp_path, capsys):
        out = tmp_path / "grad.csv"
        assert main(["gradcheck", "--cases", "2", "--ops", "add", "mul", "--out", str(out)]) == 0
        table = pd.read_csv(out)
        assert table["op"].tolist() == ["add", "mul"]
        assert table["passed"].all()
        assert "GRADIENT CHECK" in capsys.readouterr().out


def test_gen_train_eval(tmp_path, capsys):
    assert _gen(tmp_path / "src", "--count", "10") == 0
    assert _gen(tmp_path / "tgt", "--count", "6", "--seed", "5", "--shift", "texture",
                "--domain", "target", "--unlabeled") == 0
    assert _gen(tmp_path / "test", "--count", "4", "--seed", "9", "--shift", "texture",
                "--domain", "target") == 0

    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "preset = smoke\n"
        "num_splits = 1\n"
        "epochs = 1\n"
        "target_fraction = 1.0\n"
        f"source_manifest = {tmp_path / 'src' / 'manifest.tsv'}\n"
        f"target_manifest = {tmp_path / 'tgt' / 'manifest.tsv'}\n"
        f"output_dir = {tmp_path / 'run'}\n"
    )
    assert main(["train", "--config", str(cfg), "--no-progress"]) == 0
    checkpoint = tmp_path / "run" / "checkpoints" / "split0.dmck"
    assert checkpoint.exists()

    out = tmp_path / "dice.csv"
    assert main(["eval", "--checkpoint", str(checkpoint),
                 "--manifest", str(tmp_path / "test" / "manifest.tsv"), "--out", str(out)]) == 0
    per_image = pd.read_csv(out)
    assert list(per_image.columns) == EVAL_COLUMNS
    assert len(per_image) == 4
    assert per_image["dice"].between(0, 1).all()
    assert "DICE (target" in capsys.readouterr().out


def test_unlabeled_eval_is_usage_error(tmp_path):
    assert _gen(tmp_path / "bare", "--count", "2", "--unlabeled") == 0
    model_dir = tmp_path / "m"
    model_dir.mkdir()
    save_model(segnet.init(preset_config("smoke").unet, seed=0), model_dir / "m.dmck")
    assert main(["eval", "--checkpoint", str(model_dir / "m.dmck"),
                 "--manifest", str(tmp_path / "bare" / "manifest.tsv")]) == 1


@pytest.mark.slow
def test_matrix_smoke(tmp_path):
    assert main(["matrix", "--preset", "smoke", "--source-count", "10", "--target-count", "10",
                 "--methods", "none", "jsd", "--fractions", "1.0", "--out", str(tmp_path / "mx"),
                 "--no-progress"]) == 0
    assert (tmp_path / "mx" / "matrix_pivot.csv").exists()
