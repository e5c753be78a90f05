import os

import numpy as np
import pytest

from promptseg import cli, scenes
from promptseg.errors import EXIT_CHECKSUM, EXIT_CONFIG, EXIT_IO


def test_pipeline_artifacts_exist(mini_pipeline):
    out = mini_pipeline["out_dir"]
    assert (out / "frozen.pmpc").exists()
    assert (out / "model.pmpc").exists()
    assert (out / "model.pmpc.config").exists()
    assert (out / "metrics.log").exists()
    data = mini_pipeline["data_dir"]
    assert (data / "train" / "manifest.json").exists()
    assert (data / "test" / "scene_00000" / "image.ppm").exists()


def test_eval_reports_are_byte_identical(mini_pipeline, capsys):
    cfg = mini_pipeline["config"]
    ckpt = mini_pipeline["checkpoint"]
    assert cli.main(["eval", str(cfg), str(ckpt)]) == 0
    first = (mini_pipeline["out_dir"] / "eval_report.tsv").read_bytes()
    assert cli.main(["eval", str(cfg), str(ckpt)]) == 0
    second = (mini_pipeline["out_dir"] / "eval_report.tsv").read_bytes()
    assert first == second
    assert b"section\tclass\tvalue" in first
    assert b"# strategy = pmp" in first
    capsys.readouterr()


def test_segment_writes_named_masks(mini_pipeline, tmp_path):
    image_path = mini_pipeline["data_dir"] / "test" / "scene_00000" / "image.ppm"
    out = tmp_path / "seg"
    code = cli.main(["segment", str(mini_pipeline["checkpoint"]), str(image_path),
                     "--prompt", "the disk and the stripes", "--out", str(out)])
    assert code == 0
    assert sorted(os.listdir(out)) == ["disk.pgm", "labels.pgm", "overlay.ppm",
                                       "stripes.pgm"]
    labels = scenes.read_pgm(out / "labels.pgm")
    assert labels.dtype == bool  # representable as a PGM
    disk = scenes.read_pgm(out / "disk.pgm")
    assert disk.shape == (32, 32)


def test_segment_empty_prompt_is_config_error(mini_pipeline, tmp_path, capsys):
    image_path = mini_pipeline["data_dir"] / "test" / "scene_00000" / "image.ppm"
    code = cli.main(["segment", str(mini_pipeline["checkpoint"]), str(image_path),
                     "--prompt", "the of and", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
    capsys.readouterr()


def test_missing_file_exit_codes(tmp_path, capsys):
    assert cli.main(["gen-data", str(tmp_path / "nope.cfg")]) == EXIT_CONFIG
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data_dir = {tmp_path}/missing\n", encoding="utf-8")
    assert cli.main(["pretrain-clip", str(cfg)]) == EXIT_IO
    capsys.readouterr()


def test_unknown_config_key_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus = 1\n", encoding="utf-8")
    assert cli.main(["gen-data", str(cfg)]) == EXIT_CONFIG
    capsys.readouterr()


def test_corrupted_checkpoint_exit_code(mini_pipeline, tmp_path, capsys):
    raw = bytearray(mini_pipeline["checkpoint"].read_bytes())
    raw[-12] ^= 0x55
    bad = tmp_path / "model.pmpc"
    bad.write_bytes(bytes(raw))
    (tmp_path / "model.pmpc.config").write_text(
        (str(mini_pipeline["checkpoint"]) + ".config")
        and open(str(mini_pipeline["checkpoint"]) + ".config").read(),
        encoding="utf-8")
    image_path = mini_pipeline["data_dir"] / "test" / "scene_00000" / "image.ppm"
    code = cli.main(["segment", str(bad), str(image_path), "--prompt", "disk"])
    assert code == EXIT_CHECKSUM
    capsys.readouterr()


def test_checkpoint_roundtrip_bytes(mini_pipeline, tmp_path):
    from promptseg import checkpoint
    src = mini_pipeline["checkpoint"]
    again = tmp_path / "again.pmpc"
    checkpoint.save(again, checkpoint.load(src))
    assert src.read_bytes() == again.read_bytes()


def test_ablate_trains_all_strategies(mini_pipeline, tmp_path, capsys):
    text = mini_pipeline["config"].read_text()
    frozen = mini_pipeline["out_dir"] / "frozen.pmpc"
    cfg = tmp_path / "ablate.cfg"
    cfg.write_text(text.replace(str(mini_pipeline["out_dir"]),
                                str(tmp_path / "out"))
                   + f"frozen_ckpt = {frozen}\nepochs = 1\n", encoding="utf-8")
    assert cli.main(["ablate", str(cfg)]) == 0
    out = capsys.readouterr().out
    table = (tmp_path / "out" / "ablation.tsv").read_text()
    for strategy, count in [("pmp", "N"), ("none", "N"), ("concat", "N+M"),
                            ("concat_drop", "N"), ("text_as_queries", "M")]:
        assert f"{strategy}\t{count}\t" in table
    assert "ordering pmp>=" in out


def test_ablation_report_missing_checkpoint(mini_pipeline):
    from promptseg import evaluator
    from promptseg.errors import ConfigError
    with pytest.raises(ConfigError, match="concat"):
        evaluator.ablation_report(
            {"pmp": str(mini_pipeline["checkpoint"]),
             "concat": str(mini_pipeline["root"] / "nope.pmpc")}, [])


def test_metrics_log_reproducible(mini_pipeline, tmp_path, capsys):
    # retrain from the same config into a fresh out_dir: identical metrics
    text = mini_pipeline["config"].read_text()
    cfg2 = tmp_path / "run2.cfg"
    frozen = mini_pipeline["out_dir"] / "frozen.pmpc"
    cfg2.write_text(text.replace(str(mini_pipeline["out_dir"]),
                                 str(tmp_path / "out2"))
                    + f"frozen_ckpt = {frozen}\n", encoding="utf-8")
    assert cli.main(["train", str(cfg2)]) == 0
    a = (mini_pipeline["out_dir"] / "metrics.log").read_bytes()
    b = (tmp_path / "out2" / "metrics.log").read_bytes()
    assert a == b
    capsys.readouterr()
