import os

import pytest

from promptseg import cli

MINI_CONFIG = """
image_h = 32
image_w = 32
channels = 8
embed_dim = 8
num_queries = 10
layers_per_level = 1
epochs = 2
batch_size = 4
train_count = 10
val_count = 2
test_count = 4
objects_min = 2
objects_max = 3
pretrain_epochs = 1
clip_channels = 8
seed = 7
data_seed = 7
"""


@pytest.fixture(scope="session")
def mini_pipeline(tmp_path_factory):
    """A tiny end-to-end run shared by CLI and estimator tests."""
    root = tmp_path_factory.mktemp("mini")
    config_path = root / "run.cfg"
    config_path.write_text(
        MINI_CONFIG + f"data_dir = {root / 'data'}\nout_dir = {root / 'out'}\n",
        encoding="utf-8")
    assert cli.main(["gen-data", str(config_path)]) == 0
    assert cli.main(["pretrain-clip", str(config_path)]) == 0
    assert cli.main(["train", str(config_path)]) == 0
    return {
        "root": root,
        "config": config_path,
        "data_dir": root / "data",
        "out_dir": root / "out",
        "checkpoint": root / "out" / "model.pmpc",
    }
