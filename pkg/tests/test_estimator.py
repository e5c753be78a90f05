import numpy as np
import pytest
from sklearn.base import clone

from promptseg import scenes
from promptseg.config import RunConfig
from promptseg.errors import ConfigError
from promptseg.estimator import PromptSegmenter, check_scene_list


def fit_kwargs():
    return dict(channels=8, embed_dim=8, num_queries=10, layers_per_level=1,
                epochs=2, batch_size=4, pretrain_epochs=1, seed=5,
                config_overrides={"clip_channels": 8, "data_seed": 5,
                                  "objects_min": 2, "objects_max": 3})


def make_scenes(n=8):
    cfg = RunConfig(objects_min=2, objects_max=3, data_seed=5)
    return [scenes.generate_scene(cfg, "train", i) for i in range(n)]


def test_get_set_params_roundtrip():
    est = PromptSegmenter(strategy="concat", epochs=3)
    params = est.get_params()
    assert params["strategy"] == "concat" and params["epochs"] == 3
    est.set_params(strategy="none")
    assert est.strategy == "none"
    cloned = clone(est)
    assert cloned.get_params() == est.get_params()


def test_unfitted_predict_raises():
    with pytest.raises(ConfigError, match="not fitted"):
        PromptSegmenter().predict(np.zeros((32, 32, 3)))


def test_scene_list_validation():
    with pytest.raises(ConfigError):
        check_scene_list([])
    with pytest.raises(ConfigError):
        check_scene_list([object()])
    good = make_scenes(2)
    assert check_scene_list(good) == good


def test_fit_predict_score(tmp_path):
    train = make_scenes(10)
    est = PromptSegmenter(**fit_kwargs()).fit(train, out_dir=tmp_path / "run")
    assert est.train_losses_
    scene = make_scenes(3)[-1]
    labels = est.predict(scene.image)
    assert labels.shape == (32, 32)
    assert set(np.unique(labels)) <= set(range(len(est.prompt_tokens_)))
    batch = est.predict([scene.image, scene.image])
    assert len(batch) == 2 and np.array_equal(batch[0], batch[1])
    labels_text = est.predict(scene.image, prompt="a disk on a background")
    assert est.prompt_tokens_ == ["disk", "background"]
    assert labels_text.shape == (32, 32)
    props = est.predict_proposals(scene.image)
    assert props.masks.shape[0] == 10
    assert props.stage2_probs is not None
    score = est.score(make_scenes(4))
    assert 0.0 <= score <= 1.0

    path = tmp_path / "est.pmpc"
    est.save(path)
    back = PromptSegmenter.from_checkpoint(path)
    relabels = back.predict(scene.image)
    assert np.array_equal(labels, relabels)


def test_fit_determinism(tmp_path):
    train = make_scenes(6)
    a = PromptSegmenter(**fit_kwargs()).fit(train, out_dir=tmp_path / "a")
    b = PromptSegmenter(**fit_kwargs()).fit(train, out_dir=tmp_path / "b")
    assert a.train_losses_ == b.train_losses_
    for key in a.bundle_.params:
        assert np.array_equal(a.bundle_.params[key].data,
                              b.bundle_.params[key].data)
