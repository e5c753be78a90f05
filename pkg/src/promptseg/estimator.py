"""Scikit-learn style estimator wrapping the whole pipeline.

`PromptSegmenter` exposes fit/predict/score plus get_params/set_params so the
segmenter composes with sklearn tooling (cloning, grid search over decoding
strategies, pipelines).  `fit` consumes Scene objects (or a generated split
directory), pretrains and freezes the stage-2 encoder, then trains the
prompt-guided mask generator; `predict` maps images and a prompt to label
maps.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import checkpoint, scenes, stage2, textbank, trainer
from . import model as model_mod
from .backbone import check_image
from .config import BACKGROUND_TOKEN, SHAPE_KINDS, parse_config
from .errors import ConfigError


def check_scene_list(X):
    """Validate that X is a non-empty list of Scene-like objects."""
    if isinstance(X, (str, bytes)):
        loaded, _ = scenes.load_split(X, "train")
        return loaded
    X = list(X)
    if not X:
        raise ConfigError("fit needs at least one scene")
    for s in X:
        if not hasattr(s, "image") or not hasattr(s, "gt_masks"):
            raise ConfigError(f"not a Scene: {s!r}")
        check_image(s.image)
        if not s.gt_masks:
            raise ConfigError("scene has no ground-truth masks")
    return X


class PromptSegmenter(BaseEstimator):
    """Two-stage open-vocabulary segmenter with prompt-guided proposals.

    Parameters mirror the run-config keys; anything else goes through
    `config_overrides`.  After `fit`, the trained state lives in `bundle_`.
    """

    def __init__(self, strategy="pmp", num_queries=16, channels=32,
                 embed_dim=32, layers_per_level=3, epochs=30, batch_size=8,
                 lr=1e-3, seed=42, lambda_ensemble=0.65, lambda_ce=5.0,
                 lambda_dice=5.0, lambda_cls=2.0, pretrain_epochs=4,
                 aux_loss=True, query_pos=True, text_residual=False,
                 unscaled_logits=False, config_overrides=None):
        self.strategy = strategy
        self.num_queries = num_queries
        self.channels = channels
        self.embed_dim = embed_dim
        self.layers_per_level = layers_per_level
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.lambda_ensemble = lambda_ensemble
        self.lambda_ce = lambda_ce
        self.lambda_dice = lambda_dice
        self.lambda_cls = lambda_cls
        self.pretrain_epochs = pretrain_epochs
        self.aux_loss = aux_loss
        self.query_pos = query_pos
        self.text_residual = text_residual
        self.unscaled_logits = unscaled_logits
        self.config_overrides = config_overrides

    def _config(self, sample_image=None):
        overrides = dict(self.config_overrides or {})
        for key in ("strategy", "num_queries", "channels", "embed_dim",
                    "layers_per_level", "epochs", "batch_size", "lr", "seed",
                    "lambda_ensemble", "lambda_ce", "lambda_dice", "lambda_cls",
                    "pretrain_epochs", "aux_loss", "query_pos", "text_residual",
                    "unscaled_logits"):
            overrides.setdefault(key, getattr(self, key))
        if sample_image is not None:
            overrides.setdefault("image_h", sample_image.shape[0])
            overrides.setdefault("image_w", sample_image.shape[1])
        return parse_config(overrides=overrides)

    def fit(self, X, y=None, out_dir=None):
        """Pretrain the frozen stage-2 encoder and train the mask generator.

        X is a list of Scene objects or a dataset root written by the data
        generator; labels ride inside the scenes, so y is ignored.
        """
        train_scenes = check_scene_list(X)
        cfg = self._config(sample_image=np.asarray(train_scenes[0].image))
        bundle = model_mod.ModelBundle.fresh(cfg)
        bundle.frozen = stage2.pretrain_frozen_encoder(
            train_scenes, bundle.table, bundle.vocab, cfg)
        import tempfile
        run_dir = out_dir or tempfile.mkdtemp(prefix="promptseg_fit_")
        result = trainer.train(bundle, train_scenes, run_dir)
        self.bundle_ = bundle
        self.classes_ = list(SHAPE_KINDS) + [BACKGROUND_TOKEN]
        self.train_losses_ = result.epoch_losses
        return self

    def _check_fitted(self):
        if not hasattr(self, "bundle_"):
            raise ConfigError("this PromptSegmenter is not fitted yet")

    def default_prompt(self):
        return list(SHAPE_KINDS) + [BACKGROUND_TOKEN]

    def predict(self, X, prompt=None):
        """Label maps for one image or a list of images.

        `prompt` is a token list or free text; it defaults to all shape
        tokens plus background.  Labels index into the prompt token list
        (see `prompt_tokens_`).
        """
        self._check_fitted()
        tokens = self._resolve_prompt(prompt)
        single = isinstance(X, np.ndarray) and X.ndim == 3
        images = [X] if single else list(X)
        out = []
        for image in images:
            check_image(image)
            _, labels = model_mod.segment(self.bundle_, image, tokens)
            out.append(labels)
        self.prompt_tokens_ = tokens
        return out[0] if single else out

    def predict_proposals(self, image, prompt=None):
        """Full ProposalSet for one image (masks, both class distributions)."""
        self._check_fitted()
        tokens = self._resolve_prompt(prompt)
        check_image(image)
        props, _ = model_mod.segment(self.bundle_, image, tokens)
        return props

    def _resolve_prompt(self, prompt):
        if prompt is None:
            return self.default_prompt()
        if isinstance(prompt, str):
            tokens = textbank.tokenize_prompt(prompt, self.bundle_.vocab,
                                              self.bundle_.stopwords)
            if not tokens:
                raise ConfigError(f"prompt {prompt!r} has no usable tokens")
            return tokens
        return list(prompt)

    def score(self, X, y=None):
        """Simple-prompt mIoU over scenes (higher is better)."""
        from . import evaluator
        self._check_fitted()
        eval_scenes = check_scene_list(X)
        return evaluator.evaluate_simple(self.bundle_, eval_scenes).miou()

    def save(self, path):
        self._check_fitted()
        bundle = self.bundle_
        tensors = dict(bundle.params)
        if bundle.frozen:
            tensors.update(bundle.frozen)
        tensors["text.table"] = bundle.table.matrix
        checkpoint.save_with_config(path, tensors, bundle.cfg)

    @classmethod
    def from_checkpoint(cls, path):
        from .cli import load_bundle
        bundle = load_bundle(path)
        cfg = bundle.cfg
        est = cls(strategy=cfg.strategy, num_queries=cfg.num_queries,
                  channels=cfg.channels, embed_dim=cfg.embed_dim,
                  layers_per_level=cfg.layers_per_level, epochs=cfg.epochs,
                  batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
                  lambda_ensemble=cfg.lambda_ensemble, lambda_ce=cfg.lambda_ce,
                  lambda_dice=cfg.lambda_dice, lambda_cls=cfg.lambda_cls,
                  pretrain_epochs=cfg.pretrain_epochs, aux_loss=cfg.aux_loss,
                  query_pos=cfg.query_pos, text_residual=cfg.text_residual,
                  unscaled_logits=cfg.unscaled_logits)
        est.bundle_ = bundle
        est.classes_ = list(SHAPE_KINDS) + [BACKGROUND_TOKEN]
        return est
