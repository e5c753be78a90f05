"""Model assembly: parameters, the image -> proposals forward pass, and the
bundle of everything a checkpoint carries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone, decoder, heads, textbank
from .config import RunConfig


def init_model_params(cfg, rng):
    """All trainable parameters of the first stage, in a flat named dict."""
    params = {}
    params.update(backbone.init_backbone_params(rng, cfg))
    params.update(decoder.init_decoder_params(rng, cfg))
    params.update(heads.init_head_params(rng, cfg))
    return params


def predict_point(params, state, pixel_embed_nc, class_emb, cfg):
    """Head outputs for one prediction point (one decoder state)."""
    z = heads.mask_embeddings(params, state)
    logits = heads.mask_logits(z, pixel_embed_nc)
    tau = ad.exp(params["head.tau_log"])
    probs = heads.classify_stage1(z, class_emb, params["head.noobj"], tau)
    return {"z": z, "mask_logits": logits, "probs": probs}


def forward_points(params, image, text, class_emb, cfg, strategy=None, record=None):
    """Full first-stage forward pass.

    Returns (pixel_features, states, points) where `points` holds the head
    outputs after the pre-decoder state and after each decoder layer.
    """
    pix = backbone.forward_features(params, image)
    pe_nc = heads.project_pixel_embed(params, pix.pixel_embed)
    states = decoder.decode_stack(params, text, pix, cfg, strategy=strategy,
                                  record=record)
    points = [predict_point(params, s, pe_nc, class_emb, cfg) for s in states]
    return pix, states, points


def proposals_from_points(points, cfg):
    """Detach the final prediction point into a numpy ProposalSet."""
    final = points[-1]
    h, w = cfg.image_h, cfg.image_w
    logits = final["mask_logits"].data
    masks = heads.stable_sigmoid(logits).reshape(-1, h, w)
    return heads.ProposalSet(
        z=final["z"].data.copy(),
        masks=masks,
        stage1_probs=final["probs"].data.copy(),
        aux=[{"z": p["z"].data, "mask_logits": p["mask_logits"].data,
              "probs": p["probs"].data} for p in points],
    )


def segment(bundle, image, prompt_tokens, strategy=None, score_classes=None,
            record=None):
    """Run the two-stage pipeline on one image and prompt-token list.

    Returns (ProposalSet, H x W label map of prompt-class indices).  Stage 2
    runs when the bundle carries a frozen encoder; `score_classes` optionally
    restricts the semantic map to a subset of prompt classes.
    """
    from . import stage2
    from .errors import ConfigError

    cfg = bundle.cfg
    if not prompt_tokens:
        raise ConfigError("prompt is empty after filtering")
    class_emb = bundle.class_embeddings(prompt_tokens)
    _, _, points = forward_points(bundle.params, image, class_emb, class_emb,
                                  cfg, strategy=strategy, record=record)
    props = proposals_from_points(points, cfg)
    if bundle.frozen is not None:
        feats = stage2.encode_np(bundle.frozen, image)
        tau2 = float(np.exp(bundle.frozen["clip.tau_log"].data))
        props.stage2_probs = np.stack(
            [stage2.classify_stage2(stage2.mask_pool(feats, m), class_emb, tau2)
             for m in props.masks])
        props.ensembled = stage2.ensemble(props.stage1_probs, props.stage2_probs,
                                          cfg.lambda_ensemble)
    else:
        props.ensembled = props.stage1_probs.copy()
    labels = stage2.semantic_map(props.ensembled, props.masks, classes=score_classes)
    return props, labels


@dataclass
class ModelBundle:
    """Everything needed to run the pipeline end to end."""

    cfg: RunConfig
    vocab: textbank.Vocabulary
    table: textbank.EmbeddingTable
    params: dict            # trained first-stage parameters
    frozen: dict = None     # frozen second-stage encoder parameters
    stopwords: frozenset = textbank.DEFAULT_STOPWORDS

    @classmethod
    def fresh(cls, cfg, seed=None):
        seed = cfg.seed if seed is None else seed
        vocab, table = textbank.build_vocab(cfg.vocab_spec(), cfg.embed_dim,
                                            seed=cfg.data_seed)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x90DE1)))
        return cls(cfg=cfg, vocab=vocab, table=table,
                   params=init_model_params(cfg, rng))

    def class_embeddings(self, tokens):
        return textbank.class_embedding_matrix(tokens, self.table)
