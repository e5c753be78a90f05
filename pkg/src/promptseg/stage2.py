"""Second stage: a frozen discriminative image encoder, mask pooling, and the
geometric ensemble of the two classification routes.

The encoder is pretrained with a softmax contrastive objective (mask-pooled
region feature against every vocabulary embedding, cross-entropy on the true
token, learnable temperature) and then frozen; downstream training never
touches it.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import backbone, heads
from .errors import (ConfigError, DegenerateInputError, DimensionError,
                     NumericError)
from .optim import Adam


def init_clip_params(rng, cfg):
    cc, nc = cfg.clip_channels, cfg.embed_dim

    def lin(rows, cols):
        return ad.Tensor(rng.standard_normal((rows, cols)) / np.sqrt(rows),
                         requires_grad=True)

    def zeros(n):
        return ad.Tensor(np.zeros(n), requires_grad=True)

    return {
        "clip.c1.w": lin(9 * 3, cc), "clip.c1.b": zeros(cc),
        "clip.c2.w": lin(9 * cc, cc), "clip.c2.b": zeros(cc),
        "clip.c3.w": lin(9 * cc, cc), "clip.c3.b": zeros(cc),
        "clip.out.w": lin(cc, nc), "clip.out.b": zeros(nc),
        "clip.tau_log": ad.Tensor(np.array(np.log(cfg.tau_init)), requires_grad=True),
    }


def clip_encode(params, image):
    """Image -> (H*W, N_c) feature map at full resolution (differentiable)."""
    arr = backbone.check_image(image)
    h, w = arr.shape[:2]
    x = ad.Tensor(arr.reshape(h * w, 3))
    x, _, _ = backbone.conv3x3(x, params["clip.c1.w"], params["clip.c1.b"], h, w, 1)
    x = ad.relu(x)
    x, _, _ = backbone.conv3x3(x, params["clip.c2.w"], params["clip.c2.b"], h, w, 1)
    x = ad.relu(x)
    x, _, _ = backbone.conv3x3(x, params["clip.c3.w"], params["clip.c3.b"], h, w, 1)
    x = ad.relu(x)
    return ad.add(ad.matmul(x, params["clip.out.w"]), params["clip.out.b"])


def pool_indices(mask):
    """Foreground indices for pooling: binarize at 0.5, soft fallback weights.

    Returns (indices, weights) where weights is None for the hard-mask path.
    """
    flat = np.asarray(mask, dtype=np.float64).reshape(-1)
    hard = flat > 0.5
    if hard.any():
        return np.where(hard)[0], None
    if not (flat > 0.0).any():
        raise DegenerateInputError("mask is exactly zero everywhere")
    return np.where(flat > 0.0)[0], flat[flat > 0.0]


def mask_pool(features, mask):
    """Mean feature over the mask foreground (numpy, inference path)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 3:
        feats = feats.reshape(-1, feats.shape[-1])
    flat = np.asarray(mask, dtype=np.float64).reshape(-1)
    if flat.shape[0] != feats.shape[0]:
        raise DimensionError(f"mask has {flat.shape[0]} pixels, features {feats.shape[0]}")
    idx, weights = pool_indices(flat)
    picked = feats[idx]
    if weights is None:
        return picked.mean(axis=0)
    return (picked * weights[:, None]).sum(axis=0) / weights.sum()


def classify_stage2(v, class_emb, tau2):
    """Softmax over cosine similarities of the pooled feature vs K classes."""
    if tau2 <= 0:
        raise ConfigError(f"stage-2 temperature must be positive, got {tau2}")
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt((v * v).sum())
    if norm < 1e-150:
        raise NumericError("zero pooled feature has no cosine similarity")
    emb = np.asarray(class_emb, dtype=np.float64)
    emb_n = emb / np.sqrt((emb * emb).sum(axis=1, keepdims=True))
    cos = emb_n @ (v / norm)
    e = np.exp((cos - cos.max()) / tau2)
    return e / e.sum()


def ensemble(p, p_hat, lam):
    """Geometric mean p^lam * p_hat^(1-lam) over the K real classes.

    The trailing no-object entry of `p` passes through untouched; the output
    is renormalized over all K+1 entries for reporting (the argmax over real
    classes is unaffected).
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"ensemble weight must lie in [0, 1], got {lam}")
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p.shape[-1] != p_hat.shape[-1] + 1:
        raise DimensionError(
            f"stage-1 row must have one extra (no-object) entry: {p.shape} vs {p_hat.shape}")
    out = np.empty_like(p)
    out[..., :-1] = np.power(p[..., :-1], lam) * np.power(p_hat, 1.0 - lam)
    out[..., -1] = p[..., -1]
    return out / out.sum(axis=-1, keepdims=True)


def semantic_map(p_out, masks, classes=None):
    """Per-pixel argmax of mask-weighted class scores.

    score_k(p) = sum_i p_out[i, k] * mask_i(p) over the real classes (the
    no-object column is ignored).  `classes` optionally restricts scoring to
    a subset of class indices; ties resolve to the lowest class index.
    """
    p_out = np.asarray(p_out, dtype=np.float64)
    m = np.asarray(masks, dtype=np.float64)
    r, h, w = m.shape
    k_real = p_out.shape[1] - 1
    cols = np.arange(k_real) if classes is None else np.asarray(sorted(classes))
    scores = p_out[:, cols].T @ m.reshape(r, h * w)
    return cols[np.argmax(scores, axis=0)].reshape(h, w)


def _scene_triples(scene, vocab):
    return [(tok, mask) for tok, mask in scene.gt_masks.items()
            if tok in vocab.index and not vocab.is_compound(tok)]


def pretrain_frozen_encoder(train_scenes, table, vocab, cfg, seed=None):
    """Contrastive pretraining of the stage-2 encoder; returns frozen params.

    Every (scene, non-compound token) pair contributes a cross-entropy term:
    the mask-pooled feature against all vocabulary embeddings.  Deterministic
    for a given seed.
    """
    if not train_scenes:
        raise ConfigError("pretraining needs a non-empty dataset")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC11F)))
    params = init_clip_params(rng, cfg)
    opt = Adam(params, lr=cfg.pretrain_lr)
    table_t = ad.Tensor(table.matrix)

    order = np.arange(len(train_scenes))
    for _epoch in range(cfg.pretrain_epochs):
        rng.shuffle(order)
        for scene_idx in order:
            scene = train_scenes[scene_idx]
            triples = _scene_triples(scene, vocab)
            if not triples:
                continue
            opt.zero_grad()
            with ad.Tape() as tape:
                feats = clip_encode(params, scene.image)
                tau = ad.exp(params["clip.tau_log"])
                loss = None
                for tok, mask in triples:
                    idx, _ = pool_indices(mask.astype(np.float64))
                    pooled = ad.mul_const(
                        ad.sum_axis(ad.take_rows(feats, idx), 0), 1.0 / idx.size)
                    vn = ad.normalize_rows(ad.reshape(pooled, (1, pooled.size)))
                    cos = ad.matmul(vn, ad.transpose(table_t))
                    logp = ad.log(ad.softmax_rows(ad.div(cos, tau)))
                    term = ad.mul_const(
                        ad.take_elems(logp, [0], [vocab.index[tok]]), -1.0)
                    nll = ad.sum_all(term)
                    loss = nll if loss is None else ad.add(loss, nll)
                loss = ad.mul_const(loss, 1.0 / len(triples))
            ad.backward(tape, loss)
            opt.step()

    for t in params.values():
        t.requires_grad = False
        t.grad = None
        t.data.setflags(write=False)
    return params


def encode_np(params, image):
    """Frozen-encoder forward in plain numpy (inference fast path)."""
    arr = backbone.check_image(image)
    h, w = arr.shape[:2]
    x = arr.reshape(h * w, 3)
    for layer in ("c1", "c2", "c3"):
        idx, oh, ow = backbone._conv_indices(h, w, 1)
        padded = np.vstack([x, np.zeros((1, x.shape[1]))])
        patches = padded[idx].reshape(oh * ow, 9 * x.shape[1])
        x = patches @ params[f"clip.{layer}.w"].data + params[f"clip.{layer}.b"].data
        x = x * (x > 0)
    return x @ params["clip.out.w"].data + params["clip.out.b"].data


def retrieval_accuracy(params, scenes_list, table, vocab):
    """Fraction of single-shape pooled features whose nearest vocabulary
    embedding (among non-compound tokens) is the true token."""
    simple = [t for t in vocab.simple_tokens()]
    cols = np.array([vocab.index[t] for t in simple])
    emb = table.matrix[cols]
    hits = total = 0
    from .config import BACKGROUND_TOKEN
    for scene in scenes_list:
        feats = encode_np(params, scene.image)
        for tok, mask in scene.gt_masks.items():
            if vocab.is_compound(tok) or tok == BACKGROUND_TOKEN or tok not in vocab.index:
                continue
            v = mask_pool(feats, mask.astype(np.float64))
            cos = emb @ (v / np.sqrt((v * v).sum()))
            hits += simple[int(np.argmax(cos))] == tok
            total += 1
    return hits / max(total, 1)
