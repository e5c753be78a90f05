"""Per-query prediction heads: mask embeddings, mask probability maps,
attention masks for the next decoder layer, and stage-1 class distributions
including the learnable no-object class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError

_NN_CACHE = {}


def init_head_params(rng, cfg):
    c, nc = cfg.channels, cfg.embed_dim
    phi = rng.standard_normal(nc)
    phi /= np.sqrt((phi * phi).sum())
    return {
        "head.mask.w": ad.Tensor(rng.standard_normal((c, nc)) / np.sqrt(c), requires_grad=True),
        "head.mask.b": ad.Tensor(np.zeros(nc), requires_grad=True),
        "head.pix.w": ad.Tensor(rng.standard_normal((c, nc)) / np.sqrt(c), requires_grad=True),
        "head.pix.b": ad.Tensor(np.zeros(nc), requires_grad=True),
        "head.noobj": ad.Tensor(phi, requires_grad=True),
        "head.tau_log": ad.Tensor(np.array(np.log(cfg.tau_init)), requires_grad=True),
    }


def project_pixel_embed(params, pixel_embed):
    """Project the backbone pixel embedding C -> N_c for mask logits."""
    return ad.add(ad.matmul(pixel_embed, params["head.pix.w"]), params["head.pix.b"])


def mask_embeddings(params, state):
    """Project query states C -> N_c mask embeddings z."""
    return ad.add(ad.matmul(state, params["head.mask.w"]), params["head.mask.b"])


def mask_logits(z, pixel_embed_nc):
    """Inner products <z_i, pixel_embed(p)> as (R, H*W) logits."""
    if z.shape[1] != pixel_embed_nc.shape[1]:
        raise DimensionError(
            f"mask embedding width {z.shape[1]} != pixel embedding width {pixel_embed_nc.shape[1]}")
    return ad.matmul(z, ad.transpose(pixel_embed_nc))


def mask_from_embedding(z, pixel_embed_nc):
    """Mask probabilities sigmoid(<z_i, pixel_embed(p)>), shape (R, H*W)."""
    return ad.sigmoid(mask_logits(z, pixel_embed_nc))


def classify_stage1(z, class_emb, phi, tau):
    """Softmax over cosine similarities against K classes plus no-object.

    `class_emb` is a constant K x N_c matrix, `phi` the learnable no-object
    embedding, `tau` a positive temperature (scalar tensor or float).
    """
    if not isinstance(tau, ad.Tensor):
        if tau <= 0:
            raise ConfigError(f"temperature must be positive, got {tau}")
        tau = ad.Tensor(np.array(float(tau)))
    class_emb = class_emb if isinstance(class_emb, ad.Tensor) else ad.Tensor(class_emb)
    all_emb = ad.concat_rows([class_emb, ad.reshape(phi, (1, phi.size))])
    cos = ad.matmul(ad.normalize_rows(z), ad.transpose(ad.normalize_rows(all_emb)))
    return ad.softmax_rows(ad.div(cos, tau))


def _nn_indices(full_hw, level_hw):
    """Nearest-neighbor sample indices (pixel centers) for resizing."""
    key = (full_hw, level_hw)
    cached = _NN_CACHE.get(key)
    if cached is None:
        (h, w), (hl, wl) = full_hw, level_hw
        rows = np.minimum(((np.arange(hl) + 0.5) * h / hl).astype(np.intp), h - 1)
        cols = np.minimum(((np.arange(wl) + 0.5) * w / wl).astype(np.intp), w - 1)
        cached = (rows[:, None] * w + cols[None, :]).reshape(-1)
        _NN_CACHE[key] = cached
    return cached


def attention_mask_next(mask_probs, level_hw):
    """Resize (R, H, W) mask probabilities to a level and threshold at 0.5.

    Returns (R, Hl*Wl) booleans marking foreground positions per query; the
    decoder treats an all-background row as "attend everywhere".
    """
    probs = np.asarray(mask_probs)
    r, h, w = probs.shape
    idx = _nn_indices((h, w), level_hw)
    return probs.reshape(r, h * w)[:, idx] > 0.5


# plain-numpy twins used for the detached attention-mask path ------------------

def stable_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def mask_probs_np(params, state_np, pixel_embed_nc_np):
    # fixed-order products: the thresholded masks stay bit-exact under query
    # permutations (see autodiff.matmul_exact)
    z = np.einsum("ik,kj->ij", state_np, params["head.mask.w"].data,
                  optimize=False) + params["head.mask.b"].data
    logits = np.einsum("ik,jk->ij", z, pixel_embed_nc_np, optimize=False)
    return stable_sigmoid(logits)


@dataclass
class ProposalSet:
    """Final proposals: embeddings, masks, and class distributions."""

    z: np.ndarray                  # R x N_c
    masks: np.ndarray              # R x H x W probabilities in (0, 1)
    stage1_probs: np.ndarray       # R x (K+1); last column is no-object
    stage2_probs: np.ndarray = None    # R x K, filled by the second stage
    ensembled: np.ndarray = None       # R x (K+1) after geometric ensembling
    aux: list = field(default_factory=list)  # per-point intermediates
