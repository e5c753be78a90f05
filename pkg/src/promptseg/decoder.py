"""Prompt-conditioned transformer mask decoder.

Each of the 3*L layers routes to pixel level (layer index mod 3) and runs,
depending on the decoding strategy, a text-query cross-attention followed by
the standard decoding block: masked cross-attention over pixel features with
a residual, self-attention over the queries, and a feed-forward block.

Strategies (query rows kept per layer / proposals produced):
  pmp             text cross-attention first, N rows throughout
  none            text step bypassed entirely (plain baseline), N rows
  concat          text tokens appended to the queries once, N+M rows
  concat_drop     text tokens appended before each block, dropped after, N rows
  text_as_queries the projected text tokens are the only queries, M rows
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import heads
from .config import STRATEGIES
from .errors import ConfigError, ContractError, DimensionError

MASKED_LOGIT_BIAS = -1e9


def init_decoder_params(rng, cfg):
    c, nc = cfg.channels, cfg.embed_dim
    hidden = cfg.ffn_mult * c

    def lin(rows, cols):
        return ad.Tensor(rng.standard_normal((rows, cols)) / np.sqrt(rows),
                         requires_grad=True)

    def zeros(n):
        return ad.Tensor(np.zeros(n), requires_grad=True)

    params = {
        "queries.embed": ad.Tensor(rng.standard_normal((cfg.num_queries, c)) * 0.5,
                                   requires_grad=True),
        "queries.pos": ad.Tensor(rng.standard_normal((cfg.num_queries, c)) * 0.5,
                                 requires_grad=True),
    }
    # attention projections are plain linear maps (a key-side bias shifts a
    # query's logits uniformly, which row softmax cancels exactly)
    for i in range(cfg.num_layers):
        p = f"dec.{i}."
        for name, rows in (("fq", c), ("fk", c), ("fv", c), ("fkt", nc),
                           ("fvt", nc), ("sq", c), ("sk", c), ("sv", c)):
            params[p + name + ".w"] = lin(rows, c)
        params[p + "ffn1.w"] = lin(c, hidden)
        params[p + "ffn1.b"] = zeros(hidden)
        params[p + "ffn2.w"] = lin(hidden, c)
        params[p + "ffn2.b"] = zeros(c)
    return params


def _lin(x, params, name):
    # query-indexed rows: fixed-order product keeps permutations bit-exact
    return ad.matmul_exact(x, params[name + ".w"])


def _lin_pix(x, params, name):
    # pixel-indexed rows never permute; plain BLAS is fine and faster
    return ad.matmul(x, params[name + ".w"])


def text_cross_attention(x, text, layer, params, cfg, record=None):
    """Queries attend to the text tokens: Q' = softmax(Q Kt^T) Vt.

    `x` are the incoming query features (positional embedding already added
    by the caller if enabled); `text` is the M x N_c token matrix, M >= 1.
    No residual is added unless cfg.text_residual is set.
    """
    if not isinstance(text, ad.Tensor):
        if text is None or len(text) == 0:
            raise ContractError("text_cross_attention needs at least one text token")
        text = ad.Tensor(text)
    p = f"dec.{layer}."
    q = _lin(x, params, p + "fq")
    kt = _lin(text, params, p + "fkt")
    vt = _lin(text, params, p + "fvt")
    attn = ad.softmax_rows(ad.mul_const(ad.matmul_exact(q, ad.transpose(kt)), cfg.attn_scale))
    if record is not None:
        record.append(attn.data)
    out = ad.matmul_exact(attn, vt)
    if cfg.text_residual:
        out = ad.add(out, q)
    return out


def attention_bias(attn_mask):
    """Additive logit bias from a boolean foreground mask.

    Masked-out positions get a large negative bias; a row with no foreground
    at all falls back to full attention (all-zero bias for that query).
    """
    mask = np.asarray(attn_mask, dtype=bool)
    bias = np.where(mask, 0.0, MASKED_LOGIT_BIAS)
    empty = ~mask.any(axis=1)
    bias[empty] = 0.0
    return bias


def standard_decode_block(q_in, feats, attn_mask, x_prev, layer, params, cfg,
                          pos=None, record=None):
    """Masked cross-attention over pixel features, then self-attention and FFN.

    `q_in` is the already-projected query matrix (Q' from the text step, or
    f_Q of the layer input for the plain baseline).  `attn_mask` is an
    optional (R, P) boolean foreground mask.
    """
    p = f"dec.{layer}."
    k = _lin_pix(feats, params, p + "fk")
    v = _lin_pix(feats, params, p + "fv")
    if q_in.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q_in.shape} vs key width {k.shape}")
    logits = ad.mul_const(ad.matmul_exact(q_in, ad.transpose(k)), cfg.attn_scale)
    if attn_mask is not None:
        if np.shape(attn_mask) != (q_in.shape[0], feats.shape[0]):
            raise DimensionError(
                f"attention mask shape {np.shape(attn_mask)} does not match "
                f"{q_in.shape[0]} queries x {feats.shape[0]} positions")
        logits = ad.add_const(logits, attention_bias(attn_mask))
    attn = ad.softmax_rows(logits)
    if record is not None:
        record.append(attn.data)
    x = ad.add(ad.matmul_exact(attn, v), x_prev)

    # self-attention over queries (value-sorted reductions keep query
    # permutations bit-exact), then the feed-forward block, each residual
    xq = x if pos is None else ad.add(x, pos)
    sq = _lin(xq, params, p + "sq")
    sk = _lin(xq, params, p + "sk")
    sv = _lin(x, params, p + "sv")
    sattn = ad.sorted_softmax_rows(ad.mul_const(ad.matmul_exact(sq, ad.transpose(sk)), cfg.attn_scale))
    if record is not None:
        record.append(sattn.data)
    x = ad.add(x, ad.sortsum_matmul(sattn, sv))

    hidden = ad.relu(ad.add(ad.matmul_exact(x, params[p + "ffn1.w"]),
                            params[p + "ffn1.b"]))
    out = ad.add(ad.matmul_exact(hidden, params[p + "ffn2.w"]), params[p + "ffn2.b"])
    return ad.add(x, out)


def _project_text(text, params, layer):
    return _lin(text, params, f"dec.{layer}.fkt")


def decode_stack(params, text, pix, cfg, strategy=None, record=None):
    """Run the full decoder, returning the 3*L+1 per-point query states.

    `text` is an M x N_c numpy matrix (or None).  The pmp strategy with M=0
    silently degrades to the plain baseline; the concatenation strategies
    require at least one token.
    """
    strategy = strategy or cfg.strategy
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if hasattr(text, "embeddings"):  # TextTokens
        text = text.embeddings
    m = 0 if text is None else int(np.shape(text)[0])
    if m == 0:
        if strategy == "pmp":
            strategy = "none"
        elif strategy != "none":
            raise ConfigError(f"strategy {strategy!r} needs at least one text token")
    text_t = ad.Tensor(np.asarray(text, dtype=np.float64)) if m else None

    n = cfg.num_queries
    queries = params["queries.embed"]
    pos = params["queries.pos"] if cfg.query_pos else None

    if strategy == "concat":
        x = ad.concat_rows([queries, _project_text(text_t, params, 0)])
        if pos is not None:
            pos = ad.concat_rows([pos, ad.Tensor(np.zeros((m, cfg.channels)))])
    elif strategy == "text_as_queries":
        x = _project_text(text_t, params, 0)
        pos = None
    else:
        x = queries

    pe_nc_np = (pix.pixel_embed.data @ params["head.pix.w"].data
                + params["head.pix.b"].data)
    full_hw = pix.level_shapes[-1]

    states = [x]
    for layer in range(cfg.num_layers):
        level = layer % 3
        feats = pix.levels[level]
        level_hw = pix.level_shapes[level]

        probs = heads.mask_probs_np(params, states[-1].data, pe_nc_np)
        attn_mask = heads.attention_mask_next(
            probs.reshape(-1, full_hw[0], full_hw[1]), level_hw)

        x_prev = states[-1]
        if strategy == "concat_drop":
            extra = _project_text(text_t, params, layer)
            x_prev = ad.concat_rows([x_prev, extra])
            attn_mask = np.vstack([attn_mask, np.zeros((m, attn_mask.shape[1]), bool)])
            layer_pos = (ad.concat_rows([pos, ad.Tensor(np.zeros((m, cfg.channels)))])
                         if pos is not None else None)
        else:
            layer_pos = pos

        x_in = x_prev if layer_pos is None else ad.add(x_prev, layer_pos)
        if strategy == "pmp":
            q_in = text_cross_attention(x_in, text_t, layer, params, cfg, record=record)
        else:
            q_in = _lin(x_in, params, f"dec.{layer}.fq")

        x = standard_decode_block(q_in, feats, attn_mask, x_prev, layer, params,
                                  cfg, pos=layer_pos, record=record)
        if strategy == "concat_drop":
            x = ad.slice_rows(x, 0, n)
        states.append(x)
    return states
