"""Trainable toy image encoder and pixel decoder.

Feature maps are carried as (H*W, C) tensors in row-major pixel order.  The
encoder downsamples twice with 3x3 local mixing (stride 2, 2, 1) to produce
the H/4 x W/4 visual feature; the pixel decoder upsamples it back through
nearest-neighbor resizes and 1x1 projections with additive skips from the
encoder stages, yielding three levels at H/4, H/2 and full resolution plus a
full-resolution pixel embedding for mask logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError

_IDX_CACHE = {}


def _conv_indices(h, w, stride):
    """Row indices into a zero-padded flat image for a 3x3 window walk."""
    key = (h, w, stride)
    cached = _IDX_CACHE.get(key)
    if cached is not None:
        return cached
    out_h = (h - 1) // stride + 1
    out_w = (w - 1) // stride + 1
    pad = h * w  # index of the appended zero row
    idx = np.full((out_h, out_w, 3, 3), pad, dtype=np.intp)
    for i in range(out_h):
        for j in range(out_w):
            for di in range(3):
                for dj in range(3):
                    r = i * stride - 1 + di
                    c = j * stride - 1 + dj
                    if 0 <= r < h and 0 <= c < w:
                        idx[i, j, di, dj] = r * w + c
    flat = idx.reshape(-1)
    _IDX_CACHE[key] = (flat, out_h, out_w)
    return _IDX_CACHE[key]


def _upsample_indices(h, w):
    """Nearest-neighbor source index for each pixel of the 2x upsampled map."""
    key = ("up", h, w)
    cached = _IDX_CACHE.get(key)
    if cached is None:
        rows = np.repeat(np.arange(h), 2)
        cols = np.repeat(np.arange(w), 2)
        cached = (rows[:, None] * w + cols[None, :]).reshape(-1)
        _IDX_CACHE[key] = cached
    return cached


def conv3x3(x, weight, bias, h, w, stride):
    """3x3 convolution over a flat (H*W, Cin) map, zero padding of one pixel."""
    cin = x.shape[1]
    if weight.shape[0] != 9 * cin:
        raise DimensionError(f"conv weight rows {weight.shape[0]} != 9*{cin}")
    idx, out_h, out_w = _conv_indices(h, w, stride)
    padded = ad.concat_rows([x, ad.Tensor(np.zeros((1, cin)))])
    patches = ad.reshape(ad.take_rows(padded, idx), (out_h * out_w, 9 * cin))
    return ad.add(ad.matmul(patches, weight), bias), out_h, out_w


def _linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


@dataclass
class PixelFeatures:
    """Three pixel-feature levels plus the full-resolution pixel embedding."""

    levels: list          # tensors (Hl*Wl, C), resolutions H/4, H/2, H
    level_shapes: list    # [(H/4, W/4), (H/2, W/2), (H, W)]
    pixel_embed: object   # tensor (H*W, C)


def init_backbone_params(rng, cfg):
    c = cfg.channels

    def lin(rows, cols):
        return ad.Tensor(rng.standard_normal((rows, cols)) / np.sqrt(rows),
                         requires_grad=True)

    def zeros(n):
        return ad.Tensor(np.zeros(n), requires_grad=True)

    params = {
        "enc.c1.w": lin(9 * 3, c), "enc.c1.b": zeros(c),
        "enc.c2.w": lin(9 * c, c), "enc.c2.b": zeros(c),
        "enc.c3.w": lin(9 * c, c), "enc.c3.b": zeros(c),
        "pix.l0.w": lin(c, c), "pix.l0.b": zeros(c),
        "pix.l1.w": lin(c, c), "pix.l1.b": zeros(c),
        "pix.skip1.w": lin(c, c),
        "pix.l2.w": lin(c, c), "pix.l2.b": zeros(c),
        "pix.skip2.w": lin(3, c),
        "pix.out.w": lin(c, c), "pix.out.b": zeros(c),
    }
    return params


def check_image(image):
    """Validate the H x W x 3 float image contract and return it as float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"image must be H x W x 3, got {arr.shape}")
    if arr.shape[0] % 4 or arr.shape[1] % 4:
        raise DimensionError(f"image sides must be divisible by 4, got {arr.shape[:2]}")
    if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
        raise DimensionError("image values must be finite and inside [0, 1]")
    return arr


def encode(params, image, return_stages=False):
    """Image -> visual feature f_I at H/4 x W/4 (flat), differentiable."""
    arr = check_image(image)
    h, w = arr.shape[:2]
    x = ad.Tensor(arr.reshape(h * w, 3))
    s1, h1, w1 = conv3x3(x, params["enc.c1.w"], params["enc.c1.b"], h, w, 2)
    s1 = ad.relu(s1)
    s2, h2, w2 = conv3x3(s1, params["enc.c2.w"], params["enc.c2.b"], h1, w1, 2)
    s2 = ad.relu(s2)
    f_i, _, _ = conv3x3(s2, params["enc.c3.w"], params["enc.c3.b"], h2, w2, 1)
    f_i = ad.relu(f_i)
    if return_stages:
        return f_i, {"image": x, "s1": s1, "shapes": ((h, w), (h1, w1), (h2, w2))}
    return f_i


def pixel_decode(params, f_i, stages):
    """Visual feature -> three pixel levels and the pixel embedding."""
    (h, w), (h1, w1), (h2, w2) = stages["shapes"]
    l0 = ad.relu(_linear(f_i, params["pix.l0.w"], params["pix.l0.b"]))
    up1 = ad.take_rows(l0, _upsample_indices(h2, w2))
    l1 = ad.relu(ad.add(_linear(up1, params["pix.l1.w"], params["pix.l1.b"]),
                        ad.matmul(stages["s1"], params["pix.skip1.w"])))
    up2 = ad.take_rows(l1, _upsample_indices(h1, w1))
    l2 = ad.relu(ad.add(_linear(up2, params["pix.l2.w"], params["pix.l2.b"]),
                        ad.matmul(stages["image"], params["pix.skip2.w"])))
    pixel_embed = _linear(l2, params["pix.out.w"], params["pix.out.b"])
    return PixelFeatures(levels=[l0, l1, l2],
                         level_shapes=[(h2, w2), (h1, w1), (h, w)],
                         pixel_embed=pixel_embed)


def forward_features(params, image):
    """encode + pixel_decode in one call."""
    f_i, stages = encode(params, image, return_stages=True)
    return pixel_decode(params, f_i, stages)
