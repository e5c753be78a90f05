"""Deterministic synthetic scene corpus.

Each scene places a few non-overlapping colored shapes (rectangle, disk,
triangle, striped rectangle) on a speckled background and derives exact
ground-truth masks: one per shape kind present, one for the background, and
one per applicable compound token.  Compound tokens name regions that are not
any single object - the union of two kinds, or a fixed half of one kind -
which is what makes prompt-blind proposals miss them.

Scenes persist as one directory per scene: `image.ppm` (P6), one `<token>.pgm`
mask per ground-truth token (P5, 255 = foreground), and `meta.json` listing
the token->file map and the scene's eligible prompt tokens.  A split-level
`manifest.json` records counts, seed, and the full generator config.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import BACKGROUND_TOKEN, SHAPE_KINDS
from .errors import ConfigError, GenerationError

PALETTE = (
    (0.85, 0.20, 0.20), (0.20, 0.80, 0.25), (0.25, 0.35, 0.90),
    (0.90, 0.85, 0.20), (0.85, 0.25, 0.80), (0.25, 0.85, 0.85),
    (0.95, 0.55, 0.15), (0.55, 0.30, 0.85),
)

_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


@dataclass
class SceneObject:
    kind: str
    color: int        # palette index
    geometry: tuple   # kind-specific integers


@dataclass
class Scene:
    image: np.ndarray                  # H x W x 3 floats in [0, 1]
    objects: list
    gt_masks: dict                     # token -> H x W bool
    prompts: list                      # eligible prompt tokens for this scene
    split: str = "train"
    index: int = 0
    meta: dict = field(default_factory=dict)


def _shape_mask(kind, geometry, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rectangle" or kind == "stripes":
        y0, x0, y1, x1 = geometry
        return (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
    if kind == "disk":
        cy, cx, r = geometry
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "triangle":
        y0, y1, cx, half = geometry
        frac = (yy - y0) / max(y1 - y0, 1)
        return (yy >= y0) & (yy <= y1) & (np.abs(xx - cx) <= frac * half)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _rint(rng, lo, hi):
    """Uniform integer in [lo, hi); None when the range is empty."""
    if hi <= lo:
        return None
    return int(rng.integers(lo, hi))


def _sample_object(rng, kind, h, w):
    """Geometry proposal for one shape, or None when it cannot fit."""
    if kind in ("rectangle", "stripes"):
        oh = _rint(rng, 7, min(14, h - 2))
        ow = _rint(rng, 7, min(14, w - 2))
        if oh is None or ow is None:
            return None
        y0 = _rint(rng, 1, h - 1 - oh)
        x0 = _rint(rng, 1, w - 1 - ow)
        if y0 is None or x0 is None:
            return None
        return (y0, x0, y0 + oh - 1, x0 + ow - 1)
    if kind == "disk":
        r = _rint(rng, 3, 7)
        cy = _rint(rng, 1 + r, h - 1 - r) if r is not None else None
        cx = _rint(rng, 1 + r, w - 1 - r) if r is not None else None
        if r is None or cy is None or cx is None:
            return None
        return (cy, cx, r)
    if kind == "triangle":
        th = _rint(rng, 7, min(13, h - 2))
        half = _rint(rng, 3, 7)
        if th is None or half is None:
            return None
        y0 = _rint(rng, 1, h - 1 - th)
        cx = _rint(rng, 1 + half, w - 1 - half)
        if y0 is None or cx is None:
            return None
        return (y0, y0 + th, cx, half)
    raise ConfigError(f"unknown shape kind {kind!r}")


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _paint(image, mask, color, kind, geometry):
    if kind == "stripes":
        y0 = geometry[0]
        yy = np.mgrid[0:image.shape[0], 0:image.shape[1]][0]
        band = ((yy - y0) // 2) % 2 == 0
        image[mask & band] = color
        image[mask & ~band] = np.asarray(color) * 0.35
    else:
        image[mask] = color


def half_mask(mask, side):
    """A fixed half of a mask, split at its bounding-box midline."""
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    out = mask.copy()
    if side in ("top", "bottom"):
        mid = (rows[0] + rows[-1]) // 2
        if side == "top":
            out[mid + 1:] = False
        else:
            out[:mid + 1] = False
    else:
        mid = (cols[0] + cols[-1]) // 2
        if side == "left":
            out[:, mid + 1:] = False
        else:
            out[:, :mid + 1] = False
    return out


def compound_masks(kind_masks, recipes):
    """Masks for every applicable compound recipe given the kind masks."""
    out = {}
    for name, recipe in recipes.items():
        if recipe[0] == "union":
            _, a, b = recipe
            if a in kind_masks and b in kind_masks:
                out[name] = kind_masks[a] | kind_masks[b]
        else:
            _, token, side = recipe
            if token in kind_masks:
                half = half_mask(kind_masks[token], side)
                if half.any():
                    out[name] = half
    return out


def generate_scene(cfg, split, index):
    """Render one scene; byte-deterministic per (data_seed, split, index)."""
    if cfg.distinct_kinds and cfg.objects_max > len(SHAPE_KINDS):
        raise ConfigError("objects_max exceeds the number of distinct shape kinds")
    h, w = cfg.image_h, cfg.image_w
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.data_seed, _SPLIT_IDS[split], index)))

    for _ in range(20):
        n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
        if cfg.distinct_kinds:
            kinds = list(rng.permutation(SHAPE_KINDS)[:n])
        else:
            kinds = [str(k) for k in rng.choice(SHAPE_KINDS, size=n)]
        colors = list(rng.permutation(len(PALETTE))[:n])

        occupied = np.zeros((h, w), dtype=bool)
        objects = []
        ok = True
        for kind, color in zip(kinds, colors):
            placed = False
            for _try in range(200):
                geometry = _sample_object(rng, kind, h, w)
                if geometry is None:
                    break
                mask = _shape_mask(kind, geometry, h, w)
                if not (mask & _dilate(occupied)).any():
                    occupied |= mask
                    objects.append(SceneObject(kind, int(color), geometry))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            break
    else:
        raise GenerationError(f"could not place objects for scene {split}/{index}")

    base = rng.uniform(0.10, 0.25)
    noise = rng.uniform(-0.06, 0.06, size=(h, w))
    image = np.clip(base + noise, 0.0, 0.35)[:, :, None].repeat(3, axis=2)

    kind_masks = {}
    for obj in objects:
        mask = _shape_mask(obj.kind, obj.geometry, h, w)
        _paint(image, mask, PALETTE[obj.color], obj.kind, obj.geometry)
        kind_masks[obj.kind] = kind_masks.get(obj.kind, np.zeros((h, w), bool)) | mask

    gt = dict(kind_masks)
    gt[BACKGROUND_TOKEN] = ~occupied
    recipes = cfg.recipes()
    gt.update(compound_masks(kind_masks, recipes))

    holdout = set(cfg.holdout())
    # eligible prompt tokens in a fixed vocabulary-style order
    order = list(SHAPE_KINDS) + [BACKGROUND_TOKEN] + list(recipes)
    prompts = [t for t in order if t in gt and (split != "train" or t not in holdout)]

    return Scene(image=image, objects=objects, gt_masks=gt, prompts=prompts,
                 split=split, index=index)


# ------------------------------------------------------------------ file formats

def write_ppm(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dims, maxval, raw = _parse_netpbm(data, b"P6")
    w, h = dims
    arr = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return arr.astype(np.float64) / float(maxval)


def write_pgm(path, mask):
    arr = (np.asarray(mask, dtype=bool) * np.uint8(255))
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    _, dims, _, raw = _parse_netpbm(data, b"P5")
    w, h = dims
    arr = np.frombuffer(raw, dtype=np.uint8, count=h * w).reshape(h, w)
    return arr >= 128


def _parse_netpbm(data, magic):
    if not data.startswith(magic):
        raise GenerationError(f"not a {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    return magic, (fields[0], fields[1]), fields[2], data[pos + 1:]


# ------------------------------------------------------------------ splits on disk

def generate_split(cfg, split, root):
    """Write `cfg.<split>_count` scenes under root/<split>; returns the manifest."""
    count = {"train": cfg.train_count, "val": cfg.val_count,
             "test": cfg.test_count}[split]
    split_dir = os.path.join(root, split)
    os.makedirs(split_dir, exist_ok=True)
    for index in range(count):
        scene = generate_scene(cfg, split, index)
        scene_dir = os.path.join(split_dir, f"scene_{index:05d}")
        os.makedirs(scene_dir, exist_ok=True)
        write_ppm(os.path.join(scene_dir, "image.ppm"), scene.image)
        tokens = {}
        for token, mask in scene.gt_masks.items():
            fname = f"{token}.pgm"
            write_pgm(os.path.join(scene_dir, fname), mask)
            tokens[token] = fname
        meta = {
            "tokens": tokens,
            "prompts": scene.prompts,
            "objects": [[o.kind, o.color, list(o.geometry)] for o in scene.objects],
        }
        with open(os.path.join(scene_dir, "meta.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True, separators=(",", ":"))
    manifest = {
        "split": split,
        "count": count,
        "seed": cfg.data_seed,
        "config": cfg.echo_lines(),
    }
    with open(os.path.join(split_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    return manifest


def load_split(root, split):
    """Read a persisted split back into Scene objects (images quantized)."""
    split_dir = os.path.join(root, split)
    try:
        with open(os.path.join(split_dir, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise GenerationError(f"cannot read manifest under {split_dir}: {e}") from e
    out = []
    for index in range(manifest["count"]):
        scene_dir = os.path.join(split_dir, f"scene_{index:05d}")
        with open(os.path.join(scene_dir, "meta.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        image = read_ppm(os.path.join(scene_dir, "image.ppm"))
        masks = {tok: read_pgm(os.path.join(scene_dir, fname))
                 for tok, fname in meta["tokens"].items()}
        objects = [SceneObject(k, c, tuple(g)) for k, c, g in meta["objects"]]
        out.append(Scene(image=image, objects=objects, gt_masks=masks,
                         prompts=meta["prompts"], split=split, index=index,
                         meta=meta))
    return out, manifest
