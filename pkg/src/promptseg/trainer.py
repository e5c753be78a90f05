"""End-to-end first-stage training.

Per sample the prompt holds the scene's present tokens (shape kinds plus
background), a sampled subset of its applicable compound tokens, and a few
negative tokens drawn from the training vocabulary; every prompt token that
has a ground-truth mask becomes a matching target.  Losses follow the
set-prediction recipe: Hungarian matching per prediction point, classifica-
tion cross-entropy plus the weighted mask losses, and no-object cross-entropy
on unmatched proposals.

Runs are deterministic for a fixed (config, seed): scene order, prompt
sampling, and gradient reduction all draw from seeded generators in a fixed
order.  A NaN/Inf anywhere aborts the run, keeping the last completed epoch
as the surviving checkpoint.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint, losses, model
from .config import BACKGROUND_TOKEN
from .errors import ContractError, NumericError
from .optim import Adam

_PROMPT_SALT = 0x7EA1


@dataclass
class TrainResult:
    epoch_losses: list
    metrics_path: str
    diverged: bool = False


def sample_prompt(scene, vocab, cfg, rng, holdout):
    """One training prompt, in one of two sampled shapes.

    Regular samples prompt every present simple token plus negatives.  With
    probability `compound_prompt_rate` the sample instead focuses on one
    applicable compound: the prompt names the compound, its constituent
    tokens, and background - the same shape the open-vocabulary queries take
    at test time, so the "compound token means the union of the other named
    tokens" behaviour is learnable without per-token memorization.

    Returns (prompt tokens in shuffled order, target list of (prompt index,
    token) pairs for every token that has a ground-truth mask).
    """
    from .evaluator import compound_constituents

    singles = [t for t in scene.prompts if not vocab.is_compound(t)]
    compounds = [t for t in scene.prompts if vocab.is_compound(t)]
    if compounds and rng.random() < cfg.compound_prompt_rate:
        comp = compounds[int(rng.integers(len(compounds)))]
        parts = [t for t in compound_constituents(cfg.recipes()[comp])
                 if t in scene.gt_masks]
        chosen = [comp] + parts + [BACKGROUND_TOKEN]
    else:
        chosen = list(singles)
    pool = [t for t in vocab.tokens
            if t not in holdout and t not in scene.gt_masks and t not in chosen]
    if pool and cfg.train_negatives:
        take = min(cfg.train_negatives, len(pool))
        chosen.extend(pool[i] for i in rng.choice(len(pool), size=take, replace=False))
    order = rng.permutation(len(chosen))
    prompt = [chosen[i] for i in order]
    targets = [(i, tok) for i, tok in enumerate(prompt) if tok in scene.gt_masks]
    return prompt, targets


def sample_loss(bundle, scene, prompt, targets, cfg, strategy=None):
    """Forward pass and total loss for one (scene, prompt) pair."""
    h, w = cfg.image_h, cfg.image_w
    class_emb = bundle.class_embeddings(prompt)
    rows = {"concat": cfg.num_queries + len(prompt),
            "text_as_queries": len(prompt)}.get(
        strategy or cfg.strategy, cfg.num_queries)
    if len(targets) > rows:
        raise ContractError(
            f"{len(targets)} targets exceed {rows} proposals; raise num_queries")
    _, _, points = model.forward_points(bundle.params, scene.image, class_emb,
                                        class_emb, cfg, strategy=strategy)
    gt_masks = np.stack([scene.gt_masks[tok].reshape(h * w) for _, tok in targets]) \
        .astype(np.float64) if targets else np.zeros((0, h * w))
    gt_classes = [i for i, _ in targets]
    return losses.total_loss(points, gt_masks, gt_classes, cfg)


def train(bundle, train_scenes, out_dir, strategy=None, log_name="metrics.log",
          epoch_callback=None):
    """Train the bundle's parameters in place; returns a TrainResult.

    On numeric divergence the parameters roll back to the last completed
    epoch, a `diverged.pmpc` checkpoint is written, and the NumericError is
    re-raised after the rollback.
    """
    cfg = bundle.cfg
    strategy = strategy or cfg.strategy
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, log_name)
    opt = Adam(bundle.params, lr=cfg.lr)
    holdout = set(cfg.holdout())
    snapshot = {k: t.data.copy() for k, t in bundle.params.items()}
    lines = []
    epoch_losses = []

    def flush():
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write("".join(lines))

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _PROMPT_SALT, epoch)))
        order = rng.permutation(len(train_scenes))
        sums = {"loss": 0.0, "cls": 0.0, "ce": 0.0, "dice": 0.0}
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                opt.zero_grad()
                for si in batch:
                    scene = train_scenes[si]
                    prompt, targets = sample_prompt(scene, bundle.vocab, cfg,
                                                    rng, holdout)
                    with ad.Tape() as tape:
                        loss, comps = sample_loss(bundle, scene, prompt,
                                                  targets, cfg, strategy)
                        scaled = ad.mul_const(loss, 1.0 / len(batch))
                    ad.backward(tape, scaled)
                    sums["loss"] += float(loss.data)
                    for key in ("cls", "ce", "dice"):
                        sums[key] += comps[key]
                opt.step()
        except NumericError as err:
            for key, t in bundle.params.items():
                t.data = snapshot[key]
            checkpoint.save_with_config(os.path.join(out_dir, "diverged.pmpc"),
                                        bundle.params, cfg)
            flush()
            raise NumericError(
                f"training diverged in epoch {epoch}; kept the last completed "
                f"epoch at {out_dir}/diverged.pmpc") from err

        n = len(train_scenes)
        epoch_losses.append(sums["loss"] / n)
        lines.append(
            f"epoch={epoch} loss={sums['loss'] / n:.6f} cls={sums['cls'] / n:.6f} "
            f"ce={sums['ce'] / n:.6f} dice={sums['dice'] / n:.6f}\n")
        flush()
        snapshot = {k: t.data.copy() for k, t in bundle.params.items()}
        if epoch_callback is not None:
            epoch_callback(epoch, epoch_losses[-1])
    return TrainResult(epoch_losses=epoch_losses, metrics_path=metrics_path)
