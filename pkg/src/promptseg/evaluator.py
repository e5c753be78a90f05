"""Metrics and evaluation protocols.

Two protocols cover the directional experiment:

* simple prompts: per scene, the prompt holds the present shape tokens plus
  background plus a few absent-token negatives; the semantic map is scored
  over every prompt class and IoU accumulates per class over the split.

* held-out compound prompts: for every held-out compound applicable to a
  scene, the prompt holds the compound, its constituent tokens, background,
  and negatives; the semantic map is scored over {compound, background} only
  (the paper-style "where is X" query) while the compound's IoU and the
  class-agnostic proposal recall are accumulated.

Proposal recall follows the first-stage definition: for each ground-truth
mask, the best IoU over all binarized proposals, before any classification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .config import BACKGROUND_TOKEN, SHAPE_KINDS
from .errors import ConfigError, DimensionError

_EVAL_SALT = 0xE7A1
MASK_THRESHOLD = 0.5


def iou(a, b):
    """Intersection over union of two binary masks; 1 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"iou shapes disagree: {a.shape} vs {b.shape}")
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def miou(pred_map, gt_masks, classes):
    """Per-class IoU of a label map against token masks, plus their mean.

    `classes` lists the tokens in label-index order.  Classes absent from
    both the ground truth and the prediction are excluded from the mean.
    """
    pred_map = np.asarray(pred_map)
    per_class = {}
    for idx, token in enumerate(classes):
        pred = pred_map == idx
        gt = gt_masks.get(token)
        if gt is None:
            if not pred.any():
                continue
            gt = np.zeros_like(pred)
        per_class[token] = iou(pred, gt)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def proposal_recall(proposal_masks, gt_masks):
    """Mean over ground truths of the best IoU over binarized proposals."""
    if len(proposal_masks) < 1:
        raise ConfigError("proposal_recall needs at least one proposal")
    hard = np.asarray(proposal_masks) > MASK_THRESHOLD
    scores = []
    for gt in gt_masks:
        scores.append(max(iou(p, gt) for p in hard))
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class SplitScores:
    """Split-level accumulation: per-class I/U sums and recall samples."""

    inter: dict = field(default_factory=dict)
    union: dict = field(default_factory=dict)
    recalls: list = field(default_factory=list)
    scenes: int = 0

    def add_map(self, token, pred, gt):
        self.inter[token] = self.inter.get(token, 0) + int((pred & gt).sum())
        self.union[token] = self.union.get(token, 0) + int((pred | gt).sum())

    def per_class_iou(self):
        # a class absent from both prediction and ground truth in the whole
        # split carries no signal and is excluded
        return {t: self.inter[t] / self.union[t]
                for t in self.union if self.union[t]}

    def miou(self):
        per = self.per_class_iou()
        return float(np.mean(list(per.values()))) if per else 0.0

    def recall(self):
        return float(np.mean(self.recalls)) if self.recalls else 0.0


def _negatives(bundle, exclude, count, rng, simple_only=False):
    holdout = set(bundle.cfg.holdout())
    pool = [t for t in bundle.vocab.tokens
            if t not in exclude and t not in holdout
            and not (simple_only and bundle.vocab.is_compound(t))]
    if not pool or not count:
        return []
    take = min(count, len(pool))
    return [pool[i] for i in rng.choice(len(pool), size=take, replace=False)]


def _scene_rng(cfg, scene):
    return np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _EVAL_SALT, scene.index)))


def evaluate_simple(bundle, eval_scenes, strategy=None):
    """Simple-token protocol over a split; returns a SplitScores."""
    cfg = bundle.cfg
    scores = SplitScores()
    for scene in eval_scenes:
        rng = _scene_rng(cfg, scene)
        present = [t for t in scene.prompts if not bundle.vocab.is_compound(t)]
        negatives = _negatives(bundle, set(present) | set(scene.gt_masks),
                               cfg.eval_negatives, rng, simple_only=True)
        prompt = present + negatives
        props, labels = model.segment(bundle, scene.image, prompt,
                                      strategy=strategy)
        for idx, token in enumerate(prompt):
            gt = scene.gt_masks.get(token)
            if gt is None:
                gt = np.zeros(labels.shape, dtype=bool)
            scores.add_map(token, labels == idx, gt)
        gts = [scene.gt_masks[t] for t in present if t != BACKGROUND_TOKEN]
        if gts:
            scores.recalls.append(proposal_recall(props.masks, gts))
        scores.scenes += 1
    return scores


def compound_constituents(recipe):
    if recipe[0] == "union":
        return [recipe[1], recipe[2]]
    return [recipe[1]]


def evaluate_compound(bundle, eval_scenes, tokens=None, strategy=None):
    """Held-out-compound protocol; returns (SplitScores, queries_evaluated).

    For each (scene, compound) pair with ground truth, the prompt carries the
    compound, its constituents, background, and sampled negatives; only the
    compound and background classes are scored in the map.
    """
    cfg = bundle.cfg
    recipes = cfg.recipes()
    tokens = list(cfg.holdout()) if tokens is None else list(tokens)
    scores = SplitScores()
    queries = 0
    for scene in eval_scenes:
        rng = _scene_rng(cfg, scene)
        for comp in tokens:
            gt = scene.gt_masks.get(comp)
            if gt is None:
                continue
            parts = [t for t in compound_constituents(recipes[comp])
                     if t in scene.gt_masks]
            base = [comp] + parts + [BACKGROUND_TOKEN]
            negatives = _negatives(bundle, set(base) | set(scene.gt_masks),
                                   cfg.eval_negatives, rng)
            prompt = base + negatives
            score_classes = [0, prompt.index(BACKGROUND_TOKEN)]
            props, labels = model.segment(bundle, scene.image, prompt,
                                          strategy=strategy,
                                          score_classes=score_classes)
            scores.add_map(comp, labels == 0, gt)
            scores.recalls.append(proposal_recall(props.masks, [gt]))
            queries += 1
        scores.scenes += 1
    return scores, queries


PROPOSAL_COUNTS = {"pmp": "N", "none": "N", "concat": "N+M",
                   "concat_drop": "N", "text_as_queries": "M"}


def report_lines(simple, compound, cfg, strategy):
    """Rows of the evaluation report: (section, class, iou) tuples."""
    rows = []
    for token, value in sorted(simple.per_class_iou().items()):
        rows.append(("simple", token, value))
    rows.append(("simple", "__miou__", simple.miou()))
    rows.append(("simple", "__recall__", simple.recall()))
    for token, value in sorted(compound.per_class_iou().items()):
        rows.append(("compound", token, value))
    rows.append(("compound", "__miou__", compound.miou()))
    rows.append(("compound", "__recall__", compound.recall()))
    rows.append(("meta", "__proposals__", PROPOSAL_COUNTS[strategy]))
    return rows


def render_report(rows, cfg):
    """Tab-separated report with the effective config echoed as comments."""
    out = [f"# {line}" for line in cfg.echo_lines()]
    out.append("section\tclass\tvalue")
    for section, name, value in rows:
        if isinstance(value, float):
            out.append(f"{section}\t{name}\t{value:.6f}")
        else:
            out.append(f"{section}\t{name}\t{value}")
    return "\n".join(out) + "\n"


def ablation_table(per_strategy):
    """One row per strategy: proposal count and both protocols' metrics."""
    header = ("strategy\tproposals\tsimple_miou\tsimple_recall\t"
              "compound_miou\tcompound_recall")
    lines = [header]
    for strategy, (simple, compound) in per_strategy.items():
        lines.append(
            f"{strategy}\t{PROPOSAL_COUNTS[strategy]}\t{simple.miou():.6f}\t"
            f"{simple.recall():.6f}\t{compound.miou():.6f}\t{compound.recall():.6f}")
    return "\n".join(lines) + "\n"


def ablation_report(checkpoints, eval_scenes):
    """Evaluate one checkpoint per strategy and render the comparison table.

    `checkpoints` maps strategy name to checkpoint path; a missing file is a
    config error naming the strategy.
    """
    import os

    from .cli import load_bundle

    results = {}
    for strategy, path in checkpoints.items():
        if strategy not in PROPOSAL_COUNTS:
            raise ConfigError(f"unknown strategy {strategy!r}")
        if not os.path.exists(path):
            raise ConfigError(f"missing checkpoint for strategy {strategy!r}: {path}")
        bundle = load_bundle(path)
        simple = evaluate_simple(bundle, eval_scenes, strategy=strategy)
        compound, _ = evaluate_compound(bundle, eval_scenes, strategy=strategy)
        results[strategy] = (simple, compound)
    return ablation_table(results), results
