"""Dissect compound-prompt behaviour of pilot checkpoints."""

import sys

import numpy as np

from promptseg import evaluator, model, scenes
from promptseg.cli import load_bundle
from promptseg.config import BACKGROUND_TOKEN


def probe(path, tokens, n_scenes=40, label=""):
    bundle = load_bundle(path)
    cfg = bundle.cfg
    recipes = cfg.recipes()
    test = [scenes.generate_scene(cfg, "test", i) for i in range(n_scenes)]
    stats = {"best_iou": [], "argmax_is_comp": 0, "argmax_is_part": 0,
             "argmax_is_bg": 0, "argmax_is_noobj": 0, "n": 0,
             "comp_iou_restricted": [], "comp_iou_full": []}
    for scene in test:
        rng = np.random.default_rng((cfg.seed, 0xE7A1, scene.index))
        for comp in tokens:
            gt = scene.gt_masks.get(comp)
            if gt is None:
                continue
            parts = [t for t in evaluator.compound_constituents(recipes[comp])
                     if t in scene.gt_masks]
            prompt = [comp] + parts + [BACKGROUND_TOKEN]
            props, labels_r = model.segment(
                bundle, scene.image, prompt,
                score_classes=[0, prompt.index(BACKGROUND_TOKEN)])
            _, labels_f = model.segment(bundle, scene.image, prompt)
            hard = props.masks > 0.5
            ious = [evaluator.iou(h, gt) for h in hard]
            best = int(np.argmax(ious))
            stats["best_iou"].append(max(ious))
            cls = int(np.argmax(props.ensembled[best]))
            k = len(prompt)
            stats["argmax_is_comp"] += cls == 0
            stats["argmax_is_part"] += cls in range(1, 1 + len(parts))
            stats["argmax_is_bg"] += cls == prompt.index(BACKGROUND_TOKEN)
            stats["argmax_is_noobj"] += cls == k
            stats["comp_iou_restricted"].append(evaluator.iou(labels_r == 0, gt))
            stats["comp_iou_full"].append(evaluator.iou(labels_f == 0, gt))
            stats["n"] += 1
    n = stats["n"]
    print(f"== {label} {path} tokens={tokens}")
    print(f"   queries={n} best-proposal IoU mean={np.mean(stats['best_iou']):.3f}")
    print(f"   best-proposal ensembled argmax: comp={stats['argmax_is_comp']/n:.2f} "
          f"part={stats['argmax_is_part']/n:.2f} bg={stats['argmax_is_bg']/n:.2f} "
          f"noobj={stats['argmax_is_noobj']/n:.2f}")
    print(f"   compound IoU: restricted-scoring={np.mean(stats['comp_iou_restricted']):.3f} "
          f"full-scoring={np.mean(stats['comp_iou_full']):.3f}", flush=True)


if __name__ == "__main__":
    held = ["canyon", "glacier"]
    trained = ["harbor", "meadow", "orchard", "lagoon"]
    for strategy in ("pmp", "none"):
        path = f"/tmp/pilot_{strategy}/model.pmpc"
        probe(path, held, label=f"{strategy} HELD-OUT")
        probe(path, trained, label=f"{strategy} TRAINED")
