"""Pilot run of the directional experiment at reduced scale."""

import sys
import time

import numpy as np

from promptseg import evaluator, model, scenes, stage2, textbank, trainer
from promptseg.config import RunConfig


def main(train_count=600, test_count=100, epochs=8, channels=16, queries=12,
         strategies=("pmp", "none")):
    import os
    cfg = RunConfig(channels=channels, embed_dim=channels, num_queries=queries,
                    train_count=train_count, test_count=test_count,
                    data_seed=42, seed=42, epochs=epochs,
                    pretrain_epochs=3, clip_channels=16,
                    text_residual=os.environ.get('PSEG_TEXT_RESIDUAL', '0') == '1',
                    compound_prompt_rate=float(os.environ.get('PSEG_RATE', '0.5')))
    t0 = time.time()
    train = [scenes.generate_scene(cfg, "train", i) for i in range(cfg.train_count)]
    test = [scenes.generate_scene(cfg, "test", i) for i in range(cfg.test_count)]
    vocab, table = textbank.build_vocab(cfg.vocab_spec(), cfg.embed_dim, seed=cfg.data_seed)
    frozen = stage2.pretrain_frozen_encoder(train, table, vocab, cfg, seed=42)
    acc = stage2.retrieval_accuracy(frozen, test, table, vocab)
    print(f"[{time.time()-t0:6.1f}s] retrieval accuracy: {acc:.4f}", flush=True)

    results = {}
    trained_unions = [name for name, r in cfg.recipes().items()
                      if r[0] == "union" and name not in cfg.holdout()]
    for strategy in strategies:
        run_cfg = cfg.replace(strategy=strategy)
        bundle = model.ModelBundle.fresh(run_cfg)
        bundle.frozen = frozen
        t1 = time.time()
        import os as _os
        tag = _os.environ.get("PSEG_TAG", "pilot")
        res = trainer.train(bundle, train, f"/tmp/{tag}_{strategy}",
                            epoch_callback=lambda e, l: print(
                                f"  {strategy} epoch={e} loss={l:.4f}", flush=True))
        dt = time.time() - t1
        from promptseg import checkpoint
        tensors = dict(bundle.params)
        tensors.update(frozen)
        tensors["text.table"] = table.matrix
        checkpoint.save_with_config(f"/tmp/{tag}_{strategy}/model.pmpc", tensors, run_cfg)
        simple = evaluator.evaluate_simple(bundle, test)
        compound, nq = evaluator.evaluate_compound(bundle, test)
        trained_comp, _ = evaluator.evaluate_compound(bundle, test, tokens=trained_unions)
        results[strategy] = (simple, compound)
        print(f"[{time.time()-t0:6.1f}s] {strategy}: train {dt:.0f}s "
              f"simple_miou={simple.miou():.4f} simple_recall={simple.recall():.4f} "
              f"compound_miou={compound.miou():.4f} compound_recall={compound.recall():.4f} "
              f"({nq} compound queries)", flush=True)
        print(f"   TRAINED compounds: miou={trained_comp.miou():.4f} "
              f"recall={trained_comp.recall():.4f}", flush=True)
        print("   simple per-class:", {k: round(v, 3) for k, v in sorted(simple.per_class_iou().items())}, flush=True)
        print("   compound per-class:", {k: round(v, 3) for k, v in sorted(compound.per_class_iou().items())}, flush=True)

    if "pmp" in results and "none" in results:
        ps, pc = results["pmp"]
        ns, nc = results["none"]
        print(f"GAPS: recall {100*(pc.recall()-nc.recall()):+.1f} pts "
              f"(need >= +5), miou {100*(pc.miou()-nc.miou()):+.1f} pts (need >= +3), "
              f"simple {100*(ps.miou()-ns.miou()):+.1f} pts (need >= -2)", flush=True)


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:]]
    main(*args)
