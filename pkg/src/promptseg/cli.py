"""Command-line entry point.

Subcommands cover the whole pipeline:

    promptseg gen-data      <config>                synthesize the dataset
    promptseg pretrain-clip <config>                pretrain + freeze stage 2
    promptseg train         <config>                train the mask generator
    promptseg eval          <config> <checkpoint>   evaluation reports
    promptseg segment       <checkpoint> <image> --prompt "..." [--out DIR]
    promptseg ablate        <config>                train + compare strategies

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 checksum error, 5 numeric
divergence.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint, evaluator, scenes, stage2, textbank, trainer
from . import model as model_mod
from .config import (STRATEGIES, config_from_kv, parse_config, read_config_kv)
from .errors import (EXIT_CHECKSUM, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC,
                     ChecksumError, ConfigError, ContractError, DimensionError,
                     GenerationError, NumericError, PromptSegError,
                     TokenLookupError)


def _build_tables(cfg):
    vocab, table = textbank.build_vocab(cfg.vocab_spec(), cfg.embed_dim,
                                        seed=cfg.data_seed)
    return vocab, table


def _stopwords(cfg):
    if cfg.stopword_file:
        return textbank.load_stopword_file(cfg.stopword_file)
    return textbank.DEFAULT_STOPWORDS


def _frozen_path(cfg):
    return cfg.frozen_ckpt or os.path.join(cfg.out_dir, "frozen.pmpc")


def _load_frozen(path):
    arrays = checkpoint.load(path)
    frozen = {}
    for name, arr in arrays.items():
        if name.startswith("clip."):
            t = _frozen_tensor(arr)
            frozen[name] = t
    if not frozen:
        raise ConfigError(f"{path} holds no frozen-encoder tensors")
    return frozen


def _frozen_tensor(arr):
    from . import autodiff as ad
    t = ad.Tensor(arr)
    t.data.setflags(write=False)
    return t


def load_bundle(ckpt_path):
    """Rebuild a ModelBundle from a combined checkpoint + config sidecar."""
    from . import autodiff as ad
    arrays = checkpoint.load(ckpt_path)
    cfg = config_from_kv(read_config_kv(str(ckpt_path) + ".config"))
    model_arrays, frozen_arrays, table_arr = checkpoint.split_bundle_arrays(arrays)
    vocab, _ = _build_tables(cfg)
    if table_arr.shape != (len(vocab), cfg.embed_dim):
        raise ConfigError(
            f"text table in {ckpt_path} has shape {table_arr.shape}, expected "
            f"({len(vocab)}, {cfg.embed_dim})")
    table = textbank.EmbeddingTable(vocab, table_arr)
    params = {k: ad.Tensor(arr, requires_grad=True)
              for k, arr in model_arrays.items()}
    frozen = ({k: _frozen_tensor(arr) for k, arr in frozen_arrays.items()}
              or None)
    return model_mod.ModelBundle(cfg=cfg, vocab=vocab, table=table,
                                 params=params, frozen=frozen,
                                 stopwords=_stopwords(cfg))


def cmd_gen_data(args):
    cfg = parse_config(args.config)
    for split in ("train", "val", "test"):
        manifest = scenes.generate_split(cfg, split, cfg.data_dir)
        print(f"wrote {manifest['count']} scenes under {cfg.data_dir}/{split}")
    return 0


def cmd_pretrain_clip(args):
    cfg = parse_config(args.config)
    train_scenes, _ = scenes.load_split(cfg.data_dir, "train")
    vocab, table = _build_tables(cfg)
    frozen = stage2.pretrain_frozen_encoder(train_scenes, table, vocab, cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = _frozen_path(cfg)
    tensors = dict(frozen)
    tensors["text.table"] = table.matrix
    checkpoint.save_with_config(path, tensors, cfg)
    test_scenes, _ = scenes.load_split(cfg.data_dir, "test")
    acc = stage2.retrieval_accuracy(frozen, test_scenes, table, vocab)
    print(f"wrote {path}")
    print(f"retrieval_accuracy={acc:.4f}")
    return 0


def cmd_train(args):
    cfg = parse_config(args.config)
    train_scenes, _ = scenes.load_split(cfg.data_dir, "train")
    frozen = _load_frozen(_frozen_path(cfg))
    bundle = model_mod.ModelBundle.fresh(cfg)
    bundle.frozen = frozen
    bundle.stopwords = _stopwords(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    result = trainer.train(bundle, train_scenes, cfg.out_dir,
                           epoch_callback=lambda e, l: print(f"epoch={e} loss={l:.6f}"))
    path = os.path.join(cfg.out_dir, "model.pmpc")
    tensors = dict(bundle.params)
    tensors.update(frozen)
    tensors["text.table"] = bundle.table.matrix
    checkpoint.save_with_config(path, tensors, cfg)
    print(f"wrote {path}")
    print(f"wrote {result.metrics_path}")
    return 0


def cmd_eval(args):
    kv = read_config_kv(str(args.checkpoint) + ".config")
    if args.config:
        kv.update(read_config_kv(args.config))
    cfg = config_from_kv(kv)
    bundle = load_bundle(args.checkpoint)
    bundle.cfg = cfg
    test_scenes, _ = scenes.load_split(cfg.data_dir, "test")
    simple = evaluator.evaluate_simple(bundle, test_scenes)
    compound, _ = evaluator.evaluate_compound(bundle, test_scenes)
    rows = evaluator.report_lines(simple, compound, cfg, cfg.strategy)
    report = evaluator.render_report(rows, cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, "eval_report.tsv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(report)
    sys.stdout.write(report)
    print(f"wrote {out_path}")
    return 0


def cmd_segment(args):
    bundle = load_bundle(args.checkpoint)
    image = scenes.read_ppm(args.image)
    tokens = textbank.tokenize_prompt(args.prompt, bundle.vocab, bundle.stopwords)
    if not tokens:
        raise ConfigError(f"prompt {args.prompt!r} has no usable tokens")
    props, labels = model_mod.segment(bundle, image, tokens)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    for idx, token in enumerate(tokens):
        scenes.write_pgm(os.path.join(out_dir, f"{token}.pgm"), labels == idx)
        print(f"wrote {out_dir}/{token}.pgm")
    with open(os.path.join(out_dir, "labels.pgm"), "wb") as fh:
        h, w = labels.shape
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())
    overlay = image.copy()
    for idx, token in enumerate(tokens):
        color = np.asarray(scenes.PALETTE[idx % len(scenes.PALETTE)])
        sel = labels == idx
        overlay[sel] = 0.5 * overlay[sel] + 0.5 * color
    scenes.write_ppm(os.path.join(out_dir, "overlay.ppm"), overlay)
    print(f"wrote {out_dir}/labels.pgm")
    print(f"wrote {out_dir}/overlay.ppm")
    return 0


def cmd_ablate(args):
    cfg = parse_config(args.config)
    train_scenes, _ = scenes.load_split(cfg.data_dir, "train")
    test_scenes, _ = scenes.load_split(cfg.data_dir, "test")
    frozen = _load_frozen(_frozen_path(cfg))
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = {}
    for strategy in STRATEGIES:
        run_cfg = cfg.replace(strategy=strategy)
        bundle = model_mod.ModelBundle.fresh(run_cfg)
        bundle.frozen = frozen
        run_dir = os.path.join(cfg.out_dir, f"ablate_{strategy}")
        trainer.train(bundle, train_scenes, run_dir)
        path = os.path.join(run_dir, "model.pmpc")
        tensors = dict(bundle.params)
        tensors.update(frozen)
        tensors["text.table"] = bundle.table.matrix
        checkpoint.save_with_config(path, tensors, run_cfg)
        paths[strategy] = path
        print(f"trained strategy {strategy}")
    table, results = evaluator.ablation_report(paths, test_scenes)
    out_path = os.path.join(cfg.out_dir, "ablation.tsv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(f"# {line}" for line in cfg.echo_lines()) + "\n")
        fh.write(table)
    sys.stdout.write(table)
    pmp = results["pmp"][1].miou()
    for other in ("concat", "concat_drop", "text_as_queries"):
        verdict = "ok" if pmp >= results[other][1].miou() else "VIOLATED"
        print(f"ordering pmp>={other}: {verdict}")
    print(f"wrote {out_path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="promptseg",
        description="Prompt-guided mask proposals on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize train/val/test scenes")
    p.add_argument("config")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-clip", help="pretrain and freeze the stage-2 encoder")
    p.add_argument("config")
    p.set_defaults(fn=cmd_pretrain_clip)

    p = sub.add_parser("train", help="train the prompt-guided mask generator")
    p.add_argument("config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("segment", help="segment one image with a free-text prompt")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("ablate", help="train and compare all decoding strategies")
    p.add_argument("config")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ChecksumError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECKSUM
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ContractError, DimensionError, TokenLookupError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, GenerationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except PromptSegError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
