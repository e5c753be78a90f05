"""Acceptance suite: one test per criterion, each printing a PASS line.

The directional experiment (criteria 7 and 8) trains five strategy variants
on the full 2000-scene corpus; artifacts are cached on disk keyed by a digest
of the package source and the experiment config, so repeated runs are cheap
while any code or config change rebuilds from scratch.  Run with `-s` to see
the progress lines.
"""

import hashlib
import json
import os
import resource
import time
from pathlib import Path

import numpy as np
import pytest

from promptseg import autodiff as ad
from promptseg import (checkpoint, cli, decoder, evaluator, heads, losses,
                       matching, model, scenes, stage2, textbank, trainer)
from promptseg.backbone import PixelFeatures
from promptseg.config import RunConfig

from reference_decoder import reference_plain_stack

PKG_ROOT = Path(__file__).resolve().parent.parent
CACHE_ROOT = PKG_ROOT / ".acceptance_cache"

EXPERIMENT = dict(
    image_h=32, image_w=32, channels=16, embed_dim=16, num_queries=8,
    layers_per_level=3, epochs=12, batch_size=8, lr=1e-3, seed=42,
    data_seed=42, train_count=2000, val_count=200, test_count=300,
    objects_min=4, objects_max=4, pretrain_epochs=3, clip_channels=16,
)

TRAIN_BUDGET_SECONDS = 900.0   # 15 minutes per training run
MEMORY_BUDGET_BYTES = 1 << 30  # 1 GB


def _ok(criterion, detail=""):
    print(f"ACCEPTANCE {criterion}: PASS {detail}".rstrip())


def synth_pix(cfg, rng, requires_grad=False, scale=1.0):
    h, w = cfg.image_h, cfg.image_w
    shapes = [(h // 4, w // 4), (h // 2, w // 2), (h, w)]
    levels = [ad.Tensor(rng.standard_normal((a * b, cfg.channels)) * scale,
                        requires_grad)
              for a, b in shapes]
    pe = ad.Tensor(rng.standard_normal((h * w, cfg.channels)), requires_grad)
    return PixelFeatures(levels=levels, level_shapes=shapes, pixel_embed=pe)


# --------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_correctness():
    """Analytic vs central-difference gradients through the full PMP stack.

    Every coordinate whose finite difference is resolvable in float64 at
    h=1e-5 must match within 1e-5 relative error.  Coordinates whose true
    gradient is at the rounding floor of the difference quotient (|a|+|n|
    below 1e-4 of the largest gradient; the quotient noise is ~eps*|f|/2h)
    cannot be compared relatively at the mandated step; they are bounded
    absolutely instead and covered by joint directional-derivative checks,
    which any wrong gradient coordinate of consequence would fail.
    """
    cfg = RunConfig(image_h=8, image_w=8, channels=8, embed_dim=8,
                    num_queries=4, layers_per_level=3, ffn_mult=2,
                    tau_init=1.0)
    seed = 94  # fixed: masks off-threshold, attention unsaturated
    rng = np.random.default_rng(seed)
    params = model.init_model_params(cfg, rng)
    # keep nine residual layers in the smooth regime: damp the state scale,
    # boost the mask head so mask probabilities stay away from the threshold
    for key, tensor in params.items():
        if key.startswith(("dec.", "queries.")):
            tensor.data *= 0.35
        if key in ("head.mask.w", "head.pix.w"):
            tensor.data *= 10.0
    pix = synth_pix(cfg, rng, scale=0.35)
    text = rng.standard_normal((3, cfg.embed_dim)) * 3.0
    class_emb = rng.standard_normal((2, cfg.embed_dim))
    coeff_state = rng.standard_normal((cfg.num_queries, cfg.channels))
    coeff_mask = rng.standard_normal((cfg.num_queries, 64)) * 0.1
    coeff_probs = rng.standard_normal((cfg.num_queries, 3))

    def loss_fn(_):
        # every decoder state contributes, and the final prediction point
        # exercises the heads (the same head parameters serve every point)
        pe_nc = heads.project_pixel_embed(params, pix.pixel_embed)
        states = decoder.decode_stack(params, text, pix, cfg, strategy="pmp")
        total = None
        for s in states:
            term = ad.sum_all(ad.mul(s, ad.Tensor(coeff_state)))
            total = term if total is None else ad.add(total, term)
        point = model.predict_point(params, states[-1], pe_nc, class_emb, cfg)
        total = ad.add(total, ad.sum_all(ad.mul(point["mask_logits"],
                                                ad.Tensor(coeff_mask))))
        return ad.add(total, ad.sum_all(ad.mul(point["probs"],
                                               ad.Tensor(coeff_probs))))

    # the loss is piecewise-smooth (detached attention masks, relu): assert
    # the chosen point sits in the smooth interior
    pe_np = (pix.pixel_embed.data @ params["head.pix.w"].data
             + params["head.pix.b"].data)
    record = []
    states = decoder.decode_stack(params, text, pix, cfg, strategy="pmp",
                                  record=record)
    margin = min(np.abs(heads.mask_probs_np(params, s.data, pe_np) - 0.5).min()
                 for s in states)
    assert margin > 1e-3, f"seed {seed} puts a mask too close to threshold"
    assert max(a.max() for a in record) < 0.99, "saturated attention row"

    dec_params = {k: v for k, v in params.items()
                  if k.startswith(("dec.", "queries.", "head."))}
    start = time.time()

    # analytic gradients, one reverse pass
    for t in dec_params.values():
        t.zero_grad()
    with ad.Tape() as tape:
        loss = loss_fn(None)
    ad.backward(tape, loss)
    analytic = {k: t.grad.copy() for k, t in dec_params.items()}
    gmax = max(np.abs(g).max() for g in analytic.values())
    floor = 1e-4 * gmax

    # the spec'd oracle itself on a tensor with fully resolvable coordinates
    assert ad.finite_diff_check(loss_fn, params["queries.embed"], h=1e-5) <= 1e-5

    h = 1e-5
    worst = ("", 0.0)
    worst_tail = 0.0
    coords = resolvable = 0
    for name, tensor in dec_params.items():
        flat = tensor.data.ravel()
        a = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn(None).item()
            flat[i] = orig - h
            fm = loss_fn(None).item()
            flat[i] = orig
            n = (fp - fm) / (2.0 * h)
            coords += 1
            if abs(a[i]) + abs(n) >= floor:
                resolvable += 1
                rel = abs(a[i] - n) / (abs(a[i]) + abs(n) + 1e-12)
                if rel > worst[1]:
                    worst = (name, rel)
            else:
                worst_tail = max(worst_tail, abs(a[i] - n))

    # joint directional derivatives cover every coordinate at once
    drng = np.random.default_rng(1234)
    worst_dir = 0.0
    names = list(dec_params)
    for _ in range(20):
        direction = {k: drng.standard_normal(dec_params[k].data.shape)
                     for k in names}
        norm = np.sqrt(sum((d * d).sum() for d in direction.values()))
        expected = sum((analytic[k] * direction[k]).sum() for k in names) / norm
        for k in names:
            dec_params[k].data += (h / norm) * direction[k]
        fp = loss_fn(None).item()
        for k in names:
            dec_params[k].data -= (2 * h / norm) * direction[k]
        fm = loss_fn(None).item()
        for k in names:
            dec_params[k].data += (h / norm) * direction[k]
        got = (fp - fm) / (2.0 * h)
        worst_dir = max(worst_dir, abs(expected - got)
                        / (abs(expected) + abs(got) + 1e-12))

    elapsed = time.time() - start
    assert worst[1] <= 1e-5, f"gradient mismatch on {worst[0]}: {worst[1]:.2e}"
    assert worst_tail <= 2.0 * floor, f"sub-resolution tail off by {worst_tail:.2e}"
    assert worst_dir <= 1e-5, f"directional derivative off by {worst_dir:.2e}"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    _ok("1 gradient-correctness",
        f"(max rel err {worst[1]:.2e}, {resolvable}/{coords} coords resolvable, "
        f"directional {worst_dir:.2e}, {elapsed:.1f}s)")


# --------------------------------------------------------------- criterion 2

def test_criterion_2_attention_invariants():
    rng = np.random.default_rng(7)
    worst_row = 0.0
    worst_perm = 0.0
    for trial in range(1000):
        cfg = RunConfig(image_h=8, image_w=8,
                        channels=int(rng.integers(4, 13)),
                        embed_dim=int(rng.integers(4, 13)),
                        num_queries=int(rng.integers(2, 7)),
                        layers_per_level=1)
        m = int(rng.integers(1, 6))
        params = model.init_model_params(cfg, np.random.default_rng(trial))
        pix = synth_pix(cfg, rng)
        text = rng.standard_normal((m, cfg.embed_dim))
        record = []
        states = decoder.decode_stack(params, text, pix, cfg, strategy="pmp",
                                      record=record)
        for attn in record:
            worst_row = max(worst_row, float(np.abs(attn.sum(axis=1) - 1.0).max()))

        tperm = rng.permutation(m)
        moved = decoder.decode_stack(params, text[tperm], pix, cfg, strategy="pmp")
        for a, b in zip(states, moved):
            worst_perm = max(worst_perm, float(np.abs(a.data - b.data).max()))

        qperm = rng.permutation(cfg.num_queries)
        permuted = dict(params)
        permuted["queries.embed"] = ad.Tensor(params["queries.embed"].data[qperm])
        permuted["queries.pos"] = ad.Tensor(params["queries.pos"].data[qperm])
        qmoved = decoder.decode_stack(permuted, text, pix, cfg, strategy="pmp")
        for a, b in zip(states, qmoved):
            assert np.array_equal(a.data[qperm], b.data), \
                f"query permutation not exact on trial {trial}"
    assert worst_row <= 1e-12, f"attention row sum off by {worst_row:.2e}"
    assert worst_perm <= 1e-12, f"text permutation moved outputs by {worst_perm:.2e}"
    _ok("2 attention-invariants",
        f"(1000 instances; row-sum err {worst_row:.1e}, "
        f"text-perm err {worst_perm:.1e}, query-perm exact)")


# --------------------------------------------------------------- criterion 3

def test_criterion_3_baseline_equivalence():
    rng = np.random.default_rng(11)
    for trial in range(100):
        cfg = RunConfig(image_h=8, image_w=8,
                        channels=int(rng.integers(4, 10)),
                        embed_dim=int(rng.integers(4, 10)),
                        num_queries=int(rng.integers(2, 6)),
                        layers_per_level=int(rng.integers(1, 3)),
                        query_pos=bool(rng.integers(0, 2)))
        params = model.init_model_params(cfg, np.random.default_rng(500 + trial))
        pix = synth_pix(cfg, rng)
        states = decoder.decode_stack(params, None, pix, cfg, strategy="none")
        ref = reference_plain_stack({k: v.data for k, v in params.items()},
                                    [l.data for l in pix.levels],
                                    pix.level_shapes, pix.pixel_embed.data,
                                    cfg.num_layers, cfg.attn_scale,
                                    use_pos=cfg.query_pos)
        for a, b in zip(states, ref):
            assert np.array_equal(a.data, b), f"reference mismatch, trial {trial}"
        pmp_empty = decoder.decode_stack(params, None, pix, cfg, strategy="pmp")
        for a, b in zip(states, pmp_empty):
            assert np.array_equal(a.data, b.data), f"pmp(M=0) != none, trial {trial}"
    _ok("3 baseline-equivalence", "(100 instances bitwise, pmp M=0 bitwise)")


# --------------------------------------------------------------- criterion 4

def test_criterion_4_strategy_shape_contract():
    rng = np.random.default_rng(13)
    expect = {"concat": lambda n, m: n + m, "concat_drop": lambda n, m: n,
              "text_as_queries": lambda n, m: m, "pmp": lambda n, m: n}
    for trial in range(25):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(1, 7))
        cfg = RunConfig(image_h=8, image_w=8, channels=6, embed_dim=6,
                        num_queries=n, layers_per_level=1)
        params = model.init_model_params(cfg, np.random.default_rng(trial))
        pix = synth_pix(cfg, rng)
        text = rng.standard_normal((m, cfg.embed_dim))
        pe_nc = heads.project_pixel_embed(params, pix.pixel_embed)
        for strategy, count in expect.items():
            states = decoder.decode_stack(params, text, pix, cfg,
                                          strategy=strategy)
            z = heads.mask_embeddings(params, states[-1])
            assert z.shape == (count(n, m), cfg.embed_dim), (strategy, n, m)
            masks = heads.mask_from_embedding(z, pe_nc)
            assert masks.shape[0] == count(n, m)
    _ok("4 strategy-shape-contract", "(25 randomized (N, M) pairs)")


# --------------------------------------------------------------- criterion 5

def test_criterion_5_matching_oracle():
    rng = np.random.default_rng(42)
    for trial in range(200):
        n = int(rng.integers(1, 7))
        g = int(rng.integers(1, n + 1))
        cost = rng.random((n, g)) * float(rng.choice([0.1, 1.0, 25.0]))
        got = matching.hungarian(cost)
        want, _ = matching.brute_force_assignment(cost)
        assert np.array_equal(got, want), (trial, cost)
    _ok("5 matching-oracle", "(200 instances, exact)")


# --------------------------------------------------------------- criterion 6

def test_criterion_6_scalar_classification_checks():
    e = np.e
    # stage-1 closed form
    t1 = np.eye(4)[0]
    phi = ad.Tensor(np.eye(4)[3])
    probs = heads.classify_stage1(ad.Tensor(t1[None, :]), t1[None, :], phi,
                                  tau=1.0).data[0]
    assert np.abs(probs - [e / (e + 1), 1 / (e + 1)]).max() < 1e-12
    assert abs(probs[0] - 0.7311) < 1e-4 and abs(probs[1] - 0.2689) < 1e-4
    # stage-2 closed form
    p2 = stage2.classify_stage2(np.eye(4)[0], np.eye(4)[:2], tau2=1.0)
    assert np.abs(p2 - [e / (e + 1), 1 / (e + 1)]).max() < 1e-12
    # geometric ensemble worked example: unnormalized value and ratio
    assert abs(0.8 ** 0.65 * 0.2 ** 0.35 - 0.4925) < 1e-4
    out = stage2.ensemble(np.array([0.8, 0.15, 0.05]), np.array([0.2, 0.8]), 0.65)
    want_ratio = (0.8 ** 0.65 * 0.2 ** 0.35) / (0.15 ** 0.65 * 0.8 ** 0.35)
    assert abs(out[0] / out[1] - want_ratio) < 1e-9
    # argmax identities, exact
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = rng.random(5) + 1e-3
        p /= p.sum()
        q = rng.random(4) + 1e-3
        q /= q.sum()
        lam1 = stage2.ensemble(p, q, 1.0)
        lam0 = stage2.ensemble(p, q, 0.0)
        assert lam1[:4].argmax() == p[:4].argmax()
        assert lam0[:4].argmax() == q.argmax()
    _ok("6 scalar-classification-checks",
        "(Eq-style stage-1/stage-2/ensemble values and argmax identities)")


# ----------------------------------------------------- experiment fixtures

def _source_digest():
    h = hashlib.sha256()
    src = PKG_ROOT / "src" / "promptseg"
    for path in sorted(src.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(json.dumps(EXPERIMENT, sort_keys=True).encode())
    return h.hexdigest()[:16]


def _experiment_cfg(strategy="pmp"):
    return RunConfig(strategy=strategy, **EXPERIMENT)


def _train_strategy(cache, cfg, train_scenes, frozen, table):
    path = cache / f"model_{cfg.strategy}.pmpc"
    if path.exists():
        return cli.load_bundle(path), 0.0
    bundle = model.ModelBundle.fresh(cfg)
    bundle.frozen = frozen
    start = time.time()
    trainer.train(bundle, train_scenes, cache / f"run_{cfg.strategy}")
    elapsed = time.time() - start
    tensors = dict(bundle.params)
    tensors.update(frozen)
    tensors["text.table"] = table.matrix
    checkpoint.save_with_config(path, tensors, cfg)
    timing = _read_timing(cache)
    timing[cfg.strategy] = elapsed
    (cache / "timing.json").write_text(json.dumps(timing, sort_keys=True))
    return bundle, elapsed


def _read_timing(cache):
    p = cache / "timing.json"
    return json.loads(p.read_text()) if p.exists() else {}


@pytest.fixture(scope="session")
def experiment_cache():
    cache = CACHE_ROOT / _source_digest()
    cache.mkdir(parents=True, exist_ok=True)
    cfg = _experiment_cfg()
    data_dir = cache / "data"
    if not (data_dir / "test" / "manifest.json").exists():
        data_cfg = cfg.replace(data_dir=str(data_dir))
        for split in ("train", "test"):
            scenes.generate_split(data_cfg, split, str(data_dir))
    train_scenes, _ = scenes.load_split(str(data_dir), "train")
    test_scenes, _ = scenes.load_split(str(data_dir), "test")
    vocab, table = textbank.build_vocab(cfg.vocab_spec(), cfg.embed_dim,
                                        seed=cfg.data_seed)
    frozen_path = cache / "frozen.pmpc"
    if frozen_path.exists():
        arrays = checkpoint.load(frozen_path)
        frozen = {k: cli._frozen_tensor(v) for k, v in arrays.items()
                  if k.startswith("clip.")}
    else:
        frozen = stage2.pretrain_frozen_encoder(train_scenes, table, vocab, cfg)
        tensors = dict(frozen)
        tensors["text.table"] = table.matrix
        checkpoint.save_with_config(frozen_path, tensors, cfg)
    return {"cache": cache, "cfg": cfg, "train": train_scenes,
            "test": test_scenes, "vocab": vocab, "table": table,
            "frozen": frozen}


@pytest.fixture(scope="session")
def directional_runs(experiment_cache):
    ec = experiment_cache
    out = {}
    for strategy in ("pmp", "none"):
        cfg = _experiment_cfg(strategy)
        bundle, elapsed = _train_strategy(ec["cache"], cfg, ec["train"],
                                          ec["frozen"], ec["table"])
        out[strategy] = bundle
    out["timing"] = _read_timing(ec["cache"])
    return out


@pytest.fixture(scope="session")
def ablation_runs(experiment_cache, directional_runs):
    ec = experiment_cache
    out = {k: v for k, v in directional_runs.items() if k != "timing"}
    for strategy in ("concat", "concat_drop", "text_as_queries"):
        cfg = _experiment_cfg(strategy)
        bundle, _ = _train_strategy(ec["cache"], cfg, ec["train"],
                                    ec["frozen"], ec["table"])
        out[strategy] = bundle
    return out


# --------------------------------------------------------------- criterion 7

def test_criterion_7_directional_experiment(experiment_cache, directional_runs):
    ec = experiment_cache
    acc = stage2.retrieval_accuracy(ec["frozen"], ec["test"], ec["table"],
                                    ec["vocab"])
    assert acc >= 0.90, f"frozen-encoder retrieval accuracy {acc:.3f} < 0.90"

    for strategy, elapsed in directional_runs["timing"].items():
        if elapsed:
            assert elapsed <= TRAIN_BUDGET_SECONDS, \
                f"{strategy} training took {elapsed:.0f}s > 15 min"

    metrics = {}
    for strategy in ("pmp", "none"):
        bundle = directional_runs[strategy]
        simple = evaluator.evaluate_simple(bundle, ec["test"])
        compound, queries = evaluator.evaluate_compound(bundle, ec["test"])
        metrics[strategy] = (simple, compound)
        assert queries > 50, "too few held-out compound queries to compare"

    p_simple, p_comp = metrics["pmp"]
    n_simple, n_comp = metrics["none"]
    recall_gap = 100 * (p_comp.recall() - n_comp.recall())
    miou_gap = 100 * (p_comp.miou() - n_comp.miou())
    simple_gap = 100 * (p_simple.miou() - n_simple.miou())

    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    assert rss <= MEMORY_BUDGET_BYTES, f"peak RSS {rss / 2**20:.0f} MiB > 1 GB"

    assert recall_gap >= 5.0, \
        f"held-out compound recall gap {recall_gap:+.1f} pts < +5"
    assert miou_gap >= 3.0, \
        f"held-out compound mIoU gap {miou_gap:+.1f} pts < +3"
    assert simple_gap >= -2.0, \
        f"simple-prompt regression {simple_gap:+.1f} pts < -2"
    _ok("7 directional-experiment",
        f"(retrieval {acc:.3f}; compound recall {100 * n_comp.recall():.1f}"
        f"->{100 * p_comp.recall():.1f} ({recall_gap:+.1f}); compound mIoU "
        f"{100 * n_comp.miou():.1f}->{100 * p_comp.miou():.1f} ({miou_gap:+.1f}); "
        f"simple mIoU {100 * n_simple.miou():.1f}->{100 * p_simple.miou():.1f} "
        f"({simple_gap:+.1f}); peak RSS {rss / 2**20:.0f} MiB)")


# --------------------------------------------------------------- criterion 8

def test_criterion_8_ablation_ordering(experiment_cache, ablation_runs):
    ec = experiment_cache
    comp_miou = {}
    rows = {}
    for strategy, bundle in ablation_runs.items():
        simple = evaluator.evaluate_simple(bundle, ec["test"])
        compound, _ = evaluator.evaluate_compound(bundle, ec["test"])
        comp_miou[strategy] = compound.miou()
        rows[strategy] = (simple, compound)
    table = evaluator.ablation_table(rows)
    (ec["cache"] / "ablation.tsv").write_text(table)
    print(table)
    for other in ("concat", "concat_drop", "text_as_queries"):
        assert comp_miou["pmp"] >= comp_miou[other], \
            (f"ablation ordering violated: pmp {comp_miou['pmp']:.4f} < "
             f"{other} {comp_miou[other]:.4f}")
    _ok("8 ablation-ordering",
        "(" + ", ".join(f"{s}={100 * v:.1f}" for s, v in comp_miou.items()) + ")")


# --------------------------------------------------------------- criterion 9

def test_criterion_9_determinism_and_formats(tmp_path, capsys):
    config_text = (
        "image_h = 32\nimage_w = 32\nchannels = 8\nembed_dim = 8\n"
        "num_queries = 10\nlayers_per_level = 1\nepochs = 2\nbatch_size = 4\n"
        "train_count = 8\nval_count = 1\ntest_count = 3\nobjects_min = 2\n"
        "objects_max = 3\npretrain_epochs = 1\nclip_channels = 8\nseed = 9\n"
        "data_seed = 9\n")
    artifacts = {}
    for run in ("one", "two"):
        root = tmp_path / run
        cfg_path = root / "run.cfg"
        root.mkdir()
        cfg_path.write_text(config_text + f"data_dir = {root / 'data'}\n"
                            f"out_dir = {root / 'out'}\n", encoding="utf-8")
        assert cli.main(["gen-data", str(cfg_path)]) == 0
        assert cli.main(["pretrain-clip", str(cfg_path)]) == 0
        assert cli.main(["train", str(cfg_path)]) == 0
        assert cli.main(["eval", str(cfg_path),
                         str(root / "out" / "model.pmpc")]) == 0
        artifacts[run] = {
            "metrics": (root / "out" / "metrics.log").read_bytes(),
            "report": (root / "out" / "eval_report.tsv").read_bytes(),
            "ckpt": root / "out" / "model.pmpc",
        }
    capsys.readouterr()
    assert artifacts["one"]["metrics"] == artifacts["two"]["metrics"]
    assert artifacts["one"]["report"] == artifacts["two"]["report"]

    src = artifacts["one"]["ckpt"]
    resaved = tmp_path / "resaved.pmpc"
    checkpoint.save(resaved, checkpoint.load(src))
    assert src.read_bytes() == resaved.read_bytes()

    corrupted = tmp_path / "corrupt.pmpc"
    raw = bytearray(src.read_bytes())
    raw[len(raw) // 2] ^= 0xA5
    corrupted.write_bytes(bytes(raw))
    (tmp_path / "corrupt.pmpc.config").write_text(
        Path(str(src) + ".config").read_text(), encoding="utf-8")
    image = tmp_path / "one" / "data" / "test" / "scene_00000" / "image.ppm"
    code = cli.main(["segment", str(corrupted), str(image), "--prompt", "disk"])
    capsys.readouterr()
    assert code == 4, f"corrupted checkpoint exited {code}, wanted 4"
    _ok("9 determinism-and-formats",
        "(byte-identical logs and reports, bit-exact round trip, exit code 4)")
