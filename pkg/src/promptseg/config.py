"""Flat key=value run configuration with documented defaults.

A config file holds `key = value` lines with `#` comments.  Unknown keys are
rejected.  The effective config (defaults overridden by the file) is echoed
into every output artifact so a run can be reproduced byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError

# Trained union pairs carry two alias tokens each: the same region answers to
# either name, so a proposal's class is decidable only from the prompt - the
# pressure that makes prompt-token routing (and with it open-vocabulary
# transfer) emerge.  The canyon/glacier pairs stay un-aliased and held out.
DEFAULT_RECIPES = (
    "harbor=union:rectangle,disk;"
    "marina=union:rectangle,disk;"
    "meadow=union:rectangle,triangle;"
    "prairie=union:rectangle,triangle;"
    "orchard=union:rectangle,stripes;"
    "grove=union:rectangle,stripes;"
    "lagoon=union:disk,triangle;"
    "cove=union:disk,triangle;"
    "canyon=union:disk,stripes;"
    "glacier=union:triangle,stripes;"
    "ridge=half:triangle,top;"
    "basin=half:disk,bottom;"
    "ledge=half:rectangle,left;"
    "rapids=half:stripes,right"
)

SHAPE_KINDS = ("rectangle", "disk", "triangle", "stripes")
BACKGROUND_TOKEN = "background"
STRATEGIES = ("pmp", "none", "concat", "concat_drop", "text_as_queries")


@dataclass
class RunConfig:
    # image and model dimensions
    image_h: int = 32           # image height, divisible by 4
    image_w: int = 32           # image width, divisible by 4
    channels: int = 32          # feature width C of backbone and decoder
    embed_dim: int = 32         # text/mask embedding width N_c
    num_queries: int = 16       # learnable queries N (paper-scale 100 works too)
    layers_per_level: int = 3   # L; total decoder layers = 3*L
    ffn_mult: int = 4           # decoder feed-forward hidden = ffn_mult * channels

    # decoding behaviour
    strategy: str = "pmp"       # pmp | none | concat | concat_drop | text_as_queries
    query_pos: bool = True      # learnable positional embeddings on queries
    text_residual: bool = False # add the query back after text cross-attention
    unscaled_logits: bool = False  # drop the 1/sqrt(C) attention logit scale
    tau_init: float = 0.07      # initial temperature (learnable, log-parameterized)

    # losses and ensembling
    lambda_ensemble: float = 0.65  # geometric-ensemble weight on stage 1
    lambda_ce: float = 5.0      # mask binary cross-entropy weight
    lambda_dice: float = 5.0    # mask dice weight
    lambda_cls: float = 2.0     # classification weight in loss and matching
    no_object_coef: float = 0.1 # scale on the unmatched-proposal no-object CE
    aux_loss: bool = True       # supervise every intermediate prediction point

    # training
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    seed: int = 42
    train_negatives: int = 4    # negative tokens sampled into each training prompt
    compound_prompt_rate: float = 0.5  # chance a sample focuses on one compound

    # evaluation
    eval_negatives: int = 2     # negative tokens added to evaluation prompts

    # vocabulary and dataset
    vocab_file: str = ""        # optional: one token per line, ' compound' suffix
    stopword_file: str = ""     # optional: one stopword per line
    compound_recipes: str = DEFAULT_RECIPES
    holdout_tokens: str = "canyon,glacier"  # compounds absent from training prompts
    objects_min: int = 3
    objects_max: int = 4
    distinct_kinds: bool = True # forbid repeated shape kinds within a scene
    train_count: int = 2000
    val_count: int = 200
    test_count: int = 300
    data_seed: int = 42

    # stage-two frozen encoder pretraining
    pretrain_epochs: int = 4
    pretrain_lr: float = 1e-3
    clip_channels: int = 24     # hidden width of the frozen encoder

    # paths
    data_dir: str = "data"
    out_dir: str = "runs/out"
    frozen_ckpt: str = ""       # frozen-encoder checkpoint consumed by training

    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_h % 4 or self.image_w % 4 or self.image_h <= 0 or self.image_w <= 0:
            raise ConfigError("image_h and image_w must be positive multiples of 4")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; pick one of {STRATEGIES}")
        if not 0.0 <= self.lambda_ensemble <= 1.0:
            raise ConfigError("lambda_ensemble must lie in [0, 1]")
        if self.tau_init <= 0:
            raise ConfigError("tau_init must be positive")
        for name in ("lambda_ce", "lambda_dice", "lambda_cls", "no_object_coef"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise ConfigError("objects_min..objects_max must be a non-empty positive range")
        if self.num_queries < 1 or self.channels < 1 or self.embed_dim < 1:
            raise ConfigError("model dimensions must be positive")
        if self.layers_per_level < 1:
            raise ConfigError("layers_per_level must be at least 1")

    @property
    def num_layers(self):
        return 3 * self.layers_per_level

    @property
    def attn_scale(self):
        return 1.0 if self.unscaled_logits else self.channels ** -0.5

    def replace(self, **kw):
        vals = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}
        vals.update(kw)
        return RunConfig(**vals)

    def echo_lines(self):
        """Effective config as `key = value` lines, parseable back by parse_config."""
        out = []
        for f in fields(self):
            if f.name == "extra":
                continue
            out.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return out

    def recipes(self):
        return parse_recipes(self.compound_recipes)

    def holdout(self):
        return [t for t in self.holdout_tokens.split(",") if t]

    def vocab_spec(self):
        """Token spec implied by this config: shapes, background, compounds."""
        if self.vocab_file:
            from .textbank import load_vocab_file
            return load_vocab_file(self.vocab_file)
        spec = [(k, False) for k in SHAPE_KINDS]
        spec.append((BACKGROUND_TOKEN, False))
        spec.extend((name, True) for name in self.recipes())
        return spec


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(raw, pytype):
    raw = raw.strip()
    if pytype is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    try:
        return pytype(raw)
    except ValueError as e:
        raise ConfigError(f"bad value {raw!r}: {e}") from e


def read_config_kv(path):
    """Raw `key = value` pairs from a config file (values unparsed)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, raw = line.split("=", 1)
        kv[key.strip()] = raw.strip()
    return kv


def config_from_kv(kv):
    """Build a RunConfig from raw string pairs; unknown keys are rejected."""
    known = {f.name: f.type for f in fields(RunConfig) if f.name != "extra"}
    types = {"int": int, "float": float, "str": str, "bool": bool}
    values = {}
    for key, raw in kv.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key!r}")
        pytype = types[known[key]] if isinstance(known[key], str) else known[key]
        values[key] = _parse_value(raw, pytype) if isinstance(raw, str) else raw
    return RunConfig(**values)


def parse_config(path=None, overrides=None):
    """Build a RunConfig from defaults, an optional file, and overrides."""
    kv = {} if path is None else read_config_kv(path)
    if overrides:
        kv.update({k: str(v) for k, v in overrides.items()})
    return config_from_kv(kv)


def parse_recipes(text):
    """Parse `name=union:a,b;name=half:token,side` into recipe dicts."""
    recipes = {}
    if not text:
        return recipes
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            name, body = chunk.split("=", 1)
            kind, args = body.split(":", 1)
        except ValueError as e:
            raise ConfigError(f"bad compound recipe {chunk!r}") from e
        name = name.strip()
        parts = [p.strip() for p in args.split(",")]
        if kind == "union":
            if len(parts) != 2:
                raise ConfigError(f"union recipe needs two tokens: {chunk!r}")
            recipes[name] = ("union", parts[0], parts[1])
        elif kind == "half":
            if len(parts) != 2 or parts[1] not in ("top", "bottom", "left", "right"):
                raise ConfigError(f"half recipe needs `token,side`: {chunk!r}")
            recipes[name] = ("half", parts[0], parts[1])
        else:
            raise ConfigError(f"unknown recipe kind {kind!r} in {chunk!r}")
    if any(name in SHAPE_KINDS or name == BACKGROUND_TOKEN for name in recipes):
        raise ConfigError("compound names must not collide with shape or background tokens")
    return recipes
