"""Frozen vocabulary-to-embedding table standing in for a text encoder.

Token embeddings are seeded random unit vectors, frozen at construction.
Prompts are lowercased, split on non-alphanumeric characters, filtered by a
stopword list, and looked up in the table; unknown words are skipped with a
logged warning so free-text prompts stay usable.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TokenLookupError

log = logging.getLogger(__name__)

_SPLIT = re.compile(r"[^a-z0-9]+")

DEFAULT_STOPWORDS = frozenset(
    "a an the of and or to in on at is are this that".split()
)


@dataclass
class Vocabulary:
    """Ordered token list with dense indices and compound-target flags."""

    tokens: list[str]
    compound: dict[str, bool]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if not self.tokens:
            raise ConfigError("vocabulary is empty")
        seen = set()
        for tok in self.tokens:
            if not tok or tok != tok.lower():
                raise ConfigError(f"vocabulary token must be lowercase and non-empty: {tok!r}")
            if tok in seen:
                raise ConfigError(f"duplicate vocabulary token: {tok!r}")
            seen.add(tok)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __contains__(self, token):
        return token in self.index

    def __len__(self):
        return len(self.tokens)

    def is_compound(self, token):
        return self.compound.get(token, False)

    def simple_tokens(self):
        return [t for t in self.tokens if not self.compound.get(t, False)]


class EmbeddingTable:
    """V x N_c matrix of unit-norm rows, immutable once frozen."""

    def __init__(self, vocab, matrix):
        self.vocab = vocab
        self.matrix = np.asarray(matrix, dtype=np.float64)
        self.matrix.setflags(write=False)
        self.embed_dim = self.matrix.shape[1]

    def row(self, token):
        if token not in self.vocab:
            raise TokenLookupError(f"token not in vocabulary: {token!r}")
        return self.matrix[self.vocab.index[token]]

    def checksum(self):
        return self.matrix.tobytes()


@dataclass
class TextTokens:
    """M embedded prompt tokens plus their source strings (M may be 0)."""

    embeddings: np.ndarray  # M x N_c
    sources: list[str]

    def __len__(self):
        return len(self.sources)


def build_vocab(spec, embed_dim=32, seed=0):
    """Create a Vocabulary plus a frozen, seeded EmbeddingTable.

    `spec` is a list of (token, compound?) pairs.  Rows are drawn from a
    seeded generator and L2-normalized, so the table is deterministic for a
    given (spec, embed_dim, seed).
    """
    if not spec:
        raise ConfigError("empty vocabulary spec")
    vocab = Vocabulary([t for t, _ in spec], {t: bool(c) for t, c in spec})
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x70CE)))
    rows = rng.standard_normal((len(vocab), embed_dim))
    rows /= np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    return vocab, EmbeddingTable(vocab, rows)


def tokenize_prompt(text, vocab, stopwords=DEFAULT_STOPWORDS):
    """Split free text into known vocabulary tokens.

    Lowercases, splits on non-alphanumeric runs, drops stopwords and
    out-of-vocabulary words (the latter with a warning), de-duplicates while
    preserving first occurrence.  An empty result is legal.
    """
    out = []
    seen = set()
    for word in _SPLIT.split(text.lower()):
        if not word or word in stopwords or word in seen:
            continue
        if word not in vocab:
            log.warning("prompt word not in vocabulary, skipping: %r", word)
            seen.add(word)
            continue
        seen.add(word)
        out.append(word)
    return out


def embed_prompt(tokens, table):
    """Look up each token's frozen embedding; unknown tokens are an error."""
    rows = np.empty((len(tokens), table.embed_dim), dtype=np.float64)
    for j, tok in enumerate(tokens):
        rows[j] = table.row(tok)
    return TextTokens(rows, list(tokens))


def class_embedding_matrix(classes, table):
    """K x N_c matrix of class embeddings for classification."""
    if len(set(classes)) != len(classes):
        raise ConfigError(f"class list has duplicates: {classes}")
    return embed_prompt(classes, table).embeddings


def load_vocab_file(path):
    """Read a vocabulary spec file: one token per line, optional ' compound' suffix."""
    spec = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) == 1:
                spec.append((parts[0], False))
            elif len(parts) == 2 and parts[1] == "compound":
                spec.append((parts[0], True))
            else:
                raise ConfigError(f"bad vocabulary line: {line!r}")
    return spec


def load_stopword_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return frozenset(w.strip() for w in fh if w.strip())
