"""Prompt-guided mask proposals for open-vocabulary segmentation at desk scale."""

from .autodiff import Tape, Tensor, backward, finite_diff_check
from .config import RunConfig, parse_config
from .estimator import PromptSegmenter
from .heads import ProposalSet
from .model import ModelBundle, segment
from .scenes import Scene, generate_scene, generate_split, load_split
from .textbank import EmbeddingTable, TextTokens, Vocabulary, build_vocab

__all__ = [
    "EmbeddingTable", "ModelBundle", "PromptSegmenter", "ProposalSet",
    "RunConfig", "Scene", "Tape", "Tensor", "TextTokens", "Vocabulary",
    "backward", "build_vocab", "finite_diff_check", "generate_scene",
    "generate_split", "load_split", "parse_config", "segment",
]

__version__ = "0.1.0"
