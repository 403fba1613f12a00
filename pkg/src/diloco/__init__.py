"""Distributed low-communication training (DiLoCo) at desk scale."""

from .config import RunConfig, load_config
from .data import Corpus, load_corpus
from .engine import run_diloco
from .model import ModelConfig

__all__ = ["RunConfig", "load_config", "Corpus", "load_corpus", "run_diloco", "ModelConfig"]
__version__ = "0.1.0"
