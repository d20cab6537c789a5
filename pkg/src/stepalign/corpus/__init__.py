"""Corpus data model, synthetic generation, persistence, and batching."""

from .batching import Batch, LabelSource, batch_iter
from .io import read_corpus, write_corpus
from .records import (Article, Corpus, CorpusError, Segment, VideoRecord,
                      split_corpus)
from .synth import SynthConfig, generate_synthetic

__all__ = [
    "Article", "Batch", "Corpus", "CorpusError", "LabelSource", "Segment",
    "SynthConfig", "VideoRecord", "batch_iter", "generate_synthetic",
    "read_corpus", "split_corpus", "write_corpus",
]
