"""Text-conditioned multi-granularity alignment engine for text-video retrieval.

Operates entirely on precomputed (or synthetic) embeddings: trains the small
alignment heads, scores text-video pairs at video/frame/patch granularity,
and evaluates retrieval with standard rank metrics.
"""

from .alignment import (SimilarityBundle, TextBatch, VideoBatch, aggregate_frames,
                        aggregate_patches, dynamic_temperature, forward_batch,
                        pool_video, select_patches, select_words)
from .heads import HeadParameters
from .loss import (LossConfig, contrastive_bidirectional, hierarchical_loss,
                   pearson_coefficient, pearson_regularizer)
from .retrieval import (MetricsReport, RetrievalResult, VideoIndex, build_index,
                        evaluate, retrieve_t2v, retrieve_v2t)
from .store import Corpus, load_corpus, read_embeddings, write_embeddings
from .synth import generate_synthetic_corpus
from .trainer import (AdamState, Checkpoint, TrainConfig, adam_update, fit,
                      lr_schedule, train_step)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Checkpoint", "Corpus", "HeadParameters", "LossConfig",
    "MetricsReport", "RetrievalResult", "SimilarityBundle", "TextBatch",
    "TrainConfig", "VideoBatch", "VideoIndex", "adam_update", "aggregate_frames",
    "aggregate_patches", "build_index", "contrastive_bidirectional",
    "dynamic_temperature", "evaluate", "fit", "forward_batch",
    "generate_synthetic_corpus", "hierarchical_loss", "load_corpus",
    "lr_schedule", "pearson_coefficient", "pearson_regularizer", "pool_video",
    "read_embeddings", "retrieve_t2v", "retrieve_v2t", "select_patches",
    "select_words", "train_step", "write_embeddings",
]
