"""Cover-song identification for short queries.

Local embeddings per 20-second audio chunk, set-to-set MaxMean scoring,
two-stage HNSW retrieval and an mAP/MR1 evaluation harness.
"""

__version__ = "0.1.0"

from .encoder import (
    EncoderConfig,
    LocalEmbeddingSet,
    ModelParams,
    forward,
    load_params,
    save_params,
)
from .errors import (
    AudioReadError,
    ConfigError,
    CoverseekError,
    DataIntegrityError,
    FormatError,
    TrainingDivergedError,
    UnsupportedEncodingError,
)
from .evaluate import QuerySpec, average_precision, evaluate, mean_rank_first
from .index import HnswIndex
from .retrieval import query_pipeline, stage1_candidates, stage2_rerank
from .signal import AudioBuffer, ChunkedCqt, CqtConfig, extract_features
from .similarity import cosine, maxmean, maxmean_ordered
from .store import EmbeddingStore
from .train import Dataset, SyntheticCliqueConfig, TrainConfig, train

__all__ = [
    "AudioBuffer",
    "AudioReadError",
    "ChunkedCqt",
    "ConfigError",
    "CoverseekError",
    "CqtConfig",
    "DataIntegrityError",
    "Dataset",
    "EmbeddingStore",
    "EncoderConfig",
    "FormatError",
    "HnswIndex",
    "LocalEmbeddingSet",
    "ModelParams",
    "QuerySpec",
    "SyntheticCliqueConfig",
    "TrainConfig",
    "TrainingDivergedError",
    "UnsupportedEncodingError",
    "average_precision",
    "cosine",
    "evaluate",
    "extract_features",
    "forward",
    "load_params",
    "maxmean",
    "maxmean_ordered",
    "mean_rank_first",
    "query_pipeline",
    "save_params",
    "stage1_candidates",
    "stage2_rerank",
    "train",
]
