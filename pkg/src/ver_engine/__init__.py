"""Knowledge-aware visual entity retrieval over precomputed encoder features.

A trainable cross-attention adaptor turns frozen text-token embeddings and
image patch features into unit-norm entity embeddings; contrastive training
with synthesized hard negatives sharpens them; retrieval scores entities by
the maximum cosine over their per-image embeddings.
"""

from .adaptor import (
    AdaptorConfig,
    AdaptorParams,
    EntityEmbedding,
    PatchFeatures,
    QueryEmbedding,
    TokenEmbeddings,
    adaptor_forward,
    embed_query,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .evalbench import SynthSpec, eval_retrieval, gen_synthetic_kb, harmonic_mean
from .index import IndexShard, build_ivf, load_index, query, query_ivf, save_index
from .store import FeatureBundle, FeatureStore, QuerySet, validate_store, write_store
from .training import TrainConfig, infonce_loss, train

__version__ = "0.1.0"

__all__ = [
    "AdaptorConfig",
    "AdaptorParams",
    "EntityEmbedding",
    "FeatureBundle",
    "FeatureStore",
    "IndexShard",
    "PatchFeatures",
    "QueryEmbedding",
    "QuerySet",
    "SynthSpec",
    "TokenEmbeddings",
    "TrainConfig",
    "adaptor_forward",
    "build_ivf",
    "embed_query",
    "eval_retrieval",
    "gen_synthetic_kb",
    "harmonic_mean",
    "infonce_loss",
    "init_params",
    "load_checkpoint",
    "load_index",
    "query",
    "query_ivf",
    "save_checkpoint",
    "save_index",
    "train",
    "validate_store",
    "write_store",
]
