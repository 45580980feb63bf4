"""Word-knowledge graph language model in numpy.

Sentences are fused with knowledge-graph triplets into one graph per
sentence, encoded by a transformer whose attention is restricted to graph
edges, and pretrained with a masked-node objective over words, entities and
relations.
"""

from .encoder import ModelConfig, ModelParams, forward, init_params, masked_attention
from .evaluation import Pretrained, cloze_p_at_1, evaluate_completion, make_completion_splits, metrics
from .graph import BuilderConfig, WkGraph, build_graph, link_mentions, to_batch
from .kg import AliasIndex, TripletStore, load_aliases, load_triples, negative_distribution, neighbors
from .objective import ObjectiveConfig
from .optim import AdamW, AdamWConfig
from .store import EmbeddingStore
from .text import Vocabulary, tokenize
from .trainer import Dataset, TrainConfig, Trainer, build_dataset, run

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AdamWConfig", "AliasIndex", "BuilderConfig", "Dataset", "EmbeddingStore", "ModelConfig",
    "ModelParams", "ObjectiveConfig", "Pretrained", "TrainConfig", "Trainer", "TripletStore", "Vocabulary",
    "WkGraph", "build_dataset", "build_graph", "cloze_p_at_1", "evaluate_completion", "forward",
    "init_params", "link_mentions", "load_aliases", "load_triples", "make_completion_splits",
    "masked_attention", "metrics", "negative_distribution", "neighbors", "run", "to_batch", "tokenize",
]
