"""Knowledge graphs from annotated spoken-language transcripts, with
small-scale graph neural network training on top.

The package turns JSONL corpora of utterances and their named entities
into bipartite utterance-entity graphs, then trains and evaluates node
classification and link prediction models over them with a
deterministic, numpy-based training stack.
"""

from .errors import (
    ConfigError,
    CorpusError,
    EntityError,
    FormatError,
    LabelError,
    MetricError,
    MissingKeyError,
    SamplingError,
    ShapeError,
    SpeechKgError,
    TrainingError,
)
from .features import (
    FeatureMatrix,
    load_features,
    random_features,
    read_embedding_file,
    read_embedding_jsonl,
    write_embedding_file,
    write_embedding_jsonl,
)
from .graph import (
    EntityMention,
    GraphSplit,
    KnowledgeGraph,
    Node,
    StatsReport,
    UtteranceRecord,
    build_graph,
    canonicalize_entity,
    graph_stats,
    read_corpus,
    split_graph,
    write_corpus,
)
from .layers import ArchSpec, GnnModel, build_model, load_checkpoint, save_checkpoint
from .metrics import average_precision, macro_one_vs_rest, roc_auc
from .tasks import (
    EvalReport,
    TaskConfig,
    TrainedModel,
    evaluate_link_predictor,
    evaluate_node_classifier,
    sample_negative_edges,
    score_edges,
    train_link_predictor,
    train_node_classifier,
    transductive_infer,
    write_loss_csv,
)
from .util import derive_seed

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "ConfigError",
    "CorpusError",
    "EntityError",
    "EntityMention",
    "EvalReport",
    "FeatureMatrix",
    "FormatError",
    "GnnModel",
    "GraphSplit",
    "KnowledgeGraph",
    "LabelError",
    "MetricError",
    "MissingKeyError",
    "Node",
    "SamplingError",
    "ShapeError",
    "SpeechKgError",
    "StatsReport",
    "TaskConfig",
    "TrainedModel",
    "TrainingError",
    "UtteranceRecord",
    "average_precision",
    "build_graph",
    "build_model",
    "canonicalize_entity",
    "derive_seed",
    "evaluate_link_predictor",
    "evaluate_node_classifier",
    "graph_stats",
    "load_checkpoint",
    "load_features",
    "macro_one_vs_rest",
    "random_features",
    "read_corpus",
    "read_embedding_file",
    "read_embedding_jsonl",
    "roc_auc",
    "sample_negative_edges",
    "save_checkpoint",
    "score_edges",
    "split_graph",
    "train_link_predictor",
    "train_node_classifier",
    "transductive_infer",
    "write_corpus",
    "write_embedding_file",
    "write_embedding_jsonl",
    "write_loss_csv",
    "__version__",
]
