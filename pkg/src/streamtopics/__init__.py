"""Streaming topic modeling with stick-breaking truncation and OT merging.

The pipeline trains a stick-breaking embedded topic model per document
batch, carries consecutive models into a shared geometry with a
closed-form low-rank Gaussian Monge map, traces topic identity over
time with an unbalanced-OT matcher, and scores runs with coherence,
diversity, and dispersion metrics.
"""

from .corpus import (
    Document,
    EmbeddingTable,
    GroundTruth,
    StreamBatch,
    Vocabulary,
    WordEmbeddings,
    build_vocabulary,
    generate_synthetic_stream,
    make_synthetic_topics,
)
from .gaussot import (
    LowRankGaussian,
    TransportedSet,
    cot_merge,
    fit_low_rank_gaussian,
    middle_sqrt,
    monge_map,
    w2_gaussian,
)
from .metrics import (
    MetricReport,
    aggregate_report,
    dispersion_delta,
    harmonic_mean,
    p_metric,
    pca_project,
    top_words,
    topic_coherence,
    topic_diversity,
    topic_frequency_series,
    topic_term_count_matrix,
)
from .sbetm import (
    ModelConfig,
    ModelParams,
    active_topics,
    elbo,
    infer_theta,
    init_params,
    kl_kumaraswamy_beta,
    load_params,
    sample_kumaraswamy,
    save_params,
    stick_break,
    topic_word_matrix,
)
from .trace import (
    TopicAssignment,
    TopicRegistry,
    TransportPlan,
    dot_merge,
    epsilon_neighbor_match,
    match_threshold,
    trace_step,
    uot_mm,
    update_registry,
)
from .train import TrainConfig, TrainingDiverged, train_timestep, warm_start

__version__ = "0.1.0"

__all__ = [
    "Document",
    "EmbeddingTable",
    "GroundTruth",
    "StreamBatch",
    "Vocabulary",
    "WordEmbeddings",
    "build_vocabulary",
    "generate_synthetic_stream",
    "make_synthetic_topics",
    "LowRankGaussian",
    "TransportedSet",
    "cot_merge",
    "fit_low_rank_gaussian",
    "middle_sqrt",
    "monge_map",
    "w2_gaussian",
    "MetricReport",
    "aggregate_report",
    "dispersion_delta",
    "harmonic_mean",
    "p_metric",
    "pca_project",
    "top_words",
    "topic_coherence",
    "topic_diversity",
    "topic_frequency_series",
    "topic_term_count_matrix",
    "ModelConfig",
    "ModelParams",
    "active_topics",
    "elbo",
    "infer_theta",
    "init_params",
    "kl_kumaraswamy_beta",
    "load_params",
    "sample_kumaraswamy",
    "save_params",
    "stick_break",
    "topic_word_matrix",
    "TopicAssignment",
    "TopicRegistry",
    "TransportPlan",
    "dot_merge",
    "epsilon_neighbor_match",
    "match_threshold",
    "trace_step",
    "uot_mm",
    "update_registry",
    "TrainConfig",
    "TrainingDiverged",
    "train_timestep",
    "warm_start",
    "__version__",
]
