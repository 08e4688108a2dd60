"""flowgauge: structural robustness measurement for agentic workflows.

Core surface:

* :mod:`flowgauge.graph` — workflow IR, normalization, canonical hashing
* :mod:`flowgauge.alignment` — embeddings, similarity, bipartite matching
* :mod:`flowgauge.metrics` — node-chain and graph-structure robustness
* :mod:`flowgauge.perturb` — noise injection and chat-based rewrites
* :mod:`flowgauge.mining` — preference pairs, SFT dataset, loss evaluation
* :mod:`flowgauge.cli` — the ``flowgauge`` command
"""
from .graph import (
    CanonicalKey,
    CycleError,
    GraphParseError,
    GraphValidationError,
    NodeKind,
    WorkflowGraph,
    WorkflowNode,
    canonical_hash,
    normalize,
    parse_workflow_graph,
    serialize_workflow_graph,
    validate_dag,
)
from .alignment import (
    EmbedderError,
    EmbeddingVector,
    HttpEmbedder,
    LexicalEmbedder,
    NodeAlignment,
    SimilarityMatrix,
    max_weight_matching,
    similarity_matrix,
)
from .metrics import (
    ClusterRisk,
    ClusterStats,
    GraphStructureScore,
    NodeChainScore,
    cluster_embedding_stats,
    cluster_risk,
    graph_structure_score,
    lis_length,
    node_chain_score,
    project_edges,
    reachability_pairs,
    topological_sequence,
)
from .perturb import (
    IntensityBand,
    PlanStep,
    ProtectedSpan,
    SemanticCluster,
    Variant,
    build_cluster,
    detect_protected_spans,
    inject_noise,
    llm_rewrite,
)
from .mining import (
    Candidate,
    CandidatePool,
    PreferencePair,
    ScpoHyperparams,
    SftRecord,
    build_sft_dataset,
    emit_pairs,
    preference_score,
    scpo_loss,
    select_pair,
    vote_counts,
)

__version__ = "0.1.0"
