"""Structure-aware robustness scores for (reference, predicted) workflow pairs.

Two complementary measures:

* node-chain score: how well the predicted workflow preserves the relative
  order of matched nodes. The matched predicted nodes are walked in
  topological order, mapped through the alignment to reference indices,
  and scored by the length ``l`` of the longest strictly increasing
  subsequence; precision is ``l / |V_pred|`` and recall ``l / |V_ref|``
  over the full node counts. When the reference admits several topological
  orders, the one maximizing ``l`` is used (exactly, for small matched
  sets).

* graph-structure score: how well dependency structure is preserved.
  Predicted edges with both endpoints matched are projected onto reference
  nodes; reachability pairs of the projected graph are compared against
  reachability pairs of the reference restricted to the matched node set,
  as a set-overlap F1.

Both scores are similarities (1 = structurally identical); the
corresponding discrepancy is ``1 - f1``, which is what cluster risk
aggregates.
"""
from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .alignment import Embedder, EmbeddingVector, NodeAlignment, align_workflows
from .graph import WorkflowError, WorkflowGraph, normalize, validate_dag

DEFAULT_MAX_EXACT_ORDERS = 10


@dataclass(frozen=True)
class NodeChainScore:
    lis_length: int
    precision: float
    recall: float
    f1: float
    heuristic: bool = False

    @property
    def discrepancy(self) -> float:
        return 1.0 - self.f1


@dataclass(frozen=True)
class GraphStructureScore:
    precision: float
    recall: float
    f1: float
    pred_pairs: int
    ref_pairs: int
    common: int

    @property
    def discrepancy(self) -> float:
        return 1.0 - self.f1


@dataclass(frozen=True)
class VariantScore:
    """Scores for one perturbation variant against the cluster reference."""

    tag: str
    kind: str
    band: str | None
    f1_node: float
    f1_graph: float
    node: NodeChainScore | None = None
    graph: GraphStructureScore | None = None
    error: str | None = None


@dataclass(frozen=True)
class ClusterRisk:
    per_variant: tuple[VariantScore, ...]
    risk_node: float
    risk_graph: float
    per_band: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class ClusterStats:
    """Embedding-space shift of a cluster's variants relative to its original."""

    bias: EmbeddingVector
    bias_norm: float
    variance: float


def topological_sequence(graph: WorkflowGraph, subset: Iterable[int]) -> list[int]:
    """Canonical topological order of the graph restricted to ``subset``.

    Ties are broken by ascending node index (the restriction of the
    graph-wide canonical order).
    """
    wanted = set(subset)
    for index in wanted:
        if not 0 <= index < graph.node_count:
            raise ValueError(f"subset index {index} outside 0..{graph.node_count - 1}")
    return [i for i in validate_dag(graph) if i in wanted]


def lis_length(sequence: Sequence[int]) -> int:
    """Length of the longest strictly increasing subsequence (patience method)."""
    tails: list[int] = []
    for value in sequence:
        pos = bisect_left(tails, value)
        if pos == len(tails):
            tails.append(value)
        else:
            tails[pos] = value
    return len(tails)


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _reachable_sets(nodes: Sequence[int], edges: Iterable[tuple[int, int]]) -> dict[int, set[int]]:
    """Per-node forward reachability (path length >= 1) via BFS."""
    node_set = set(nodes)
    succs: dict[int, list[int]] = {n: [] for n in node_set}
    for u, v in edges:
        if u in node_set and v in node_set:
            succs[u].append(v)
    closure: dict[int, set[int]] = {}
    for source in node_set:
        seen: set[int] = set()
        stack = list(succs[source])
        while stack:
            node = stack.pop()
            if node not in seen:
                seen.add(node)
                stack.extend(succs[node])
        closure[source] = seen
    return closure


def reachability_pairs(
    nodes: Iterable[int], edges: Iterable[tuple[int, int]]
) -> set[tuple[int, int]]:
    """All ordered pairs (u, v), u != v, with a directed path u -> v.

    Edges with an endpoint outside ``nodes`` are ignored; paths may only
    traverse ``nodes``. Works on arbitrary digraphs (projected edge sets
    can contain cycles), but never reports the trivial pair (u, u).
    """
    node_list = list(nodes)
    closure = _reachable_sets(node_list, edges)
    return {(u, v) for u in node_list for v in closure[u] if u != v}


def project_edges(
    predicted: WorkflowGraph, alignment: NodeAlignment
) -> set[tuple[int, int]]:
    """Map predicted edges with both endpoints matched onto reference nodes."""
    mapping = alignment.pred_to_ref()
    projected: set[tuple[int, int]] = set()
    for u, v in predicted.edges:
        if u in mapping and v in mapping:
            projected.add((mapping[u], mapping[v]))
    return projected


def _restricted_precedence(
    reference: WorkflowGraph, matched: Sequence[int]
) -> dict[int, set[int]]:
    """Ancestor relation among matched nodes, induced by full-graph reachability.

    A topological order restricted to the matched set must respect every
    reachability constraint of the full graph, not only edges inside the
    subset, so the induced partial order is taken from the closure.
    """
    closure = _reachable_sets(range(reference.node_count), reference.edges)
    matched_set = set(matched)
    preds: dict[int, set[int]] = {m: set() for m in matched}
    for u in matched:
        for v in closure[u]:
            if v in matched_set and v != u:
                preds[v].add(u)
    return preds


def _iter_linear_extensions(preds: dict[int, set[int]]):
    """Yield every linear extension of the induced partial order."""
    nodes = sorted(preds)
    remaining_preds = {n: set(p) for n, p in preds.items()}
    order: list[int] = []

    def rec():
        if len(order) == len(nodes):
            yield list(order)
            return
        for node in nodes:
            if node not in placed and not remaining_preds[node] - placed:
                placed.add(node)
                order.append(node)
                yield from rec()
                order.pop()
                placed.discard(node)

    placed: set[int] = set()
    yield from rec()


def _greedy_reference_order(preds: dict[int, set[int]], prank: dict[int, int]) -> list[int]:
    """Deterministic heuristic order favoring ascending matched-index runs.

    Kahn-style: among currently available nodes prefer the one whose
    predicted-side position extends the current ascending run; fall back
    to the smallest predicted-side position.
    """
    available = sorted((n for n, p in preds.items() if not p), key=lambda n: (prank[n], n))
    remaining = {n: set(p) for n, p in preds.items()}
    succs: dict[int, list[int]] = {n: [] for n in preds}
    for node, ps in preds.items():
        for p in ps:
            succs[p].append(node)
    order: list[int] = []
    last = -1
    while available:
        ahead = [n for n in available if prank[n] > last]
        pick = min(ahead or available, key=lambda n: (prank[n], n))
        available.remove(pick)
        order.append(pick)
        last = prank[pick]
        for child in succs[pick]:
            remaining[child].discard(pick)
            if not remaining[child]:
                available.append(child)
    return order


def node_chain_score(
    reference: WorkflowGraph,
    predicted: WorkflowGraph,
    alignment: NodeAlignment,
    *,
    max_exact_orders: int = DEFAULT_MAX_EXACT_ORDERS,
) -> NodeChainScore:
    """Node-chain robustness of the predicted workflow.

    Builds the sequence of reference positions of the matched predicted
    nodes (predicted side walked in canonical topological order) and
    takes the LIS length, maximized over reference topological orders.
    The maximization is exact while the matched reference set has at most
    ``max_exact_orders`` nodes; beyond that a deterministic greedy order
    is used and the result is flagged ``heuristic``.
    """
    n_pred = predicted.node_count
    n_ref = reference.node_count
    if n_pred == 0 or n_ref == 0 or not alignment.pairs:
        return NodeChainScore(lis_length=0, precision=0.0, recall=0.0, f1=0.0)

    tau_p = topological_sequence(predicted, alignment.matched_pred())
    pred_to_ref = alignment.pred_to_ref()
    mapped = [pred_to_ref[v] for v in tau_p]
    matched_refs = sorted(alignment.matched_ref())
    prank = {ref: pos for pos, ref in enumerate(mapped)}

    preds = _restricted_precedence(reference, matched_refs)
    heuristic = False
    best = 0
    if len(matched_refs) <= max_exact_orders:
        upper = len(mapped)
        for extension in _iter_linear_extensions(preds):
            rank = {ref: pos for pos, ref in enumerate(extension)}
            best = max(best, lis_length([rank[r] for r in mapped]))
            if best == upper:
                break
    else:
        heuristic = True
        extension = _greedy_reference_order(preds, prank)
        rank = {ref: pos for pos, ref in enumerate(extension)}
        best = lis_length([rank[r] for r in mapped])

    precision = best / n_pred
    recall = best / n_ref
    return NodeChainScore(
        lis_length=best,
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        heuristic=heuristic,
    )


def graph_structure_score(
    reference: WorkflowGraph,
    predicted: WorkflowGraph,
    alignment: NodeAlignment,
) -> GraphStructureScore:
    """Graph-structure robustness via reachability-pair overlap.

    Both pair sets live on the matched reference nodes: the predicted set
    from projected edges, the reference set from reference edges
    restricted to the matched nodes. If both sets are empty the graphs
    are vacuously identical on the matched set (f1 = 1); if exactly one
    is empty, f1 = 0.
    """
    matched = sorted(alignment.matched_ref())
    projected = project_edges(predicted, alignment)
    matched_set = set(matched)
    ref_edges = [(u, v) for u, v in reference.edges if u in matched_set and v in matched_set]
    pred_pairs = reachability_pairs(matched, projected)
    ref_pairs = reachability_pairs(matched, ref_edges)
    common = len(pred_pairs & ref_pairs)
    if not pred_pairs and not ref_pairs:
        return GraphStructureScore(
            precision=1.0, recall=1.0, f1=1.0, pred_pairs=0, ref_pairs=0, common=0
        )
    precision = common / len(pred_pairs) if pred_pairs else 0.0
    recall = common / len(ref_pairs) if ref_pairs else 0.0
    return GraphStructureScore(
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        pred_pairs=len(pred_pairs),
        ref_pairs=len(ref_pairs),
        common=common,
    )


@dataclass(frozen=True)
class TaggedWorkflow:
    """A perturbation variant's workflow; ``graph`` is None if ingestion failed."""

    tag: str
    graph: WorkflowGraph | None
    kind: str = "unknown"
    band: str | None = None
    error: str | None = None


def score_pair(
    reference: WorkflowGraph,
    predicted: WorkflowGraph,
    embedder: Embedder,
    beta_match_threshold: float,
    *,
    unroll_default: int = 3,
    max_exact_orders: int = DEFAULT_MAX_EXACT_ORDERS,
) -> tuple[NodeChainScore, GraphStructureScore]:
    """Normalize, align, and score a (reference, predicted) pair."""
    ref = normalize(reference, unroll_default)
    pred = normalize(predicted, unroll_default)
    alignment = align_workflows(ref.labels(), pred.labels(), embedder, beta_match_threshold)
    node = node_chain_score(ref, pred, alignment, max_exact_orders=max_exact_orders)
    graph = graph_structure_score(ref, pred, alignment)
    return node, graph


def cluster_risk(
    reference_workflow: WorkflowGraph,
    variant_workflows: Sequence[TaggedWorkflow],
    embedder: Embedder,
    beta_match_threshold: float,
    *,
    unroll_default: int = 3,
    max_exact_orders: int = DEFAULT_MAX_EXACT_ORDERS,
) -> ClusterRisk:
    """Mean structural discrepancy (1 - f1) of the variants vs the reference.

    A variant that fails normalization or scoring contributes the maximal
    discrepancy (both f1 = 0) with an error annotation instead of
    aborting the cluster. When variant tags carry intensity bands,
    per-band sub-risks are reported as well.
    """
    if not variant_workflows:
        raise ValueError("cluster_risk requires at least one variant")
    scores: list[VariantScore] = []
    for variant in variant_workflows:
        if variant.graph is None:
            scores.append(
                VariantScore(
                    tag=variant.tag,
                    kind=variant.kind,
                    band=variant.band,
                    f1_node=0.0,
                    f1_graph=0.0,
                    error=variant.error or "workflow missing",
                )
            )
            continue
        try:
            node, graph = score_pair(
                reference_workflow,
                variant.graph,
                embedder,
                beta_match_threshold,
                unroll_default=unroll_default,
                max_exact_orders=max_exact_orders,
            )
        except WorkflowError as exc:
            scores.append(
                VariantScore(
                    tag=variant.tag,
                    kind=variant.kind,
                    band=variant.band,
                    f1_node=0.0,
                    f1_graph=0.0,
                    error=str(exc),
                )
            )
            continue
        scores.append(
            VariantScore(
                tag=variant.tag,
                kind=variant.kind,
                band=variant.band,
                f1_node=node.f1,
                f1_graph=graph.f1,
                node=node,
                graph=graph,
            )
        )
    risk_node = math.fsum(1.0 - s.f1_node for s in scores) / len(scores)
    risk_graph = math.fsum(1.0 - s.f1_graph for s in scores) / len(scores)
    per_band: dict[str, tuple[float, float]] = {}
    for band in sorted({s.band for s in scores if s.band}):
        members = [s for s in scores if s.band == band]
        per_band[band] = (
            math.fsum(1.0 - s.f1_node for s in members) / len(members),
            math.fsum(1.0 - s.f1_graph for s in members) / len(members),
        )
    return ClusterRisk(
        per_variant=tuple(scores),
        risk_node=risk_node,
        risk_graph=risk_graph,
        per_band=per_band,
    )


def cluster_embedding_stats(
    original_instruction: str,
    variants: Sequence[str],
    embedder: Embedder,
) -> ClusterStats:
    """Bias and variance of variant embeddings relative to the original.

    With difference vectors ``d_i = embed(variant_i) - embed(original)``,
    bias is the element-wise mean of the ``d_i`` and variance is the root
    mean square of the residual norms ``||d_i - mean||``.
    """
    if not variants:
        raise ValueError("cluster_embedding_stats requires at least one variant")
    vectors = embedder.embed([original_instruction] + list(variants))
    base = vectors[0].as_array()
    diffs = np.stack([v.as_array() - base for v in vectors[1:]])
    mean = diffs.mean(axis=0)
    residuals = diffs - mean
    variance = float(np.sqrt(np.mean(np.sum(residuals * residuals, axis=1))))
    return ClusterStats(
        bias=EmbeddingVector.from_values(mean),
        bias_norm=float(np.linalg.norm(mean)),
        variance=variance,
    )
