"""Workflow graph IR: parsing, validation, normalization, canonical hashing.

A workflow is a labeled directed graph of agent invocations. The on-disk
format is a UTF-8 JSON object::

    {"nodes": ["START", "step one", ...],
     "edges": [[0, 1], [1, 2], ...],
     "metadata": {...}}          # optional

Every other module consumes the normalized form produced here: loops are
unrolled into parallel replicas merged by an aggregation node, so the
normalized graph is always a DAG.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappop, heappush
from typing import Any, Iterable, Mapping, Sequence


class WorkflowError(Exception):
    """Base class for all graph-layer failures."""


class GraphParseError(WorkflowError):
    """Malformed graph document. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class GraphValidationError(WorkflowError):
    """Structurally invalid graph (bad indices, role violations, ...)."""


class CycleError(WorkflowError):
    """Raised when a cycle survives where a DAG is required.

    ``cycle`` lists the node indices of one offending cycle.
    """

    def __init__(self, cycle: Sequence[int], message: str | None = None):
        self.cycle = list(cycle)
        super().__init__(message or f"graph contains a cycle through nodes {self.cycle}")


class NodeKind(str, Enum):
    START = "start"
    AGENT = "agent"
    AGGREGATE = "aggregate"
    EXIT = "exit"


_AGGREGATE_MARKERS = ("ensemble", "aggregate", "merge", "majority", "vote")

# Loop annotations: either graph metadata {"loop_unroll": {"<node index>": k}}
# or a literal bound in a member label, e.g. "... for i in range(3) ...".
_RANGE_RE = re.compile(r"\brange\(\s*(\d+)\s*\)")


@dataclass(frozen=True)
class WorkflowNode:
    index: int
    label: str
    kind: NodeKind = NodeKind.AGENT


@dataclass(frozen=True)
class WorkflowGraph:
    """Immutable labeled digraph. Edges reference node indices."""

    nodes: tuple[WorkflowNode, ...]
    edges: tuple[tuple[int, int], ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.nodes)
        for pos, (u, v) in enumerate(self.edges):
            if not (0 <= u < n and 0 <= v < n):
                raise GraphValidationError(
                    f"edge #{pos} ({u}, {v}) references a node outside 0..{n - 1}"
                )

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def labels(self) -> list[str]:
        return [node.label for node in self.nodes]

    def successors(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for u, v in self.edges:
            out[u].append(v)
        return out

    def predecessors(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for u, v in self.edges:
            out[v].append(u)
        return out


@dataclass(frozen=True, order=True)
class CanonicalKey:
    """Stable structural identity of a normalized workflow graph.

    Equal for isomorphic graphs with equal node labels, across runs and
    platforms.
    """

    digest: str

    def __str__(self) -> str:
        return self.digest


def infer_node_kind(label: str, index: int, *, first_start: bool = True) -> NodeKind:
    """Keyword-rule kind inference for nodes in the document format.

    The format encodes kinds only in label text: the first node labeled
    START is the start, END/Exit nodes are exits, labels carrying an
    ensemble/merge marker are aggregation points, everything else is an
    agent invocation.
    """
    stripped = label.strip().lower()
    if stripped == "start" and first_start:
        return NodeKind.START
    if stripped in ("end", "exit"):
        return NodeKind.EXIT
    if any(marker in stripped for marker in _AGGREGATE_MARKERS):
        return NodeKind.AGGREGATE
    return NodeKind.AGENT


def parse_workflow_graph(
    document: str | bytes,
    *,
    kind_overrides: Mapping[str, NodeKind] | None = None,
) -> WorkflowGraph:
    """Parse a graph document into a WorkflowGraph.

    ``kind_overrides`` maps exact node labels to kinds, taking precedence
    over the keyword rules.

    Raises GraphParseError (with byte offset) on malformed JSON or shape,
    GraphValidationError on out-of-range edge indices.
    """
    if isinstance(document, bytes):
        document = document.decode("utf-8")
    try:
        payload = json.loads(document)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"invalid JSON: {exc.msg}", offset=exc.pos) from exc

    if not isinstance(payload, dict):
        raise GraphParseError("document root must be a JSON object")
    raw_nodes = payload.get("nodes")
    raw_edges = payload.get("edges")
    if not isinstance(raw_nodes, list) or not all(isinstance(x, str) for x in raw_nodes):
        raise GraphParseError("'nodes' must be an array of strings")
    if not isinstance(raw_edges, list):
        raise GraphParseError("'edges' must be an array of [from, to] pairs")

    overrides = dict(kind_overrides or {})
    nodes = []
    seen_start = False
    for index, label in enumerate(raw_nodes):
        if label in overrides:
            kind = overrides[label]
        else:
            kind = infer_node_kind(label, index, first_start=not seen_start)
        if kind is NodeKind.START:
            seen_start = True
        nodes.append(WorkflowNode(index=index, label=label, kind=kind))

    n = len(nodes)
    edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    for pos, pair in enumerate(raw_edges):
        if (
            not isinstance(pair, (list, tuple))
            or len(pair) != 2
            or not all(isinstance(x, int) and not isinstance(x, bool) for x in pair)
        ):
            raise GraphParseError(f"edge #{pos} must be a pair of integers, got {pair!r}")
        u, v = int(pair[0]), int(pair[1])
        if not (0 <= u < n and 0 <= v < n):
            raise GraphValidationError(
                f"edge #{pos} ({u}, {v}) references a node outside 0..{n - 1}"
            )
        if (u, v) not in seen:
            seen.add((u, v))
            edges.append((u, v))

    metadata = payload.get("metadata") or {}
    if not isinstance(metadata, dict):
        raise GraphParseError("'metadata' must be an object")
    return WorkflowGraph(nodes=tuple(nodes), edges=tuple(edges), metadata=metadata)


def serialize_workflow_graph(graph: WorkflowGraph) -> str:
    """Serialize back to the document format (round-trips through parse)."""
    payload: dict[str, Any] = {
        "nodes": [node.label for node in graph.nodes],
        "edges": [[u, v] for u, v in graph.edges],
    }
    if graph.metadata:
        payload["metadata"] = dict(graph.metadata)
    return json.dumps(payload, ensure_ascii=False)


def validate_roles(graph: WorkflowGraph) -> None:
    """Check role invariants for a complete workflow document.

    A valid workflow has exactly one start node, at least one exit node
    reachable from it, and non-empty labels on agent nodes. Synthetic
    sub-graphs used in scoring are not required to satisfy these.
    """
    starts = [node.index for node in graph.nodes if node.kind is NodeKind.START]
    if len(starts) != 1:
        raise GraphValidationError(f"expected exactly one start node, found {len(starts)}")
    for node in graph.nodes:
        if node.kind is NodeKind.AGENT and not node.label.strip():
            raise GraphValidationError(f"agent node {node.index} has an empty label")
    reachable = _reachable_from(graph, starts[0])
    if not any(graph.nodes[i].kind is NodeKind.EXIT for i in reachable):
        raise GraphValidationError("no exit node is reachable from the start node")


def _reachable_from(graph: WorkflowGraph, source: int) -> set[int]:
    succs = graph.successors()
    seen = {source}
    stack = [source]
    while stack:
        u = stack.pop()
        for v in succs[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def validate_dag(graph: WorkflowGraph) -> list[int]:
    """Return the canonical topological order (ties broken by node index).

    Raises CycleError carrying one cycle if the graph is not a DAG.
    """
    n = graph.node_count
    succs = graph.successors()
    indegree = [0] * n
    for _, v in graph.edges:
        indegree[v] += 1
    heap = [i for i in range(n) if indegree[i] == 0]
    heap.sort()
    order: list[int] = []
    while heap:
        u = heappop(heap)
        order.append(u)
        for v in succs[u]:
            indegree[v] -= 1
            if indegree[v] == 0:
                heappush(heap, v)
    if len(order) < n:
        raise CycleError(_find_cycle(graph))
    return order


def _find_cycle(graph: WorkflowGraph) -> list[int]:
    """Locate one cycle via iterative DFS with colors."""
    succs = graph.successors()
    color = [0] * graph.node_count  # 0 white, 1 gray, 2 black
    parent: dict[int, int] = {}
    for root in range(graph.node_count):
        if color[root] != 0:
            continue
        stack: list[tuple[int, Iterable[int]]] = [(root, iter(succs[root]))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == 0:
                    color[nxt] = 1
                    parent[nxt] = node
                    stack.append((nxt, iter(succs[nxt])))
                    advanced = True
                    break
                if color[nxt] == 1:
                    cycle = [nxt]
                    cur = node
                    while cur != nxt:
                        cycle.append(cur)
                        cur = parent[cur]
                    cycle.reverse()
                    return cycle
            if not advanced:
                color[node] = 2
                stack.pop()
    raise AssertionError("no cycle found in a graph that failed topological sort")


def _strongly_connected_components(graph: WorkflowGraph) -> list[list[int]]:
    """Tarjan's SCC, iterative. Components are returned sorted by min index."""
    n = graph.node_count
    succs = graph.successors()
    index_of = [-1] * n
    lowlink = [0] * n
    on_stack = [False] * n
    stack: list[int] = []
    components: list[list[int]] = []
    counter = 0

    for root in range(n):
        if index_of[root] != -1:
            continue
        work: list[tuple[int, int]] = [(root, 0)]
        while work:
            node, child_pos = work.pop()
            if child_pos == 0:
                index_of[node] = lowlink[node] = counter
                counter += 1
                stack.append(node)
                on_stack[node] = True
            recurse = False
            children = succs[node]
            while child_pos < len(children):
                child = children[child_pos]
                child_pos += 1
                if index_of[child] == -1:
                    work.append((node, child_pos))
                    work.append((child, 0))
                    recurse = True
                    break
                if on_stack[child]:
                    lowlink[node] = min(lowlink[node], index_of[child])
            if recurse:
                continue
            if lowlink[node] == index_of[node]:
                component = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    component.append(w)
                    if w == node:
                        break
                components.append(sorted(component))
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
    components.sort(key=lambda c: c[0])
    return components


def _loop_count(graph: WorkflowGraph, component: list[int], default: int) -> int:
    annotations = graph.metadata.get("loop_unroll")
    if isinstance(annotations, Mapping):
        for member in component:
            value = annotations.get(str(member), annotations.get(member))
            if isinstance(value, int) and value >= 1:
                return value
    for member in component:
        match = _RANGE_RE.search(graph.nodes[member].label)
        if match:
            k = int(match.group(1))
            if k >= 1:
                return k
    return default


def normalize(graph: WorkflowGraph, unroll_default: int = 3) -> WorkflowGraph:
    """Normalize a workflow graph into its canonical DAG form.

    Sequences and branches are already explicit chains of directed edges,
    so the only rewrite is loop unrolling: each cycle (nontrivial SCC or
    self-loop) is replaced by ``k`` parallel replicas of its body feeding
    a fresh aggregation node. ``k`` comes from a ``loop_unroll`` metadata
    annotation or a ``range(k)`` literal in a member label, falling back
    to ``unroll_default``. For a multi-node cycle, the entry node (the
    head) stays in place as the dispatcher and the rest of the cycle is
    replicated; a self-loop replicates the node itself. Replica labels are
    suffixed with their replica index; external out-edges of the loop
    leave from the aggregation node. Inner cycles that survive a pass are
    unrolled in later passes.

    Already-acyclic graphs come back unchanged (modulo edge dedup), so
    normalize is idempotent. If the rewrite budget is exhausted with a
    cycle still present, CycleError is raised listing it.
    """
    if unroll_default < 1:
        raise ValueError("unroll_default must be >= 1")
    graph = _dedupe_edges(graph)
    for _ in range(graph.node_count + 2):
        nontrivial = _nontrivial_sccs(graph)
        if not nontrivial:
            break
        graph = _unroll_once(graph, nontrivial, unroll_default)
    else:
        validate_dag(graph)  # raises CycleError with the remaining cycle
    validate_dag(graph)
    return graph


def _dedupe_edges(graph: WorkflowGraph) -> WorkflowGraph:
    seen: set[tuple[int, int]] = set()
    edges = []
    for edge in graph.edges:
        if edge not in seen:
            seen.add(edge)
            edges.append(edge)
    if len(edges) == len(graph.edges):
        return graph
    return WorkflowGraph(nodes=graph.nodes, edges=tuple(edges), metadata=graph.metadata)


def _nontrivial_sccs(graph: WorkflowGraph) -> list[list[int]]:
    self_loops = {u for u, v in graph.edges if u == v}
    return [
        comp
        for comp in _strongly_connected_components(graph)
        if len(comp) > 1 or comp[0] in self_loops
    ]


def _unroll_once(
    graph: WorkflowGraph, components: list[list[int]], unroll_default: int
) -> WorkflowGraph:
    scc_of: dict[int, int] = {}
    for scc_id, comp in enumerate(components):
        for member in comp:
            scc_of[member] = scc_id

    heads: dict[int, int | None] = {}
    counts: dict[int, int] = {}
    external_in = {scc_id: set() for scc_id in range(len(components))}
    for u, v in graph.edges:
        sv = scc_of.get(v)
        if sv is not None and scc_of.get(u) != sv:
            external_in[sv].add(v)
    for scc_id, comp in enumerate(components):
        counts[scc_id] = _loop_count(graph, comp, unroll_default)
        if len(comp) == 1:
            heads[scc_id] = None  # self-loop: the node itself is the body
        else:
            entries = sorted(external_in[scc_id])
            heads[scc_id] = entries[0] if entries else comp[0]

    # New node table: originals in index order (body nodes expand into k
    # replicas), then one aggregation node per component.
    new_nodes: list[WorkflowNode] = []
    kept: dict[int, int] = {}
    replicas: dict[int, list[int]] = {}
    for node in graph.nodes:
        scc_id = scc_of.get(node.index)
        if scc_id is None or node.index == heads[scc_id]:
            kept[node.index] = len(new_nodes)
            new_nodes.append(
                WorkflowNode(index=len(new_nodes), label=node.label, kind=node.kind)
            )
        else:
            ids = []
            for i in range(1, counts[scc_id] + 1):
                ids.append(len(new_nodes))
                new_nodes.append(
                    WorkflowNode(
                        index=len(new_nodes),
                        label=f"{node.label} [replica {i}]",
                        kind=node.kind,
                    )
                )
            replicas[node.index] = ids
    aggregates: dict[int, int] = {}
    for scc_id in range(len(components)):
        aggregates[scc_id] = len(new_nodes)
        new_nodes.append(
            WorkflowNode(
                index=len(new_nodes),
                label=f"aggregate {counts[scc_id]} loop replicas",
                kind=NodeKind.AGGREGATE,
            )
        )

    new_edges: list[tuple[int, int]] = []

    def emit(u: int, v: int) -> None:
        if (u, v) not in emitted:
            emitted.add((u, v))
            new_edges.append((u, v))

    emitted: set[tuple[int, int]] = set()
    for u, v in graph.edges:
        su, sv = scc_of.get(u), scc_of.get(v)
        if su is not None and su == sv:
            head = heads[su]
            agg = aggregates[su]
            if head is None:
                # singleton self-loop: the loop edge itself; replicas merge
                for r in replicas[u]:
                    emit(r, agg)
            elif u == head and v == head:
                emit(kept[u], kept[v])  # head self-loop: unrolled next pass
            elif u == head:
                for r in replicas[v]:
                    emit(kept[u], r)
            elif v == head:
                for r in replicas[u]:
                    emit(r, agg)  # back edge closes the loop: route to merge
            elif u == v:
                for r in replicas[u]:
                    emit(r, r)  # inner self-loop: unrolled next pass
            else:
                for ru, rv in zip(replicas[u], replicas[v]):
                    emit(ru, rv)
            continue
        sources = [kept[u]] if u in kept else [aggregates[su]]
        targets = [kept[v]] if v in kept else replicas[v]
        for a in sources:
            for b in targets:
                emit(a, b)

    return WorkflowGraph(nodes=tuple(new_nodes), edges=tuple(new_edges), metadata=graph.metadata)


def canonical_hash(graph: WorkflowGraph) -> CanonicalKey:
    """Label-aware structural hash, stable under node reordering.

    Iterative refinement: every node starts from the hash of its label and
    repeatedly absorbs the sorted multisets of its predecessor and
    successor hashes until the refinement is saturated (node-count
    rounds); the digest is the hash of the sorted final multiset plus the
    node and edge counts. Including both edge directions is required for
    the digest to agree with exhaustive label-preserving isomorphism
    checks (predecessor-only refinement cannot tell a fork from two
    disjoint edges).

    Requires a DAG; raises CycleError otherwise.
    """
    validate_dag(graph)
    n = graph.node_count
    preds = graph.predecessors()
    succs = graph.successors()
    current = [_blake(node.label.encode("utf-8")) for node in graph.nodes]
    for _ in range(n):
        current = [
            _blake(
                current[v]
                + b"\x01"
                + b"".join(sorted(current[p] for p in preds[v]))
                + b"\x02"
                + b"".join(sorted(current[s] for s in succs[v]))
            )
            for v in range(n)
        ]
    summary = b"".join(sorted(current)) + f"|{n}|{len(graph.edges)}".encode()
    return CanonicalKey(digest=_blake(summary).hex())


def _blake(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=16).digest()
