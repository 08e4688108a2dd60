"""Shared fixtures: reference graph documents, case-study cluster, generators."""
from __future__ import annotations

import json
import random

import pytest

from flowgauge import WorkflowGraph, WorkflowNode
from flowgauge.alignment import AlignedPair, NodeAlignment

# The ten-node code-generation workflow used as the primary parser fixture:
# three parallel generators feeding a self-consistency ensemble, then a
# refine step, a test, a conditional patch, a re-test, and the exit.
CODEGEN_GRAPH_DOC = json.dumps(
    {
        "nodes": [
            "START",
            "custom_code_generate i=1 with instruction: Reason step by step to implement a clear, deterministic function. Ensure the declared entry point exists and add minimal type hints.",
            "custom_code_generate i=2 with instruction: Think step by step and write straightforward logic with small helpers if needed. Prefer explicit control flow and keep the interface stable.",
            "custom_code_generate i=3 with instruction: Proceed step by step, validate inputs conservatively, and make returns predictable. Keep the code dependency-free and test-friendly.",
            "sc_ensemble over 3 candidates",
            "custom (review & refine) with instruction: Review the code step by step. Improve naming and docstring briefly, ensure the entry point is implemented, and keep semantics unchanged.",
            "test (first run) with entry_point",
            "custom (patch if needed): Analyze the logic step by step and fix subtle boundary conditions. Preserve the function signature and deterministic behavior.",
            "test (re-run) with entry_point",
            "END",
        ],
        "edges": [
            [0, 1], [0, 2], [0, 3],
            [1, 4], [2, 4], [3, 4],
            [4, 5], [5, 6], [6, 7], [7, 8], [8, 9],
        ],
    }
)

# Case-study cluster: the same bit-position task phrased six ways. The
# instruction texts below are the recorded variants for the playback
# client; the workflows all share the six-stage backbone.
BITPOS_ORIGINAL = (
    "Write a python function to check whether the two numbers differ at "
    "one bit position only or not.\n\ndef differ_At_One_Bit_Pos(a,b):"
)
BITPOS_PARAPHRASED = (
    "A Python function should be created to determine if the two numbers "
    "differ at exactly one bit position. \ndef differ_At_One_Bit_Pos(a,b):"
)

_BACKBONE_STAGES = (
    ("CodeGenAgent", "generate candidate implementations of the requested function step by step"),
    ("ScEnsembleAgent", "self-consistency ensemble over the generated candidate solutions"),
    ("RefineAgent", "review and refine the chosen candidate solution without changing semantics"),
    ("TestAgent", "test the refined solution against the declared entry point"),
    ("FixAgent", "fix boundary-condition failures reported by the test run"),
    ("Exit", "return the final verified solution"),
)

_BACKBONE_NUANCES = {
    "original": ("minimal type hints", "", "improve naming", "", "subtle boundaries", ""),
    "paraphrasing": ("clear structure", "", "improve docstring", "", "precise logic", ""),
    "requirement_augmentation": ("explicit control flow", "", "polish comments", "", "edge cases", ""),
    "light_noise": ("compact implementation", "", "simplify conditionals", "", "trace execution", ""),
    "moderate_noise": ("clear types", "", "brief docstring", "", "dependency-free", ""),
    "heavy_noise": ("typed solution", "", "streamline branches", "", "minimal edits", ""),
}

CASE_STUDY_VARIANTS = tuple(_BACKBONE_NUANCES)


def backbone_doc(variant: str) -> str:
    """Six-stage backbone encoding for one case-study variant."""
    nuances = _BACKBONE_NUANCES[variant]
    nodes = []
    for (agent, role), nuance in zip(_BACKBONE_STAGES, nuances):
        label = f"{agent}: {role}"
        if nuance:
            label += f" ({nuance})"
        nodes.append(label)
    return json.dumps({"nodes": nodes, "edges": [[i, i + 1] for i in range(5)]})


# exactly 50 unprotected words (the tokenizer skips the number, the URL,
# the identifier, the big-O expression, and the def line).
NOISE_FIXTURE_50_WORDS = (
    "Write a function that removes duplicate entries from the given list "
    "while preserving their original relative order. The routine must "
    "handle an empty input list, process 1000000 items under a second, and "
    "stay in O(n log n) time. See https://example.com/spec for details "
    "about tricky edge cases, then keep the public interface of "
    "remove_dups stable and tidy.\n"
    "def remove_dups(items):"
)


@pytest.fixture
def codegen_graph_doc() -> str:
    return CODEGEN_GRAPH_DOC


@pytest.fixture
def case_study_docs() -> dict[str, str]:
    return {variant: backbone_doc(variant) for variant in CASE_STUDY_VARIANTS}


def make_graph(n: int, edges: list[tuple[int, int]], labels: list[str] | None = None) -> WorkflowGraph:
    labels = labels or [f"node {i}" for i in range(n)]
    return WorkflowGraph(
        nodes=tuple(WorkflowNode(index=i, label=labels[i]) for i in range(n)),
        edges=tuple(edges),
    )


def random_dag(rng: random.Random, max_nodes: int = 8, edge_prob: float = 0.4,
               label_alphabet: str = "abcde") -> WorkflowGraph:
    """Random DAG with possibly duplicated labels (orientation follows a
    random node permutation, so storage order is not topological)."""
    n = rng.randint(1, max_nodes)
    order = list(range(n))
    rng.shuffle(order)
    edges = [
        (order[i], order[j])
        for i in range(n)
        for j in range(i + 1, n)
        if rng.random() < edge_prob
    ]
    rng.shuffle(edges)
    labels = [rng.choice(label_alphabet) for _ in range(n)]
    return make_graph(n, edges, labels)


def random_partial_alignment(rng: random.Random, n_ref: int, n_pred: int) -> NodeAlignment:
    """Random injective partial map between predicted and reference nodes."""
    k = rng.randint(0, min(n_ref, n_pred))
    refs = rng.sample(range(n_ref), k)
    preds = rng.sample(range(n_pred), k)
    pairs = tuple(
        AlignedPair(ref_index=r, pred_index=p, weight=round(rng.uniform(0.75, 1.0), 6))
        for r, p in sorted(zip(refs, preds))
    )
    return NodeAlignment(pairs=pairs)
