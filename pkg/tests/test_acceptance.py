"""Acceptance suite: one test per release criterion, each printing a
PASS line with its measured evidence. All tolerances are pinned here.

Everything runs offline with the lexical embedder; no sidecar or network
is required.
"""
from __future__ import annotations

import math
import random
import time

import pytest
from mpmath import mp, mpf

from flowgauge import (
    LexicalEmbedder,
    canonical_hash,
    graph_structure_score,
    max_weight_matching,
    node_chain_score,
    normalize,
    parse_workflow_graph,
    reachability_pairs,
)
from flowgauge.alignment import SimilarityMatrix
from flowgauge.cli import main
from flowgauge.jsonl import read_jsonl, write_jsonl
from flowgauge.metrics import project_edges, score_pair
from flowgauge.mining import (
    Candidate,
    CandidatePool,
    ScpoHyperparams,
    build_sft_dataset,
    scpo_loss,
    select_pair,
    vote_counts,
)
from flowgauge.perturb import HEAVY, LIGHT, MODERATE, PlanStep, build_cluster, inject_noise

from .conftest import (
    CASE_STUDY_VARIANTS,
    CODEGEN_GRAPH_DOC,
    NOISE_FIXTURE_50_WORDS,
    backbone_doc,
    make_graph,
    random_dag,
    random_partial_alignment,
)
from .oracles import (
    best_lis_over_reference_orders,
    brute_extremal_classes,
    brute_max_matching,
    floyd_warshall_pairs,
    kahn_topo_min_index,
)


def _passed(capsys, message: str) -> None:
    with capsys.disabled():
        print(f"[PASS] {message}")


def test_metric_oracle_equivalence(capsys):
    """F_node equals the exhaustive maximum over all reference topological
    orders and F_graph's reachability sets equal the Floyd-Warshall
    closure, on 500 random DAG pairs with <= 8 nodes. Exact, < 60 s."""
    rng = random.Random(20240917)
    started = time.monotonic()
    node_checked = graph_checked = 0
    for _ in range(500):
        density = rng.choice((0.2, 0.45, 0.7))
        reference = random_dag(rng, max_nodes=8, edge_prob=density)
        predicted = random_dag(rng, max_nodes=8, edge_prob=density)
        alignment = random_partial_alignment(rng, reference.node_count, predicted.node_count)

        score = node_chain_score(reference, predicted, alignment)
        tau_p = [
            v
            for v in kahn_topo_min_index(predicted.node_count, predicted.edges)
            if v in alignment.matched_pred()
        ]
        mapping = alignment.pred_to_ref()
        expected_l = best_lis_over_reference_orders(
            reference.node_count, list(reference.edges), [mapping[v] for v in tau_p]
        )
        assert score.lis_length == expected_l
        expected_p = expected_l / predicted.node_count
        expected_r = expected_l / reference.node_count
        assert score.precision == expected_p and score.recall == expected_r
        if expected_p + expected_r > 0:
            assert score.f1 == 2 * expected_p * expected_r / (expected_p + expected_r)
        else:
            assert score.f1 == 0.0
        node_checked += 1

        matched = sorted(alignment.matched_ref())
        projected = project_edges(predicted, alignment)
        ref_edges = [(u, v) for u, v in reference.edges if u in set(matched) and v in set(matched)]
        assert reachability_pairs(matched, projected) == floyd_warshall_pairs(matched, projected)
        assert reachability_pairs(matched, ref_edges) == floyd_warshall_pairs(matched, ref_edges)
        structure = graph_structure_score(reference, predicted, alignment)
        pred_pairs = floyd_warshall_pairs(matched, projected)
        ref_pairs = floyd_warshall_pairs(matched, ref_edges)
        common = len(pred_pairs & ref_pairs)
        if not pred_pairs and not ref_pairs:
            assert structure.f1 == 1.0
        elif not pred_pairs or not ref_pairs:
            assert structure.f1 == 0.0
        else:
            p, r = common / len(pred_pairs), common / len(ref_pairs)
            assert structure.f1 == (2 * p * r / (p + r) if p + r else 0.0)
        graph_checked += 1
    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"oracle equivalence took {elapsed:.1f}s"
    _passed(
        capsys,
        f"metric oracle equivalence: {node_checked} node-chain and {graph_checked} "
        f"graph-structure checks, exact, in {elapsed:.1f}s",
    )


def test_identity_suite(capsys):
    """Self-comparison of every fixture workflow scores f1 = 1 on both
    metrics, i.e. discrepancy exactly 0."""
    embedder = LexicalEmbedder()
    fixtures = {"codegen": CODEGEN_GRAPH_DOC}
    fixtures.update({name: backbone_doc(name) for name in CASE_STUDY_VARIANTS})
    for name, doc in fixtures.items():
        graph = parse_workflow_graph(doc)
        node, structure = score_pair(graph, graph, embedder, 0.75)
        assert node.f1 == 1.0 and structure.f1 == 1.0, name
        assert node.discrepancy == 0.0 and structure.discrepancy == 0.0, name
    _passed(capsys, f"identity suite: {len(fixtures)} fixture workflows, all f1 = 1 exactly")


def test_case_study_backbones_agree(capsys):
    """The six case-study encodings share a six-stage backbone; every
    variant scores graph f1 = 1 against the original encoding."""
    embedder = LexicalEmbedder()
    reference = parse_workflow_graph(backbone_doc("original"))
    for name in CASE_STUDY_VARIANTS:
        predicted = parse_workflow_graph(backbone_doc(name))
        _, structure = score_pair(reference, predicted, embedder, 0.75)
        assert structure.f1 == 1.0, name
    _passed(capsys, "case-study backbone: graph f1 = 1 for all 6 variants")


def test_worked_example_regressions(capsys):
    """Frozen worked examples: the [0,2,1,3] node chain and the
    chain-versus-shortcut graph score."""
    reference = make_graph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    predicted = make_graph(4, [(0, 1), (1, 2), (2, 3)])
    from flowgauge.alignment import AlignedPair, NodeAlignment

    alignment = NodeAlignment(
        pairs=(
            AlignedPair(0, 0, 1.0),
            AlignedPair(1, 2, 1.0),
            AlignedPair(2, 1, 1.0),
            AlignedPair(3, 3, 1.0),
        )
    )
    node = node_chain_score(reference, predicted, alignment)
    assert node.lis_length == 3
    assert abs(node.f1 - 0.6667) <= 1e-4

    chain = make_graph(3, [(0, 1), (1, 2)])
    shortcut = make_graph(3, [(0, 2)])
    from flowgauge.alignment import NodeAlignment as NA

    structure = graph_structure_score(chain, shortcut, NA.identity(3))
    assert structure.f1 == 0.5  # exactly
    _passed(capsys, "worked examples: f1_node = 0.6667 +/- 1e-4, f1_graph = 0.5 exact")


def test_matching_optimality(capsys):
    """Matching weight equals the brute-force maximum on 200 random
    similarity matrices up to 6x6. Exact float equality."""
    rng = random.Random(424242)
    for _ in range(200):
        rows, cols = rng.randint(1, 6), rng.randint(1, 6)
        entries = [
            [
                0.0
                if rng.random() < 0.3
                else rng.choice([0.5, 0.75, 0.9, round(rng.random(), 3)])
                for _ in range(cols)
            ]
            for _ in range(rows)
        ]
        matrix = SimilarityMatrix(
            entries=tuple(tuple(row) for row in entries), beta_match_threshold=0.0
        )
        alignment = max_weight_matching(matrix)
        best_weight, best_pairs = brute_max_matching(entries)
        assert alignment.total_weight == best_weight
        assert tuple((p.ref_index, p.pred_index) for p in alignment.pairs) == best_pairs
    _passed(capsys, "matching optimality: 200 random matrices <= 6x6, exact")


def test_perturbation_bands(capsys):
    """For each intensity band and 100 seeds on the 50-word fixture, the
    measured edit ratio stays in [low, high] +/- 1/50 and every protected
    span survives byte-identical."""
    for band in (LIGHT, MODERATE, HEAVY):
        for seed in range(100):
            result = inject_noise(NOISE_FIXTURE_50_WORDS, band, seed=seed)
            assert result.unprotected_words == 50
            measured = len(result.edits) / result.unprotected_words
            assert band.low - 1 / 50 <= measured <= band.high + 1 / 50, (band.name, seed)
            for span, (start, end) in zip(result.protected_spans, result.protected_locations):
                assert result.text[start:end] == span.slice(NOISE_FIXTURE_50_WORDS), (
                    band.name,
                    seed,
                )
    _passed(capsys, "perturbation bands: 3 bands x 100 seeds, ratio within band, spans intact")


def _random_pool(rng: random.Random, cluster_id: str) -> CandidatePool:
    library = [
        ["plan the solution", "solve it", "verify the result"],
        ["plan the solution", "verify the result", "solve it"],
        ["just answer directly"],
        ["alpha step"],
        ["beta step", "gamma step"],
    ]
    size = rng.randint(1, 32)
    candidates = []
    for i in range(size):
        labels = rng.choice(library)
        doc = {"nodes": labels, "edges": [[j, j + 1] for j in range(len(labels) - 1)]}
        import json

        candidates.append(
            Candidate(
                workflow=parse_workflow_graph(json.dumps(doc)),
                source_variant=f"v{i}",
                exec_score=rng.choice([0.0, 0.25, 0.5, 0.5, 1.0]),
            )
        )
    return CandidatePool(cluster_id=cluster_id, prompt="p", candidates=tuple(candidates))


def test_preference_mining(capsys):
    """select_pair agrees with brute-force argmax/argmin under the tie
    rules on 200 random pools; rho is never negative; the loss formula
    reproduces its high-precision arithmetic value to 1e-6 and is
    monotone in the policy log-likelihoods."""
    rng = random.Random(777)
    agreements = 0
    for i in range(200):
        pool = _random_pool(rng, f"q{i}")
        hp = ScpoHyperparams(
            lambda_vote=rng.choice([0.0, 0.5, 1.0]), beta_dpo=0.1, alpha_nll=0.05
        )
        classes = vote_counts(pool)
        expected = brute_extremal_classes(
            [(c.key.digest, c.count, c.exec_score) for c in classes.values()],
            pool.size,
            hp.lambda_vote,
        )
        pair = select_pair(pool, hp)
        if expected is None:
            assert pair is None
        else:
            assert pair is not None
            assert pair.rho >= 0.0
            assert canonical_hash(normalize(pair.w_plus)).digest == expected[0]
            assert canonical_hash(normalize(pair.w_minus)).digest == expected[1]
        agreements += 1

    hp = ScpoHyperparams(lambda_vote=0.5, beta_dpo=0.1, alpha_nll=0.05)
    mp.dps = 50
    beta, alpha, rho = mpf("0.1"), mpf("0.05"), mpf("1.1")
    margin = beta * (mpf(-10) - mpf(-12)) - beta * (mpf(-15) - mpf(-13))
    oracle_value = float(
        -rho * mp.log(1 / (1 + mp.exp(-margin))) - alpha * rho * mpf(-10) / 20
    )
    value = scpo_loss(-10.0, -12.0, -15.0, -13.0, 20, 1.1, hp)
    assert abs(value - oracle_value) <= 1e-6

    step = 1e-4
    for lp in (-20.0, -10.0, -2.0):
        base = scpo_loss(lp, -12.0, -15.0, -13.0, 20, 1.1, hp)
        bumped = scpo_loss(lp + step, -12.0, -15.0, -13.0, 20, 1.1, hp)
        assert bumped < base - 1e-6 * step
    for lm in (-20.0, -15.0, -2.0):
        base = scpo_loss(-10.0, -12.0, lm, -13.0, 20, 1.1, hp)
        bumped = scpo_loss(-10.0, -12.0, lm + step, -13.0, 20, 1.1, hp)
        assert bumped > base + 1e-6 * step
    _passed(
        capsys,
        f"preference mining: {agreements} pools vs brute force, rho >= 0, "
        f"loss = {value:.6f} within 1e-6 of the arithmetic oracle, monotone",
    )


def test_sft_dataset_counts(capsys):
    """build_sft_dataset emits exactly sum(K_n + 1) records; the 6-variant
    cluster shape emits 6."""
    import json

    from flowgauge.perturb import PlaybackChatClient

    client = PlaybackChatClient(
        {
            "paraphrasing": "<answer>Determine whether one bit differs.</answer>",
            "requirement_augmentation": "<answer>Check a single bit; validate inputs.</answer>",
        }
    )
    plan = [
        PlanStep(kind="paraphrasing"),
        PlanStep(kind="requirement_augmentation"),
        PlanStep(kind="noise", band=LIGHT, seed=1),
        PlanStep(kind="noise", band=MODERATE, seed=2),
        PlanStep(kind="noise", band=HEAVY, seed=3),
    ]
    gold = json.loads(CODEGEN_GRAPH_DOC)
    clusters = []
    totals = 0
    for i, steps in enumerate((plan, plan[:2], plan[:1])):  # K_n = 5, 2, 1
        cluster = build_cluster(
            "check whether the two numbers differ at one bit position",
            steps,
            cluster_id=f"q{i}",
            chat_client=client,
        )
        for variant in cluster.variants:
            variant.workflow = gold
        clusters.append(cluster)
        totals += len(cluster.variants)
    records = list(build_sft_dataset(clusters))
    assert totals == (5 + 1) + (2 + 1) + (1 + 1)
    assert len(records) == totals
    assert len(clusters[0].variants) == 6  # original + five perturbations
    assert len(list(build_sft_dataset([clusters[0]]))) == 6
    _passed(capsys, f"dataset counts: sum(K_n + 1) = {totals} records, 6-variant cluster -> 6")


def test_end_to_end_determinism(tmp_path, capsys):
    """Two cmd_eval runs over the fixture corpus with the lexical embedder
    produce byte-identical reports."""
    import json

    clusters = []
    for c in range(3):
        variants = []
        for i, name in enumerate(CASE_STUDY_VARIANTS):
            variants.append(
                {
                    "tag": "original" if i == 0 else name,
                    "text": f"cluster {c} as {name}",
                    "kind": "original" if i == 0 else ("noise" if name.endswith("_noise") else name),
                    "band": name.split("_")[0] if name.endswith("_noise") else None,
                    "workflow": json.loads(backbone_doc(name)),
                }
            )
        variants[0]["text"] = f"cluster {c} original text"
        clusters.append(
            {
                "cluster_id": f"case-{c}",
                "original": f"cluster {c} original text",
                "variants": variants,
            }
        )
    source = tmp_path / "clusters.jsonl"
    write_jsonl(source, clusters)
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    assert main(["eval", "--clusters", str(source), "--out", str(out1)]) == 0
    assert main(["eval", "--clusters", str(source), "--out", str(out2)]) == 0
    first = (out1 / "report.jsonl").read_bytes()
    assert first == (out2 / "report.jsonl").read_bytes()
    assert (out1 / "report_plot_data.csv").read_bytes() == (
        out2 / "report_plot_data.csv"
    ).read_bytes()
    assert len(list(read_jsonl(out1 / "report.jsonl"))) == 3 * 6  # 5 variants + summary per cluster
    _passed(capsys, "end-to-end determinism: byte-identical eval outputs across runs")
