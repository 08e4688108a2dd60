"""Command-line entry point.

Subcommands::

    flowgauge perturb --config c.toml --originals in.jsonl --out DIR [--seed N]
    flowgauge eval    --config c.toml --clusters in.jsonl --out DIR
    flowgauge mine    --config c.toml --pools in.jsonl [--scores s.jsonl] --out DIR
    flowgauge sft     --config c.toml --clusters in.jsonl --out DIR
    flowgauge loss    --config c.toml --scores in.jsonl|- [--out DIR]
    flowgauge report  --report report.jsonl --out DIR

Input paths may also come from the ``[paths]`` config section (keys
``originals``, ``clusters``, ``pools``, ``scores``, ``report``,
``out_dir``); explicit flags win. Exit codes: 0 success, 1 usage or input
error, 2 partial failure (recorded inline in the outputs).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import report as report_mod
from .config import ConfigError, RunConfig
from .graph import NodeKind, WorkflowError, parse_workflow_graph
from .jsonl import read_jsonl, write_jsonl
from .metrics import TaggedWorkflow, cluster_risk
from .mining import (
    Candidate,
    CandidatePool,
    ScpoHyperparams,
    build_sft_dataset,
    emit_pairs,
    scpo_loss,
    select_pair,
)
from .perturb import SemanticCluster, build_cluster

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = RunConfig.load(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(args, config)
    except BrokenPipeError:
        return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowgauge",
        description="Structural robustness toolkit for agentic workflows.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--out", help="output directory (default: paths.out_dir or '.')")
        p.add_argument("--seed", type=int, help="base seed override")

    p = sub.add_parser("perturb", help="generate semantic clusters from original instructions")
    common(p)
    p.add_argument("--originals", help="JSONL of original instructions")
    p.set_defaults(handler=cmd_perturb)

    p = sub.add_parser("eval", help="score clusters whose variants carry workflow documents")
    common(p)
    p.add_argument("--clusters", help="JSONL of clusters with attached workflows")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("mine", help="mine preference pairs from candidate pools")
    common(p)
    p.add_argument("--pools", help="JSONL of candidate pools")
    p.add_argument("--scores", help="JSONL exec-score overlay {cluster_id, candidate_index, score}")
    p.set_defaults(handler=cmd_mine)

    p = sub.add_parser("sft", help="emit the instruction-augmented SFT dataset")
    common(p)
    p.add_argument("--clusters", help="JSONL of clusters with gold workflows")
    p.set_defaults(handler=cmd_sft)

    p = sub.add_parser("loss", help="evaluate the preference loss on a scores file")
    common(p)
    p.add_argument("--scores", help="JSONL of log-probability records, or '-' for stdin")
    p.set_defaults(handler=cmd_loss)

    p = sub.add_parser("report", help="render tables, plot CSV, and figures from a report")
    common(p)
    p.add_argument("--report", help="report JSONL produced by 'flowgauge eval'")
    p.set_defaults(handler=cmd_report)
    return parser


def _resolve_input(flag_value: str | None, config: RunConfig, key: str) -> Path | None:
    value = flag_value or config.paths.get(key)
    return Path(value) if value else None


def _out_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    out = Path(args.out or config.paths.get("out_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_USAGE


def _instruction_of(record: Mapping[str, Any]) -> str | None:
    for key in ("instruction", "text", "prompt"):
        value = record.get(key)
        if isinstance(value, str) and value:
            return value
    return None


def cmd_perturb(args: argparse.Namespace, config: RunConfig) -> int:
    originals_path = _resolve_input(args.originals, config, "originals")
    if originals_path is None:
        return _fail("no originals file (use --originals or paths.originals)")
    if not originals_path.exists():
        return _fail(f"originals file not found: {originals_path}")
    out = _out_dir(args, config)
    try:
        plan = config.plan_steps(base_seed=args.seed)
    except (ConfigError, ValueError) as exc:
        return _fail(str(exc))
    chat_client = config.build_chat_client()

    clusters: list[SemanticCluster] = []
    for position, record in enumerate(read_jsonl(originals_path)):
        if not isinstance(record, Mapping):
            return _fail(f"{originals_path}: record #{position} is not an object")
        instruction = _instruction_of(record)
        if instruction is None:
            return _fail(f"{originals_path}: record #{position} lacks an instruction field")
        cluster_id = str(record.get("id", position))
        clusters.append(
            build_cluster(instruction, plan, cluster_id=cluster_id, chat_client=chat_client)
        )

    clusters_path = out / "clusters.jsonl"
    write_jsonl(clusters_path, (c.to_json_obj() for c in clusters))
    review_path = out / "review_sheet.csv"
    with open(review_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["cluster_id", "tag", "kind", "band", "error", "text"])
        for cluster in clusters:
            for variant in cluster.variants:
                writer.writerow(
                    [cluster.cluster_id, variant.tag, variant.kind, variant.band or "",
                     variant.error or "", variant.text]
                )
    failures = sum(1 for c in clusters for v in c.variants if v.error)
    print(f"wrote {len(clusters)} clusters to {clusters_path} (review sheet: {review_path})")
    if failures:
        print(f"{failures} variant(s) failed; see the error column", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _score_cluster(
    obj: Mapping[str, Any], config: RunConfig, embedder, overrides
) -> tuple[str, list[dict[str, Any]], dict[str, Any]]:
    """Per-variant records plus the cluster summary record."""
    try:
        cluster = SemanticCluster.from_json_obj(obj)
    except (KeyError, TypeError, ValueError) as exc:
        cluster_id = str(obj.get("cluster_id", "")) if isinstance(obj, Mapping) else ""
        return cluster_id, [], {
            "record": "cluster_summary",
            "cluster_id": cluster_id,
            "n_variants": 0,
            "risk_node": 1.0,
            "risk_graph": 1.0,
            "error": f"malformed cluster record: {exc}",
        }

    reference = None
    ref_error = None
    if cluster.variants and cluster.variants[0].workflow is not None:
        try:
            reference = parse_workflow_graph(
                json.dumps(cluster.variants[0].workflow), kind_overrides=overrides
            )
        except WorkflowError as exc:
            ref_error = f"reference workflow invalid: {exc}"
    else:
        ref_error = "reference workflow missing"

    tagged: list[TaggedWorkflow] = []
    for variant in cluster.variants[1:]:
        if ref_error is not None:
            tagged.append(
                TaggedWorkflow(tag=variant.tag, graph=None, kind=variant.kind,
                               band=variant.band, error=ref_error)
            )
            continue
        if variant.workflow is None:
            tagged.append(
                TaggedWorkflow(tag=variant.tag, graph=None, kind=variant.kind,
                               band=variant.band, error=variant.error or "workflow missing")
            )
            continue
        try:
            graph = parse_workflow_graph(json.dumps(variant.workflow), kind_overrides=overrides)
            tagged.append(TaggedWorkflow(tag=variant.tag, graph=graph, kind=variant.kind,
                                         band=variant.band))
        except WorkflowError as exc:
            tagged.append(
                TaggedWorkflow(tag=variant.tag, graph=None, kind=variant.kind,
                               band=variant.band, error=str(exc))
            )

    records: list[dict[str, Any]] = []
    if not tagged:
        summary: dict[str, Any] = {
            "record": "cluster_summary",
            "cluster_id": cluster.cluster_id,
            "n_variants": 0,
            "risk_node": 0.0,
            "risk_graph": 0.0,
        }
        if ref_error:
            summary["error"] = ref_error
        return cluster.cluster_id, records, summary

    risk = cluster_risk(
        reference if reference is not None else _EMPTY_REFERENCE,
        tagged,
        embedder,
        config.beta_match_threshold,
        unroll_default=config.unroll_default,
        max_exact_orders=config.max_exact_orders,
    )
    for score in risk.per_variant:
        record: dict[str, Any] = {
            "record": "variant",
            "cluster_id": cluster.cluster_id,
            "variant_tag": score.tag,
            "perturbation_kind": score.kind,
            "band": score.band,
            "f1_node": score.f1_node,
            "f1_graph": score.f1_graph,
            "p_node": score.node.precision if score.node else 0.0,
            "r_node": score.node.recall if score.node else 0.0,
            "p_graph": score.graph.precision if score.graph else 0.0,
            "r_graph": score.graph.recall if score.graph else 0.0,
            "heuristic_flag": bool(score.node.heuristic) if score.node else False,
        }
        if score.error:
            record["error"] = score.error
        records.append(record)
    summary = {
        "record": "cluster_summary",
        "cluster_id": cluster.cluster_id,
        "n_variants": len(risk.per_variant),
        "risk_node": risk.risk_node,
        "risk_graph": risk.risk_graph,
    }
    if risk.per_band:
        summary["per_band"] = {
            band: {"risk_node": rn, "risk_graph": rg}
            for band, (rn, rg) in risk.per_band.items()
        }
    if ref_error:
        summary["error"] = ref_error
    return cluster.cluster_id, records, summary


_EMPTY_REFERENCE = parse_workflow_graph('{"nodes": [], "edges": []}')


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    clusters_path = _resolve_input(args.clusters, config, "clusters")
    if clusters_path is None:
        return _fail("no clusters file (use --clusters or paths.clusters)")
    if not clusters_path.exists():
        return _fail(f"clusters file not found: {clusters_path}")
    out = _out_dir(args, config)
    embedder = config.build_embedder()
    overrides = {k: NodeKind(v) for k, v in config.kind_overrides.items()}

    # input is streamed; only the (small) score records are accumulated,
    # then ordered by cluster_id so output bytes are reproducible
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(
            pool.map(
                lambda o: _score_cluster(o, config, embedder, overrides),
                read_jsonl(clusters_path),
            )
        )
    results.sort(key=lambda item: item[0])

    report_records: list[dict[str, Any]] = []
    for _, records, summary in results:
        report_records.extend(records)
        report_records.append(summary)
    report_path = out / "report.jsonl"
    write_jsonl(report_path, report_records)

    means = report_mod.aggregate(report_records)
    csv_path = out / "report_plot_data.csv"
    report_mod.write_plot_csv(means, csv_path)
    print(f"wrote {report_path} and {csv_path}")
    return EXIT_OK


def cmd_mine(args: argparse.Namespace, config: RunConfig) -> int:
    pools_path = _resolve_input(args.pools, config, "pools")
    if pools_path is None:
        return _fail("no pools file (use --pools or paths.pools)")
    if not pools_path.exists():
        return _fail(f"pools file not found: {pools_path}")
    out = _out_dir(args, config)
    hp = ScpoHyperparams(
        lambda_vote=config.lambda_vote, beta_dpo=config.beta_dpo, alpha_nll=config.alpha_nll
    )

    overlay: dict[tuple[str, int], float] = {}
    scores_path = _resolve_input(args.scores, config, "scores")
    if scores_path is not None:
        if not scores_path.exists():
            return _fail(f"scores file not found: {scores_path}")
        for record in read_jsonl(scores_path):
            overlay[(str(record["cluster_id"]), int(record["candidate_index"]))] = float(
                record["score"]
            )

    pairs = []
    skips: list[dict[str, str]] = []
    for obj in sorted(read_jsonl(pools_path), key=lambda o: str(o.get("cluster_id", ""))):
        cluster_id = str(obj.get("cluster_id", ""))
        try:
            candidates = []
            for index, raw in enumerate(obj.get("candidates", [])):
                workflow = parse_workflow_graph(json.dumps(raw["workflow"]))
                score = overlay.get((cluster_id, index), raw.get("exec_score"))
                if score is None:
                    raise ValueError(f"candidate {index} has no exec score")
                candidates.append(
                    Candidate(
                        workflow=workflow,
                        source_variant=str(raw.get("source_variant", "")),
                        exec_score=float(score),
                    )
                )
            if not candidates:
                skips.append({"cluster_id": cluster_id, "reason": "empty pool"})
                continue
            pool = CandidatePool(cluster_id=cluster_id, prompt=str(obj.get("prompt", "")),
                                 candidates=tuple(candidates))
        except (WorkflowError, ValueError, KeyError, TypeError) as exc:
            skips.append({"cluster_id": cluster_id, "reason": f"bad pool: {exc}"})
            continue
        pair = select_pair(pool, hp, unroll_default=config.unroll_default)
        if pair is None:
            skips.append({"cluster_id": cluster_id, "reason": "single canonical class"})
        else:
            pairs.append(pair)

    pairs_path = out / "pairs.jsonl"
    emit_pairs(pairs, pairs_path)
    skips_path = out / "skips.jsonl"
    write_jsonl(skips_path, skips)
    print(f"wrote {len(pairs)} pairs to {pairs_path}, {len(skips)} skips to {skips_path}")
    return EXIT_OK


def cmd_sft(args: argparse.Namespace, config: RunConfig) -> int:
    clusters_path = _resolve_input(args.clusters, config, "clusters")
    if clusters_path is None:
        return _fail("no clusters file (use --clusters or paths.clusters)")
    if not clusters_path.exists():
        return _fail(f"clusters file not found: {clusters_path}")
    out = _out_dir(args, config)
    clusters = [SemanticCluster.from_json_obj(o) for o in read_jsonl(clusters_path)]
    clusters.sort(key=lambda c: c.cluster_id)
    sft_path = out / "sft.jsonl"
    count = write_jsonl(
        sft_path,
        (
            {"instruction": r.instruction, "target_workflow": r.target_workflow}
            for r in build_sft_dataset(clusters)
        ),
    )
    print(f"wrote {count} SFT records to {sft_path}")
    return EXIT_OK


def cmd_loss(args: argparse.Namespace, config: RunConfig) -> int:
    scores = args.scores or config.paths.get("scores")
    if not scores:
        return _fail("no scores input (use --scores or paths.scores; '-' reads stdin)")
    hp = ScpoHyperparams(
        lambda_vote=config.lambda_vote, beta_dpo=config.beta_dpo, alpha_nll=config.alpha_nll
    )
    if scores == "-":
        records = [json.loads(line) for line in sys.stdin if line.strip()]
    else:
        path = Path(scores)
        if not path.exists():
            return _fail(f"scores file not found: {path}")
        records = list(read_jsonl(path))
    losses = []
    for position, record in enumerate(records):
        try:
            value = scpo_loss(
                float(record["logp_plus_policy"]),
                float(record["logp_plus_ref"]),
                float(record["logp_minus_policy"]),
                float(record["logp_minus_ref"]),
                int(record["len_plus"]),
                float(record["rho"]),
                hp,
            )
        except (KeyError, TypeError, ValueError) as exc:
            return _fail(f"scores record #{position}: {exc}")
        losses.append({"cluster_id": record.get("cluster_id", str(position)), "loss": value})
    if args.out:
        out = _out_dir(args, config)
        write_jsonl(out / "loss.jsonl", losses)
    for entry in losses:
        print(json.dumps(entry, ensure_ascii=False))
    if losses:
        mean = math.fsum(e["loss"] for e in losses) / len(losses)
        print(f"mean loss over {len(losses)} records: {mean:.6f}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    report_path = _resolve_input(args.report, config, "report")
    if report_path is None:
        return _fail("no report file (use --report or paths.report)")
    if not report_path.exists():
        return _fail(f"report file not found: {report_path}")
    records = list(read_jsonl(report_path))
    means = report_mod.aggregate(records)
    if not means:
        return _fail(f"report {report_path} has no variant records")
    out = _out_dir(args, config)
    print(report_mod.render_table(means))
    csv_path = out / "report_plot_data.csv"
    report_mod.write_plot_csv(means, csv_path)
    figures = report_mod.render_figures(means, out)
    print(f"wrote {csv_path}" + "".join(f", {p}" for p in figures))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
