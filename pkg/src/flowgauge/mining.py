"""Preference-pair mining over candidate workflow pools.

Candidates sampled for one instruction cluster are grouped by canonical
graph equality; each canonical class gets a preference score combining
its execution score with its self-consistency vote share::

    score(class) = exec_score + lambda_vote * votes / pool_size

The extremal pair (argmax as chosen, argmin as rejected) forms one
preference record weighted by the score gap rho. The module also builds
the instruction-augmented SFT dataset (every variant paired with the
cluster's unchanged gold workflow) and evaluates the weighted
preference-optimization loss for given sequence log-likelihoods.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .graph import CanonicalKey, WorkflowGraph, canonical_hash, normalize, serialize_workflow_graph
from .perturb import SemanticCluster

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScpoHyperparams:
    lambda_vote: float = 0.5
    beta_dpo: float = 0.1
    alpha_nll: float = 0.05

    def __post_init__(self) -> None:
        if self.lambda_vote < 0:
            raise ValueError("lambda_vote must be >= 0")
        if self.beta_dpo <= 0:
            raise ValueError("beta_dpo must be > 0")
        if self.alpha_nll < 0:
            raise ValueError("alpha_nll must be >= 0")


@dataclass(frozen=True)
class Candidate:
    workflow: WorkflowGraph
    source_variant: str
    exec_score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.exec_score):
            raise ValueError("exec_score must be finite")


@dataclass(frozen=True)
class CandidatePool:
    cluster_id: str
    prompt: str
    candidates: tuple[Candidate, ...]

    @property
    def size(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class VoteClass:
    """One canonical equivalence class inside a pool."""

    key: CanonicalKey
    representative: WorkflowGraph  # first occurrence in pool order
    count: int
    exec_score: float  # max over members
    first_index: int


def vote_counts(pool: CandidatePool, *, unroll_default: int = 3) -> dict[CanonicalKey, VoteClass]:
    """Group candidates by canonical graph equality.

    Counts sum to the pool size; the representative of a class is its
    first occurrence. The class execution score is the maximum over
    members (duplicate samplings of one structure may score differently).
    """
    if not pool.candidates:
        raise ValueError("candidate pool must not be empty")
    classes: dict[CanonicalKey, VoteClass] = {}
    for index, candidate in enumerate(pool.candidates):
        key = canonical_hash(normalize(candidate.workflow, unroll_default))
        existing = classes.get(key)
        if existing is None:
            classes[key] = VoteClass(
                key=key,
                representative=candidate.workflow,
                count=1,
                exec_score=candidate.exec_score,
                first_index=index,
            )
        else:
            classes[key] = VoteClass(
                key=key,
                representative=existing.representative,
                count=existing.count + 1,
                exec_score=max(existing.exec_score, candidate.exec_score),
                first_index=existing.first_index,
            )
    return classes


def preference_score(
    exec_score: float, votes: int, pool_size: int, lambda_vote: float
) -> float:
    """Score-first, vote-second preference: exec + lambda * votes / pool."""
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if not 0 <= votes <= pool_size:
        raise ValueError("votes must be in [0, pool_size]")
    return exec_score + lambda_vote * votes / pool_size


@dataclass(frozen=True)
class PreferencePair:
    cluster_id: str
    prompt: str
    w_plus: WorkflowGraph
    w_minus: WorkflowGraph
    r_plus: float
    r_minus: float
    rho: float

    def __post_init__(self) -> None:
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if canonical_hash(normalize(self.w_plus)) == canonical_hash(normalize(self.w_minus)):
            raise ValueError("chosen and rejected workflows are canonically equal")


def select_pair(
    pool: CandidatePool,
    hp: ScpoHyperparams,
    *,
    unroll_default: int = 3,
) -> PreferencePair | None:
    """Pick the extremal (chosen, rejected) pair of a pool, or skip.

    The chosen class maximizes the preference score; ties prefer the
    higher vote count, then the lexicographically smallest canonical key.
    The rejected class minimizes the score among the remaining classes
    under the same tie rules. A pool with a single canonical class has no
    training signal and yields None.
    """
    classes = vote_counts(pool, unroll_default=unroll_default)
    if len(classes) < 2:
        return None
    scored = [
        (preference_score(c.exec_score, c.count, pool.size, hp.lambda_vote), c)
        for c in classes.values()
    ]
    # max by score, then votes, then smallest key
    best = max(scored, key=lambda sc: (sc[0], sc[1].count, _neg_key(sc[1].key)))
    rest = [sc for sc in scored if sc[1].key != best[1].key]
    worst = min(rest, key=lambda sc: (sc[0], -sc[1].count, sc[1].key))
    return PreferencePair(
        cluster_id=pool.cluster_id,
        prompt=pool.prompt,
        w_plus=best[1].representative,
        w_minus=worst[1].representative,
        r_plus=best[0],
        r_minus=worst[0],
        rho=best[0] - worst[0],
    )


class _neg_key:
    """Ordering adapter so max() prefers the smallest canonical key."""

    __slots__ = ("key",)

    def __init__(self, key: CanonicalKey):
        self.key = key

    def __lt__(self, other: "_neg_key") -> bool:
        return self.key > other.key


def scpo_loss(
    logp_plus_policy: float,
    logp_plus_ref: float,
    logp_minus_policy: float,
    logp_minus_ref: float,
    len_plus: int,
    rho: float,
    hp: ScpoHyperparams,
) -> float:
    """Numeric value of the weighted preference-optimization objective.

    With sequence log-likelihoods under the policy and the frozen
    reference model::

        margin = beta * (logp+_policy - logp+_ref)
               - beta * (logp-_policy - logp-_ref)
        loss = -rho * log(sigmoid(margin)) - alpha * rho * logp+_policy / len_plus

    The second term stabilizes the likelihood of the preferred sample.
    """
    inputs = (logp_plus_policy, logp_plus_ref, logp_minus_policy, logp_minus_ref, rho)
    if not all(math.isfinite(x) for x in inputs):
        raise ValueError("scpo_loss inputs must be finite")
    if len_plus < 1:
        raise ValueError("len_plus must be >= 1")
    margin = hp.beta_dpo * (logp_plus_policy - logp_plus_ref) - hp.beta_dpo * (
        logp_minus_policy - logp_minus_ref
    )
    # log(sigmoid(x)), numerically stable on both tails
    if margin >= 0:
        log_sigmoid = -math.log1p(math.exp(-margin))
    else:
        log_sigmoid = margin - math.log1p(math.exp(margin))
    return -rho * log_sigmoid - hp.alpha_nll * rho * logp_plus_policy / len_plus


@dataclass(frozen=True)
class SftRecord:
    instruction: str
    target_workflow: str  # serialized graph document


def build_sft_dataset(clusters: Iterable[SemanticCluster]) -> Iterator[SftRecord]:
    """Instruction-augmented SFT records: every variant with the gold workflow.

    The gold workflow of a cluster is the one attached to its original
    variant; the workflow is kept unchanged across all rewrites of the
    instruction. Clusters without a gold workflow are skipped with a
    warning. A cluster with K extra variants emits K + 1 records.
    """
    for cluster in clusters:
        gold: Mapping | None = None
        if cluster.variants and cluster.variants[0].workflow is not None:
            gold = cluster.variants[0].workflow
        if gold is None:
            logger.warning("cluster %s has no gold workflow; skipped", cluster.cluster_id)
            continue
        target = json.dumps(gold, ensure_ascii=False, sort_keys=True)
        for variant in cluster.variants:
            if variant.error:
                continue
            yield SftRecord(instruction=variant.text, target_workflow=target)


def emit_pairs(pairs: Sequence[PreferencePair], path: str | Path) -> int:
    """Write the preference dataset as JSONL; returns the record count.

    One record per pair with a fixed field order: cluster_id, prompt,
    chosen, rejected, rho. Pairs with negative rho are refused.
    """
    path = Path(path)
    lines = []
    for pair in pairs:
        if pair.rho < 0:
            raise ValueError(f"pair for cluster {pair.cluster_id} has negative rho")
        record = {
            "cluster_id": pair.cluster_id,
            "prompt": pair.prompt,
            "chosen": serialize_workflow_graph(pair.w_plus),
            "rejected": serialize_workflow_graph(pair.w_minus),
            "rho": pair.rho,
        }
        lines.append(json.dumps(record, ensure_ascii=False))
    try:
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write preference pairs to {path}: {exc}") from exc
    return len(lines)
