"""Node alignment between reference and predicted workflows.

Builds a thresholded cosine-similarity matrix over node labels (rows =
reference, columns = predicted) and solves an exact maximum-weight
bipartite matching on its nonzero entries, yielding the one-to-one
partial mapping consumed by the robustness metrics.

Two embedding providers are included: a fully deterministic in-process
lexical embedder (character-trigram hashed bag, unit-normalized) used as
the offline default, and an HTTP client for any service implementing the
``POST /embed`` protocol (``{"texts": [...]}`` in, ``{"vectors": [...],
"dim": n}`` out, unit-normalized vectors).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Protocol, Sequence

import httpx
import numpy as np

UNIT_NORM_TOLERANCE = 1e-6


class EmbedderError(Exception):
    """Embedding provider failure (transport, schema, or bad vectors)."""


@dataclass(frozen=True)
class EmbeddingVector:
    """A finite real vector. Provider outputs must be unit L2 norm."""

    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    @staticmethod
    def from_values(values: Sequence[float]) -> "EmbeddingVector":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise EmbedderError("embedding vector must be a non-empty 1-D array")
        if not np.all(np.isfinite(arr)):
            raise EmbedderError("embedding vector contains non-finite entries")
        return EmbeddingVector(values=tuple(float(x) for x in arr))

    @staticmethod
    def unit(values: Sequence[float], *, label_index: int | None = None) -> "EmbeddingVector":
        """Ingest a provider vector, enforcing unit norm to 1e-6."""
        vec = EmbeddingVector.from_values(values)
        norm = math.sqrt(math.fsum(x * x for x in vec.values))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            where = "" if label_index is None else f" for text #{label_index}"
            raise EmbedderError(f"provider returned non-unit vector{where} (norm {norm:.8f})")
        return vec


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        """Return one unit-norm vector per input text, in input order."""
        ...


class LexicalEmbedder:
    """Deterministic offline embedder: hashed character-trigram bag.

    Lowercased character trigrams are hashed (BLAKE2b, so the mapping is
    identical across platforms and runs) into a fixed number of buckets,
    counted, and L2-normalized. Texts shorter than a trigram fall back to
    the whole text as a single feature, so every output has unit norm.
    """

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        return [self._embed_one(text) for text in texts]

    def _embed_one(self, text: str) -> EmbeddingVector:
        counts = np.zeros(self.dim, dtype=np.float64)
        lowered = text.lower()
        features = [lowered[i : i + 3] for i in range(len(lowered) - 2)] or [lowered]
        for feature in features:
            counts[self._bucket(feature)] += 1.0
        counts /= np.linalg.norm(counts)
        return EmbeddingVector(values=tuple(float(x) for x in counts))

    def _bucket(self, feature: str) -> int:
        digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim


class HttpEmbedder:
    """Client for the ``POST /embed`` provider protocol.

    Any non-200 response or schema violation raises EmbedderError. Long
    inputs are split into ``max_batch``-sized requests; results are
    reassembled in input order.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        client: httpx.Client | None = None,
        timeout: float = 30.0,
        max_batch: int = 64,
    ):
        self.endpoint = endpoint
        self.max_batch = max_batch
        self._client = client or httpx.Client(timeout=timeout)

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        vectors: list[EmbeddingVector] = []
        for start in range(0, len(texts), self.max_batch):
            batch = list(texts[start : start + self.max_batch])
            vectors.extend(self._embed_batch(batch, offset=start))
        return vectors

    def _embed_batch(self, batch: list[str], offset: int) -> list[EmbeddingVector]:
        try:
            response = self._client.post(self.endpoint, json={"texts": batch})
        except httpx.HTTPError as exc:
            raise EmbedderError(f"embed request failed: {exc}") from exc
        if response.status_code != 200:
            raise EmbedderError(
                f"embed endpoint returned HTTP {response.status_code}: {response.text[:200]}"
            )
        payload = response.json()
        raw = payload.get("vectors")
        dim = payload.get("dim")
        if not isinstance(raw, list) or len(raw) != len(batch):
            raise EmbedderError(
                f"embed response must carry one vector per text "
                f"(sent {len(batch)}, got {len(raw) if isinstance(raw, list) else 'none'})"
            )
        out = []
        for i, values in enumerate(raw):
            vec = EmbeddingVector.unit(values, label_index=offset + i)
            if isinstance(dim, int) and vec.dim != dim:
                raise EmbedderError(
                    f"vector for text #{offset + i} has dim {vec.dim}, response says {dim}"
                )
            out.append(vec)
        return out


@dataclass(frozen=True)
class SimilarityMatrix:
    """Thresholded cosine similarities; rows = reference, cols = predicted.

    Entries are in [0, 1]; anything below the pruning threshold is stored
    as exactly 0 and is never matchable.
    """

    entries: tuple[tuple[float, ...], ...]
    beta_match_threshold: float

    @property
    def rows(self) -> int:
        return len(self.entries)

    @property
    def cols(self) -> int:
        return len(self.entries[0]) if self.entries else 0

    def __getitem__(self, idx: tuple[int, int]) -> float:
        return self.entries[idx[0]][idx[1]]


def similarity_matrix(
    ref_labels: Sequence[str],
    pred_labels: Sequence[str],
    embedder: Embedder,
    beta_match_threshold: float,
) -> SimilarityMatrix:
    """Cosine similarity of label embeddings, pruned below the threshold.

    Negative cosines are clamped to 0 so entries live in [0, 1].
    """
    if not 0.0 <= beta_match_threshold <= 1.0:
        raise ValueError("beta_match_threshold must be in [0, 1]")
    if not ref_labels or not pred_labels:
        return SimilarityMatrix(
            entries=tuple(() for _ in ref_labels), beta_match_threshold=beta_match_threshold
        )
    vectors = embedder.embed(list(ref_labels) + list(pred_labels))
    ref_mat = np.stack([v.as_array() for v in vectors[: len(ref_labels)]])
    pred_mat = np.stack([v.as_array() for v in vectors[len(ref_labels) :]])
    cosines = np.clip(ref_mat @ pred_mat.T, 0.0, 1.0)
    cosines[cosines < beta_match_threshold] = 0.0
    entries = tuple(tuple(float(x) for x in row) for row in cosines)
    return SimilarityMatrix(entries=entries, beta_match_threshold=beta_match_threshold)


@dataclass(frozen=True)
class AlignedPair:
    ref_index: int
    pred_index: int
    weight: float


@dataclass(frozen=True)
class NodeAlignment:
    """One-to-one partial mapping between reference and predicted nodes."""

    pairs: tuple[AlignedPair, ...]

    @property
    def total_weight(self) -> float:
        return math.fsum(pair.weight for pair in self.pairs)

    def pred_to_ref(self) -> dict[int, int]:
        return {pair.pred_index: pair.ref_index for pair in self.pairs}

    def ref_to_pred(self) -> dict[int, int]:
        return {pair.ref_index: pair.pred_index for pair in self.pairs}

    def matched_ref(self) -> set[int]:
        return {pair.ref_index for pair in self.pairs}

    def matched_pred(self) -> set[int]:
        return {pair.pred_index for pair in self.pairs}

    @staticmethod
    def identity(n: int, weight: float = 1.0) -> "NodeAlignment":
        return NodeAlignment(
            pairs=tuple(AlignedPair(i, i, weight) for i in range(n))
        )


# Tie preference: each candidate pair gets a bonus of 2^-(_EPS_SHIFT + rank)
# where rank runs in lexicographic (ref, pred) order. Weights come from
# float64 values, so any two distinct matching totals differ by at least
# 2^-1074; the bonuses sum to less than 2^-1099 over any matching and can
# therefore never flip a strict comparison, only break exact ties in favor
# of the lexicographically smallest pair sequence.
_EPS_SHIFT = 1100


def max_weight_matching(matrix: SimilarityMatrix) -> NodeAlignment:
    """Exact maximum-weight bipartite matching over nonzero entries.

    Runs the Hungarian algorithm in exact rational arithmetic, with
    tie-breaking toward the lexicographically smallest (ref_index,
    pred_index) pair sequence. Zero entries are never matched; an empty
    matching is a valid result.
    """
    rows, cols = matrix.rows, matrix.cols
    if rows == 0 or cols == 0:
        return NodeAlignment(pairs=())
    n = max(rows, cols)
    weights = [[Fraction(0)] * n for _ in range(n)]
    for i in range(rows):
        for j in range(cols):
            w = matrix.entries[i][j]
            if w > 0.0:
                weights[i][j] = Fraction(w) + Fraction(1, 2 ** (_EPS_SHIFT + i * cols + j))
    col_of_row = _hungarian_max(weights)
    pairs = []
    for i in range(rows):
        j = col_of_row[i]
        if j < cols and matrix.entries[i][j] > 0.0:
            pairs.append(AlignedPair(ref_index=i, pred_index=j, weight=matrix.entries[i][j]))
    pairs.sort(key=lambda p: (p.ref_index, p.pred_index))
    return NodeAlignment(pairs=tuple(pairs))


def _hungarian_max(weights: list[list[Fraction]]) -> list[int]:
    """Optimal assignment maximizing total weight on a square matrix.

    Classic potentials formulation (minimizing negated weights) with
    0-based rows assigned one at a time via shortest augmenting paths.
    Exact because all arithmetic stays in Fraction.
    """
    n = len(weights)
    cost = [[-weights[i][j] for j in range(n)] for i in range(n)]
    u = [Fraction(0)] * (n + 1)
    v = [Fraction(0)] * (n + 1)
    match = [0] * (n + 1)  # match[j] = row assigned to column j (1-based)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv: list[Fraction | None] = [None] * (n + 1)
        way = [0] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta: Fraction | None = None
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1][j - 1] - u[i0] - v[j]
                if minv[j] is None or cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if delta is None or minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            assert delta is not None
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                elif minv[j] is not None:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, n + 1):
        if match[j]:
            col_of_row[match[j] - 1] = j - 1
    return col_of_row


def align_workflows(
    ref_labels: Sequence[str],
    pred_labels: Sequence[str],
    embedder: Embedder,
    beta_match_threshold: float,
) -> NodeAlignment:
    """Similarity matrix + matching in one step."""
    return max_weight_matching(
        similarity_matrix(ref_labels, pred_labels, embedder, beta_match_threshold)
    )
