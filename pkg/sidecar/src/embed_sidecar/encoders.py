"""Encoders behind the /embed endpoint.

The service only assumes an object with ``encode``, ``dim`` and
``model_id``; which one backs a deployment is configuration, not code.
"""
from __future__ import annotations

import hashlib
from typing import Protocol, Sequence

import numpy as np


class Encoder(Protocol):
    dim: int
    model_id: str

    def encode(self, texts: Sequence[str]) -> list[list[float]]:
        """One unit-norm vector per text, in input order."""
        ...


class HashedNgramEncoder:
    """Dependency-free deterministic encoder (hashed character 4-grams).

    Default for smoke deployments and tests; swap in the sentence model
    for real evaluations.
    """

    def __init__(self, dim: int = 384):
        self.dim = dim
        self.model_id = f"hashed-ngram-{dim}"

    def encode(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            counts = np.zeros(self.dim)
            lowered = text.lower()
            grams = [lowered[i : i + 4] for i in range(len(lowered) - 3)] or [lowered]
            for gram in grams:
                digest = hashlib.sha256(gram.encode("utf-8")).digest()
                counts[int.from_bytes(digest[:8], "big") % self.dim] += 1.0
            counts /= np.linalg.norm(counts)
            out.append([float(x) for x in counts])
        return out


class SentenceTransformerEncoder:
    """Sentence-embedding model loaded once at startup."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)
        self.model_id = model_name
        self.dim = int(self._model.get_sentence_embedding_dimension())

    def encode(self, texts: Sequence[str]) -> list[list[float]]:
        vectors = self._model.encode(
            list(texts), normalize_embeddings=True, convert_to_numpy=True
        )
        return [[float(x) for x in row] for row in np.atleast_2d(vectors)]
