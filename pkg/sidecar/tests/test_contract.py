"""Contract tests for the /embed protocol, run both against recorded
fixtures and against the live sidecar app through the primary package's
HTTP provider client."""
from __future__ import annotations

import json
import math
import socket
import threading
import time

import httpx
import numpy as np
import pytest
import uvicorn
from fastapi.testclient import TestClient

from embed_sidecar import HashedNgramEncoder, create_app
from flowgauge.alignment import EmbedderError, HttpEmbedder

ENCODER = HashedNgramEncoder(dim=32)


class FailingEncoder:
    dim = 8
    model_id = "broken"

    def encode(self, texts):
        raise RuntimeError("secret internal detail")


@pytest.fixture
def app():
    return create_app(ENCODER, max_batch=4, max_chars=64)


@pytest.fixture
def client(app):
    return TestClient(app)


def provider_contract(embedder: HttpEmbedder) -> None:
    """The one contract every /embed provider must satisfy: one unit-norm
    vector per text, order preserving, deterministic."""
    texts = ["first text", "second text", "first text"]
    vectors = embedder.embed(texts)
    assert len(vectors) == 3
    for vector in vectors:
        assert abs(math.fsum(x * x for x in vector.values) ** 0.5 - 1.0) <= 1e-6
    assert vectors[0] == vectors[2]  # determinism
    assert vectors[0] != vectors[1]  # order actually preserved
    again = embedder.embed(["second text"])[0]
    assert again == vectors[1]
    # cosine of a text with itself is 1 within tolerance
    self_cos = float(np.dot(vectors[0].as_array(), vectors[2].as_array()))
    assert abs(self_cos - 1.0) <= 1e-6


def test_http_provider_against_recorded_fixtures():
    def handler(request: httpx.Request) -> httpx.Response:
        payload = json.loads(request.content)
        return httpx.Response(
            200, json={"vectors": ENCODER.encode(payload["texts"]), "dim": ENCODER.dim}
        )

    embedder = HttpEmbedder(
        "http://fixtures/embed", client=httpx.Client(transport=httpx.MockTransport(handler))
    )
    provider_contract(embedder)


def test_http_provider_against_live_sidecar(app):
    embedder = HttpEmbedder("http://testserver/embed", client=TestClient(app))
    provider_contract(embedder)


class TestEmbedEndpoint:
    def test_order_preserving_unit_norm(self, client):
        texts = ["alpha", "beta", "gamma"]
        response = client.post("/embed", json={"texts": texts})
        assert response.status_code == 200
        payload = response.json()
        assert payload["dim"] == ENCODER.dim
        assert payload["vectors"] == ENCODER.encode(texts)
        for vector in payload["vectors"]:
            assert abs(math.fsum(x * x for x in vector) ** 0.5 - 1.0) <= 1e-6

    def test_duplicate_texts_get_identical_vectors(self, client):
        response = client.post("/embed", json={"texts": ["a", "a"]})
        vectors = response.json()["vectors"]
        assert vectors[0] == vectors[1]

    def test_oversize_batch_is_413(self, client):
        response = client.post("/embed", json={"texts": ["x"] * 5})
        assert response.status_code == 413

    def test_empty_batch_is_400(self, client):
        assert client.post("/embed", json={"texts": []}).status_code == 400

    def test_empty_text_is_400(self, client):
        assert client.post("/embed", json={"texts": [""]}).status_code == 400

    def test_oversize_text_is_400(self, client):
        assert client.post("/embed", json={"texts": ["y" * 65]}).status_code == 400

    def test_encoder_failure_is_opaque_500(self):
        client = TestClient(create_app(FailingEncoder()), raise_server_exceptions=False)
        response = client.post("/embed", json={"texts": ["x"]})
        assert response.status_code == 500
        assert "secret" not in response.text

    def test_health(self, client):
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"dim": ENCODER.dim, "model_id": ENCODER.model_id}


class TestBearerToken:
    def test_rejected_without_token(self):
        client = TestClient(create_app(ENCODER, bearer_token="sesame"))
        assert client.post("/embed", json={"texts": ["x"]}).status_code == 401
        assert client.get("/health").status_code == 401

    def test_accepted_with_token(self):
        client = TestClient(create_app(ENCODER, bearer_token="sesame"))
        response = client.post(
            "/embed", json={"texts": ["x"]}, headers={"Authorization": "Bearer sesame"}
        )
        assert response.status_code == 200


def test_real_socket_round_trip():
    """Full uvicorn server on a real port, exercised via the provider client."""
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    config = uvicorn.Config(
        create_app(ENCODER), host="127.0.0.1", port=port, log_level="error"
    )
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    try:
        deadline = time.time() + 10
        while not server.started:
            if time.time() > deadline:
                pytest.fail("sidecar did not start in time")
            time.sleep(0.05)
        embedder = HttpEmbedder(f"http://127.0.0.1:{port}/embed")
        provider_contract(embedder)
        health = httpx.get(f"http://127.0.0.1:{port}/health", timeout=5.0)
        assert health.status_code == 200 and health.json()["dim"] == ENCODER.dim
    finally:
        server.should_exit = True
        thread.join(timeout=5)


def test_sentence_transformer_encoder_if_available():
    pytest.importorskip("sentence_transformers")
    try:
        from embed_sidecar.encoders import SentenceTransformerEncoder

        encoder = SentenceTransformerEncoder()
    except Exception as exc:  # model weights unavailable offline
        pytest.skip(f"sentence model not loadable here: {exc}")
    vectors = encoder.encode(["hello world"])
    assert len(vectors) == 1 and len(vectors[0]) == encoder.dim
    norm = math.fsum(x * x for x in vectors[0]) ** 0.5
    assert abs(norm - 1.0) <= 1e-6
