"""The /embed microservice.

Protocol (shared with any compatible provider client):

* ``POST /embed`` with ``{"texts": ["...", ...]}`` returns
  ``{"vectors": [[...], ...], "dim": n}`` — one unit-norm vector per
  text, order preserving.
* ``GET /health`` returns ``{"dim": n, "model_id": "..."}``.

Errors: batches over ``max_batch`` get 413; an empty batch, empty text,
or text over ``max_chars`` gets 400; encoder failures get an opaque 500.
An optional static bearer token guards both endpoints.
"""
from __future__ import annotations

from fastapi import Depends, FastAPI, HTTPException, Request
from pydantic import BaseModel

from .encoders import Encoder


class EmbedRequest(BaseModel):
    texts: list[str]


class EmbedResponse(BaseModel):
    vectors: list[list[float]]
    dim: int


def create_app(
    encoder: Encoder,
    *,
    max_batch: int = 64,
    max_chars: int = 8192,
    bearer_token: str | None = None,
) -> FastAPI:
    app = FastAPI(title="embed-sidecar")

    async def check_auth(request: Request) -> None:
        if bearer_token is None:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {bearer_token}":
            raise HTTPException(status_code=401, detail="missing or invalid bearer token")

    @app.post("/embed", response_model=EmbedResponse, dependencies=[Depends(check_auth)])
    async def embed(request: EmbedRequest) -> EmbedResponse:
        if len(request.texts) > max_batch:
            raise HTTPException(
                status_code=413, detail=f"batch of {len(request.texts)} exceeds max_batch={max_batch}"
            )
        if not request.texts:
            raise HTTPException(status_code=400, detail="texts must not be empty")
        for i, text in enumerate(request.texts):
            if not text:
                raise HTTPException(status_code=400, detail=f"text #{i} is empty")
            if len(text) > max_chars:
                raise HTTPException(
                    status_code=400, detail=f"text #{i} exceeds max_chars={max_chars}"
                )
        try:
            vectors = encoder.encode(request.texts)
        except Exception:
            # opaque by design: model internals never leak to clients
            raise HTTPException(status_code=500, detail="embedding failed")
        return EmbedResponse(vectors=vectors, dim=encoder.dim)

    @app.get("/health", dependencies=[Depends(check_auth)])
    async def health() -> dict:
        return {"dim": encoder.dim, "model_id": encoder.model_id}

    return app
