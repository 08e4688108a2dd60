"""Run the sidecar under uvicorn.

    embed-sidecar --model sentence-transformers/all-MiniLM-L6-v2
    embed-sidecar --encoder hashed           # dependency-free smoke mode

Environment fallbacks: EMBED_SIDECAR_MODEL, EMBED_SIDECAR_TOKEN,
EMBED_SIDECAR_MAX_BATCH, EMBED_SIDECAR_MAX_CHARS.
"""
from __future__ import annotations

import argparse
import os

import uvicorn

from .app import create_app
from .encoders import HashedNgramEncoder, SentenceTransformerEncoder


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="embed-sidecar")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8876)
    parser.add_argument(
        "--encoder", choices=["sentence-transformer", "hashed"], default="sentence-transformer"
    )
    parser.add_argument(
        "--model",
        default=os.environ.get("EMBED_SIDECAR_MODEL", "sentence-transformers/all-MiniLM-L6-v2"),
    )
    parser.add_argument("--max-batch", type=int,
                        default=int(os.environ.get("EMBED_SIDECAR_MAX_BATCH", "64")))
    parser.add_argument("--max-chars", type=int,
                        default=int(os.environ.get("EMBED_SIDECAR_MAX_CHARS", "8192")))
    args = parser.parse_args(argv)

    if args.encoder == "hashed":
        encoder = HashedNgramEncoder()
    else:
        encoder = SentenceTransformerEncoder(args.model)
    app = create_app(
        encoder,
        max_batch=args.max_batch,
        max_chars=args.max_chars,
        bearer_token=os.environ.get("EMBED_SIDECAR_TOKEN") or None,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
