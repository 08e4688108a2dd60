"""Embedding microservice for the /embed provider protocol."""
from .app import EmbedRequest, EmbedResponse, create_app
from .encoders import Encoder, HashedNgramEncoder, SentenceTransformerEncoder

__version__ = "0.1.0"
