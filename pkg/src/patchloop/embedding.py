"""Text embedding backends with a content-hash cache.

Two backends share one interface: a deterministic local embedder used for
tests and offline runs (signed feature hashing over word tokens), and a
remote embedder speaking the common ``/embeddings`` JSON protocol. Both are
normally wrapped in :class:`CachingEmbedder` because deduplication and
retrieval repeatedly embed identical descriptions.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import urllib.error
import urllib.request

import numpy as np

from .errors import EmbeddingUnavailable

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, 0.0 when either vector is all zeros."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def jaccard_similarity(a: str, b: str) -> float:
    """Token-overlap score used when the embedding backend is down."""
    sa, sb = set(tokenize(a)), set(tokenize(b))
    if not sa and not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


class DeterministicEmbedder:
    """Signed feature-hashing embedder: stable across runs and platforms.

    Each token is hashed with SHA-256; the first four digest bytes pick a
    bucket and the fifth byte's parity picks the sign. The vector is the
    signed token-count histogram (unnormalized; cosine is scale-invariant).
    """

    def __init__(self, dim: int = 64) -> None:
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "big") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            vec[bucket] += sign
        return vec


class RemoteEmbedder:
    """OpenAI-compatible embedding endpoint client."""

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_key_env: str = "",
        timeout: float = 30.0,
        dim: int = 1536,
    ) -> None:
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        payload = json.dumps({"model": self.model_name, "input": [text]}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "") if self.api_key_env else ""
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(
            f"{self.endpoint}/embeddings", data=payload, headers=headers
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float64)
        except (urllib.error.URLError, OSError, KeyError, IndexError, ValueError) as exc:
            raise EmbeddingUnavailable(f"embedding request failed: {exc}") from exc
        return vec


class CachingEmbedder:
    """Wraps any embedder with a thread-safe cache keyed by content hash."""

    def __init__(self, inner) -> None:
        self.inner = inner
        self.dim = inner.dim
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embed(self, text: str) -> np.ndarray:
        key = hashlib.sha256(text.encode("utf-8")).hexdigest()
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        vec = self.inner.embed(text)
        with self._lock:
            self._cache[key] = vec
        return vec

    def __len__(self) -> int:
        with self._lock:
            return len(self._cache)


def default_embedder() -> CachingEmbedder:
    return CachingEmbedder(DeterministicEmbedder())
