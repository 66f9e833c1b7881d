"""Dynamic few-shot index: embed training notes and retrieve the nearest ones."""

import hashlib
import json
import logging
import re
from collections.abc import Sequence
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np
from pydantic import BaseModel

from .codes import IcdCode, in_scope
from .config import EmbedderConfig, get_settings
from .errors import BackendConfigError, BackendError, IndexBuildError, TransientBackendError
from .models import ClinicalNote

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[a-z0-9]+")


class IndexedExample(BaseModel):
    note_id: str
    text: str
    gold_codes: list[IcdCode]
    embedding: list[float]


class Embedder(Protocol):
    @property
    def fingerprint(self) -> str: ...

    async def embed(self, texts: list[str]) -> list[list[float]]: ...


class HashingEmbedder:
    """Deterministic bag-of-words feature hashing; needs no embedding service."""

    def __init__(self, dimension: int = 256) -> None:
        self.dimension = dimension

    @property
    def fingerprint(self) -> str:
        return f"hashing:{self.dimension}"

    def _vector(self, text: str) -> list[float]:
        vector = np.zeros(self.dimension)
        for token in _TOKEN.findall(text.lower()):
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            sign = 1.0 if value & 1 else -1.0
            vector[(value >> 1) % self.dimension] += sign
        return vector.tolist()

    async def embed(self, texts: list[str]) -> list[list[float]]:
        return [self._vector(t) for t in texts]


class HttpEmbedder:
    """Client for an OpenAI-compatible /embeddings endpoint."""

    def __init__(
        self,
        config: EmbedderConfig,
        api_key: str | None = None,
        transport: httpx.AsyncBaseTransport | None = None,
    ) -> None:
        self.config = config
        self.api_key = api_key if api_key is not None else get_settings().embedding_api_key
        self.transport = transport

    @property
    def fingerprint(self) -> str:
        return f"http:{self.config.model}"

    async def embed(self, texts: list[str]) -> list[list[float]]:
        url = f"{self.config.endpoint.rstrip('/')}/embeddings"
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        async with httpx.AsyncClient(timeout=self.config.timeout, transport=self.transport) as client:
            try:
                response = await client.post(url, headers=headers, json={"model": self.config.model, "input": texts})
            except httpx.TransportError as e:
                raise TransientBackendError(f"Cannot reach {url}: {e}") from e
        if response.status_code >= 400:
            if response.status_code == 429 or response.status_code >= 500:
                raise TransientBackendError(f"{url} returned HTTP {response.status_code}")
            raise BackendConfigError(f"{url} returned HTTP {response.status_code}", response.status_code)
        data = sorted(response.json()["data"], key=lambda d: d["index"])
        return [d["embedding"] for d in data]


def create_embedder(config: EmbedderConfig) -> Embedder:
    if config.kind == "http":
        return HttpEmbedder(config)
    return HashingEmbedder(config.dimension)


def _normalize(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return matrix / norms


class FewShotIndex:
    """
    Exact cosine-similarity index over training notes.

    Examples are kept sorted by note_id, so a stable sort on similarity breaks
    ties by note_id and insertion order never matters.
    """

    def __init__(self, examples: Sequence[IndexedExample], fingerprint: str) -> None:
        self.examples = sorted(examples, key=lambda e: e.note_id)
        self.fingerprint = fingerprint
        dimensions = {len(e.embedding) for e in self.examples}
        if len(dimensions) > 1:
            raise IndexBuildError(f"Mixed embedding dimensions: {sorted(dimensions)}")
        self.dimension = dimensions.pop() if dimensions else 0
        if self.examples:
            self._matrix = _normalize(np.array([e.embedding for e in self.examples], dtype=np.float64))
        else:
            self._matrix = np.zeros((0, 0))

    def __len__(self) -> int:
        return len(self.examples)

    def nearest(self, vector: Sequence[float], k: int, exclude_id: str | None = None) -> list[IndexedExample]:
        """Top-k examples by cosine similarity, descending, ties by note_id."""
        if k <= 0 or not self.examples:
            return []
        query = np.asarray(vector, dtype=np.float64)
        if query.shape != (self.dimension,):
            raise ValueError(f"Query dimension {query.shape[0]} != index dimension {self.dimension}")
        norm = np.linalg.norm(query)
        similarities = self._matrix @ (query / norm if norm else query)
        order = np.argsort(-similarities, kind="stable")
        result = []
        for position in order:
            example = self.examples[int(position)]
            if example.note_id == exclude_id:
                continue
            result.append(example)
            if len(result) == k:
                break
        return result

    async def retrieve(self, note: ClinicalNote | str, k: int, embedder: Embedder) -> list[IndexedExample]:
        """Embed a query note and return its k nearest examples, excluding the note itself."""
        if k <= 0 or not self.examples:
            return []
        if embedder.fingerprint != self.fingerprint:
            logger.warning("Embedder %s differs from index fingerprint %s", embedder.fingerprint, self.fingerprint)
        text = note.text if isinstance(note, ClinicalNote) else note
        exclude = note.note_id if isinstance(note, ClinicalNote) else None
        [vector] = await embedder.embed([text])
        return self.nearest(vector, k, exclude_id=exclude)

    def save(self, path: str | Path) -> None:
        """Write a header line {dimension, count, fingerprint} followed by one record per line."""
        header = {"dimension": self.dimension, "count": len(self.examples), "fingerprint": self.fingerprint}
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header) + "\n")
            for example in self.examples:
                f.write(example.model_dump_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FewShotIndex":
        with open(path, encoding="utf-8") as f:
            header = json.loads(f.readline())
            examples = [IndexedExample.model_validate_json(line) for line in f if line.strip()]
        if len(examples) != header["count"]:
            raise IndexBuildError(f"Index file {path} declares {header['count']} records, found {len(examples)}")
        index = cls(examples, header["fingerprint"])
        if examples and index.dimension != header["dimension"]:
            raise IndexBuildError(f"Index file {path} declares dimension {header['dimension']}")
        return index


async def build_index(
    notes: Sequence[ClinicalNote],
    embedder: Embedder,
    batch_size: int = 64,
) -> FewShotIndex:
    """
    Embed notes with their gold codes into an index.

    Raises:
        IndexBuildError: Embedder failures (listing the failed note ids) or
            mixed embedding dimensions
    """
    examples: list[IndexedExample] = []
    failed: list[str] = []
    for start in range(0, len(notes), batch_size):
        batch = notes[start : start + batch_size]
        try:
            vectors = await embedder.embed([n.text for n in batch])
        except BackendError as e:
            logger.error("Embedding batch starting at %d failed: %s", start, e)
            failed.extend(n.note_id for n in batch)
            continue
        if len(vectors) != len(batch):
            failed.extend(n.note_id for n in batch)
            continue
        for note, vector in zip(batch, vectors, strict=True):
            examples.append(
                IndexedExample(
                    note_id=note.note_id,
                    text=note.text,
                    gold_codes=[c for c in note.gold_codes if in_scope(c, "diagnosis")],
                    embedding=vector,
                )
            )
    if failed:
        raise IndexBuildError(f"Embedding failed for {len(failed)} note(s)", failed)
    index = FewShotIndex(examples, embedder.fingerprint)
    logger.info("Built few-shot index: %d examples, dimension %d", len(index), index.dimension)
    return index
