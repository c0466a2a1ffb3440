"""Per-document chunk embedding index with exact cosine top-k search.

One index per document, never across documents: retrieval during
summarization can only surface content from the document being summarized.
Indexes are small (a few hundred chunks), so exact search is the default
and also the fast option.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chunking import Chunk, chunk as make_chunks
from .tokenizer import PAD_ID

INDEX_MAGIC = b"RSIX"
INDEX_VERSION = 1


class EmbedIndexError(ValueError):
    pass


@dataclass
class Embedding:
    """A unit-norm dense vector under the cosine metric."""

    vec: np.ndarray

    def __post_init__(self):
        self.vec = np.asarray(self.vec, dtype=np.float32)
        norm = float(np.linalg.norm(self.vec))
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
            raise EmbedIndexError(f"embedding is not unit norm (|v|={norm})")

    @property
    def d(self) -> int:
        return int(self.vec.shape[0])


def normalize(vec: np.ndarray) -> Embedding:
    vec = np.asarray(vec, dtype=np.float32)
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm == 0.0:
        raise EmbedIndexError("cannot normalize a zero or non-finite vector")
    return Embedding(vec / norm)


@dataclass
class Neighbor:
    chunk_index: int
    score: float
    tokens: np.ndarray  # exactly 2m ids: the chunk plus its continuation


@dataclass
class DocIndex:
    doc_id: str
    embeddings: np.ndarray  # (num_chunks, d) float32, unit rows
    chunks: list[Chunk]
    m: int
    metric: str = "cosine"

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.chunks):
            raise EmbedIndexError(
                f"{self.doc_id}: {self.embeddings.shape[0]} embedding rows for {len(self.chunks)} chunks"
            )

    @property
    def num_chunks(self) -> int:
        return len(self.chunks)

    @property
    def d(self) -> int:
        return int(self.embeddings.shape[1])


def embed_chunk(embedder, c: Chunk) -> Embedding:
    """Embed one chunk; padding is excluded from pooling by the embedder."""
    if len(c.content_ids) == 0:
        raise EmbedIndexError(f"{c.doc_id}: chunk {c.index} is all padding, nothing to embed")
    return normalize(embedder.embed_chunk_vec(c))


def build_index(doc, tokenizer, embedder, m: int) -> DocIndex:
    """Chunk a document body and embed every chunk."""
    ids = tokenizer.encode(doc.body_text())
    if not ids:
        raise EmbedIndexError(f"{doc.article_id}: document body is empty after tokenization")
    chunks = make_chunks(ids, m=m, doc_id=doc.article_id)
    rows = np.stack([embed_chunk(embedder, c).vec for c in chunks])
    return DocIndex(doc_id=doc.article_id, embeddings=rows, chunks=chunks, m=m)


def reembed_index(index: DocIndex, embedder) -> DocIndex:
    """Recompute embeddings for existing chunks (start-of-epoch refresh)."""
    rows = np.stack([embed_chunk(embedder, c).vec for c in index.chunks])
    return DocIndex(doc_id=index.doc_id, embeddings=rows, chunks=index.chunks, m=index.m)


def neighbor_tokens(index: DocIndex, chunk_index: int, continuation: bool = True) -> np.ndarray:
    """The 2m-token payload: neighbor chunk plus its in-document continuation."""
    m = index.m
    out = np.full(2 * m, PAD_ID, dtype=np.int32)
    out[:m] = index.chunks[chunk_index].ids
    if continuation and chunk_index + 1 < index.num_chunks:
        out[m:] = index.chunks[chunk_index + 1].ids
    return out


def query(index: DocIndex, q: Embedding, k: int, continuation: bool = True) -> list[Neighbor]:
    """Exact top-k by cosine score, descending; ties broken by lower chunk index."""
    if k < 1:
        raise EmbedIndexError(f"k must be >= 1, got {k}")
    if q.d != index.d:
        raise EmbedIndexError(f"query dim {q.d} does not match index dim {index.d}")
    scores = index.embeddings @ q.vec
    order = np.lexsort((np.arange(index.num_chunks), -scores))
    out = []
    for idx in order[: min(k, index.num_chunks)]:
        out.append(
            Neighbor(
                chunk_index=int(idx),
                score=float(scores[idx]),
                tokens=neighbor_tokens(index, int(idx), continuation),
            )
        )
    return out


def brute_force_knn(rows, q, k: int) -> list[tuple[int, float]]:
    """Independent oracle for query(): plain python scan, same tie rule."""
    rows = np.asarray(rows)
    q = np.asarray(q)
    if rows.ndim != 2 or rows.shape[1] != q.shape[0]:
        raise EmbedIndexError(f"shape mismatch: rows {rows.shape} vs query {q.shape}")
    scored = []
    for i in range(rows.shape[0]):
        s = 0.0
        for a, b in zip(rows[i].tolist(), q.tolist()):
            s += a * b
        scored.append((i, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def save_index(index: DocIndex, path) -> None:
    """Little-endian binary: magic, version, d, num_chunks, m, doc id,
    row-major f32 matrix, then int32 chunk token arrays."""
    path = Path(path)
    doc_id = index.doc_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack("<IIII", INDEX_VERSION, index.d, index.num_chunks, index.m))
        f.write(struct.pack("<H", len(doc_id)))
        f.write(doc_id)
        f.write(np.ascontiguousarray(index.embeddings, dtype=np.float32).tobytes())
        tokens = np.stack([c.ids for c in index.chunks]).astype(np.int32)
        f.write(tokens.tobytes())


def load_index(path) -> DocIndex:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != INDEX_MAGIC:
            raise EmbedIndexError(f"{path}: bad index magic {magic!r}")
        version, d, num_chunks, m = struct.unpack("<IIII", f.read(16))
        if version != INDEX_VERSION:
            raise EmbedIndexError(f"{path}: unsupported index version {version}")
        (id_len,) = struct.unpack("<H", f.read(2))
        doc_id = f.read(id_len).decode("utf-8")
        rows = np.frombuffer(f.read(num_chunks * d * 4), dtype=np.float32).reshape(num_chunks, d).copy()
        tokens = np.frombuffer(f.read(num_chunks * m * 4), dtype=np.int32).reshape(num_chunks, m).copy()
    chunks = []
    for i in range(num_chunks):
        ids = tokens[i]
        pad_len = 0
        while pad_len < m and ids[m - 1 - pad_len] == PAD_ID:
            pad_len += 1
        chunks.append(Chunk(doc_id=doc_id, index=i, ids=ids, pad_len=pad_len))
    return DocIndex(doc_id=doc_id, embeddings=rows, chunks=chunks, m=m)
