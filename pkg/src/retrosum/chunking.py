"""Fixed-size chunking of token sequences.

A chunk is the atomic unit of indexing, retrieval and generation
scheduling. Only the last chunk of a sequence may carry padding, and the
pad ids always sit at the tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tokenizer import PAD_ID, TokenSeq

DEFAULT_CHUNK_SIZE = 64


class ChunkingError(ValueError):
    pass


@dataclass
class Chunk:
    doc_id: str
    index: int
    ids: np.ndarray  # exactly m int32 token ids
    pad_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        m = len(self.ids)
        if not 0 <= self.pad_len < m:
            raise ChunkingError(f"pad_len {self.pad_len} out of range for chunk size {m}")
        tail = self.ids[m - self.pad_len :]
        head = self.ids[: m - self.pad_len]
        if self.pad_len and not np.all(tail == PAD_ID):
            raise ChunkingError("padding must fill the chunk tail")
        if np.any(head == PAD_ID):
            raise ChunkingError("pad id appears before the padded tail")

    @property
    def content_ids(self) -> np.ndarray:
        return self.ids[: len(self.ids) - self.pad_len]


def chunk(seq: TokenSeq | list[int], m: int = DEFAULT_CHUNK_SIZE, doc_id: str = "") -> list[Chunk]:
    """Split a token sequence into ceil(len/m) chunks, padding only the last."""
    if m < 1:
        raise ChunkingError(f"chunk size must be >= 1, got {m}")
    ids = seq.ids if isinstance(seq, TokenSeq) else list(seq)
    out = []
    for index in range(0, len(ids), m):
        piece = ids[index : index + m]
        pad_len = m - len(piece)
        arr = np.full(m, PAD_ID, dtype=np.int32)
        arr[: len(piece)] = piece
        out.append(Chunk(doc_id=doc_id, index=index // m, ids=arr, pad_len=pad_len))
    return out


def unchunk(chunks: list[Chunk]) -> list[int]:
    """Concatenate chunk contents, dropping the final chunk's padding."""
    out: list[int] = []
    for c in chunks:
        out.extend(int(i) for i in c.content_ids)
    return out
