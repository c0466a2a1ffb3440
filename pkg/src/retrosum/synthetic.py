"""Synthetic corpora: copy-task documents, toy overfit sets, fixture records.

Documents are built from a pool of pseudo-words sampled with a Zipf-like
skew so that a model can learn the unigram statistics of the pool while
individual sentences stay unpredictable. Every abstract is a contiguous run
of body sentences (a verbatim sentence subset), and the title repeats the
first abstract sentence, which anchors the first retrieval query during
generation.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .corpus import Document, serialize_record

_SYLLABLES = [
    "ra", "lo", "sti", "ven", "mar", "tel", "dro", "qui", "faz", "nor",
    "bel", "kum", "tra", "sol", "min", "car", "pex", "dul", "gor", "zan",
    "fi", "mo", "ter", "lix", "bra", "nev", "sur", "pol", "gat", "rem",
]

_SECTION_NAMES = ["introduction", "related work", "method", "experiments", "results", "conclusion"]


def _word_pool(rng: np.random.Generator, size: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < size:
        n_syl = int(rng.integers(2, 4))
        w = "".join(rng.choice(_SYLLABLES) for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _zipf_weights(size: int, a: float = 1.2) -> np.ndarray:
    ranks = np.arange(1, size + 1, dtype=np.float64)
    w = ranks**-a
    return w / w.sum()


class SentenceSampler:
    def __init__(self, seed: int, pool_size: int = 800):
        self.rng = np.random.default_rng(seed)
        self.pool = np.array(_word_pool(self.rng, pool_size))
        self.weights = _zipf_weights(pool_size)

    def sentence(self, lo: int, hi: int) -> str:
        n = int(self.rng.integers(lo, hi + 1))
        words = self.rng.choice(self.pool, size=n, p=self.weights)
        return " ".join(words) + " ."


def make_documents(
    seed: int,
    n_docs: int,
    body_sentences: tuple[int, int] = (10, 16),
    abstract_sentences: tuple[int, int] = (4, 6),
    words_per_sentence: tuple[int, int] = (8, 14),
    pool_size: int = 800,
    prefix: str = "syn",
) -> list[Document]:
    """Copy-task documents: abstract = contiguous body run, title = its first sentence."""
    sampler = SentenceSampler(seed, pool_size)
    rng = sampler.rng
    docs: list[Document] = []
    for i in range(n_docs):
        nb = int(rng.integers(*body_sentences))
        body = tuple(sampler.sentence(*words_per_sentence) for _ in range(nb))
        na = min(int(rng.integers(*abstract_sentences)), nb - 1)
        start = int(rng.integers(1, nb - na + 1))
        abstract = body[start : start + na]
        title = abstract[0].rstrip(" .")
        n_sections = int(rng.integers(2, 4))
        bounds = sorted(rng.choice(np.arange(1, nb), size=n_sections - 1, replace=False).tolist())
        pieces = np.split(np.array(body, dtype=object), bounds)
        sections = tuple(tuple(str(s) for s in piece) for piece in pieces)
        names = tuple(_SECTION_NAMES[: len(sections)])
        docs.append(
            Document(
                article_id=f"{prefix}-{i:04d}",
                title=title,
                abstract_sentences=abstract,
                body_sentences=body,
                section_names=names,
                sections=sections,
            )
        )
    return docs


def make_toy_corpus(seed: int = 0, n_train: int = 8, n_val: int = 4) -> tuple[list[Document], list[Document]]:
    """The small corpus used for overfit checks and loss-curve shape tests."""
    docs = make_documents(seed, n_train + n_val, prefix="toy")
    return docs[:n_train], docs[n_train:]


def make_copy_corpus(seed: int = 1, n_train: int = 64, n_heldout: int = 16) -> tuple[list[Document], list[Document]]:
    """The copy-task corpus for the with/without-retrieval comparison."""
    docs = make_documents(seed, n_train + n_heldout, prefix="copy")
    return docs[:n_train], docs[n_train:]


def make_fixture_records(seed: int = 7, n: int = 20) -> list[dict]:
    """arXiv-shaped JSON records with dataset quirks: sentence markers in
    abstract_text, LaTeX placeholders, no explicit title key."""
    docs = make_documents(seed, n, body_sentences=(18, 30), prefix="fix")
    rng = np.random.default_rng(seed + 1)
    records = []
    for doc in docs:
        body = list(doc.body_sentences)
        for _ in range(int(rng.integers(2, 6))):
            j = int(rng.integers(0, len(body)))
            words = body[j].split()
            words.insert(int(rng.integers(0, len(words))), f"@xmath{int(rng.integers(0, 9))}")
            body[j] = " ".join(words)
        flat = body
        sections = []
        offset = 0
        for sec in doc.sections:
            sections.append(flat[offset : offset + len(sec)])
            offset += len(sec)
        records.append(
            {
                "article_id": doc.article_id,
                "abstract_text": [f"<S> {s} </S>" for s in doc.abstract_sentences],
                "article_text": flat,
                "section_names": list(doc.section_names),
                "sections": sections,
            }
        )
    return records


def write_jsonl(path, docs: list[Document]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(serialize_record(doc) + "\n")


def write_fixture(path, records: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
