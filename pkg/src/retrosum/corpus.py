"""Ingestion of arXiv-style JSON-lines records.

Each line is one JSON object with keys ``article_id``, ``abstract_text``,
``article_text``, ``section_names`` and ``sections``. Some releases wrap
abstract sentences in ``<S>``/``</S>`` markers; those are delimiters, not
content, and are stripped on parse. LaTeX placeholders such as ``@xmath0``
are content and pass through verbatim.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)

REQUIRED_KEYS = ("article_id", "abstract_text", "article_text")


class CorpusError(RuntimeError):
    pass


class RecordParseError(CorpusError):
    """Malformed JSON on a corpus line."""


class RecordSchemaError(CorpusError):
    """A required key is absent from a record."""


@dataclass(frozen=True)
class Document:
    article_id: str
    title: str
    abstract_sentences: tuple[str, ...]
    body_sentences: tuple[str, ...]
    section_names: tuple[str, ...]
    sections: tuple[tuple[str, ...], ...]

    def abstract_text(self) -> str:
        return " ".join(self.abstract_sentences)

    def body_text(self) -> str:
        return " ".join(self.body_sentences)

    def body_matches_sections(self) -> bool:
        if not self.sections:
            return True
        flat = tuple(s for sec in self.sections for s in sec)
        return flat == self.body_sentences


@dataclass(frozen=True)
class CorpusStats:
    split: str
    example_count: int
    avg_input_words: float
    avg_output_words: float
    avg_input_tokens: float | None
    avg_output_tokens: float | None
    tokenizer_id: str

    def csv_row(self) -> str:
        def fmt(x):
            return f"{x:.2f}" if x is not None else ""

        return ",".join([
            self.split,
            str(self.example_count),
            fmt(self.avg_input_words),
            fmt(self.avg_input_tokens),
            fmt(self.avg_output_words),
            fmt(self.avg_output_tokens),
            self.tokenizer_id,
        ])


STATS_CSV_HEADER = "split,examples,avg_input_words,avg_input_tokens,avg_output_words,avg_output_tokens,tokenizer"


def _strip_sentence_markers(s: str) -> str:
    s = s.strip()
    if s.startswith("<S>"):
        s = s[3:]
    if s.endswith("</S>"):
        s = s[:-4]
    return s.strip()


def parse_record(raw_line: bytes | str, line_no: int | None = None) -> Document:
    """Parse one JSON record into a Document.

    Missing title falls back to the first section name, then to the empty
    string, so the title prompt is always defined.
    """
    where = f"line {line_no}" if line_no is not None else "record"
    try:
        obj = json.loads(raw_line)
    except json.JSONDecodeError as exc:
        raise RecordParseError(f"{where}: malformed JSON ({exc.msg} at col {exc.colno})") from exc
    if not isinstance(obj, dict):
        raise RecordSchemaError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    for key in REQUIRED_KEYS:
        if key not in obj:
            raise RecordSchemaError(f"{where}: missing required key '{key}'")
    article_id = str(obj["article_id"])
    if not article_id:
        raise RecordSchemaError(f"{where}: empty article_id")
    abstract = tuple(_strip_sentence_markers(s) for s in obj["abstract_text"])
    body = tuple(obj["article_text"])
    section_names = tuple(obj.get("section_names") or ())
    sections = tuple(tuple(sec) for sec in (obj.get("sections") or ()))
    title = obj.get("title")
    if title is None:
        title = section_names[0] if section_names else ""
    return Document(
        article_id=article_id,
        title=str(title),
        abstract_sentences=abstract,
        body_sentences=body,
        section_names=section_names,
        sections=sections,
    )


def serialize_record(doc: Document) -> str:
    """One JSON line; parse_record(serialize_record(d)) == d."""
    return json.dumps(
        {
            "article_id": doc.article_id,
            "title": doc.title,
            "abstract_text": list(doc.abstract_sentences),
            "article_text": list(doc.body_sentences),
            "section_names": list(doc.section_names),
            "sections": [list(sec) for sec in doc.sections],
        },
        ensure_ascii=False,
    )


def load_split(path, split: str = "train", lenient: bool = False) -> list[Document]:
    """Read a JSON-lines split file in order.

    Record-level failures are fatal by default; ``lenient`` downgrades them
    to skip-and-log because silently dropped records corrupt statistics.
    """
    docs: list[Document] = []
    skipped = 0
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CorpusError(f"cannot read {split} split at {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                docs.append(parse_record(line, line_no))
            except CorpusError as exc:
                if not lenient:
                    raise CorpusError(f"{path}: {exc}") from exc
                skipped += 1
                log.warning("%s: skipping %s", path, exc)
    log.info("loaded %d documents from %s (%s split, %d skipped)", len(docs), path, split, skipped)
    return docs


def compute_stats(documents, tokenizer=None, split: str = "") -> CorpusStats:
    """Word averages from whitespace counts; token averages from the tokenizer.

    Integer totals are accumulated before the single division, so the result
    does not depend on document order.
    """
    documents = list(documents)
    if not documents:
        raise CorpusError("compute_stats requires a non-empty document list")
    in_words = sum(sum(len(s.split()) for s in d.body_sentences) for d in documents)
    out_words = sum(sum(len(s.split()) for s in d.abstract_sentences) for d in documents)
    n = len(documents)
    in_tok = out_tok = None
    tok_id = "none"
    if tokenizer is not None:
        in_tok_total = sum(len(tokenizer.encode(d.body_text())) for d in documents)
        out_tok_total = sum(len(tokenizer.encode(d.abstract_text())) for d in documents)
        in_tok = in_tok_total / n
        out_tok = out_tok_total / n
        tok_id = f"pair-merge-v1-{tokenizer.vocab_size}"
    return CorpusStats(
        split=split,
        example_count=n,
        avg_input_words=in_words / n,
        avg_output_words=out_words / n,
        avg_input_tokens=in_tok,
        avg_output_tokens=out_tok,
        tokenizer_id=tok_id,
    )


def format_stats_table(stats_list: list[CorpusStats]) -> str:
    header = f"{'split':<8} {'examples':>9} {'in words':>10} {'in tokens':>10} {'out words':>10} {'out tokens':>11}"
    lines = [header, "-" * len(header)]
    for s in stats_list:
        it = f"{s.avg_input_tokens:.1f}" if s.avg_input_tokens is not None else "-"
        ot = f"{s.avg_output_tokens:.1f}" if s.avg_output_tokens is not None else "-"
        lines.append(
            f"{s.split:<8} {s.example_count:>9} {s.avg_input_words:>10.1f} {it:>10} "
            f"{s.avg_output_words:>10.1f} {ot:>11}"
        )
    return "\n".join(lines)
