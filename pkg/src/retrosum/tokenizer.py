"""Trainable byte-fallback pair-merge tokenizer.

Token id layout: ids 0..4 are the reserved specials (pad, bos, eos, unk,
sep), ids 5..260 cover every byte value, and merged tokens start at 261.
Byte coverage makes encoding total: any UTF-8 string round-trips exactly,
and the unk id exists only to satisfy downstream contracts.

One tokenizer instance is shared by the language model, the retrieval
queries and the indexed chunks so chunk boundaries agree everywhere.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SEP_ID = 4
N_SPECIALS = 5
N_BYTES = 256
MIN_VOCAB = N_SPECIALS + N_BYTES

SPECIAL_NAMES = {PAD_ID: "<pad>", BOS_ID: "<bos>", EOS_ID: "<eos>", UNK_ID: "<unk>", SEP_ID: "<sep>"}

FORMAT_VERSION = 1

# partitions any string: runs of whitespace, or a word with one attached
# leading space
_PRETOKEN_RE = re.compile(r" ?\S+|\s+")


class TokenizerError(ValueError):
    pass


@dataclass
class TokenSeq:
    ids: list[int]
    source: str = "body"

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Tokenizer:
    merges: list[tuple[int, int]] = field(default_factory=list)
    vocab_size: int = MIN_VOCAB

    def __post_init__(self):
        self._merge_rank = {pair: MIN_VOCAB + i for i, pair in enumerate(self.merges)}
        self._token_bytes = self._build_token_bytes()
        self._cache: dict[bytes, list[int]] = {}

    def _build_token_bytes(self) -> dict[int, bytes]:
        table = {N_SPECIALS + b: bytes([b]) for b in range(N_BYTES)}
        for i, (a, b) in enumerate(self.merges):
            table[MIN_VOCAB + i] = table[a] + table[b]
        return table

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def sep_id(self) -> int:
        return SEP_ID

    def _encode_pretoken(self, raw: bytes) -> list[int]:
        cached = self._cache.get(raw)
        if cached is not None:
            return cached
        ids = [N_SPECIALS + b for b in raw]
        while len(ids) >= 2:
            best = None
            best_rank = None
            for pair in zip(ids, ids[1:]):
                rank = self._merge_rank.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best = pair
                    best_rank = rank
            if best is None:
                break
            ids = _merge(ids, best, best_rank)
        self._cache[raw] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for pretoken in _PRETOKEN_RE.findall(text):
            out.extend(self._encode_pretoken(pretoken.encode("utf-8")))
        return out

    def decode(self, ids) -> str:
        parts = []
        for i in ids:
            b = self._token_bytes.get(int(i))
            if b is not None:
                parts.append(b)
        return b"".join(parts).decode("utf-8", errors="replace")

    def tokenize(self, text: str, source: str = "body") -> TokenSeq:
        return TokenSeq(self.encode(text), source)

    def detokenize(self, seq: TokenSeq) -> str:
        return self.decode(seq.ids)

    def save(self, path) -> None:
        path = Path(path)
        lines = [f"retrosum-tokenizer {FORMAT_VERSION}", str(self.vocab_size)]
        lines += [f"{a} {b}" for a, b in self.merges]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        header = lines[0].split()
        if len(header) != 2 or header[0] != "retrosum-tokenizer":
            raise TokenizerError(f"{path}: not a tokenizer file")
        if int(header[1]) != FORMAT_VERSION:
            raise TokenizerError(f"{path}: unsupported tokenizer format version {header[1]}")
        vocab_size = int(lines[1])
        merges = []
        for line in lines[2:]:
            if line.strip():
                a, b = line.split()
                merges.append((int(a), int(b)))
        return cls(merges=merges, vocab_size=vocab_size)


def _merge(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    out = []
    i = 0
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_tokenizer(corpus_text, vocab_size: int = 4096) -> Tokenizer:
    """Learn pair merges from an iterator of strings.

    Deterministic: the most frequent adjacent pair wins each round, ties
    broken by the numerically smallest pair. Training twice on the same
    input produces identical merge tables.
    """
    if vocab_size < MIN_VOCAB:
        raise TokenizerError(
            f"vocab_size {vocab_size} is below the reserved minimum {MIN_VOCAB} "
            f"({N_SPECIALS} specials + {N_BYTES} bytes)"
        )
    freqs: Counter[tuple[int, ...]] = Counter()
    saw_text = False
    for text in corpus_text:
        saw_text = True
        for pretoken in _PRETOKEN_RE.findall(text):
            freqs[tuple(N_SPECIALS + b for b in pretoken.encode("utf-8"))] += 1
    if not saw_text:
        raise TokenizerError("cannot train a tokenizer on an empty corpus")

    merges: list[tuple[int, int]] = []
    seqs = dict(freqs)
    for new_id in range(MIN_VOCAB, vocab_size):
        pair_counts: Counter[tuple[int, int]] = Counter()
        for seq, freq in seqs.items():
            for pair in zip(seq, seq[1:]):
                pair_counts[pair] += freq
        if not pair_counts:
            break
        best = min(pair_counts, key=lambda p: (-pair_counts[p], p))
        merges.append(best)
        next_seqs: dict[tuple[int, ...], int] = {}
        for seq, freq in seqs.items():
            merged = tuple(_merge(list(seq), best, new_id)) if len(seq) >= 2 else seq
            next_seqs[merged] = next_seqs.get(merged, 0) + freq
        seqs = next_seqs
    return Tokenizer(merges=merges, vocab_size=vocab_size)
