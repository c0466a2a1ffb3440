"""Incremental chunkwise generation with retrieval.

Decoding keeps a per-layer key/value cache that grows with the generated
sequence only; the document enters exclusively through fixed-size encoded
neighbor windows, so decoder memory is independent of document length.
Instrumented counters make that claim checkable.

Every time a chunk boundary is crossed, the completed chunk is embedded,
its nearest neighbors are fetched from the per-document index, encoded,
and projected into per-layer key/value blocks that subsequent chunks
cross-attend to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .chunking import Chunk
from .index import DocIndex, normalize, query
from .model import DecoderModel, RetroModel
from .npops import ChunkEmbedder, attend_single, feed_forward, layer_norm, linear, neighbor_encoder_forward
from .sequences import build_prompt
from .tokenizer import EOS_ID, PAD_ID, TokenSeq


# ---------------------------------------------------------------------------
# decode strategies
# ---------------------------------------------------------------------------

@dataclass
class DecodeStrategy:
    kind: str = "greedy"  # greedy | topk | temperature
    k: int = 10
    temperature: float = 1.0


def decode_strategy(logits: np.ndarray, strategy: DecodeStrategy | str = "greedy",
                    rng: np.random.Generator | None = None) -> int:
    """Pick the next token id. Greedy breaks ties toward the lowest id."""
    if isinstance(strategy, str):
        strategy = DecodeStrategy(kind=strategy)
    if strategy.kind == "greedy":
        return int(np.argmax(logits))
    if rng is None:
        raise ValueError(f"{strategy.kind} decoding needs a seeded generator")
    if strategy.kind == "topk":
        k = min(strategy.k, len(logits))
        top = np.argsort(-logits, kind="stable")[:k]
        p = _softmax(logits[top])
        return int(top[rng.choice(k, p=p)])
    if strategy.kind == "temperature":
        if strategy.temperature <= 0:
            raise ValueError("temperature must be positive")
        p = _softmax(logits / strategy.temperature)
        return int(rng.choice(len(logits), p=p))
    raise ValueError(f"unknown decode strategy {strategy.kind!r}")


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


# ---------------------------------------------------------------------------
# counters and state
# ---------------------------------------------------------------------------

@dataclass
class MemoryCounter:
    """Peak footprint of decoder self-attention state during one generation."""

    peak_kv_elements: int = 0
    peak_seq_len: int = 0
    neighbor_state_elements: int = 0

    def observe_kv(self, elements: int, seq_len: int) -> None:
        self.peak_kv_elements = max(self.peak_kv_elements, elements)
        self.peak_seq_len = max(self.peak_seq_len, seq_len)


@dataclass
class GenerationState:
    ids: list[int] = field(default_factory=list)
    prompt_len: int = 0
    retrieval_trace: list[dict] = field(default_factory=list)
    stopped_by_eos: bool = False

    @property
    def t(self) -> int:
        return len(self.ids)


class GenerationSession:
    """Stepwise decoding over a single document."""

    def __init__(self, model: DecoderModel | RetroModel, index: DocIndex | None = None,
                 retrieval: bool = False, continuation: bool = True,
                 counter: MemoryCounter | None = None):
        if isinstance(model, RetroModel):
            self.decoder = model.decoder
            self.neighbor_encoder = model.neighbor_encoder
        else:
            self.decoder = model
            self.neighbor_encoder = None
        if retrieval:
            if self.neighbor_encoder is None:
                raise ValueError("retrieval requested but the model has no neighbor encoder")
            if index is None:
                raise ValueError("retrieval requested without a document index")
        self.cfg = self.decoder.cfg
        self.m = self.cfg.attention.m
        self.heads = self.cfg.heads
        self.dh = self.cfg.d_model // self.cfg.heads
        self.index = index
        self.retrieval = retrieval
        self.continuation = continuation
        self.counter = counter
        self.state = GenerationState()
        dt = self.cfg.np_dtype
        self.kv = [
            {"k": np.zeros((0, self.heads, self.dh), dt), "v": np.zeros((0, self.heads, self.dh), dt)}
            for _ in self.decoder.blocks
        ]
        # per completed query chunk: {layer_idx: (K, V)}, plus a shared key mask
        self.cca_cache: list[dict] = []
        self.embedder = ChunkEmbedder(self.neighbor_encoder) if retrieval else None

    def _maybe_retrieve(self) -> None:
        t = self.state.t
        if not self.retrieval or t == 0 or t % self.m or t // self.m <= len(self.cca_cache):
            return
        u = t // self.m  # completed 1-based chunk index
        chunk_ids = np.asarray(self.state.ids[(u - 1) * self.m : u * self.m], dtype=np.int32)
        c = Chunk(doc_id=self.index.doc_id, index=u - 1, ids=chunk_ids, pad_len=0)
        q = normalize(self.embedder.embed_chunk_vec(c))
        neighbors = query(self.index, q, k=self.cfg.attention.num_neighbors,
                          continuation=self.continuation)
        tokens = np.stack([nb.tokens for nb in neighbors])
        states = np.stack([neighbor_encoder_forward(self.neighbor_encoder, row) for row in tokens])
        key_valid = (tokens != PAD_ID).reshape(-1)
        entry = {"key_valid": key_valid, "layers": {}}
        n_nb, width, d = states.shape
        flat = states.reshape(n_nb * width, d)
        for li, block in enumerate(self.decoder.blocks):
            if block.cca is None:
                continue
            kk = linear(flat, block.cca.wk).reshape(-1, self.heads, self.dh)
            vv = linear(flat, block.cca.wv).reshape(-1, self.heads, self.dh)
            entry["layers"][li] = (kk, vv)
        self.cca_cache.append(entry)
        if self.counter is not None:
            self.counter.neighbor_state_elements = max(
                self.counter.neighbor_state_elements, states.size
            )
        self.state.retrieval_trace.append(
            {
                "query_chunk": u,
                "neighbors": [nb.chunk_index for nb in neighbors],
                "scores": [round(nb.score, 6) for nb in neighbors],
            }
        )

    def append(self, token_id: int) -> np.ndarray:
        """Feed one token, return next-token logits."""
        self._maybe_retrieve()
        pos = self.state.t
        if pos >= self.cfg.max_output:
            raise ValueError(f"sequence length {pos} reached max_output {self.cfg.max_output}")
        dec = self.decoder
        x = dec.tok_emb.table.data[token_id] + dec.pos_emb.table.data[pos]
        for li, block in enumerate(dec.blocks):
            h = layer_norm(x, block.ln1)
            a = block.attn
            q = linear(h, a.wq).reshape(self.heads, self.dh)
            k_new = linear(h, a.wk).reshape(1, self.heads, self.dh)
            v_new = linear(h, a.wv).reshape(1, self.heads, self.dh)
            cache = self.kv[li]
            cache["k"] = np.concatenate([cache["k"], k_new], axis=0)
            cache["v"] = np.concatenate([cache["v"], v_new], axis=0)
            att = attend_single(q, cache["k"], cache["v"])
            x = x + linear(att.reshape(-1), a.wo)
            if block.cca is not None and self.retrieval:
                u = pos // self.m + 1
                if u >= 2 and len(self.cca_cache) >= u - 1:
                    entry = self.cca_cache[u - 2]
                    kk, vv = entry["layers"][li]
                    hc = layer_norm(x, block.cca.ln)
                    qc = linear(hc, block.cca.wq).reshape(self.heads, self.dh)
                    n_keys = kk.shape[0]
                    n_nb = n_keys // (2 * self.m)
                    bias_row = block.cca.pos_bias.data[:, pos % self.m, :]
                    bias = np.tile(bias_row, (1, n_nb))
                    att_c = attend_single(qc, kk, vv, bias=bias, key_valid=entry["key_valid"])
                    x = x + linear(att_c.reshape(-1), block.cca.wo)
            x = x + feed_forward(layer_norm(x, block.ln2), block.ff)
        self.state.ids.append(int(token_id))
        if self.counter is not None:
            elements = sum(c["k"].size + c["v"].size for c in self.kv)
            self.counter.observe_kv(elements, self.state.t)
        logits = linear(layer_norm(x, dec.ln_f), dec.head)
        return logits


def generate(model, doc, tokenizer, retrieval: bool = False, index: DocIndex | None = None,
             max_len: int | None = None, min_len: int = 0,
             strategy: DecodeStrategy | str = "greedy",
             rng: np.random.Generator | None = None,
             continuation: bool = True,
             counter: MemoryCounter | None = None) -> tuple[TokenSeq, GenerationState]:
    """Greedy (default) chunkwise decoding from the title prompt.

    ``max_len`` caps the total sequence length (prompt included) and
    defaults to the model's max_output; eos is suppressed until ``min_len``.
    """
    session = GenerationSession(model, index=index, retrieval=retrieval,
                                continuation=continuation, counter=counter)
    cap = session.cfg.max_output if max_len is None else min(max_len, session.cfg.max_output)
    prompt = build_prompt(tokenizer, doc)
    prompt = prompt[: max(1, cap - 1)]
    session.state.prompt_len = len(prompt)
    logits = None
    for tok in prompt:
        logits = session.append(tok)
    while session.state.t < cap:
        if session.state.t < min_len:
            logits = logits.copy()
            logits[EOS_ID] = -np.inf
        next_id = decode_strategy(logits, strategy, rng)
        if next_id == EOS_ID:
            session.state.stopped_by_eos = True
            break
        logits = session.append(next_id)
    generated = session.state.ids[len(prompt) :]
    return TokenSeq(generated, source="generated"), session.state


def prediction_record(doc, text: str, state: GenerationState) -> str:
    return json.dumps(
        {"article_id": doc.article_id, "prediction": text, "retrieval_trace": state.retrieval_trace},
        ensure_ascii=False,
    )
