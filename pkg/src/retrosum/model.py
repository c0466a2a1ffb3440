"""Model assembly: base decoder, encoder-decoder, retro-fitted decoder.

Three systems are built here:

  (a) a decoder-only model prompted with the document title,
  (b) an encoder-decoder whose sparse-attention encoder reads the body
      truncated to the maximum input length,
  (c) the retrieval-enhanced decoder: (a) plus a neighbor encoder and
      chunked cross-attention layers inserted on a fixed layer schedule.

Retro-fitting copies the base parameters, zero-initializes every CCA
output projection (so the new model computes exactly the base function
until trained) and freezes everything except the neighbor encoder and the
CCA blocks.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .attention import (
    AttentionConfig,
    BidirectionalSelfAttention,
    CausalSelfAttention,
    ChunkedCrossAttention,
    CrossAttention,
    NeighborBatch,
    TGlobalAttention,
)
from .autograd import Tensor
from .layers import Dropout, EmbeddingTable, FeedForward, LayerNorm, Linear, Module, Parameter
from .tokenizer import PAD_ID


@dataclass
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    ff_dim: int = 256
    vocab_size: int = 4096
    decoder_layers: int = 12
    encoder_layers: int = 6
    neighbor_encoder_layers: int = 2
    cca_layers: tuple[int, ...] = (6, 9, 12)  # 1-based, every 3rd from 6
    max_input: int = 4096
    max_output: int = 512
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    dropout: float = 0.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        self.cca_layers = tuple(self.cca_layers)
        self.attention.heads = self.heads
        self.attention.d_model = self.d_model
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if any(not 1 <= c <= self.decoder_layers for c in self.cca_layers):
            raise ValueError(f"cca_layers {self.cca_layers} outside [1, {self.decoder_layers}]")
        if self.max_output < self.attention.m:
            raise ValueError(f"max_output {self.max_output} smaller than chunk size {self.attention.m}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cca_layers"] = list(self.cca_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class FreezeMask:
    """fnmatch patterns naming the parameters that stay trainable."""

    trainable_patterns: tuple[str, ...]

    def is_trainable(self, name: str) -> bool:
        return any(fnmatch.fnmatch(name, pat) for pat in self.trainable_patterns)

    def apply(self, params: dict[str, Parameter]) -> None:
        for name, p in params.items():
            p.trainable = self.is_trainable(name)


RETROFIT_MASK = FreezeMask(("neighbor_encoder.*", "*.cca.*"))


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng, with_cca: bool, with_cross: bool):
        super().__init__()
        dt = cfg.np_dtype
        self.ln1 = LayerNorm(cfg.d_model, dtype=dt)
        self.attn = CausalSelfAttention(cfg.d_model, cfg.heads, rng, dtype=dt)
        self.cross_ln = LayerNorm(cfg.d_model, dtype=dt) if with_cross else None
        self.cross = CrossAttention(cfg.d_model, cfg.heads, rng, dtype=dt) if with_cross else None
        self.cca = (
            ChunkedCrossAttention(cfg.d_model, cfg.heads, cfg.attention.m, rng, dtype=dt)
            if with_cca
            else None
        )
        self.ln2 = LayerNorm(cfg.d_model, dtype=dt)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, rng, dtype=dt)
        self.drop = Dropout(cfg.dropout, drop_rng)

    def forward(self, x, neighbors=None, enc=None, enc_valid=None):
        x = ag.add(x, self.drop(self.attn(self.ln1(x))))
        if self.cross is not None and enc is not None:
            x = ag.add(x, self.drop(self.cross(self.cross_ln(x), enc, enc_valid)))
        if self.cca is not None:
            x = self.cca(x, neighbors)
        x = ag.add(x, self.drop(self.ff(self.ln2(x))))
        return x


class DecoderModel(Module):
    """Pre-norm causal decoder over one sequence, title prompt included."""

    def __init__(self, cfg: ModelConfig, with_cca: bool = False, with_cross: bool = False,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        dt = cfg.np_dtype
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.drop_rng = np.random.default_rng(cfg.seed + 101)
        self.tok_emb = EmbeddingTable(cfg.vocab_size, cfg.d_model, rng, dtype=dt)
        self.pos_emb = EmbeddingTable(cfg.max_output, cfg.d_model, rng, dtype=dt)
        self.emb_drop = Dropout(cfg.dropout, self.drop_rng)
        self.blocks = [
            DecoderBlock(
                cfg,
                rng,
                self.drop_rng,
                with_cca=with_cca and (layer + 1) in cfg.cca_layers,
                with_cross=with_cross,
            )
            for layer in range(cfg.decoder_layers)
        ]
        self.ln_f = LayerNorm(cfg.d_model, dtype=dt)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng, bias=False, dtype=dt)

    @property
    def is_retro(self) -> bool:
        return any(b.cca is not None for b in self.blocks)

    def forward(self, ids, neighbors: NeighborBatch | None = None, enc=None, enc_valid=None) -> Tensor:
        ids = np.asarray(ids)
        t = len(ids)
        if t == 0:
            raise ValueError("decoder input is empty")
        if t > self.cfg.max_output:
            raise ValueError(f"decoder input length {t} exceeds max_output {self.cfg.max_output}")
        x = ag.add(self.tok_emb(ids), self.pos_emb(np.arange(t)))
        x = self.emb_drop(x)
        for block in self.blocks:
            x = block(x, neighbors=neighbors, enc=enc, enc_valid=enc_valid)
        x = self.ln_f(x)
        return self.head(x)


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        super().__init__()
        dt = cfg.np_dtype
        self.ln1 = LayerNorm(cfg.d_model, dtype=dt)
        self.attn = TGlobalAttention(
            cfg.d_model, cfg.heads, r=cfg.attention.r, block_k=cfg.attention.k, rng=rng, dtype=dt
        )
        self.ln2 = LayerNorm(cfg.d_model, dtype=dt)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, rng, dtype=dt)
        self.drop = Dropout(cfg.dropout, drop_rng)

    def forward(self, x, valid):
        x = ag.add(x, self.drop(self.attn(self.ln1(x), valid)))
        x = ag.add(x, self.drop(self.ff(self.ln2(x))))
        return x


class TGlobalEncoder(Module):
    """Sparse-attention encoder for long inputs (bidirectional)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        dt = cfg.np_dtype
        drop_rng = np.random.default_rng(cfg.seed + 202)
        self.tok_emb = EmbeddingTable(cfg.vocab_size, cfg.d_model, rng, dtype=dt)
        self.pos_emb = EmbeddingTable(cfg.max_input, cfg.d_model, rng, dtype=dt)
        self.blocks = [EncoderBlock(cfg, rng, drop_rng) for _ in range(cfg.encoder_layers)]
        self.ln_f = LayerNorm(cfg.d_model, dtype=dt)

    def forward(self, ids, valid=None) -> Tensor:
        ids = np.asarray(ids)
        n = len(ids)
        if n == 0:
            raise ValueError("encoder input is empty")
        if n > self.cfg.max_input:
            raise ValueError(f"encoder input length {n} exceeds max_input {self.cfg.max_input}")
        if valid is None:
            valid = ids != PAD_ID
        x = ag.add(self.tok_emb(ids), self.pos_emb(np.arange(n)))
        for block in self.blocks:
            x = block(x, valid)
        return self.ln_f(x)


class EncDecModel(Module):
    """Encoder-decoder baseline: body in, abstract out."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = TGlobalEncoder(cfg, rng)
        self.decoder = DecoderModel(cfg, with_cca=False, with_cross=True, rng=rng)

    def forward(self, enc_ids, dec_ids, enc_valid=None) -> Tensor:
        enc_ids = np.asarray(enc_ids)[: self.cfg.max_input]
        enc_out = self.encoder(enc_ids, enc_valid)
        if enc_valid is None:
            enc_valid = enc_ids != PAD_ID
        else:
            enc_valid = np.asarray(enc_valid)[: self.cfg.max_input]
        return self.decoder(dec_ids, enc=enc_out, enc_valid=enc_valid)


class NeighborEncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, drop_rng):
        super().__init__()
        dt = cfg.np_dtype
        self.ln1 = LayerNorm(cfg.d_model, dtype=dt)
        self.attn = BidirectionalSelfAttention(cfg.d_model, cfg.heads, rng, dtype=dt)
        self.ln2 = LayerNorm(cfg.d_model, dtype=dt)
        self.ff = FeedForward(cfg.d_model, cfg.ff_dim, rng, dtype=dt)
        self.drop = Dropout(cfg.dropout, drop_rng)

    def forward(self, x, valid):
        x = ag.add(x, self.drop(self.attn(self.ln1(x), valid)))
        x = ag.add(x, self.drop(self.ff(self.ln2(x))))
        return x


class NeighborEncoder(Module):
    """Bidirectional encoder over neighbor token windows.

    Doubles as the chunk embedder: retrieval embeddings are the mean of the
    final states over non-pad positions, so query and key spaces coincide.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        dt = cfg.np_dtype
        rng = rng if rng is not None else np.random.default_rng(cfg.seed + 7)
        drop_rng = np.random.default_rng(cfg.seed + 303)
        self.m = cfg.attention.m
        self.tok_emb = EmbeddingTable(cfg.vocab_size, cfg.d_model, rng, dtype=dt)
        self.pos_emb = EmbeddingTable(2 * cfg.attention.m, cfg.d_model, rng, dtype=dt)
        self.blocks = [NeighborEncoderBlock(cfg, rng, drop_rng) for _ in range(cfg.neighbor_encoder_layers)]
        self.ln_f = LayerNorm(cfg.d_model, dtype=dt)

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids)
        valid = ids != PAD_ID
        x = ag.add(self.tok_emb(ids), self.pos_emb(np.arange(len(ids))))
        for block in self.blocks:
            x = block(x, valid)
        return self.ln_f(x)

    def encode_neighbors(self, tokens: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Encode a (num_neighbors, 2m) token array into CCA key/value states."""
        states = [self.forward(row) for row in tokens]
        stacked = ag.concat([ag.reshape(s, (1,) + s.shape) for s in states], axis=0)
        key_valid = (tokens != PAD_ID).reshape(-1)
        return stacked, key_valid

    def embed_chunk_vec(self, c) -> np.ndarray:
        from .npops import ChunkEmbedder

        return ChunkEmbedder(self).embed_chunk_vec(c)


class RetroModel(Module):
    """Retro-fitted decoder plus its neighbor encoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.decoder = DecoderModel(cfg, with_cca=True, rng=np.random.default_rng(cfg.seed))
        self.neighbor_encoder = NeighborEncoder(cfg)

    def forward(self, ids, neighbors: NeighborBatch | None = None) -> Tensor:
        return self.decoder(ids, neighbors=neighbors)


def build_base_decoder(cfg: ModelConfig) -> DecoderModel:
    return DecoderModel(cfg, with_cca=False)


def build_encdec(cfg: ModelConfig) -> EncDecModel:
    return EncDecModel(cfg)


def retrofit(base: DecoderModel, cfg: ModelConfig | None = None) -> RetroModel:
    """Extend a (pre)trained decoder with retrieval parts and freeze the rest.

    The CCA output projections start at zero, so the returned model's logits
    equal the base model's for any input until the new parts train.
    """
    cfg = cfg if cfg is not None else base.cfg
    retro = RetroModel(cfg)
    base_params = base.named_parameters()
    retro_params = retro.named_parameters()
    for name, p in base_params.items():
        retro_params[f"decoder.{name}"].data = p.data.copy()
    RETROFIT_MASK.apply(retro_params)
    return retro


def parameter_count(model: Module) -> int:
    return sum(p.data.size for p in model.parameters())


def trainable_parameter_names(model: Module) -> set[str]:
    return {name for name, p in model.named_parameters().items() if p.trainable}
