"""Training loops for the three modes: pretrain, retrofit, encdec.

Training follows the unbatched-with-accumulation regime: one document per
forward pass, loss scaled by the accumulation factor, one optimizer step
per accumulation window.

In retrofit mode the retrieval side is frozen within each epoch: the
neighbor encoder is snapshotted at epoch start and both the per-document
index embeddings and the query embeddings come from that snapshot, so the
targets the CCA trains against stay stable while its parameters move. The
live neighbor encoder still encodes the retrieved tokens on the
differentiable path.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import NeighborBatch
from .checkpoint import save_checkpoint
from .chunking import Chunk
from .index import DocIndex, neighbor_tokens, normalize, query, reembed_index
from .model import DecoderModel, EncDecModel, ModelConfig, RetroModel
from .npops import ChunkEmbedder
from .optim import Adam
from .sequences import IGNORE_INDEX, build_decoder_example, build_encdec_example

log = logging.getLogger(__name__)

MODES = ("pretrain", "retrofit", "encdec")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 10
    accumulation: int = 32
    seed: int = 0
    shuffle: bool = True
    max_steps: int | None = None
    continuation: bool = True
    eval_each_epoch: bool = True


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    loss_csv_path: Path | None
    steps: int
    train_curve: list[tuple[int, float]] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)


class TrainingRetrieval:
    """Per-epoch frozen retrieval over per-document indexes."""

    def __init__(self, retro: RetroModel, indexes: dict[str, DocIndex], continuation: bool = True):
        self.retro = retro
        self.base_indexes = indexes
        self.continuation = continuation
        self.epoch_indexes: dict[str, DocIndex] = {}
        self.embedder: ChunkEmbedder | None = None
        self.query_cache: dict[str, list[np.ndarray]] = {}

    def refresh_epoch(self) -> None:
        snapshot = copy.deepcopy(self.retro.neighbor_encoder)
        self.embedder = ChunkEmbedder(snapshot)
        self.epoch_indexes = {
            doc_id: reembed_index(idx, self.embedder) for doc_id, idx in self.base_indexes.items()
        }
        self.query_cache.clear()

    def neighbor_token_arrays(self, doc_id: str, ids: np.ndarray) -> list[np.ndarray]:
        """One (num_neighbors, 2m) array per completed query chunk of ``ids``."""
        if self.embedder is None:
            self.refresh_epoch()
        if doc_id not in self.epoch_indexes:
            raise TrainingError(f"no index for document {doc_id!r} in retrofit mode")
        cached = self.query_cache.get(doc_id)
        if cached is not None:
            return cached
        index = self.epoch_indexes[doc_id]
        m = index.m
        n_query_chunks = (len(ids) - 1) // m
        k = self.retro.cfg.attention.num_neighbors
        out = []
        for c in range(1, n_query_chunks + 1):
            chunk_ids = np.asarray(ids[(c - 1) * m : c * m], dtype=np.int32)
            qc = Chunk(doc_id=doc_id, index=c - 1, ids=chunk_ids, pad_len=0)
            emb = normalize(self.embedder.embed_chunk_vec(qc))
            nbs = query(index, emb, k=k, continuation=self.continuation)
            out.append(np.stack([nb.tokens for nb in nbs]))
        self.query_cache[doc_id] = out
        return out


def neighbor_batch_for(retro: RetroModel, retrieval: TrainingRetrieval, doc_id: str,
                       ids: np.ndarray) -> NeighborBatch:
    batch = NeighborBatch()
    for tokens in retrieval.neighbor_token_arrays(doc_id, ids):
        states, key_valid = retro.neighbor_encoder.encode_neighbors(tokens)
        batch.states.append(states)
        batch.key_valid.append(key_valid)
    return batch


def doc_loss(model, tokenizer, doc, mode: str, retrieval: TrainingRetrieval | None = None,
             with_retrieval: bool = True):
    """Teacher-forced mean loss (nats/token) for one document."""
    cfg = model.cfg
    if mode == "encdec":
        enc, x, y = build_encdec_example(tokenizer, doc, cfg.max_input, cfg.max_output)
        logits = model(enc, x)
        return ag.cross_entropy(logits, y, ignore_index=IGNORE_INDEX)
    x, y = build_decoder_example(tokenizer, doc, cfg.max_output)
    neighbors = None
    if mode == "retrofit" and with_retrieval:
        neighbors = neighbor_batch_for(model, retrieval, doc.article_id, x)
        logits = model(x, neighbors=neighbors)
    elif isinstance(model, RetroModel):
        logits = model(x, neighbors=None)
    else:
        logits = model(x)
    return ag.cross_entropy(logits, y, ignore_index=IGNORE_INDEX)


def mean_eval_loss(model, tokenizer, docs, mode: str, retrieval: TrainingRetrieval | None = None,
                   with_retrieval: bool = True) -> float:
    model.eval()
    total = 0.0
    with ag.no_grad():
        for doc in docs:
            total += doc_loss(model, tokenizer, doc, mode, retrieval, with_retrieval).item()
    model.train()
    return total / len(docs)


def train(model, tokenizer, train_docs, val_docs, mode: str, cfg: TrainConfig,
          out_dir=None, indexes: dict[str, DocIndex] | None = None) -> TrainResult:
    """Run one training mode end to end; emits a step,split,loss CSV."""
    if mode not in MODES:
        raise TrainingError(f"unknown training mode {mode!r}")
    if mode == "retrofit" and not isinstance(model, RetroModel):
        raise TrainingError("retrofit mode requires a retro-fitted model")
    if mode == "retrofit" and indexes is None:
        raise TrainingError("retrofit mode requires per-document indexes")

    params = model.named_parameters()
    opt = Adam(params, lr=cfg.lr)
    retrieval = TrainingRetrieval(model, indexes, cfg.continuation) if mode == "retrofit" else None
    shuffle_rng = np.random.default_rng(cfg.seed)

    rows: list[tuple[int, str, float]] = []
    result = TrainResult(checkpoint_path=None, loss_csv_path=None, steps=0)
    model.train()
    stop = False
    for epoch in range(cfg.epochs):
        if retrieval is not None:
            retrieval.refresh_epoch()
        order = list(train_docs)
        if cfg.shuffle:
            order = [order[i] for i in shuffle_rng.permutation(len(order))]
        pending: list[float] = []
        for doc in order:
            loss = doc_loss(model, tokenizer, doc, mode, retrieval)
            pending.append(loss.item())
            ag.mul(loss, 1.0 / cfg.accumulation).backward()
            if len(pending) == cfg.accumulation:
                opt.step()
                opt.zero_grad()
                result.steps += 1
                mean_loss = float(np.mean(pending))
                rows.append((result.steps, "train", mean_loss))
                result.train_curve.append((result.steps, mean_loss))
                pending = []
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    stop = True
                    break
        if pending and not stop:
            opt.step()
            opt.zero_grad()
            result.steps += 1
            mean_loss = float(np.mean(pending))
            rows.append((result.steps, "train", mean_loss))
            result.train_curve.append((result.steps, mean_loss))
        if cfg.eval_each_epoch and val_docs:
            vl = mean_eval_loss(model, tokenizer, val_docs, mode, retrieval)
            rows.append((result.steps, "val", vl))
            result.val_curve.append((result.steps, vl))
            log.info("epoch %d: step %d train %.4f val %.4f", epoch, result.steps,
                     result.train_curve[-1][1] if result.train_curve else float("nan"), vl)
        if stop:
            break

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"losses_{mode}.csv"
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("step,split,loss\n")
            for step, split, value in rows:
                f.write(f"{step},{split},{value:.6f}\n")
        ckpt_path = out_dir / f"model_{mode}.ckpt"
        mcfg = model.cfg.to_dict() if isinstance(model.cfg, ModelConfig) else dict(model.cfg)
        save_checkpoint(
            ckpt_path,
            params,
            config={"model": mcfg, "mode": mode, "train": vars(cfg).copy()},
            optimizer_state=opt.state_dict(),
            rng_state=shuffle_rng.bit_generator.state,
            extra={"steps": result.steps},
        )
        result.loss_csv_path = csv_path
        result.checkpoint_path = ckpt_path
    return result
