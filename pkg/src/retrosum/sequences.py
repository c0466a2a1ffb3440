"""Decoder and encoder sequence construction shared by training and generation."""

from __future__ import annotations

import logging

import numpy as np

from .tokenizer import BOS_ID, EOS_ID, SEP_ID, Tokenizer

log = logging.getLogger(__name__)

IGNORE_INDEX = -100


def build_prompt(tokenizer: Tokenizer, doc) -> list[int]:
    """bos + title tokens + separator; a missing title degrades to bare bos."""
    title_ids = tokenizer.encode(doc.title) if doc.title else []
    if not title_ids:
        log.warning("%s: empty title and empty fallback, prompting with bare bos", doc.article_id)
        return [BOS_ID]
    return [BOS_ID] + title_ids + [SEP_ID]


def build_decoder_example(tokenizer: Tokenizer, doc, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing pair (inputs, targets) for the decoder-only modes.

    Targets are ignored on prompt positions so the loss covers only the
    abstract (and the closing eos).
    """
    prompt = build_prompt(tokenizer, doc)
    abstract = tokenizer.encode(doc.abstract_text())
    full = (prompt + abstract + [EOS_ID])[:max_len]
    if len(full) <= len(prompt):
        raise ValueError(f"{doc.article_id}: prompt fills the whole window, no abstract tokens left")
    x = np.asarray(full[:-1], dtype=np.int64)
    y = np.asarray(full[1:], dtype=np.int64)
    y[: len(prompt) - 1] = IGNORE_INDEX
    return x, y


def build_encdec_example(tokenizer: Tokenizer, doc, max_input: int, max_output: int):
    """(encoder input, decoder input, targets) for the encoder-decoder mode."""
    enc = tokenizer.encode(doc.title) + [SEP_ID] + tokenizer.encode(doc.body_text())
    enc = np.asarray(enc[:max_input], dtype=np.int64)
    if enc.size == 0:
        raise ValueError(f"{doc.article_id}: empty encoder input")
    abstract = tokenizer.encode(doc.abstract_text())
    full = ([BOS_ID] + abstract + [EOS_ID])[:max_output]
    if len(full) < 2:
        raise ValueError(f"{doc.article_id}: empty abstract")
    x = np.asarray(full[:-1], dtype=np.int64)
    y = np.asarray(full[1:], dtype=np.int64)
    return enc, x, y
