"""Command-line entry point.

Subcommands: train-tokenizer, ingest, build-index, train, generate,
evaluate, bench-attention. One JSON config file drives the pipeline; CLI
flags override config keys one-to-one. Every run writes metadata (config
snapshot, input hashes, seeds, wall clock, peak RSS) and a manifest of its
output files under the output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import resource
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

log = logging.getLogger("retrosum")

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": None,
    "paths": {
        "corpus_dir": "data",
        "train_file": "train.txt",
        "val_file": "val.txt",
        "test_file": "test.txt",
        "tokenizer": "out/tokenizer.txt",
        "indexes": "out/indexes",
        "out_dir": "out",
    },
    "model": {},
    "train": {"lr": 1e-4, "epochs": 10, "accumulation": 32},
    "subset": {"fraction": 1.0, "seed": 0},
    "flags": {"retrieval": True, "neighbor_continuation": True, "lenient": False},
}


def _deep_update(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        with open(path, "r", encoding="utf-8") as f:
            cfg = _deep_update(cfg, json.load(f))
    return cfg


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, default=str)
    os.replace(tmp, path)


class RunMetadata:
    """Written at run start, finalized (wall clock, peak RSS, outputs) at end."""

    def __init__(self, out_dir: Path, command: str, config: dict, inputs: list[Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.path = self.out_dir / f"run_{command.replace('-', '_')}.json"
        self.t0 = time.time()
        self.record = {
            "command": command,
            "argv": sys.argv[1:],
            "config": config,
            "input_hashes": {str(p): sha256_file(p) for p in inputs if Path(p).is_file()},
            "started_unix": self.t0,
            "finished_unix": None,
            "wall_seconds": None,
            "peak_rss_kb": None,
            "outputs": {},
        }
        _atomic_write_json(self.path, self.record)

    def finalize(self, outputs: list[Path]) -> None:
        self.record["finished_unix"] = time.time()
        self.record["wall_seconds"] = self.record["finished_unix"] - self.t0
        self.record["peak_rss_kb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        self.record["outputs"] = {
            str(p): sha256_file(p) for p in outputs if Path(p).is_file()
        }
        _atomic_write_json(self.path, self.record)
        manifest = self.out_dir / "manifest.json"
        existing = {}
        if manifest.exists():
            existing = json.loads(manifest.read_text())
        existing.update(self.record["outputs"])
        _atomic_write_json(manifest, existing)


def _threads(args, config) -> int:
    if getattr(args, "threads", None):
        return args.threads
    if config.get("threads"):
        return int(config["threads"])
    env = os.environ.get("RETROSUM_THREADS")
    return int(env) if env else 1


def _subset(docs, fraction: float, seed: int):
    if fraction >= 1.0:
        return docs
    rng = np.random.default_rng(seed)
    n = max(1, int(round(len(docs) * fraction)))
    picks = sorted(rng.choice(len(docs), size=n, replace=False).tolist())
    return [docs[i] for i in picks]


def _split_path(config, split: str) -> Path:
    paths = config["paths"]
    return Path(paths["corpus_dir"]) / paths[f"{split}_file"]


def _safe_id(doc_id: str) -> str:
    return doc_id.replace("/", "_")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_tokenizer(args) -> int:
    from .corpus import load_split
    from .tokenizer import train_tokenizer

    config = load_config(args.config)
    inputs = [Path(p) for p in args.input]

    def corpus_text():
        for p in inputs:
            for doc in load_split(p, "train", lenient=config["flags"]["lenient"]):
                yield doc.body_text()
                yield doc.abstract_text()
                if doc.title:
                    yield doc.title

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = RunMetadata(out.parent, "train-tokenizer", config, inputs)
    tok = train_tokenizer(corpus_text(), vocab_size=args.vocab_size)
    tok.save(out)
    meta.finalize([out])
    print(f"trained tokenizer: vocab {tok.vocab_size}, {len(tok.merges)} merges -> {out}")
    return 0


def cmd_ingest(args) -> int:
    from .corpus import compute_stats, format_stats_table, load_split, STATS_CSV_HEADER
    from .tokenizer import Tokenizer

    config = load_config(args.config)
    if args.corpus_dir:
        config["paths"]["corpus_dir"] = args.corpus_dir
    out_dir = Path(args.out_dir or config["paths"]["out_dir"])
    splits = args.splits.split(",")
    tokenizer = Tokenizer.load(args.tokenizer) if args.tokenizer else None
    files = [_split_path(config, s) for s in splits]
    meta = RunMetadata(out_dir, "ingest", config, files)
    stats = []
    for split, path in zip(splits, files):
        docs = load_split(path, split, lenient=config["flags"]["lenient"] or args.lenient)
        docs = _subset(docs, config["subset"]["fraction"], config["subset"]["seed"])
        stats.append(compute_stats(docs, tokenizer=tokenizer, split=split))
        print(f"{split}: {len(docs)} documents")
    csv_path = out_dir / "corpus_stats.csv"
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(STATS_CSV_HEADER + "\n")
        for s in stats:
            f.write(s.csv_row() + "\n")
    print(format_stats_table(stats))
    meta.finalize([csv_path])
    return 0


def cmd_build_index(args) -> int:
    from .corpus import load_split
    from .index import build_index, save_index
    from .model import ModelConfig, NeighborEncoder
    from .npops import ChunkEmbedder
    from .tokenizer import Tokenizer

    config = load_config(args.config)
    tokenizer = Tokenizer.load(args.tokenizer or config["paths"]["tokenizer"])
    corpus_path = Path(args.corpus) if args.corpus else _split_path(config, args.split)
    out_dir = Path(args.out or config["paths"]["indexes"])
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = RunMetadata(out_dir, "build-index", config, [corpus_path])

    encoder = _load_neighbor_encoder(args.checkpoint, config)
    embedder = ChunkEmbedder(encoder)
    m = ModelConfig.from_dict(config["model"]).attention.m if config["model"] else 64

    docs = load_split(corpus_path, args.split, lenient=config["flags"]["lenient"])
    docs = _subset(docs, config["subset"]["fraction"], config["subset"]["seed"])

    def build_one(doc):
        idx = build_index(doc, tokenizer, embedder, m=m)
        path = out_dir / f"{_safe_id(doc.article_id)}.idx"
        save_index(idx, path)
        return path

    n_threads = _threads(args, config)
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            outputs = list(pool.map(build_one, docs))
    else:
        outputs = [build_one(d) for d in docs]
    meta.finalize(outputs)
    print(f"built {len(outputs)} per-document indexes -> {out_dir}")
    return 0


def _load_neighbor_encoder(checkpoint_path, config):
    """The chunk embedder is the checkpoint's neighbor encoder; without a
    checkpoint, a seed-initialized one (bag-of-context features)."""
    from .checkpoint import load_checkpoint
    from .model import ModelConfig, NeighborEncoder, RetroModel

    mcfg = ModelConfig.from_dict(config["model"]) if config["model"] else ModelConfig()
    if checkpoint_path:
        ck = load_checkpoint(checkpoint_path)
        mcfg = ModelConfig.from_dict(ck["config"]["model"])
        retro = RetroModel(mcfg)
        from .checkpoint import restore_params

        restore_params(retro.named_parameters(), ck)
        return retro.neighbor_encoder
    return NeighborEncoder(mcfg)


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, restore_params
    from .corpus import load_split
    from .index import load_index
    from .model import ModelConfig, RetroModel, build_base_decoder, build_encdec, retrofit
    from .tokenizer import Tokenizer
    from .training import TrainConfig, train

    config = load_config(args.config)
    for key in ("lr", "epochs", "accumulation"):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            config["train"][key] = value
    out_dir = Path(args.out_dir or config["paths"]["out_dir"])
    tokenizer = Tokenizer.load(args.tokenizer or config["paths"]["tokenizer"])
    train_path = _split_path(config, "train")
    val_path = _split_path(config, "val")
    meta = RunMetadata(out_dir, f"train-{args.mode}", config, [train_path, val_path])

    lenient = config["flags"]["lenient"]
    train_docs = _subset(load_split(train_path, "train", lenient),
                         config["subset"]["fraction"], config["subset"]["seed"])
    val_docs = []
    if val_path.is_file():
        val_docs = _subset(load_split(val_path, "val", lenient),
                           config["subset"]["fraction"], config["subset"]["seed"])

    mcfg = ModelConfig.from_dict(config["model"]) if config["model"] else ModelConfig()
    tcfg = TrainConfig(
        lr=config["train"]["lr"],
        epochs=config["train"]["epochs"],
        accumulation=config["train"]["accumulation"],
        seed=config["seed"],
        continuation=config["flags"]["neighbor_continuation"],
    )

    indexes = None
    if args.mode == "retrofit":
        if not args.base_checkpoint:
            raise SystemExit("retrofit mode needs --base-checkpoint (a pretrained base decoder)")
        base = build_base_decoder(mcfg)
        ck = load_checkpoint(args.base_checkpoint)
        restore_params(base.named_parameters(), ck)
        model = retrofit(base, mcfg)
        index_dir = Path(args.indexes or config["paths"]["indexes"])
        indexes = {}
        for doc in train_docs + val_docs:
            path = index_dir / f"{_safe_id(doc.article_id)}.idx"
            if not path.is_file():
                raise SystemExit(f"missing index for document {doc.article_id} at {path}")
            indexes[doc.article_id] = load_index(path)
    elif args.mode == "pretrain":
        model = build_base_decoder(mcfg)
    else:
        model = build_encdec(mcfg)

    result = train(model, tokenizer, train_docs, val_docs, mode=args.mode, cfg=tcfg,
                   out_dir=out_dir, indexes=indexes)
    meta.finalize([result.checkpoint_path, result.loss_csv_path])
    print(f"{args.mode}: {result.steps} steps -> {result.checkpoint_path}")
    return 0


def cmd_generate(args) -> int:
    from .checkpoint import load_checkpoint, restore_params
    from .corpus import load_split
    from .generation import DecodeStrategy, generate, prediction_record
    from .index import load_index
    from .model import ModelConfig, RetroModel, build_base_decoder
    from .tokenizer import Tokenizer

    config = load_config(args.config)
    tokenizer = Tokenizer.load(args.tokenizer or config["paths"]["tokenizer"])
    ck = load_checkpoint(args.checkpoint)
    mcfg = ModelConfig.from_dict(ck["config"]["model"])
    retro = ck["config"].get("mode") == "retrofit" or any(
        name.startswith("neighbor_encoder.") for name in ck["params"]
    )
    model = RetroModel(mcfg) if retro else build_base_decoder(mcfg)
    restore_params(model.named_parameters(), ck)
    model.eval()

    split_path = _split_path(config, args.split)
    docs = {d.article_id: d for d in load_split(split_path, args.split, config["flags"]["lenient"])}
    doc_ids = args.doc_id.split(",") if args.doc_id else list(docs)
    out_dir = Path(args.out_dir or config["paths"]["out_dir"])
    meta = RunMetadata(out_dir, "generate", config, [split_path])

    retrieval = args.retrieval == "on"
    strategy = DecodeStrategy(kind=args.strategy, k=args.topk, temperature=args.temperature)
    rng = np.random.default_rng(config["seed"])
    out_path = Path(args.out) if args.out else out_dir / "predictions.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    index_dir = Path(args.indexes or config["paths"]["indexes"])
    with open(out_path, "w", encoding="utf-8") as f:
        for doc_id in doc_ids:
            if doc_id not in docs:
                raise SystemExit(f"unknown --doc-id {doc_id} in split {args.split}")
            doc = docs[doc_id]
            index = None
            if retrieval:
                idx_path = index_dir / f"{_safe_id(doc_id)}.idx"
                if not idx_path.is_file():
                    raise SystemExit(f"missing index for document {doc_id} at {idx_path}")
                index = load_index(idx_path)
            seq, state = generate(
                model, doc, tokenizer, retrieval=retrieval, index=index,
                max_len=args.max_len, strategy=strategy, rng=rng,
                continuation=config["flags"]["neighbor_continuation"],
            )
            text = tokenizer.decode(seq.ids)
            f.write(prediction_record(doc, text, state) + "\n")
            if len(doc_ids) == 1:
                print(text)
    meta.finalize([out_path])
    print(f"wrote {len(doc_ids)} predictions -> {out_path}", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    from .corpus import load_split
    from .rouge import evaluate_corpus, format_report_table, load_predictions

    config = load_config(args.config)
    split_path = Path(args.corpus) if args.corpus else _split_path(config, args.split)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    meta = RunMetadata(out_path.parent, "evaluate", config, [Path(args.pred), split_path])
    preds = load_predictions(args.pred)
    refs = {
        d.article_id: d.abstract_text()
        for d in load_split(split_path, args.split, config["flags"]["lenient"])
    }
    report = evaluate_corpus(preds, refs, out_csv=out_path)
    print(format_report_table(report, label=Path(args.pred).stem))
    meta.finalize([out_path])
    return 0


def cmd_bench_attention(args) -> int:
    from .bench import run_attention_bench

    sizes = [int(x) for x in args.n.split(",")]
    rows = run_attention_bench(
        sizes, r=args.r, k=args.k, m=args.m, num_neighbors=args.num_neighbors,
        heads=args.heads, d_model=args.d_model, repeats=args.repeats,
    )
    header = "kind,n,r,k,pairs,predicted_pairs,wall_ms"
    lines = [header] + [
        f"{r['kind']},{r['n']},{r['r']},{r['k']},{r['pairs']},{r['predicted_pairs']},{r['wall_ms']:.3f}"
        for r in rows
    ]
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    mismatches = [r for r in rows if r["pairs"] != r["predicted_pairs"]]
    if mismatches:
        print(f"pair-count mismatch in {len(mismatches)} rows", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retrosum",
        description="Retrieval-enhanced abstractive summarization pipeline",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-tokenizer", help="learn a pair-merge vocabulary from JSONL corpora")
    p.add_argument("--input", nargs="+", required=True, help="JSON-lines corpus files")
    p.add_argument("--vocab-size", type=int, default=4096)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("ingest", help="parse corpus splits and report statistics")
    p.add_argument("--corpus-dir")
    p.add_argument("--splits", default="train,val,test")
    p.add_argument("--tokenizer", help="optional tokenizer for token-length stats")
    p.add_argument("--lenient", action="store_true", help="skip-and-log bad records")
    p.add_argument("--out-dir")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("build-index", help="build one chunk index per document")
    p.add_argument("--split", default="train")
    p.add_argument("--corpus", help="explicit JSONL path (overrides split lookup)")
    p.add_argument("--tokenizer")
    p.add_argument("--checkpoint", help="checkpoint providing the neighbor encoder")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_build_index)

    p = sub.add_parser("train", help="train one of the three modes")
    p.add_argument("--mode", choices=["pretrain", "retrofit", "encdec"], required=True)
    p.add_argument("--config")
    p.add_argument("--tokenizer")
    p.add_argument("--base-checkpoint", help="pretrained base (retrofit mode)")
    p.add_argument("--indexes", help="directory of per-document indexes (retrofit mode)")
    p.add_argument("--out-dir")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--accumulation", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="summarize documents with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--doc-id", help="comma-separated ids; default: whole split")
    p.add_argument("--retrieval", choices=["on", "off"], default="on")
    p.add_argument("--split", default="test")
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--strategy", choices=["greedy", "topk", "temperature"], default="greedy")
    p.add_argument("--topk", type=int, default=10)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--tokenizer")
    p.add_argument("--indexes")
    p.add_argument("--out")
    p.add_argument("--out-dir")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against reference abstracts")
    p.add_argument("--pred", required=True, help="JSON-lines predictions")
    p.add_argument("--split", default="test")
    p.add_argument("--corpus", help="explicit reference JSONL path")
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("bench-attention", help="attended-pair counts and wall time per kind")
    p.add_argument("--n", default="256,1024,4096", help="comma-separated sequence lengths")
    p.add_argument("--r", type=int, default=127)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--m", type=int, default=64)
    p.add_argument("--num-neighbors", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # one-line cause, exit 1
        log.debug("traceback", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
