"""Training loop behavior: accumulation equivalence, curves, retrofit plumbing."""

import numpy as np
import pytest

from retrosum import autograd as ag
from retrosum.attention import AttentionConfig
from retrosum.index import build_index
from retrosum.model import ModelConfig, build_base_decoder, build_encdec, retrofit
from retrosum.npops import ChunkEmbedder
from retrosum.optim import Adam
from retrosum.sequences import IGNORE_INDEX, build_decoder_example
from retrosum.synthetic import make_documents
from retrosum.tokenizer import train_tokenizer
from retrosum.training import TrainConfig, TrainingError, mean_eval_loss, train


def tiny_cfg(**kw):
    defaults = dict(
        d_model=24, heads=2, ff_dim=32, vocab_size=420, decoder_layers=2,
        encoder_layers=1, neighbor_encoder_layers=1, cca_layers=(2,),
        max_input=256, max_output=128,
        attention=AttentionConfig(m=16, num_neighbors=2, r=4, k=8), seed=0,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


@pytest.fixture(scope="module")
def corpus():
    docs = make_documents(seed=50, n_docs=10, body_sentences=(8, 10))
    tok = train_tokenizer((d.body_text() for d in docs), vocab_size=420)
    return docs, tok


def test_gradient_accumulation_equals_summed_batch(corpus):
    docs, tok = corpus
    batch = docs[:4]

    def run_accumulated():
        cfg = tiny_cfg(dtype="float64")
        model = build_base_decoder(cfg)
        opt = Adam(model.named_parameters(), lr=1e-4)
        losses = []
        for doc in batch:
            x, y = build_decoder_example(tok, doc, cfg.max_output)
            loss = ag.cross_entropy(model(x), y, ignore_index=IGNORE_INDEX)
            losses.append(loss.item())
            ag.mul(loss, 1.0 / len(batch)).backward()
        opt.step()
        return float(np.mean(losses)), model

    def run_summed():
        cfg = tiny_cfg(dtype="float64")
        model = build_base_decoder(cfg)
        opt = Adam(model.named_parameters(), lr=1e-4)
        total = None
        for doc in batch:
            x, y = build_decoder_example(tok, doc, cfg.max_output)
            term = ag.mul(ag.cross_entropy(model(x), y, ignore_index=IGNORE_INDEX), 1.0 / len(batch))
            total = term if total is None else ag.add(total, term)
        total.backward()
        opt.step()
        return total.item(), model

    loss_a, model_a = run_accumulated()
    loss_b, model_b = run_summed()
    assert abs(loss_a - loss_b) < 1e-6
    pa, pb = model_a.named_parameters(), model_b.named_parameters()
    for name in pa:
        np.testing.assert_allclose(pa[name].data, pb[name].data, atol=1e-9, err_msg=name)


def test_pretrain_loop_writes_curves_and_checkpoint(tmp_path, corpus):
    docs, tok = corpus
    cfg = tiny_cfg()
    model = build_base_decoder(cfg)
    res = train(
        model, tok, docs[:6], docs[6:8], mode="pretrain",
        cfg=TrainConfig(lr=1e-3, epochs=2, accumulation=3, seed=1),
        out_dir=tmp_path,
    )
    assert res.steps == 4
    assert res.checkpoint_path.exists()
    assert res.loss_csv_path.exists()
    lines = res.loss_csv_path.read_text().strip().splitlines()
    assert lines[0] == "step,split,loss"
    splits = {line.split(",")[1] for line in lines[1:]}
    assert splits == {"train", "val"}
    from retrosum.checkpoint import load_checkpoint

    ck = load_checkpoint(res.checkpoint_path)
    assert ck["config"]["mode"] == "pretrain"
    assert ck["extra"]["steps"] == res.steps


def test_training_determinism(tmp_path, corpus):
    docs, tok = corpus

    def run():
        model = build_base_decoder(tiny_cfg())
        res = train(model, tok, docs[:4], [], mode="pretrain",
                    cfg=TrainConfig(lr=1e-3, epochs=2, accumulation=2, seed=5))
        return res.train_curve, model

    c1, m1 = run()
    c2, m2 = run()
    assert c1 == c2
    p1, p2 = m1.named_parameters(), m2.named_parameters()
    for name in p1:
        assert p1[name].data.tobytes() == p2[name].data.tobytes(), name


def test_retrofit_requires_indexes(corpus):
    docs, tok = corpus
    cfg = tiny_cfg()
    retro = retrofit(build_base_decoder(cfg), cfg)
    with pytest.raises(TrainingError, match="indexes"):
        train(retro, tok, docs[:2], [], mode="retrofit", cfg=TrainConfig(epochs=1))


def test_retrofit_missing_doc_index_is_fatal(corpus):
    docs, tok = corpus
    cfg = tiny_cfg()
    retro = retrofit(build_base_decoder(cfg), cfg)
    emb = ChunkEmbedder(retro.neighbor_encoder)
    indexes = {docs[0].article_id: build_index(docs[0], tok, emb, m=cfg.attention.m)}
    with pytest.raises(TrainingError, match=docs[1].article_id):
        train(retro, tok, docs[:2], [], mode="retrofit",
              cfg=TrainConfig(epochs=1, accumulation=1, shuffle=False), indexes=indexes)


def test_retrofit_trains_and_keeps_base_frozen(corpus):
    docs, tok = corpus
    cfg = tiny_cfg()
    base = build_base_decoder(cfg)
    retro = retrofit(base, cfg)
    emb = ChunkEmbedder(retro.neighbor_encoder)
    indexes = {d.article_id: build_index(d, tok, emb, m=cfg.attention.m) for d in docs[:4]}
    frozen = {n: p.data.tobytes() for n, p in retro.named_parameters().items() if not p.trainable}
    res = train(retro, tok, docs[:4], [], mode="retrofit",
                cfg=TrainConfig(lr=1e-3, epochs=3, accumulation=2, seed=2), indexes=indexes)
    assert res.steps == 6
    params = retro.named_parameters()
    for name, blob in frozen.items():
        assert params[name].data.tobytes() == blob, name
    # without-retrieval loss on the trained retro equals the base model's loss
    off = mean_eval_loss(retro, tok, docs[:2], mode="retrofit", with_retrieval=False)
    base_loss = mean_eval_loss(base, tok, docs[:2], mode="pretrain")
    assert abs(off - base_loss) < 1e-7


def test_encdec_trains(corpus):
    docs, tok = corpus
    cfg = tiny_cfg()
    model = build_encdec(cfg)
    res = train(model, tok, docs[:3], docs[3:4], mode="encdec",
                cfg=TrainConfig(lr=1e-3, epochs=1, accumulation=3, seed=3))
    assert res.steps == 1
    assert res.val_curve


def test_unknown_mode_rejected(corpus):
    docs, tok = corpus
    with pytest.raises(TrainingError, match="mode"):
        train(build_base_decoder(tiny_cfg()), tok, docs[:1], [], mode="finetune", cfg=TrainConfig())


def test_max_steps_cap(corpus):
    docs, tok = corpus
    model = build_base_decoder(tiny_cfg())
    res = train(model, tok, docs[:6], [], mode="pretrain",
                cfg=TrainConfig(epochs=50, accumulation=1, max_steps=7))
    assert res.steps == 7
