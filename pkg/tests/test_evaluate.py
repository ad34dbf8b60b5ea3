import numpy as np
import pytest

from smetod.dialogue import make_examples
from smetod.evaluate import (
    dialogue_outcome,
    evaluate_dst,
    evaluate_nlg,
    evaluate_nlu,
    evaluate_task,
    padding_sensitivity_study,
    teacher_forced_logits,
)
from smetod.transformer import ModelConfig, Seq2SeqModel


class Lookup:
    def __init__(self, table, default=""):
        self.table, self.default = table, default

    def generate(self, inputs):
        return [self.table.get(x, self.default) for x in inputs]


class Replay:
    """Returns the given outputs in call order, whatever the inputs."""

    def __init__(self, outputs):
        self.outputs = list(outputs)

    def generate(self, inputs):
        out, self.outputs = self.outputs[: len(inputs)], self.outputs[len(inputs) :]
        assert len(out) == len(inputs)
        return out


def gold_model(corpus, task):
    return Lookup({e.x: e.y for e in corpus.examples(task)})


def test_gold_models_score_perfectly(corpus):
    dev = corpus.split("dev")
    assert evaluate_task("nlu", gold_model(corpus, "nlu"), dev, corpus.database).intent_accuracy == 100.0
    dst = evaluate_task("dst", gold_model(corpus, "dst"), dev, corpus.database)
    assert dst.jga == 100.0 and dst.slot_accuracy == 100.0
    # identical histories can carry different templated responses, so replay them in order
    replay = Replay(e.y for d in dev for e in make_examples(d, "nlg", corpus.database))
    nlg = evaluate_nlg(replay, dev, corpus.database, dst_model=gold_model(corpus, "dst"))
    assert nlg.inform == 100.0 and nlg.success == 100.0
    assert nlg.bleu == pytest.approx(100.0, abs=1e-9)
    assert nlg.combined == pytest.approx(200.0)
    assert len(nlg.records) == sum(len(d.turns) for d in dev)


def test_wrong_models_score_zero(corpus):
    exs = corpus.examples("dst", "dev")
    rep = evaluate_dst(Lookup({}, default="[bs] domain = spaceship"), exs)
    assert rep.jga == 0.0
    assert evaluate_nlu(Lookup({}, default="dance"), corpus.examples("nlu", "dev")).intent_accuracy == 0.0
    nlg = evaluate_nlg(Lookup({}, default="qqq zzz"), corpus.split("dev"), corpus.database)
    assert (nlg.inform, nlg.success, nlg.bleu) == (0.0, 0.0, 0.0)


def test_dialogue_outcome_uses_final_gold_belief(corpus):
    d = next(d for d in corpus.dialogues if d.requested)
    last = make_examples(d, "nlg", corpus.database)[-1]
    o = dialogue_outcome(d, last.y, corpus.database)
    assert o.inform() and o.success()
    assert set(o.requested_values) == set(d.requested)


def padding_examples(corpus):
    exs = corpus.examples("nlu", "dev")[:20]
    lengths = {len(e.x.split()) for e in exs}
    assert len(lengths) > 1  # batches will contain padding
    return exs


def model_for(corpus, masked):
    vocab = corpus.vocab()
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, d_ff=32, num_heads=2, max_len=96, masked_softmax=masked)
    return Seq2SeqModel(cfg, seed=0), vocab


def test_masked_mode_is_batch_invariant(corpus):
    model, vocab = model_for(corpus, True)
    study = padding_sensitivity_study(model, vocab, padding_examples(corpus), max_len=4)
    assert [r.batch_size for r in study.rows] == [1, 4, 16, 64]
    assert all(r.changed_outputs == 0 for r in study.rows)
    assert all(r.max_logit_delta <= 1e-12 for r in study.rows)
    assert study.max_metric_delta <= 1e-9
    assert study.rows[0].max_logit_delta == 0.0


def test_unmasked_mode_shows_padding_effect(corpus):
    model, vocab = model_for(corpus, False)
    study = padding_sensitivity_study(model, vocab, padding_examples(corpus), batch_sizes=(1, 64), max_len=4)
    assert study.rows[0].max_logit_delta == 0.0
    assert study.rows[1].max_logit_delta > 0.0
    assert study.to_csv().splitlines()[0] == "batch_size,metric,value,max_logit_delta,changed_outputs"


def test_teacher_forced_logits_shapes(corpus):
    model, vocab = model_for(corpus, True)
    srcs = [[5, 6, 7], [8, 9]]
    tgts = [[5, 1], [6, 7, 1]]
    out = teacher_forced_logits(model, srcs, tgts, 2)
    assert [o.shape for o in out] == [(2, len(vocab)), (3, len(vocab))]
    single = teacher_forced_logits(model, srcs, tgts, 1)
    assert all(np.abs(a - b).max() <= 1e-12 for a, b in zip(out, single))
