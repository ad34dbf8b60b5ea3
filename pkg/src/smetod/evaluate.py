"""Run trained models over a split and score them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .dialogue import (
    Dialogue,
    DialogueExample,
    TextModel,
    ToyDatabase,
    db_query,
    end_to_end_infer_batch,
    make_examples,
    parse_belief,
)
from .errors import CorpusError
from .metrics import DialogueOutcome, EvalReport, bleu, inform_success, intent_accuracy, joint_goal_accuracy, slot_accuracy
from .transformer import Seq2SeqModel, greedy_decode_batch, pad_batch, shift_right
from .vocab import EOS_ID, Vocab


def evaluate_nlu(model: TextModel, examples: Sequence[DialogueExample]) -> EvalReport:
    preds = model.generate([ex.x for ex in examples])
    golds = [ex.y for ex in examples]
    records = [{"dialogue_id": ex.dialogue_id, "turn_id": ex.turn_id, "pred": p, "gold": g} for ex, p, g in zip(examples, preds, golds)]
    return EvalReport(intent_accuracy=intent_accuracy(preds, golds), records=records)


def evaluate_dst(model: TextModel, examples: Sequence[DialogueExample]) -> EvalReport:
    raw = model.generate([ex.x for ex in examples])
    preds = [parse_belief(s) for s in raw]
    golds = [parse_belief(ex.y) for ex in examples]
    records = [
        {"dialogue_id": ex.dialogue_id, "turn_id": ex.turn_id, "pred": r, "gold": ex.y, "malformed": p.malformed}
        for ex, r, p in zip(examples, raw, preds)
    ]
    return EvalReport(jga=joint_goal_accuracy(preds, golds), slot_accuracy=slot_accuracy(preds, golds), records=records)


def dialogue_outcome(dialogue: Dialogue, response: str, db: ToyDatabase) -> DialogueOutcome:
    """What the final response of ``dialogue`` is scored against."""
    gold = db_query(dialogue.turns[-1].belief, db)
    top = next((e for e in db.entities.get(dialogue.domain, []) if e.name == gold.top_entity), None)
    requested = {}
    for slot in dialogue.requested:
        if top is not None and slot in top.attributes:
            requested[slot] = top.attributes[slot]
    return DialogueOutcome(response, frozenset(gold.matches), requested)


def evaluate_nlg(
    nlg_model: TextModel, dialogues: Sequence[Dialogue], db: ToyDatabase, dst_model: TextModel | None = None
) -> EvalReport:
    """BLEU over every turn plus Inform/Success on each dialogue's final turn.

    With ``dst_model`` the responses come from two-step inference (predicted
    belief, then DB lookup, then generation); without it the inputs use the
    gold belief.
    """
    if not dialogues:
        raise CorpusError("no dialogues to evaluate")
    index = []
    for d in dialogues:
        for t in range(len(d.turns)):
            index.append((d, t))
    if dst_model is not None:
        traces = end_to_end_infer_batch([d.history(t) for d, t in index], dst_model, nlg_model, db)
        responses = [tr.response for tr in traces]
        inputs = [tr.nlg_input for tr in traces]
    else:
        inputs = [ex.x for d in dialogues for ex in make_examples(d, "nlg", db)]
        responses = nlg_model.generate(inputs)
    refs = [d.turns[t].response for d, t in index]
    outcomes = []
    records = []
    for (d, t), x, hyp, ref in zip(index, inputs, responses, refs):
        records.append({"dialogue_id": d.dialogue_id, "turn_id": t, "input": x, "pred": hyp, "gold": ref})
        if t == len(d.turns) - 1:
            outcomes.append(dialogue_outcome(d, hyp, db))
    inform, success = inform_success(outcomes)
    return EvalReport(inform=inform, success=success, bleu=bleu(responses, refs), records=records)


def evaluate_task(task: str, model: TextModel, dialogues: Sequence[Dialogue], db: ToyDatabase, dst_model=None) -> EvalReport:
    task = task.lower()
    if task == "nlg":
        return evaluate_nlg(model, dialogues, db, dst_model)
    examples = [ex for d in dialogues for ex in make_examples(d, task, db)]
    return evaluate_nlu(model, examples) if task == "nlu" else evaluate_dst(model, examples)


# --- batch-size sensitivity ----------------------------------------------------


@dataclass
class PaddingRow:
    batch_size: int
    metric: float
    max_logit_delta: float
    changed_outputs: int


@dataclass
class PaddingStudy:
    masked: bool
    metric_name: str
    rows: list[PaddingRow] = field(default_factory=list)

    @property
    def average_metric(self) -> float:
        return float(np.mean([r.metric for r in self.rows]))

    @property
    def max_metric_delta(self) -> float:
        ms = [r.metric for r in self.rows]
        return max(ms) - min(ms)

    def to_csv(self) -> str:
        lines = ["batch_size,metric,value,max_logit_delta,changed_outputs"]
        for r in self.rows:
            lines.append(f"{r.batch_size},{self.metric_name},{r.metric:.6f},{r.max_logit_delta:.6e},{r.changed_outputs}")
        return "\n".join(lines) + "\n"


def teacher_forced_logits(model: Seq2SeqModel, srcs: list[list[int]], tgts: list[list[int]], batch_size: int) -> list[np.ndarray]:
    """Per-example logits over the unpadded target positions, computed in batches of ``batch_size``."""
    out: list[np.ndarray] = []
    with no_grad():
        for start in range(0, len(srcs), batch_size):
            s = srcs[start : start + batch_size]
            t = tgts[start : start + batch_size]
            logits = model.forward(pad_batch(s), shift_right(pad_batch(t))).data
            out.extend(logits[i, : len(t[i])].copy() for i in range(len(s)))
    return out


def _score(task: str, preds: list[str], examples: Sequence[DialogueExample]) -> float:
    golds = [ex.y for ex in examples]
    if task == "nlu":
        return intent_accuracy(preds, golds)
    if task == "dst":
        return joint_goal_accuracy([parse_belief(p) for p in preds], [parse_belief(g) for g in golds])
    return bleu(preds, golds)


def padding_sensitivity_study(
    model: Seq2SeqModel,
    vocab: Vocab,
    examples: Sequence[DialogueExample],
    batch_sizes: Sequence[int] = (1, 4, 16, 64),
    max_len: int = 32,
) -> PaddingStudy:
    """Evaluate at several batch sizes in corpus order (so batches mix lengths).

    Logit deltas are measured against batch size 1 on teacher-forced targets.
    """
    if not examples:
        raise CorpusError("no examples for the padding study")
    task = examples[0].task
    name = {"nlu": "intent_accuracy", "dst": "jga", "nlg": "bleu"}[task]
    srcs = [vocab.encode(ex.x) for ex in examples]
    tgts = [vocab.encode(ex.y) + [EOS_ID] for ex in examples]

    def decode(b: int) -> list[str]:
        out: list[str] = []
        for start in range(0, len(srcs), b):
            out.extend(vocab.decode(ids) for ids in greedy_decode_batch(model, srcs[start : start + b], max_len))
        return out

    ref_logits = teacher_forced_logits(model, srcs, tgts, 1)
    ref_out = decode(1)
    study = PaddingStudy(model.config.masked_softmax, name)
    for b in batch_sizes:
        logits = ref_logits if b == 1 else teacher_forced_logits(model, srcs, tgts, b)
        delta = max(float(np.max(np.abs(a - r))) for a, r in zip(logits, ref_logits))
        decoded = ref_out if b == 1 else decode(b)
        changed = sum(a != r for a, r in zip(decoded, ref_out))
        study.rows.append(PaddingRow(b, _score(task, decoded, examples), delta, changed))
    return study
