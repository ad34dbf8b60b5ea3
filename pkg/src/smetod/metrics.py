"""Dialogue evaluation metrics, all reported as percentages."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .dialogue import BeliefState
from .errors import ArityError


def _check_aligned(a: Sequence, b: Sequence, what: str) -> None:
    if len(a) != len(b):
        raise ArityError(f"{what}: {len(a)} predictions vs {len(b)} references")
    if not a:
        raise ArityError(f"{what}: empty input")


def normalize_label(s: str) -> str:
    return " ".join(s.lower().split())


def intent_accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    _check_aligned(preds, golds, "intent_accuracy")
    hits = sum(normalize_label(p) == normalize_label(g) for p, g in zip(preds, golds))
    return 100.0 * hits / len(golds)


def _pairs(b) -> frozenset:
    if isinstance(b, BeliefState):
        return frozenset(b.pairs)
    if isinstance(b, dict):
        return frozenset(b.items())
    return frozenset(tuple(p) for p in b)


def joint_goal_accuracy(pred_beliefs: Sequence, gold_beliefs: Sequence) -> float:
    """A turn scores only when the predicted pair set equals the gold set exactly."""
    _check_aligned(pred_beliefs, gold_beliefs, "joint_goal_accuracy")
    hits = sum(_pairs(p) == _pairs(g) for p, g in zip(pred_beliefs, gold_beliefs))
    return 100.0 * hits / len(gold_beliefs)


def slot_accuracy(pred_beliefs: Sequence, gold_beliefs: Sequence, slots: Iterable[str] | None = None) -> float:
    """Per-(turn, slot) agreement, where a slot absent on both sides counts as agreement.

    ``slots`` defaults to every slot seen in either side.
    """
    _check_aligned(pred_beliefs, gold_beliefs, "slot_accuracy")
    preds = [dict(_pairs(p)) for p in pred_beliefs]
    golds = [dict(_pairs(g)) for g in gold_beliefs]
    if slots is None:
        slots = sorted({s for d in preds + golds for s in d})
    slots = list(slots)
    if not slots:
        return 100.0
    hits = sum(p.get(s) == g.get(s) for p, g in zip(preds, golds) for s in slots)
    return 100.0 * hits / (len(golds) * len(slots))


def _contains(tokens: list[str], phrase: str) -> bool:
    needle = phrase.split()
    n = len(needle)
    return n > 0 and any(tokens[i : i + n] == needle for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class DialogueOutcome:
    """Final response of one dialogue with what it should have delivered."""

    response: str
    matches: frozenset[str]
    requested_values: dict[str, str] = field(default_factory=dict)

    def inform(self) -> bool:
        toks = self.response.split()
        return any(name in toks for name in self.matches)

    def success(self) -> bool:
        toks = self.response.split()
        return self.inform() and all(_contains(toks, v) for v in self.requested_values.values())


def inform_success(outcomes: Sequence[DialogueOutcome]) -> tuple[float, float]:
    """Inform: the final response names an entity in the gold match set.

    Success additionally needs every requested attribute value of the gold
    top entity to appear in that response.
    """
    if not outcomes:
        raise ArityError("inform_success: no dialogues")
    inform = sum(o.inform() for o in outcomes)
    success = sum(o.success() for o in outcomes)
    return 100.0 * inform / len(outcomes), 100.0 * success / len(outcomes)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4):
    """Return (clipped matches per n, hypothesis n-gram totals per n, hyp length, ref length)."""
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, ref in zip(hypotheses, references):
        h, g = hyp.split(), ref.split()
        c += len(h)
        r += len(g)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(g, n)
            matches[n - 1] += sum(min(k, rc[gram]) for gram, k in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, c, r


def bleu(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU-4 with add-one smoothing for n >= 2 and a brevity penalty."""
    _check_aligned(hypotheses, references, "bleu")
    matches, totals, c, r = bleu_stats(hypotheses, references, max_n)
    if c == 0 or matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p / max_n)


def combined_score(inform: float, success: float, bleu_score: float) -> float:
    return (inform + success) * 0.5 + bleu_score


METRIC_FIELDS = ("intent_accuracy", "jga", "slot_accuracy", "inform", "success", "bleu", "combined")


@dataclass
class EvalReport:
    """Metrics that were evaluated; the rest stay ``None``."""

    intent_accuracy: float | None = None
    jga: float | None = None
    slot_accuracy: float | None = None
    inform: float | None = None
    success: float | None = None
    bleu: float | None = None
    records: list[dict] = field(default_factory=list, repr=False)

    @property
    def combined(self) -> float | None:
        if self.inform is None or self.success is None or self.bleu is None:
            return None
        return combined_score(self.inform, self.success, self.bleu)

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_FIELDS if getattr(self, k) is not None}

    def merge(self, other: EvalReport) -> EvalReport:
        out = EvalReport(records=self.records + other.records)
        for k in METRIC_FIELDS[:-1]:
            mine, theirs = getattr(self, k), getattr(other, k)
            setattr(out, k, theirs if mine is None else mine)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.metrics().items():
            w.writerow([k, f"{v:.6f}"])
        return buf.getvalue()

    def __str__(self) -> str:
        return "\n".join(f"{k:>16}: {v:8.2f}" for k, v in self.metrics().items())
