"""Dialogue data model and the text formats fed to the seq2seq models.

Every task is text-to-text over a serialized history ``h``::

    NLU   h          -> intent
    DST   h          -> "[bs] slot = value ; ..."
    NLG   h + [db]   -> system response

At inference time the NLG input is grounded on the database result of the
*predicted* belief state (:func:`end_to_end_infer`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .errors import CorpusError, FormatError
from .vocab import BS, DB, SYS, USR

MARKERS = (SYS, USR, BS, DB)
TASKS = ("nlu", "dst", "nlg")


# --- types -------------------------------------------------------------------


@dataclass(frozen=True)
class DialogueTurn:
    speaker: str
    utterance: str

    def __post_init__(self):
        if self.speaker not in ("system", "user"):
            raise FormatError(f"unknown speaker {self.speaker!r}")
        if not self.utterance.strip():
            raise FormatError("empty utterance")


@dataclass(frozen=True)
class BeliefState:
    """Ordered slot-value pairs; ``malformed`` marks a lossy parse of generated text."""

    pairs: tuple[tuple[str, str], ...] = ()
    malformed: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((str(s), str(v)) for s, v in self.pairs))
        slots = [s for s, _ in self.pairs]
        if len(set(slots)) != len(slots):
            raise FormatError(f"duplicate slots in belief state: {slots}")

    @classmethod
    def from_dict(cls, values: dict[str, str], slot_order: Sequence[str]) -> BeliefState:
        rank = {s: i for i, s in enumerate(slot_order)}
        items = sorted(values.items(), key=lambda kv: (rank.get(kv[0], len(rank)), kv[0]))
        return cls(tuple(items))

    def as_dict(self) -> dict[str, str]:
        return dict(self.pairs)

    def get(self, slot: str, default=None):
        return self.as_dict().get(slot, default)

    @property
    def domain(self) -> str | None:
        return self.get("domain")

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class Entity:
    domain: str
    name: str
    attributes: dict[str, str]

    def to_json(self) -> dict:
        return {"domain": self.domain, "name": self.name, "attributes": dict(self.attributes)}


@dataclass
class ToyDatabase:
    entities: dict[str, list[Entity]]
    slot_order: tuple[str, ...] = ()

    def domain_slots(self, domain: str) -> list[str]:
        ents = self.entities.get(domain, [])
        keys = set(ents[0].attributes) if ents else set()
        return [s for s in self.slot_order if s in keys] or sorted(keys)

    def all_entities(self) -> list[Entity]:
        return [e for dom in self.entities for e in self.entities[dom]]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ent in self.all_entities():
                fh.write(json.dumps(ent.to_json()) + "\n")

    @classmethod
    def read(cls, path, slot_order: Sequence[str] = ()) -> ToyDatabase:
        entities: dict[str, list[Entity]] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                entities.setdefault(rec["domain"], []).append(Entity(rec["domain"], rec["name"], rec["attributes"]))
        return cls(entities, tuple(slot_order))


@dataclass(frozen=True)
class DBResult:
    match_count: int
    top_entity: str | None = None
    attributes: tuple[tuple[str, str], ...] = ()
    matches: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.match_count < 0:
            raise ValueError("negative match count")
        if (self.top_entity is not None) != (self.match_count >= 1):
            raise ValueError("top_entity must be present iff match_count >= 1")


@dataclass
class GoldTurn:
    """One user turn with its annotations and the system reply that follows."""

    user: str
    intent: str
    belief: BeliefState
    response: str
    requested: tuple[str, ...] = ()


@dataclass
class Dialogue:
    dialogue_id: str
    domain: str
    opening: str
    turns: list[GoldTurn]
    split: str = "train"

    def history(self, t: int) -> list[DialogueTurn]:
        """History up to and including user turn ``t`` (0-based)."""
        out = [DialogueTurn("system", self.opening)]
        for k in range(t + 1):
            if k > 0:
                out.append(DialogueTurn("system", self.turns[k - 1].response))
            out.append(DialogueTurn("user", self.turns[k].user))
        return out

    @property
    def requested(self) -> tuple[str, ...]:
        seen: list[str] = []
        for turn in self.turns:
            seen.extend(s for s in turn.requested if s not in seen)
        return tuple(seen)

    def to_json(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "domain": self.domain,
            "split": self.split,
            "opening": self.opening,
            "turns": [
                {
                    "user": t.user,
                    "intent": t.intent,
                    "belief": [list(p) for p in t.belief.pairs],
                    "response": t.response,
                    "requested": list(t.requested),
                }
                for t in self.turns
            ],
        }

    @classmethod
    def from_json(cls, rec: dict) -> Dialogue:
        turns = [
            GoldTurn(
                t["user"],
                t["intent"],
                BeliefState(tuple(tuple(p) for p in t["belief"])),
                t["response"],
                tuple(t.get("requested", ())),
            )
            for t in rec["turns"]
        ]
        return cls(rec["dialogue_id"], rec["domain"], rec["opening"], turns, rec.get("split", "train"))


@dataclass
class DialogueExample:
    task: str
    x: str
    y: str
    dialogue_id: str = ""
    turn_id: int = 0
    intent: str | None = None
    belief: BeliefState | None = None
    response: str | None = None
    requested: tuple[str, ...] = ()

    def __post_init__(self):
        if self.task not in TASKS:
            raise CorpusError(f"unknown task {self.task!r}")

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "x": self.x,
            "y": self.y,
            "dialogue_id": self.dialogue_id,
            "turn_id": self.turn_id,
            "gold": {
                "intent": self.intent,
                "belief": None if self.belief is None else [list(p) for p in self.belief.pairs],
                "response": self.response,
                "requested": list(self.requested),
            },
        }

    @classmethod
    def from_json(cls, rec: dict) -> DialogueExample:
        gold = rec.get("gold", {})
        belief = gold.get("belief")
        return cls(
            rec["task"],
            rec["x"],
            rec["y"],
            rec.get("dialogue_id", ""),
            int(rec.get("turn_id", 0)),
            gold.get("intent"),
            None if belief is None else BeliefState(tuple(tuple(p) for p in belief)),
            gold.get("response"),
            tuple(gold.get("requested") or ()),
        )


def read_examples(path, task: str | None = None) -> list[DialogueExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                ex = DialogueExample.from_json(json.loads(line))
                if task is None or ex.task == task:
                    out.append(ex)
    return out


def write_examples(path, examples: Iterable[DialogueExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json()) + "\n")


# --- history -----------------------------------------------------------------


def validate_history(turns: Sequence[DialogueTurn]) -> None:
    if len(turns) < 2 or len(turns) % 2:
        raise FormatError("history needs complete system/user exchanges")
    for i, turn in enumerate(turns):
        want = "system" if i % 2 == 0 else "user"
        if turn.speaker != want:
            raise FormatError(f"turn {i} should be spoken by {want}")


def serialize_history(turns: Sequence[DialogueTurn]) -> str:
    validate_history(turns)
    parts = []
    for turn in turns:
        toks = turn.utterance.split()
        bad = [t for t in toks if t in MARKERS]
        if bad:
            raise FormatError(f"utterance contains reserved marker {bad[0]!r}")
        parts.append((SYS if turn.speaker == "system" else USR) + " " + " ".join(toks))
    return " ".join(parts)


def parse_history(text: str) -> list[DialogueTurn]:
    turns: list[DialogueTurn] = []
    speaker = None
    words: list[str] = []
    for tok in text.split():
        if tok in (SYS, USR):
            if speaker is not None:
                turns.append(DialogueTurn(speaker, " ".join(words)))
            speaker = "system" if tok == SYS else "user"
            words = []
        elif tok in (BS, DB):
            break
        else:
            if speaker is None:
                raise FormatError("history must start with a role marker")
            words.append(tok)
    if speaker is not None:
        turns.append(DialogueTurn(speaker, " ".join(words)))
    return turns


# --- belief states -----------------------------------------------------------


def linearize_belief(b: BeliefState) -> str:
    if not b.pairs:
        return BS
    return BS + " " + " ; ".join(f"{s} = {v}" for s, v in b.pairs)


def parse_belief(text: str) -> BeliefState:
    """Parse ``[bs] s = v ; ...``; never raises on malformed generated text."""
    toks = text.split()
    malformed = False
    if toks and toks[0] == BS:
        toks = toks[1:]
    else:
        malformed = True
    pairs: list[tuple[str, str]] = []
    seen: set[str] = set()
    segment: list[str] = []
    for tok in toks + [";"]:
        if tok != ";":
            segment.append(tok)
            continue
        if not segment:
            continue
        if len(segment) >= 3 and segment[1] == "=" and "=" not in segment[2:] and segment[0] not in MARKERS:
            slot, value = segment[0], " ".join(segment[2:])
            if slot in seen:
                malformed = True
            else:
                seen.add(slot)
                pairs.append((slot, value))
        else:
            malformed = True
        segment = []
    if toks and toks[-1] == ";":
        malformed = True
    return BeliefState(tuple(pairs), malformed=malformed)


# --- database ----------------------------------------------------------------


def db_query(b: BeliefState, db: ToyDatabase, domain: str | None = None) -> DBResult:
    """Exact-match lookup of every constraint in ``b``.

    The search is limited to ``domain`` (or the belief's ``domain`` pair when
    present).  The top entity is the lexicographically smallest matching
    name; the result also carries the top entity's values for the domain's
    slots that the belief leaves unconstrained.
    """
    constraints = b.as_dict()
    domain = domain or constraints.pop("domain", None)
    constraints.pop("domain", None)
    pools = [domain] if domain is not None else list(db.entities)
    matches = []
    for dom in pools:
        for ent in db.entities.get(dom, []):
            if all(ent.attributes.get(s) == v for s, v in constraints.items()):
                matches.append(ent)
    if not matches:
        return DBResult(0)
    top = min(matches, key=lambda e: e.name)
    extra = tuple(
        (s, top.attributes[s]) for s in db.domain_slots(top.domain) if s not in constraints and s in top.attributes
    )
    return DBResult(len(matches), top.name, extra, tuple(sorted(e.name for e in matches)))


def serialize_db_result(r: DBResult) -> str:
    parts = [f"count = {r.match_count}"]
    if r.top_entity is not None:
        parts.append(f"name = {r.top_entity}")
        parts.extend(f"{s} = {v}" for s, v in r.attributes)
    return DB + " " + " ; ".join(parts)


def nlg_input(turns: Sequence[DialogueTurn], r: DBResult) -> str:
    return serialize_history(turns) + " " + serialize_db_result(r)


# --- examples ----------------------------------------------------------------


def make_examples(dialogue: Dialogue, task: str, db: ToyDatabase | None = None) -> list[DialogueExample]:
    """One example per user turn; NLG inputs use the gold belief's DB result."""
    task = task.lower()
    if task not in TASKS:
        raise CorpusError(f"unknown task {task!r}")
    if task == "nlg" and db is None:
        raise CorpusError("NLG examples need the database")
    out = []
    for t, turn in enumerate(dialogue.turns):
        if not turn.intent or turn.response is None or turn.belief is None:
            raise CorpusError(f"{dialogue.dialogue_id} turn {t}: missing gold annotation")
        hist = dialogue.history(t)
        h = serialize_history(hist)
        if task == "nlu":
            x, y = h, turn.intent
        elif task == "dst":
            x, y = h, linearize_belief(turn.belief)
        else:
            x, y = nlg_input(hist, db_query(turn.belief, db)), turn.response
        out.append(
            DialogueExample(
                task, x, y, dialogue.dialogue_id, t, turn.intent, turn.belief, turn.response, turn.requested
            )
        )
    return out


# --- two-step inference --------------------------------------------------------


class TextModel(Protocol):
    def generate(self, inputs: Sequence[str]) -> list[str]: ...


@dataclass
class InferenceTrace:
    history: str
    dst_output: str
    belief: BeliefState
    db_result: DBResult
    nlg_input: str
    response: str

    @property
    def malformed(self) -> bool:
        return self.belief.malformed


def end_to_end_infer_batch(
    histories: Sequence[Sequence[DialogueTurn]], dst_model: TextModel, nlg_model: TextModel, db: ToyDatabase
) -> list[InferenceTrace]:
    """Predict beliefs, query the database with them, then generate responses."""
    texts = [serialize_history(h) for h in histories]
    dst_out = dst_model.generate(texts)
    beliefs = [parse_belief(s) for s in dst_out]
    results = [db_query(b, db) for b in beliefs]
    nlg_in = [t + " " + serialize_db_result(r) for t, r in zip(texts, results)]
    responses = nlg_model.generate(nlg_in)
    return [InferenceTrace(*row) for row in zip(texts, dst_out, beliefs, results, nlg_in, responses)]


def end_to_end_infer(
    history: Sequence[DialogueTurn], dst_model: TextModel, nlg_model: TextModel, db: ToyDatabase
) -> InferenceTrace:
    return end_to_end_infer_batch([history], dst_model, nlg_model, db)[0]
