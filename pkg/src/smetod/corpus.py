"""Seeded synthetic task-oriented dialogue corpus and toy database."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dialogue import (
    BeliefState,
    DBResult,
    Dialogue,
    Entity,
    GoldTurn,
    ToyDatabase,
    db_query,
    make_examples,
    write_examples,
)
from .errors import SpecError
from .rng import make_rng
from .vocab import Vocab

DEFAULT_DOMAINS = {
    "restaurant": ("area", "food", "pricerange"),
    "hotel": ("area", "stars", "parking"),
}
DEFAULT_VALUES = {
    "area": ("north", "south", "east", "west", "centre"),
    "food": ("thai", "italian", "chinese", "indian", "french", "korean", "spanish", "greek"),
    "pricerange": ("cheap", "moderate", "expensive"),
    "stars": ("two", "three", "four", "five"),
    "parking": ("yes", "no"),
}
DEFAULT_INTENTS = (
    "find_restaurant",
    "book_restaurant",
    "find_hotel",
    "book_hotel",
    "request_info",
    "greet",
    "thank",
    "bye",
)

NAME_PREFIXES = ("golden", "royal", "little", "happy", "blue", "red", "green", "silver", "lucky", "grand", "old", "jade")
NAME_SUFFIXES = {
    "restaurant": ("wok", "spoon", "table", "garden", "kitchen", "plate", "lantern", "bistro"),
    "hotel": ("inn", "lodge", "house", "manor", "suites", "retreat", "palace", "court"),
}
GENERIC_SUFFIXES = ("place", "spot", "corner", "hall", "yard", "point", "view", "gate")

# --- templates ---------------------------------------------------------------

SLOT_PHRASES = {
    "area": ("in the {v}", "in the {v} area", "located in the {v}"),
    "food": ("serving {v} food", "that serves {v} food", "with {v} cuisine"),
    "pricerange": ("in the {v} price range", "that is {v}", "with {v} prices"),
    "stars": ("with {v} stars", "rated {v} stars", "that has {v} stars"),
}
BOOLEAN_PHRASES = {
    "yes": ("with {s}", "that has {s}", "with free {s}"),
    "no": ("without {s}", "with no {s}", "that has no {s}"),
}
SLOT_NAMES = {
    "area": "area",
    "food": "food type",
    "pricerange": "price range",
    "stars": "star rating",
    "parking": "parking situation",
}
OPENINGS = ("hello , how can i help you ?", "welcome to the booking service . what do you need ?", "hi , what can i do for you ?")
GREETINGS = (
    "hello , i have a question about a {dom}",
    "hi , can you help me with a {dom}",
    "good morning , i am planning a {dom} visit",
)
FIRST_CONSTRAINT = {
    "find": (
        "i am looking for a {dom} {p}",
        "find me a {dom} {p}",
        "i need a {dom} {p}",
        "can you find a {dom} {p}",
        "is there a {dom} {p}",
    ),
    "book": (
        "i want to book a {dom} {p}",
        "please book a {dom} {p}",
        "i would like to reserve a {dom} {p}",
        "can you book me a {dom} {p}",
        "help me book a {dom} {p}",
    ),
}
FOLLOW_UPS = ("it should be {p}", "i prefer one {p}", "also {p} please", "i want one {p}", "preferably {p}")
UPDATES = ("actually , make it one {p} instead", "sorry , i meant one {p}", "on second thought , one {p}")
REQUESTS = ("what is its {s} ?", "can you tell me the {s} ?", "i also need the {s} .")
THANKS = ("thank you", "thanks a lot", "great , thanks")
BYES = ("goodbye", "that is all , bye", "bye for now")

INFORM_RESPONSES = (
    "i found {count} {dom}s . {name} is a good match .",
    "there are {count} options . i recommend {name} .",
    "{name} is one of {count} matching {dom}s .",
    "i have {count} results . how about {name} ?",
    "we have {count} {dom}s available . {name} fits .",
)
REQUEST_RESPONSES = (
    "{name} is one of {count} options . its {s} is {v} .",
    "the {s} of {name} is {v} . it is one of {count} matches .",
)
THANK_RESPONSES = ("you are welcome . {name} is one of {count} options .", "happy to help . {name} is one of {count} matches .")
BYE_RESPONSES = ("goodbye . enjoy {name} , one of {count} options .", "bye . remember {name} , one of {count} matches .")
NO_MATCH_RESPONSES = ("sorry , i found 0 matching {dom}s .", "there are 0 {dom}s like that , sorry .")


@dataclass(frozen=True)
class CorpusSpec:
    domains: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_DOMAINS))
    values: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_VALUES))
    intents: tuple[str, ...] = DEFAULT_INTENTS
    num_dialogues: int = 2000
    min_turns: int = 1
    max_turns: int = 4
    entities_per_domain: int = 50
    update_rate: float = 0.1
    seed: int = 7
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if not self.domains or not self.intents:
            raise SpecError("domain and intent inventories must be non-empty")
        for dom, slots in self.domains.items():
            if not slots:
                raise SpecError(f"domain {dom!r} has no slots")
            for s in slots:
                vals = self.values.get(s)
                if not vals:
                    raise SpecError(f"slot {s!r} has no value inventory")
                if len(vals) > 8:
                    raise SpecError(f"slot {s!r} has {len(vals)} values; at most 8 allowed")
                if s not in SLOT_PHRASES and set(vals) != {"yes", "no"}:
                    raise SpecError(f"no template phrase for slot {s!r}")
        needed = {"request_info", "greet", "thank", "bye"} | {f"{k}_{d}" for d in self.domains for k in ("find", "book")}
        missing = needed - set(self.intents)
        if missing:
            raise SpecError(f"intent inventory lacks {sorted(missing)}")
        if not 1 <= self.min_turns <= self.max_turns:
            raise SpecError("need 1 <= min_turns <= max_turns")
        if self.num_dialogues < 1 or self.entities_per_domain < 1:
            raise SpecError("dialogue and entity counts must be positive")
        if not 0.0 <= self.update_rate <= 1.0:
            raise SpecError("update_rate must lie in [0, 1]")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) < 0:
            raise SpecError("splits must be three non-negative fractions summing to 1")

    @property
    def slot_order(self) -> tuple[str, ...]:
        order = ["domain"]
        for slots in self.domains.values():
            order.extend(s for s in slots if s not in order)
        return tuple(order)

    def to_json(self) -> dict:
        d = asdict(self)
        d["domains"] = {k: list(v) for k, v in self.domains.items()}
        d["values"] = {k: list(v) for k, v in self.values.items()}
        return d


def _entity_names(domain: str, count: int, rng: np.random.Generator) -> list[str]:
    suffixes = NAME_SUFFIXES.get(domain, GENERIC_SUFFIXES)
    pool = [f"{a}_{b}" for a in NAME_PREFIXES for b in suffixes]
    if count > len(pool):
        raise SpecError(f"cannot name {count} unique {domain} entities; only {len(pool)} names available")
    picks = rng.choice(len(pool), size=count, replace=False)
    return sorted(pool[i] for i in picks)


def build_database(spec: CorpusSpec) -> ToyDatabase:
    """Entities whose attributes cover every (slot, value) pair at least once.

    Each value is first assigned to a distinct random entity, the remaining
    entities draw uniformly, so every single-pair query matches something.
    """
    rng = make_rng(spec.seed, "database")
    entities: dict[str, list[Entity]] = {}
    for dom, slots in spec.domains.items():
        n = spec.entities_per_domain
        widest = max(len(spec.values[s]) for s in slots)
        if n < widest:
            raise SpecError(f"{dom}: {n} entities cannot cover {widest} values of one slot")
        names = _entity_names(dom, n, rng)
        columns = {}
        for s in slots:
            vals = spec.values[s]
            col = rng.integers(0, len(vals), size=n)
            seats = rng.choice(n, size=len(vals), replace=False)
            col[seats] = np.arange(len(vals))
            columns[s] = [vals[i] for i in col]
        entities[dom] = [Entity(dom, name, {s: columns[s][i] for s in slots}) for i, name in enumerate(names)]
    return ToyDatabase(entities, spec.slot_order)


# --- dialogue generation -----------------------------------------------------


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def _phrase(slot: str, value: str, rng: np.random.Generator) -> str:
    if slot in SLOT_PHRASES:
        return _pick(rng, SLOT_PHRASES[slot]).format(v=value)
    return _pick(rng, BOOLEAN_PHRASES[value]).format(s=slot)


def _phrases(pairs: list[tuple[str, str]], rng: np.random.Generator) -> str:
    return " and ".join(_phrase(s, v, rng) for s, v in pairs)


def _respond(kind: str, dom: str, r: DBResult, rng: np.random.Generator, requested: str | None = None) -> str:
    if r.match_count == 0:
        return _pick(rng, NO_MATCH_RESPONSES).format(dom=dom)
    if kind == "request":
        value = dict(r.attributes).get(requested)
        return _pick(rng, REQUEST_RESPONSES).format(
            name=r.top_entity, count=r.match_count, s=SLOT_NAMES.get(requested, requested), v=value
        )
    table = {"thank": THANK_RESPONSES, "bye": BYE_RESPONSES}.get(kind, INFORM_RESPONSES)
    return _pick(rng, table).format(name=r.top_entity, count=r.match_count, dom=dom)


def _plan_turns(spec: CorpusSpec, n_slots: int, rng: np.random.Generator):
    """Return (greet, number of constraint turns, tail kind, update flag)."""
    total = int(rng.integers(spec.min_turns, spec.max_turns + 1))
    greet = total >= 2 and rng.random() < 0.2
    remaining = total - greet
    tail = None
    if remaining >= 2:
        tail = _pick(rng, (None, None, "request", "thank", "bye"))
    n_constraint = remaining - (tail is not None)
    update = n_constraint >= 2 and rng.random() < spec.update_rate
    if n_constraint - update > n_slots:
        update = True
        n_constraint = min(n_constraint, n_slots + 1)
    return greet, n_constraint, tail, update


def _generate_dialogue(spec: CorpusSpec, db: ToyDatabase, index: int) -> Dialogue:
    rng = make_rng(spec.seed, 1_000_000 + index)
    domains = list(spec.domains)
    dom = _pick(rng, domains)
    action = _pick(rng, ("find", "book"))
    goal = f"{action}_{dom}"
    slots = list(spec.domains[dom])
    target = db.entities[dom][int(rng.integers(len(db.entities[dom])))]
    greet, n_constraint, tail, update = _plan_turns(spec, len(slots), rng)

    new_turns = n_constraint - update
    order = [slots[i] for i in rng.permutation(len(slots))]
    most = len(slots) - 1 if tail == "request" and new_turns < len(slots) else len(slots)
    k = int(rng.integers(new_turns, most + 1))
    revealed = order[:k]
    cuts = sorted(rng.choice(np.arange(1, k), size=new_turns - 1, replace=False).tolist()) if new_turns > 1 else []
    groups = [revealed[a:b] for a, b in zip([0] + cuts, cuts + [k])]

    wrong: tuple[str, str] | None = None
    update_at = None
    if update:
        update_at = int(rng.integers(1, n_constraint))
        first_slot = groups[0][0]
        candidates = [v for v in spec.values[first_slot] if v != target.attributes[first_slot]]
        for idx in rng.permutation(len(candidates)):
            trial = {"domain": dom, first_slot: candidates[idx]}
            ok = True
            pos = 0
            for t in range(n_constraint):
                if t == update_at:
                    break
                for s in groups[pos]:
                    if s != first_slot:
                        trial[s] = target.attributes[s]
                pos += 1
                if db_query(BeliefState.from_dict(trial, spec.slot_order), db).match_count == 0:
                    ok = False
                    break
            if ok:
                wrong = (first_slot, candidates[idx])
                break
        if wrong is None:
            update_at = None
            if len(groups) < n_constraint:
                n_constraint = len(groups)

    turns: list[GoldTurn] = []
    state: dict[str, str] = {"domain": dom}
    if greet:
        belief = BeliefState.from_dict(state, spec.slot_order)
        r = db_query(belief, db)
        turns.append(GoldTurn(_pick(rng, GREETINGS).format(dom=dom), "greet", belief, _respond("inform", dom, r, rng)))

    group_iter = iter(groups)
    for t in range(n_constraint):
        if t == update_at:
            slot = wrong[0]
            state[slot] = target.attributes[slot]
            text = _pick(rng, UPDATES).format(p=_phrase(slot, state[slot], rng))
        else:
            group = next(group_iter)
            pairs = []
            for s in group:
                v = wrong[1] if wrong is not None and s == wrong[0] else target.attributes[s]
                state[s] = v
                pairs.append((s, v))
            p = _phrases(pairs, rng)
            if t == 0:
                text = _pick(rng, FIRST_CONSTRAINT[action]).format(dom=dom, p=p)
            else:
                text = _pick(rng, FOLLOW_UPS).format(p=p)
        belief = BeliefState.from_dict(state, spec.slot_order)
        r = db_query(belief, db)
        turns.append(GoldTurn(text, goal, belief, _respond("inform", dom, r, rng)))

    if tail == "request":
        open_slots = [s for s in slots if s not in state]
        if not open_slots:
            tail = "thank"
        else:
            slot = _pick(rng, open_slots)
            belief = BeliefState.from_dict(state, spec.slot_order)
            r = db_query(belief, db)
            text = _pick(rng, REQUESTS).format(s=SLOT_NAMES.get(slot, slot))
            turns.append(GoldTurn(text, "request_info", belief, _respond("request", dom, r, rng, slot), (slot,)))
    if tail in ("thank", "bye"):
        belief = BeliefState.from_dict(state, spec.slot_order)
        r = db_query(belief, db)
        text = _pick(rng, THANKS if tail == "thank" else BYES)
        turns.append(GoldTurn(text, tail, belief, _respond(tail, dom, r, rng)))

    return Dialogue(f"d{index:05d}", dom, _pick(rng, OPENINGS), turns)


@dataclass
class Corpus:
    spec: CorpusSpec
    database: ToyDatabase
    dialogues: list[Dialogue]

    def split(self, name: str) -> list[Dialogue]:
        return [d for d in self.dialogues if d.split == name]

    def examples(self, task: str, split: str | None = None):
        dialogues = self.dialogues if split is None else self.split(split)
        return [ex for d in dialogues for ex in make_examples(d, task, self.database)]

    def vocab(self) -> Vocab:
        texts = []
        for d in self.dialogues:
            for task in ("nlu", "dst", "nlg"):
                for ex in make_examples(d, task, self.database):
                    texts.extend((ex.x, ex.y))
        return Vocab.build(texts)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Generate dialogues with gold annotations and an 80/10/10-style split."""
    db = build_database(spec)
    dialogues = [_generate_dialogue(spec, db, i) for i in range(spec.num_dialogues)]
    perm = make_rng(spec.seed, "split").permutation(len(dialogues))
    n_train = int(round(spec.splits[0] * len(dialogues)))
    n_dev = int(round(spec.splits[1] * len(dialogues)))
    for rank, i in enumerate(perm):
        dialogues[i].split = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
    return Corpus(spec, db, dialogues)


SPLITS = ("train", "dev", "test")


def write_corpus(corpus: Corpus, out_dir) -> dict[str, Path]:
    """Write dialogues, per-split example files, the database and the vocabulary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"dialogues": out / "dialogues.jsonl", "database": out / "database.jsonl", "vocab": out / "vocab.txt"}
    with open(paths["dialogues"], "w", encoding="utf-8") as fh:
        for d in corpus.dialogues:
            fh.write(json.dumps(d.to_json()) + "\n")
    corpus.database.write(paths["database"])
    corpus.vocab().save(paths["vocab"])
    for split in SPLITS:
        dialogues = corpus.split(split)
        paths[split] = out / f"{split}.jsonl"
        write_examples(
            paths[split],
            (ex for task in ("nlu", "dst", "nlg") for d in dialogues for ex in make_examples(d, task, corpus.database)),
        )
    (out / "corpus_spec.json").write_text(json.dumps(corpus.spec.to_json(), indent=2) + "\n", encoding="utf-8")
    paths["spec"] = out / "corpus_spec.json"
    return paths


def read_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    raw = json.loads((root / "corpus_spec.json").read_text(encoding="utf-8"))
    spec = CorpusSpec(
        domains={k: tuple(v) for k, v in raw["domains"].items()},
        values={k: tuple(v) for k, v in raw["values"].items()},
        intents=tuple(raw["intents"]),
        num_dialogues=raw["num_dialogues"],
        min_turns=raw["min_turns"],
        max_turns=raw["max_turns"],
        entities_per_domain=raw["entities_per_domain"],
        update_rate=raw["update_rate"],
        seed=raw["seed"],
        splits=tuple(raw["splits"]),
    )
    db = ToyDatabase.read(root / "database.jsonl", spec.slot_order)
    dialogues = []
    with open(root / "dialogues.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = Dialogue.from_json(json.loads(line))
                for turn in d.turns:
                    if turn.intent not in spec.intents:
                        raise SpecError(f"{d.dialogue_id}: intent {turn.intent!r} not in the inventory")
                dialogues.append(d)
    return Corpus(spec, db, dialogues)
