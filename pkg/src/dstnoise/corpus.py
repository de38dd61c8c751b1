"""Dialogue data model, corpus I/O, splitting and the synthetic generator."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ontology import NONE, DialogueState, Ontology, OntologyError


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Turn:
    system_utterance: str
    user_utterance: str
    gold_state: DialogueState


@dataclass(frozen=True)
class Event:
    """A state change made by one turn: ``kind`` is "introduce" or "change"."""

    kind: str
    slot: str
    value: str
    previous: str = NONE

    def to_json(self) -> dict:
        return {"kind": self.kind, "slot": self.slot, "value": self.value, "previous": self.previous}


@dataclass(frozen=True)
class Dialogue:
    id: str
    turns: tuple[Turn, ...]
    # per-turn event lists; only synthetic dialogues carry them
    events: tuple[tuple[Event, ...], ...] | None = None

    def __post_init__(self):
        if not self.turns:
            raise CorpusError(f"dialogue {self.id} has no turns")

    def has_change(self, turn_index: int) -> bool:
        """True if 1-based ``turn_index`` rewrites a previously set slot."""
        if self.events is None:
            return False
        return any(e.kind == "change" for e in self.events[turn_index - 1])


def load_corpus(path: str | Path, ontology: Ontology, events_path: str | Path | None = None) -> list[Dialogue]:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusError(f"cannot load corpus from {path}: {exc}") from exc
    events = None
    if events_path is not None:
        with open(events_path) as f:
            events = json.load(f)
    return corpus_from_json(raw, ontology, events)


def corpus_from_json(raw: dict, ontology: Ontology, events: dict | None = None) -> list[Dialogue]:
    if not isinstance(raw, dict) or not isinstance(raw.get("dialogues"), list):
        raise CorpusError("corpus must be an object with a 'dialogues' list")
    dialogues = []
    for d in raw["dialogues"]:
        did = str(d.get("id", "?"))
        if not isinstance(d.get("turns"), list) or not d["turns"]:
            raise CorpusError(f"dialogue {did}: missing or empty 'turns'")
        turns = []
        for t, turn in enumerate(d["turns"], start=1):
            try:
                state = ontology.state(turn.get("state", {}))
                turns.append(Turn(str(turn["system"]), str(turn["user"]), state))
            except (KeyError, TypeError, AttributeError, OntologyError) as exc:
                raise CorpusError(f"dialogue {did} turn {t}: {exc}") from exc
        dial_events = None
        if events is not None and did in events:
            dial_events = tuple(
                tuple(Event(**e) for e in per_turn) for per_turn in events[did]
            )
        dialogues.append(Dialogue(did, tuple(turns), dial_events))
    return dialogues


def corpus_to_json(corpus: list[Dialogue]) -> dict:
    return {
        "dialogues": [
            {
                "id": d.id,
                "turns": [
                    {"system": t.system_utterance, "user": t.user_utterance, "state": t.gold_state.sparse()}
                    for t in d.turns
                ],
            }
            for d in corpus
        ]
    }


def events_to_json(corpus: list[Dialogue]) -> dict:
    return {
        d.id: [[e.to_json() for e in per_turn] for per_turn in d.events]
        for d in corpus
        if d.events is not None
    }


def save_corpus(corpus: list[Dialogue], path: str | Path, events_path: str | Path | None = None) -> None:
    with open(path, "w") as f:
        json.dump(corpus_to_json(corpus), f, indent=1)
    if events_path is not None:
        with open(events_path, "w") as f:
            json.dump(events_to_json(corpus), f, indent=1)


def split_corpus(corpus: list[Dialogue], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle and partition into (train, validation, test).

    Sizes are floor(n * f) per part; leftover dialogues go one at a time to the
    parts with the largest fractional remainders (ties: earlier part first).
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(corpus)
    exact = [n * f for f in fractions]
    sizes = [int(np.floor(x + 1e-9)) for x in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for size in sizes:
        parts.append([corpus[i] for i in sorted(perm[start:start + size])])
        start += size
    return tuple(parts)


# --- synthetic corpus -------------------------------------------------------

# (slot name, value pool); pools are disjoint so a value word identifies its slot
_SLOT_POOL = [
    ("hotel-area", ["north", "south", "east", "west", "centre", "riverside", "harbour", "uptown"]),
    ("hotel-stars", ["one", "two", "three", "four", "five", "six", "seven", "eight"]),
    ("restaurant-food", ["italian", "chinese", "indian", "french", "thai", "korean", "greek", "mexican"]),
    ("taxi-destination", ["airport", "museum", "station", "college", "cinema", "hospital", "library", "stadium"]),
    ("train-day", ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "weekday"]),
    ("attraction-type", ["park", "theatre", "gallery", "church", "pool", "zoo", "castle", "market"]),
    ("hotel-parking", ["free", "paid", "street", "garage", "valet", "covered", "private", "public"]),
    ("train-departure", ["cambridge", "london", "ely", "norwich", "leicester", "stevenage", "bishops", "peterborough"]),
]

_SYSTEM_PROMPTS = [
    "how can i help you ?",
    "what else can i do for you ?",
    "is there anything else you need ?",
    "sure , let me check that for you .",
    "okay , noted .",
    "do you have any other preferences ?",
]

_FILLERS = [
    "thanks , that is all for now .",
    "that sounds fine .",
    "ok , thank you .",
    "great .",
]


@dataclass(frozen=True)
class SyntheticConfig:
    n_dialogues: int = 400
    n_slots: int = 5
    values_per_slot: int = 6
    min_turns: int = 3
    max_turns: int = 6
    p_new_slot: float = 0.7
    p_change: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.p_new_slot <= 1 and 0 <= self.p_change <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if not (1 <= self.min_turns <= self.max_turns):
            raise ValueError("need max_turns >= min_turns >= 1")
        if self.n_slots < 1 or self.values_per_slot < 2 or self.n_dialogues < 0:
            raise ValueError("need n_slots >= 1, values_per_slot >= 2, n_dialogues >= 0")


def _synthetic_ontology(n_slots: int, values_per_slot: int) -> Ontology:
    slots = {}
    for j in range(n_slots):
        name, pool = _SLOT_POOL[j % len(_SLOT_POOL)]
        if j >= len(_SLOT_POOL):
            name = f"{name}{j // len(_SLOT_POOL)}"
            pool = [f"{v}{j // len(_SLOT_POOL)}" for v in pool]
        if values_per_slot > len(pool):
            pool = pool + [f"{name.split('-')[1]}{k}" for k in range(values_per_slot - len(pool))]
        slots[name] = pool[:values_per_slot]
    return Ontology(slots)


def _verbalize(slot: str) -> str:
    return slot.replace("-", " ")


def generate_synthetic_corpus(config: SyntheticConfig) -> tuple[Ontology, list[Dialogue]]:
    """Templated dialogues in which users introduce slots and later change them.

    Each turn independently (a) with probability ``p_change`` rewrites one
    already-set slot to a different value, and (b) with probability
    ``p_new_slot`` introduces one unset slot. Every event is verbalised in
    the user utterance.
    """
    ontology = _synthetic_ontology(config.n_slots, config.values_per_slot)
    rng = np.random.default_rng(config.seed)
    corpus = []
    for n in range(config.n_dialogues):
        n_turns = int(rng.integers(config.min_turns, config.max_turns + 1))
        state = dict(ontology.empty_state())
        turns, events = [], []
        for _ in range(n_turns):
            set_slots = [s for s in ontology.slots if state[s] != NONE]
            unset_slots = [s for s in ontology.slots if state[s] == NONE]
            turn_events, phrases = [], []
            if set_slots and rng.random() < config.p_change:
                slot = set_slots[rng.integers(len(set_slots))]
                options = [v for v in ontology.candidates(slot) if v not in (NONE, state[slot])]
                value = options[rng.integers(len(options))]
                turn_events.append(Event("change", slot, value, state[slot]))
                phrases.append(f"actually change the {_verbalize(slot)} to {value} .")
            if unset_slots and rng.random() < config.p_new_slot:
                slot = unset_slots[rng.integers(len(unset_slots))]
                options = [v for v in ontology.candidates(slot) if v != NONE]
                value = options[rng.integers(len(options))]
                turn_events.append(Event("introduce", slot, value))
                phrases.append(f"i want the {_verbalize(slot)} to be {value} .")
            if not phrases:
                phrases.append(_FILLERS[rng.integers(len(_FILLERS))])
            for e in turn_events:
                state[e.slot] = e.value
            system = _SYSTEM_PROMPTS[rng.integers(len(_SYSTEM_PROMPTS))]
            turns.append(Turn(system, " ".join(phrases), DialogueState(state)))
            events.append(tuple(turn_events))
        corpus.append(Dialogue(f"syn{n:05d}", tuple(turns), tuple(events)))
    return ontology, corpus
