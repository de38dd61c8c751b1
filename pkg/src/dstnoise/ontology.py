"""Slot/value ontology and the dialogue-state data model."""

from __future__ import annotations

import json
from collections.abc import Iterator, Mapping
from pathlib import Path

NONE = "none"


class OntologyError(ValueError):
    pass


class Ontology:
    """Ordered catalogue of slots and their candidate values.

    Slots are kept in lexicographic order; values keep file order, with
    ``"none"`` appended when missing.
    """

    def __init__(self, slots: Mapping[str, list[str]]):
        values: dict[str, tuple[str, ...]] = {}
        for slot in sorted(slots):
            vals = list(slots[slot])
            if not vals:
                raise OntologyError(f"slot {slot!r} has an empty value list")
            if len(set(vals)) != len(vals):
                raise OntologyError(f"slot {slot!r} has duplicate values")
            if NONE not in vals:
                vals.append(NONE)
            values[slot] = tuple(vals)
        self._values = values
        self.slots: tuple[str, ...] = tuple(values)
        self._index = {
            slot: {v: i for i, v in enumerate(vals)} for slot, vals in values.items()
        }

    @property
    def values(self) -> dict[str, tuple[str, ...]]:
        return dict(self._values)

    def candidates(self, slot: str) -> tuple[str, ...]:
        return self._values[slot]

    def value_index(self, slot: str, value: str) -> int:
        return self._index[slot][value]

    def __len__(self) -> int:
        return len(self.slots)

    def __contains__(self, slot: object) -> bool:
        return slot in self._values

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Ontology) and self._values == other._values

    def __repr__(self) -> str:
        return f"Ontology(J={len(self.slots)})"

    def empty_state(self) -> DialogueState:
        return DialogueState({s: NONE for s in self.slots})

    def state(self, sparse: Mapping[str, str] | None = None) -> DialogueState:
        """Totalise a sparse ``slot -> value`` map (absent means none)."""
        sparse = dict(sparse or {})
        unknown = [s for s in sparse if s not in self._values]
        if unknown:
            raise OntologyError(f"unknown slot(s): {', '.join(sorted(unknown))}")
        state = DialogueState({s: sparse.get(s, NONE) for s in self.slots})
        report = validate_state(state, self)
        if report:
            raise OntologyError("; ".join(report))
        return state

    def to_json(self) -> dict:
        return {"slots": {s: list(v) for s, v in self._values.items()}}


class DialogueState(Mapping[str, str]):
    """Immutable total map from slot to value; inactive slots hold ``"none"``."""

    __slots__ = ("_data", "_hash")

    def __init__(self, assignments: Mapping[str, str]):
        self._data = dict(sorted(assignments.items()))
        self._hash = None

    def __getitem__(self, slot: str) -> str:
        return self._data[slot]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(tuple(self._data.items()))
        return self._hash

    def __eq__(self, other: object) -> bool:
        if isinstance(other, DialogueState):
            return self._data == other._data
        if isinstance(other, Mapping):
            return self._data == dict(other)
        return NotImplemented

    def __repr__(self) -> str:
        return f"DialogueState({self.sparse()!r})"

    def replace(self, **changes: str) -> DialogueState:
        data = dict(self._data)
        data.update(changes)
        return DialogueState(data)

    def updated(self, changes: Mapping[str, str]) -> DialogueState:
        data = dict(self._data)
        data.update(changes)
        return DialogueState(data)

    def sparse(self) -> dict[str, str]:
        """On-disk form: active slots only."""
        return {s: v for s, v in self._data.items() if v != NONE}


def active_slots(state: Mapping[str, str]) -> list[str]:
    return sorted(s for s, v in state.items() if v != NONE)


def validate_state(state: Mapping[str, str], ontology: Ontology) -> list[str]:
    """Return a list of violations; empty means the state is valid."""
    problems = []
    for slot, value in state.items():
        if slot not in ontology:
            problems.append(f"unknown slot {slot!r}")
        elif value not in ontology.candidates(slot):
            problems.append(f"slot {slot!r}: value {value!r} not in ontology")
    for slot in ontology.slots:
        if slot not in state:
            problems.append(f"slot {slot!r}: slot absent")
    return problems


def load_ontology(path: str | Path) -> Ontology:
    try:
        with open(path) as f:
            raw = json.load(f, object_pairs_hook=_reject_duplicate_keys)
    except (OSError, json.JSONDecodeError) as exc:
        raise OntologyError(f"cannot load ontology from {path}: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("slots"), dict):
        raise OntologyError(f"{path}: expected an object with a 'slots' mapping")
    for slot, vals in raw["slots"].items():
        if not isinstance(vals, list) or not all(isinstance(v, str) for v in vals):
            raise OntologyError(f"{path}: values of {slot!r} must be a list of strings")
    return Ontology(raw["slots"])


def save_ontology(ontology: Ontology, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(ontology.to_json(), f, indent=1)


def _reject_duplicate_keys(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise OntologyError(f"duplicate slot {key!r}")
        seen[key] = value
    return seen
