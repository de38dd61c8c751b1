"""Multi-turn rollout: each turn's context carries the previously predicted state."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import torch

from .corpus import Dialogue
from .model import DSTModel, predict_state
from .ontology import DialogueState, Ontology
from .text import ContextInput, build_context_input


@dataclass(frozen=True)
class PredictionRecord:
    dialogue_id: str
    turn_index: int
    predicted_state: DialogueState
    gold_state: DialogueState
    error: str | None = None

    def to_json(self) -> dict:
        out = {
            "dialogue_id": self.dialogue_id,
            "turn": self.turn_index,
            "pred": self.predicted_state.sparse(),
            "gold": self.gold_state.sparse(),
        }
        if self.error is not None:
            out["error"] = self.error
        return out

    @classmethod
    def from_json(cls, raw: dict, ontology: Ontology) -> PredictionRecord:
        return cls(
            raw["dialogue_id"],
            int(raw["turn"]),
            ontology.state(raw["pred"]),
            ontology.state(raw["gold"]),
            raw.get("error"),
        )


def turn_context(model: DSTModel, dialogue: Dialogue, t: int, prev_state) -> ContextInput:
    """Context for 0-based turn ``t`` given a previous state."""
    history = [(u.system_utterance, u.user_utterance) for u in dialogue.turns[:t]]
    turn = dialogue.turns[t]
    return build_context_input(
        history,
        prev_state if model.config.use_state else None,
        (turn.system_utterance, turn.user_utterance),
        model.vocab,
        model.config.encoder.max_len,
    )


@torch.no_grad()
def rollout_dialogue(model: DSTModel, dialogue: Dialogue, oracle_prev_state: bool = False) -> list[PredictionRecord]:
    was_training = model.training
    model.eval()
    ontology = model.ontology
    prev = ontology.empty_state()
    records = []
    try:
        for t, turn in enumerate(dialogue.turns):
            error = None
            try:
                pred = predict_state(model, turn_context(model, dialogue, t, prev))
            except ValueError as exc:
                pred, error = ontology.empty_state(), f"{type(exc).__name__}: {exc}"
            records.append(PredictionRecord(dialogue.id, t + 1, pred, turn.gold_state, error))
            prev = turn.gold_state if oracle_prev_state else pred
    finally:
        model.train(was_training)
    return records


def rollout_corpus(
    model: DSTModel,
    corpus: list[Dialogue],
    oracle_prev_state: bool = False,
    workers: int = 1,
) -> list[PredictionRecord]:
    """Records in (dialogue, turn) order. Dialogues are independent."""
    if workers > 1:
        model.eval()
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda d: rollout_dialogue(model, d, oracle_prev_state), corpus))
    else:
        chunks = [rollout_dialogue(model, d, oracle_prev_state) for d in corpus]
    return [r for chunk in chunks for r in chunk]


def write_predictions(records: list[PredictionRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_json()) + "\n")


def read_predictions(path: str | Path, ontology: Ontology) -> list[PredictionRecord]:
    with open(path) as f:
        return [PredictionRecord.from_json(json.loads(line), ontology) for line in f if line.strip()]
