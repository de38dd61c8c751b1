"""Accuracy metrics, state-momentum analysis, noise probing and attention export."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import Dialogue
from .inference import PredictionRecord, turn_context
from .model import DSTModel
from .noise import NoiseConfig, noise_state
from .ontology import NONE
from .text import ContextInput


@dataclass(frozen=True)
class MetricsReport:
    joint_goal_accuracy: float
    slot_goal_accuracy: float
    per_turn_accuracy: dict[int, float]
    turns: int
    slot_pairs: int


@dataclass(frozen=True)
class MomentumReport:
    wrong_pairs_total: int
    wrong_pairs_carried: int
    momentum_proportion: float
    gold_pairs_total: int
    gold_pairs_carried: int
    gold_carryover_ratio: float


def _require(records):
    if not records:
        raise ValueError("no prediction records")


def joint_goal_accuracy(records: list[PredictionRecord]) -> float:
    _require(records)
    return sum(r.predicted_state == r.gold_state for r in records) / len(records)


def slot_goal_accuracy(records: list[PredictionRecord]) -> float:
    _require(records)
    correct = total = 0
    for r in records:
        for slot, gold in r.gold_state.items():
            correct += r.predicted_state[slot] == gold
            total += 1
    return correct / total


def turn_level_accuracy(records: list[PredictionRecord]) -> dict[int, float]:
    hits: dict[int, list[bool]] = defaultdict(list)
    for r in records:
        hits[r.turn_index].append(r.predicted_state == r.gold_state)
    return {t: sum(v) / len(v) for t, v in sorted(hits.items())}


def metrics_report(records: list[PredictionRecord]) -> MetricsReport:
    return MetricsReport(
        joint_goal_accuracy(records),
        slot_goal_accuracy(records),
        turn_level_accuracy(records),
        len(records),
        sum(len(r.gold_state) for r in records),
    )


def momentum_proportion(carried: int, total: int) -> float:
    return carried / total if total else 0.0


def momentum_analysis(records: list[PredictionRecord]) -> MomentumReport:
    """Count wrong predicted pairs (from turn 2 on) that repeat the previous prediction."""
    by_dialogue: dict[str, dict[int, PredictionRecord]] = defaultdict(dict)
    for r in records:
        by_dialogue[r.dialogue_id][r.turn_index] = r
    wrong = carried = gold_total = gold_carried = 0
    for turns in by_dialogue.values():
        for t, rec in turns.items():
            prev = turns.get(t - 1)
            if t < 2 or prev is None:
                continue
            for slot, value in rec.predicted_state.items():
                if value != NONE and value != rec.gold_state[slot]:
                    wrong += 1
                    carried += prev.predicted_state[slot] == value
            for slot, value in rec.gold_state.items():
                if value != NONE:
                    gold_total += 1
                    gold_carried += prev.gold_state[slot] == value
    return MomentumReport(
        wrong, carried, momentum_proportion(carried, wrong),
        gold_total, gold_carried, momentum_proportion(gold_carried, gold_total),
    )


def change_turn_accuracy(records: list[PredictionRecord], corpus: list[Dialogue]) -> float:
    """Joint accuracy over turns whose event log contains a value change."""
    dialogues = {d.id: d for d in corpus}
    picked = [r for r in records if dialogues[r.dialogue_id].has_change(r.turn_index)]
    return joint_goal_accuracy(picked)


def evaluation_report(records: list[PredictionRecord]) -> dict:
    m = metrics_report(records)
    return {
        "joint": m.joint_goal_accuracy,
        "slot": m.slot_goal_accuracy,
        "per_turn": {str(t): a for t, a in m.per_turn_accuracy.items()},
        "momentum": asdict(momentum_analysis(records)),
        "counts": {"turns": m.turns, "slot_pairs": m.slot_pairs},
    }


def write_per_turn_csv(per_turn: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["turn", "joint_accuracy"])
        for t, acc in sorted(per_turn.items(), key=lambda kv: int(kv[0])):
            w.writerow([t, acc])


# --- noise probing -------------------------------------------------------------


@torch.no_grad()
def noise_probe(model: DSTModel, corpus: list[Dialogue], ratios, seed: int = 0) -> list[dict]:
    """Oracle previous state with per-slot noise at each ratio.

    Returns one row per ratio: joint accuracy of predictions made from the
    noised context, and the mean over turns of the L2 distance between the
    mean-pooled token representations of the original and noised contexts.
    The same random stream is used for a given turn at every ratio.
    """
    model.eval()
    ontology = model.ontology
    rows = []
    for ratio in ratios:
        config = NoiseConfig(float(ratio), seed)
        hits, dists = [], []
        for d_idx, dialogue in enumerate(corpus):
            prev = ontology.empty_state()
            for t, turn in enumerate(dialogue.turns):
                rng = np.random.default_rng([seed, d_idx, t])
                noised, replaced = noise_state(prev, ontology, config, rng)
                ctx = turn_context(model, dialogue, t, prev)
                logits, H, _ = model([ctx])
                if replaced and model.config.use_state:
                    logits, H_noised, _ = model([turn_context(model, dialogue, t, noised)])
                    dist = float(torch.linalg.vector_norm(H[0].mean(0) - H_noised[0].mean(0)))
                else:
                    dist = 0.0
                hits.append(model.decode(logits)[0] == turn.gold_state)
                dists.append(dist)
                prev = turn.gold_state
        rows.append({
            "ratio": float(ratio),
            "joint_accuracy": sum(hits) / len(hits),
            "mean_l2_distance": float(np.mean(dists)),
        })
    return rows


def write_probe_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["ratio", "joint_accuracy", "mean_l2_distance"])
        w.writeheader()
        w.writerows(rows)


# --- attention export -----------------------------------------------------------


@torch.no_grad()
def attention_scores(model: DSTModel, context: ContextInput, slot: str) -> torch.Tensor:
    """w @ A: slot-context weights (mean over heads) times encoder self-attention
    averaged jointly over every (layer, head) matrix."""
    model.eval()
    j = model.ontology.slots.index(slot)
    slot_reps, _ = model.label_reps()
    H, mask, layers = model.encode([context], return_attention=True)
    _, weights = model.slot_features(H, mask, slot_reps)
    w = weights[0, :, j].mean(0)
    A = torch.cat([a[0] for a in layers]).mean(0)
    return w @ A


def attention_export(model: DSTModel, context: ContextInput, slot: str) -> dict:
    scores = attention_scores(model, context, slot)
    return {"tokens": list(context.tokens), "scores": scores.tolist(), "slot": slot}


def save_json(obj, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)
