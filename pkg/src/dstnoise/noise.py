"""Noised previous-state construction for noise-enhanced training."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .ontology import NONE, DialogueState, Ontology, active_slots
from .text import ContextInput, Vocabulary, build_context_input


@dataclass(frozen=True)
class NoiseConfig:
    p: float = 0.3
    seed: int = 0
    # let "none" be drawn as a replacement (deactivates the slot)
    allow_none: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"noise threshold must lie in [0, 1], got {self.p}")


def noise_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (epoch, instance index), whatever the batching."""
    return np.random.default_rng([seed, epoch, index])


def noise_state(
    state: Mapping[str, str],
    ontology: Ontology,
    config: NoiseConfig,
    rng: np.random.Generator,
) -> tuple[DialogueState, frozenset[str]]:
    """Replace each active slot's value with probability ``config.p``.

    A draw ``a ~ U[0, 1)`` is taken for every active slot in lexicographic
    order, whether or not the slot can be noised, so the stream consumed does
    not depend on the ontology. Replacements are uniform over the slot's other
    candidates (excluding "none" unless ``allow_none``).
    """
    noised = dict(state)
    replaced = set()
    for slot in active_slots(state):
        a = rng.random()
        current = state[slot]
        options = [
            v for v in ontology.candidates(slot)
            if v != current and (config.allow_none or v != NONE)
        ]
        if not options or a >= config.p:
            continue
        noised[slot] = options[rng.integers(len(options))]
        replaced.add(slot)
    return DialogueState(noised), frozenset(replaced)


def make_noised_pair(
    history,
    prev_state: Mapping[str, str],
    current,
    ontology: Ontology,
    vocab: Vocabulary,
    max_len: int,
    config: NoiseConfig,
    rng: np.random.Generator,
) -> tuple[ContextInput, ContextInput, frozenset[str]]:
    """Original and noised contexts sharing history and current turn."""
    original = build_context_input(history, prev_state, current, vocab, max_len)
    noised_state, replaced = noise_state(prev_state, ontology, config, rng)
    if not replaced:
        return original, original, replaced
    noised = build_context_input(history, noised_state, current, vocab, max_len)
    return original, noised, replaced
