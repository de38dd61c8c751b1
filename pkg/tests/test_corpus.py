import json

import pytest
from hypothesis import given, settings, strategies as st

from dstnoise.corpus import (
    CorpusError,
    SyntheticConfig,
    corpus_to_json,
    events_to_json,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    split_corpus,
)
from dstnoise.ontology import NONE, validate_state


def _corpus_file(tmp_path, dialogues):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dialogues": dialogues}))
    return path


def _turns(n, state=None):
    return [{"system": "hi", "user": f"turn {i}", "state": state or {}} for i in range(n)]


def test_empty_corpus(tmp_path, ontology):
    assert load_corpus(_corpus_file(tmp_path, []), ontology) == []


def test_two_dialogues(tmp_path, ontology):
    corpus = load_corpus(
        _corpus_file(tmp_path, [{"id": "a", "turns": _turns(3)}, {"id": "b", "turns": _turns(3)}]), ontology
    )
    assert [d.id for d in corpus] == ["a", "b"]
    assert [len(d.turns) for d in corpus] == [3, 3]
    assert corpus[0].turns[0].gold_state == ontology.empty_state()


def test_bad_value_names_dialogue_and_turn(tmp_path, ontology):
    turns = _turns(1) + [{"system": "x", "user": "y", "state": {"train-day": "tuesday"}}]
    with pytest.raises(CorpusError, match="dialogue d1 turn 2"):
        load_corpus(_corpus_file(tmp_path, [{"id": "d1", "turns": turns}]), ontology)


def test_missing_field(tmp_path, ontology):
    with pytest.raises(CorpusError, match="dialogue d1 turn 1"):
        load_corpus(_corpus_file(tmp_path, [{"id": "d1", "turns": [{"user": "u", "state": {}}]}]), ontology)


def test_save_load_roundtrip(tmp_path, small_synthetic):
    ont, corpus = small_synthetic
    save_corpus(corpus, tmp_path / "c.json", tmp_path / "e.json")
    again = load_corpus(tmp_path / "c.json", ont, tmp_path / "e.json")
    assert again == corpus


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticConfig(n_dialogues=30, seed=7)
        a = json.dumps([corpus_to_json(generate_synthetic_corpus(cfg)[1])])
        b = json.dumps([corpus_to_json(generate_synthetic_corpus(cfg)[1])])
        assert a == b

    def test_no_change_means_monotone(self):
        ont, corpus = generate_synthetic_corpus(SyntheticConfig(n_dialogues=50, p_change=0.0, seed=1))
        for d in corpus:
            prev = ont.empty_state()
            for turn in d.turns:
                for slot, value in prev.items():
                    if value != NONE:
                        assert turn.gold_state[slot] == value
                prev = turn.gold_state
            assert not any(d.has_change(t) for t in range(1, len(d.turns) + 1))

    def test_change_rate(self):
        # count change events over the first 1000 turns that had a settable slot
        ont, corpus = generate_synthetic_corpus(SyntheticConfig(n_dialogues=600, p_change=0.5, seed=11))
        eligible = changes = 0
        for d in corpus:
            prev = ont.empty_state()
            for turn, events in zip(d.turns, d.events):
                if eligible == 1000:
                    break
                if any(v != NONE for v in prev.values()):
                    eligible += 1
                    changes += any(e.kind == "change" for e in events)
                prev = turn.gold_state
        assert eligible == 1000
        assert 0.45 <= changes / eligible <= 0.55

    def test_default_shape(self):
        ont, corpus = generate_synthetic_corpus(SyntheticConfig())
        assert len(corpus) == 400 and len(ont) == 5
        assert all(len(ont.candidates(s)) == 7 for s in ont.slots)
        assert all(3 <= len(d.turns) <= 6 for d in corpus)

    def test_events_json(self, small_synthetic):
        _, corpus = small_synthetic
        ev = events_to_json(corpus)
        assert set(ev) == {d.id for d in corpus}
        assert all(len(ev[d.id]) == len(d.turns) for d in corpus)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 1), st.floats(0, 1))
    def test_states_valid_and_diffs_match_events(self, seed, p_new, p_change):
        cfg = SyntheticConfig(n_dialogues=5, n_slots=4, values_per_slot=3, p_new_slot=p_new, p_change=p_change, seed=seed)
        ont, corpus = generate_synthetic_corpus(cfg)
        for d in corpus:
            prev = ont.empty_state()
            for turn, events in zip(d.turns, d.events):
                assert validate_state(turn.gold_state, ont) == []
                changed = {s for s in ont.slots if turn.gold_state[s] != prev[s]}
                assert changed == {e.slot for e in events}
                for e in events:
                    assert e.previous == prev[e.slot] and e.value == turn.gold_state[e.slot]
                    assert e.value not in (NONE, e.previous)
                prev = turn.gold_state

    def test_utterance_mentions_event(self, small_synthetic):
        _, corpus = small_synthetic
        for d in corpus:
            for turn, events in zip(d.turns, d.events):
                for e in events:
                    assert e.value in turn.user_utterance
                    assert e.slot.replace("-", " ") in turn.user_utterance


class TestSplit:
    def test_all_train(self, small_synthetic):
        _, corpus = small_synthetic
        train, valid, test = split_corpus(corpus, (1, 0, 0))
        assert len(train) == len(corpus) and valid == [] and test == []

    def test_sizes_8_1_1(self, small_synthetic):
        _, corpus = small_synthetic
        parts = split_corpus(corpus[:10], (0.8, 0.1, 0.1), seed=4)
        assert [len(p) for p in parts] == [8, 1, 1]

    def test_remainder_distribution(self, small_synthetic):
        _, corpus = small_synthetic
        # 11 * (0.5, 0.25, 0.25) = 5.5, 2.75, 2.75 -> floors 5, 2, 2; remainders .5, .75, .75
        parts = split_corpus(corpus[:11], (0.5, 0.25, 0.25))
        assert [len(p) for p in parts] == [5, 3, 3]

    def test_deterministic_partition(self, small_synthetic):
        _, corpus = small_synthetic
        a = split_corpus(corpus, (0.5, 0.25, 0.25), seed=9)
        b = split_corpus(corpus, (0.5, 0.25, 0.25), seed=9)
        assert a == b
        ids = [d.id for part in a for d in part]
        assert sorted(ids) == sorted(d.id for d in corpus)
        assert len(set(ids)) == len(ids)

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (1.2, -0.2, 0), (1, 0)])
    def test_invalid_fractions(self, small_synthetic, fractions):
        with pytest.raises(ValueError):
            split_corpus(small_synthetic[1], fractions)
