import pytest
import torch

from dstnoise.corpus import Dialogue, SyntheticConfig, Turn, generate_synthetic_corpus
from dstnoise.model import DSTModel, ModelConfig
from dstnoise.ontology import Ontology
from dstnoise.text import EncoderConfig, build_vocab


@pytest.fixture
def ontology():
    return Ontology({
        "train-day": ["monday", "sunday", "friday"],
        "hotel-area": ["north", "south"],
    })


@pytest.fixture
def dialogue(ontology):
    s = ontology.state
    return Dialogue("d1", (
        Turn("how can i help ?", "a train on sunday please .", s({"train-day": "sunday"})),
        Turn("anything else ?", "a hotel in the north .", s({"train-day": "sunday", "hotel-area": "north"})),
        Turn("okay .", "actually make it monday , not sunday .", s({"train-day": "monday", "hotel-area": "north"})),
    ))


@pytest.fixture
def small_synthetic():
    return generate_synthetic_corpus(SyntheticConfig(n_dialogues=12, n_slots=3, values_per_slot=3, seed=3))


def make_tiny_model(ontology, corpus, d=8, heads=1, layers=1, max_len=48, dtype=torch.float64, seed=0, **kw):
    vocab = build_vocab(corpus, ontology)
    torch.manual_seed(seed)
    enc = EncoderConfig(len(vocab), n_layers=layers, n_heads=heads, d_model=d, d_ff=2 * d, max_len=max_len, dropout=0.0)
    model = DSTModel(ModelConfig(enc, slot_heads=heads, **kw), vocab, ontology)
    model = model.to(dtype)
    model.eval()
    return model


@pytest.fixture
def tiny_model(ontology, dialogue):
    return make_tiny_model(ontology, [dialogue])


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
