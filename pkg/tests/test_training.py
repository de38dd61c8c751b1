import json

import numpy as np
import pytest
import torch

from dstnoise.corpus import split_corpus
from dstnoise.model import ModelConfig
from dstnoise.noise import NoiseConfig, make_noised_pair, noise_rng
from dstnoise.inference import rollout_corpus
from dstnoise.text import build_context_input, build_vocab
from dstnoise.training import (
    MODES,
    CheckpointError,
    TrainConfig,
    batch_loss,
    build_model,
    load_checkpoint,
    make_training_instances,
    save_checkpoint,
    train,
    with_mode,
)

SMALL = dict(n_layers=1, n_heads=2, d_model=16, d_ff=32, max_len=160, slot_heads=2,
             batch_size=4, lr_encoder=1e-3, lr_heads=1e-3, epochs=2)


def small_config(**kw):
    return TrainConfig(**{**SMALL, **kw})


def params_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


class TestInstances:
    def test_teacher_forcing(self, ontology, dialogue):
        inst = make_training_instances([dialogue], ontology)
        assert len(inst) == 3
        assert inst[0].prev_state == ontology.empty_state()
        assert inst[0].history == ()
        assert inst[1].prev_state == dialogue.turns[0].gold_state
        assert inst[2].prev_state == dialogue.turns[1].gold_state
        assert inst[2].history == tuple((t.system_utterance, t.user_utterance) for t in dialogue.turns[:2])


class TestConfig:
    def test_modes(self):
        assert set(MODES) == {"baseline", "baseline_no_state", "monet_st", "monet_cm", "monet"}
        assert not TrainConfig(mode="baseline_no_state").use_state
        assert TrainConfig(mode="monet_cm").context_matching and not TrainConfig(mode="monet_cm").noised_tracking

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown mode"):
            TrainConfig(mode="fancy")

    def test_json_roundtrip(self):
        cfg = small_config(mode="monet_st", seed=4)
        assert TrainConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown TrainConfig keys"):
            TrainConfig.from_json({"learning_rate": 1})

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            TrainConfig(noise_threshold=1.2)


@pytest.fixture
def setup(small_synthetic):
    ont, corpus = small_synthetic
    train_set, valid, _ = split_corpus(corpus, (0.75, 0.25, 0.0), seed=0)
    return ont, train_set, valid


def _batch(ont, corpus, cfg, n=4, p=0.3):
    vocab = build_vocab(corpus, ont)
    inst = make_training_instances(corpus, ont)[:n]
    ori, nos = [], []
    for i, x in enumerate(inst):
        if cfg.use_state:
            o, q, _ = make_noised_pair(x.history, x.prev_state, x.current, ont, vocab, cfg.max_len,
                                       NoiseConfig(p), noise_rng(0, 0, i))
        else:
            o = q = build_context_input(x.history, None, x.current, vocab, cfg.max_len)
        ori.append(o)
        nos.append(q)
    return vocab, ori, nos, [x.gold_state for x in inst]


class TestBatchLoss:
    def test_zero_noise_tracking_equals_original(self, setup):
        ont, corpus, _ = setup
        cfg = small_config(mode="monet", dropout=0.0, dtype="float64")
        vocab, ori, nos, golds = _batch(ont, corpus, cfg, p=0.0)
        model = build_model(cfg, vocab, ont)
        _, terms = batch_loss(model, cfg, ori, nos, golds)
        assert terms["nos"].item() == pytest.approx(terms["ori"].item(), abs=1e-12)

    def test_terms_per_mode(self, setup):
        ont, corpus, _ = setup
        expected = {"baseline": {"ori"}, "baseline_no_state": {"ori"}, "monet_st": {"ori", "nos"},
                    "monet_cm": {"ori", "con"}, "monet": {"ori", "nos", "con"}}
        for mode, keys in expected.items():
            cfg = small_config(mode=mode, dropout=0.0)
            vocab, ori, nos, golds = _batch(ont, corpus, cfg)
            total, terms = batch_loss(build_model(cfg, vocab, ont), cfg, ori, nos, golds)
            assert set(terms) == keys
            o, n, c = terms["ori"], terms.get("nos"), terms.get("con")
            want = (o + n) / 2 if n is not None else o
            want = want + c if c is not None else want
            assert total.item() == pytest.approx(want.item(), rel=1e-6)

    def test_no_state_contexts_lack_state_region(self, setup):
        ont, corpus, _ = setup
        cfg = small_config(mode="baseline_no_state")
        _, ori, _, _ = _batch(ont, corpus, cfg)
        assert all(c.state[0] == c.state[1] and c.value_spans == {} for c in ori)

    def test_tracking_terms_agree_across_st_and_full(self, setup):
        ont, corpus, _ = setup
        st_cfg = small_config(mode="monet_st", dropout=0.0)
        full_cfg = with_mode(st_cfg, "monet")
        vocab, ori, nos, golds = _batch(ont, corpus, st_cfg)
        model = build_model(st_cfg, vocab, ont)
        _, a = batch_loss(model, st_cfg, ori, nos, golds)
        _, b = batch_loss(model, full_cfg, ori, nos, golds)
        assert a["ori"].item() == b["ori"].item() and a["nos"].item() == b["nos"].item()


class TestTrain:
    def test_bit_identical_runs(self, setup):
        ont, corpus, valid = setup
        cfg = small_config(seed=5)
        a, b = train(cfg, corpus, ont, valid), train(cfg, corpus, ont, valid)
        assert a.history == b.history
        assert params_equal(a.model, b.model)

    def test_loss_decreases(self, setup):
        ont, corpus, _ = setup
        ck = train(small_config(epochs=4, mode="monet"), corpus, ont)
        losses = [h["loss"] for h in ck.history]
        assert losses[-1] < losses[0]

    def test_frozen_label_encoder_unchanged(self, setup):
        ont, corpus, _ = setup
        cfg = small_config()
        vocab = build_vocab(corpus, ont)
        before = build_model(cfg, vocab, ont).label_encoder.state_dict()
        after = train(cfg, corpus, ont, vocab=vocab).model.label_encoder.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_context_encoder_moves(self, setup):
        ont, corpus, _ = setup
        cfg = small_config(epochs=1)
        vocab = build_vocab(corpus, ont)
        before = build_model(cfg, vocab, ont).encoder.tok.weight.clone()
        after = train(cfg, corpus, ont, vocab=vocab).model.encoder.tok.weight
        assert not torch.equal(before, after)

    def test_best_checkpoint_selected(self, setup):
        ont, corpus, valid = setup
        ck = train(small_config(epochs=3), corpus, ont, valid)
        scores = [h["valid_joint"] for h in ck.history]
        assert ck.best_valid_joint == max(scores)
        assert ck.best_epoch == scores.index(max(scores)) + 1
        assert ck.final.epoch == 3

    def test_empty_corpus(self, ontology):
        with pytest.raises(ValueError):
            train(small_config(), [], ontology)

    def test_resume_matches_uninterrupted(self, setup, tmp_path):
        ont, corpus, _ = setup
        full = train(small_config(epochs=4), corpus, ont)
        half = train(small_config(epochs=2), corpus, ont)
        save_checkpoint(half.final, tmp_path / "half")
        restored = load_checkpoint(tmp_path / "half")
        resumed = train(small_config(epochs=4), corpus, ont, resume=restored)
        assert [h["loss"] for h in resumed.history] == [h["loss"] for h in full.history]
        assert params_equal(resumed.model, full.model)


class TestCheckpoint:
    @pytest.fixture
    def ck(self, setup):
        ont, corpus, valid = setup
        return train(small_config(epochs=1), corpus, ont, valid)

    def test_roundtrip(self, ck, tmp_path, setup):
        _, _, valid = setup
        save_checkpoint(ck, tmp_path / "c")
        again = load_checkpoint(tmp_path / "c")
        assert params_equal(ck.model, again.model)
        assert again.config == ck.config and again.vocab == ck.vocab and again.ontology == ck.ontology
        assert again.history == ck.history
        ck.model.eval()
        again.model.eval()
        assert rollout_corpus(ck.model, valid) == rollout_corpus(again.model, valid)

    def test_saved_twice_identical_bytes(self, ck, tmp_path):
        save_checkpoint(ck, tmp_path / "a")
        save_checkpoint(ck, tmp_path / "b")
        for name in ("params.bin", "manifest.json", "vocab.json", "ontology.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_little_endian_float32(self, ck, tmp_path):
        save_checkpoint(ck, tmp_path / "c")
        manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
        first = manifest["params"][0]
        raw = (tmp_path / "c" / "params.bin").read_bytes()[first["offset"]:first["offset"] + first["nbytes"]]
        tensor = ck.model.state_dict()[first["name"]]
        np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(first["shape"]), tensor.numpy())

    def test_corrupted_file(self, ck, tmp_path):
        save_checkpoint(ck, tmp_path / "c")
        path = tmp_path / "c" / "params.bin"
        data = bytearray(path.read_bytes())
        data[10] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(tmp_path / "c")

    def test_shape_mismatch(self, ck, tmp_path):
        save_checkpoint(ck, tmp_path / "c")
        stored = ck.model.config
        wider = ModelConfig.from_json({**stored.to_json(), "encoder": {**stored.encoder.__dict__, "d_model": 32, "d_ff": 64}})
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(tmp_path / "c", wider)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope")

    def test_float64_roundtrip(self, setup, tmp_path):
        ont, corpus, _ = setup
        ck = train(small_config(epochs=1, dtype="float64"), corpus, ont)
        save_checkpoint(ck, tmp_path / "c")
        again = load_checkpoint(tmp_path / "c")
        assert next(again.model.parameters()).dtype == torch.float64
        assert params_equal(ck.model, again.model)

    def test_checkpoint_dir_written(self, setup, tmp_path):
        ont, corpus, valid = setup
        train(small_config(epochs=1, checkpoint_dir=str(tmp_path)), corpus, ont, valid)
        assert (tmp_path / "best" / "manifest.json").exists()
        assert (tmp_path / "last" / "optimizer.bin").exists()

