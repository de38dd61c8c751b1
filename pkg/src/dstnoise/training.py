"""Teacher-forced training with noised previous states, plus checkpoint I/O."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .corpus import Dialogue
from .inference import rollout_corpus
from .model import DSTModel, ModelConfig, contrastive_loss, dst_nll, total_loss
from .noise import NoiseConfig, make_noised_pair, noise_rng
from .ontology import DialogueState, Ontology, save_ontology, load_ontology
from .text import ContextInput, EncoderConfig, Vocabulary, build_context_input, build_vocab

log = logging.getLogger(__name__)

# mode -> (previous state in context, noised state tracking, contrastive matching)
MODES = {
    "baseline": (True, False, False),
    "baseline_no_state": (False, False, False),
    "monet_st": (True, True, False),
    "monet_cm": (True, False, True),
    "monet": (True, True, True),
}

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "monet"
    batch_size: int = 8
    epochs: int = 20
    lr_encoder: float = 4e-5
    lr_heads: float = 1e-4
    weight_decay: float = 0.01
    noise_threshold: float = 0.3
    allow_none_noise: bool = False
    temperature: float = 0.1
    seed: int = 0
    checkpoint_dir: str | None = None
    # model shape
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    max_len: int = 256
    dropout: float = 0.1
    slot_heads: int = 4
    share_label_encoder: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if min(self.lr_encoder, self.lr_heads) <= 0 or self.weight_decay < 0:
            raise ValueError("learning rates must be positive, weight decay non-negative")
        if not 0 <= self.noise_threshold <= 1:
            raise ValueError("noise_threshold must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def use_state(self) -> bool:
        return MODES[self.mode][0]

    @property
    def noised_tracking(self) -> bool:
        return MODES[self.mode][1]

    @property
    def context_matching(self) -> bool:
        return MODES[self.mode][2]

    def model_config(self, vocab_size: int) -> ModelConfig:
        enc = EncoderConfig(
            vocab_size=vocab_size,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            d_ff=self.d_ff,
            max_len=self.max_len,
            dropout=self.dropout,
        )
        return ModelConfig(
            enc,
            slot_heads=self.slot_heads,
            temperature=self.temperature,
            share_label_encoder=self.share_label_encoder,
            use_state=self.use_state,
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {', '.join(sorted(unknown))}")
        return cls(**raw)


@dataclass(frozen=True)
class Instance:
    dialogue_id: str
    turn_index: int
    history: tuple[tuple[str, str], ...]
    prev_state: DialogueState
    current: tuple[str, str]
    gold_state: DialogueState


def make_training_instances(corpus: list[Dialogue], ontology: Ontology) -> list[Instance]:
    """One instance per turn; the previous state is the gold state of turn t-1."""
    out = []
    for d in corpus:
        prev = ontology.empty_state()
        history: list[tuple[str, str]] = []
        for t, turn in enumerate(d.turns, start=1):
            current = (turn.system_utterance, turn.user_utterance)
            out.append(Instance(d.id, t, tuple(history), prev, current, turn.gold_state))
            history.append(current)
            prev = turn.gold_state
    return out


@dataclass
class Checkpoint:
    model: DSTModel
    config: TrainConfig
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_joint: float | None = None
    torch_rng_state: torch.Tensor | None = None
    optimizer_state: dict | None = None
    # state at the end of the run (``self`` when it is the final epoch)
    final: Checkpoint | None = None

    @property
    def vocab(self) -> Vocabulary:
        return self.model.vocab

    @property
    def ontology(self) -> Ontology:
        return self.model.ontology


def build_model(config: TrainConfig, vocab: Vocabulary, ontology: Ontology) -> DSTModel:
    torch.manual_seed(config.seed)
    model = DSTModel(config.model_config(len(vocab)), vocab, ontology)
    if config.dtype == "float64":
        model = model.double()
    return model


def make_optimizer(model: DSTModel, config: TrainConfig) -> torch.optim.AdamW:
    groups = [
        {"params": model.context_parameters(), "lr": config.lr_encoder},
        {"params": model.head_parameters(), "lr": config.lr_heads},
    ]
    return torch.optim.AdamW(groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=config.weight_decay)


def batch_loss(model: DSTModel, config: TrainConfig, originals, noised, golds):
    """Mode-dependent objective for one batch.

    Returns ``(total, terms)`` where ``terms`` maps "ori", "nos" and "con" to
    the scalar tensors the mode uses. ``noised`` may be empty when the mode
    needs no noised contexts.
    """
    N = len(originals)
    need_noised = config.noised_tracking or config.context_matching
    contexts = list(originals) + (list(noised) if need_noised else [])
    slot_reps, value_reps = model.label_reps()
    H, mask = model.encode(contexts)
    r, _ = model.slot_features(H, mask, slot_reps)
    logits = model.value_logits(r, value_reps)
    gold_idx = model.gold_indices(golds)
    terms = {"ori": dst_nll(logits[:N], gold_idx).mean()}
    if config.noised_tracking:
        terms["nos"] = dst_nll(logits[N:], gold_idx).mean()
    if config.context_matching:
        terms["con"] = contrastive_loss(H[:, 0], config.temperature)
    return total_loss(terms["ori"], terms.get("nos"), terms.get("con")), terms


def joint_accuracy(records) -> float:
    return sum(r.predicted_state == r.gold_state for r in records) / len(records)


def train(
    config: TrainConfig,
    corpus: list[Dialogue],
    ontology: Ontology,
    valid_corpus: list[Dialogue] | None = None,
    vocab: Vocabulary | None = None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Train and return the best-validation checkpoint (last epoch without validation).

    The returned checkpoint's ``final`` attribute holds the end-of-run state,
    from which training can be resumed bit-exactly.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    if resume is not None:
        model, vocab = resume.model, resume.vocab
        start_epoch, history = resume.epoch, list(resume.history)
        # best weights are only known when the resumed state is itself the best epoch
        if resume.best_epoch == resume.epoch:
            best = (resume.best_valid_joint, resume.best_epoch, copy.deepcopy(model.state_dict()))
        else:
            best = (None, 0, None)
    else:
        vocab = vocab or build_vocab(corpus, ontology)
        model = build_model(config, vocab, ontology)
        start_epoch, history, best = 0, [], (None, 0, None)

    optimizer = make_optimizer(model, config)
    if resume is not None and resume.optimizer_state is not None:
        optimizer.load_state_dict(resume.optimizer_state)
    if resume is not None and resume.torch_rng_state is not None:
        torch.set_rng_state(resume.torch_rng_state)
    else:
        torch.manual_seed(config.seed)

    instances = make_training_instances(corpus, ontology)
    max_len = config.max_len
    state_of = (lambda s: s) if config.use_state else (lambda s: None)
    originals = [
        build_context_input(x.history, state_of(x.prev_state), x.current, vocab, max_len) for x in instances
    ]
    noise_cfg = NoiseConfig(config.noise_threshold, config.seed, config.allow_none_noise)
    need_noised = config.noised_tracking or config.context_matching
    frozen_before = _label_snapshot(model)

    for epoch in range(start_epoch, config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(instances))
        totals, parts_sum = [], {}
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch_ori: list[ContextInput] = [originals[i] for i in idx]
            batch_nos: list[ContextInput] = []
            if need_noised:
                for i in idx:
                    x = instances[i]
                    _, nos, _ = make_noised_pair(
                        x.history, x.prev_state, x.current, ontology, vocab, max_len,
                        noise_cfg, noise_rng(config.seed, epoch, int(i)),
                    )
                    batch_nos.append(nos)
            golds = [instances[i].gold_state for i in idx]
            loss, terms = batch_loss(model, config, batch_ori, batch_nos, golds)
            parts = {k: v.item() for k, v in terms.items()}
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {float(loss)} at epoch {epoch + 1}, batch {start // config.batch_size}: {parts}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            totals.append(loss.item())
            for k, v in parts.items():
                parts_sum[k] = parts_sum.get(k, 0.0) + v
        entry = {"epoch": epoch + 1, "loss": float(np.mean(totals))}
        entry.update({k: v / len(totals) for k, v in parts_sum.items()})
        if valid_corpus:
            entry["valid_joint"] = joint_accuracy(rollout_corpus(model, valid_corpus))
            if best[0] is None or entry["valid_joint"] > best[0]:
                best = (entry["valid_joint"], epoch + 1, copy.deepcopy(model.state_dict()))
        history.append(entry)
        log.info("epoch %s", entry)

    if _label_snapshot(model) != frozen_before:
        raise RuntimeError("frozen label encoder changed during training")

    final = Checkpoint(
        model, config, config.epochs, history, best[1], best[0],
        torch.get_rng_state(), copy.deepcopy(optimizer.state_dict()),
    )
    final.final = final
    if best[2] is None:
        result = final
    else:
        best_model = copy.deepcopy(model)
        best_model.load_state_dict(best[2])
        result = Checkpoint(best_model, config, best[1], history, best[1], best[0], final=final)
    if config.checkpoint_dir:
        save_checkpoint(result, Path(config.checkpoint_dir) / "best")
        save_checkpoint(final, Path(config.checkpoint_dir) / "last")
    return result


def _label_snapshot(model: DSTModel):
    if model.config.share_label_encoder:
        return None
    return hashlib.sha256(b"".join(p.detach().numpy().tobytes() for p in model.label_encoder.parameters())).hexdigest()


# --- checkpoint I/O -----------------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def _write_tensors(tensors: dict[str, torch.Tensor], path: Path) -> list[dict]:
    entries, offset = [], 0
    with open(path, "wb") as f:
        for name, t in tensors.items():
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"cannot store tensor {name} of dtype {t.dtype}")
            data = np.ascontiguousarray(t.detach().cpu().numpy().astype(_DTYPES[t.dtype])).tobytes()
            f.write(data)
            entries.append({"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype], "offset": offset, "nbytes": len(data)})
            offset += len(data)
    return entries


def _read_tensors(path: Path, entries: list[dict]) -> dict[str, torch.Tensor]:
    blob = path.read_bytes()
    out = {}
    for e in entries:
        chunk = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[e["dtype"]])
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _optimizer_tensors(state: dict) -> tuple[dict, dict[str, torch.Tensor]]:
    meta, tensors = {"param_groups": state["param_groups"], "state": {}}, {}
    for pid, st in state["state"].items():
        meta["state"][str(pid)] = sorted(st)
        for key, value in st.items():
            tensors[f"{pid}.{key}"] = value
    return meta, tensors


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Directory with manifest.json, vocab.json, ontology.json and raw little-endian tensors."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ckpt.vocab.save(path / "vocab.json")
    save_ontology(ckpt.ontology, path / "ontology.json")
    manifest = {
        "version": CHECKPOINT_VERSION,
        "train_config": ckpt.config.to_json(),
        "model_config": ckpt.model.config.to_json(),
        "vocab_sha256": _sha256(path / "vocab.json"),
        "epoch": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "best_valid_joint": ckpt.best_valid_joint,
        "history": ckpt.history,
        "files": {},
    }
    manifest["params"] = _write_tensors(ckpt.model.state_dict(), path / "params.bin")
    manifest["files"]["params.bin"] = _sha256(path / "params.bin")
    if ckpt.optimizer_state is not None:
        meta, tensors = _optimizer_tensors(ckpt.optimizer_state)
        manifest["optimizer"] = meta
        manifest["optimizer_tensors"] = _write_tensors(tensors, path / "optimizer.bin")
        manifest["files"]["optimizer.bin"] = _sha256(path / "optimizer.bin")
    if ckpt.torch_rng_state is not None:
        (path / "rng.bin").write_bytes(ckpt.torch_rng_state.numpy().tobytes())
        manifest["files"]["rng.bin"] = _sha256(path / "rng.bin")
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_checkpoint(path: str | Path, model_config: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint directory; ``model_config`` forces the expected architecture."""
    path = Path(path)
    try:
        with open(path / "manifest.json") as f:
            manifest = json.load(f)
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        for name, digest in manifest["files"].items():
            if _sha256(path / name) != digest:
                raise CheckpointError(f"{path}/{name}: checksum mismatch (corrupted file)")
        if _sha256(path / "vocab.json") != manifest["vocab_sha256"]:
            raise CheckpointError(f"{path}/vocab.json: checksum mismatch")
        vocab = Vocabulary.load(path / "vocab.json")
        ontology = load_ontology(path / "ontology.json")
        config = TrainConfig.from_json(manifest["train_config"])
        stored = ModelConfig.from_json(manifest["model_config"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    model = DSTModel(model_config or stored, vocab, ontology)
    params = _read_tensors(path / "params.bin", manifest["params"])
    if params and next(iter(params.values())).dtype == torch.float64:
        model = model.double()
    expected = model.state_dict()
    mismatched = [
        f"{k}: stored {tuple(params[k].shape)} vs expected {tuple(v.shape)}"
        for k, v in expected.items() if k in params and params[k].shape != v.shape
    ]
    missing = sorted(set(expected) ^ set(params))
    if mismatched or missing:
        raise CheckpointError(f"{path}: shape mismatch: {'; '.join(mismatched + missing)}")
    model.load_state_dict(params)

    optimizer_state = None
    if "optimizer" in manifest:
        tensors = _read_tensors(path / "optimizer.bin", manifest["optimizer_tensors"])
        state = {
            int(pid): {key: tensors[f"{pid}.{key}"] for key in keys}
            for pid, keys in manifest["optimizer"]["state"].items()
        }
        optimizer_state = {"state": state, "param_groups": manifest["optimizer"]["param_groups"]}
    rng = None
    if (path / "rng.bin").exists():
        rng = torch.from_numpy(np.frombuffer((path / "rng.bin").read_bytes(), dtype=np.uint8).copy())
    return Checkpoint(
        model, config, manifest["epoch"], manifest["history"], manifest["best_epoch"],
        manifest["best_valid_joint"], rng, optimizer_state,
    )


def with_mode(config: TrainConfig, mode: str, **changes) -> TrainConfig:
    return replace(config, mode=mode, **changes)
