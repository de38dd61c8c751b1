"""Slot-value matching tracker and its training objectives."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .ontology import DialogueState, Ontology
from .text import (
    ContextInput,
    Encoder,
    EncoderConfig,
    LabelEncoder,
    MultiHeadAttention,
    Vocabulary,
    frozen_copy,
    pad_batch,
)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    slot_heads: int = 4
    temperature: float = 0.1
    # encode labels with the (trainable) context encoder instead of a frozen copy
    share_label_encoder: bool = False
    # False drops the previous-state region from the context (no-state baseline)
    use_state: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.encoder.d_model % self.slot_heads:
            raise ValueError("d_model must be divisible by slot_heads")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> ModelConfig:
        raw = dict(raw)
        raw["encoder"] = EncoderConfig(**raw["encoder"])
        return cls(**raw)


class SlotContextAttention(nn.Module):
    """r = LayerNorm(MultiHead(h_slot, H, H))."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, slot_reps, H, key_padding_mask=None):
        # slot_reps (J, d) shared across the batch; H (B, L, d)
        query = slot_reps.unsqueeze(0).expand(H.shape[0], -1, -1)
        out, weights = self.attn(query, H, H, key_padding_mask)
        return self.norm(out), weights


class DSTModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocabulary, ontology: Ontology):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.ontology = ontology
        self.encoder = Encoder(config.encoder)
        if not config.share_label_encoder:
            self.label_encoder = frozen_copy(self.encoder)
        self.slot_attention = SlotContextAttention(config.encoder.d_model, config.slot_heads)
        self._labels = LabelEncoder(self._label_module(), vocab)
        self._label_tensors = None
        n_values = [len(ontology.candidates(s)) for s in ontology.slots]
        V = max(n_values)
        mask = torch.ones(len(n_values), V, dtype=torch.bool)
        for j, n in enumerate(n_values):
            mask[j, :n] = False
        self.register_buffer("value_mask", mask, persistent=False)

    def _label_module(self) -> Encoder:
        return self.encoder if self.config.share_label_encoder else self.label_encoder

    @property
    def temperature(self) -> float:
        return self.config.temperature

    def train(self, mode: bool = True):
        super().train(mode)
        if not self.config.share_label_encoder:
            self.label_encoder.eval()
        return self

    def _apply(self, fn, *args, **kwargs):
        # dtype/device moves invalidate cached label vectors
        out = super()._apply(fn, *args, **kwargs)
        if hasattr(self, "_labels"):
            self._labels.cache.clear()
            self._label_tensors = None
        return out

    def context_parameters(self):
        return list(self.encoder.parameters())

    def head_parameters(self):
        return list(self.slot_attention.parameters())

    # -- label side ---------------------------------------------------------

    def label_reps(self):
        """(slot reps (J, d), value reps (J, V, d)); padded value rows are zero."""
        if self.config.share_label_encoder:
            return self._assemble_label_reps()
        if self._label_tensors is None:
            self._label_tensors = self._assemble_label_reps()
        return self._label_tensors

    def _assemble_label_reps(self):
        slots = self.ontology.slots
        texts = list(slots) + [v for s in slots for v in self.ontology.candidates(s)]
        reps = self._labels.encode_many(texts)
        J, V = self.value_mask.shape
        slot_reps = reps[:J]
        rows, k = [], J
        for s in slots:
            n = len(self.ontology.candidates(s))
            block = reps[k:k + n]
            if n < V:
                block = torch.cat([block, block.new_zeros(V - n, block.shape[1])])
            rows.append(block)
            k += n
        return slot_reps, torch.stack(rows)

    # -- context side -------------------------------------------------------

    def encode(self, contexts: Sequence[ContextInput], return_attention=False):
        ids, mask, segments = pad_batch(contexts, self.vocab.pad_id)
        out = self.encoder(ids, mask, return_attention=return_attention, segments=segments)
        return (out, mask) if not return_attention else (out[0], mask, out[1])

    def slot_features(self, H, mask, slot_reps):
        return self.slot_attention(slot_reps, H, mask)

    def value_logits(self, r, value_reps):
        """Negative L2 distance, (B, J, V); padded candidates get -inf."""
        dist = torch.linalg.vector_norm(r.unsqueeze(2) - value_reps.unsqueeze(0), dim=-1)
        return (-dist).masked_fill(self.value_mask, float("-inf"))

    def forward(self, contexts: Sequence[ContextInput]):
        """Returns (value logits (B, J, V), H (B, L, d), padding mask)."""
        slot_reps, value_reps = self.label_reps()
        H, mask = self.encode(contexts)
        r, _ = self.slot_features(H, mask, slot_reps)
        return self.value_logits(r, value_reps), H, mask

    def gold_indices(self, states: Sequence[DialogueState]) -> torch.Tensor:
        return torch.tensor(
            [[self.ontology.value_index(s, st[s]) for s in self.ontology.slots] for st in states],
            dtype=torch.long,
        )

    def decode(self, logits) -> list[DialogueState]:
        # torch.argmax returns the first maximal index: ties go to the lowest value index
        idx = logits.argmax(dim=-1).tolist()
        slots = self.ontology.slots
        return [
            DialogueState({s: self.ontology.candidates(s)[i] for s, i in zip(slots, row)})
            for row in idx
        ]


# --- functional pieces --------------------------------------------------------


def slot_context_attention(model: DSTModel, slot_rep, H):
    """Single-slot feature r and its attention weights (heads, L)."""
    if slot_rep.shape[-1] != H.shape[-1]:
        raise ValueError(f"slot rep dim {slot_rep.shape[-1]} != context dim {H.shape[-1]}")
    r, weights = model.slot_attention(slot_rep.reshape(1, -1), H.unsqueeze(0))
    return r[0, 0], weights[0, :, 0]


def slot_value_distribution(r, value_reps):
    """softmax_i(-||r - h_i||) over the candidate rows of ``value_reps``."""
    logits = -torch.linalg.vector_norm(r.unsqueeze(0) - value_reps, dim=-1)
    return torch.softmax(logits, dim=-1)


def dst_nll(logits, gold_idx):
    """Per-instance sum over slots of -log P(gold), shape (B,)."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, gold_idx.unsqueeze(-1)).squeeze(-1).sum(-1)


@torch.no_grad()
def predict_state(model: DSTModel, context: ContextInput) -> DialogueState:
    logits, _, _ = model([context])
    return model.decode(logits)[0]


def dst_loss(model: DSTModel, context: ContextInput, gold: DialogueState):
    logits, _, _ = model([context])
    return dst_nll(logits, model.gold_indices([gold]))[0]


def contrastive_loss(cls_reps, temperature: float):
    """Symmetric in-batch contrastive loss over 2N rows.

    Row n (n < N) is paired with row n + N. Each anchor's positive competes
    against the other 2N - 2 rows; the result is the mean over all anchors.
    """
    two_n = cls_reps.shape[0]
    if two_n % 2 or two_n == 0:
        raise ValueError("contrastive_loss expects an even, non-zero number of rows")
    norms = torch.linalg.vector_norm(cls_reps, dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("cosine similarity undefined for a zero vector")
    z = cls_reps / norms.unsqueeze(-1)
    sim = (z @ z.T) / temperature
    eye = torch.eye(two_n, dtype=torch.bool, device=sim.device)
    sim = sim.masked_fill(eye, float("-inf"))
    n = two_n // 2
    targets = torch.cat([torch.arange(n, two_n), torch.arange(0, n)]).to(sim.device)
    return F.cross_entropy(sim, targets)


def total_loss(l_ori, l_nos=None, l_c=None):
    """(L_ori + L_nos) / 2 + L_c; a ``None`` term is dropped (ablations)."""
    loss = l_ori if l_nos is None else (l_ori + l_nos) / 2
    return loss if l_c is None else loss + l_c
