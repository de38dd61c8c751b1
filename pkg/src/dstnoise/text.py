"""Tokenisation, vocabulary, context-input serialisation and the transformer encoder."""

from __future__ import annotations

import copy
import json
import math
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .ontology import NONE, Ontology, active_slots

CLS, SEP, PAD, UNK, SLOT_SEP, VAL_SEP = "[CLS]", "[SEP]", "[PAD]", "[UNK]", "[SLOT_SEP]", "[VAL_SEP]"
SPECIALS = (PAD, UNK, CLS, SEP, SLOT_SEP, VAL_SEP)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class ContextTooLong(ValueError):
    """Previous state plus current turn do not fit in ``max_len``."""


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if list(tokens[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self[t] for t in tokens]

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    def to_json(self) -> dict[str, int]:
        return dict(self.stoi)

    @classmethod
    def from_json(cls, mapping: Mapping[str, int]) -> Vocabulary:
        tokens = sorted(mapping, key=mapping.__getitem__)
        if [mapping[t] for t in tokens] != list(range(len(tokens))):
            raise ValueError("vocabulary ids must be dense from 0")
        return cls(tokens)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f)

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        with open(path) as f:
            return cls.from_json(json.load(f))


def build_vocab(corpus, ontology: Ontology) -> Vocabulary:
    """Specials first, then tokens by descending frequency, ties lexicographic."""
    counts: Counter[str] = Counter()
    for dialogue in corpus:
        for turn in dialogue.turns:
            counts.update(tokenize(turn.system_utterance))
            counts.update(tokenize(turn.user_utterance))
    for slot in ontology.slots:
        counts.update(tokenize(slot))
        for value in ontology.candidates(slot):
            counts.update(tokenize(value))
    for s in SPECIALS:
        counts.pop(s, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + ordered)


@dataclass(frozen=True)
class ContextInput:
    """Serialised ``[CLS] history state [SEP] current [SEP]`` with region offsets.

    ``history``, ``state`` and ``current`` are half-open (start, end) spans;
    ``value_spans`` maps each active previous-state slot to its value tokens.
    """

    token_ids: tuple[int, ...]
    tokens: tuple[str, ...]
    history: tuple[int, int]
    state: tuple[int, int]
    current: tuple[int, int]
    value_spans: Mapping[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self):
        return len(self.token_ids)

    @property
    def segment_ids(self) -> tuple[int, ...]:
        """0 up to and including the first [SEP], 1 for the current turn and final [SEP]."""
        return (0,) * self.current[0] + (1,) * (len(self) - self.current[0])


def _utterance_tokens(pair) -> list[str]:
    system, user = pair
    return tokenize(system) + tokenize(user)


def serialize_state(state: Mapping[str, str]) -> tuple[list[str], dict[str, tuple[int, int]]]:
    tokens: list[str] = []
    spans = {}
    for slot in active_slots(state):
        tokens.append(SLOT_SEP)
        tokens.extend(tokenize(slot))
        tokens.append(VAL_SEP)
        start = len(tokens)
        tokens.extend(tokenize(state[slot]))
        spans[slot] = (start, len(tokens))
    return tokens, spans


def build_context_input(
    history: Sequence[tuple[str, str]],
    prev_state: Mapping[str, str] | None,
    current: tuple[str, str],
    vocab: Vocabulary,
    max_len: int,
) -> ContextInput:
    """Serialise one turn's context. ``prev_state=None`` omits the state region.

    History turns are dropped oldest-first until the sequence fits.
    """
    state_tokens, spans = serialize_state(prev_state) if prev_state is not None else ([], {})
    current_tokens = _utterance_tokens(current)
    fixed = 3 + len(state_tokens) + len(current_tokens)
    if fixed > max_len:
        raise ContextTooLong(f"state + current turn need {fixed} tokens, max_len is {max_len}")
    turns = [_utterance_tokens(h) for h in history]
    budget = max_len - fixed
    while turns and sum(map(len, turns)) > budget:
        turns.pop(0)
    history_tokens = [t for turn in turns for t in turn]

    tokens = [CLS] + history_tokens
    h_span = (1, len(tokens))
    offset = len(tokens)
    tokens += state_tokens
    s_span = (offset, len(tokens))
    tokens.append(SEP)
    c_start = len(tokens)
    tokens += current_tokens
    c_span = (c_start, len(tokens))
    tokens.append(SEP)
    value_spans = {slot: (a + offset, b + offset) for slot, (a, b) in spans.items()}
    return ContextInput(tuple(vocab.ids(tokens)), tuple(tokens), h_span, s_span, c_span, value_spans)


# --- encoder ----------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    max_len: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.vocab_size, self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_len) < 1:
            raise ValueError("encoder sizes must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product multi-head attention that also returns its weights."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, key_padding_mask=None):
        # query (B, Lq, d); key/value (B, Lk, d); mask (B, Lk) True where padded
        B, Lq, _ = query.shape
        Lk = key.shape[1]

        def split(x, L):
            return x.view(B, L, self.n_heads, self.d_k).transpose(1, 2)

        q, k, v = split(self.q(query), Lq), split(self.k(key), Lk), split(self.v(value), Lk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        ctx = self.dropout(weights) @ v
        ctx = ctx.transpose(1, 2).reshape(B, Lq, self.n_heads * self.d_k)
        return self.out(ctx), weights


class EncoderLayer(nn.Module):
    # pre-norm residual block
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(config.d_model)
        self.attn = MultiHeadAttention(config.d_model, config.n_heads, config.dropout)
        self.norm2 = nn.LayerNorm(config.d_model)
        self.ff1 = nn.Linear(config.d_model, config.d_ff)
        self.ff2 = nn.Linear(config.d_ff, config.d_model)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        a, weights = self.attn(h, h, h, key_padding_mask)
        x = x + self.dropout(a)
        h = self.ff2(self.dropout(F.gelu(self.ff1(self.norm2(x)))))
        return x + self.dropout(h), weights


class Encoder(nn.Module):
    """Transformer encoder: token + segment + learned positional embeddings, pre-norm layers, final LayerNorm."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.tok = nn.Embedding(config.vocab_size, config.d_model)
        self.pos = nn.Embedding(config.max_len, config.d_model)
        self.seg = nn.Embedding(2, config.d_model)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.norm = nn.LayerNorm(config.d_model)
        self.dropout = nn.Dropout(config.dropout)
        nn.init.normal_(self.tok.weight, std=0.02 * math.sqrt(config.d_model))
        nn.init.normal_(self.pos.weight, std=0.02 * math.sqrt(config.d_model))
        nn.init.normal_(self.seg.weight, std=0.02 * math.sqrt(config.d_model))

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.parameters())

    def forward(self, ids, key_padding_mask=None, return_attention=False, segments=None):
        """ids (B, L) -> H (B, L, d); optionally the per-layer (B, heads, L, L) weights.

        ``segments`` (B, L) defaults to all zeros, as for slot and value labels.
        """
        if ids.shape[1] > self.config.max_len:
            raise ContextTooLong(f"sequence of {ids.shape[1]} tokens exceeds max_len {self.config.max_len}")
        pos = torch.arange(ids.shape[1], device=ids.device)
        if segments is None:
            segments = torch.zeros_like(ids)
        x = self.dropout(self.tok(ids) + self.pos(pos)[None] + self.seg(segments))
        attention = []
        for layer in self.layers:
            x, weights = layer(x, key_padding_mask)
            attention.append(weights)
        x = self.norm(x)
        return (x, attention) if return_attention else x


def pad_batch(contexts: Sequence[ContextInput], pad_id: int):
    """Stack contexts into (ids, key_padding_mask, segments) tensors."""
    L = max(len(c) for c in contexts)
    ids = torch.full((len(contexts), L), pad_id, dtype=torch.long)
    mask = torch.ones((len(contexts), L), dtype=torch.bool)
    segments = torch.zeros((len(contexts), L), dtype=torch.long)
    for i, c in enumerate(contexts):
        ids[i, : len(c)] = torch.tensor(c.token_ids)
        mask[i, : len(c)] = False
        segments[i, : len(c)] = torch.tensor(c.segment_ids)
    return ids, mask, segments


def encode_sequence(encoder: Encoder, context: ContextInput) -> torch.Tensor:
    """H_t for a single context, shape (len(context), d)."""
    ids = torch.tensor([context.token_ids], dtype=torch.long)
    return encoder(ids, segments=torch.tensor([context.segment_ids]))[0]


def frozen_copy(encoder: Encoder) -> Encoder:
    frozen = copy.deepcopy(encoder)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


class LabelEncoder:
    """[CLS] representation of slot and value strings.

    With a frozen encoder the vectors are cached per string; with a shared
    (trainable) encoder they are recomputed on every call so gradients flow.
    """

    def __init__(self, encoder: Encoder, vocab: Vocabulary):
        self.encoder = encoder
        self.vocab = vocab
        self.cache: dict[str, torch.Tensor] = {}

    @property
    def frozen(self) -> bool:
        return not self.encoder.trainable

    def _ids(self, text: str) -> list[int]:
        return self.vocab.ids([CLS] + tokenize(text) + [SEP])

    def encode(self, text: str) -> torch.Tensor:
        if self.frozen and text in self.cache:
            return self.cache[text]
        return self.encode_many([text])[0]

    def encode_many(self, texts: Sequence[str]) -> torch.Tensor:
        """(len(texts), d). Frozen: each label encoded alone and cached.
        Shared: one padded batch, recomputed every call."""
        if self.frozen:
            with torch.no_grad():
                for t in dict.fromkeys(texts):
                    if t not in self.cache:
                        self.cache[t] = self.encoder(torch.tensor([self._ids(t)]))[0, 0]
            return torch.stack([self.cache[t] for t in texts])
        todo = list(dict.fromkeys(texts))
        ids = [self._ids(t) for t in todo]
        L = max(map(len, ids))
        batch = torch.full((len(ids), L), self.vocab.pad_id, dtype=torch.long)
        mask = torch.ones((len(ids), L), dtype=torch.bool)
        for i, row in enumerate(ids):
            batch[i, : len(row)] = torch.tensor(row)
            mask[i, : len(row)] = False
        out = dict(zip(todo, self.encoder(batch, mask)[:, 0]))
        return torch.stack([out[t] for t in texts])


def encode_label(label_encoder: LabelEncoder, text: str) -> torch.Tensor:
    if not label_encoder.frozen:
        raise ValueError("encode_label expects a frozen label encoder")
    return label_encoder.encode(text)


__all__ = [
    "CLS", "SEP", "PAD", "UNK", "SLOT_SEP", "VAL_SEP", "NONE",
    "ContextInput", "ContextTooLong", "Encoder", "EncoderConfig", "LabelEncoder",
    "MultiHeadAttention", "Vocabulary", "build_context_input", "build_vocab",
    "encode_label", "encode_sequence", "frozen_copy", "pad_batch", "serialize_state", "tokenize",
]
