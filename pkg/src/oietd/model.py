"""Encoders, the vanilla/implicit/explicit tagging models and the MLM objective."""

from __future__ import annotations

import functools
import hashlib
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Sentence
from .tagging import EvalResult, RELATION, TRIGGER, encode_iob2, first_subword_mask, label_set, strict_micro_prf

logger = logging.getLogger(__name__)

DESIGNS = ("vanilla", "implicit", "explicit")
IGNORE_INDEX = -100
MAX_SUBWORDS = 256
REL_DIMS = (10, 50, 100, 300)
TD_LABELS = label_set(TRIGGER)
REL_LABELS = label_set(RELATION)
CHECKPOINT_VERSION = 1


class DesignError(ValueError):
    """Operation not available for the model's design."""


# --------------------------------------------------------------------------- #
# encoders


@functools.lru_cache(maxsize=65536)
def _hashed_pieces(word: str, chars: int, n_buckets: int, offset: int) -> tuple[int, ...]:
    pieces = [word[i:i + chars] for i in range(0, max(len(word), 1), chars)]
    return tuple(zlib.crc32((("▁" if i == 0 else "##") + p).encode("utf-8")) % n_buckets + offset
                 for i, p in enumerate(pieces))


class ToyEncoder(nn.Module):
    """Hashed subword embeddings followed by one self-attention block.

    Words are cut into ``subword_chars``-character pieces and each piece is
    hashed into ``n_buckets`` embedding rows, so any vocabulary is accepted
    without a fitted tokenizer.
    """

    pad_id = 0
    mask_id = 1
    n_special = 2

    def __init__(self, hidden_size: int = 64, n_buckets: int = 4096, n_heads: int = 4,
                 subword_chars: int = 4, max_length: int = MAX_SUBWORDS, dropout: float = 0.1):
        super().__init__()
        self.config = dict(kind="toy", hidden_size=hidden_size, n_buckets=n_buckets, n_heads=n_heads,
                           subword_chars=subword_chars, max_length=max_length, dropout=dropout)
        self.hidden_size = hidden_size
        self.vocab_size = n_buckets + self.n_special
        self.random_token_range = (self.n_special, self.vocab_size)
        self.max_length = max_length
        self.subword_chars = subword_chars
        self.embed = nn.Embedding(self.vocab_size, hidden_size, padding_idx=self.pad_id)
        self.position = nn.Embedding(max_length, hidden_size)
        self.norm_in = nn.LayerNorm(hidden_size)
        self.attn = nn.MultiheadAttention(hidden_size, n_heads, dropout=dropout, batch_first=True)
        self.norm_attn = nn.LayerNorm(hidden_size)
        self.ff = nn.Sequential(nn.Linear(hidden_size, 2 * hidden_size), nn.GELU(), nn.Linear(2 * hidden_size, hidden_size))
        self.norm_ff = nn.LayerNorm(hidden_size)
        self.drop = nn.Dropout(dropout)
        self.lm_head = nn.Linear(hidden_size, self.vocab_size)

    def _word_ids(self, word: str) -> tuple[int, ...]:
        return _hashed_pieces(word, self.subword_chars, self.vocab_size - self.n_special, self.n_special)

    def tokenize(self, words: Sequence[str]) -> tuple[list[int], list[Optional[int]]]:
        ids, alignment = [], []
        for w, word in enumerate(words):
            for piece in self._word_ids(word):
                ids.append(piece)
                alignment.append(w)
        return ids[:self.max_length], alignment[:self.max_length]

    def special_mask(self, input_ids: torch.Tensor) -> torch.Tensor:
        return input_ids < self.n_special

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(input_ids.shape[1], device=input_ids.device)
        x = self.norm_in(self.embed(input_ids) + self.position(positions))
        a, _ = self.attn(x, x, x, key_padding_mask=~attention_mask.bool(), need_weights=False)
        x = self.norm_attn(x + self.drop(a))
        return self.norm_ff(x + self.drop(self.ff(x)))

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden)


class PretrainedEncoder(nn.Module):
    """Adapter around a Hugging Face masked-LM checkpoint (RoBERTa-base by default).

    Inputs are not lowercased; words are passed pre-split so subword-to-word
    alignment comes from the fast tokenizer.
    """

    def __init__(self, name: str = "roberta-base", max_length: int = MAX_SUBWORDS, model=None, tokenizer=None):
        super().__init__()
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        self.config = dict(kind="pretrained", name=name, max_length=max_length)
        self.tokenizer = tokenizer or AutoTokenizer.from_pretrained(name, add_prefix_space=True, use_fast=True)
        self.lm = model or AutoModelForMaskedLM.from_pretrained(name)
        self.hidden_size = self.lm.config.hidden_size
        self.vocab_size = self.lm.config.vocab_size
        self.random_token_range = (0, self.vocab_size)
        self.max_length = max_length
        self.pad_id = self.tokenizer.pad_token_id
        self.mask_id = self.tokenizer.mask_token_id
        self._special = sorted(set(self.tokenizer.all_special_ids))

    def tokenize(self, words: Sequence[str]) -> tuple[list[int], list[Optional[int]]]:
        enc = self.tokenizer(list(words), is_split_into_words=True, truncation=True, max_length=self.max_length)
        return list(enc["input_ids"]), list(enc.word_ids())

    def special_mask(self, input_ids: torch.Tensor) -> torch.Tensor:
        return torch.isin(input_ids, torch.tensor(self._special, device=input_ids.device))

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.lm.base_model(input_ids=input_ids, attention_mask=attention_mask.long()).last_hidden_state

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self._lm_head()(hidden)

    def _lm_head(self):
        for attr in ("lm_head", "cls"):
            if hasattr(self.lm, attr):
                return getattr(self.lm, attr)
        raise AttributeError("masked-LM head not found on pretrained model")


def make_encoder(config: Optional[dict] = None) -> nn.Module:
    config = dict(config or {"kind": "toy"})
    kind = config.pop("kind", "toy")
    if kind == "toy":
        return ToyEncoder(**config)
    if kind == "pretrained":
        return PretrainedEncoder(**config)
    raise ValueError(f"unknown encoder kind {kind!r}")


# --------------------------------------------------------------------------- #
# batching


@dataclass
class Batch:
    input_ids: torch.Tensor
    attention_mask: torch.Tensor
    first_mask: torch.Tensor
    td_labels: torch.Tensor
    rd_labels: Optional[torch.Tensor]
    rel_ids: Optional[torch.Tensor]
    first_positions: list[list[int]]
    n_words: list[int]
    truncated: int = 0

    @property
    def size(self) -> int:
        return self.input_ids.shape[0]


def collate(sentences: Sequence[Sentence], encoder: nn.Module, with_relations: bool = False) -> Batch:
    """Tokenise, pad to the longest sentence and place labels on first subwords.

    Relation tags of a word are copied to every one of its subwords.
    """
    rows = []
    truncated = 0
    for sent in sentences:
        ids, alignment = encoder.tokenize(sent.tokens)
        covered = max((w for w in alignment if w is not None), default=-1) + 1
        truncated += covered < len(sent.tokens)
        mask = first_subword_mask(sent.tokens[:covered], alignment)
        td = [TD_LABELS.index(t) for t in encode_iob2(sent.trigger_spans, len(sent.tokens), TRIGGER)]
        rel = None
        if with_relations:
            if sent.relation_spans is None:
                raise DesignError(f"{sent.sentence_id}: relation tags required but missing")
            rel = [REL_LABELS.index(t) for t in encode_iob2(sent.relation_spans, len(sent.tokens), RELATION)]
        rows.append((ids, alignment, mask, td, rel))
    width = max(len(r[0]) for r in rows)
    n = len(rows)
    input_ids = torch.full((n, width), encoder.pad_id, dtype=torch.long)
    attention = torch.zeros((n, width), dtype=torch.bool)
    first = torch.zeros((n, width), dtype=torch.bool)
    td_labels = torch.full((n, width), IGNORE_INDEX, dtype=torch.long)
    rd_labels = torch.full((n, width), IGNORE_INDEX, dtype=torch.long) if with_relations else None
    rel_ids = torch.zeros((n, width), dtype=torch.long) if with_relations else None
    first_positions, n_words = [], []
    for i, (ids, alignment, mask, td, rel) in enumerate(rows):
        input_ids[i, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        attention[i, :len(ids)] = True
        positions = [j for j, m in enumerate(mask) if m]
        first_positions.append(positions)
        n_words.append(len(td))
        for w, j in enumerate(positions):
            first[i, j] = True
            td_labels[i, j] = td[w]
            if rel is not None:
                rd_labels[i, j] = rel[w]
        if rel is not None:
            for j, w in enumerate(alignment):
                if w is not None:
                    rel_ids[i, j] = rel[w]
    return Batch(input_ids, attention, first, td_labels, rd_labels, rel_ids, first_positions, n_words, truncated)


def token_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over labelled (first-subword) positions only."""
    if not (labels != IGNORE_INDEX).any():
        return logits.sum() * 0.0
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_INDEX)


# --------------------------------------------------------------------------- #
# tagging model


class TriggerTagger(nn.Module):
    """Shared encoder with design-specific heads.

    * ``vanilla``: one TD head on the encoder output.
    * ``implicit``: TD head reads ``[h_i ; E[rel_tag_i]]`` where ``E`` is a
      3-row relation label embedding trained through the TD loss.
    * ``explicit``: separate TD and RD heads; only TD is used at inference.
    """

    def __init__(self, design: str, encoder: nn.Module, rel_dim: Optional[int] = None,
                 dropout: float = 0.1, mlm: bool = False):
        super().__init__()
        if design not in DESIGNS:
            raise ValueError(f"unknown design {design!r}")
        if design == "implicit" and not rel_dim:
            raise ValueError("implicit design needs rel_dim")
        self.design = design
        self.encoder = encoder
        self.mlm_enabled = mlm
        self.rel_dim = rel_dim if design == "implicit" else None
        hidden = encoder.hidden_size
        self.drop = nn.Dropout(dropout)
        self.td_head = nn.Linear(hidden + (self.rel_dim or 0), len(TD_LABELS))
        self.rd_head = nn.Linear(hidden, len(REL_LABELS)) if design == "explicit" else None
        self.rel_embed = None
        if design == "implicit":
            self.rel_embed = nn.Embedding(len(REL_LABELS), rel_dim)
            nn.init.uniform_(self.rel_embed.weight, -0.1, 0.1)

    @property
    def needs_relations(self) -> bool:
        """Whether TD inference consumes relation tags."""
        return self.design == "implicit"

    @property
    def trains_with_relations(self) -> bool:
        return self.design in ("implicit", "explicit")

    def encode(self, batch: Batch) -> torch.Tensor:
        return self.encoder(batch.input_ids, batch.attention_mask)

    def forward_vanilla(self, batch: Batch) -> torch.Tensor:
        if self.design != "vanilla":
            raise DesignError(f"forward_vanilla on {self.design} model")
        return self.td_head(self.drop(self.encode(batch)))

    def implicit_features(self, batch: Batch, hidden: Optional[torch.Tensor] = None) -> torch.Tensor:
        if batch.rel_ids is None:
            raise DesignError("implicit design needs relation tags for every sentence")
        hidden = self.encode(batch) if hidden is None else hidden
        return torch.cat([hidden, self.rel_embed(batch.rel_ids).to(hidden.dtype)], dim=-1)

    def forward_implicit(self, batch: Batch) -> torch.Tensor:
        if self.design != "implicit":
            raise DesignError(f"forward_implicit on {self.design} model")
        return self.td_head(self.drop(self.implicit_features(batch)))

    def forward_explicit(self, batch: Batch, task: str = "TD") -> torch.Tensor:
        if self.design != "explicit":
            raise DesignError(f"forward_explicit on {self.design} model")
        if task == "RD":
            if not self.training:
                raise DesignError("the RD head is training-only")
            return self.rd_head(self.drop(self.encode(batch)))
        if task != "TD":
            raise ValueError(f"unknown task {task!r}")
        return self.td_head(self.drop(self.encode(batch)))

    def td_logits(self, batch: Batch) -> torch.Tensor:
        if self.design == "vanilla":
            return self.forward_vanilla(batch)
        if self.design == "implicit":
            return self.forward_implicit(batch)
        return self.forward_explicit(batch, "TD")

    def forward(self, batch: Batch) -> torch.Tensor:
        return self.td_logits(batch)

    def losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        """Per-task losses; explicit feeds the batch once per task."""
        out = {"td": token_loss(self.td_logits(batch), batch.td_labels)}
        if self.design == "explicit":
            if batch.rd_labels is None:
                raise DesignError("explicit design needs relation tags for training")
            out["rd"] = token_loss(self.forward_explicit(batch, "RD"), batch.rd_labels)
        return out

    def training_loss(self, batch: Batch) -> tuple[torch.Tensor, dict[str, float]]:
        """Mean of the per-task losses (TD alone, or (TD + RD) / 2)."""
        parts = self.losses(batch)
        loss = sum(parts.values()) / len(parts)
        return loss, {k: float(v.detach()) for k, v in parts.items()}


def build_model(design: str, encoder_config: Optional[dict] = None, rel_dim: Optional[int] = None,
                seed: int = 0, mlm: bool = False, dropout: float = 0.1) -> TriggerTagger:
    torch.manual_seed(seed)
    return TriggerTagger(design, make_encoder(encoder_config), rel_dim=rel_dim, dropout=dropout, mlm=mlm)


def tensor_digest(tensor: torch.Tensor) -> str:
    return hashlib.sha256(tensor.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


# --------------------------------------------------------------------------- #
# inference


@torch.no_grad()
def predict_tags(model: TriggerTagger, sentences: Sequence[Sentence], batch_size: int = 32) -> list[list[str]]:
    """Word-level TD tags; words lost to truncation are tagged ``O``."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(sentences), batch_size):
            chunk = sentences[i:i + batch_size]
            batch = collate(chunk, model.encoder, with_relations=model.needs_relations)
            pred = model.td_logits(batch).argmax(-1)
            for b, sent in enumerate(chunk):
                tags = ["O"] * len(sent.tokens)
                for w, j in enumerate(batch.first_positions[b]):
                    tags[w] = TD_LABELS[int(pred[b, j])]
                out.append(tags)
    finally:
        model.train(was_training)
    return out


def evaluate_model(model: TriggerTagger, sentences: Sequence[Sentence], batch_size: int = 32) -> EvalResult:
    if model.needs_relations and any(s.relation_spans is None for s in sentences):
        raise DesignError("implicit model evaluation needs relation tags on the evaluation data")
    gold = [encode_iob2(s.trigger_spans, len(s.tokens), TRIGGER) for s in sentences]
    return strict_micro_prf(gold, predict_tags(model, sentences, batch_size))


# --------------------------------------------------------------------------- #
# masked language modelling


@dataclass
class MaskingResult:
    input_ids: torch.Tensor
    labels: torch.Tensor
    selected: torch.Tensor
    masked: torch.Tensor
    randomized: torch.Tensor


def mask_tokens(input_ids: torch.Tensor, maskable: torch.Tensor, generator: torch.Generator, mask_prob: float,
                mask_id: int, random_range: tuple[int, int]) -> MaskingResult:
    """BERT-style corruption: select positions i.i.d. with ``mask_prob``; of
    those, 80% become the mask token, 10% a random token, 10% stay as is."""
    selected = (torch.rand(input_ids.shape, generator=generator) < mask_prob) & maskable
    action = torch.rand(input_ids.shape, generator=generator)
    masked = selected & (action < 0.8)
    randomized = selected & (action >= 0.8) & (action < 0.9)
    random_ids = torch.randint(random_range[0], random_range[1], input_ids.shape, generator=generator)
    corrupted = torch.where(masked, torch.full_like(input_ids, mask_id), input_ids)
    corrupted = torch.where(randomized, random_ids, corrupted)
    labels = torch.where(selected, input_ids, torch.full_like(input_ids, IGNORE_INDEX))
    return MaskingResult(corrupted, labels, selected, masked, randomized)


def mlm_step(model: TriggerTagger, batch: Batch, generator: torch.Generator,
             mask_prob: float = 0.15) -> tuple[torch.Tensor, int]:
    """MLM loss over the selected positions and their count.

    A batch in which nothing gets selected yields a zero loss with no graph.
    """
    if not model.mlm_enabled:
        raise DesignError("MLM is not enabled on this model")
    enc = model.encoder
    maskable = batch.attention_mask & ~enc.special_mask(batch.input_ids)
    m = mask_tokens(batch.input_ids, maskable, generator, mask_prob, enc.mask_id, enc.random_token_range)
    n_selected = int(m.selected.sum())
    if n_selected == 0:
        return torch.zeros(()), 0
    logits = enc.mlm_logits(enc(m.input_ids, batch.attention_mask))
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), m.labels.reshape(-1), ignore_index=IGNORE_INDEX), n_selected


# --------------------------------------------------------------------------- #
# checkpoints


@dataclass
class Checkpoint:
    """Weights plus everything needed to rebuild the model.

    On disk (``torch.save``): ``{"format_version", "design", "encoder_config",
    "rel_dim", "mlm", "state_dict", "meta"}``; ``meta`` carries the config hash,
    selected epoch and source-valid F1.
    """

    design: str
    encoder_config: dict
    rel_dim: Optional[int]
    mlm: bool
    state_dict: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: TriggerTagger, **meta) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.design, dict(model.encoder.config), model.rel_dim, model.mlm_enabled, state, dict(meta))

    def build(self, mlm: Optional[bool] = None, dropout: float = 0.1) -> TriggerTagger:
        model = TriggerTagger(self.design, make_encoder(self.encoder_config), rel_dim=self.rel_dim,
                              dropout=dropout, mlm=self.mlm if mlm is None else mlm)
        model.load_state_dict(self.state_dict)
        return model

    def save(self, path) -> None:
        path = Path(path)
        payload = {"format_version": CHECKPOINT_VERSION, "design": self.design, "encoder_config": self.encoder_config,
                   "rel_dim": self.rel_dim, "mlm": self.mlm, "state_dict": self.state_dict, "meta": self.meta}
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
        return cls(payload["design"], payload["encoder_config"], payload["rel_dim"], payload["mlm"],
                   payload["state_dict"], payload.get("meta", {}))
