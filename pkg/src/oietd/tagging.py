"""IOB2 encoding/decoding, subword loss masks and strict span-level scoring."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

OUTSIDE = "O"
TRIGGER = "TRG"
RELATION = "REL"
SPAN_TYPES = (TRIGGER, RELATION)

Span = tuple[int, int]


class TagError(ValueError):
    """Invalid tag sequence or inconsistent inputs."""


def label_set(span_type: str) -> tuple[str, str, str]:
    """Class order used by the classification heads: O, B-X, I-X."""
    return (OUTSIDE, f"B-{span_type}", f"I-{span_type}")


def _split(tag: str) -> tuple[str, Optional[str]]:
    if tag == OUTSIDE:
        return OUTSIDE, None
    prefix, _, kind = tag.partition("-")
    if prefix not in ("B", "I") or not kind:
        raise TagError(f"malformed tag {tag!r}")
    return prefix, kind


def encode_iob2(spans: Iterable[Span], length: int, span_type: str = TRIGGER) -> list[str]:
    """Tag ``length`` tokens with ``B-X``/``I-X`` over ``spans``; ``O`` elsewhere."""
    tags = [OUTSIDE] * length
    for start, end in sorted(spans):
        if not 0 <= start < end <= length:
            raise TagError(f"span {(start, end)} out of range for length {length}")
        if any(t != OUTSIDE for t in tags[start:end]):
            raise TagError(f"overlapping span {(start, end)}")
        tags[start] = f"B-{span_type}"
        for i in range(start + 1, end):
            tags[i] = f"I-{span_type}"
    return tags


def is_valid_iob2(tags: Sequence[str]) -> bool:
    prev_kind = None
    for tag in tags:
        prefix, kind = _split(tag)
        if prefix == "I" and kind != prev_kind:
            return False
        prev_kind = kind
    return True


def decode_typed(tags: Sequence[str], repair: bool = True) -> list[tuple[int, int, str]]:
    """Decode to ``(start, end, type)`` triples.

    A stray ``I-X`` (after ``O``, at position 0, or after another type) opens a
    new span when ``repair`` is set and raises :class:`TagError` otherwise.
    """
    spans = []
    start = kind = None
    for i, tag in enumerate(tags):
        prefix, tag_kind = _split(tag)
        if prefix == "I" and tag_kind == kind:
            continue
        if prefix == "I" and not repair:
            raise TagError(f"invalid transition to {tag!r} at position {i}")
        if kind is not None:
            spans.append((start, i, kind))
        start, kind = (i, tag_kind) if prefix != OUTSIDE else (None, None)
    if kind is not None:
        spans.append((start, len(tags), kind))
    return spans


def decode_iob2(tags: Sequence[str], repair: bool = True) -> list[Span]:
    return [(s, e) for s, e, _ in decode_typed(tags, repair=repair)]


def repair_iob2(tags: Sequence[str]) -> list[str]:
    """Rewrite stray ``I-X`` tags as ``B-X``; valid sequences pass through unchanged."""
    out = [OUTSIDE] * len(tags)
    for start, end, kind in decode_typed(tags, repair=True):
        out[start] = f"B-{kind}"
        for i in range(start + 1, end):
            out[i] = f"I-{kind}"
    return out


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "EvalResult":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        return cls(p, r, f1, tp, fp, fn)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_lengths(gold, pred):
    if len(gold) != len(pred):
        raise TagError(f"length mismatch: {len(gold)} gold vs {len(pred)} predicted sentences")
    for i, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise TagError(f"length mismatch in sentence {i}: {len(g)} gold vs {len(p)} predicted tags")


def strict_micro_prf(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> EvalResult:
    """Span-level micro P/R/F1 with exact boundary and type match.

    Predictions are decoded with stray-``I`` repair; gold must be valid IOB2.
    """
    _check_lengths(gold, pred)
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        gold_spans = set(decode_typed(g, repair=False))
        pred_spans = set(decode_typed(p, repair=True))
        hit = len(gold_spans & pred_spans)
        tp += hit
        fp += len(pred_spans) - hit
        fn += len(gold_spans) - hit
    return EvalResult.from_counts(tp, fp, fn)


def token_micro_prf(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> EvalResult:
    """Token-level micro scores over non-``O`` tags (diagnostic only)."""
    _check_lengths(gold, pred)
    tp = fp = fn = 0
    for g, p in zip(gold, pred):
        for gt, pt in zip(g, p):
            if gt == pt:
                tp += gt != OUTSIDE
                continue
            fp += pt != OUTSIDE
            fn += gt != OUTSIDE
    return EvalResult.from_counts(tp, fp, fn)


def first_subword_mask(word_tokens: Sequence[str], subword_alignment: Sequence[Optional[int]]) -> list[bool]:
    """True at the first subword of every word.

    ``subword_alignment`` gives the word index of each subword; ``None`` marks
    special tokens, which are never selected.
    """
    mask = []
    prev = -1
    for word_index in subword_alignment:
        if word_index is None:
            mask.append(False)
            continue
        if word_index < prev:
            raise TagError("subword alignment must be non-decreasing")
        if word_index > prev + 1:
            raise TagError(f"alignment gap: word {prev + 1} has no subwords")
        mask.append(word_index != prev)
        prev = word_index
    if prev != len(word_tokens) - 1:
        raise TagError(f"alignment gap: word {prev + 1} has no subwords")
    return mask
