"""Turn raw OIE triple extractions into clean relation spans and RD tags.

Extraction files (JSON Lines) hold one extraction per line::

    {"sentence_id": "d1-0", "subject": [0, 1], "relation": [2, 3],
     "object": [4], "implicit": false, "extractor": "minie"}

Slot values are the token indices the extractor assigned to each slot (empty
list for a missing slot). The equivalent TSV layout is
``sentence_id<TAB>subject<TAB>relation<TAB>object<TAB>implicit<TAB>extractor``
with comma-separated indices and ``implicit`` as ``0``/``1``.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .corpus import Corpus, CorpusError, Sentence, SpanRangeError
from .tagging import RELATION, encode_iob2

MAX_RELATION_TOKENS = 5

Span = tuple[int, int]


def _slot_span(indices: Sequence[int]) -> Optional[Span]:
    if not indices:
        return None
    return (min(indices), max(indices) + 1)


def _consecutive(indices: Sequence[int]) -> bool:
    return bool(indices) and list(indices) == list(range(indices[0], indices[0] + len(indices)))


@dataclass(frozen=True)
class TripleExtraction:
    sentence_id: str
    subject: tuple[int, ...]
    relation: tuple[int, ...]
    object: tuple[int, ...]
    is_implicit: bool = False
    extractor: str = "other"

    @classmethod
    def from_spans(cls, sentence_id, subject: Span, relation: Span, object: Span, **kw) -> "TripleExtraction":
        return cls(sentence_id, tuple(range(*subject)), tuple(range(*relation)), tuple(range(*object)), **kw)

    @property
    def subject_span(self) -> Optional[Span]:
        return _slot_span(self.subject)

    @property
    def relation_span(self) -> Optional[Span]:
        return _slot_span(self.relation)

    @property
    def object_span(self) -> Optional[Span]:
        return _slot_span(self.object)

    @property
    def token_indices_per_slot(self) -> tuple[tuple[int, ...], ...]:
        return (self.subject, self.relation, self.object)

    def to_dict(self) -> dict:
        return {"sentence_id": self.sentence_id, "subject": list(self.subject), "relation": list(self.relation),
                "object": list(self.object), "implicit": self.is_implicit, "extractor": self.extractor}


def keep_extraction(ex: TripleExtraction) -> bool:
    if ex.is_implicit:
        return False
    if not all(_consecutive(slot) for slot in ex.token_indices_per_slot):
        return False
    subj, rel, obj = ex.subject_span, ex.relation_span, ex.object_span
    if rel[1] - rel[0] > MAX_RELATION_TOKENS:
        return False
    return subj[1] <= rel[0] and rel[1] <= obj[0]


def filter_extractions(extractions: Iterable[TripleExtraction]) -> list[TripleExtraction]:
    """Drop implicit, incomplete, non-consecutive, over-long and non S-R-O triples."""
    return [ex for ex in extractions if keep_extraction(ex)]


def merge_relations(relation_spans: Iterable[Span]) -> list[Span]:
    """Resolve token sharing between relation spans.

    Spans connected through shared tokens (transitively) form a cluster, and
    only the longest span of each cluster is kept; ties go to the smallest
    start, then to the earliest in input order. Output is sorted by start.
    """
    ordered = sorted(enumerate(relation_spans), key=lambda t: t[1][0])
    out = []
    cluster = []
    reach = 0
    for i, (s, e) in ordered:
        if cluster and s >= reach:
            out.append(_longest(cluster))
            cluster = []
        reach = max(reach, e) if cluster else e
        cluster.append((i, s, e))
    if cluster:
        out.append(_longest(cluster))
    return out


def _longest(cluster):
    _, s, e = min(cluster, key=lambda t: (t[1] - t[2], t[1], t[0]))
    return (s, e)


@dataclass(frozen=True)
class RelationTagging:
    sentence_id: str
    relation_spans: tuple[Span, ...]
    tags: tuple[str, ...]


def _check_range(ex: TripleExtraction, n_tokens: int) -> None:
    for slot in ex.token_indices_per_slot:
        for idx in slot:
            if not 0 <= idx < n_tokens:
                raise SpanRangeError(f"{ex.sentence_id}: extraction index {idx} outside {n_tokens} tokens")


def build_relation_tagging(sentence: Sentence, extractions: Iterable[TripleExtraction]) -> RelationTagging:
    extractions = list(extractions)
    for ex in extractions:
        if ex.sentence_id != sentence.sentence_id:
            raise ValueError(f"extraction for {ex.sentence_id!r} passed with sentence {sentence.sentence_id!r}")
        _check_range(ex, len(sentence.tokens))
    spans = merge_relations(ex.relation_span for ex in filter_extractions(extractions))
    tags = encode_iob2(spans, len(sentence.tokens), RELATION)
    return RelationTagging(sentence.sentence_id, tuple(spans), tuple(tags))


def dedupe_sentences(corpus: Corpus) -> Corpus:
    """Keep the first sentence of every identical token sequence, per split."""
    seen = set()
    kept = []
    for sent in corpus.sentences:
        key = (sent.split, sent.tokens)
        if key in seen:
            continue
        seen.add(key)
        kept.append(sent)
    return Corpus(corpus.name, kept, dropped=corpus.dropped + len(corpus) - len(kept))


def attach_relations(corpus: Corpus, extractions: Iterable[TripleExtraction], dedupe: bool = True) -> Corpus:
    """Post-process extractions for every sentence and store the relation spans.

    Sentences without any extraction get an empty relation list (all-``O``).
    Extractions naming unknown sentences raise :class:`CorpusError`.
    """
    by_sentence = defaultdict(list)
    for ex in extractions:
        by_sentence[ex.sentence_id].append(ex)
    ids = {s.sentence_id for s in corpus.sentences}
    unknown = set(by_sentence) - ids
    if unknown:
        raise CorpusError(f"extractions reference unknown sentences, e.g. {sorted(unknown)[:3]}")
    out = []
    for sent in corpus.sentences:
        tagging = build_relation_tagging(sent, by_sentence.get(sent.sentence_id, ()))
        out.append(replace(sent, relation_spans=tagging.relation_spans))
    result = Corpus(corpus.name, out, dropped=corpus.dropped)
    return dedupe_sentences(result) if dedupe else result


# --------------------------------------------------------------------------- #
# extraction file adapters


def _parse_indices(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(x) for x in text.split(",")) if text else ()


def read_extractions(path) -> list[TripleExtraction]:
    """Read a ``.jsonl`` or ``.tsv`` extraction file."""
    path = Path(path)
    out = []
    try:
        if path.suffix == ".tsv":
            with path.open(encoding="utf-8", newline="") as fh:
                for row in csv.reader(fh, delimiter="\t"):
                    if not row or row[0].startswith("#"):
                        continue
                    sid, subj, rel, obj = row[:4]
                    implicit = row[4].strip() in ("1", "true", "True") if len(row) > 4 else False
                    extractor = row[5].strip() if len(row) > 5 else "other"
                    out.append(TripleExtraction(sid, _parse_indices(subj), _parse_indices(rel),
                                                _parse_indices(obj), implicit, extractor))
        else:
            with path.open(encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    out.append(TripleExtraction(
                        str(rec["sentence_id"]), tuple(rec.get("subject", ())), tuple(rec.get("relation", ())),
                        tuple(rec.get("object", ())), bool(rec.get("implicit", False)), rec.get("extractor", "other"),
                    ))
    except (ValueError, KeyError) as exc:
        raise CorpusError(f"{path}: malformed extraction record: {exc}") from exc
    return out


def write_extractions(extractions: Iterable[TripleExtraction], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in extractions:
            fh.write(json.dumps(ex.to_dict()) + "\n")
