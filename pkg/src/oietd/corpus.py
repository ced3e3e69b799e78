"""Sentence/corpus data model, dataset readers and split construction.

Canonical on-disk format is JSON Lines, one sentence per line::

    {"sentence_id": "d1-0", "doc_id": "d1", "split": "train",
     "tokens": ["Markets", "fell", "sharply"],
     "trigger_spans": [[1, 2]],
     "relation_spans": [[1, 3]]}

Spans are ``[start, end)`` token offsets. ``relation_spans`` is ``null`` (or
absent) until relations have been extracted; an empty list means relations
were extracted and none survived post-processing.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
FORMATS = ("canonical-jsonl", "maven-json", "conll-like", "ace-json", "char-jsonl")

Span = tuple[int, int]


class CorpusError(ValueError):
    """Malformed corpus input."""


class SpanRangeError(CorpusError):
    """Span outside the sentence or with start >= end."""


def _check_spans(spans: Sequence[Span], n: int, what: str, sentence_id: str) -> None:
    for start, end in spans:
        if not 0 <= start < end <= n:
            raise SpanRangeError(f"{sentence_id}: {what} span {(start, end)} invalid for {n} tokens")
    ordered = sorted(spans)
    for (_, e1), (s2, _) in zip(ordered, ordered[1:]):
        if s2 < e1:
            raise CorpusError(f"{sentence_id}: overlapping {what} spans")


@dataclass(frozen=True)
class Sentence:
    sentence_id: str
    doc_id: str
    tokens: tuple[str, ...]
    trigger_spans: tuple[Span, ...] = ()
    relation_spans: Optional[tuple[Span, ...]] = None
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "trigger_spans", tuple(sorted(tuple(s) for s in self.trigger_spans)))
        if self.relation_spans is not None:
            object.__setattr__(self, "relation_spans", tuple(sorted(tuple(s) for s in self.relation_spans)))
        if not self.tokens:
            raise CorpusError(f"{self.sentence_id}: empty token list")
        if self.split not in SPLITS:
            raise CorpusError(f"{self.sentence_id}: unknown split {self.split!r}")
        _check_spans(self.trigger_spans, len(self.tokens), "trigger", self.sentence_id)
        if self.relation_spans is not None:
            _check_spans(self.relation_spans, len(self.tokens), "relation", self.sentence_id)

    @property
    def has_triggers(self) -> bool:
        return bool(self.trigger_spans)

    @property
    def has_relations(self) -> bool:
        return bool(self.relation_spans)

    def to_dict(self) -> dict:
        return {
            "sentence_id": self.sentence_id,
            "doc_id": self.doc_id,
            "split": self.split,
            "tokens": list(self.tokens),
            "trigger_spans": [list(s) for s in self.trigger_spans],
            "relation_spans": None if self.relation_spans is None else [list(s) for s in self.relation_spans],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Sentence":
        try:
            rel = record.get("relation_spans")
            return cls(
                sentence_id=str(record["sentence_id"]),
                doc_id=str(record.get("doc_id", record["sentence_id"])),
                tokens=tuple(record["tokens"]),
                trigger_spans=tuple(tuple(int(x) for x in s) for s in record.get("trigger_spans", ())),
                relation_spans=None if rel is None else tuple(tuple(int(x) for x in s) for s in rel),
                split=record.get("split", "train"),
            )
        except (KeyError, TypeError) as exc:
            raise CorpusError(f"malformed sentence record: {exc}") from exc


SplitStats = tuple[int, int, int]


def compute_stats(sentences: Iterable[Sentence]) -> dict[str, SplitStats]:
    """``(n_sentences, n_with_triggers, n_with_relations)`` per split."""
    counts = {s: [0, 0, 0] for s in SPLITS}
    for sent in sentences:
        c = counts[sent.split]
        c[0] += 1
        c[1] += sent.has_triggers
        c[2] += sent.has_relations
    return {s: tuple(c) for s, c in counts.items()}


@dataclass(frozen=True)
class Corpus:
    name: str
    sentences: tuple[Sentence, ...]
    stats: dict = field(default=None, compare=False)
    dropped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        seen = set()
        for sent in self.sentences:
            if sent.sentence_id in seen:
                raise CorpusError(f"duplicate sentence_id {sent.sentence_id!r} in corpus {self.name!r}")
            seen.add(sent.sentence_id)
        fresh = compute_stats(self.sentences)
        if self.stats is None:
            object.__setattr__(self, "stats", fresh)
        elif {k: tuple(v) for k, v in self.stats.items()} != fresh:
            raise CorpusError(f"stored stats {self.stats} disagree with sentences {fresh}")

    def split(self, name: str) -> list[Sentence]:
        return [s for s in self.sentences if s.split == name]

    def __len__(self) -> int:
        return len(self.sentences)

    def with_sentences(self, sentences: Iterable[Sentence], dropped: int = 0) -> "Corpus":
        return Corpus(self.name, tuple(sentences), dropped=self.dropped + dropped)

    @property
    def has_relation_tags(self) -> bool:
        return bool(self.sentences) and all(s.relation_spans is not None for s in self.sentences)


# --------------------------------------------------------------------------- #
# character span alignment

_WS = re.compile(r"\s+")


def token_char_offsets(raw_text: str, tokens: Sequence[str]) -> list[Span]:
    """Character offsets of each token in ``raw_text``.

    Whitespace runs between tokens are skipped (equivalently, collapsed to a
    single space). Raises :class:`CorpusError` if the tokens do not reproduce
    the text.
    """
    offsets = []
    pos = 0
    for tok in tokens:
        m = _WS.match(raw_text, pos)
        if m:
            pos = m.end()
        tok_norm = _WS.sub(" ", tok.strip())
        if not tok_norm or raw_text[pos:pos + len(tok_norm)] != tok_norm:
            raise CorpusError(f"token {tok!r} does not match text at offset {pos}")
        offsets.append((pos, pos + len(tok_norm)))
        pos += len(tok_norm)
    if raw_text[pos:].strip():
        raise CorpusError(f"text has trailing content not covered by tokens: {raw_text[pos:]!r}")
    return offsets


def align_spans(raw_text: str, tokens: Sequence[str], char_spans: Sequence[Span]) -> Optional[list[Span]]:
    """Map character spans onto token spans.

    Returns ``None`` (drop the sentence) if any span does not start and end
    exactly on token boundaries.
    """
    offsets = token_char_offsets(raw_text, tokens)
    starts = {s: i for i, (s, _) in enumerate(offsets)}
    ends = {e: i for i, (_, e) in enumerate(offsets)}
    out = []
    for cs, ce in char_spans:
        if cs not in starts or ce not in ends or ends[ce] < starts[cs]:
            return None
        out.append((starts[cs], ends[ce] + 1))
    return out


def project_to_chars(raw_text: str, tokens: Sequence[str], spans: Sequence[Span]) -> list[Span]:
    offsets = token_char_offsets(raw_text, tokens)
    return [(offsets[s][0], offsets[e - 1][1]) for s, e in spans]


# --------------------------------------------------------------------------- #
# readers / writers


def _unique_spans(spans: Iterable[Span]) -> list[Span]:
    return sorted(set(spans))


def _read_canonical(path: Path, name: str) -> Corpus:
    sentences = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            sentences.append(Sentence.from_dict(record))
    return Corpus(name, sentences)


def _maven_files(path: Path) -> list[tuple[Path, str]]:
    if path.is_dir():
        found = [(path / f"{s}.jsonl", s) for s in ("train", "valid", "test") if (path / f"{s}.jsonl").exists()]
        if not found:
            raise CorpusError(f"{path}: no train/valid/test .jsonl files")
        return found
    split = path.stem if path.stem in SPLITS else "train"
    return [(path, split)]


def _read_maven(path: Path, name: str) -> Corpus:
    """MAVEN document JSONL (one document per line with ``content`` and ``events``).

    A directory is read as ``train.jsonl``/``valid.jsonl``/``test.jsonl``.
    Documents without gold ``events`` (the unlabelled official test set) are
    skipped.
    """
    sentences = []
    for file, split in _maven_files(path):
        with file.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                    doc_id = str(doc["id"])
                    content = doc["content"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise CorpusError(f"{file}:{lineno}: {exc}") from exc
                if "events" not in doc:
                    continue
                per_sent = defaultdict(list)
                for event in doc["events"]:
                    for mention in event.get("mention", []):
                        start, end = mention["offset"]
                        per_sent[mention["sent_id"]].append((int(start), int(end)))
                for idx, sent in enumerate(content):
                    sentences.append(Sentence(
                        sentence_id=f"{doc_id}-{idx}",
                        doc_id=doc_id,
                        tokens=tuple(sent["tokens"]),
                        trigger_spans=tuple(_unique_spans(per_sent.get(idx, ()))),
                        split=split,
                    ))
    return Corpus(name, sentences)


def _read_conll(path: Path, name: str) -> Corpus:
    """Two-column ``token<TAB>tag`` blocks separated by blank lines.

    Any ``B-*``/``I-*`` tag marks a trigger. ``# doc_id = X`` and
    ``# split = Y`` comment lines set provenance for the following sentences.
    """
    from .tagging import TagError, decode_iob2

    sentences = []
    doc_id, split = "doc0", path.stem if path.stem in SPLITS else "train"
    tokens, tags = [], []

    def flush():
        if not tokens:
            return
        try:
            spans = decode_iob2([t if t == "O" else t.split("-", 1)[0] + "-TRG" for t in tags], repair=False)
        except TagError as exc:
            raise CorpusError(f"{path}: sentence {len(sentences)}: {exc}") from exc
        sentences.append(Sentence(f"{doc_id}-{len(sentences)}", doc_id, tuple(tokens), tuple(spans), None, split))
        tokens.clear()
        tags.clear()

    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key.strip() == "doc_id":
                    flush()
                    doc_id = value.strip()
                elif key.strip() == "split":
                    flush()
                    split = value.strip()
                continue
            if not line.strip():
                flush()
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise CorpusError(f"{path}:{lineno}: expected token<TAB>tag")
            tokens.append(cols[0])
            tags.append(cols[-1])
    flush()
    return Corpus(name, sentences)


def _read_ace(path: Path, name: str) -> Corpus:
    """JSON lists written by the common ACE 2005 preprocessing script.

    ``path`` is a directory holding ``train.json``/``dev.json``/``test.json``
    (``dev`` maps to ``valid``) or a single such file.
    """
    files = [(path / f"{s}.json", t) for s, t in (("train", "train"), ("dev", "valid"), ("test", "test"))] \
        if path.is_dir() else [(path, {"dev": "valid"}.get(path.stem, path.stem if path.stem in SPLITS else "train"))]
    sentences = []
    for file, split in files:
        if not file.exists():
            continue
        try:
            records = json.loads(file.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{file}: {exc}") from exc
        for idx, rec in enumerate(records):
            spans = [(m["trigger"]["start"], m["trigger"]["end"]) for m in rec.get("golden-event-mentions", [])]
            sentences.append(Sentence(
                sentence_id=f"{split}-{idx}",
                doc_id=str(rec.get("doc_id", f"{split}-{idx}")),
                tokens=tuple(rec["words"]),
                trigger_spans=tuple(_unique_spans(spans)),
                split=split,
            ))
    return Corpus(name, sentences)


def _read_char_jsonl(path: Path, name: str) -> Corpus:
    """Raw text + tokens + character-offset triggers (EDNYT/EVEXTRA style).

    Records: ``{"sentence_id", "doc_id", "split", "text", "tokens",
    "trigger_char_spans": [[s, e], ...]}``. Sentences whose triggers cannot be
    aligned to token boundaries are dropped and counted in ``Corpus.dropped``.
    """
    sentences, dropped = [], 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                spans = align_spans(rec["text"], rec["tokens"], [tuple(s) for s in rec.get("trigger_char_spans", [])])
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
            if spans is None:
                dropped += 1
                logger.info("dropping %s: trigger not aligned to tokens", rec["sentence_id"])
                continue
            sentences.append(Sentence(
                str(rec["sentence_id"]), str(rec.get("doc_id", rec["sentence_id"])), tuple(rec["tokens"]),
                tuple(_unique_spans(spans)), None, rec.get("split", "train"),
            ))
    if dropped:
        logger.warning("%s: dropped %d of %d sentences with unalignable triggers", path, dropped, dropped + len(sentences))
    return Corpus(name, sentences, dropped=dropped)


_READERS = {
    "canonical-jsonl": _read_canonical,
    "maven-json": _read_maven,
    "conll-like": _read_conll,
    "ace-json": _read_ace,
    "char-jsonl": _read_char_jsonl,
}


def load_corpus(path, format: str = "canonical-jsonl", name: Optional[str] = None) -> Corpus:
    path = Path(path)
    if format not in _READERS:
        raise CorpusError(f"unknown corpus format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise FileNotFoundError(path)
    return _READERS[format](path, name or path.stem)


def save_corpus(corpus: Corpus, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for sent in corpus.sentences:
            fh.write(json.dumps(sent.to_dict(), ensure_ascii=False) + "\n")
    tmp.replace(path)


# --------------------------------------------------------------------------- #
# split construction


def resplit_holdout(corpus: Corpus, fraction: float = 0.2, seed: int = 0) -> Corpus:
    """Move a random share of train sentences into a new valid split.

    Any existing valid split becomes the test split (existing test sentences
    are discarded, as for MAVEN whose official test set has no labels). The
    held-out count is ``ceil(fraction * n_train)``.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    train = corpus.split("train")
    if not train:
        raise CorpusError("resplit_holdout: empty train split")
    n_hold = math.ceil(fraction * len(train))
    held = set(random.Random(seed).sample(range(len(train)), n_hold))
    held_ids = {train[i].sentence_id for i in held}
    out = []
    for sent in corpus.sentences:
        if sent.split == "train":
            out.append(replace(sent, split="valid") if sent.sentence_id in held_ids else sent)
        elif sent.split == "valid":
            out.append(replace(sent, split="test"))
    return Corpus(corpus.name, out, dropped=corpus.dropped)


def split_by_article(corpus: Corpus, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2), seed: int = 0) -> Corpus:
    """Assign whole articles to train/valid/test at roughly ``ratios``.

    Articles are shuffled and then assigned greedily: each goes to the split
    with the largest remaining sentence deficit, so every split's realised
    share lands within one article of its target.
    """
    if abs(sum(ratios) - 1) > 1e-9 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive and sum to 1")
    by_doc: dict[str, list[Sentence]] = defaultdict(list)
    for sent in corpus.sentences:
        by_doc[sent.doc_id].append(sent)
    if len(by_doc) < 3:
        raise CorpusError(f"split_by_article needs at least 3 articles, got {len(by_doc)}")
    docs = sorted(by_doc)
    random.Random(seed).shuffle(docs)
    total = len(corpus)
    targets = [r * total for r in ratios]
    filled = [0, 0, 0]
    assignment = {}
    for doc in docs:
        k = max(range(3), key=lambda j: (targets[j] - filled[j], -j))
        assignment[doc] = SPLITS[k]
        filled[k] += len(by_doc[doc])
    out = [replace(s, split=assignment[s.doc_id]) for s in corpus.sentences]
    return Corpus(corpus.name, out, dropped=corpus.dropped)
