"""Synthetic source/target corpora with controllable trigger-relation overlap.

Every sentence follows one clause template::

    filler+ DET NOUN VERB [PARTICLE] DET NOUN filler+

The verb is drawn from an event ("predicate") slice when the sentence has a
trigger and from a non-event slice otherwise; the trigger is the verb. With
probability ``overlap`` a trigger sentence's relation covers the verb
(optionally extended over the particle), otherwise it is misplaced onto one
of the noun phrases. Non-event clauses mostly carry their relation on a noun
phrase, the way copular clauses tend to yield only implicit extractions. The target domain swaps a ``vocab_shift`` share of every
content slice for unseen words; determiners and particles are shared.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, replace
from typing import Optional

from .corpus import Corpus, Sentence, SPLITS
from .oie_post import TripleExtraction

DETERMINERS = ("the", "a", "this", "that")
PARTICLES = ("into", "up", "over", "out", "down", "off")
TEMPLATE_MIN = 9


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 200
    n_predicates: int = 40
    n_nonevent: int = 20
    n_train: int = 600
    n_valid: int = 150
    n_test: int = 300
    target_n_train: Optional[int] = None
    target_n_valid: Optional[int] = None
    target_n_test: Optional[int] = None
    min_length: int = 9
    max_length: int = 16
    trigger_rate: float = 0.7
    relation_rate: float = 0.8
    overlap: float = 1.0
    relation_extension: float = 0.5
    particle_rate: float = 0.6
    nonevent_particle_rate: float = 0.2
    nonevent_relation_on_verb: float = 0.2
    vocab_shift: float = 0.5
    sentences_per_doc: int = 10
    noise_extractions: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("trigger_rate", "relation_rate", "overlap", "relation_extension", "particle_rate",
                     "nonevent_particle_rate", "nonevent_relation_on_verb", "vocab_shift", "noise_extractions"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.min_length < TEMPLATE_MIN or self.min_length > self.max_length:
            raise ValueError(f"sentence length range must satisfy {TEMPLATE_MIN} <= min_length <= max_length")
        if min(self.vocab_size, self.n_predicates, self.n_nonevent) < 1:
            raise ValueError("vocabulary slices must be non-empty")

    def to_dict(self) -> dict:
        return asdict(self)


def _slices(prefix: str, config: SynthConfig) -> dict[str, list[str]]:
    return {
        "noun": [f"{prefix}n{i}" for i in range(config.vocab_size)],
        "filler": [f"{prefix}f{i}" for i in range(config.vocab_size)],
        "pred": [f"{prefix}p{i}" for i in range(config.n_predicates)],
        "verb": [f"{prefix}v{i}" for i in range(config.n_nonevent)],
    }


def _shifted(source: dict[str, list[str]], shift: float, rng: random.Random) -> dict[str, list[str]]:
    out = {}
    for key, words in source.items():
        n_new = round(shift * len(words))
        replaced = set(rng.sample(range(len(words)), n_new))
        out[key] = [f"t{w[1:]}" if i in replaced else w for i, w in enumerate(words)]
    return out


@dataclass(frozen=True)
class _Layout:
    tokens: tuple[str, ...]
    trigger: Optional[tuple[int, int]]
    relation: Optional[tuple[int, int]]
    relation_covers_trigger: Optional[bool]


def _sentence(vocab, config: SynthConfig, rng: random.Random, rel_rng: random.Random) -> _Layout:
    """Tokens and trigger come from ``rng``; relation placement from ``rel_rng``,
    so changing the relation parameters leaves the text unchanged."""
    length = rng.randint(config.min_length, config.max_length)
    has_trigger = rng.random() < config.trigger_rate
    has_particle = rng.random() < (config.particle_rate if has_trigger else config.nonevent_particle_rate)
    core = 6 + has_particle
    n_pre = rng.randint(1, length - core - 1)
    n_post = length - core - n_pre
    verb = rng.choice(vocab["pred"] if has_trigger else vocab["verb"])
    tokens = [rng.choice(vocab["filler"]) for _ in range(n_pre)]
    subj = (len(tokens), len(tokens) + 2)
    tokens += [rng.choice(DETERMINERS), rng.choice(vocab["noun"])]
    v = len(tokens)
    tokens.append(verb)
    if has_particle:
        tokens.append(rng.choice(PARTICLES))
    obj = (len(tokens), len(tokens) + 2)
    tokens += [rng.choice(DETERMINERS), rng.choice(vocab["noun"])]
    tokens += [rng.choice(vocab["filler"]) for _ in range(n_post)]

    trigger = (v, v + 1) if has_trigger else None
    relation = covers = None
    draws = [rel_rng.random() for _ in range(4)]
    if draws[0] < config.relation_rate:
        extend = has_particle and draws[1] < config.relation_extension
        around_verb = (v, v + 1 + extend)
        noun_phrase = subj if draws[3] < 0.5 else obj
        if has_trigger:
            covers = draws[2] < config.overlap
            relation = around_verb if covers else noun_phrase
        else:
            relation = around_verb if draws[2] < config.nonevent_relation_on_verb else noun_phrase
    return _Layout(tuple(tokens), trigger, relation, covers)


def _corpus(name: str, prefix: str, vocab, config: SynthConfig, sizes, rng: random.Random,
            rel_rng: random.Random) -> Corpus:
    sentences = []
    for split, n in zip(SPLITS, sizes):
        for i in range(n):
            lay = _sentence(vocab, config, rng, rel_rng)
            sentences.append(Sentence(
                sentence_id=f"{prefix}-{split}-{i}",
                doc_id=f"{prefix}-{split}-doc{i // config.sentences_per_doc}",
                tokens=lay.tokens,
                trigger_spans=(lay.trigger,) if lay.trigger else (),
                relation_spans=(lay.relation,) if lay.relation else (),
                split=split,
            ))
    return Corpus(name, sentences)


def generate_pair(config: SynthConfig) -> tuple[Corpus, Corpus]:
    """Return ``(source, target)`` corpora, both carrying relation spans."""
    rng, rel_rng = random.Random(config.seed), random.Random(f"relations-{config.seed}")
    source_vocab = _slices("s", config)
    target_vocab = _shifted(source_vocab, config.vocab_shift, random.Random(f"shift-{config.seed}"))
    source = _corpus("synth-source", "src", source_vocab, config, (config.n_train, config.n_valid, config.n_test),
                     rng, rel_rng)
    target_sizes = (
        config.n_train if config.target_n_train is None else config.target_n_train,
        config.n_valid if config.target_n_valid is None else config.target_n_valid,
        config.n_test if config.target_n_test is None else config.target_n_test,
    )
    target = _corpus("synth-target", "tgt", target_vocab, config, target_sizes, rng, rel_rng)
    return source, target


def sample_layouts(config: SynthConfig, n: int, domain: str = "source") -> list[_Layout]:
    """Raw generator draws, exposing whether each relation covers its trigger."""
    rng, rel_rng = random.Random(config.seed), random.Random(f"relations-{config.seed}")
    vocab = _slices("s", config)
    if domain == "target":
        vocab = _shifted(vocab, config.vocab_shift, random.Random(f"shift-{config.seed}"))
    return [_sentence(vocab, config, rng, rel_rng) for _ in range(n)]


def strip_relations(corpus: Corpus) -> Corpus:
    return Corpus(corpus.name, [replace(s, relation_spans=None) for s in corpus.sentences], dropped=corpus.dropped)


def synth_extractions(corpus: Corpus, config: SynthConfig, extractor: str = "synth") -> list[TripleExtraction]:
    """OIE-style triples whose post-processing reproduces ``corpus``'s relations.

    Each relation span gets a complete S-R-O triple with one-token neighbours
    as subject and object. Noise triples that the post-processing rules must
    remove (implicit, non-consecutive, over-long, misordered, or shadowed by
    a longer overlapping relation) are mixed in at rate ``noise_extractions``.
    """
    rng = random.Random(config.seed + 1)
    out = []
    for sent in corpus.sentences:
        sid, n = sent.sentence_id, len(sent.tokens)
        for s, e in sent.relation_spans or ():
            out.append(TripleExtraction(sid, (s - 1,), tuple(range(s, e)), (e,), False, extractor))
            if e - s > 1 and rng.random() < config.noise_extractions:
                out.append(TripleExtraction(sid, (s - 1,), (s,), (s + 1,), False, extractor))
        if rng.random() < config.noise_extractions:
            kind = rng.randrange(4)
            if kind == 0:
                out.append(TripleExtraction(sid, (0,), (), (n - 1,), True, extractor))
            elif kind == 1 and n >= 5:
                out.append(TripleExtraction(sid, (0,), (1, 3), (4,), False, extractor))
            elif kind == 2 and n >= 8:
                out.append(TripleExtraction(sid, (0,), tuple(range(1, 7)), (7,), False, extractor))
            elif kind == 3 and n >= 3:
                out.append(TripleExtraction(sid, (n - 1,), (1,), (0,), False, extractor))
    return out
