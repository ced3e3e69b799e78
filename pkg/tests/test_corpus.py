import json
import random
from collections import Counter

import pytest

from oietd.corpus import (
    Corpus, CorpusError, Sentence, SpanRangeError, align_spans, compute_stats, load_corpus, project_to_chars,
    resplit_holdout, save_corpus, split_by_article,
)


def sent(i, doc="d0", split="train", tokens=("a", "b", "c"), triggers=(), relations=None):
    return Sentence(f"s{i}", doc, tokens, triggers, relations, split)


def multiset(corpus):
    return Counter((s.sentence_id, s.tokens) for s in corpus.sentences)


class TestModel:
    def test_reversed_span_rejected(self):
        with pytest.raises(SpanRangeError):
            sent(0, triggers=[(5, 3)])

    def test_out_of_range_rejected(self):
        with pytest.raises(SpanRangeError):
            sent(0, triggers=[(2, 4)])

    def test_overlapping_triggers_rejected(self):
        with pytest.raises(CorpusError):
            sent(0, tokens=tuple("abcd"), triggers=[(0, 2), (1, 3)])

    def test_empty_tokens_rejected(self):
        with pytest.raises(CorpusError):
            sent(0, tokens=())

    def test_duplicate_ids_rejected(self):
        with pytest.raises(CorpusError):
            Corpus("c", [sent(0), sent(0)])

    def test_stats(self):
        c = Corpus("c", [sent(0, triggers=[(0, 1)], relations=[(1, 2)]), sent(1, split="valid"), sent(2, relations=[])])
        assert c.stats == {"train": (2, 1, 1), "valid": (1, 0, 0), "test": (0, 0, 0)}
        assert compute_stats(c.sentences) == c.stats

    def test_stale_stats_rejected(self):
        with pytest.raises(CorpusError):
            Corpus("c", [sent(0)], stats={"train": (2, 0, 0), "valid": (0, 0, 0), "test": (0, 0, 0)})


class TestLoaders:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        c = load_corpus(p)
        assert len(c) == 0
        assert all(v == (0, 0, 0) for v in c.stats.values())

    def test_canonical_round_trip(self, tmp_path):
        c = Corpus("c", [sent(0, triggers=[(1, 2)], relations=[(0, 2)]), sent(1, split="test")])
        save_corpus(c, tmp_path / "c.jsonl")
        back = load_corpus(tmp_path / "c.jsonl", name="c")
        assert back.sentences == c.sentences

    def test_canonical_bad_span(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(json.dumps({"sentence_id": "x", "tokens": ["a"] * 6, "trigger_spans": [[5, 3]]}) + "\n")
        with pytest.raises(SpanRangeError):
            load_corpus(p)

    def test_canonical_parse_error(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(CorpusError):
            load_corpus(p)

    def test_maven(self, tmp_path):
        doc = {
            "id": "doc1", "title": "t",
            "content": [{"sentence": "He broke into the house .", "tokens": ["He", "broke", "into", "the", "house", "."]},
                        {"sentence": "Nothing .", "tokens": ["Nothing", "."]}],
            "events": [{"id": "e1", "type": "Break", "mention": [
                {"id": "m1", "trigger_word": "broke", "sent_id": 0, "offset": [1, 2]}]}],
            "negative_triggers": [],
        }
        (tmp_path / "train.jsonl").write_text(json.dumps(doc) + "\n")
        (tmp_path / "valid.jsonl").write_text(json.dumps({**doc, "id": "doc2"}) + "\n")
        c = load_corpus(tmp_path, "maven-json", name="maven")
        assert c.stats["train"] == (2, 1, 0)
        assert c.stats["valid"] == (2, 1, 0)
        assert c.split("train")[0].trigger_spans == ((1, 2),)

    def test_conll(self, tmp_path):
        p = tmp_path / "train.conll"
        p.write_text("# doc_id = a1\nMarkets\tO\nfell\tB-Attack\nhard\tI-Attack\n\nOK\tO\n")
        c = load_corpus(p, "conll-like")
        assert [s.trigger_spans for s in c.sentences] == [((1, 3),), ()]
        assert c.sentences[0].doc_id == "a1"

    def test_ace(self, tmp_path):
        rec = {"sentence": "x", "words": ["They", "attacked", "."],
               "golden-event-mentions": [{"trigger": {"text": "attacked", "start": 1, "end": 2}, "event_type": "Attack"}]}
        (tmp_path / "train.json").write_text(json.dumps([rec]))
        (tmp_path / "dev.json").write_text(json.dumps([rec]))
        c = load_corpus(tmp_path, "ace-json")
        assert c.stats["train"] == (1, 1, 0) and c.stats["valid"] == (1, 1, 0)

    def test_char_jsonl_drops_unaligned(self, tmp_path):
        p = tmp_path / "ednyt.jsonl"
        rows = [
            {"sentence_id": "a", "text": "markets fell", "tokens": ["markets", "fell"], "trigger_char_spans": [[8, 12]]},
            {"sentence_id": "b", "text": "markets fell", "tokens": ["markets", "fell"], "trigger_char_spans": [[8, 10]]},
        ]
        p.write_text("".join(json.dumps(r) + "\n" for r in rows))
        c = load_corpus(p, "char-jsonl")
        assert len(c) == 1 and c.dropped == 1
        assert c.sentences[0].trigger_spans == ((1, 2),)

    def test_unknown_format(self, tmp_path):
        with pytest.raises(CorpusError):
            load_corpus(tmp_path, "xml")


class TestAlign:
    def test_exact_boundary(self):
        assert align_spans("markets fell", ["markets", "fell"], [(8, 12)]) == [(1, 2)]

    def test_mid_token_drops(self):
        assert align_spans("markets fell", ["markets", "fell"], [(8, 10)]) is None

    def test_whitespace_runs(self):
        assert align_spans("markets   fell\tsharply", ["markets", "fell", "sharply"], [(10, 22)]) == [(1, 3)]

    def test_no_space_tokens(self):
        assert align_spans("fell.", ["fell", "."], [(0, 4)]) == [(0, 1)]

    def test_inconsistent_tokens(self):
        with pytest.raises(CorpusError):
            align_spans("markets fell", ["markets", "rose"], [])

    def test_round_trip_fuzz(self):
        rng = random.Random(0)
        words = ["a", "bb", "ccc", "dddd", ",", "."]
        for _ in range(1000):
            tokens = [rng.choice(words) for _ in range(rng.randint(1, 12))]
            text = "".join(t + rng.choice(["", " ", "  ", "\n"]) for t in tokens)
            # tokens glued without a separator must stay distinguishable
            text = " ".join(tokens) if any(a[-1] == b[0] for a, b in zip(tokens, tokens[1:])) else text
            s = rng.randrange(len(tokens))
            e = rng.randint(s + 1, len(tokens))
            chars = project_to_chars(text, tokens, [(s, e)])
            assert align_spans(text, tokens, chars) == [(s, e)]
            assert project_to_chars(text, tokens, align_spans(text, tokens, chars)) == chars


class TestSplits:
    def corpus(self, n=100, docs=10):
        return Corpus("c", [sent(i, doc=f"d{i % docs}") for i in range(n)])

    def test_holdout(self):
        c = self.corpus()
        out = resplit_holdout(c, 0.2, seed=7)
        assert out.stats["train"][0] == 80 and out.stats["valid"][0] == 20
        assert multiset(out) == multiset(c)
        assert resplit_holdout(c, 0.2, seed=7).sentences == out.sentences

    def test_holdout_valid_becomes_test(self):
        c = Corpus("c", [sent(i) for i in range(10)] + [sent(10 + i, split="valid") for i in range(4)])
        out = resplit_holdout(c, 0.2, seed=0)
        assert out.stats["test"][0] == 4 and out.stats["valid"][0] == 2

    def test_holdout_maven_sizes(self):
        # official MAVEN train has 32431 sentences; the re-split leaves 25944 / 6487
        c = Corpus("m", [Sentence(f"s{i}", "d", ("x",)) for i in range(32431)])
        out = resplit_holdout(c, 0.2, seed=0)
        assert out.stats["train"][0] == 25944 and out.stats["valid"][0] == 6487

    def test_holdout_empty_train(self):
        with pytest.raises(CorpusError):
            resplit_holdout(Corpus("c", [sent(0, split="test")]), 0.2)

    def test_article_split(self):
        c = self.corpus(100, 10)
        out = split_by_article(c, seed=1)
        docs_per_split = {s: {x.doc_id for x in out.split(s)} for s in ("train", "valid", "test")}
        assert [len(docs_per_split[s]) for s in ("train", "valid", "test")] == [7, 1, 2]
        assert multiset(out) == multiset(c)
        assert split_by_article(c, seed=1).sentences == out.sentences

    def test_article_split_single_doc(self):
        with pytest.raises(CorpusError):
            split_by_article(self.corpus(10, 1))

    def test_article_split_deviation_bound(self):
        rng = random.Random(3)
        sentences, i = [], 0
        sizes = [rng.randint(1, 30) for _ in range(1000)]
        for d, size in enumerate(sizes):
            for _ in range(size):
                sentences.append(sent(i, doc=f"d{d}"))
                i += 1
        c = Corpus("c", sentences)
        out = split_by_article(c, seed=5)
        n = len(c)
        for split, ratio in zip(("train", "valid", "test"), (0.7, 0.1, 0.2)):
            realised = out.stats[split][0] / n
            assert abs(realised - ratio) <= max(sizes) / n
        for d in range(len(sizes)):
            assert len({s.split for s in out.sentences if s.doc_id == f"d{d}"}) == 1
