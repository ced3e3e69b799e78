import itertools
import json
import math
import random
import statistics

import pytest

from oietd.corpus import Corpus, CorpusError, Sentence
from oietd.experiment import (
    MissingCheckpointError, RecordStore, RunRecord, aggregate, draw_fewshot, fewshot_pool, plan_matrix, plot_curves,
    run_matrix, write_report,
)
from oietd.regimes import RegimeConfig

from .conftest import SMALL_ENCODER


def pool_corpus(n, with_triggers_every=1):
    return Corpus("pool", [Sentence(f"s{i:05d}", "d", ("x", "y"), ((0, 1),) if i % with_triggers_every == 0 else ())
                           for i in range(n)])


def record(regime="sequential_transfer", design="vanilla", shots=5, seed=0, sample=0, f1=0.5, key=None):
    key = key or f"{regime}-{design}-{shots}-{seed}-{sample}"
    return RunRecord(key, regime, design, "minie", shots, seed, sample, False, f1, f1, f1, 1, 1, 1, 0, 0.1)


class TestFewShot:
    def test_only_trigger_sentences(self):
        c = pool_corpus(100, with_triggers_every=3)
        s = draw_fewshot(c, 10, 0)
        assert len(set(s.sentence_ids)) == 10
        assert all(x.has_triggers for x in s.sentences(c))
        assert list(s.sentence_ids) == sorted(s.sentence_ids)

    def test_exhaustion(self):
        c = pool_corpus(30, 3)
        assert list(draw_fewshot(c, 10, 4).sentence_ids) == [s.sentence_id for s in fewshot_pool(c)]

    def test_pool_too_small(self):
        with pytest.raises(CorpusError):
            draw_fewshot(pool_corpus(9, 3), 4, 0)

    def test_stable_and_input_order_independent(self):
        c = pool_corpus(200)
        shuffled = Corpus("pool", random.Random(0).sample(c.sentences, len(c)))
        assert draw_fewshot(c, 50, 2) == draw_fewshot(c, 50, 2) == draw_fewshot(shuffled, 50, 2)
        assert draw_fewshot(c, 50, 2, master_seed=1) != draw_fewshot(c, 50, 2)

    def test_overlap_matches_hypergeometric(self):
        n, k = 1500, 50
        c = pool_corpus(n)
        overlaps = []
        for master in range(40):
            draws = [set(draw_fewshot(c, k, i, master).sentence_ids) for i in range(5)]
            assert len({frozenset(d) for d in draws}) == 5
            overlaps += [len(a & b) for a, b in itertools.combinations(draws, 2)]
        expected = k * k / n
        sd = math.sqrt(k * (k / n) * (1 - k / n) * (n - k) / (n - 1))
        assert abs(statistics.mean(overlaps) - expected) < 4 * sd / math.sqrt(len(overlaps))


class TestAggregate:
    def test_constant(self):
        recs = [record(seed=s, sample=i, f1=0.42) for s in range(3) for i in range(5)]
        (cell,) = aggregate(recs)
        assert cell.mean == pytest.approx(0.42, abs=1e-15) and cell.sd == 0.0 and not cell.partial and cell.n == 15

    def test_fixture_oracle_and_permutation(self):
        values = [0.1, 0.25, 0.3, 0.05, 0.9, 0.7, 0.123, 0.456, 0.789, 0.0, 1.0, 0.5, 0.33, 0.66, 0.99]
        recs = [record(seed=i // 5, sample=i % 5, f1=v) for i, v in enumerate(values)]
        (cell,) = aggregate(recs)
        assert abs(cell.mean - sum(values) / 15) <= 1e-12
        assert abs(cell.sd - statistics.stdev(values)) <= 1e-12
        for seed in range(5):
            shuffled = random.Random(seed).sample(recs, len(recs))
            assert aggregate(shuffled) == [cell]

    def test_partial_flag_and_zero_shot(self):
        recs = [record(seed=s, sample=0) for s in range(3)]
        recs += [record("zero_shot", shots=0, seed=s, sample=0) for s in range(3)]
        cells = {c.regime: c for c in aggregate(recs)}
        assert cells["sequential_transfer"].partial and not cells["zero_shot"].partial

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_reports(self, tmp_path):
        recs = [record(design=d, seed=s, sample=i) for d in ("vanilla", "implicit") for s in range(3) for i in range(5)]
        cells = aggregate(recs)
        tsv = write_report(cells, tmp_path / "t.tsv").read_text().splitlines()
        assert tsv[0].split("\t") == ["regime", "shots", "mlm", "vanilla", "implicit"]
        assert "| sequential_transfer | 5 |" in write_report(cells, tmp_path / "t.md").read_text()
        assert len(json.loads(write_report(cells, tmp_path / "t.json").read_text())) == 2
        image, csv = plot_curves(cells, tmp_path / "f.png")
        assert image.stat().st_size > 0 and len(csv.read_text().splitlines()) == 3


class TestStore:
    def test_dedupe_and_torn_line(self, tmp_path):
        store = RecordStore(tmp_path)
        store.append(record(key="a"))
        store.append(record(key="a", f1=0.9))
        with store.records_path.open("a") as fh:
            fh.write('{"config_hash": "b", "regi')
        assert [r.config_hash for r in store.records()] == ["a"]
        assert store.records()[0].f1 == 0.5


class TestMatrix:
    def test_cell_count(self, small_pair):
        src, tgt = small_pair
        big = Corpus(tgt.name, list(tgt.sentences) + [Sentence(f"extra{i}", "d", ("x",), ((0, 1),)) for i in range(600)])
        _, jobs = plan_matrix(src, big, RegimeConfig(), designs=["vanilla"], regimes=["sequential_transfer"],
                              shot_levels=[0, 5, 10, 50, 100, 250, 500])
        assert sum(j.regime == "zero_shot" for j in jobs) == 3
        assert sum(j.regime == "sequential_transfer" for j in jobs) == 6 * 3 * 5
        assert len({j.key for j in jobs}) == len(jobs)

    def test_samples_consistent_across_regimes_and_designs(self, small_pair):
        src, tgt = small_pair
        _, jobs = plan_matrix(src, tgt, RegimeConfig(), shot_levels=[5], seeds=[0])
        by_index = {}
        for j in jobs:
            by_index.setdefault(j.sample.sample_index, set()).add(j.sample.sentence_ids)
        assert all(len(v) == 1 for v in by_index.values())

    def test_toy_matrix_resume(self, small_pair, tmp_path):
        src, tgt = small_pair
        base = RegimeConfig(epochs=1, lr=3e-3, encoder=SMALL_ENCODER)
        kw = dict(base=base, designs=["vanilla", "explicit"], regimes=["sequential_transfer", "joint_transfer"],
                  shot_levels=[0, 5], seeds=[0], samples=2)
        interrupted = RecordStore(tmp_path / "a")
        run_matrix(src, tgt, interrupted, limit=3, **kw)
        assert len(interrupted.records()) == 3
        resumed = run_matrix(src, tgt, interrupted, **kw)
        straight = run_matrix(src, tgt, RecordStore(tmp_path / "b"), **kw)
        assert len(resumed) == 2 + 2 * 2 * 2
        assert {r.config_hash for r in resumed} == {r.config_hash for r in straight}
        assert sorted((r.config_hash, r.f1) for r in resumed) == sorted((r.config_hash, r.f1) for r in straight)
        assert len(interrupted.records_path.read_text().splitlines()) == len(resumed)
        cells = aggregate(resumed, seeds=1, samples=2)
        assert {(c.regime, c.design) for c in cells} >= {("zero_shot", "vanilla"), ("joint_transfer", "explicit")}
        assert not any(c.partial for c in cells)

    def test_missing_checkpoint(self, small_pair, tmp_path):
        src, tgt = small_pair
        with pytest.raises(MissingCheckpointError):
            run_matrix(src, tgt, RecordStore(tmp_path), RegimeConfig(epochs=1, encoder=SMALL_ENCODER),
                       designs=["vanilla"], regimes=["sequential_transfer"], shot_levels=[5], seeds=[0], samples=1,
                       train_sources=False)

    def test_in_domain_needs_no_checkpoint(self, small_pair, tmp_path):
        src, tgt = small_pair
        recs = run_matrix(src, tgt, RecordStore(tmp_path), RegimeConfig(epochs=1, encoder=SMALL_ENCODER),
                          designs=["implicit"], regimes=["in_domain"], shot_levels=[5], seeds=[0], samples=1,
                          train_sources=False)
        assert len(recs) == 1 and recs[0].config["rel_dim"] == 10

    def test_workers(self, small_pair, tmp_path):
        src, tgt = small_pair
        kw = dict(base=RegimeConfig(epochs=1, lr=3e-3, encoder=SMALL_ENCODER), designs=["vanilla"],
                  regimes=["in_domain"], shot_levels=[5], seeds=[0, 1], samples=1)
        parallel = run_matrix(src, tgt, RecordStore(tmp_path / "p"), workers=2, **kw)
        serial = run_matrix(src, tgt, RecordStore(tmp_path / "s"), **kw)
        assert sorted((r.config_hash, r.f1) for r in parallel) == sorted((r.config_hash, r.f1) for r in serial)
