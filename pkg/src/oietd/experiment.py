"""Few-shot sampling, the experiment matrix, aggregation and reporting.

A matrix run writes into a record store directory::

    store/
      records.jsonl            one RunRecord per finished run (append-only)
      checkpoints/<hash>.pt    source-trained checkpoints, reused across cells
      logs/<hash>.jsonl        per-run metric log (epochs, losses, lr, P/R/F1)

Every run is keyed by a hash of its full configuration, so an interrupted
matrix resumes by skipping the hashes already present in ``records.jsonl``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import random
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .corpus import Corpus, CorpusError, Sentence
from .model import Checkpoint, DESIGNS, evaluate_model
from .regimes import (REGIMES, RegimeConfig, alternate_with_mlm, config_hash, in_domain_training, joint_training,
                      joint_transfer, sequential_transfer, train_on_source, zero_shot_eval)

logger = logging.getLogger(__name__)

SHOT_LEVELS = (0, 5, 10, 50, 100, 250, 500)
SEEDS = (0, 1, 2)
N_SAMPLES = 5
ZERO_SHOT = "zero_shot"
RECORDS_FILE = "records.jsonl"
TRANSFER_REGIMES = ("joint_transfer", "sequential_transfer")


class MissingCheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------------------- #
# few-shot sampling


@dataclass(frozen=True)
class FewShotSample:
    target_corpus: str
    shots: int
    sample_index: int
    sentence_ids: tuple[str, ...]

    def sentences(self, corpus: Corpus) -> list[Sentence]:
        by_id = {s.sentence_id: s for s in corpus.split("train")}
        return [by_id[i] for i in self.sentence_ids]


def fewshot_pool(corpus: Corpus) -> list[Sentence]:
    """Trigger-bearing train sentences in canonical (id) order."""
    return sorted((s for s in corpus.split("train") if s.has_triggers), key=lambda s: s.sentence_id)


def draw_fewshot(corpus: Corpus, k: int, sample_index: int, master_seed: int = 0) -> FewShotSample:
    """``k`` distinct trigger-bearing train sentences.

    The draw depends only on ``(master_seed, corpus.name, k, sample_index)``,
    so every regime and design sees the same few-shot set.
    """
    pool = fewshot_pool(corpus)
    if k < 1:
        raise ValueError("k must be positive")
    if len(pool) < k:
        raise CorpusError(f"{corpus.name}: only {len(pool)} trigger sentences for a {k}-shot sample")
    rng = random.Random(f"fewshot:{master_seed}:{corpus.name}:{k}:{sample_index}")
    ids = sorted(s.sentence_id for s in rng.sample(pool, k))
    return FewShotSample(corpus.name, k, sample_index, tuple(ids))


# --------------------------------------------------------------------------- #
# records


@dataclass(frozen=True)
class RunRecord:
    config_hash: str
    regime: str
    design: str
    extractor: str
    shots: int
    seed: int
    sample_index: int
    mlm: bool
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    selected_epoch: int
    wall_time: float
    source: str = ""
    target: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> "RunRecord":
        return cls(**record)


class RecordStore:
    """Append-only JSONL record store plus checkpoint and log directories."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "checkpoints").mkdir(exist_ok=True)
        (self.root / "logs").mkdir(exist_ok=True)

    @property
    def records_path(self) -> Path:
        return self.root / RECORDS_FILE

    def records(self) -> list[RunRecord]:
        """Stored records, first occurrence per hash; a torn final line is ignored."""
        if not self.records_path.exists():
            return []
        out, seen = [], set()
        lines = self.records_path.read_text(encoding="utf-8").splitlines()
        for n, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                rec = RunRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError):
                if n == len(lines) - 1:
                    logger.warning("ignoring incomplete trailing record in %s", self.records_path)
                    continue
                raise
            if rec.config_hash not in seen:
                seen.add(rec.config_hash)
                out.append(rec)
        return out

    def completed(self) -> set[str]:
        return {r.config_hash for r in self.records()}

    def append(self, record: RunRecord) -> None:
        line = json.dumps(record.to_dict(), sort_keys=True) + "\n"
        with self.records_path.open("a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    def checkpoint_path(self, key: str) -> Path:
        return self.root / "checkpoints" / f"{key}.pt"

    def log_path(self, key: str) -> Path:
        return self.root / "logs" / f"{key}.jsonl"


def default_store_root() -> Path:
    return Path(os.environ.get("OIETD_STORE", "runs"))


# --------------------------------------------------------------------------- #
# the matrix


@dataclass(frozen=True)
class Job:
    key: str
    regime: str
    config: RegimeConfig
    sample: Optional[FewShotSample]
    source_key: Optional[str]


def _run_key(config: RegimeConfig, **extra) -> str:
    return config_hash({"config": config.to_dict(), **extra})


def source_config(base: RegimeConfig, design: str, seed: int, mlm: bool, rel_dim: Optional[int]) -> RegimeConfig:
    return replace(base, regime="source", design=design, seed=seed, mlm=mlm, shots=0, sample_index=0,
                   rel_dim=rel_dim if design == "implicit" else None, lr_rel=base.lr_rel if design == "implicit" else None)


def _source_key(config: RegimeConfig, source: Corpus, target: Corpus, extractor: str) -> str:
    # MLM source stages read target train, so the target takes part in the key
    return _run_key(config, stage="source", source=source.name, target=target.name if config.mlm else "",
                    extractor=extractor)


def plan_matrix(source: Corpus, target: Corpus, base: RegimeConfig, designs: Sequence[str] = DESIGNS,
                regimes: Sequence[str] = REGIMES, shot_levels: Sequence[int] = SHOT_LEVELS,
                seeds: Sequence[int] = SEEDS, samples: int = N_SAMPLES, mlm: bool = False,
                implicit_rel_dim: Optional[int] = 10, master_seed: int = 0,
                extractor: str = "minie") -> tuple[dict[str, RegimeConfig], list[Job]]:
    """All source stages and evaluation cells, in execution order.

    0-shot cells evaluate a source checkpoint once per seed; few-shot cells
    run ``len(seeds) * samples`` times per (regime, design, shots).
    """
    for d in designs:
        if d not in DESIGNS:
            raise ValueError(f"unknown design {d!r}")
    for r in regimes:
        if r not in REGIMES:
            raise ValueError(f"unknown regime {r!r}")
    sources: dict[str, RegimeConfig] = {}
    jobs: list[Job] = []
    common = {"source": source.name, "target": target.name, "extractor": extractor, "master_seed": master_seed}

    def source_for(design, seed):
        cfg = source_config(base, design, seed, mlm, implicit_rel_dim)
        key = _source_key(cfg, source, target, extractor)
        sources.setdefault(key, cfg)
        return key

    if 0 in shot_levels:
        for design in designs:
            for seed in seeds:
                skey = source_for(design, seed)
                cfg = replace(sources[skey], regime="sequential_transfer", shots=0)
                jobs.append(Job(_run_key(cfg, stage=ZERO_SHOT, source_key=skey, **common), ZERO_SHOT, cfg, None, skey))
    for regime in regimes:
        for shots in (k for k in shot_levels if k > 0):
            for design in designs:
                for seed in seeds:
                    for index in range(samples):
                        sample = draw_fewshot(target, shots, index, master_seed)
                        cfg = replace(base, regime=regime, design=design, shots=shots, seed=seed, sample_index=index,
                                      mlm=mlm, lr_rel=base.lr_rel if design == "implicit" else None,
                                      rel_dim=None)
                        skey = source_for(design, seed) if regime in TRANSFER_REGIMES else None
                        key = _run_key(cfg, stage=regime, source_key=skey, sample=list(sample.sentence_ids), **common)
                        jobs.append(Job(key, regime, cfg, sample, skey))
    return sources, jobs


def _train_source(config: RegimeConfig, source: Corpus, target: Corpus, log_path) -> Checkpoint:
    if config.mlm:
        return alternate_with_mlm("source", config, target.split("train"), source=source, log_path=log_path).checkpoint
    return train_on_source(config, source, log_path=log_path).checkpoint


def _execute(job: Job, source: Corpus, target: Corpus, checkpoint: Optional[Checkpoint], log_path,
             extractor: str) -> RunRecord:
    start = time.perf_counter()
    test = target.split("test")
    valid = target.split("valid")
    cfg = job.config
    if log_path is not None and Path(log_path).exists():
        Path(log_path).unlink()
    if job.regime == ZERO_SHOT:
        result, epoch = zero_shot_eval(checkpoint, test), checkpoint.meta.get("selected_epoch", -1)
        config_dict = cfg.to_dict()
    else:
        fewshot = job.sample.sentences(target)
        kw = {"fewshot": fewshot, "target_valid": valid, "log_path": log_path}
        if cfg.mlm:
            extra = {"source": source, "checkpoint": checkpoint}
            regime = job.regime
            if regime == "sequential_transfer":
                # the MLM alternation already happened in the source stage
                trained = sequential_transfer(cfg, checkpoint, fewshot, valid, log_path=log_path)
            else:
                trained = alternate_with_mlm(regime, cfg, target.split("train"), **extra, **kw)
        elif job.regime == "in_domain":
            trained = in_domain_training(cfg, **kw)
        elif job.regime == "joint_training":
            trained = joint_training(cfg, source, **kw)
        elif job.regime == "joint_transfer":
            trained = joint_transfer(cfg, checkpoint, source, **kw)
        else:
            trained = sequential_transfer(cfg, checkpoint, fewshot, valid, log_path=log_path)
        result, epoch = evaluate_model(trained.model, test), trained.selected_epoch
        config_dict = trained.config.to_dict()
    return RunRecord(job.key, job.regime, cfg.design, extractor, cfg.shots, cfg.seed, cfg.sample_index, cfg.mlm,
                     result.precision, result.recall, result.f1, result.tp, result.fp, result.fn, epoch,
                     round(time.perf_counter() - start, 3), source.name, target.name, config_dict)


def _execute_from_path(job, source, target, checkpoint_path, log_path, extractor):
    ckpt = Checkpoint.load(checkpoint_path) if checkpoint_path is not None else None
    return _execute(job, source, target, ckpt, log_path, extractor)


def run_matrix(source: Corpus, target: Corpus, store: RecordStore, base: Optional[RegimeConfig] = None,
               designs: Sequence[str] = DESIGNS, regimes: Sequence[str] = REGIMES,
               shot_levels: Sequence[int] = SHOT_LEVELS, seeds: Sequence[int] = SEEDS, samples: int = N_SAMPLES,
               mlm: bool = False, implicit_rel_dim: Optional[int] = 10, master_seed: int = 0,
               extractor: str = "minie", train_sources: bool = True, workers: int = 1,
               limit: Optional[int] = None) -> list[RunRecord]:
    """Execute every missing cell and return the full record set for this matrix.

    Source checkpoints are trained on demand (and cached in the store) unless
    ``train_sources`` is false, in which case a missing one is an error.
    ``limit`` stops after that many new runs, which is how interruption is
    simulated in tests.
    """
    base = base or RegimeConfig()
    sources, jobs = plan_matrix(source, target, base, designs, regimes, shot_levels, seeds, samples, mlm,
                                implicit_rel_dim, master_seed, extractor)
    done = store.completed()
    todo = [j for j in jobs if j.key not in done]
    needed = {j.source_key for j in todo if j.source_key is not None}
    for key in sorted(needed, key=lambda k: list(sources).index(k)):
        path = store.checkpoint_path(key)
        if path.exists():
            continue
        if not train_sources:
            raise MissingCheckpointError(f"source checkpoint {key} not found in {store.root / 'checkpoints'}")
        logger.info("training source checkpoint %s", key)
        _train_source(sources[key], source, target, store.log_path(key)).save(path)
    if limit is not None:
        todo = todo[:limit]
    args = [(j, source, target, store.checkpoint_path(j.source_key) if j.source_key else None, store.log_path(j.key),
             extractor) for j in todo]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for record in pool.map(_execute_from_path, *zip(*args)) if args else ():
                store.append(record)
    else:
        for a in args:
            store.append(_execute_from_path(*a))
    keys = {j.key for j in jobs}
    return [r for r in store.records() if r.config_hash in keys]


# --------------------------------------------------------------------------- #
# aggregation and reporting


@dataclass(frozen=True)
class Cell:
    regime: str
    design: str
    shots: int
    mlm: bool
    n: int
    mean: float
    sd: float
    partial: bool


def aggregate(records: Iterable[RunRecord], seeds: int = len(SEEDS), samples: int = N_SAMPLES) -> list[Cell]:
    """Mean and sample standard deviation of F1 per (regime, design, shots, mlm).

    A cell with fewer runs than its full complement (``seeds`` for 0-shot,
    ``seeds * samples`` otherwise) is flagged ``partial``.
    """
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r.regime, r.design, r.shots, r.mlm), []).append(r.f1)
    if not groups:
        raise ValueError("no records to aggregate")
    cells = []
    for (regime, design, shots, mlm), values in sorted(groups.items(), key=lambda kv: _cell_order(*kv[0])):
        values = sorted(values)
        mean = math.fsum(values) / len(values)
        sd = statistics.stdev(values) if len(values) > 1 else 0.0
        expected = seeds if shots == 0 else seeds * samples
        cells.append(Cell(regime, design, shots, mlm, len(values), mean, sd, len(values) < expected))
    return cells


def _cell_order(regime, design, shots, mlm):
    order = (ZERO_SHOT,) + REGIMES
    return (mlm, order.index(regime) if regime in order else len(order), shots,
            DESIGNS.index(design) if design in DESIGNS else len(DESIGNS))


def table_rows(cells: Sequence[Cell]) -> tuple[list[str], list[list[str]]]:
    """Rows are (regime, shots[, MLM]); columns are designs with ``mean ± sd``."""
    designs = [d for d in DESIGNS if any(c.design == d for c in cells)]
    rows: dict[tuple, dict[str, Cell]] = {}
    for c in cells:
        rows.setdefault((c.mlm, c.regime, c.shots), {})[c.design] = c
    header = ["regime", "shots", "mlm"] + designs
    body = []
    for (mlm, regime, shots), by_design in rows.items():
        row = [regime, str(shots), "yes" if mlm else "no"]
        for d in designs:
            c = by_design.get(d)
            row.append("" if c is None else f"{c.mean:.3f} ± {c.sd:.3f}" + (f" (partial, n={c.n})" if c.partial else ""))
        body.append(row)
    return header, body


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_report(cells: Sequence[Cell], path, fmt: Optional[str] = None) -> Path:
    """Write the aggregated table as ``tsv``, ``md`` or ``json`` (inferred from the suffix)."""
    path = Path(path)
    fmt = fmt or {".md": "md", ".json": "json"}.get(path.suffix, "tsv")
    if fmt == "json":
        text = json.dumps([asdict(c) for c in cells], indent=2) + "\n"
    else:
        header, body = table_rows(cells)
        if fmt == "md":
            lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
            lines += ["| " + " | ".join(r) + " |" for r in body]
        elif fmt == "tsv":
            lines = ["\t".join(header)] + ["\t".join(r) for r in body]
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        text = "\n".join(lines) + "\n"
    _atomic_write(path, text)
    return path


def plot_curves(cells: Sequence[Cell], path, regimes: Optional[Sequence[str]] = None) -> tuple[Path, Path]:
    """F1-vs-shots curves, one panel per regime, shots on an ordinal axis.

    The 0-shot point is shared by every panel. Writes the image and a CSV of
    the plotted points next to it.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    regimes = list(regimes or [r for r in REGIMES if any(c.regime == r for c in cells)])
    if not regimes:
        raise ValueError("nothing to plot")
    shots = sorted({c.shots for c in cells})
    zero = {(c.design, c.mlm): c for c in cells if c.regime == ZERO_SHOT}
    fig, axes = plt.subplots(1, len(regimes), figsize=(4 * len(regimes), 3.4), sharey=True, squeeze=False)
    csv_lines = ["regime,design,mlm,shots,mean,sd,n"]
    for ax, regime in zip(axes[0], regimes):
        for design in DESIGNS:
            for mlm in (False, True):
                pts = [c for c in cells if c.regime == regime and c.design == design and c.mlm == mlm]
                if (design, mlm) in zero:
                    pts = [zero[(design, mlm)]] + pts
                if not pts:
                    continue
                pts.sort(key=lambda c: c.shots)
                xs = [shots.index(c.shots) for c in pts]
                label = design + (" + MLM" if mlm else "")
                ax.errorbar(xs, [c.mean for c in pts], yerr=[c.sd for c in pts], marker="o", capsize=2,
                            linestyle="--" if mlm else "-", label=label)
                csv_lines += [f"{regime},{design},{int(mlm)},{c.shots},{c.mean!r},{c.sd!r},{c.n}" for c in pts]
        ax.set_title(regime.replace("_", " "))
        ax.set_xticks(range(len(shots)), [str(s) for s in shots])
        ax.set_xlabel("shots")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("TD micro F1")
    axes[0][-1].legend(fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name("tmp-" + path.name)
    fig.savefig(tmp)
    plt.close(fig)
    tmp.replace(path)
    csv_path = path.with_suffix(".csv")
    _atomic_write(csv_path, "\n".join(csv_lines) + "\n")
    return path, csv_path
