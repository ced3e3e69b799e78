"""Source training, the four few-shot regimes, MLM alternation and model selection."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

import torch
from torch.optim.lr_scheduler import LambdaLR

from .corpus import Corpus, CorpusError, Sentence
from .model import (Checkpoint, DesignError, REL_DIMS, TriggerTagger, build_model, collate, evaluate_model,
                    mlm_step, tensor_digest)
from .tagging import EvalResult

logger = logging.getLogger(__name__)

REGIMES = ("in_domain", "joint_training", "joint_transfer", "sequential_transfer")
IN_DOMAIN_REL_DIM = 10
JOINT_TRAINING_REL_DIM = 300
REL_LRS = (1e-4, 5e-5, 1e-5)
ARGMAX_MIN_SHOTS = 50
CLIP_TOLERANCE = 1e-6


@dataclass(frozen=True)
class RegimeConfig:
    regime: str = "sequential_transfer"
    design: str = "vanilla"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-5
    lr_decay: float = 0.99
    grad_clip: float = 1.0
    mlm: bool = False
    mask_prob: float = 0.15
    shots: int = 0
    seed: int = 0
    sample_index: int = 0
    rel_dim: Optional[int] = None
    lr_rel: Optional[float] = None
    dropout: float = 0.1
    source_per_batch: int = 27
    target_per_batch: int = 5
    encoder: dict = field(default_factory=lambda: {"kind": "toy"})

    def __post_init__(self):
        if self.regime not in REGIMES + ("source",):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainResult:
    model: TriggerTagger
    checkpoint: Checkpoint
    selected_epoch: int
    log: list[dict]
    config: RegimeConfig

    @property
    def valid_f1(self) -> Optional[float]:
        return self.checkpoint.meta.get("valid_f1")


def state_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor_digest(tensor).encode())
    return h.hexdigest()


# --------------------------------------------------------------------------- #
# batching


@dataclass(frozen=True)
class MixedBatch:
    source_items: tuple[Sentence, ...]
    target_items: tuple[Sentence, ...]


def standard_batches(sentences: Sequence[Sentence], batch_size: int, rng: random.Random) -> Iterator[list[Sentence]]:
    order = list(range(len(sentences)))
    rng.shuffle(order)
    for i in range(0, len(order), batch_size):
        yield [sentences[j] for j in order[i:i + batch_size]]


def mixed_batches(source: Sequence[Sentence], pool: Sequence[Sentence], rng: random.Random,
                  n_source: int = 27, n_target: int = 5) -> Iterator[MixedBatch]:
    """One epoch of mixed batches.

    The shuffled source split is consumed in ``n_source`` chunks (the last one
    topped up from the start of the same permutation), giving
    ``ceil(len(source) / n_source)`` batches. Target items are the whole pool
    when it holds exactly ``n_target`` sentences, else ``n_target`` drawn
    without replacement per batch.
    """
    if len(source) < n_source:
        raise CorpusError(f"joint batches need at least {n_source} source sentences")
    if len(pool) < n_target:
        raise CorpusError(f"joint batches need at least {n_target} few-shot sentences")
    order = list(range(len(source)))
    rng.shuffle(order)
    for b in range(math.ceil(len(order) / n_source)):
        idx = order[b * n_source:(b + 1) * n_source]
        idx += order[:n_source - len(idx)]
        target = list(pool) if len(pool) == n_target else rng.sample(list(pool), n_target)
        yield MixedBatch(tuple(source[i] for i in idx), tuple(target))


# --------------------------------------------------------------------------- #
# training loop


def _optimizer(model: TriggerTagger, config: RegimeConfig) -> torch.optim.Optimizer:
    groups = [{"params": [p for n, p in model.named_parameters() if not n.startswith("rel_embed.")], "lr": config.lr}]
    if model.rel_embed is not None:
        groups.append({"params": list(model.rel_embed.parameters()), "lr": config.lr_rel or config.lr})
    return torch.optim.Adam(groups)


def learning_rate(config: RegimeConfig, epoch: int) -> float:
    return config.lr * config.lr_decay ** epoch


class _Loop:
    """Optimiser, scheduler and clipping shared by every regime."""

    def __init__(self, model: TriggerTagger, config: RegimeConfig, on_step: Optional[Callable] = None):
        self.model = model
        self.config = config
        self.optimizer = _optimizer(model, config)
        self.scheduler = LambdaLR(self.optimizer, lambda k: config.lr_decay ** k)
        self.rng = random.Random(config.seed)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.on_step = on_step
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.reset_epoch()

    def reset_epoch(self):
        self.sums = {"td": [], "rd": [], "mlm": [], "step": []}
        self.max_norm = 0.0
        self.steps = 0

    def step(self, loss: torch.Tensor, kind: str, epoch: int) -> None:
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.params, self.config.grad_clip)
        grads = [p.grad.detach().norm() for p in self.params if p.grad is not None]
        norm = float(torch.linalg.vector_norm(torch.stack(grads))) if grads else 0.0
        if norm > self.config.grad_clip + CLIP_TOLERANCE:
            raise RuntimeError(f"post-clip gradient norm {norm} exceeds {self.config.grad_clip}")
        self.max_norm = max(self.max_norm, norm)
        self.optimizer.step()
        self.steps += 1
        if self.on_step is not None:
            self.on_step(kind=kind, epoch=epoch, step=self.steps, lr=self.optimizer.param_groups[0]["lr"], grad_norm=norm)

    def mlm_pass(self, sentences: Sequence[Sentence], epoch: int) -> None:
        for chunk in standard_batches(sentences, self.config.batch_size, self.rng):
            batch = collate(chunk, self.model.encoder)
            loss, n = mlm_step(self.model, batch, self.generator, self.config.mask_prob)
            if n == 0:
                continue
            self.sums["mlm"].append(float(loss.detach()))
            self.step(loss, "mlm", epoch)

    def td_step(self, loss: torch.Tensor, parts: dict, epoch: int) -> None:
        for key in ("td", "rd"):
            if key in parts:
                self.sums[key].append(parts[key])
        self.sums["step"].append(float(loss.detach()))
        self.step(loss, "td", epoch)

    def epoch_losses(self) -> dict:
        return {k: (sum(v) / len(v) if v else None) for k, v in self.sums.items()}


def _standard_epoch(loop: _Loop, sentences: Sequence[Sentence], epoch: int) -> None:
    model = loop.model
    for chunk in standard_batches(sentences, loop.config.batch_size, loop.rng):
        batch = collate(chunk, model.encoder, with_relations=model.trains_with_relations)
        loss, parts = model.training_loss(batch)
        loop.td_step(loss, parts, epoch)


def _joint_epoch(loop: _Loop, source: Sequence[Sentence], pool: Sequence[Sentence], epoch: int) -> None:
    model = loop.model
    cfg = loop.config
    for mixed in mixed_batches(source, pool, loop.rng, cfg.source_per_batch, cfg.target_per_batch):
        src = collate(mixed.source_items, model.encoder, with_relations=model.trains_with_relations)
        tgt = collate(mixed.target_items, model.encoder, with_relations=model.trains_with_relations)
        loss, parts = joint_loss(model, src, tgt)
        loop.td_step(loss, parts, epoch)


def joint_loss(model: TriggerTagger, source_batch, target_batch) -> tuple[torch.Tensor, dict]:
    """``(source loss + target loss) / 2``; for the explicit design each side
    is already the TD/RD mean, so the result is the mean of all four."""
    src, src_parts = model.training_loss(source_batch)
    tgt, tgt_parts = model.training_loss(target_batch)
    parts = {k: (src_parts[k] + tgt_parts[k]) / 2 for k in src_parts}
    parts.update({f"source_{k}": v for k, v in src_parts.items()})
    parts.update({f"target_{k}": v for k, v in tgt_parts.items()})
    return (src + tgt) / 2, parts


def _fit(model: TriggerTagger, config: RegimeConfig, stage: str, run_epoch: Callable[[_Loop, int], None],
         valid: Optional[Sequence[Sentence]], select: str, mlm_sentences: Optional[Sequence[Sentence]] = None,
         on_step: Optional[Callable] = None, log_path=None) -> TrainResult:
    """Run ``config.epochs`` epochs and select a snapshot.

    ``select`` is ``"argmax"`` (best valid F1, earliest on ties) or ``"final"``.
    With ``mlm_sentences`` every epoch starts with a full MLM pass over them.
    """
    if mlm_sentences is not None and not model.mlm_enabled:
        raise DesignError("MLM alternation requested on a model without MLM")
    if mlm_sentences is not None and not mlm_sentences:
        raise CorpusError("MLM alternation needs target sentences")
    model.train()
    loop = _Loop(model, config, on_step)
    log = [{"stage": stage, "event": "start", "config_hash": config.hash(), "init_digest": state_digest(model)}]
    best_f1, best_epoch, best_state = -1.0, -1, None
    init_state = None
    if config.epochs == 0:
        init_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for epoch in range(config.epochs):
        loop.reset_epoch()
        lr = loop.optimizer.param_groups[0]["lr"]
        if mlm_sentences is not None:
            loop.mlm_pass(mlm_sentences, epoch)
        run_epoch(loop, epoch)
        loop.scheduler.step()
        entry = {"stage": stage, "event": "epoch", "epoch": epoch, "lr": lr, "steps": loop.steps,
                 "max_grad_norm": loop.max_norm, "losses": loop.epoch_losses(), "split": None,
                 "precision": None, "recall": None, "f1": None}
        if valid:
            result = evaluate_model(model, valid)
            entry.update(split="valid", precision=result.precision, recall=result.recall, f1=result.f1)
            model.train()
            if select == "argmax" and result.f1 > best_f1:
                best_f1, best_epoch = result.f1, epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.append(entry)
    if select == "argmax" and best_state is not None:
        model.load_state_dict(best_state)
    elif config.epochs > 0:
        best_epoch = config.epochs - 1
        best_f1 = log[-1]["f1"] if log[-1]["f1"] is not None else None
    else:
        model.load_state_dict(init_state)
        best_f1 = evaluate_model(model, valid).f1 if valid else None
    model.eval()
    log.append({"stage": stage, "event": "selected", "epoch": best_epoch, "f1": best_f1, "rule": select})
    if log_path is not None:
        append_jsonl(log_path, log)
    ckpt = Checkpoint.from_model(model, config_hash=config.hash(), config=config.to_dict(), stage=stage,
                                 selected_epoch=best_epoch, valid_f1=best_f1)
    return TrainResult(model, ckpt, best_epoch, log, config)


def append_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    with path.open("a", encoding="utf-8") as fh:
        fh.write(lines)
        fh.flush()


def _fewshot_selection(config: RegimeConfig, target_valid) -> str:
    return "argmax" if config.shots >= ARGMAX_MIN_SHOTS and target_valid else "final"


def _fresh(config: RegimeConfig, rel_dim: Optional[int]) -> TriggerTagger:
    seed_everything(config.seed)
    return build_model(config.design, config.encoder, rel_dim=rel_dim if config.design == "implicit" else None,
                       seed=config.seed, mlm=config.mlm, dropout=config.dropout)


def _from_checkpoint(config: RegimeConfig, checkpoint: Checkpoint) -> TriggerTagger:
    if checkpoint.design != config.design:
        raise DesignError(f"checkpoint design {checkpoint.design!r} does not match {config.design!r}")
    seed_everything(config.seed)
    return checkpoint.build(mlm=config.mlm, dropout=config.dropout)


def _require(sentences, what: str) -> list[Sentence]:
    sentences = list(sentences)
    if not sentences:
        raise CorpusError(f"{what} is empty")
    return sentences


# --------------------------------------------------------------------------- #
# regimes


def train_on_source(config: RegimeConfig, source: Corpus, mlm_sentences: Optional[Sequence[Sentence]] = None,
                    on_step=None, log_path=None) -> TrainResult:
    """Fine-tune from base weights on source train, keeping the best source-valid epoch."""
    train = _require(source.split("train"), "source train split")
    valid = _require(source.split("valid"), "source valid split")
    if config.design == "implicit" and not config.rel_dim:
        raise ValueError("implicit source training needs rel_dim (see grid_search_implicit)")
    config = replace(config, regime="source")
    model = _fresh(config, config.rel_dim)
    return _fit(model, config, "source", lambda loop, ep: _standard_epoch(loop, train, ep), valid, "argmax",
                mlm_sentences, on_step, log_path)


def in_domain_training(config: RegimeConfig, fewshot: Sequence[Sentence], target_valid: Sequence[Sentence] = (),
                       mlm_sentences: Optional[Sequence[Sentence]] = None, on_step=None, log_path=None) -> TrainResult:
    shots = _require(fewshot, "few-shot set")
    config = replace(config, regime="in_domain", rel_dim=IN_DOMAIN_REL_DIM if config.design == "implicit" else None)
    model = _fresh(config, IN_DOMAIN_REL_DIM)
    return _fit(model, config, "in_domain", lambda loop, ep: _standard_epoch(loop, shots, ep), list(target_valid),
                _fewshot_selection(config, target_valid), mlm_sentences, on_step, log_path)


def joint_training(config: RegimeConfig, source: Corpus, fewshot: Sequence[Sentence],
                   target_valid: Sequence[Sentence] = (), mlm_sentences=None, on_step=None, log_path=None) -> TrainResult:
    pool = list(fewshot)
    if len(pool) < config.target_per_batch:
        raise CorpusError(f"joint training needs at least {config.target_per_batch} shots, got {len(pool)}")
    train = _require(source.split("train"), "source train split")
    config = replace(config, regime="joint_training",
                     rel_dim=JOINT_TRAINING_REL_DIM if config.design == "implicit" else None)
    model = _fresh(config, JOINT_TRAINING_REL_DIM)
    return _fit(model, config, "joint_training", lambda loop, ep: _joint_epoch(loop, train, pool, ep),
                list(target_valid), _fewshot_selection(config, target_valid), mlm_sentences, on_step, log_path)


def joint_transfer(config: RegimeConfig, checkpoint: Checkpoint, source: Corpus, fewshot: Sequence[Sentence],
                   target_valid: Sequence[Sentence] = (), mlm_sentences=None, on_step=None, log_path=None) -> TrainResult:
    pool = list(fewshot)
    if len(pool) < config.target_per_batch:
        raise CorpusError(f"joint transfer needs at least {config.target_per_batch} shots, got {len(pool)}")
    train = _require(source.split("train"), "source train split")
    config = replace(config, regime="joint_transfer", rel_dim=checkpoint.rel_dim)
    model = _from_checkpoint(config, checkpoint)
    return _fit(model, config, "joint_transfer", lambda loop, ep: _joint_epoch(loop, train, pool, ep),
                list(target_valid), _fewshot_selection(config, target_valid), mlm_sentences, on_step, log_path)


def sequential_transfer(config: RegimeConfig, checkpoint: Checkpoint, fewshot: Sequence[Sentence],
                        target_valid: Sequence[Sentence] = (), on_step=None, log_path=None) -> TrainResult:
    """Fine-tune a source checkpoint on the whole few-shot set (batches of up to 32)."""
    shots = _require(fewshot, "few-shot set")
    config = replace(config, regime="sequential_transfer", rel_dim=checkpoint.rel_dim)
    model = _from_checkpoint(config, checkpoint)
    return _fit(model, config, "sequential_transfer", lambda loop, ep: _standard_epoch(loop, shots, ep),
                list(target_valid), _fewshot_selection(config, target_valid), None, on_step, log_path)


def alternate_with_mlm(regime: str, config: RegimeConfig, target_train: Sequence[Sentence], **kwargs) -> TrainResult:
    """Run ``regime`` with an MLM pass over ``target_train`` before the TD pass of every epoch.

    For ``sequential_transfer`` the alternation happens in the source stage
    (MLM on target train, TD on ``kwargs["source"]``); the few-shot stage then
    runs unchanged from that checkpoint.
    """
    target_train = _require(target_train, "MLM target sentences")
    config = replace(config, mlm=True)
    on_step, log_path = kwargs.pop("on_step", None), kwargs.pop("log_path", None)
    if regime == "source":
        return train_on_source(config, kwargs["source"], target_train, on_step, log_path)
    if regime == "in_domain":
        return in_domain_training(config, kwargs["fewshot"], kwargs.get("target_valid", ()), target_train,
                                  on_step, log_path)
    if regime == "joint_training":
        return joint_training(config, kwargs["source"], kwargs["fewshot"], kwargs.get("target_valid", ()),
                              target_train, on_step, log_path)
    if regime == "joint_transfer":
        return joint_transfer(config, kwargs["checkpoint"], kwargs["source"], kwargs["fewshot"],
                              kwargs.get("target_valid", ()), target_train, on_step, log_path)
    if regime == "sequential_transfer":
        stage = train_on_source(config, kwargs["source"], target_train, on_step, log_path)
        result = sequential_transfer(config, stage.checkpoint, kwargs["fewshot"], kwargs.get("target_valid", ()),
                                     on_step, log_path)
        result.log[:0] = stage.log
        return result
    raise ValueError(f"unknown regime {regime!r}")


def zero_shot_eval(checkpoint: Checkpoint, target_test: Sequence[Sentence]) -> EvalResult:
    """Evaluate a source checkpoint on target data without any target training."""
    model = checkpoint.build(mlm=False)
    model.eval()
    return evaluate_model(model, list(target_test))


def grid_search_implicit(config: RegimeConfig, source: Corpus, dims: Sequence[int] = REL_DIMS,
                         lrs: Sequence[float] = REL_LRS, log_path=None) -> tuple[int, float, list[dict]]:
    """Pick the relation embedding size and learning rate by source-valid F1.

    Ties go to the smaller size, then the larger learning rate. Returns the
    chosen pair and one log row per configuration.
    """
    config = replace(config, design="implicit")
    runs = []
    for dim in dims:
        for lr_rel in lrs:
            result = train_on_source(replace(config, rel_dim=dim, lr_rel=lr_rel), source)
            runs.append({"rel_dim": dim, "lr_rel": lr_rel, "valid_f1": result.valid_f1,
                         "selected_epoch": result.selected_epoch, "config_hash": result.config.hash()})
    if log_path is not None:
        append_jsonl(log_path, runs)
    best = min(runs, key=lambda r: (-r["valid_f1"], r["rel_dim"], -r["lr_rel"]))
    return best["rel_dim"], best["lr_rel"], runs
