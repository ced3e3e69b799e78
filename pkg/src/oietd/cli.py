"""Command-line entry point: ``oietd <subcommand> [options]``.

Options may also come from a JSON or YAML config file (``--config``) with one
section per subcommand, e.g.::

    train-source:
      source: data/maven.jsonl
      design: implicit
      rel_dim: 50

Keys use the option names with dashes replaced by underscores; unknown keys
are an error. ``--set key=value`` (repeatable) overrides both the file and the
command line. The effective configuration is hashed and written next to every
artifact (``<artifact>.meta.json``) or into it (checkpoints, run records).

Exit codes:

    0  success
    1  unexpected internal error
    2  usage or config schema error
    3  input data error (missing file, malformed corpus, length mismatch)
    4  design or checkpoint mismatch
    5  missing prerequisite checkpoint for a transfer regime
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .corpus import CorpusError, load_corpus, resplit_holdout, save_corpus, split_by_article
from .model import Checkpoint, DESIGNS, DesignError, evaluate_model
from .oie_post import attach_relations, read_extractions, write_extractions
from .regimes import (REGIMES, RegimeConfig, config_hash, grid_search_implicit, in_domain_training, joint_training,
                      joint_transfer, seed_everything, sequential_transfer, train_on_source, zero_shot_eval,
                      alternate_with_mlm)
from .synth import SynthConfig, generate_pair, strip_relations, synth_extractions
from .tagging import TagError, strict_micro_prf
from . import experiment

logger = logging.getLogger("oietd")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA, EXIT_DESIGN, EXIT_MISSING_CHECKPOINT = 0, 1, 2, 3, 4, 5
FORMATS = ("canonical-jsonl", "maven-json", "conll-like", "ace-json", "char-jsonl")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# option tables: name -> (default, type, help); lists use nargs="+"

_TRAINING = {
    "epochs": (10, int, "training epochs"),
    "lr": (1e-5, float, "initial learning rate"),
    "lr_decay": (0.99, float, "per-epoch multiplicative decay"),
    "batch_size": (32, int, "batch size"),
    "grad_clip": (1.0, float, "gradient norm clipping threshold"),
    "dropout": (0.1, float, "dropout before the heads"),
    "mask_prob": (0.15, float, "MLM selection probability"),
    "lr_rel": (None, float, "learning rate of the relation embedding (implicit)"),
    "encoder": ("toy", str, "encoder kind: toy or pretrained"),
    "encoder_name": ("roberta-base", str, "pretrained model name"),
    "hidden_size": (64, int, "toy encoder hidden size"),
}

SCHEMA: dict[str, dict[str, tuple]] = {
    "stats": {
        "corpus": (None, Path, "corpus path"),
        "format": ("canonical-jsonl", str, "corpus format"),
        "name": (None, str, "corpus name"),
        "triples": (None, Path, "extraction file to attach before counting relations"),
        "resplit": ("none", str, "none, holdout or article"),
        "fraction": (0.2, float, "held-out fraction for --resplit holdout"),
        "seed": (0, int, "split seed"),
        "output": (None, Path, "also write the table as JSON here"),
    },
    "postprocess-triples": {
        "corpus": (None, Path, "corpus path"),
        "format": ("canonical-jsonl", str, "corpus format"),
        "name": (None, str, "corpus name"),
        "triples": (None, Path, "extraction file (.jsonl or .tsv)"),
        "output": (None, Path, "output canonical JSONL corpus"),
        "no_dedupe": (False, bool, "keep duplicate sentences"),
    },
    "train-source": {
        "source": (None, Path, "source corpus (canonical JSONL with relation spans)"),
        "design": ("vanilla", str, "vanilla, implicit or explicit"),
        "seed": (0, int, "run seed"),
        "rel_dim": (None, int, "relation embedding size (implicit)"),
        "grid_search": (False, bool, "grid-search rel_dim and lr_rel on source valid (implicit)"),
        "mlm_target": (None, Path, "target corpus whose train split feeds MLM alternation"),
        "output": (None, Path, "checkpoint path"),
        "log": (None, Path, "metric log (JSONL)"),
        **_TRAINING,
    },
    "transfer": {
        "regime": ("sequential_transfer", str, "in_domain, joint_training, joint_transfer or sequential_transfer"),
        "design": ("vanilla", str, "vanilla, implicit or explicit"),
        "checkpoint": (None, Path, "source checkpoint (transfer regimes and 0-shot)"),
        "source": (None, Path, "source corpus (joint regimes)"),
        "target": (None, Path, "target corpus"),
        "shots": (50, int, "few-shot size; 0 evaluates the checkpoint zero-shot"),
        "sample_index": (0, int, "few-shot sample index"),
        "master_seed": (0, int, "few-shot sampling seed"),
        "seed": (0, int, "run seed"),
        "mlm": (False, bool, "alternate with MLM on target train"),
        "output": (None, Path, "checkpoint path for the transferred model"),
        "log": (None, Path, "metric log (JSONL)"),
        "record": (None, Path, "record store to append the RunRecord to"),
        **_TRAINING,
    },
    "run-matrix": {
        "source": (None, Path, "source corpus"),
        "target": (None, Path, "target corpus"),
        "store": (None, Path, "record store root (default: $OIETD_STORE or ./runs)"),
        "designs": (list(DESIGNS), str, "designs"),
        "regimes": (list(REGIMES), str, "regimes"),
        "shots": (list(experiment.SHOT_LEVELS), int, "shot levels"),
        "seeds": (list(experiment.SEEDS), int, "training seeds"),
        "samples": (experiment.N_SAMPLES, int, "few-shot samples per shot level"),
        "mlm": (False, bool, "MLM alternation"),
        "rel_dim": (10, int, "relation embedding size for implicit source training"),
        "master_seed": (0, int, "few-shot sampling seed"),
        "extractor": ("minie", str, "extractor label recorded with each run"),
        "no_train_sources": (False, bool, "fail instead of training missing source checkpoints"),
        "workers": (1, int, "concurrent runs"),
        **_TRAINING,
    },
    "evaluate": {
        "gold": (None, Path, "gold corpus"),
        "split": ("test", str, "split to score"),
        "pred": (None, Path, "predicted tags, one JSON list per line"),
        "checkpoint": (None, Path, "checkpoint to predict with instead of --pred"),
    },
    "report": {
        "store": (None, Path, "record store root"),
        "output": (None, Path, "report path (.tsv, .md or .json)"),
        "seeds": (len(experiment.SEEDS), int, "expected seeds per cell"),
        "samples": (experiment.N_SAMPLES, int, "expected samples per few-shot cell"),
    },
    "plot": {
        "store": (None, Path, "record store root"),
        "output": (None, Path, "image path (.png); a .csv is written alongside"),
    },
    "synth": {
        "output_dir": (None, Path, "directory for source/target corpora and triples"),
        "seed": (0, int, "generator seed"),
        "overlap": (1.0, float, "probability that a trigger's relation covers it"),
        "vocab_shift": (0.5, float, "share of target content words unseen in the source"),
        "n_train": (600, int, "train sentences per domain"),
        "n_valid": (150, int, "valid sentences per domain"),
        "n_test": (300, int, "test sentences per domain"),
        "with_relations": (False, bool, "keep relation spans in the corpora instead of only emitting triples"),
    },
}
REQUIRED = {
    "stats": ("corpus",), "postprocess-triples": ("corpus", "triples", "output"), "train-source": ("source", "output"),
    "transfer": ("target",), "run-matrix": ("source", "target"), "evaluate": ("gold",),
    "report": ("output",), "plot": ("output",), "synth": ("output_dir",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oietd", description="Event trigger detection with OIE relations.")
    parser.add_argument("--config", type=Path, help="JSON or YAML config with per-subcommand sections")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("--deterministic", action="store_true", help="deterministic kernels and single thread")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    for name, options in SCHEMA.items():
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or "").strip().splitlines()[0])
        for key, (default, typ, help_text) in options.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_true", default=argparse.SUPPRESS, help=help_text)
            elif isinstance(default, list):
                p.add_argument(flag, dest=key, nargs="+", type=typ, default=argparse.SUPPRESS, help=help_text)
            else:
                p.add_argument(flag, dest=key, type=typ, default=argparse.SUPPRESS,
                               help=f"{help_text} (default: {default})")
    return parser


def _coerce(command: str, key: str, value):
    if key not in SCHEMA[command]:
        raise ConfigError(f"unknown key {key!r} for {command}")
    default, typ, _ = SCHEMA[command][key]
    if value is None:
        return None
    try:
        if isinstance(default, list):
            items = value if isinstance(value, list) else [value]
            return [typ(v) for v in items]
        if typ is bool:
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{command}.{key}: cannot interpret {value!r} as {typ.__name__}") from None


def load_config_file(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    text = path.read_text(encoding="utf-8")
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping of subcommand sections")
    for section, body in data.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
    return data


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file section, then command-line flags, then ``--set``."""
    config = {k: v[0] for k, v in SCHEMA[command].items()}
    if args.config is not None:
        for key, value in load_config_file(args.config).get(command, {}).items():
            config[key] = _coerce(command, key, value)
    for key in SCHEMA[command]:
        if hasattr(args, key):
            config[key] = getattr(args, key)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        config[key.strip()] = _coerce(command, key.strip(), yaml.safe_load(raw))
    for key in REQUIRED[command]:
        if config.get(key) is None:
            raise ConfigError(f"{command}: --{key.replace('_', '-')} is required")
    return config


def _jsonable(config: dict) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}


def write_meta(artifact: Path, command: str, config: dict) -> Path:
    meta = {"command": command, "config": _jsonable(config), "config_hash": config_hash(_jsonable(config))}
    path = artifact.with_name(artifact.name + ".meta.json")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def _regime_config(config: dict, **fields) -> RegimeConfig:
    if config["encoder"] == "toy":
        encoder = {"kind": "toy", "hidden_size": config["hidden_size"]}
    elif config["encoder"] == "pretrained":
        encoder = {"kind": "pretrained", "name": config["encoder_name"]}
    else:
        raise ConfigError(f"unknown encoder {config['encoder']!r}")
    return RegimeConfig(epochs=config["epochs"], lr=config["lr"], lr_decay=config["lr_decay"],
                        batch_size=config["batch_size"], grad_clip=config["grad_clip"], dropout=config["dropout"],
                        mask_prob=config["mask_prob"], lr_rel=config["lr_rel"], encoder=encoder, **fields)


def _check_choice(value, choices, what):
    if value not in choices:
        raise ConfigError(f"unknown {what} {value!r}; choose from {', '.join(choices)}")


def _load(path: Path, fmt: str = "canonical-jsonl", name: Optional[str] = None):
    if not Path(path).exists():
        raise FileNotFoundError(f"{path} not found")
    return load_corpus(path, fmt, name)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# --------------------------------------------------------------------------- #
# subcommands


def cmd_stats(config: dict) -> int:
    """Per-split sentence, trigger and relation counts."""
    _check_choice(config["format"], FORMATS, "format")
    corpus = _load(config["corpus"], config["format"], config["name"])
    if config["resplit"] == "holdout":
        corpus = resplit_holdout(corpus, config["fraction"], config["seed"])
    elif config["resplit"] == "article":
        corpus = split_by_article(corpus, seed=config["seed"])
    elif config["resplit"] != "none":
        raise ConfigError(f"unknown resplit {config['resplit']!r}")
    if config["triples"] is not None:
        corpus = attach_relations(corpus, read_extractions(config["triples"]))
    table = {split: {"sentences": n, "with_triggers": t, "with_relations": r}
             for split, (n, t, r) in corpus.stats.items()}
    print(f"{'split':<6} {'#Sent':>7} {'#Tr':>7} {'#Re':>7}")
    for split, row in table.items():
        print(f"{split:<6} {row['sentences']:>7} {row['with_triggers']:>7} {row['with_relations']:>7}")
    if corpus.dropped:
        print(f"dropped: {corpus.dropped}")
    if config["output"] is not None:
        out = Path(config["output"])
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = out.with_name(out.name + ".tmp")
        tmp.write_text(json.dumps({"corpus": corpus.name, "stats": table, "dropped": corpus.dropped}, indent=2) + "\n")
        tmp.replace(out)
        write_meta(out, "stats", config)
    return EXIT_OK


def cmd_postprocess(config: dict) -> int:
    """Filter and merge OIE triples into relation spans and save the tagged corpus."""
    _check_choice(config["format"], FORMATS, "format")
    corpus = _load(config["corpus"], config["format"], config["name"])
    if not Path(config["triples"]).exists():
        raise FileNotFoundError(f"{config['triples']} not found")
    tagged = attach_relations(corpus, read_extractions(config["triples"]), dedupe=not config["no_dedupe"])
    save_corpus(tagged, config["output"])
    write_meta(Path(config["output"]), "postprocess-triples", config)
    _print_json({"output": str(config["output"]), "dropped_duplicates": tagged.dropped,
                 "stats": {k: list(v) for k, v in tagged.stats.items()}})
    return EXIT_OK


def cmd_train_source(config: dict) -> int:
    """Fine-tune a design on source train, keeping the best source-valid epoch."""
    _check_choice(config["design"], DESIGNS, "design")
    source = _load(config["source"])
    base = _regime_config(config, regime="source", design=config["design"], seed=config["seed"],
                          rel_dim=config["rel_dim"])
    if config["design"] == "implicit":
        if config["grid_search"]:
            dim, lr_rel, _ = grid_search_implicit(base, source, log_path=config["log"])
            base = replace(base, rel_dim=dim, lr_rel=lr_rel)
        elif base.rel_dim is None:
            raise ConfigError("implicit design needs --rel-dim or --grid-search")
    if config["mlm_target"] is not None:
        target = _load(config["mlm_target"])
        result = alternate_with_mlm("source", base, target.split("train"), source=source, log_path=config["log"])
    else:
        result = train_on_source(base, source, log_path=config["log"])
    result.checkpoint.meta["cli_config_hash"] = config_hash(_jsonable(config))
    result.checkpoint.save(config["output"])
    _print_json({"checkpoint": str(config["output"]), "selected_epoch": result.selected_epoch,
                 "valid_f1": result.valid_f1, "config_hash": result.config.hash()})
    return EXIT_OK


def cmd_transfer(config: dict) -> int:
    """Run one few-shot regime (or 0-shot evaluation) and score target test."""
    _check_choice(config["regime"], REGIMES, "regime")
    _check_choice(config["design"], DESIGNS, "design")
    target = _load(config["target"])
    regime, shots = config["regime"], config["shots"]
    needs_ckpt = shots == 0 or regime in experiment.TRANSFER_REGIMES
    checkpoint = None
    if needs_ckpt:
        if config["checkpoint"] is None:
            raise experiment.MissingCheckpointError(f"{regime} needs --checkpoint")
        if not Path(config["checkpoint"]).exists():
            raise experiment.MissingCheckpointError(f"checkpoint {config['checkpoint']} not found")
        checkpoint = Checkpoint.load(config["checkpoint"])
        if checkpoint.design != config["design"]:
            raise DesignError(f"checkpoint design {checkpoint.design!r} does not match {config['design']!r}")
    source = _load(config["source"]) if regime in ("joint_training", "joint_transfer") and shots else None
    if source is None and regime in ("joint_training", "joint_transfer") and shots:
        raise ConfigError(f"{regime} needs --source")
    cfg = _regime_config(config, regime=regime, design=config["design"], shots=shots, seed=config["seed"],
                         sample_index=config["sample_index"], mlm=config["mlm"])
    test, valid = target.split("test"), target.split("valid")
    if shots == 0:
        result, epoch, trained = zero_shot_eval(checkpoint, test), checkpoint.meta.get("selected_epoch", -1), None
        sample_ids = []
    else:
        sample = experiment.draw_fewshot(target, shots, config["sample_index"], config["master_seed"])
        sample_ids = list(sample.sentence_ids)
        fewshot = sample.sentences(target)
        kw = {"fewshot": fewshot, "target_valid": valid, "log_path": config["log"]}
        if config["mlm"] and regime != "sequential_transfer":
            trained = alternate_with_mlm(regime, cfg, target.split("train"), source=source, checkpoint=checkpoint, **kw)
        elif regime == "in_domain":
            trained = in_domain_training(cfg, **kw)
        elif regime == "joint_training":
            trained = joint_training(cfg, source, **kw)
        elif regime == "joint_transfer":
            trained = joint_transfer(cfg, checkpoint, source, **kw)
        else:
            trained = sequential_transfer(cfg, checkpoint, fewshot, valid, log_path=config["log"])
        result, epoch = evaluate_model(trained.model, test), trained.selected_epoch
        if config["output"] is not None:
            trained.checkpoint.save(config["output"])
    key = config_hash({"cli": _jsonable(config), "sample": sample_ids})
    summary = {"regime": regime if shots else experiment.ZERO_SHOT, "design": config["design"], "shots": shots,
               "selected_epoch": epoch, **result.to_dict(), "config_hash": key}
    if config["record"] is not None:
        store = experiment.RecordStore(config["record"])
        store.append(experiment.RunRecord(
            key, summary["regime"], config["design"], "cli", shots, config["seed"], config["sample_index"],
            config["mlm"], result.precision, result.recall, result.f1, result.tp, result.fp, result.fn, epoch, 0.0,
            str(config["source"] or ""), target.name, (trained.config if trained else cfg).to_dict()))
    _print_json(summary)
    return EXIT_OK


def _store(config: dict) -> experiment.RecordStore:
    return experiment.RecordStore(config["store"] or experiment.default_store_root())


def cmd_run_matrix(config: dict) -> int:
    """Run (and resume) the regime x design x shots x seed x sample matrix."""
    for d in config["designs"]:
        _check_choice(d, DESIGNS, "design")
    for r in config["regimes"]:
        _check_choice(r, REGIMES, "regime")
    source, target = _load(config["source"]), _load(config["target"])
    base = _regime_config(config)
    records = experiment.run_matrix(
        source, target, _store(config), base, config["designs"], config["regimes"], config["shots"],
        config["seeds"], config["samples"], config["mlm"], config["rel_dim"], config["master_seed"],
        config["extractor"], train_sources=not config["no_train_sources"], workers=config["workers"])
    _print_json({"records": len(records), "store": str(_store(config).root)})
    return EXIT_OK


def cmd_evaluate(config: dict) -> int:
    """Strict micro P/R/F1 of predicted tags (or a checkpoint) against gold."""
    gold_corpus = _load(config["gold"])
    sentences = gold_corpus.split(config["split"])
    if config["checkpoint"] is not None:
        model = Checkpoint.load(config["checkpoint"]).build(mlm=False)
        result = evaluate_model(model, sentences)
    elif config["pred"] is not None:
        from .tagging import encode_iob2
        gold = [encode_iob2(s.trigger_spans, len(s.tokens)) for s in sentences]
        pred = [json.loads(line) for line in Path(config["pred"]).read_text().splitlines() if line.strip()]
        if len(pred) != len(gold):
            raise TagError(f"length mismatch: {len(gold)} gold sentences vs {len(pred)} predictions")
        result = strict_micro_prf(gold, pred)
    else:
        raise ConfigError("evaluate needs --pred or --checkpoint")
    _print_json(result.to_dict())
    return EXIT_OK


def cmd_report(config: dict) -> int:
    """Aggregate the record store into a regimes x designs table."""
    records = _store(config).records()
    cells = experiment.aggregate(records, config["seeds"], config["samples"])
    path = experiment.write_report(cells, config["output"])
    write_meta(path, "report", config)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_plot(config: dict) -> int:
    """F1-vs-shots curves from the record store."""
    cells = experiment.aggregate(_store(config).records())
    image, csv_path = experiment.plot_curves(cells, config["output"])
    write_meta(image, "plot", config)
    _print_json({"image": str(image), "csv": str(csv_path)})
    return EXIT_OK


def cmd_synth(config: dict) -> int:
    """Generate a synthetic source/target pair plus OIE-style triple files."""
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    sc = SynthConfig(seed=config["seed"], overlap=config["overlap"], vocab_shift=config["vocab_shift"],
                     n_train=config["n_train"], n_valid=config["n_valid"], n_test=config["n_test"])
    written = {}
    for role, corpus in zip(("source", "target"), generate_pair(sc)):
        triples = out / f"{role}.triples.jsonl"
        write_extractions(synth_extractions(corpus, sc), triples)
        path = out / f"{role}.jsonl"
        save_corpus(corpus if config["with_relations"] else strip_relations(corpus), path)
        for artifact in (path, triples):
            write_meta(artifact, "synth", {**config, "synth_config": sc.to_dict()})
        written[role] = {"corpus": str(path), "triples": str(triples)}
    _print_json(written)
    return EXIT_OK


HANDLERS = {
    "stats": cmd_stats, "postprocess-triples": cmd_postprocess, "train-source": cmd_train_source,
    "transfer": cmd_transfer, "run-matrix": cmd_run_matrix, "evaluate": cmd_evaluate, "report": cmd_report,
    "plot": cmd_plot, "synth": cmd_synth,
}


def _fail(code: int, kind: str, message) -> int:
    print(json.dumps({"error": kind, "message": str(message), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command is None:
        parser.print_help(sys.stderr)
        return _fail(EXIT_USAGE, "usage", "no subcommand given")
    if args.deterministic:
        import torch
        torch.set_num_threads(1)
        seed_everything(0, deterministic=True)
    try:
        config = effective_config(args.command, args)
        return HANDLERS[args.command](config)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", exc)
    except (FileNotFoundError, CorpusError, TagError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except experiment.MissingCheckpointError as exc:
        return _fail(EXIT_MISSING_CHECKPOINT, "missing-checkpoint", exc)
    except DesignError as exc:
        return _fail(EXIT_DESIGN, "design", exc)
    except Exception as exc:  # noqa: BLE001 - surfaced as a structured error
        logger.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
