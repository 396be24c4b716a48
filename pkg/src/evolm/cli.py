"""``evolm`` command-line entry point.

Every command reads an optional JSON run config (``--config``), applies the
flag overrides, validates all input paths, and only then starts work. Outputs
go to ``--out`` with fixed file names so runs are easy to diff.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import statistics
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

from . import adaptation as A
from .checkpoint import (atomic_write, load_checkpoint, load_classifier, load_encoder, load_prompt,
                         save_classifier, save_encoder, save_prompt)
from .data import (SyntheticCorpusSpec, Vocabulary, build_vocab, factual_vocabulary,
                   generate_factual_text, generate_task_pair, read_labeled_jsonl, read_lines,
                   samples_from_lines, task_vocabulary, write_labeled_jsonl)
from .errors import ConfigError, DataError, DivergenceError, EvolmError, IntegrityError
from .evolution import SelfEvolutionConfig, self_evolve, self_question_scan
from .model import ModelConfig, init_parameters
from .pretrain import PretrainConfig, evaluation_plans, mlm_eval_record, pretrain

log = logging.getLogger("evolm")

COMMANDS = ("build-vocab", "gen-corpus", "gen-tasks", "pretrain", "scan", "evolve", "finetune",
            "prompt-tune", "prompt-transfer", "transductive", "eval", "report")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class TaskSpec:
    """Parameters of a synthetic source/target task pair."""
    source: str = "source"
    target: str = "target"
    relatedness: float = 1.0
    n_source: int = 400
    n_target: int = 400
    num_words: int = 32
    seq_len: int = 8
    covariate_shift: float = 0.0
    dev_fraction: float = 0.25


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    corpus: str | None = None
    slots: str | None = None
    vocab: str | None = None
    checkpoint: str | None = None
    encoder: str | None = None
    task_dir: str | None = None
    prompt_store: str | None = None
    source: str | None = None
    target: str | None = None
    max_vocab: int = 30000
    low_resource_threshold: int = 300
    metrics: list[str] = field(default_factory=list)
    plot: str | None = None
    model: dict = field(default_factory=dict)
    synthetic_corpus: dict = field(default_factory=dict)
    tasks: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    evolve: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    prompt: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    transductive: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: Any) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**obj)
        for f in fields(cls):
            value = getattr(cfg, f.name)
            if f.type == "dict" and not isinstance(value, dict):
                raise ConfigError(f"config section {f.name!r} must be an object")
        if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
            raise ConfigError("seed must be an integer")
        if not isinstance(cfg.low_resource_threshold, int) or cfg.low_resource_threshold < 0:
            raise ConfigError("low_resource_threshold must be a non-negative integer")
        return cfg


def _section(cls, values: dict, name: str, **forced):
    """Build a dataclass config from a JSON section, rejecting unknown keys."""
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(unknown)}")
    if "seed" in values:
        raise ConfigError(f"{name!r}: set the seed at the top level or with --seed")
    try:
        return cls(**{**values, **{k: v for k, v in forced.items() if k in known}})
    except TypeError as exc:
        raise ConfigError(f"{name!r}: {exc}") from exc


def _steps(values: dict, steps: int | None) -> dict:
    return values if steps is None else {**values, "steps": steps}


def _finetune_config(values: dict, seed: int, steps: int | None) -> A.FinetuneConfig:
    values = dict(_steps(values, steps))
    sift = values.pop("sift", None)
    if sift is not None:
        if not isinstance(sift, dict):
            raise ConfigError("'finetune.sift' must be an object")
        known = {f.name for f in fields(A.SiftConfig)}
        if set(sift) - known:
            raise ConfigError(f"unknown keys in 'finetune.sift': {', '.join(sorted(set(sift) - known))}")
        sift = A.SiftConfig(**sift)
    cfg = _section(A.FinetuneConfig, values, "finetune", seed=seed)
    return dataclasses.replace(cfg, sift=sift)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return RunConfig.from_json(obj)


def _require(value: str | None, what: str) -> Path:
    if value is None:
        raise ConfigError(f"missing required setting: {what}")
    p = Path(value)
    if not p.exists():
        raise ConfigError(f"{what} not found: {value}")
    return p


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """argparse with a usage error that exits 1 instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evolm", description="Self-evolution MLM pretraining and adaptation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="global seed; all randomness derives from it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="input checkpoint")
        p.add_argument("--source", help="source task name")
        p.add_argument("--target", help="target task name")
        p.add_argument("--steps", type=int, help="override the training step count")
        if name == "report":
            p.add_argument("files", nargs="*", help="metrics JSONL files")
            p.add_argument("--plot", help="write a PNG line plot of loss/accuracy curves")
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config)
    for name in ("seed", "out", "checkpoint", "source", "target"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.steps is not None and args.steps < 0:
        raise ConfigError("--steps must be >= 0")
    if args.command == "report":
        if args.files:
            cfg.metrics = list(args.files)
        if args.plot:
            cfg.plot = args.plot
    return cfg


# ---------------------------------------------------------------------------
# helpers


class JsonlSink:
    """Appends metric records to a JSONL file, truncating it on open."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_slots(path: Path | None) -> dict[int, int] | None:
    if path is None:
        return None
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return {int(k): int(v) for k, v in raw.items()}
    except (json.JSONDecodeError, AttributeError, ValueError) as exc:
        raise DataError(f"{path}: malformed slot map ({exc})") from exc


def _corpus_inputs(cfg: RunConfig) -> tuple[Path, Path, Path | None]:
    corpus = _require(cfg.corpus, "corpus")
    vocab = _require(cfg.vocab, "vocab")
    slots = _require(cfg.slots, "slots") if cfg.slots else None
    return corpus, vocab, slots


def _load_corpus(corpus: Path, vocab: Vocabulary, slots: Path | None, max_seq_len: int):
    return samples_from_lines(read_lines(corpus), vocab, max_seq_len, _load_slots(slots))


def _task_paths(cfg: RunConfig, name: str | None, what: str) -> tuple[Path, Path]:
    if name is None:
        raise ConfigError(f"missing required setting: {what} task (--{what})")
    task_dir = _require(cfg.task_dir, "task_dir")
    train = _require(str(task_dir / f"{name}.train.jsonl"), f"{what} training file")
    dev = _require(str(task_dir / f"{name}.dev.jsonl"), f"{what} dev file")
    return train, dev


def _task_vocab(cfg: RunConfig) -> Vocabulary:
    if cfg.vocab is not None:
        return Vocabulary.load(_require(cfg.vocab, "vocab"))
    return Vocabulary.load(_require(str(Path(_require(cfg.task_dir, "task_dir")) / "vocab.json"),
                                    "task vocab"))


def _write_json(path: Path, obj: Any) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_build_vocab(cfg: RunConfig, args) -> int:
    corpus = _require(cfg.corpus, "corpus")
    vocab = build_vocab(read_lines(corpus), cfg.max_vocab)
    out = _out(cfg) / "vocab.json"
    vocab.save(out)
    log.info("wrote %s (%d tokens)", out, vocab.size)
    return 0


def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    spec = _section(SyntheticCorpusSpec, cfg.synthetic_corpus, "synthetic_corpus", seed=cfg.seed)
    text = generate_factual_text(spec)
    out = _out(cfg)
    atomic_write(out / "corpus.txt", "\n".join(text.lines) + "\n")
    _write_json(out / "slots.json", {str(k): v for k, v in sorted(text.slots.items())})
    factual_vocabulary(spec).save(out / "vocab.json")
    log.info("wrote %d lines to %s", len(text.lines), out / "corpus.txt")
    return 0


def cmd_gen_tasks(cfg: RunConfig, args) -> int:
    spec = _section(TaskSpec, cfg.tasks, "tasks")
    if cfg.source:
        spec.source = cfg.source
    if cfg.target:
        spec.target = cfg.target
    if not 0.0 < spec.dev_fraction < 1.0:
        raise ConfigError("tasks.dev_fraction must be in (0, 1)")
    src, tgt = generate_task_pair(cfg.seed, spec.relatedness, n_source=spec.n_source,
                                  n_target=spec.n_target, num_words=spec.num_words,
                                  seq_len=spec.seq_len, covariate_shift=spec.covariate_shift)
    out = _out(cfg)
    for name, examples in ((spec.source, src), (spec.target, tgt)):
        n_dev = max(1, round(spec.dev_fraction * len(examples)))
        write_labeled_jsonl(out / f"{name}.train.jsonl", examples[n_dev:])
        write_labeled_jsonl(out / f"{name}.dev.jsonl", examples[:n_dev])
    task_vocabulary(spec.num_words).save(out / "vocab.json")
    return 0


def _model_config(cfg: RunConfig, vocab: Vocabulary) -> ModelConfig:
    values = {"vocab_size": vocab.size, **cfg.model}
    return _section(ModelConfig, values, "model", seed=cfg.seed)


def cmd_pretrain(cfg: RunConfig, args) -> int:
    corpus_p, vocab_p, slots_p = _corpus_inputs(cfg)
    ckpt = _require(cfg.checkpoint, "checkpoint") if cfg.checkpoint else None
    pcfg = _section(PretrainConfig, _steps(cfg.pretrain, args.steps), "pretrain", seed=cfg.seed)
    vocab = Vocabulary.load(vocab_p)
    encoder = load_encoder(ckpt) if ckpt else init_parameters(_model_config(cfg, vocab))
    _check_vocab(encoder.config, vocab)
    corpus = _load_corpus(corpus_p, vocab, slots_p, encoder.config.max_seq_len)
    out = _out(cfg)
    sink = JsonlSink(out / "metrics.jsonl")
    try:
        pretrain(encoder, corpus, pcfg, sink)
    finally:
        sink.close()
    save_encoder(encoder, out / "encoder.ckpt")
    return 0


def _check_vocab(model_cfg: ModelConfig, vocab: Vocabulary) -> None:
    if vocab.size > model_cfg.vocab_size:
        raise ConfigError(f"vocabulary has {vocab.size} tokens but the model only {model_cfg.vocab_size}")


def cmd_scan(cfg: RunConfig, args) -> int:
    corpus_p, vocab_p, slots_p = _corpus_inputs(cfg)
    ckpt = _require(cfg.checkpoint, "checkpoint")
    ecfg = _section(SelfEvolutionConfig, cfg.evolve, "evolve", seed=cfg.seed)
    vocab = Vocabulary.load(vocab_p)
    encoder = load_encoder(ckpt)
    _check_vocab(encoder.config, vocab)
    corpus = _load_corpus(corpus_p, vocab, slots_p, encoder.config.max_seq_len)
    index = self_question_scan(encoder, corpus, ecfg.margin)
    out = _out(cfg) / "neglected.jsonl"
    index.save(out)
    log.info("%d neglected tokens written to %s", index.count, out)
    return 0


def cmd_evolve(cfg: RunConfig, args) -> int:
    corpus_p, vocab_p, slots_p = _corpus_inputs(cfg)
    ckpt = _require(cfg.checkpoint, "checkpoint")
    ecfg = _section(SelfEvolutionConfig, _steps(cfg.evolve, args.steps), "evolve", seed=cfg.seed)
    vocab = Vocabulary.load(vocab_p)
    encoder = load_encoder(ckpt)
    _check_vocab(encoder.config, vocab)
    corpus = _load_corpus(corpus_p, vocab, slots_p, encoder.config.max_seq_len)
    out = _out(cfg)
    sink = JsonlSink(out / "metrics.jsonl")
    try:
        self_evolve(encoder, corpus, ecfg, sink)
    finally:
        sink.close()
    save_encoder(encoder, out / "encoder.ckpt")
    return 0


def _labeled(path: Path, vocab: Vocabulary, max_seq_len: int):
    return read_labeled_jsonl(path, vocab, max_seq_len)


def cmd_finetune(cfg: RunConfig, args) -> int:
    ckpt = _require(cfg.checkpoint, "checkpoint")
    train_p, dev_p = _task_paths(cfg, cfg.target, "target")
    fcfg = _finetune_config(cfg.finetune, cfg.seed, args.steps)
    vocab = _task_vocab(cfg)
    encoder = load_encoder(ckpt)
    _check_vocab(encoder.config, vocab)
    train = _labeled(train_p, vocab, encoder.config.max_seq_len)
    dev = _labeled(dev_p, vocab, encoder.config.max_seq_len)
    out = _out(cfg)
    sink = JsonlSink(out / "metrics.jsonl")
    try:
        clf, _ = A.finetune_classifier(encoder, train, fcfg, dev, sink)
    finally:
        sink.close()
    save_classifier(clf, out / "classifier.ckpt")
    return 0


def _check_prompt_fits(encoder, prompt_len: int, *example_sets) -> None:
    longest = max((len(ex.token_ids) for exs in example_sets for ex in exs), default=0)
    if longest + prompt_len > encoder.config.max_seq_len:
        raise ConfigError(f"prompt_len {prompt_len} + longest example {longest} exceeds "
                          f"max_seq_len {encoder.config.max_seq_len}")


def _prompt_store(cfg: RunConfig) -> Path:
    return Path(cfg.prompt_store) if cfg.prompt_store else Path(cfg.out) / "prompts"


def cmd_prompt_tune(cfg: RunConfig, args) -> int:
    ckpt = _require(cfg.checkpoint, "checkpoint")
    train_p, dev_p = _task_paths(cfg, cfg.target, "target")
    pcfg = _section(A.PromptConfig, _steps(cfg.prompt, args.steps), "prompt", seed=cfg.seed,
                    task_name=cfg.target)
    vocab = _task_vocab(cfg)
    encoder = load_encoder(ckpt)
    _check_vocab(encoder.config, vocab)
    train = _labeled(train_p, vocab, encoder.config.max_seq_len)
    dev = _labeled(dev_p, vocab, encoder.config.max_seq_len)
    _check_prompt_fits(encoder, pcfg.prompt_len, train, dev)
    out = _out(cfg)
    sink = JsonlSink(out / "metrics.jsonl")
    try:
        model, _ = A.prompt_tune(encoder, None, train, pcfg, dev, sink)
    finally:
        sink.close()
    store = _prompt_store(cfg)
    store.mkdir(parents=True, exist_ok=True)
    save_prompt(model, store / f"{cfg.target}.prompt")
    return 0


def cmd_prompt_transfer(cfg: RunConfig, args) -> int:
    ckpt = _require(cfg.checkpoint, "checkpoint")
    if cfg.source is None:
        raise ConfigError("missing required setting: source task (--source)")
    train_p, dev_p = _task_paths(cfg, cfg.target, "target")
    teacher_p = _require(str(_prompt_store(cfg) / f"{cfg.source}.prompt"), "source prompt")
    tcfg = _section(A.TransferConfig, _steps(cfg.transfer, args.steps), "transfer", seed=cfg.seed,
                    task_name=cfg.target)
    vocab = _task_vocab(cfg)
    encoder = load_encoder(ckpt)
    _check_vocab(encoder.config, vocab)
    teacher = load_prompt(teacher_p)
    train = _labeled(train_p, vocab, encoder.config.max_seq_len)
    dev = _labeled(dev_p, vocab, encoder.config.max_seq_len)
    _check_prompt_fits(encoder, max(tcfg.prompt_len, teacher.prompt.prompt_len), train, dev)
    if len(train) >= cfg.low_resource_threshold:
        log.warning("target %r has %d training examples (>= %d): KD prompt transfer is meant for "
                    "low-resource tasks; full fine-tuning is recommended. Proceeding.",
                    cfg.target, len(train), cfg.low_resource_threshold)
    out = _out(cfg)
    sink = JsonlSink(out / "metrics.jsonl")
    try:
        scratch, _ = A.prompt_tune(encoder, None, train, tcfg.prompt_config(), dev)
        result = A.kd_prompt_transfer(encoder, teacher, train, tcfg, dev,
                                      reference_prompt=scratch.prompt, sink=sink)
    finally:
        sink.close()
    store = _prompt_store(cfg)
    store.mkdir(parents=True, exist_ok=True)
    save_prompt(result.model, store / f"{cfg.target}.prompt")
    report = {"source": cfg.source, "target": cfg.target, "similarity": result.similarity,
              "lambda": result.lam,
              "acc_transfer": A.accuracy(lambda i, m: result.model.logits(encoder, i, m), dev),
              "acc_scratch": A.accuracy(lambda i, m: scratch.logits(encoder, i, m), dev)}
    _write_json(out / "transfer_report.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_transductive(cfg: RunConfig, args) -> int:
    """Seed examples come from ``--source``; the ``--target`` inputs are pseudo-labeled."""
    ckpt = _require(cfg.checkpoint, "checkpoint")
    if cfg.source is None:
        raise ConfigError("missing required setting: seed task (--source)")
    seed_p, _ = _task_paths(cfg, cfg.source, "source")
    train_p, dev_p = _task_paths(cfg, cfg.target, "target")
    values = dict(cfg.transductive)
    ft = _finetune_config(values.pop("finetune", {}), cfg.seed, args.steps)
    tcfg = _section(A.TransductiveConfig, values, "transductive")
    tcfg = dataclasses.replace(tcfg, finetune=ft)
    vocab = _task_vocab(cfg)
    encoder = load_encoder(ckpt)
    _check_vocab(encoder.config, vocab)
    L = encoder.config.max_seq_len
    seeds = _labeled(seed_p, vocab, L)
    unlabeled = _labeled(train_p, vocab, L)
    dev = _labeled(dev_p, vocab, L)
    out = _out(cfg)
    sink = JsonlSink(out / "metrics.jsonl")
    try:
        clf, states = A.transductive_finetune(encoder, seeds, unlabeled, tcfg, sink)
    finally:
        sink.close()
    save_classifier(clf, out / "classifier.ckpt")
    summary = {"iterations": [{"t": s.t, "agreement": s.agreement, "pseudo_labeled": len(s.pseudo_labeled)}
                              for s in states],
               "target_acc": A.accuracy(clf.logits, dev)}
    _write_json(out / "transductive.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = _require(cfg.checkpoint, "checkpoint")
    kind = load_checkpoint(ckpt)[0].get("kind")
    if kind == "encoder":
        corpus_p, vocab_p, slots_p = _corpus_inputs(cfg)
        pcfg = _section(PretrainConfig, cfg.pretrain, "pretrain", seed=cfg.seed)
        encoder = load_encoder(ckpt)
        vocab = Vocabulary.load(vocab_p)
        _check_vocab(encoder.config, vocab)
        corpus = _load_corpus(corpus_p, vocab, slots_p, encoder.config.max_seq_len)
        plans = evaluation_plans(corpus, pcfg.eval_samples, pcfg.mask_rate, pcfg.seed, vocab_size=encoder.config.vocab_size)
        result = mlm_eval_record(encoder, corpus, plans, 0, None, "eval", pcfg.slot_eval_limit)
    elif kind in ("classifier", "prompt"):
        _, dev_p = _task_paths(cfg, cfg.target, "target")
        vocab = _task_vocab(cfg)
        if kind == "classifier":
            clf = load_classifier(ckpt)
            encoder, fn = clf.encoder, clf.logits
        else:
            encoder = load_encoder(_require(cfg.encoder, "encoder"))
            pm = load_prompt(ckpt)
            _check_prompt_fits(encoder, pm.prompt.prompt_len, _labeled(dev_p, vocab, encoder.config.max_seq_len))
            fn = lambda i, m: pm.logits(encoder, i, m)  # noqa: E731
        _check_vocab(encoder.config, vocab)
        dev = _labeled(dev_p, vocab, encoder.config.max_seq_len)
        result = {"kind": kind, "target": cfg.target, "dev_acc": A.accuracy(fn, dev), "n": len(dev)}
    else:
        raise IntegrityError(f"checkpoint kind {kind!r} is not evaluable")
    _write_json(_out(cfg) / "eval.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# report

REPORT_COLUMNS = ("run", "phase", "step", "loss", "masked_acc", "slot_acc", "train_acc", "dev_acc",
                  "lambda", "neglected_count_first", "neglected_count_last", "neglected_count_delta")
_NUMERIC = REPORT_COLUMNS[2:]


def read_metrics(path: str | Path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed metrics line ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise DataError(f"{path}:{lineno}: metrics line is not a JSON object")
        records.append(rec)
    if not records:
        raise DataError(f"{path}: no metric records")
    return records


def summarize(name: str, records: list[dict]) -> list[dict]:
    """One row per phase: final metrics plus first-vs-last neglected counts."""
    phases: dict[str, list[dict]] = {}
    for rec in records:
        phases.setdefault(str(rec.get("phase", "")), []).append(rec)
    rows = []
    for phase, recs in phases.items():
        last = recs[-1]
        row = {"run": name, "phase": phase}
        for col in ("step", "loss", "masked_acc", "slot_acc", "train_acc", "dev_acc", "lambda"):
            row[col] = last.get(col)
        counts = [r["neglected_count"] for r in recs if r.get("neglected_count") is not None]
        if counts:
            row["neglected_count_first"] = counts[0]
            row["neglected_count_last"] = counts[-1]
            row["neglected_count_delta"] = counts[-1] - counts[0]
        rows.append(row)
    return rows


def median_rows(rows: list[dict]) -> list[dict]:
    """Per-phase medians across runs, for phases seen in at least two runs."""
    by_phase: dict[str, list[dict]] = {}
    for row in rows:
        by_phase.setdefault(row["phase"], []).append(row)
    out = []
    for phase, group in by_phase.items():
        if len(group) < 2:
            continue
        med = {"run": "median", "phase": phase}
        for col in _NUMERIC:
            vals = [r[col] for r in group if isinstance(r.get(col), (int, float))]
            med[col] = statistics.median(vals) if vals else None
        out.append(med)
    return out


def write_report(rows: list[dict], stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: ("" if row.get(c) is None else row[c]) for c in REPORT_COLUMNS})


def plot_curves(runs: dict[str, list[dict]], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = ("loss", "masked_acc", "slot_acc", "dev_acc")
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.2))
    for ax, key in zip(axes, keys):
        for name, recs in runs.items():
            pts = [(r["step"], r[key]) for r in recs
                   if isinstance(r.get(key), (int, float)) and "step" in r]
            if pts:
                ax.plot(*zip(*pts), label=name)
        ax.set_title(key)
        ax.set_xlabel("step")
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)


def cmd_report(cfg: RunConfig, args) -> int:
    if not cfg.metrics:
        raise ConfigError("report needs at least one metrics file")
    paths = [_require(p, "metrics file") for p in cfg.metrics]
    runs = {str(p): read_metrics(p) for p in paths}
    rows = [row for name, recs in runs.items() for row in summarize(name, recs)]
    rows += median_rows(rows)
    write_report(rows, sys.stdout)
    if cfg.plot:
        plot_curves(runs, Path(cfg.plot))
    return 0


HANDLERS = {
    "build-vocab": cmd_build_vocab, "gen-corpus": cmd_gen_corpus, "gen-tasks": cmd_gen_tasks,
    "pretrain": cmd_pretrain, "scan": cmd_scan, "evolve": cmd_evolve, "finetune": cmd_finetune,
    "prompt-tune": cmd_prompt_tune, "prompt-transfer": cmd_prompt_transfer,
    "transductive": cmd_transductive, "eval": cmd_eval, "report": cmd_report,
}


def _configure_logging() -> None:
    level_name = os.environ.get("EVOLM_LOG_LEVEL", "info").lower()
    level = LOG_LEVELS.get(level_name, logging.INFO)
    root = logging.getLogger("evolm")
    for h in list(root.handlers):
        if getattr(h, "_evolm", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler._evolm = True
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    if level_name not in LOG_LEVELS:
        log.warning("unknown EVOLM_LOG_LEVEL %r, using info", level_name)


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
        return HANDLERS[args.command](cfg, args)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return 2
    except (EvolmError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
