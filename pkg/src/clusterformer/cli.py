"""Command-line entry point: train, eval, bench and cluster-stats.

Config files are YAML with these top-level keys (all optional except ``task``):

    task:  kv-retrieval | char-lm
    seed:  default for model.seed and train.seed
    model: ModelConfig fields (vocab_size and question_len are derived from the task)
    train: TrainRun fields
    data:  SyntheticTaskSpec fields, or for char-lm: corpus_path, seq_len, num_examples, seed
    eval:  num_examples, seed, metric

Environment: CLUSTERFORMER_OUT overrides the output directory,
CLUSTERFORMER_THREADS the torch thread count (default 1, which keeps runs
bit-reproducible).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any

import numpy as np
import torch
import yaml

from .attention import PATTERNS, attention_cost
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import ClusterFormerLayer
from .data import CharLMSpec, Dataset, SyntheticTaskSpec, char_vocab, gen_char_lm, gen_kv_retrieval
from .model import ClusterFormerModel, ModelConfig, build_model
from .nn import Adam
from .sliding import _flat_order, plan_chunks
from .train import METRICS, TrainRun, evaluate, train

TASKS = ("kv-retrieval", "char-lm")


class ConfigError(ValueError):
    pass


@dataclass
class CharLMTask:
    corpus_path: str = ""
    seq_len: int = 256
    num_examples: int = 512
    seed: int = 0


@dataclass
class EvalSpec:
    num_examples: int = 256
    seed: int = 1_000_003
    metric: str = "accuracy"


@dataclass
class Config:
    task: str
    model: ModelConfig
    run: TrainRun
    data: SyntheticTaskSpec | CharLMTask
    eval: EvalSpec = field(default_factory=EvalSpec)

    def __iter__(self):
        return iter((self.model, self.run, self.data))


def _type_ok(value: Any, hint) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        return any(_type_ok(value, h) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is list:
        (inner,) = typing.get_args(hint)
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, hint)


def _fields(cls, section: dict | None, where: str, skip: tuple[str, ...] = ()) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(section).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    out = {}
    for key, value in section.items():
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown key (allowed: {', '.join(sorted(names))})")
        if not _type_ok(value, hints[key]):
            raise ConfigError(f"{where}.{key}: expected {hints[key]}, got {value!r}")
        out[key] = value
    return out


def config_from_dict(raw: dict) -> Config:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    allowed = {"task", "seed", "model", "train", "data", "eval"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown key (allowed: {', '.join(sorted(allowed))})")
    task = raw.get("task")
    if task not in TASKS:
        raise ConfigError(f"task: must be one of {TASKS}, got {task!r}")
    seed = raw.get("seed", 0)
    if not _type_ok(seed, int):
        raise ConfigError(f"seed: expected int, got {seed!r}")

    try:
        if task == "kv-retrieval":
            data = SyntheticTaskSpec(**_fields(SyntheticTaskSpec, raw.get("data"), "data"))
            data.validate()
            vocab, q_len, mode = data.vocab_size, data.num_queries if data.query_policy == "end+question" else 0, "qa-encoder"
        else:
            data = CharLMTask(**_fields(CharLMTask, raw.get("data"), "data"))
            if not data.corpus_path:
                raise ConfigError("data.corpus_path: required for char-lm")
            vocab, q_len, mode = 0, 0, "causal-lm"
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"data: {exc}") from exc

    mfields = _fields(ModelConfig, raw.get("model"), "model", skip=("question_len", "mode"))
    mfields.setdefault("seed", seed)
    if vocab:
        if mfields.get("vocab_size", vocab) < vocab:
            raise ConfigError(f"model.vocab_size: {mfields['vocab_size']} smaller than the task vocabulary {vocab}")
        mfields.setdefault("vocab_size", vocab)
    try:
        model = ModelConfig(**mfields, question_len=q_len, mode=mode)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc

    rfields = _fields(TrainRun, raw.get("train"), "train")
    rfields.setdefault("seed", seed)
    try:
        run = TrainRun(**rfields)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc

    efields = _fields(EvalSpec, raw.get("eval"), "eval")
    if task == "char-lm":
        efields.setdefault("metric", "bits-per-char")
    ev = EvalSpec(**efields)
    if ev.metric not in METRICS:
        raise ConfigError(f"eval.metric: must be one of {METRICS}, got {ev.metric!r}")
    return Config(task, model, run, data, ev)


def parse_config(path: str | Path) -> Config:
    """Load and fully validate a YAML config; errors name the offending key path."""
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(raw or {})


def _resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


def build_datasets(cfg: Config, base: Path | None = None) -> tuple[Dataset, Dataset]:
    """Training and held-out datasets for the configured task."""
    ev = cfg.eval
    if cfg.task == "kv-retrieval":
        test = dataclasses.replace(cfg.data, num_examples=ev.num_examples, seed=ev.seed)
        return gen_kv_retrieval(cfg.data), gen_kv_retrieval(test)
    text = _resolve(cfg.data.corpus_path, base).read_text()
    cut = int(len(text) * 0.9)
    d = cfg.data
    vocab = char_vocab(text)
    tr, _ = gen_char_lm(CharLMSpec(text[:cut], d.seq_len, d.num_examples, d.seed), vocab)
    te, _ = gen_char_lm(CharLMSpec(text[cut:], d.seq_len, ev.num_examples, ev.seed), vocab)
    return tr, te


def model_for(cfg: Config, train_ds: Dataset) -> ClusterFormerModel:
    mcfg = cfg.model
    if cfg.task == "char-lm" and mcfg.vocab_size < train_ds.vocab_size:
        mcfg = dataclasses.replace(mcfg, vocab_size=train_ds.vocab_size)
    return build_model(mcfg)


class MetricsSink:
    """JSON-lines writer that enforces a strictly increasing ``step`` field."""

    def __init__(self, fh: IO[str]):
        self.fh = fh
        self.last_step: int | None = None


def emit_metrics(sink: MetricsSink, record: dict) -> None:
    if not record:
        raise ValueError("empty metrics record")
    for key, value in record.items():
        if not isinstance(key, str):
            raise ValueError(f"metrics key {key!r} is not a string")
        if not (value is None or isinstance(value, (bool, int, float, str))):
            raise ValueError(f"metrics value for {key!r} is not a scalar: {type(value).__name__}")
    step = record.get("step")
    if not isinstance(step, int) or isinstance(step, bool):
        raise ValueError("metrics record needs an integer 'step'")
    if sink.last_step is not None and step <= sink.last_step:
        raise ValueError(f"step {step} does not follow step {sink.last_step}")
    sink.fh.write(json.dumps(record) + "\n")
    sink.fh.flush()
    sink.last_step = step


def _out_dir(arg: str | None) -> Path:
    out = Path(os.environ.get("CLUSTERFORMER_OUT") or arg or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)
    base = Path(args.config).resolve().parent
    train_ds, test_ds = build_datasets(cfg, base)
    model = model_for(cfg, train_ds)
    out = _out_dir(args.out)
    opt = Adam(model.named_parameters(), lr=cfg.run.lr)
    with open(out / "metrics.jsonl", "w") as fh:
        sink = MetricsSink(fh)
        history = train(model, train_ds, cfg.run, sink=lambda r: emit_metrics(sink, r), optimizer=opt)
        score = evaluate(model, test_ds, cfg.eval.metric)
        emit_metrics(sink, {"step": cfg.run.max_steps + 1, "split": "test", cfg.eval.metric: score})
    save_checkpoint(out / "model.ckpt", model, opt, extra={"config": str(args.config)})
    print(json.dumps({"steps": len(history) and history[-1]["step"], cfg.eval.metric: score, "out": str(out)}))
    return 0


def _cmd_eval(args) -> int:
    cfg = parse_config(args.config)
    base = Path(args.config).resolve().parent
    _, test_ds = build_datasets(cfg, base)
    model = load_checkpoint(args.checkpoint).model
    metrics = [args.metric] if args.metric else [cfg.eval.metric]
    print(json.dumps({m: evaluate(model, test_ds, m) for m in metrics}))
    return 0


def bench_rows(xs: list[int], patterns: list[str], q: int, l: int, m: int, d: int) -> list[dict]:
    return [
        {"pattern": p, "x": x, "q": q, "l": l, "m": m, "macs": attention_cost(x, q, l, m, p, d)}
        for p in patterns
        for x in xs
    ]


def _cmd_bench(args) -> int:
    xs = [int(v) for v in args.x.split(",")]
    patterns = args.pattern.split(",")
    for p in patterns:
        if p not in PATTERNS:
            raise ValueError(f"unknown pattern {p!r}; choose from {', '.join(PATTERNS)}")
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, ["pattern", "x", "q", "l", "m", "macs"])
        w.writeheader()
        w.writerows(bench_rows(xs, patterns, args.q, args.l, args.m, args.d))
    finally:
        if args.out:
            fh.close()
    return 0


@torch.no_grad()
def cluster_stats(model: ClusterFormerModel, ds: Dataset, example: int = 0, max_positions: int = 12) -> list[dict]:
    """Per cluster-former layer: cluster sizes, clustered positions of one example, tour cosine gaps."""
    model.eval()
    tokens = torch.as_tensor(ds.tokens[example : example + 1])
    question = None if ds.questions is None else torch.as_tensor(ds.questions[example : example + 1])
    model.encode(tokens, question)
    stats = []
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, ClusterFormerLayer) or layer.last_route is None:
            continue
        v = layer.last_route.v[0].numpy()
        sizes = np.bincount(v, minlength=layer.p)
        unit = layer.centroids.vectors / np.linalg.norm(layer.centroids.vectors, axis=1, keepdims=True)
        gaps = [float(1.0 - unit[j] @ unit[j + 1]) for j in range(layer.p - 1)]
        positions = _flat_positions(model, tokens, question)
        members = {
            str(c): positions[v == c][:max_positions].tolist() for c in range(layer.p) if sizes[c]
        }
        stats.append(
            {
                "layer": i,
                "epoch": layer.centroids.epoch,
                "T": int(len(v)),
                "sizes": sizes.tolist(),
                "positions": members,
                "tour_cosine_gaps": gaps,
            }
        )
    return stats


def _flat_positions(model: ClusterFormerModel, tokens, question) -> np.ndarray:
    cfg = model.cfg
    layout = plan_chunks(cfg.question_len, tokens.shape[-1], cfg.l, cfg.m)
    return _flat_order(layout)[1].numpy()


def _cmd_cluster_stats(args) -> int:
    cfg = parse_config(args.config)
    base = Path(args.config).resolve().parent
    train_ds, test_ds = build_datasets(cfg, base)
    model = load_checkpoint(args.checkpoint).model if args.checkpoint else model_for(cfg, train_ds)
    stats = cluster_stats(model, test_ds, args.example)
    if not stats:
        raise ValueError("model has no cluster-former layers")
    for rec in stats:
        print(json.dumps(rec))
    return 0


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clusterformer")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config, write metrics.jsonl and model.ckpt")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (CLUSTERFORMER_OUT overrides)")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the config's held-out set")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--metric", choices=METRICS)
    e.set_defaults(fn=_cmd_eval)

    b = sub.add_parser("bench", help="attention MAC counts as CSV")
    b.add_argument("--x", default="1024,2048,4096")
    b.add_argument("--pattern", default=",".join(PATTERNS))
    b.add_argument("--q", type=int, default=0)
    b.add_argument("--l", type=int, default=64)
    b.add_argument("--m", type=int, default=48)
    b.add_argument("--d", type=int, default=1)
    b.add_argument("--out")
    b.set_defaults(fn=_cmd_bench)

    c = sub.add_parser("cluster-stats", help="cluster sizes, clustered positions and centroid tour gaps")
    c.add_argument("--config", required=True)
    c.add_argument("--checkpoint")
    c.add_argument("--example", type=int, default=0)
    c.set_defaults(fn=_cmd_cluster_stats)
    return ap


def run_command(argv: list[str] | None = None) -> int:
    ap = make_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(int(os.environ.get("CLUSTERFORMER_THREADS", "1")))
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
