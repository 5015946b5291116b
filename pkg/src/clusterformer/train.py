"""Training loop with periodic centroid refresh, and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .clustering import UpdateSchedule
from .data import Dataset
from .model import ClusterFormerModel
from .nn import Adam, NonFiniteGradientError

log = logging.getLogger(__name__)

METRICS = ("accuracy", "perplexity", "bits-per-char")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class TrainRun:
    lr: float = 1e-3
    warmup: int = 0
    max_steps: int = 1000
    batch_size: int = 8
    clip: float = 1.0
    log_interval: int = 50
    centroid_frequency: int | None = 50  # None: centroids never refreshed
    kmeans_iters: int = 10
    kmeans_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.max_steps < 1 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("max_steps, batch_size and log_interval must be >= 1")
        if not 0 <= self.warmup <= self.max_steps:
            raise ValueError(f"warmup={self.warmup} must lie in [0, max_steps={self.max_steps}]")
        if self.lr < 0 or self.clip <= 0:
            raise ValueError("lr must be >= 0 and clip > 0")

    def lr_at(self, step: int) -> float:
        if self.warmup and step <= self.warmup:
            return self.lr * step / self.warmup
        return self.lr

    def schedule(self) -> UpdateSchedule:
        return UpdateSchedule(self.centroid_frequency, self.kmeans_iters, self.kmeans_seed)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_compatible(model: ClusterFormerModel, ds: Dataset) -> None:
    cfg = model.cfg
    if ds.vocab_size > cfg.vocab_size:
        raise ValueError(f"dataset vocab {ds.vocab_size} exceeds model vocab {cfg.vocab_size}")
    if ds.question_len != cfg.question_len:
        raise ValueError(f"dataset question length {ds.question_len} != model's {cfg.question_len}")
    if (ds.kind == "lm") != (cfg.mode == "causal-lm"):
        raise ValueError(f"{ds.kind} dataset does not fit a {cfg.mode} model")


def batch_logits(model: ClusterFormerModel, ds: Dataset, idx) -> tuple[Tensor, Tensor]:
    """Logits (B, n, V) at the scored positions of examples ``idx``, and targets (B, n)."""
    tokens = torch.as_tensor(ds.tokens[idx])
    question = None if ds.questions is None else torch.as_tensor(ds.questions[idx])
    logits = model(tokens, question)[:, -ds.num_scored :]
    return logits, torch.as_tensor(ds.targets(idx))


def train(
    model: ClusterFormerModel,
    ds: Dataset,
    run: TrainRun,
    sink: Callable[[dict], None] | None = None,
    optimizer: Adam | None = None,
) -> list[dict]:
    """Run ``run.max_steps`` iterations and return the logged metric records.

    Each iteration samples a batch, runs forward (states entering each
    cluster-former layer feed its memory bank, and the layer refreshes its
    centroids when the schedule fires), then cross-entropy, backward,
    global-norm clipping and an Adam step. Pass ``optimizer`` to keep its
    moments afterwards (e.g. for a checkpoint).
    """
    _check_compatible(model, ds)
    torch.manual_seed(run.seed)
    rng = np.random.default_rng(run.seed)
    model.set_centroid_schedule(run.schedule())
    opt = optimizer if optimizer is not None else Adam(model.named_parameters(), lr=run.lr)
    model.train()
    history: list[dict] = []
    try:
        for step in range(1, run.max_steps + 1):
            idx = rng.integers(0, len(ds), run.batch_size)
            model.iteration = step
            logits, targets = batch_logits(model, ds, idx)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
            if not torch.isfinite(loss):
                raise TrainingDiverged(step, f"loss is {loss.item()}")
            opt.zero_grad()
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), run.clip)
            opt.state.lr = run.lr_at(step)
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            if step % run.log_interval == 0 or step == run.max_steps:
                acc = (logits.argmax(-1) == targets).double().mean().item()
                rec = {
                    "step": step,
                    "loss": loss.item(),
                    "accuracy": acc,
                    "lr": opt.state.lr,
                    "grad_norm": float(grad_norm),
                }
                for i, layer in enumerate(model.cluster_layers()):
                    rec[f"centroid_epoch_{i}"] = layer.centroids.epoch
                history.append(rec)
                log.info("step %d loss %.4f acc %.3f", step, rec["loss"], acc)
                if sink is not None:
                    sink(rec)
    finally:
        model.iteration = None
    return history


@torch.no_grad()
def evaluate(model: ClusterFormerModel, ds: Dataset, metric: str = "accuracy", batch_size: int = 32) -> float:
    """Accuracy over scored positions, perplexity exp(mean NLL) or bits-per-char mean NLL / ln 2."""
    if metric not in METRICS:
        raise ValueError(f"metric {metric!r} not in {METRICS}")
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _check_compatible(model, ds)
    was_training = model.training
    model.eval()
    correct = nll = 0.0
    count = 0
    try:
        for s in range(0, len(ds), batch_size):
            idx = np.arange(s, min(s + batch_size, len(ds)))
            logits, targets = batch_logits(model, ds, idx)
            flat = logits.reshape(-1, logits.shape[-1]).double()
            nll += F.cross_entropy(flat, targets.reshape(-1), reduction="sum").item()
            correct += (logits.argmax(-1) == targets).sum().item()
            count += targets.numel()
    finally:
        model.train(was_training)
    if metric == "accuracy":
        return correct / count
    mean_nll = nll / count
    return math.exp(mean_nll) if metric == "perplexity" else mean_nll / math.log(2)
