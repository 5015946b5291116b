"""Model assembly from a per-layer schedule."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
from torch import Tensor, nn

from .attention import CAUSAL, NO_MASK, AttentionConfig, TransformerLayer
from .baselines import LSHLayer, SparsePositionLayer
from .clustering import ClusterFormerLayer, RoutedLayer, UpdateSchedule
from .sliding import LayerState, SlidingWindowLayer, flatten_state, sliding_window_layer

SW, CF, SP, LSH = "sliding-window", "cluster-former", "sparse-position", "lsh"
LAYER_KINDS = (SW, CF, SP, LSH)
MODES = ("qa-encoder", "causal-lm")


@dataclass
class ModelConfig:
    layer_schedule: list[str] = field(default_factory=lambda: [SW, SW, CF, SW])
    num_layers: int | None = None
    d: int = 64
    heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.0
    l: int = 64
    m: int = 48
    clusters: int = 16
    hashes: int = 16
    memory_size: int = 100_000
    kmeans_iters: int = 10
    vocab_size: int = 64
    question_len: int = 0
    mode: str = "qa-encoder"
    seed: int = 0

    def __post_init__(self):
        if self.num_layers is None:
            self.num_layers = len(self.layer_schedule)
        self.validate()

    def validate(self) -> None:
        sched = self.layer_schedule
        if len(sched) != self.num_layers:
            raise ValueError(f"layer_schedule has {len(sched)} entries, num_layers={self.num_layers}")
        if not sched:
            raise ValueError("layer_schedule is empty")
        for i, kind in enumerate(sched):
            if kind not in LAYER_KINDS:
                raise ValueError(f"layer_schedule[{i}]: unknown layer type {kind!r}")
        if sched[0] != SW:
            raise ValueError(
                f"layer_schedule[0] is {sched[0]!r}: cluster-former, lsh and sparse-position "
                "layers must be preceded by a sliding-window layer"
            )
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not in {MODES}")
        if self.mode == "causal-lm" and self.question_len:
            raise ValueError("causal-lm mode takes no question tokens")
        if not 0 < self.m <= self.l:
            raise ValueError(f"need 0 < m <= l, got m={self.m}, l={self.l}")
        AttentionConfig(self.d, self.heads, self.ffn_dim, self.dropout)
        if self.clusters < 1 or self.hashes < 1:
            raise ValueError("clusters and hashes must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class ClusterFormerModel(nn.Module):
    """Token + chunk-position embeddings, the scheduled layer stack, and a vocab head.

    Logits are produced for every context position; retrieval tasks read the
    final position, language modelling reads all of them.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        att = AttentionConfig(cfg.d, cfg.heads, cfg.ffn_dim, cfg.dropout, cfg.mode == "causal-lm")
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.d)
        # same scale as the N(0, 1) token rows, else position is too faint to learn offsets from
        self.position_embedding = nn.Parameter(torch.randn(cfg.question_len + cfg.l, cfg.d))
        layers = []
        for i, kind in enumerate(cfg.layer_schedule):
            block = TransformerLayer(att)
            if kind == SW:
                layers.append(SlidingWindowLayer(block))
            elif kind == CF:
                layers.append(
                    ClusterFormerLayer(
                        block,
                        cfg.m,
                        cfg.clusters,
                        cfg.memory_size,
                        seed=cfg.seed * 1000 + i,
                        schedule=UpdateSchedule(None, cfg.kmeans_iters, cfg.seed),
                    )
                )
            elif kind == LSH:
                layers.append(LSHLayer(block, cfg.m, cfg.hashes, seed=cfg.seed * 1000 + i))
            else:
                layers.append(SparsePositionLayer(block))
        self.layers = nn.ModuleList(layers)
        self.head = nn.Linear(cfg.d, cfg.vocab_size)
        self.iteration: int | None = None

    @property
    def mask(self):
        return CAUSAL if self.cfg.mode == "causal-lm" else NO_MASK

    def cluster_layers(self) -> list[ClusterFormerLayer]:
        return [layer for layer in self.layers if isinstance(layer, ClusterFormerLayer)]

    def routed_layers(self) -> list[RoutedLayer]:
        return [layer for layer in self.layers if isinstance(layer, RoutedLayer)]

    def set_centroid_schedule(self, schedule: UpdateSchedule) -> None:
        for layer in self.cluster_layers():
            layer.schedule = schedule

    def freeze_routes(self, flag: bool = True) -> None:
        for layer in self.routed_layers():
            layer.freeze_routes = flag

    def encode(self, tokens: Tensor, question: Tensor | None = None) -> LayerState:
        """Run the layer stack. ``tokens`` (B, x) and optional ``question`` (B, q) are ids.

        In training mode, states entering a cluster-former layer are pushed to
        its memory bank, and if ``self.iteration`` is set its centroid schedule
        is consulted before routing.
        """
        cfg = self.cfg
        q_emb = None if question is None else self.token_embedding(question)
        if (0 if question is None else question.shape[-1]) != cfg.question_len:
            raise ValueError(f"question length must be {cfg.question_len}")
        state = LayerState.from_inputs(q_emb, self.token_embedding(tokens), cfg.l, cfg.m)
        mask = self.mask
        for i, layer in enumerate(self.layers):
            nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
            feeds = nxt.bank if self.training and isinstance(nxt, ClusterFormerLayer) else None
            if isinstance(layer, SlidingWindowLayer):
                pos = self.position_embedding if i == 0 else None
                state = sliding_window_layer(state, layer.layer, mask, bank=feeds, position_embedding=pos)
                feeds = None
            elif isinstance(layer, ClusterFormerLayer) and self.iteration is not None and self.training:
                layer.refresh(self.iteration)
                state = layer(state, mask)
            else:
                state = layer(state, mask)
            if feeds is not None:
                rows, _ = flatten_state(state)
                feeds.push(rows.detach().reshape(-1, state.d))
        return state

    def forward(self, tokens: Tensor, question: Tensor | None = None) -> Tensor:
        return self.head(self.encode(tokens, question).context)


def build_model(cfg: ModelConfig) -> ClusterFormerModel:
    cfg.validate()
    return ClusterFormerModel(cfg)
