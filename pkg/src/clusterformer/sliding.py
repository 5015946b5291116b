"""Sliding-window encoding over overlapping chunks with mean merging."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Callable

import torch
from torch import Tensor, nn

from .attention import NO_MASK, MaskSpec, TokenGroup, TransformerLayer, encode_indexed

if TYPE_CHECKING:
    from .clustering import MemoryBank


@dataclass(frozen=True)
class ChunkLayout:
    q: int
    x: int
    l: int
    m: int

    @property
    def K(self) -> int:
        return -(-self.x // self.m)

    @property
    def slices(self) -> list[tuple[int, int]]:
        return [(self.m * k, min(self.m * k + self.l, self.x)) for k in range(self.K)]

    @cached_property
    def coverage(self) -> Tensor:
        """Number of chunks covering each context position."""
        c = torch.zeros(self.x, dtype=torch.long)
        for s, e in self.slices:
            c[s:e] += 1
        return c

    @property
    def flat_rows(self) -> int:
        return self.q * self.K + self.x


def plan_chunks(q: int, x: int, l: int, m: int) -> ChunkLayout:
    if x < 1:
        raise ValueError("context must hold at least one token")
    if q < 0:
        raise ValueError("question length must be non-negative")
    if not 0 < m <= l:
        raise ValueError(f"need 0 < m <= l, got m={m}, l={l}")
    return ChunkLayout(q, x, l, m)


@dataclass
class LayerState:
    """Deduplicated hidden states between layers.

    question: (B, K, q, d), one independent copy per chunk.
    context:  (B, x, d), one row per context token.
    """

    question: Tensor
    context: Tensor
    layout: ChunkLayout

    def __post_init__(self):
        B, x, d = self.context.shape
        lay = self.layout
        if x != lay.x:
            raise ValueError(f"context has {x} rows, layout expects {lay.x}")
        if tuple(self.question.shape) != (B, lay.K, lay.q, d):
            raise ValueError(
                f"question shape {tuple(self.question.shape)} != {(B, lay.K, lay.q, d)}"
            )

    @classmethod
    def from_inputs(cls, question: Tensor | None, context: Tensor, l: int, m: int) -> "LayerState":
        """Build the layer-0 state; ``question`` (B, q, d) is copied into every chunk."""
        B, x, d = context.shape
        q = 0 if question is None else question.shape[-2]
        layout = plan_chunks(q, x, l, m)
        if question is None:
            question = context.new_zeros(B, 0, d)
        return cls(question.unsqueeze(1).expand(B, layout.K, q, d), context, layout)

    @property
    def d(self) -> int:
        return self.context.shape[-1]

    @property
    def batch(self) -> int:
        return self.context.shape[0]

    def map(self, fn: Callable[[Tensor], Tensor]) -> "LayerState":
        return LayerState(fn(self.question), fn(self.context), self.layout)


def question_positions(q: int) -> Tensor:
    return torch.arange(-q, 0, dtype=torch.long)


def gather_chunk(state: LayerState, k: int, position_embedding: Tensor | None = None) -> TokenGroup:
    """Chunk k as [Q_k; X[mk : mk+l]] with sentinel/absolute positions.

    ``position_embedding`` (q+l, d), if given, is added by in-chunk index so
    every chunk reuses the same position rows.
    """
    lay = state.layout
    if not 0 <= k < lay.K:
        raise IndexError(f"chunk {k} out of range [0, {lay.K})")
    s, e = lay.slices[k]
    rows = torch.cat([state.question[:, k], state.context[:, s:e]], dim=1)
    if position_embedding is not None:
        rows = rows + position_embedding[: rows.shape[1]]
    pos = torch.cat([question_positions(lay.q), torch.arange(s, e)])
    return TokenGroup(rows, pos)


def scatter_merge(outputs: list[TokenGroup] | list[Tensor], layout: ChunkLayout) -> LayerState:
    """Mean of all chunk outputs covering each context position; question copies verbatim."""
    if len(outputs) != layout.K:
        raise ValueError(f"{len(outputs)} chunk outputs for K={layout.K}")
    tensors = [o.states if isinstance(o, TokenGroup) else o for o in outputs]
    rows = _chunk_rows(layout)
    for k, t in enumerate(tensors):
        if t.shape[-2] != len(rows[k]):
            raise ValueError(f"chunk {k} output has {t.shape[-2]} rows, expected {len(rows[k])}")
    return _merge(torch.cat(tensors, dim=1), torch.cat(rows), layout)


def _merge(y: Tensor, dest: Tensor, layout: ChunkLayout) -> LayerState:
    # y rows are chunk outputs in ascending chunk order; dest their row in the stacked state
    B, _, d = y.shape
    nq = layout.q * layout.K
    total = y.new_zeros(B, nq + layout.x, d).index_add(1, dest, y)
    counts = torch.cat([torch.ones(nq, dtype=torch.long), layout.coverage]).to(y.dtype)
    stacked = total / counts.unsqueeze(-1)
    return LayerState(stacked[:, :nq].reshape(B, layout.K, layout.q, d), stacked[:, nq:], layout)


def stack_state(state: LayerState) -> Tensor:
    """Question copies then context rows as one (B, Kq + x, d) tensor."""
    return torch.cat([state.question.reshape(state.batch, -1, state.d), state.context], dim=1)


_ROWS_CACHE: dict[ChunkLayout, tuple[list[Tensor], Tensor]] = {}


def _chunk_rows_and_positions(layout: ChunkLayout) -> tuple[list[Tensor], Tensor]:
    if layout not in _ROWS_CACHE:
        q, K = layout.q, layout.K
        rows = [
            torch.cat([torch.arange(k * q, (k + 1) * q), torch.arange(K * q + s, K * q + e)])
            for k, (s, e) in enumerate(layout.slices)
        ]
        positions = torch.cat([question_positions(q).repeat(K), torch.arange(layout.x)])
        _ROWS_CACHE[layout] = (rows, positions)
    return _ROWS_CACHE[layout]


def _chunk_rows(layout: ChunkLayout) -> list[Tensor]:
    """Rows of the stacked state making up each chunk, in chunk order."""
    return _chunk_rows_and_positions(layout)[0]


def _length_groups(layout: ChunkLayout) -> list[Tensor]:
    # chunk lengths never increase with k, so grouping by length keeps chunk order
    rows = _chunk_rows(layout)
    groups: list[list[Tensor]] = []
    for r in rows:
        if groups and len(groups[-1][0]) == len(r):
            groups[-1].append(r)
        else:
            groups.append([r])
    return [torch.stack(g) for g in groups]


def flatten_state(state: LayerState) -> tuple[Tensor, Tensor]:
    """H-bar: per chunk k, its question copy then context rows [mk, mk+m).

    Returns rows (B, T, d) and positions (T,), T = qK + x.
    """
    order, positions = _flat_order(state.layout)
    return stack_state(state)[:, order], positions


def unflatten_state(rows: Tensor, layout: ChunkLayout) -> LayerState:
    order, _ = _flat_order(layout)
    B, T, d = rows.shape
    if T != layout.flat_rows:
        raise ValueError(f"{T} flat rows, layout expects {layout.flat_rows}")
    inverse = torch.empty_like(order)
    inverse[order] = torch.arange(T)
    stacked = rows[:, inverse]
    nq = layout.q * layout.K
    question = stacked[:, :nq].reshape(B, layout.K, layout.q, d)
    return LayerState(question, stacked[:, nq:], layout)


_ORDER_CACHE: dict[ChunkLayout, tuple[Tensor, Tensor]] = {}


def _flat_order(layout: ChunkLayout) -> tuple[Tensor, Tensor]:
    # index into cat([question.reshape(B, K*q, d), context]) for every flat row
    if layout not in _ORDER_CACHE:
        q, m, K, x = layout.q, layout.m, layout.K, layout.x
        order, pos = [], []
        for k in range(K):
            order.extend(range(k * q, (k + 1) * q))
            pos.extend(range(-q, 0))
            s, e = m * k, min(m * (k + 1), x)
            order.extend(range(K * q + s, K * q + e))
            pos.extend(range(s, e))
        _ORDER_CACHE[layout] = (torch.tensor(order, dtype=torch.long), torch.tensor(pos, dtype=torch.long))
    return _ORDER_CACHE[layout]


def sliding_window_layer(
    state: LayerState,
    layer: TransformerLayer,
    mask: MaskSpec = NO_MASK,
    bank: "MemoryBank | None" = None,
    position_embedding: Tensor | None = None,
) -> LayerState:
    """gather_chunk -> transformer -> scatter_merge; optionally feed a memory bank.

    Equal-length chunks are gathered and encoded together in one batched call.
    """
    lay = state.layout
    source = stack_state(state)
    _, positions = _chunk_rows_and_positions(lay)
    groups = _length_groups(lay)
    outs = [
        encode_indexed(layer, source, positions, idx, mask, position_embedding).reshape(state.batch, -1, state.d)
        for idx in groups
    ]
    merged = _merge(torch.cat(outs, dim=1), torch.cat([g.reshape(-1) for g in groups]), lay)
    if bank is not None:
        rows, _ = flatten_state(merged)
        bank.push(rows.detach().reshape(-1, merged.d))
    return merged


class SlidingWindowLayer(nn.Module):
    kind = "sliding-window"

    def __init__(self, layer: TransformerLayer):
        super().__init__()
        self.layer = layer

    def forward(self, state: LayerState, mask: MaskSpec = NO_MASK, position_embedding: Tensor | None = None):
        return sliding_window_layer(state, self.layer, mask, position_embedding=position_embedding)
