"""Comparison layers: same-position sparse attention and random-projection LSH routing."""

from __future__ import annotations

import torch
from torch import Tensor

from .attention import NO_MASK, MaskSpec, TransformerLayer, encode_indexed
from .clustering import RoutedLayer, routed_layer
from .sliding import ChunkLayout, LayerState, flatten_state, unflatten_state

_GROUP_CACHE: dict[ChunkLayout, list[Tensor]] = {}


def position_groups(layout: ChunkLayout) -> list[Tensor]:
    """Flat-row indices sharing within-chunk offset j, for j in [0, q+m).

    Chunk k contributes rows [start_k, start_k + q + len_k) of H-bar; the
    short tail chunk simply has no member in the higher-offset groups.
    """
    if layout not in _GROUP_CACHE:
        q, m, K, x = layout.q, layout.m, layout.K, layout.x
        starts, lens = [], []
        pos = 0
        for k in range(K):
            n = q + min(m, x - m * k)
            starts.append(pos)
            lens.append(n)
            pos += n
        groups = []
        for j in range(q + m):
            idx = [starts[k] + j for k in range(K) if j < lens[k]]
            if idx:
                groups.append(torch.tensor(idx, dtype=torch.long))
        _GROUP_CACHE[layout] = groups
    return _GROUP_CACHE[layout]


def sparse_position_layer(state: LayerState, layer: TransformerLayer, mask: MaskSpec = NO_MASK) -> LayerState:
    h, positions = flatten_state(state)
    B, T, d = h.shape
    groups = position_groups(state.layout)
    # offsets past the tail chunk's length form groups one row shorter; batch by size
    by_size: dict[int, list[Tensor]] = {}
    for g in groups:
        by_size.setdefault(len(g), []).append(g)
    outs, dest = [], []
    for members in by_size.values():
        idx = torch.stack(members)
        outs.append(encode_indexed(layer, h, positions, idx, mask).reshape(B, -1, d))
        dest.append(idx.reshape(-1))
    out = torch.zeros_like(h).index_copy(1, torch.cat(dest), torch.cat(outs, dim=1))
    return unflatten_state(out, state.layout)


def lsh_assign(h: Tensor, hyperplanes: Tensor) -> Tensor:
    """Bucket = argmax of the b random projections (lowest bucket on ties)."""
    with torch.no_grad():
        hp = torch.as_tensor(hyperplanes, dtype=h.dtype)
        return (h.detach() @ hp.T).argmax(dim=-1)


def random_hyperplanes(b: int, d: int, seed: int) -> Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, d, generator=g, dtype=torch.float64)


class LSHLayer(RoutedLayer):
    kind = "lsh"

    def __init__(self, layer: TransformerLayer, m: int, b: int, seed: int):
        super().__init__(layer, m)
        self.register_buffer("hyperplanes", random_hyperplanes(b, layer.cfg.d, seed))

    def assign(self, h: Tensor) -> Tensor:
        return lsh_assign(h, self.hyperplanes)


def lsh_layer(state: LayerState, layer: TransformerLayer, hyperplanes: Tensor, mask: MaskSpec = NO_MASK) -> LayerState:
    out, _ = routed_layer(state, layer, lambda h: lsh_assign(h, hyperplanes), state.layout.m, mask)
    return out


class SparsePositionLayer(torch.nn.Module):
    kind = "sparse-position"

    def __init__(self, layer: TransformerLayer):
        super().__init__()
        self.layer = layer

    def forward(self, state: LayerState, mask: MaskSpec = NO_MASK) -> LayerState:
        return sparse_position_layer(state, self.layer, mask)
