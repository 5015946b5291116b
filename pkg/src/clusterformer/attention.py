from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .nn import layer_norm_rows, softmax_rows


@dataclass(frozen=True)
class AttentionConfig:
    d: int
    heads: int
    ffn_dim: int
    dropout: float = 0.0
    causal: bool = False

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")


@dataclass
class TokenGroup:
    """Rows handed to one Transformer call, with their original positions.

    ``states`` is (..., g, d); ``positions`` is (g,) or (..., g). Context
    tokens carry their absolute index in the full sequence, question tokens
    the negative sentinels -q..-1.
    """

    states: Tensor
    positions: Tensor

    def __post_init__(self):
        if self.positions.shape[-1] != self.states.shape[-2]:
            raise ValueError(
                f"{self.positions.shape[-1]} positions for {self.states.shape[-2]} rows"
            )

    def __len__(self) -> int:
        return self.states.shape[-2]


@dataclass(frozen=True)
class MaskSpec:
    mode: Literal["none", "causal"] = "none"

    def allowed(self, positions: Tensor | None) -> Tensor | None:
        """Boolean (..., g, g) mask of keys each query may attend, or None."""
        if self.mode == "none":
            return None
        if positions is None:
            raise ValueError("causal mask needs original positions")
        qp = positions.unsqueeze(-1)
        kp = positions.unsqueeze(-2)
        # question sentinels (<0) are visible to everyone; a question query sees only questions
        return (kp < 0) | ((qp >= 0) & (kp <= qp))


NO_MASK = MaskSpec("none")
CAUSAL = MaskSpec("causal")


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.head_dim = cfg.d // cfg.heads
        self.qkv = nn.Linear(cfg.d, 3 * cfg.d)
        self.out = nn.Linear(cfg.d, cfg.d)

    def forward(
        self,
        x: Tensor,
        positions: Tensor | None = None,
        mask: MaskSpec = NO_MASK,
        return_weights: bool = False,
    ):
        *lead, g, d = x.shape
        h, hd = self.cfg.heads, self.head_dim
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.reshape(*lead, g, h, hd).transpose(-2, -3)
        k = k.reshape(*lead, g, h, hd).transpose(-2, -3)
        v = v.reshape(*lead, g, h, hd).transpose(-2, -3)

        scores = (q * (1.0 / math.sqrt(hd))) @ k.transpose(-1, -2)
        allowed = mask.allowed(positions)
        if allowed is not None:
            allowed = allowed.unsqueeze(-3)
        w = softmax_rows(scores, allowed)
        w_drop = F.dropout(w, self.cfg.dropout, self.training)
        ctx = (w_drop @ v).transpose(-2, -3).reshape(*lead, g, d)
        y = self.out(ctx)
        return (y, w) if return_weights else y


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm_rows(x, self.gain, self.bias, self.eps)


class TransformerLayer(nn.Module):
    """Post-norm block: LN(x + attn(x)), then LN(h + ffn(h))."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.attn = MultiHeadAttention(cfg)
        self.norm1 = LayerNorm(cfg.d)
        self.ff_in = nn.Linear(cfg.d, cfg.ffn_dim)
        self.ff_out = nn.Linear(cfg.ffn_dim, cfg.d)
        self.norm2 = LayerNorm(cfg.d)

    def forward(self, x: Tensor, positions: Tensor | None = None, mask: MaskSpec = NO_MASK) -> Tensor:
        h = self.norm1(x + self.attn(x, positions, mask))
        f = F.dropout(F.gelu(self.ff_in(h)), self.cfg.dropout, self.training)
        return self.norm2(h + self.ff_out(f))


def multi_head_attention(group: TokenGroup, attn: MultiHeadAttention, mask: MaskSpec = NO_MASK) -> Tensor:
    if len(group) == 0:
        raise ValueError("empty token group")
    if group.states.shape[-1] != attn.cfg.d:
        raise ValueError(f"row width {group.states.shape[-1]} != d={attn.cfg.d}")
    return attn(group.states, group.positions, mask)


def transformer_layer(group: TokenGroup, layer: TransformerLayer, mask: MaskSpec = NO_MASK) -> TokenGroup:
    if len(group) == 0:
        raise ValueError("empty token group")
    if group.states.shape[-1] != layer.cfg.d:
        raise ValueError(f"row width {group.states.shape[-1]} != d={layer.cfg.d}")
    return TokenGroup(layer(group.states, group.positions, mask), group.positions)


def encode_groups(layer: TransformerLayer, groups: list[TokenGroup], mask: MaskSpec = NO_MASK) -> list[Tensor]:
    """Run ``layer`` over many groups, batching those of equal length.

    Groups are (B, g, d) with positions (g,) or (B, g). Outputs come back in
    input order, so results do not depend on how groups were batched.
    """
    by_len: dict[int, list[int]] = {}
    for i, grp in enumerate(groups):
        by_len.setdefault(len(grp), []).append(i)
    out: list[Tensor | None] = [None] * len(groups)
    for g, idx in by_len.items():
        states = torch.stack([groups[i].states for i in idx], dim=-3)  # (B, n, g, d)
        lead = states.shape[:-3]
        pos = None
        if mask.mode != "none":
            pos = torch.stack(
                [groups[i].positions.expand(*lead, g) for i in idx], dim=-2
            )
        y = layer(states, pos, mask)
        for j, i in enumerate(idx):
            out[i] = y[..., j, :, :]
    return out


def encode_indexed(
    layer: TransformerLayer,
    source: Tensor,
    positions: Tensor,
    index: Tensor,
    mask: MaskSpec = NO_MASK,
    offset: Tensor | None = None,
) -> Tensor:
    """Encode n equal-length groups of rows picked from ``source`` in one call.

    ``source`` is (B, N, d); ``index`` is (n, g), shared across the batch, or
    (B, n, g); ``positions`` (N,) gives each source row's original position.
    ``offset`` (g, d) is added by within-group index. Returns (B, n, g, d).
    """
    B, N, d = source.shape
    if index.dim() == 2:
        n, g = index.shape
        rows = source.index_select(1, index.reshape(-1)).view(B, n, g, d)
        pos = positions[index]
    else:
        _, n, g = index.shape
        flat = index.reshape(B, n * g)
        rows = torch.gather(source, 1, flat.unsqueeze(-1).expand(B, n * g, d)).view(B, n, g, d)
        pos = positions[flat].view(B, n, g)
    if offset is not None:
        rows = rows + offset[:g]
    return layer(rows, pos if mask.mode != "none" else None, mask)


def attention_cost(
    x: int,
    q: int,
    l: int,
    m: int,
    pattern: str,
    d: int = 1,
) -> int:
    """Multiply-accumulates spent on attention scores in one layer.

    Chunked patterns are charged every chunk at full size, matching the
    closed forms: full (q+x)^2 d, sliding K (q+l)^2 d with K = ceil(x/m),
    cluster and lsh ceil(T/m) m^2 d with T = qK + x, sparse-position
    (q+m) K^2 d.
    """
    if min(x, l, m, d) <= 0 or q < 0:
        raise ValueError("x, l, m, d must be positive and q non-negative")
    if m > l:
        raise ValueError(f"stride m={m} exceeds window l={l}")
    K = -(-x // m)
    if pattern == "full":
        return (q + x) ** 2 * d
    if pattern == "sliding":
        return K * (q + l) ** 2 * d
    if pattern in ("cluster", "lsh"):
        T = q * K + x
        return -(-T // m) * m * m * d
    if pattern == "sparse-position":
        return (q + m) * K * K * d
    raise ValueError(f"unknown pattern {pattern!r}")


PATTERNS = ("full", "sliding", "cluster", "lsh", "sparse-position")
