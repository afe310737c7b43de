"""
Causal transformer with an incremental key/value cache.

Used on both sides of the codec (after the encoder and before the decoder)
and as the backbone of the token language model. Attention context is
unbounded within a session.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
from torch import Tensor, nn


def create_sin_embedding(positions: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """
    Sinusoidal positional embedding

    Args:
        positions: [T] absolute frame positions
        dim: Embedding size (even)
        max_period: Longest period of the cos/sin pairs

    Returns:
        [T, dim] tensor, cosines first then sines
    """
    half_dim = dim // 2
    positions = positions.to(torch.float32)[:, None]
    adim = torch.arange(half_dim, dtype=torch.float32, device=positions.device)[None, :]
    phase = positions / (max_period ** (adim / max(half_dim - 1, 1)))
    return torch.cat([torch.cos(phase), torch.sin(phase)], dim=-1)


KVCache = Optional[Tuple[Tensor, Tensor]]


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.in_proj = nn.Linear(dim, 3 * dim, bias=False)
        self.out_proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x: Tensor, cache: KVCache = None) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
        B, T, D = x.shape
        q, k, v = self.in_proj(x).chunk(3, dim=-1)
        q, k, v = (t.view(B, T, self.num_heads, self.head_dim).transpose(1, 2) for t in (q, k, v))

        past = 0
        if cache is not None:
            past = cache[0].shape[2]
            k = torch.cat([cache[0], k], dim=2)
            v = torch.cat([cache[1], v], dim=2)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)

        # Query i sits at absolute position past + i and may see keys <= that
        query_pos = torch.arange(T, device=x.device)[:, None] + past
        key_pos = torch.arange(k.shape[2], device=x.device)[None, :]
        scores = scores.masked_fill(key_pos > query_pos, float("-inf"))

        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, T, D)
        return self.out_proj(out), (k, v)


class TransformerLayer(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + ff(norm(x))"""

    def __init__(self, dim: int, num_heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = CausalSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, x: Tensor, cache: KVCache = None):
        y, cache = self.self_attn(self.norm1(x), cache)
        x = x + y
        x = x + self.ff(self.norm2(x))
        return x, cache


@dataclass
class TransformerState:
    """KV caches of every layer plus the number of frames already seen"""
    caches: List[KVCache] = field(default_factory=list)
    offset: int = 0


class CausalTransformer(nn.Module):
    """
    Stack of causal transformer layers over [B, T, dim] sequences

    forward() runs a whole sequence under a causal mask; step() continues a
    sequence from a TransformerState.
    """

    def __init__(self, dim: int, num_heads: int, num_layers: int, ff_dim: int):
        super().__init__()
        self.dim = dim
        self.layers = nn.ModuleList(
            [TransformerLayer(dim, num_heads, ff_dim) for _ in range(num_layers)]
        )

    def _positions(self, length: int, offset: int, device) -> Tensor:
        positions = torch.arange(offset, offset + length, device=device)
        return create_sin_embedding(positions, self.dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self._positions(x.shape[1], 0, x.device)[None]
        for layer in self.layers:
            x, _ = layer(x)
        return x

    def init_state(self) -> TransformerState:
        return TransformerState(caches=[None] * len(self.layers), offset=0)

    def step(self, x: Tensor, state: TransformerState) -> Tuple[Tensor, TransformerState]:
        length = x.shape[1]
        x = x + self._positions(length, state.offset, x.device)[None]
        caches = []
        for layer, cache in zip(self.layers, state.caches):
            x, cache = layer(x, cache)
            caches.append(cache)
        return x, TransformerState(caches=caches, offset=state.offset + length)
