"""Transformer encoder whose self-attention keys/values are extended by learned memory.

Each layer ``l`` computes

    softmax(Q K^T / sqrt(d)) V,   Q = X W_Q,  K = [X W_K ; M_K],  V = [X W_V ; M_V]

with ``M_K, M_V`` of shape ``(slots, width)`` concatenated along the sequence
axis. Memory rows are split across heads exactly like projected tokens are,
so every head sees ``slots`` extra key/value entries.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    """Raised when NaN/inf activations reach an attention or loss computation."""


def check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int):
    """Multi-head scaled dot-product attention; returns (output, weights)."""
    q, k, v = (split_heads(t, heads) for t in (q, k, v))
    logits = q @ k.transpose(-2, -1) * q.shape[-1] ** -0.5
    weights = logits.softmax(dim=-1)
    return merge_heads(weights @ v), weights


class Mlp(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class MemorySelfAttention(nn.Module):
    """Self-attention with ``slots`` learnable key and value memory rows.

    With ``slots == 0`` this is ordinary multi-head self-attention.
    """

    def __init__(self, width: int, heads: int, slots: int = 0):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} is not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.slots = slots
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.proj = nn.Linear(width, width)
        self.mem_k = nn.Parameter(torch.empty(slots, width))
        self.mem_v = nn.Parameter(torch.empty(slots, width))
        nn.init.normal_(self.mem_k, std=0.02)
        nn.init.normal_(self.mem_v, std=0.02)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        if x.ndim != 3 or x.shape[-1] != self.width:
            raise ValueError(f"expected tokens (batch, n, {self.width}), got {tuple(x.shape)}")
        if x.shape[1] < 1:
            raise ValueError("memory self-attention needs at least one token")
        check_finite(x, "memory self-attention input")
        b = x.shape[0]
        keys = self.k(x)
        values = self.v(x)
        if self.slots:
            keys = torch.cat([keys, self.mem_k.expand(b, -1, -1)], dim=1)
            values = torch.cat([values, self.mem_v.expand(b, -1, -1)], dim=1)
        out, weights = attend(self.q(x), keys, values, self.heads)
        out = self.proj(out)
        return (out, weights) if return_weights else out


class EncoderBlock(nn.Module):
    """Pre-norm block: LN -> memory attention -> residual -> LN -> MLP -> residual."""

    def __init__(self, width: int, heads: int, slots: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = MemorySelfAttention(width, heads, slots)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = Mlp(width, int(width * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def long_skip_sources(depth: int) -> dict[int, int]:
    """Map block index -> earlier block whose output is added to its input.

    Blocks are paired symmetrically (i, depth-1-i). Adjacent pairs are dropped
    since the ordinary residual stream already carries that output.
    """
    return {depth - 1 - i: i for i in range(depth) if depth - 1 - i - i >= 2}


class MemoryEncoder(nn.Module):
    """Stack of memory-augmented blocks returning every block's output."""

    def __init__(
        self,
        width: int,
        depth: int,
        heads: int,
        slots: int,
        mlp_ratio: float = 4.0,
        long_skips: bool = True,
    ):
        super().__init__()
        self.blocks = nn.ModuleList(
            EncoderBlock(width, heads, slots, mlp_ratio) for _ in range(depth)
        )
        self.skips = long_skip_sources(depth) if long_skips else {}

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def forward(self, tokens: torch.Tensor, pos: torch.Tensor | None = None) -> list[torch.Tensor]:
        x = tokens if pos is None else tokens + pos
        outputs: list[torch.Tensor] = []
        for i, block in enumerate(self.blocks):
            if i in self.skips:
                x = x + outputs[self.skips[i]]
            x = block(x)
            check_finite(x, f"encoder block {i} output")
            outputs.append(x)
        return outputs

    def memory_bank(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return [(b.attn.mem_k, b.attn.mem_v) for b in self.blocks]
